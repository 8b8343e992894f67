//! Named parameter storage shared by the encoder and decoder.

use crate::numcore::{grad_check, GradCheck, Graph, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Matrix `[fan_in × fan_out]`, applied as `x · W`.
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn fan_in(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered parameter collection. Specs are registered first, then values
/// are filled by an initializer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    specs: Vec<ParamSpec>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn from_parts(specs: Vec<ParamSpec>, values: Vec<Tensor>) -> Self {
        assert_eq!(specs.len(), values.len());
        ParamStore { specs, values }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.specs.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    /// Puts every parameter on `graph`, as leaves when gradients are wanted
    /// and as constants otherwise.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|t| {
                if trainable {
                    graph.leaf(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles indexed by [`ParamId`].
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Collects parameter specs while a model's layout is declared.
#[derive(Debug, Default)]
pub struct ParamRegistry {
    specs: Vec<ParamSpec>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn weight(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize) -> ParamId {
        self.push(name.into(), vec![fan_in, fan_out], ParamKind::Weight)
    }

    pub fn bias(&mut self, name: impl Into<String>, len: usize) -> ParamId {
        self.push(name.into(), vec![len], ParamKind::Bias)
    }

    fn push(&mut self, name: String, shape: Vec<usize>, kind: ParamKind) -> ParamId {
        self.specs.push(ParamSpec { name, shape, kind });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn into_specs(self) -> Vec<ParamSpec> {
        self.specs
    }
}

/// Finite-difference check of `f` with respect to the parameters `ids`;
/// every other parameter is bound as a constant.
pub fn grad_check_params<F, E>(
    store: &ParamStore,
    ids: &[ParamId],
    f: F,
    eps: f64,
) -> Result<GradCheck, E>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var, E>,
    E: From<TensorError>,
{
    let inputs: Vec<Tensor> = ids.iter().map(|&id| store.get(id).clone()).collect();
    grad_check(
        |g, probes| {
            let mut vars = store.bind(g, false).vars;
            for (&id, &v) in ids.iter().zip(probes) {
                vars[id.0] = v;
            }
            f(g, &Bound { vars })
        },
        &inputs,
        eps,
    )
}
