use super::graph::{Graph, Var};
use super::tensor::{Tensor, TensorError};

/// Gradients smaller than this are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(input, flat coordinate)` where the worst error occurred.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

fn evaluate<F, E>(f: &F, inputs: &[Tensor]) -> Result<f64, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.value(out)
        .item()
        .ok_or_else(|| TensorError::NonScalar(g.shape(out).to_vec()).into())
}

/// Compares the tape's gradient of a scalar-valued `f` against central
/// differences `(f(x+eps) - f(x-eps)) / (2 eps)` for every input coordinate.
///
/// `f` is rebuilt from scratch for each probe, so any randomness inside it
/// must be reseeded per call.
pub fn grad_check<F, E>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_rel_error: f64 = 0.0;
    let mut worst = None;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut num = vec![0.0; input.len()];
        for j in 0..input.len() {
            let x = input.data()[j];
            probe[i].data_mut()[j] = x + eps;
            let plus = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = x - eps;
            let minus = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = x;
            num[j] = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[i].data()[j], num[j]);
            if err > max_rel_error || worst.is_none() {
                max_rel_error = max_rel_error.max(err);
                worst = Some((i, j));
            }
        }
        numeric.push(Tensor::new(input.shape().to_vec(), num)?);
    }
    Ok(GradCheck {
        max_rel_error,
        worst,
        analytic,
        numeric,
    })
}
