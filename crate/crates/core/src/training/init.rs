use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::numcore::Tensor;
use crate::params::{ParamKind, ParamSpec, ParamStore};

/// Kaiming-normal weights (`N(0, 2 / fan_in)`) and zero biases, drawn in
/// spec order from one seeded stream. Values are rounded to 32-bit
/// precision so checkpoints store them exactly.
pub fn init_params(specs: &[ParamSpec], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = specs
        .iter()
        .map(|spec| match spec.kind {
            ParamKind::Bias => Tensor::zeros(&spec.shape),
            ParamKind::Weight => {
                let std = (2.0 / spec.fan_in() as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                let data = (0..spec.numel())
                    .map(|_| normal.sample(&mut rng) as f32 as f64)
                    .collect();
                Tensor::new(spec.shape.clone(), data).expect("spec shape")
            }
        })
        .collect();
    ParamStore::from_parts(specs.to_vec(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamRegistry;

    #[test]
    fn biases_zero_and_deterministic() {
        let mut reg = ParamRegistry::new();
        reg.weight("w", 8, 4);
        reg.bias("b", 4);
        let a = init_params(reg.specs(), 3);
        let b = init_params(reg.specs(), 3);
        assert_eq!(a, b);
        assert!(a.values()[1].data().iter().all(|&v| v == 0.0));
        let bits = |s: &ParamStore| s.values()[0].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(a, init_params(reg.specs(), 4));
    }

    #[test]
    fn kaiming_variance() {
        let mut reg = ParamRegistry::new();
        reg.weight("w", 512, 512);
        let s = init_params(reg.specs(), 0);
        let d = s.values()[0].data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
        let target = 2.0 / 512.0;
        assert!((var - target).abs() <= 0.15 * target, "{var}");
    }
}
