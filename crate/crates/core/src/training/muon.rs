//! Muon: momentum with Newton-Schulz orthogonalized updates for weight matrices.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::{Real, Tensor};

pub const MOMENTUM: f64 = 0.95;
pub const NS_STEPS: usize = 5;
pub const WEIGHT_DECAY: f64 = 1e-2;
pub const CLIP_NORM: f64 = 1.0;

/// Published quintic `X ← aX + b(XXᵀ)X + c(XXᵀ)²X`.
pub const QUINTIC: (f64, f64, f64) = (3.4445, -4.7750, 2.0315);
/// Convergent quintic with fixed point 1 used for the final steps.
pub const CONVERGENT: (f64, f64, f64) = (15.0 / 8.0, -10.0 / 8.0, 3.0 / 8.0);
/// Steps at the end of the iteration that use [`CONVERGENT`].
pub const CONVERGENT_STEPS: usize = 2;

/// Approximates `UVᵀ` of the SVD `G = USVᵀ`. Zero input gives zero output.
pub fn newton_schulz(g: &Tensor<f64>, steps: usize) -> Result<Tensor<f64>> {
    let (rows, cols) = g.dims2()?;
    let norm = g.norm();
    if norm == 0.0 || !norm.is_finite() {
        if !norm.is_finite() {
            return Err(Error::Numeric("non-finite gradient matrix".into()));
        }
        return Ok(Tensor::zeros(&[rows, cols]));
    }
    let tall = rows > cols;
    let mut x = if tall { g.transpose()? } else { g.clone() };
    x = x.scale(1.0 / norm);
    // ||XXᵀ||_F^(1/2) = (Σσ⁴)^(1/4) bounds σ_max more tightly than ||X||_F.
    let gram = x.matmul_nt(&x)?;
    x = x.scale(1.0 / gram.norm().sqrt());
    for i in 0..steps {
        let (a, b, c) = if i + CONVERGENT_STEPS >= steps { CONVERGENT } else { QUINTIC };
        let gram = x.matmul_nt(&x)?;
        let poly = gram.scale(b).add(&gram.matmul(&gram)?.scale(c))?;
        x = x.scale(a).add(&poly.matmul(&x)?)?;
    }
    if tall {
        x.transpose()
    } else {
        Ok(x)
    }
}

/// Global L2 norm over all gradients.
pub fn global_norm<T: Real>(grads: &[(String, Tensor<T>)]) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data().iter().map(|v| v.as_f64() * v.as_f64()))
        .sum::<f64>()
        .sqrt()
}

/// Scales gradients so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [(String, Tensor<T>)], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

/// Optimizer state. Two-dimensional parameters with both sides above one take
/// orthogonalized steps; all others take plain Nesterov momentum steps.
#[derive(Clone, Debug)]
pub struct Muon {
    pub beta: f64,
    pub nesterov: bool,
    pub ns_steps: usize,
    pub weight_decay: f64,
    momentum: BTreeMap<String, Tensor<f64>>,
}

impl Default for Muon {
    fn default() -> Self {
        Muon {
            beta: MOMENTUM,
            nesterov: true,
            ns_steps: NS_STEPS,
            weight_decay: WEIGHT_DECAY,
            momentum: BTreeMap::new(),
        }
    }
}

fn is_matrix(shape: &[usize]) -> bool {
    shape.len() == 2 && shape[0] > 1 && shape[1] > 1
}

impl Muon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn momentum(&self, name: &str) -> Option<&Tensor<f64>> {
        self.momentum.get(name)
    }

    /// Applies one update with separate rates for matrices and other parameters.
    /// Weight decay is decoupled and scaled by the same rate.
    pub fn step<T: Real>(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &[(String, Tensor<T>)],
        matrix_lr: f64,
        other_lr: f64,
    ) -> Result<()> {
        for (name, grad) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != grad.shape() {
                return Err(Error::dim("optimizer gradient", grad.shape(), p.shape()));
            }
            let g = grad.cast::<f64>();
            let buf = self
                .momentum
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            *buf = buf.scale(self.beta).add(&g)?;
            let dir = if self.nesterov { g.add(&buf.scale(self.beta))? } else { buf.clone() };
            let (update, lr) = if is_matrix(p.shape()) {
                let (r, c) = (p.shape()[0] as f64, p.shape()[1] as f64);
                (newton_schulz(&dir, self.ns_steps)?.scale((r / c).max(1.0).sqrt()), matrix_lr)
            } else {
                (dir, other_lr)
            };
            if lr == 0.0 {
                continue;
            }
            let decay = 1.0 - lr * self.weight_decay;
            for (w, u) in p.data_mut().iter_mut().zip(update.data()) {
                *w = T::lit(w.as_f64() * decay - lr * u);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_is_a_fixed_point() {
        for n in [2, 8, 32] {
            let out = newton_schulz(&Tensor::eye(n), NS_STEPS).unwrap();
            assert!(out.max_abs_diff(&Tensor::eye(n)).unwrap() < 1e-3);
        }
    }

    #[test]
    fn diagonal_singular_values_go_to_one() {
        let g = Tensor::from_f64(&[2, 2], &[3.0, 0.0, 0.0, 1.0]).unwrap();
        let out = newton_schulz(&g, NS_STEPS).unwrap();
        assert!(out.max_abs_diff(&Tensor::eye(2)).unwrap() < 5e-2);
    }

    #[test]
    fn zero_and_transpose_symmetry() {
        assert_eq!(newton_schulz(&Tensor::zeros(&[3, 4]), 5).unwrap(), Tensor::zeros(&[3, 4]));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Tensor::<f64>::randn(&[8, 5], 1.0, &mut rng);
        let a = newton_schulz(&g, 5).unwrap();
        let b = newton_schulz(&g.transpose().unwrap(), 5).unwrap().transpose().unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut grads = vec![("a".to_string(), Tensor::<f64>::from_f64(&[2], &[6.0, 8.0]).unwrap())];
        assert_eq!(clip_global_norm(&mut grads, 1.0), 10.0);
        assert!((global_norm(&grads) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        let mut p = ParamSet::<f64>::new();
        p.insert("w", Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        p.insert("b", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let before = p.clone();
        let grads = vec![
            ("w".to_string(), Tensor::ones(&[2, 2])),
            ("b".to_string(), Tensor::ones(&[2])),
        ];
        let mut opt = Muon::new();
        opt.step(&mut p, &grads, 0.0, 0.0).unwrap();
        for (name, t) in before.iter() {
            assert_eq!(p.get(name).unwrap(), t);
        }
        opt.step(&mut p, &grads, 0.1, 0.1).unwrap();
        assert_ne!(p.get("b").unwrap(), before.get("b").unwrap());
    }
}
