//! Latitude- and variable-weighted fair CRPS objective.

use crate::error::{Error, Result};
use crate::grid::LatLonGrid;
use crate::tensor::{Graph, Real, Tensor, Var};

use super::crps::fair_crps_graph;

/// Mean pressure of the 13 standard levels in hPa.
pub const MEAN_PRESSURE_HPA: f64 = 463.46;

/// `α(p) = p / p̄`.
pub fn pressure_alpha(p_hpa: f64) -> f64 {
    p_hpa / MEAN_PRESSURE_HPA
}

/// Fixed surface weights; `None` for unknown names.
pub fn surface_alpha(name: &str) -> Option<f64> {
    match name {
        "t2m" => Some(1.0),
        "u10" | "v10" | "msl" => Some(0.1),
        _ => None,
    }
}

/// Weight of a channel named either after a surface variable or `<var><level hPa>`
/// such as `t850` or `z500`.
pub fn channel_alpha(name: &str) -> Result<f64> {
    if let Some(a) = surface_alpha(name) {
        return Ok(a);
    }
    let split = name.find(|c: char| c.is_ascii_digit());
    match split.map(|i| (&name[..i], name[i..].parse::<f64>())) {
        Some((var, Ok(p))) if !var.is_empty() && p > 0.0 => Ok(pressure_alpha(p)),
        _ => Err(Error::config(format!("no loss weight for channel {name:?}"))),
    }
}

/// Per-channel `α_i` and per-row `ω_h`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: Vec<f64>,
    pub omega: Vec<f64>,
    pub width: usize,
}

impl LossWeights {
    pub fn new(grid: &LatLonGrid, alpha: Vec<f64>) -> Self {
        LossWeights {
            alpha,
            omega: grid.latitude_weights(),
            width: grid.w,
        }
    }

    pub fn for_channels(grid: &LatLonGrid, names: &[String]) -> Result<Self> {
        Ok(Self::new(grid, names.iter().map(|n| channel_alpha(n)).collect::<Result<_>>()?))
    }

    /// `α_c·ω_h` as a `[H·W, C]` tensor.
    pub fn tensor<T: Real>(&self) -> Tensor<T> {
        let c = self.alpha.len();
        Tensor::from_fn(&[self.omega.len() * self.width * c], |i| {
            T::lit(self.alpha[i % c] * self.omega[i / c / self.width])
        })
        .reshape(&[self.omega.len() * self.width, c])
        .expect("sizes agree")
    }
}

/// `(1/HW)Σ_{h,w}Σ_i α_i ω_h CRPS` for one sample; members and truth are `[H·W, C]`.
pub fn weighted_loss<T: Real>(g: &mut Graph<T>, members: &[Var], truth: Var, weights: &LossWeights) -> Result<Var> {
    let shape = g.shape(truth).to_vec();
    let expect = [weights.omega.len() * weights.width, weights.alpha.len()];
    if shape != expect {
        return Err(Error::dim("loss weights", &shape, &expect));
    }
    let crps = fair_crps_graph(g, members, truth)?;
    let w = g.constant(weights.tensor());
    let weighted = g.mul(crps, w)?;
    let total = g.sum_all(weighted);
    Ok(g.scale(total, 1.0 / shape[0] as f64))
}
