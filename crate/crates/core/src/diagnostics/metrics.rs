//! Latitude-weighted deterministic and ensemble scores.
//!
//! Fields are row-major `[H·W]` slices on a [`LatLonGrid`]; spatial means weight
//! row `h` by `ω_h = cos φ_h / mean(cos φ)`.

use crate::error::{Error, Result};
use crate::grid::LatLonGrid;
use crate::training::crps::fair_crps;

fn check(grid: &LatLonGrid, field: &[f64], what: &'static str) -> Result<()> {
    if field.len() != grid.len() {
        return Err(Error::dim(what, &[field.len()], &[grid.h, grid.w]));
    }
    Ok(())
}

/// `mean_{h,w} ω_h · x`.
pub fn weighted_mean(grid: &LatLonGrid, field: &[f64]) -> Result<f64> {
    check(grid, field, "weighted mean")?;
    let omega = grid.latitude_weights();
    let total: f64 = field.chunks(grid.w).zip(&omega).map(|(row, w)| w * row.iter().sum::<f64>()).sum();
    Ok(total / grid.len() as f64)
}

pub fn latitude_weighted_rmse(grid: &LatLonGrid, pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(grid, pred, "rmse prediction")?;
    check(grid, truth, "rmse truth")?;
    let sq: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).collect();
    Ok(weighted_mean(grid, &sq)?.sqrt())
}

/// Weighted global mean at every lead minus the mean of the first state.
pub fn gmsp_drift(grid: &LatLonGrid, trajectory: &[Vec<f64>]) -> Result<Vec<f64>> {
    let means = trajectory.iter().map(|f| weighted_mean(grid, f)).collect::<Result<Vec<_>>>()?;
    let first = *means.first().ok_or_else(|| Error::config("drift needs at least one state"))?;
    Ok(means.into_iter().map(|m| m - first).collect())
}

/// Scores of one variable at one lead time.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub lead: usize,
    /// RMSE of the ensemble mean.
    pub rmse: f64,
    /// `rmse` divided by the climatological standard deviation.
    pub nrmse: f64,
    /// Weighted mean fair CRPS; `None` for single-member ensembles.
    pub crps: Option<f64>,
    /// Square root of the weighted mean of per-point unbiased member variance.
    pub spread: Option<f64>,
    /// `spread / rmse`.
    pub ssr: Option<f64>,
}

/// Per-lead scores of `members[member][lead]` against `truth[lead]`.
pub fn ensemble_metrics(
    grid: &LatLonGrid,
    members: &[Vec<Vec<f64>>],
    truth: &[Vec<f64>],
    clim_std: f64,
) -> Result<Vec<MetricRow>> {
    let n = members.len();
    if n == 0 {
        return Err(Error::EnsembleSize(0));
    }
    if members.iter().any(|m| m.len() != truth.len()) {
        return Err(Error::config("every member needs one field per truth lead"));
    }
    let omega = grid.latitude_weights();
    let points = grid.len();
    let mut rows = Vec::with_capacity(truth.len());
    for (lead, t) in truth.iter().enumerate() {
        check(grid, t, "truth")?;
        for m in members {
            check(grid, &m[lead], "member")?;
        }
        let mean: Vec<f64> = (0..points)
            .map(|p| members.iter().map(|m| m[lead][p]).sum::<f64>() / n as f64)
            .collect();
        let rmse = latitude_weighted_rmse(grid, &mean, t)?;
        let (mut crps, mut spread) = (None, None);
        if n >= 2 {
            let mut c = 0.0;
            let mut var = 0.0;
            let mut values = vec![0.0; n];
            for p in 0..points {
                let w = omega[p / grid.w];
                for (v, m) in values.iter_mut().zip(members) {
                    *v = m[lead][p];
                }
                c += w * fair_crps(&values, t[p])?;
                var += w * values.iter().map(|v| (v - mean[p]).powi(2)).sum::<f64>() / (n - 1) as f64;
            }
            crps = Some(c / points as f64);
            spread = Some((var / points as f64).sqrt());
        }
        rows.push(MetricRow {
            lead,
            rmse,
            nrmse: rmse / clim_std,
            crps,
            spread,
            ssr: spread.map(|s| s / rmse),
        });
    }
    Ok(rows)
}
