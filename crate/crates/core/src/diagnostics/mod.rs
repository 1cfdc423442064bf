//! Forecast verification and spectral analysis.

pub mod aliasing;
pub mod metrics;
pub mod sht;

pub use aliasing::{aliasing_demo, ring_power, AliasReport, AliasSignal, Nonlinearity};
pub use metrics::{ensemble_metrics, gmsp_drift, latitude_weighted_rmse, weighted_mean, MetricRow};
pub use sht::{Coeffs, Sht};

/// Ratio of mean spectra per degree; `None` where the reference has no power.
///
/// With `amplitude` the square root of the power ratio is returned.
pub fn spectral_ratio(model: &[Vec<f64>], reference: &[Vec<f64>], amplitude: bool) -> Vec<Option<f64>> {
    let mean = |spectra: &[Vec<f64>]| -> Vec<f64> {
        let len = spectra.iter().map(Vec::len).min().unwrap_or(0);
        (0..len)
            .map(|n| spectra.iter().map(|s| s[n]).sum::<f64>() / spectra.len() as f64)
            .collect()
    };
    let (m, r) = (mean(model), mean(reference));
    m.iter()
        .zip(&r)
        .map(|(&a, &b)| {
            if b > 0.0 {
                let ratio = a / b;
                Some(if amplitude { ratio.sqrt() } else { ratio })
            } else {
                None
            }
        })
        .collect()
}

pub const DEFAULT_RESOLUTION_TOLERANCE: f64 = 0.1;

/// Largest degree `n` with `ratio` inside `[1 − τ, 1 + τ]` for every degree `1..=n`.
/// Degree 0 is ignored; a missing ratio ends the resolved range.
pub fn effective_resolution(ratio: &[Option<f64>], tolerance: f64) -> usize {
    let mut resolved = 0;
    for (n, r) in ratio.iter().enumerate().skip(1) {
        match r {
            Some(v) if (v - 1.0).abs() <= tolerance => resolved = n,
            _ => break,
        }
    }
    resolved
}

/// Great-circle wavelength in kilometres of spherical-harmonic degree `n` on Earth.
pub fn degree_to_wavelength_km(n: usize) -> f64 {
    const EARTH_RADIUS_KM: f64 = 6371.0;
    2.0 * std::f64::consts::PI * EARTH_RADIUS_KM / ((n * (n + 1)) as f64).sqrt().max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_identities() {
        let a = vec![vec![1.0, 2.0, 0.0], vec![3.0, 4.0, 0.0]];
        assert_eq!(spectral_ratio(&a, &a, false), vec![Some(1.0), Some(1.0), None]);
        let half: Vec<Vec<f64>> = a.iter().map(|s| s.iter().map(|v| 0.25 * v).collect()).collect();
        assert_eq!(spectral_ratio(&half, &a, false)[..2], [Some(0.25), Some(0.25)]);
        assert_eq!(spectral_ratio(&half, &a, true)[0], Some(0.5));
    }

    #[test]
    fn resolution_from_ratio() {
        let ones = vec![Some(1.0); 21];
        assert_eq!(effective_resolution(&ones, 0.1), 20);
        let mut drop = ones.clone();
        drop[10] = Some(0.85);
        assert_eq!(effective_resolution(&drop, 0.1), 9);
        drop[3] = None;
        assert_eq!(effective_resolution(&drop, 0.1), 2);
    }
}
