//! Real spherical-harmonic analysis on equiangular grids by direct quadrature.
//!
//! Harmonics are 4π-normalized, `(1/4π)∫ Y² dΩ = 1`, so the per-degree powers of a
//! field sum to its area mean of `f²`. Latitude integrals use the grid's Fejér
//! weights; each ring is reduced to Fourier sums first.

use crate::error::{Error, Result};
use crate::grid::LatLonGrid;

/// Index of `(n, m)` in triangular storage, `0 ≤ m ≤ n`.
pub fn tri(n: usize, m: usize) -> usize {
    n * (n + 1) / 2 + m
}

pub fn tri_len(n_max: usize) -> usize {
    tri(n_max + 1, 0)
}

/// Fully normalized associated Legendre functions `P̄_nm(cos θ)` for `n ≤ n_max`.
pub fn legendre(n_max: usize, cos: f64, sin: f64) -> Vec<f64> {
    let mut p = vec![0.0; tri_len(n_max)];
    p[0] = 1.0;
    for m in 1..=n_max {
        let f = if m == 1 { 3f64.sqrt() } else { ((2 * m + 1) as f64 / (2 * m) as f64).sqrt() };
        p[tri(m, m)] = f * sin * p[tri(m - 1, m - 1)];
    }
    for m in 0..n_max {
        p[tri(m + 1, m)] = ((2 * m + 3) as f64).sqrt() * cos * p[tri(m, m)];
        for n in m + 2..=n_max {
            let (nf, mf) = (n as f64, m as f64);
            let a = ((2.0 * nf - 1.0) * (2.0 * nf + 1.0) / ((nf - mf) * (nf + mf))).sqrt();
            let b = ((2.0 * nf + 1.0) * (nf + mf - 1.0) * (nf - mf - 1.0) / ((nf - mf) * (nf + mf) * (2.0 * nf - 3.0))).sqrt();
            p[tri(n, m)] = a * cos * p[tri(n - 1, m)] - b * p[tri(n - 2, m)];
        }
    }
    p
}

/// Cosine and sine coefficients `a_nm`, `b_nm` (the latter zero for `m = 0`).
#[derive(Clone, Debug, PartialEq)]
pub struct Coeffs {
    pub n_max: usize,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl Coeffs {
    pub fn zeros(n_max: usize) -> Self {
        Coeffs {
            n_max,
            cos: vec![0.0; tri_len(n_max)],
            sin: vec![0.0; tri_len(n_max)],
        }
    }

    /// `Σ_nm a_nm Y^c_nm + b_nm Y^s_nm` at one point.
    pub fn eval(&self, lat: f64, lon: f64) -> f64 {
        let p = legendre(self.n_max, lat.sin(), lat.cos());
        let mut total = 0.0;
        for m in 0..=self.n_max {
            let (s, c) = (m as f64 * lon).sin_cos();
            for n in m..=self.n_max {
                let k = tri(n, m);
                total += p[k] * (self.cos[k] * c + self.sin[k] * s);
            }
        }
        total
    }

    /// `C_n = Σ_m a_nm² + b_nm²`.
    pub fn power(&self) -> Vec<f64> {
        (0..=self.n_max)
            .map(|n| (0..=n).map(|m| self.cos[tri(n, m)].powi(2) + self.sin[tri(n, m)].powi(2)).sum())
            .collect()
    }
}

/// Analysis and synthesis on one grid up to degree `n_max`.
#[derive(Clone, Debug)]
pub struct Sht {
    grid: LatLonGrid,
    n_max: usize,
    weights: Vec<f64>,
    /// Per row, triangular `P̄_nm`.
    legendre: Vec<Vec<f64>>,
}

impl Sht {
    /// Requires `n_max ≤ min(H, W/2) − 1`.
    pub fn new(grid: LatLonGrid, n_max: usize) -> Result<Self> {
        let limit = grid.h.min(grid.w / 2);
        if n_max + 1 > limit {
            return Err(Error::config(format!(
                "n_max {n_max} too large for a {}x{} grid (at most {})",
                grid.h,
                grid.w,
                limit.saturating_sub(1)
            )));
        }
        let legendre = (0..grid.h)
            .map(|i| {
                let theta = grid.colat(i);
                legendre(n_max, theta.cos(), theta.sin())
            })
            .collect();
        Ok(Sht {
            grid,
            n_max,
            weights: grid.quadrature_weights(),
            legendre,
        })
    }

    pub fn grid(&self) -> LatLonGrid {
        self.grid
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    fn check(&self, field: &[f64]) -> Result<()> {
        if field.len() != self.grid.len() {
            return Err(Error::dim("spherical transform", &[field.len()], &[self.grid.h, self.grid.w]));
        }
        Ok(())
    }

    pub fn analyze(&self, field: &[f64]) -> Result<Coeffs> {
        self.check(field)?;
        let (h, w) = (self.grid.h, self.grid.w);
        let trig: Vec<Vec<(f64, f64)>> = (0..=self.n_max)
            .map(|m| (0..w).map(|j| (m as f64 * self.grid.lon(j)).sin_cos()).collect())
            .collect();
        let mut out = Coeffs::zeros(self.n_max);
        for i in 0..h {
            let ring = &field[i * w..(i + 1) * w];
            let p = &self.legendre[i];
            for (m, t) in trig.iter().enumerate() {
                let (mut c, mut s) = (0.0, 0.0);
                for (v, &(sn, cs)) in ring.iter().zip(t) {
                    c += v * cs;
                    s += v * sn;
                }
                let scale = 0.5 * self.weights[i] / w as f64;
                for n in m..=self.n_max {
                    let k = tri(n, m);
                    out.cos[k] += scale * p[k] * c;
                    out.sin[k] += scale * p[k] * s;
                }
            }
        }
        Ok(out)
    }

    pub fn synthesize(&self, coeffs: &Coeffs) -> Vec<f64> {
        (0..self.grid.h)
            .flat_map(|i| {
                let lat = self.grid.lat(i);
                (0..self.grid.w).map(move |j| (lat, self.grid.lon(j)))
            })
            .map(|(lat, lon)| coeffs.eval(lat, lon))
            .collect()
    }

    pub fn power_spectrum(&self, field: &[f64]) -> Result<Vec<f64>> {
        Ok(self.analyze(field)?.power())
    }

    /// Area mean of `f²` by the same quadrature.
    pub fn mean_square(&self, field: &[f64]) -> Result<f64> {
        self.check(field)?;
        let w = self.grid.w;
        Ok((0..self.grid.h)
            .map(|i| 0.5 * self.weights[i] * field[i * w..(i + 1) * w].iter().map(|v| v * v).sum::<f64>() / w as f64)
            .sum())
    }
}
