//! Equiangular, cell-centered latitude/longitude grids.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// `h` latitude rows from north to south, `w` longitudes starting at 0.
///
/// Row `i` sits at colatitude `(i + 0.5)·π/h`; column `j` at longitude `2πj/w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatLonGrid {
    pub h: usize,
    pub w: usize,
}

impl LatLonGrid {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h < 2 || w < 2 {
            return Err(Error::config(format!("grid {h}x{w} must have at least 2 rows and columns")));
        }
        Ok(LatLonGrid { h, w })
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn colat(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * PI / self.h as f64
    }

    pub fn lat(&self, i: usize) -> f64 {
        PI / 2.0 - self.colat(i)
    }

    pub fn lon(&self, j: usize) -> f64 {
        2.0 * PI * j as f64 / self.w as f64
    }

    pub fn lats(&self) -> Vec<f64> {
        (0..self.h).map(|i| self.lat(i)).collect()
    }

    /// `(lon, lat)` of every point, row-major.
    pub fn lonlat(&self) -> Vec<(f64, f64)> {
        (0..self.h)
            .flat_map(|i| (0..self.w).map(move |j| (self.lon(j), self.lat(i))))
            .collect()
    }

    /// Unit vectors of every point, row-major.
    pub fn xyz(&self) -> Vec<[f64; 3]> {
        self.lonlat().into_iter().map(|(lon, lat)| lonlat_to_xyz(lon, lat)).collect()
    }

    /// `cos φ_h / mean(cos φ)`; averages to one over rows.
    pub fn latitude_weights(&self) -> Vec<f64> {
        let c: Vec<f64> = (0..self.h).map(|i| self.lat(i).cos()).collect();
        let mean = c.iter().sum::<f64>() / self.h as f64;
        c.into_iter().map(|v| v / mean).collect()
    }

    /// Fejér first-rule weights in `cos θ` for the cell-centered colatitudes; they sum to 2.
    pub fn quadrature_weights(&self) -> Vec<f64> {
        let n = self.h;
        (0..n)
            .map(|i| {
                let theta = self.colat(i);
                let s: f64 = (1..=n / 2)
                    .map(|l| (2.0 * l as f64 * theta).cos() / (4.0 * (l * l) as f64 - 1.0))
                    .sum();
                2.0 / n as f64 * (1.0 - 2.0 * s)
            })
            .collect()
    }
}

pub fn lonlat_to_xyz(lon: f64, lat: f64) -> [f64; 3] {
    let (sl, cl) = lat.sin_cos();
    let (so, co) = lon.sin_cos();
    [cl * co, cl * so, sl]
}

/// Great-circle distance between unit vectors.
pub fn angular_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let cross = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    let sin = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    let cos = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    sin.atan2(cos)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latitude_weights_average_to_one() {
        let g = LatLonGrid::new(32, 64).unwrap();
        let w = g.latitude_weights();
        assert!((w.iter().sum::<f64>() / 32.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fejer_weights_integrate_polynomials_in_cos() {
        let g = LatLonGrid::new(16, 32).unwrap();
        let w = g.quadrature_weights();
        for k in 0..10 {
            let exact = if k % 2 == 0 { 2.0 / (k as f64 + 1.0) } else { 0.0 };
            let q: f64 = (0..16).map(|i| w[i] * g.colat(i).cos().powi(k)).sum();
            assert!((q - exact).abs() < 1e-12, "degree {k}: {q} vs {exact}");
        }
    }

    #[test]
    fn distance_is_symmetric_and_bounded() {
        let a = lonlat_to_xyz(0.1, 0.2);
        let b = lonlat_to_xyz(3.0, -1.0);
        assert_eq!(angular_distance(&a, &b), angular_distance(&b, &a));
        assert!((angular_distance(&a, &[-a[0], -a[1], -a[2]]) - PI).abs() < 1e-12);
    }
}
