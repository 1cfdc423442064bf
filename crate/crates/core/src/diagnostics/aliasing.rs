//! Spectral aliasing of pointwise nonlinearities evaluated on HEALPix meshes.
//!
//! A band-limited signal is point-sampled at the pixel centers of a mesh, passed
//! through the nonlinearity, analysed by equal-weight pixel quadrature up to
//! degree `2·nside` and resynthesized on an equiangular grid. Power the mesh cannot
//! represent folds back onto resolved degrees. Comparing a coarse mesh against
//! the native one isolates the fold-back.

use std::ops::RangeInclusive;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::LatLonGrid;
use crate::healpix::HealpixMesh;

use super::sht::{legendre, tri, Coeffs, Sht};

/// Power per DFT frequency `0..=n/2` of a ring of `n` equispaced samples.
///
/// Normalized so that `cos(k·x)` with `0 < k < n/2` has power `1/2` at `k`.
pub fn ring_power(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    (0..=n / 2)
        .map(|k| {
            let (mut c, mut s) = (0.0, 0.0);
            for (j, v) in values.iter().enumerate() {
                let (sn, cs) = (2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64).sin_cos();
                c += v * cs;
                s += v * sn;
            }
            let p = (c * c + s * s) / (n * n) as f64;
            if k == 0 || 2 * k == n {
                p
            } else {
                2.0 * p
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nonlinearity {
    Identity,
    Square,
}

impl Nonlinearity {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Identity => x,
            Nonlinearity::Square => x * x,
        }
    }

    /// Factor by which the band limit grows.
    pub fn degree_factor(self) -> usize {
        match self {
            Nonlinearity::Identity => 1,
            Nonlinearity::Square => 2,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Nonlinearity::Identity),
            "square" => Ok(Nonlinearity::Square),
            _ => Err(Error::config(format!("unknown nonlinearity {s:?} (identity, square)"))),
        }
    }
}

/// Random band-limited test field.
#[derive(Clone, Debug)]
pub struct AliasSignal {
    pub coeffs: Coeffs,
}

impl AliasSignal {
    /// Coefficients `N(0, 1)·amp` with `amp = 1/n` on `1..=red_max` and `boost_amp`
    /// on `boost`.
    pub fn new(red_max: usize, boost: RangeInclusive<usize>, boost_amp: f64, seed: u64) -> Self {
        let n_max = red_max.max(*boost.end());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut coeffs = Coeffs::zeros(n_max);
        for n in 1..=n_max {
            let amp = if boost.contains(&n) {
                boost_amp
            } else if n <= red_max {
                1.0 / n as f64
            } else {
                continue;
            };
            for m in 0..=n {
                let k = tri(n, m);
                coeffs.cos[k] = amp * Distribution::<f64>::sample(&StandardNormal, &mut rng);
                if m > 0 {
                    coeffs.sin[k] = amp * Distribution::<f64>::sample(&StandardNormal, &mut rng);
                }
            }
        }
        AliasSignal { coeffs }
    }

    /// Red spectrum to degree 8 plus a boosted band at degrees 12 and 13, above
    /// the Nyquist degree 8 of an nside 4 mesh.
    pub fn supra_nyquist(seed: u64) -> Self {
        Self::new(8, 12..=13, 0.7, seed)
    }

    pub fn band_limit(&self) -> usize {
        self.coeffs.n_max
    }
}

/// Equal-weight quadrature analysis of mesh values up to `n_max`.
fn mesh_analyze(mesh: &HealpixMesh, values: &[f64], n_max: usize) -> Coeffs {
    let mut out = Coeffs::zeros(n_max);
    let scale = 1.0 / mesh.npix() as f64;
    for ((&lat, &lon), &v) in mesh.lat().iter().zip(mesh.lon()).zip(values) {
        let p = legendre(n_max, lat.sin(), lat.cos());
        for m in 0..=n_max {
            let (s, c) = (m as f64 * lon).sin_cos();
            for n in m..=n_max {
                let k = tri(n, m);
                out.cos[k] += scale * v * p[k] * c;
                out.sin[k] += scale * v * p[k] * s;
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct AliasReport {
    pub native_nside: usize,
    pub coarse_nside: usize,
    /// Ratio of the native pipeline's spectrum to the reference, degrees `0..=2·native`.
    pub native: Vec<Option<f64>>,
    /// Same for the coarse pipeline, degrees `0..=2·coarse`.
    pub coarse: Vec<Option<f64>>,
    /// Degrees `(L_c/2, L_c]` with `L_c = 2·coarse_nside`.
    pub band: RangeInclusive<usize>,
    /// Mean of `coarse / native` over the defined degrees of `band`; `None` when the
    /// reference has no power there.
    pub excess: Option<f64>,
}

/// Relative reference power below which a degree counts as empty.
const EMPTY_POWER: f64 = 1e-12;

/// Both pipelines against the spectrum of `nonlinearity(signal)` on a fine grid.
pub fn aliasing_demo(
    signal: &AliasSignal,
    native_nside: usize,
    coarse_nside: usize,
    nonlinearity: Nonlinearity,
) -> Result<AliasReport> {
    if coarse_nside > native_nside {
        return Err(Error::config(format!(
            "coarse nside {coarse_nside} exceeds native nside {native_nside}"
        )));
    }
    let l_native = 2 * native_nside;
    // Fejér nodes integrate products of the output and reference degrees exactly.
    let h = (l_native + nonlinearity.degree_factor() * signal.band_limit() + 2).next_multiple_of(2);
    let grid = LatLonGrid::new(h, 2 * h)?;
    let sht = Sht::new(grid, l_native)?;

    let fine: Vec<f64> = grid
        .lonlat()
        .into_iter()
        .map(|(lon, lat)| nonlinearity.apply(signal.coeffs.eval(lat, lon)))
        .collect();
    let reference = sht.power_spectrum(&fine)?;
    let floor = EMPTY_POWER * reference.iter().sum::<f64>();

    let pipeline = |nside: usize| -> Result<Vec<Option<f64>>> {
        let mesh = HealpixMesh::new(nside)?;
        let values: Vec<f64> = mesh
            .lat()
            .iter()
            .zip(mesh.lon())
            .map(|(&lat, &lon)| nonlinearity.apply(signal.coeffs.eval(lat, lon)))
            .collect();
        let decoded = sht.synthesize(&embed(&mesh_analyze(&mesh, &values, 2 * nside), l_native));
        let power = sht.power_spectrum(&decoded)?;
        Ok((0..=2 * nside)
            .map(|n| (reference[n] > floor).then(|| power[n] / reference[n]))
            .collect())
    };
    let native = pipeline(native_nside)?;
    let coarse = pipeline(coarse_nside)?;

    let l_coarse = 2 * coarse_nside;
    let band = l_coarse / 2 + 1..=l_coarse;
    let pairs: Vec<f64> = band
        .clone()
        .filter_map(|n| Some(coarse[n]? / native[n]?))
        .collect();
    let excess = (!pairs.is_empty()).then(|| pairs.iter().sum::<f64>() / pairs.len() as f64);
    Ok(AliasReport {
        native_nside,
        coarse_nside,
        native,
        coarse,
        band,
        excess,
    })
}

/// Zero-padded copy of `c` at degree `n_max ≥ c.n_max`.
fn embed(c: &Coeffs, n_max: usize) -> Coeffs {
    let mut out = Coeffs::zeros(n_max);
    out.cos[..c.cos.len()].copy_from_slice(&c.cos);
    out.sin[..c.sin.len()].copy_from_slice(&c.sin);
    out
}
