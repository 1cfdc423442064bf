//! Synthetic band-limited datasets on equiangular grids.
//!
//! Every dynamic channel is a random field of degree at most `band_limit` turned by
//! a fixed solid-body rotation about a tilted axis each step, plus fresh
//! band-limited noise. The `msl` channel's noise has no degree-0 part, so its
//! global mean stays fixed. Statics are the unit-sphere coordinates followed by
//! band-limited random fields.
//!
//! Layout of a dataset directory: `state_NNNNN.msgt` (`[H·W, C]`), `statics.msgt`,
//! `stats.msgt` (`[2, C]`, mean and std) and `meta.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::FlatConfig;
use crate::diagnostics::sht::{tri, Coeffs};
use crate::error::{Error, Result};
use crate::grid::LatLonGrid;
use crate::model::{time_embedding, ModelInput, TIME_CHANNELS};
use crate::msgt;
use crate::tensor::{Real, Tensor};
use crate::training::norm::{NormStats, Welford};

pub const META: &str = "meta.txt";
pub const STATICS: &str = "statics.msgt";
pub const STATS: &str = "stats.msgt";
pub const STEP_HOURS: f64 = 24.0;
pub const DAY_HOURS: f64 = 24.0;
pub const YEAR_HOURS: f64 = 8766.0;

pub fn state_file(step: usize) -> String {
    format!("state_{step:05}.msgt")
}

/// Climatological offset and scale of a channel.
pub fn channel_scale(name: &str) -> (f64, f64) {
    match name {
        "msl" => (1013.0, 10.0),
        "t2m" => (288.0, 15.0),
        "z500" => (5500.0, 100.0),
        "t850" => (280.0, 10.0),
        "u10" | "v10" => (0.0, 5.0),
        _ => (0.0, 1.0),
    }
}

/// Channel names for `n` dynamic channels.
pub fn default_channels(n: usize) -> Vec<String> {
    const NAMES: [&str; 4] = ["msl", "t850", "z500", "t2m"];
    (0..n)
        .map(|i| NAMES.get(i).map_or_else(|| format!("u{}", 1000 - 50 * (i - NAMES.len())), |s| s.to_string()))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: Vec<String>,
    pub static_fields: usize,
    pub steps: usize,
    pub band_limit: usize,
    /// Rotation per step in degrees.
    pub rotation_deg: f64,
    /// Colatitude and longitude of the rotation axis in degrees.
    pub axis_deg: (f64, f64),
    /// Noise standard deviation relative to the signal's.
    pub noise: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(grid_h: usize, grid_w: usize, channels: Vec<String>, steps: usize, seed: u64) -> Self {
        SynthConfig {
            grid_h,
            grid_w,
            channels,
            static_fields: 2,
            steps,
            band_limit: 6,
            rotation_deg: 10.0,
            axis_deg: (30.0, 45.0),
            noise: 0.05,
            seed,
        }
    }

    pub fn static_channels(&self) -> usize {
        3 + self.static_fields
    }

    pub fn from_flat(cfg: &FlatConfig) -> Result<Self> {
        let h = cfg.get_or("grid_h", 16)?;
        let w = cfg.get_or("grid_w", 32)?;
        let channels = match cfg.raw("channel_names") {
            Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
            None => default_channels(cfg.get_or("channels", 3)?),
        };
        let mut s = SynthConfig::new(h, w, channels, cfg.get_or("steps", 64)?, cfg.get_or("seed", 0)?);
        s.static_fields = cfg.get_or("static_fields", s.static_fields)?;
        s.band_limit = cfg.get_or("band_limit", s.band_limit)?;
        s.rotation_deg = cfg.get_or("rotation_deg", s.rotation_deg)?;
        s.axis_deg = (cfg.get_or("axis_colat_deg", s.axis_deg.0)?, cfg.get_or("axis_lon_deg", s.axis_deg.1)?);
        s.noise = cfg.get_or("noise", s.noise)?;
        Ok(s)
    }

    pub fn write_flat(&self, cfg: &mut FlatConfig) {
        cfg.set("grid_h", self.grid_h);
        cfg.set("grid_w", self.grid_w);
        cfg.set("channels", self.channels.len());
        cfg.set("channel_names", self.channels.join(","));
        cfg.set("static_fields", self.static_fields);
        cfg.set("steps", self.steps);
        cfg.set("band_limit", self.band_limit);
        cfg.set("rotation_deg", self.rotation_deg);
        cfg.set("axis_colat_deg", self.axis_deg.0);
        cfg.set("axis_lon_deg", self.axis_deg.1);
        cfg.set("noise", self.noise);
        cfg.set("seed", self.seed);
    }

    pub fn validate(&self) -> Result<()> {
        let grid = LatLonGrid::new(self.grid_h, self.grid_w)?;
        if self.channels.is_empty() || self.steps == 0 {
            return Err(Error::config("synthetic data needs at least one channel and one step"));
        }
        if self.band_limit + 1 > grid.h.min(grid.w / 2) {
            return Err(Error::config(format!(
                "band limit {} not representable on a {}x{} grid",
                self.band_limit, grid.h, grid.w
            )));
        }
        Ok(())
    }
}

/// Unit-power random coefficients up to `n_max` with a red spectrum; degree 0 only `with_mean`.
fn random_field<R: Rng>(n_max: usize, rng: &mut R, with_mean: bool) -> Coeffs {
    let mut c = Coeffs::zeros(n_max);
    for n in usize::from(!with_mean)..=n_max {
        let amp = 1.0 / (n as f64 + 1.0);
        for m in 0..=n {
            c.cos[tri(n, m)] = amp * Distribution::<f64>::sample(&StandardNormal, rng);
            if m > 0 {
                c.sin[tri(n, m)] = amp * Distribution::<f64>::sample(&StandardNormal, rng);
            }
        }
    }
    let rms = c.power().iter().sum::<f64>().sqrt();
    for v in c.cos.iter_mut().chain(c.sin.iter_mut()) {
        *v /= rms;
    }
    c
}

/// Rotation by `angle` about the unit `axis` (Rodrigues).
fn rotate(p: [f64; 3], axis: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    let dot = axis[0] * p[0] + axis[1] * p[1] + axis[2] * p[2];
    let cross = [
        axis[1] * p[2] - axis[2] * p[1],
        axis[2] * p[0] - axis[0] * p[2],
        axis[0] * p[1] - axis[1] * p[0],
    ];
    std::array::from_fn(|i| p[i] * c + cross[i] * s + axis[i] * dot * (1.0 - c))
}

fn xyz_to_latlon(p: [f64; 3]) -> (f64, f64) {
    (p[2].clamp(-1.0, 1.0).asin(), p[1].atan2(p[0]))
}

/// Writes the dataset and returns its directory.
pub fn generate(cfg: &SynthConfig, dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let grid = LatLonGrid::new(cfg.grid_h, cfg.grid_w)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let points = grid.xyz();
    let c = cfg.channels.len();

    let (colat, lon) = (cfg.axis_deg.0.to_radians(), cfg.axis_deg.1.to_radians());
    let axis = [colat.sin() * lon.cos(), colat.sin() * lon.sin(), colat.cos()];
    let fields: Vec<Coeffs> = (0..c).map(|_| random_field(cfg.band_limit, &mut rng, true)).collect();

    let mut statics = Vec::with_capacity(grid.len() * cfg.static_channels());
    let static_fields: Vec<Coeffs> = (0..cfg.static_fields)
        .map(|_| random_field(cfg.band_limit, &mut rng, false))
        .collect();
    for p in &points {
        statics.extend_from_slice(p);
        let (lat, lon) = xyz_to_latlon(*p);
        statics.extend(static_fields.iter().map(|f| f.eval(lat, lon)));
    }
    msgt::write(&dir.join(STATICS), &Tensor::<f32>::from_f64(&[grid.len(), cfg.static_channels()], &statics)?)?;

    let mut welford = Welford::new(c);
    let step_angle = cfg.rotation_deg.to_radians();
    for t in 0..cfg.steps {
        let noise: Vec<Coeffs> = cfg
            .channels
            .iter()
            .map(|name| random_field(cfg.band_limit, &mut rng, name != "msl"))
            .collect();
        let mut state = vec![0.0; grid.len() * c];
        for (i, p) in points.iter().enumerate() {
            // Rotating the field by +θ samples the initial field at R(−θ)·x.
            let (lat, lon) = xyz_to_latlon(rotate(*p, axis, -step_angle * t as f64));
            let (lat0, lon0) = xyz_to_latlon(*p);
            for (ch, name) in cfg.channels.iter().enumerate() {
                let (offset, scale) = channel_scale(name);
                let value = fields[ch].eval(lat, lon) + cfg.noise * noise[ch].eval(lat0, lon0);
                state[i * c + ch] = offset + scale * value;
            }
        }
        let tensor = Tensor::<f64>::from_f64(&[grid.len(), c], &state)?;
        welford.push_state(&tensor)?;
        msgt::write(&dir.join(state_file(t)), &tensor.cast::<f32>())?;
    }
    msgt::write(&dir.join(STATS), &welford.finish()?.to_tensor())?;

    let mut meta = FlatConfig::new();
    cfg.write_flat(&mut meta);
    meta.set("step_hours", STEP_HOURS);
    let path = dir.join(META);
    fs::write(&path, meta.render()).map_err(|e| Error::io(&path, e))?;
    Ok(dir.to_path_buf())
}

/// One training or evaluation example in normalized space.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub input: ModelInput<T>,
    /// The next `k` states.
    pub targets: Vec<Tensor<T>>,
    /// Time features of the newest input state before each of the `k` predictions.
    pub times: Vec<[f64; TIME_CHANNELS]>,
}

/// A dataset directory held in memory.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub config: SynthConfig,
    pub grid: LatLonGrid,
    /// Raw (physical) states.
    pub states: Vec<Tensor<T>>,
    /// Normalized statics.
    pub statics: Tensor<T>,
    pub stats: NormStats,
}

impl<T: Real> Dataset<T> {
    pub fn load(dir: &Path) -> Result<Self> {
        let config = SynthConfig::from_flat(&FlatConfig::load(&dir.join(META))?)?;
        let grid = LatLonGrid::new(config.grid_h, config.grid_w)?;
        let states = (0..config.steps)
            .map(|t| msgt::read::<T>(&dir.join(state_file(t))))
            .collect::<Result<Vec<_>>>()?;
        let stats = NormStats::from_tensor(&msgt::read::<f64>(&dir.join(STATS))?)?;
        let raw_statics = msgt::read::<T>(&dir.join(STATICS))?;
        let mut w = Welford::new(config.static_channels());
        w.push_state(&raw_statics)?;
        let statics = w.finish()?.normalize(&raw_statics)?;
        for s in &states {
            if s.shape() != [grid.len(), config.channels.len()] {
                return Err(Error::Format {
                    path: dir.to_path_buf(),
                    reason: format!("state of shape {:?}", s.shape()),
                });
            }
        }
        Ok(Dataset {
            config,
            grid,
            states,
            statics,
            stats,
        })
    }

    pub fn channels(&self) -> &[String] {
        &self.config.channels
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Number of start indices that have `history` inputs and `k` targets.
    pub fn num_samples(&self, history: usize, k: usize) -> usize {
        self.states.len().saturating_sub(history + k - 1)
    }

    pub fn normalized(&self, t: usize) -> Result<Tensor<T>> {
        self.stats.normalize(&self.states[t])
    }

    pub fn time(&self, t: usize) -> [f64; TIME_CHANNELS] {
        time_embedding(t as f64 * STEP_HOURS, DAY_HOURS, YEAR_HOURS)
    }

    /// Inputs at `start..start+history`, targets at the following `k` steps.
    pub fn sample(&self, start: usize, history: usize, k: usize) -> Result<Sample<T>> {
        if start >= self.num_samples(history, k) {
            return Err(Error::OutOfRange {
                index: start,
                limit: self.num_samples(history, k),
            });
        }
        let input = ModelInput {
            history: (start..start + history).map(|t| self.normalized(t)).collect::<Result<_>>()?,
            statics: self.statics.clone(),
            time: self.time(start + history - 1),
        };
        let targets = (start + history..start + history + k)
            .map(|t| self.normalized(t))
            .collect::<Result<_>>()?;
        let times = (0..k).map(|j| self.time(start + history - 1 + j)).collect();
        Ok(Sample { input, targets, times })
    }
}
