//! U-Net forecast network on a HEALPix hierarchy.
//!
//! Grid inputs are embedded by a small MLP, interpolated to the finest mesh and
//! passed through encoder stages of block-sparse transformer blocks, with learned
//! quad-tree coarsening between stages. The decoder refines back up, adding encoder
//! skips, and the result is interpolated to the grid and mapped to the dynamic
//! channels. A global noise vector enters every feed-forward gate.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bsa::{self, AttentionConfig, Branches, ROPE_THETA};
use crate::config::FlatConfig;
use crate::error::{Error, Result};
use crate::grid::LatLonGrid;
use crate::healpix::{npix, HealpixMesh};
use crate::interp::{InterpOperator, DEFAULT_NEIGHBORS};
use crate::nn::{ParamSet, RESIDUAL_INIT_STD};
use crate::tensor::{Graph, Real, RopeTable, Tensor, Var};

pub const TIME_CHANNELS: usize = 4;
pub const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub nside: usize,
    pub dim: usize,
    pub heads: usize,
    pub gqa_ratio: usize,
    pub enc_depth: usize,
    /// Ignored for the last (bottleneck) stage.
    pub dec_depth: usize,
    pub block: usize,
    pub local_block: usize,
    pub top_n: usize,
}

impl StageConfig {
    #[allow(clippy::too_many_arguments)]
    pub const fn new(
        nside: usize,
        dim: usize,
        heads: usize,
        gqa_ratio: usize,
        enc_depth: usize,
        dec_depth: usize,
        block: usize,
        local_block: usize,
        top_n: usize,
    ) -> Self {
        StageConfig {
            nside,
            dim,
            heads,
            gqa_ratio,
            enc_depth,
            dec_depth,
            block,
            local_block,
            top_n,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Finest first; the last stage is the bottleneck.
    pub stages: Vec<StageConfig>,
    pub mlp_ratio: f64,
    pub history: usize,
    pub c_dyn: usize,
    pub c_static: usize,
    pub noise_dim: usize,
    pub neighbors: usize,
    pub rope_theta: f64,
    /// Predict `x_{t+1} − x_t` and add the last input state back.
    pub residual: bool,
}

impl ModelConfig {
    /// Full-size architecture; constructible but never run by the tests.
    pub fn paper() -> Self {
        ModelConfig {
            grid_h: 120,
            grid_w: 240,
            stages: vec![
                StageConfig::new(64, 768, 12, 4, 4, 2, 128, 1024, 24),
                StageConfig::new(32, 1024, 16, 4, 4, 2, 128, 1024, 12),
                StageConfig::new(16, 1280, 20, 4, 2, 0, 128, 1024, 4),
            ],
            mlp_ratio: 4.0,
            history: 2,
            c_dyn: 82,
            c_static: 6,
            noise_dim: 32,
            neighbors: DEFAULT_NEIGHBORS,
            rope_theta: ROPE_THETA,
            residual: false,
        }
    }

    /// Laptop-scale mirror of [`ModelConfig::paper`].
    pub fn desk() -> Self {
        ModelConfig {
            grid_h: 32,
            grid_w: 64,
            stages: vec![
                StageConfig::new(16, 64, 4, 4, 2, 1, 64, 256, 6),
                StageConfig::new(8, 96, 6, 3, 2, 1, 64, 256, 4),
                StageConfig::new(4, 128, 8, 4, 1, 0, 64, 192, 2),
            ],
            mlp_ratio: 4.0,
            history: 2,
            c_dyn: 4,
            c_static: 5,
            noise_dim: 32,
            neighbors: DEFAULT_NEIGHBORS,
            rope_theta: ROPE_THETA,
            residual: false,
        }
    }

    /// Smallest configuration exercising every component; trains in minutes.
    pub fn toy() -> Self {
        ModelConfig {
            grid_h: 16,
            grid_w: 32,
            stages: vec![
                StageConfig::new(8, 32, 2, 2, 1, 1, 16, 64, 6),
                StageConfig::new(4, 48, 3, 3, 1, 1, 16, 64, 4),
                StageConfig::new(2, 64, 4, 4, 1, 0, 16, 48, 2),
            ],
            mlp_ratio: 2.0,
            history: 2,
            c_dyn: 3,
            c_static: 5,
            noise_dim: 16,
            neighbors: 8,
            rope_theta: ROPE_THETA,
            residual: false,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::config(format!("unknown model preset {other:?}"))),
        }
    }

    /// `T·C_dyn + C_static + 4` values per grid point.
    pub fn input_width(&self) -> usize {
        self.history * self.c_dyn + self.c_static + TIME_CHANNELS
    }

    pub fn d_ff(&self, stage: usize) -> usize {
        (self.mlp_ratio * self.stages[stage].dim as f64).round() as usize
    }

    pub fn attention(&self, stage: usize) -> AttentionConfig {
        let s = &self.stages[stage];
        AttentionConfig {
            d_model: s.dim,
            heads: s.heads,
            gqa_ratio: s.gqa_ratio,
            head_dim: s.head_dim(),
            block: s.block,
            local_block: s.local_block,
            top_n: s.top_n,
            rope_theta: self.rope_theta,
            branches: Branches::ALL,
            fixed_gates: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        LatLonGrid::new(self.grid_h, self.grid_w)?;
        if self.stages.is_empty() {
            return Err(Error::config("model needs at least one stage"));
        }
        if self.history == 0 || self.c_dyn == 0 || self.noise_dim == 0 || self.neighbors == 0 {
            return Err(Error::config("history, c_dyn, noise_dim and neighbors must be positive"));
        }
        if self.mlp_ratio <= 0.0 || !self.mlp_ratio.is_finite() {
            return Err(Error::config(format!("invalid mlp ratio {}", self.mlp_ratio)));
        }
        for (i, s) in self.stages.iter().enumerate() {
            crate::healpix::check_nside(s.nside)?;
            if i > 0 && s.nside * 2 != self.stages[i - 1].nside {
                return Err(Error::config(format!(
                    "stage {i}: nside {} must halve the previous {}",
                    s.nside,
                    self.stages[i - 1].nside
                )));
            }
            if s.heads == 0 || s.dim % s.heads != 0 {
                return Err(Error::config(format!("stage {i}: {} heads must divide dim {}", s.heads, s.dim)));
            }
            if s.enc_depth == 0 {
                return Err(Error::config(format!("stage {i}: encoder depth must be positive")));
            }
            self.attention(i).validate(npix(s.nside))?;
        }
        Ok(())
    }

    /// Same network entering one level coarser; block sizes shrink to fit.
    pub fn compressed(&self) -> Result<Self> {
        let mut out = self.clone();
        for s in &mut out.stages {
            if s.nside < 2 {
                return Err(Error::config("cannot coarsen a stage at nside 1"));
            }
            s.nside /= 2;
            let n = npix(s.nside);
            s.block = s.block.min(4 * s.nside * s.nside);
            s.local_block = if s.local_block >= n { n } else { s.local_block };
            if n % s.local_block != 0 {
                s.local_block = s.block;
            }
            s.top_n = s.top_n.min(n / s.block);
        }
        out.validate()?;
        Ok(out)
    }

    /// Reads `model` (preset name, default `desk`) and overrides from `cfg`.
    ///
    /// Stage keys are `stage.<i>.<field>` with fields `nside, dim, heads, gqa_ratio,
    /// enc_depth, dec_depth, block_size, local_block_size, top_n`.
    pub fn from_flat(cfg: &FlatConfig) -> Result<Self> {
        let mut m = Self::preset(cfg.raw("model").unwrap_or("desk"))?;
        m.grid_h = cfg.get_or("grid_h", m.grid_h)?;
        m.grid_w = cfg.get_or("grid_w", m.grid_w)?;
        m.mlp_ratio = cfg.get_or("mlp_ratio", m.mlp_ratio)?;
        m.history = cfg.get_or("history", m.history)?;
        m.c_dyn = cfg.get_or("channels", m.c_dyn)?;
        m.c_static = cfg.get_or("static_channels", m.c_static)?;
        m.noise_dim = cfg.get_or("noise_dim", m.noise_dim)?;
        m.neighbors = cfg.get_or("neighbors", m.neighbors)?;
        m.rope_theta = cfg.get_or("rope_theta", m.rope_theta)?;
        m.residual = cfg.get_or("residual", m.residual)?;
        let count: usize = cfg.get_or("stages", m.stages.len())?;
        m.stages.resize(count, m.stages.last().cloned().unwrap_or(StageConfig::new(1, 16, 1, 1, 1, 0, 12, 12, 1)));
        for (i, s) in m.stages.iter_mut().enumerate() {
            let key = |f: &str| format!("stage.{i}.{f}");
            s.nside = cfg.get_or(&key("nside"), s.nside)?;
            s.dim = cfg.get_or(&key("dim"), s.dim)?;
            s.heads = cfg.get_or(&key("heads"), s.heads)?;
            s.gqa_ratio = cfg.get_or(&key("gqa_ratio"), s.gqa_ratio)?;
            s.enc_depth = cfg.get_or(&key("enc_depth"), s.enc_depth)?;
            s.dec_depth = cfg.get_or(&key("dec_depth"), s.dec_depth)?;
            s.block = cfg.get_or(&key("block_size"), s.block)?;
            s.local_block = cfg.get_or(&key("local_block_size"), s.local_block)?;
            s.top_n = cfg.get_or(&key("top_n"), s.top_n)?;
        }
        m.validate()?;
        Ok(m)
    }

    /// Writes every field so [`ModelConfig::from_flat`] reproduces `self`.
    pub fn write_flat(&self, cfg: &mut FlatConfig) {
        cfg.set("grid_h", self.grid_h);
        cfg.set("grid_w", self.grid_w);
        cfg.set("mlp_ratio", self.mlp_ratio);
        cfg.set("history", self.history);
        cfg.set("channels", self.c_dyn);
        cfg.set("static_channels", self.c_static);
        cfg.set("noise_dim", self.noise_dim);
        cfg.set("neighbors", self.neighbors);
        cfg.set("rope_theta", self.rope_theta);
        cfg.set("residual", self.residual);
        cfg.set("stages", self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            let key = |f: &str| format!("stage.{i}.{f}");
            cfg.set(&key("nside"), s.nside);
            cfg.set(&key("dim"), s.dim);
            cfg.set(&key("heads"), s.heads);
            cfg.set(&key("gqa_ratio"), s.gqa_ratio);
            cfg.set(&key("enc_depth"), s.enc_depth);
            cfg.set(&key("dec_depth"), s.dec_depth);
            cfg.set(&key("block_size"), s.block);
            cfg.set(&key("local_block_size"), s.local_block);
            cfg.set(&key("top_n"), s.top_n);
        }
    }
}

/// Sine and cosine of the fractional day and year at time `t`.
pub fn time_embedding(t: f64, day_period: f64, year_period: f64) -> [f64; TIME_CHANNELS] {
    let tau = 2.0 * std::f64::consts::PI;
    let (sd, cd) = (tau * t / day_period).sin_cos();
    let (sy, cy) = (tau * t / year_period).sin_cos();
    [sd, cd, sy, cy]
}

/// Everything one forward pass reads besides the noise.
#[derive(Clone, Debug)]
pub struct ModelInput<T> {
    /// Oldest first, each `[grid points, C_dyn]`.
    pub history: Vec<Tensor<T>>,
    /// `[grid points, C_static]`.
    pub statics: Tensor<T>,
    pub time: [f64; TIME_CHANNELS],
}

/// Geometry and precomputed operators for one configuration.
pub struct Model<T> {
    cfg: ModelConfig,
    grid: LatLonGrid,
    meshes: Vec<HealpixMesh>,
    ropes: Vec<Arc<RopeTable<T>>>,
    to_mesh: InterpOperator,
    to_grid: InterpOperator,
    /// Child minus parent centers for transition `s → s+1`, `[npix_{s+1}, 12]`.
    offsets: Vec<Tensor<T>>,
}

impl<T: Real> Model<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = LatLonGrid::new(cfg.grid_h, cfg.grid_w)?;
        let meshes = cfg
            .stages
            .iter()
            .map(|s| HealpixMesh::new(s.nside))
            .collect::<Result<Vec<_>>>()?;
        let ropes = cfg
            .stages
            .iter()
            .zip(&meshes)
            .map(|(s, m)| RopeTable::new(&m.lonlat(), s.head_dim(), cfg.rope_theta).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        let to_mesh = InterpOperator::grid_to_mesh(&meshes[0], &grid, cfg.neighbors)?;
        let to_grid = InterpOperator::mesh_to_grid(&meshes[0], &grid, cfg.neighbors)?;
        let offsets = meshes.windows(2).map(|w| child_offsets(&w[0], &w[1])).collect();
        Ok(Model {
            cfg,
            grid,
            meshes,
            ropes,
            to_mesh,
            to_grid,
            offsets,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn grid(&self) -> LatLonGrid {
        self.grid
    }

    pub fn mesh(&self, stage: usize) -> &HealpixMesh {
        &self.meshes[stage]
    }

    /// Deterministic parameters; values are identical across precisions.
    pub fn init_params(&self, seed: u64) -> ParamSet<T> {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::<f64>::new();
        let d0 = cfg.stages[0].dim;
        p.init_linear("embed.in", cfg.input_width(), d0, None, &mut rng);
        p.init_bias("embed.in", d0);
        p.init_linear("embed.out", d0, d0, None, &mut rng);
        p.init_bias("embed.out", d0);
        InterpOperator::init_params(&mut p, "interp_in", d0, &mut rng);
        p.init_linear("noise.z", cfg.noise_dim, cfg.noise_dim, Some(RESIDUAL_INIT_STD), &mut rng);
        let last = cfg.stages.len() - 1;
        for s in 0..cfg.stages.len() {
            for i in 0..cfg.stages[s].enc_depth {
                init_block(&mut p, &format!("s{s}.enc{i}"), cfg, s, &mut rng);
            }
            if s < last {
                let (din, dout) = (cfg.stages[s].dim, cfg.stages[s + 1].dim);
                p.init_linear(&format!("down{s}.x"), 4 * din, dout, None, &mut rng);
                p.init_linear(&format!("down{s}.p"), 12, dout, None, &mut rng);
            }
        }
        for s in (0..last).rev() {
            let (dp, dc) = (cfg.stages[s + 1].dim, cfg.stages[s].dim);
            p.init_linear(&format!("up{s}.x"), dp, 4 * dc, Some(RESIDUAL_INIT_STD), &mut rng);
            p.init_linear(&format!("up{s}.p"), 12, 4 * dc, Some(RESIDUAL_INIT_STD), &mut rng);
            for i in 0..cfg.stages[s].dec_depth {
                init_block(&mut p, &format!("s{s}.dec{i}"), cfg, s, &mut rng);
            }
        }
        InterpOperator::init_params(&mut p, "interp_out", d0, &mut rng);
        p.init_linear("head.hidden", d0, d0, None, &mut rng);
        p.init_bias("head.hidden", d0);
        p.init_linear("head.out", d0, cfg.c_dyn, None, &mut rng);
        p.init_bias("head.out", cfg.c_dyn);
        p.cast()
    }

    /// Concatenated per-point input features `[grid points, input_width]`.
    pub fn embed_inputs(&self, input: &ModelInput<T>) -> Result<Tensor<T>> {
        let cfg = &self.cfg;
        let n = self.grid.len();
        if input.history.len() != cfg.history {
            return Err(Error::config(format!(
                "history has {} states, model expects {}",
                input.history.len(),
                cfg.history
            )));
        }
        for h in &input.history {
            if h.shape() != [n, cfg.c_dyn] {
                return Err(Error::dim("history state", h.shape(), &[n, cfg.c_dyn]));
            }
        }
        if input.statics.shape() != [n, cfg.c_static] {
            return Err(Error::dim("static fields", input.statics.shape(), &[n, cfg.c_static]));
        }
        let width = cfg.input_width();
        let mut out = Vec::with_capacity(n * width);
        for p in 0..n {
            for h in &input.history {
                out.extend_from_slice(&h.data()[p * cfg.c_dyn..(p + 1) * cfg.c_dyn]);
            }
            out.extend_from_slice(&input.statics.data()[p * cfg.c_static..(p + 1) * cfg.c_static]);
            out.extend(input.time.iter().map(|&v| T::lit(v)));
        }
        Tensor::new(&[n, width], out)
    }

    /// Normalized next state `[grid points, C_dyn]` for noise `z`.
    pub fn forward(&self, g: &mut Graph<T>, params: &ParamSet<T>, input: &ModelInput<T>, z: &[f64]) -> Result<Var> {
        let cfg = &self.cfg;
        if z.len() != cfg.noise_dim {
            return Err(Error::dim("noise", &[z.len()], &[cfg.noise_dim]));
        }
        let x = g.constant(self.embed_inputs(input)?);
        let x = params.linear(g, "embed.in", x)?;
        let x = g.rmsnorm(x, RMS_EPS);
        let x = g.silu(x);
        let x = params.linear(g, "embed.out", x)?;
        let x = g.rmsnorm(x, RMS_EPS);
        let mut x = self.to_mesh.apply(g, params, "interp_in", x)?;

        let zv = g.constant(Tensor::from_fn(&[1, cfg.noise_dim], |i| T::lit(z[i])));
        let zv = params.linear(g, "noise.z", zv)?;

        let last = cfg.stages.len() - 1;
        let mut skips = Vec::with_capacity(last);
        for s in 0..=last {
            for i in 0..cfg.stages[s].enc_depth {
                x = self.block(g, params, &format!("s{s}.enc{i}"), s, x, zv)?;
            }
            if s < last {
                skips.push(x);
                let off = g.constant(self.offsets[s].clone());
                x = coarsen(g, params, &format!("down{s}"), x, off)?;
            }
        }
        for s in (0..last).rev() {
            let off = g.constant(self.offsets[s].clone());
            let skip = skips.pop().expect("one skip per coarsening");
            x = refine(g, params, &format!("up{s}"), x, off, skip)?;
            for i in 0..cfg.stages[s].dec_depth {
                x = self.block(g, params, &format!("s{s}.dec{i}"), s, x, zv)?;
            }
        }

        let x = g.rmsnorm(x, RMS_EPS);
        let x = self.to_grid.apply(g, params, "interp_out", x)?;
        let x = g.rmsnorm(x, RMS_EPS);
        let x = params.linear(g, "head.hidden", x)?;
        let x = g.silu(x);
        let y = params.linear(g, "head.out", x)?;
        if cfg.residual {
            let last_state = g.constant(input.history[cfg.history - 1].clone());
            g.add(y, last_state)
        } else {
            Ok(y)
        }
    }

    fn block(&self, g: &mut Graph<T>, params: &ParamSet<T>, prefix: &str, stage: usize, x: Var, z: Var) -> Result<Var> {
        transformer_block(g, params, prefix, x, z, &self.cfg.attention(stage), Some(&self.ropes[stage]))
    }

    /// Runs one encoder block of `stage` directly on mesh features.
    pub fn encoder_block(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        stage: usize,
        index: usize,
        x: Var,
        z: &[f64],
    ) -> Result<Var> {
        let zv = g.constant(Tensor::from_fn(&[1, self.cfg.noise_dim], |i| T::lit(z[i])));
        let zv = params.linear(g, "noise.z", zv)?;
        self.block(g, params, &format!("s{stage}.enc{index}"), stage, x, zv)
    }
}

fn init_block(p: &mut ParamSet<f64>, prefix: &str, cfg: &ModelConfig, stage: usize, rng: &mut ChaCha8Rng) {
    let (d, dff) = (cfg.stages[stage].dim, cfg.d_ff(stage));
    bsa::init_params(p, &format!("{prefix}.attn"), &cfg.attention(stage), rng);
    p.init_linear(&format!("{prefix}.ffn.gate"), d, dff, Some(RESIDUAL_INIT_STD), rng);
    p.init_linear(&format!("{prefix}.ffn.value"), d, dff, None, rng);
    p.init_linear(&format!("{prefix}.ffn.out"), dff, d, None, rng);
    p.init_linear(&format!("{prefix}.ffn.noise"), cfg.noise_dim, dff, Some(RESIDUAL_INIT_STD), rng);
}

/// Child minus parent centers, `[coarse npix, 12]`, children in NESTED order.
pub fn child_offsets<T: Real>(fine: &HealpixMesh, coarse: &HealpixMesh) -> Tensor<T> {
    let (f, c) = (fine.xyz(), coarse.xyz());
    Tensor::from_fn(&[c.len(), 12], |i| {
        let (p, j) = (i / 12, i % 12);
        T::lit(f[4 * p + j / 3][j % 3] - c[p][j % 3])
    })
}

/// `x + BSA(RMSNorm(x))`, then `x + cSwiGLU(RMSNorm(x), z·W_n)`; `z` is `[1, noise_dim]`.
pub fn transformer_block<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    prefix: &str,
    x: Var,
    z: Var,
    attn: &AttentionConfig,
    rope: Option<&Arc<RopeTable<T>>>,
) -> Result<Var> {
    let h = g.rmsnorm(x, RMS_EPS);
    let a = bsa::bsa_forward(g, params, &format!("{prefix}.attn"), h, attn, rope)?.out;
    let x = g.add(x, a)?;
    let h = g.rmsnorm(x, RMS_EPS);
    let noise = params.linear(g, &format!("{prefix}.ffn.noise"), z)?;
    let width = g.shape(noise)[1];
    let noise = g.reshape(noise, &[width])?;
    let wg = params.var(g, &format!("{prefix}.ffn.gate.w"))?;
    let wv = params.var(g, &format!("{prefix}.ffn.value.w"))?;
    let wo = params.var(g, &format!("{prefix}.ffn.out.w"))?;
    let f = g.swiglu_gated(h, noise, wg, wv, wo)?;
    g.add(x, f)
}

/// Learned pooling of each child quadruple: `RMSNorm(X_c·W_x + ΔP·W_p)`.
pub fn coarsen<T: Real>(g: &mut Graph<T>, params: &ParamSet<T>, prefix: &str, x: Var, offsets: Var) -> Result<Var> {
    let (n, d) = g.value(x).dims2()?;
    let parents = g.value(offsets).dims2()?.0;
    if n != 4 * parents {
        return Err(Error::dim("coarsen", &[n, d], &[4 * parents, d]));
    }
    let stacked = g.reshape(x, &[parents, 4 * d])?;
    let fx = params.linear(g, &format!("{prefix}.x"), stacked)?;
    let fp = params.linear(g, &format!("{prefix}.p"), offsets)?;
    let y = g.add(fx, fp)?;
    Ok(g.rmsnorm(y, RMS_EPS))
}

/// Predicts four children per parent, adds the encoder skip and normalizes.
pub fn refine<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    prefix: &str,
    parent: Var,
    offsets: Var,
    skip: Var,
) -> Result<Var> {
    let m = g.value(parent).dims2()?.0;
    let (n, d) = g.value(skip).dims2()?;
    if n != 4 * m {
        return Err(Error::dim("refine", &[n, d], &[4 * m, d]));
    }
    let fx = params.linear(g, &format!("{prefix}.x"), parent)?;
    let fp = params.linear(g, &format!("{prefix}.p"), offsets)?;
    let y = g.add(fx, fp)?;
    let y = g.reshape(y, &[n, d])?;
    let y = g.add(y, skip)?;
    Ok(g.rmsnorm(y, RMS_EPS))
}
