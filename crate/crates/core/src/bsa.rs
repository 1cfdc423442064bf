//! Block-sparse attention on contiguous token blocks.
//!
//! Three branches share one set of rotated queries, keys and values:
//! * compression: mean-pooled query blocks attend to mean-pooled key blocks and the
//!   block output is broadcast back to every token of the query block;
//! * selection: every token of query block `i` attends to all tokens of the `top_n`
//!   key blocks with the highest pooled scores `ā_i,:`;
//! * local: dense attention inside each block of `local_block` tokens.
//!
//! Per-token, per-head sigmoid gates mix the branch outputs before the output
//! projection. Block selection is a constant of the graph, so no gradient flows
//! through the top-n choice.
//!
//! [`nsa_core`] is the token-level reference (per-token selection, sliding window).

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{ParamSet, RESIDUAL_INIT_STD};
use crate::tensor::{AttentionPattern, Graph, HeadLayout, KeyPattern, QueryGroup, Real, RopeTable, Tensor, Var};

pub const ROPE_THETA: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Branches {
    pub compress: bool,
    pub select: bool,
    pub local: bool,
}

impl Branches {
    pub const ALL: Branches = Branches {
        compress: true,
        select: true,
        local: true,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Query heads per key/value head.
    pub gqa_ratio: usize,
    pub head_dim: usize,
    /// Sparse block size `b` of the compression and selection branches.
    pub block: usize,
    pub local_block: usize,
    pub top_n: usize,
    pub rope_theta: f64,
    pub branches: Branches,
    /// Constant `(compress, select, local)` gates replacing the learned ones.
    pub fixed_gates: Option<[f64; 3]>,
}

impl AttentionConfig {
    pub fn kv_heads(&self) -> usize {
        self.heads / self.gqa_ratio
    }

    pub fn layout(&self) -> Result<HeadLayout> {
        if self.gqa_ratio == 0 || self.heads % self.gqa_ratio != 0 {
            return Err(Error::config(format!(
                "gqa ratio {} must divide {} heads",
                self.gqa_ratio, self.heads
            )));
        }
        HeadLayout::new(self.heads, self.kv_heads(), self.head_dim)
    }

    /// Checks block sizes against a sequence length.
    pub fn validate(&self, n: usize) -> Result<()> {
        self.layout()?;
        if self.block == 0 || n % self.block != 0 {
            return Err(Error::config(format!("sequence length {n} not divisible by block size {}", self.block)));
        }
        if self.local_block == 0 || n % self.local_block != 0 {
            return Err(Error::config(format!(
                "sequence length {n} not divisible by local block size {}",
                self.local_block
            )));
        }
        if self.top_n == 0 || self.top_n > n / self.block {
            return Err(Error::config(format!(
                "top_n = {} must be in 1..={} for {n} tokens",
                self.top_n,
                n / self.block
            )));
        }
        Ok(())
    }
}

/// Adds the projection and gate weights of one attention layer under `prefix`.
pub fn init_params<T: Real, R: Rng + ?Sized>(params: &mut ParamSet<T>, prefix: &str, cfg: &AttentionConfig, rng: &mut R) {
    let (d, h, kv, dh) = (cfg.d_model, cfg.heads, cfg.kv_heads(), cfg.head_dim);
    params.init_linear(&format!("{prefix}.q"), d, h * dh, None, rng);
    params.init_linear(&format!("{prefix}.k"), d, kv * dh, None, rng);
    params.init_linear(&format!("{prefix}.v"), d, kv * dh, None, rng);
    params.init_linear(&format!("{prefix}.gate"), d, 3 * h, None, rng);
    params.init_bias(&format!("{prefix}.gate"), 3 * h);
    params.init_linear(&format!("{prefix}.o"), h * dh, d, Some(RESIDUAL_INIT_STD), rng);
}

/// Branch outputs before gating, `[N, heads * head_dim]` each.
pub struct CoreOutput<T> {
    pub compress: Option<Var>,
    pub select: Option<Var>,
    pub local: Option<Var>,
    /// Pooled block scores `ā`, `[heads, m, m]` (token-level runs: `[heads, N, m]`).
    pub scores: Option<Tensor<T>>,
    /// Selected key blocks per kv head and query block (query token for the
    /// token-level path), highest score first.
    pub selected: Vec<Vec<Vec<usize>>>,
    /// Multiply-accumulates of the attention products.
    pub macs: u64,
}

pub struct BsaOutput<T> {
    pub out: Var,
    pub branches: CoreOutput<T>,
    /// Learned gates `[N, 3 * heads]` (compress, select, local column groups).
    pub gates: Option<Var>,
}

/// Mean over consecutive groups of `b` rows.
pub fn mean_pool<T: Real>(g: &mut Graph<T>, x: Var, b: usize) -> Result<Var> {
    let (n, w) = g.value(x).dims2()?;
    if n % b != 0 {
        return Err(Error::config(format!("{n} rows not divisible by pooling block {b}")));
    }
    let r = g.reshape(x, &[n / b, b, w])?;
    g.mean_axis(r, 1)
}

/// `softmax(q̄ k̄ᵀ / √d)` per query head, `[heads, nq, nk]`, outside the graph.
pub fn block_scores<T: Real>(q: &Tensor<T>, k: &Tensor<T>, layout: &HeadLayout) -> Result<Tensor<T>> {
    let (nq, nk) = (q.dims2()?.0, k.dims2()?.0);
    let (qs, ks, dh) = (layout.q_width(), layout.kv_width(), layout.head_dim);
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut out = vec![T::zero(); layout.heads * nq * nk];
    for h in 0..layout.heads {
        let kv = h / layout.group_size();
        for i in 0..nq {
            let qi = &q.data()[i * qs + h * dh..][..dh];
            let row = &mut out[(h * nq + i) * nk..][..nk];
            for (j, r) in row.iter_mut().enumerate() {
                let kj = &k.data()[j * ks + kv * dh..][..dh];
                *r = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
            }
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for r in row.iter_mut() {
                *r = (*r - mx).exp();
                total = total + *r;
            }
            row.iter_mut().for_each(|r| *r = *r / total);
        }
    }
    Ok(Tensor::from_parts(vec![layout.heads, nq, nk], out))
}

/// Top-`n` columns of `scores` summed over the query heads sharing kv head `kv`.
/// Ties go to the lower index. Returns one list per row, best first.
pub fn top_n_blocks<T: Real>(scores: &Tensor<T>, layout: &HeadLayout, kv: usize, n: usize) -> Vec<Vec<usize>> {
    let (rows, cols) = (scores.shape()[1], scores.shape()[2]);
    let heads = kv * layout.group_size()..(kv + 1) * layout.group_size();
    (0..rows)
        .map(|i| {
            let summed: Vec<T> = (0..cols)
                .map(|j| heads.clone().map(|h| scores.data()[(h * rows + i) * cols + j]).sum())
                .collect();
            let mut idx: Vec<usize> = (0..cols).collect();
            idx.sort_by(|&a, &b| summed[b].partial_cmp(&summed[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
            idx.truncate(n);
            idx
        })
        .collect()
}

/// Sorted block ids merged into contiguous token ranges.
fn block_ranges(blocks: &[usize], b: usize) -> Vec<std::ops::Range<usize>> {
    let mut sorted = blocks.to_vec();
    sorted.sort_unstable();
    let mut out: Vec<std::ops::Range<usize>> = Vec::new();
    for j in sorted {
        match out.last_mut() {
            Some(r) if r.end == j * b => r.end += b,
            _ => out.push(j * b..(j + 1) * b),
        }
    }
    out
}

/// Query block `i` (of size `b`) attends to the token ranges of `selected[i]`.
pub fn selection_pattern(selected: &[Vec<usize>], b: usize, n: usize) -> Result<KeyPattern> {
    let groups = selected
        .iter()
        .enumerate()
        .map(|(i, blocks)| QueryGroup {
            queries: i * b..(i + 1) * b,
            keys: block_ranges(blocks, b),
        })
        .collect();
    KeyPattern::new(groups, n, n)
}

fn kv_patterns(selected: &[Vec<Vec<usize>>], b: usize, n: usize) -> Result<AttentionPattern> {
    AttentionPattern::per_kv_head(
        selected
            .iter()
            .map(|s| selection_pattern(s, b, n))
            .collect::<Result<Vec<_>>>()?,
    )
}

/// The three branches on rotated `q [N, H·dh]`, `k, v [N, Hkv·dh]`.
pub fn bsa_core<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var, cfg: &AttentionConfig) -> Result<CoreOutput<T>> {
    let layout = cfg.layout()?;
    let n = g.value(q).dims2()?.0;
    cfg.validate(n)?;
    let (b, m) = (cfg.block, n / cfg.block);
    let mut out = CoreOutput {
        compress: None,
        select: None,
        local: None,
        scores: None,
        selected: Vec::new(),
        macs: 0,
    };

    if cfg.branches.compress || cfg.branches.select {
        let qp = mean_pool(g, q, b)?;
        let kp = mean_pool(g, k, b)?;
        let scores = block_scores(g.value(qp), g.value(kp), &layout)?;
        if cfg.branches.compress {
            let vp = mean_pool(g, v, b)?;
            let pattern = AttentionPattern::shared(KeyPattern::dense(m, m));
            out.macs += pattern.macs(&layout);
            let pooled = g.attention(qp, kp, vp, layout, &pattern)?;
            let owner: Vec<usize> = (0..n).map(|t| t / b).collect();
            out.compress = Some(g.index_select(pooled, 0, &owner)?);
        }
        if cfg.branches.select {
            out.selected = (0..layout.kv_heads)
                .map(|kv| top_n_blocks(&scores, &layout, kv, cfg.top_n))
                .collect();
            let pattern = kv_patterns(&out.selected, b, n)?;
            out.macs += pattern.macs(&layout);
            out.select = Some(g.attention(q, k, v, layout, &pattern)?);
        }
        out.scores = Some(scores);
    }
    if cfg.branches.local {
        let pattern = AttentionPattern::shared(KeyPattern::block_diagonal(n, cfg.local_block)?);
        out.macs += pattern.macs(&layout);
        out.local = Some(g.attention(q, k, v, layout, &pattern)?);
    }
    Ok(out)
}

/// Token-level reference: per-token compression over pooled key blocks, per-token
/// top-n block selection and a sliding window of `local_block` keys.
pub fn nsa_core<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var, cfg: &AttentionConfig) -> Result<CoreOutput<T>> {
    let layout = cfg.layout()?;
    let n = g.value(q).dims2()?.0;
    cfg.validate(n)?;
    let (b, m) = (cfg.block, n / cfg.block);
    let mut out = CoreOutput {
        compress: None,
        select: None,
        local: None,
        scores: None,
        selected: Vec::new(),
        macs: 0,
    };
    if cfg.branches.compress || cfg.branches.select {
        let kp = mean_pool(g, k, b)?;
        let scores = block_scores(g.value(q), g.value(kp), &layout)?;
        if cfg.branches.compress {
            let vp = mean_pool(g, v, b)?;
            let pattern = AttentionPattern::shared(KeyPattern::dense(n, m));
            out.macs += pattern.macs(&layout);
            out.compress = Some(g.attention(q, kp, vp, layout, &pattern)?);
        }
        if cfg.branches.select {
            out.selected = (0..layout.kv_heads)
                .map(|kv| top_n_blocks(&scores, &layout, kv, cfg.top_n))
                .collect();
            let pattern = AttentionPattern::per_kv_head(
                out.selected
                    .iter()
                    .map(|per_token| {
                        let groups = per_token
                            .iter()
                            .enumerate()
                            .map(|(t, blocks)| QueryGroup {
                                queries: t..t + 1,
                                keys: block_ranges(blocks, b),
                            })
                            .collect();
                        KeyPattern::new(groups, n, n)
                    })
                    .collect::<Result<Vec<_>>>()?,
            )?;
            out.macs += pattern.macs(&layout);
            out.select = Some(g.attention(q, k, v, layout, &pattern)?);
        }
        out.scores = Some(scores);
    }
    if cfg.branches.local {
        let pattern = AttentionPattern::shared(sliding_window(n, cfg.local_block)?);
        out.macs += pattern.macs(&layout);
        out.local = Some(g.attention(q, k, v, layout, &pattern)?);
    }
    Ok(out)
}

/// Each token attends to the `w` consecutive keys centered on it, shifted to stay in range.
pub fn sliding_window(n: usize, w: usize) -> Result<KeyPattern> {
    if w == 0 || w > n {
        return Err(Error::config(format!("window {w} invalid for {n} tokens")));
    }
    let groups = (0..n)
        .map(|t| {
            let start = t.saturating_sub(w / 2).min(n - w);
            QueryGroup {
                queries: t..t + 1,
                keys: vec![start..start + w],
            }
        })
        .collect();
    KeyPattern::new(groups, n, n)
}

/// Full softmax attention.
pub fn dense_core<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var, layout: HeadLayout) -> Result<(Var, u64)> {
    let (nq, nk) = (g.value(q).dims2()?.0, g.value(k).dims2()?.0);
    let pattern = AttentionPattern::shared(KeyPattern::dense(nq, nk));
    let macs = pattern.macs(&layout);
    Ok((g.attention(q, k, v, layout, &pattern)?, macs))
}

/// Projects `x [N, d_model]` to rotated queries, keys and values.
pub fn project_qkv<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    prefix: &str,
    x: Var,
    rope: Option<&Arc<RopeTable<T>>>,
) -> Result<(Var, Var, Var)> {
    let mut q = params.linear(g, &format!("{prefix}.q"), x)?;
    let mut k = params.linear(g, &format!("{prefix}.k"), x)?;
    let v = params.linear(g, &format!("{prefix}.v"), x)?;
    if let Some(table) = rope {
        q = g.rope(q, table)?;
        k = g.rope(k, table)?;
    }
    Ok((q, k, v))
}

fn combine<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    prefix: &str,
    x: Var,
    cfg: &AttentionConfig,
    core: &CoreOutput<T>,
) -> Result<(Var, Option<Var>)> {
    let h = cfg.heads;
    let gates = match cfg.fixed_gates {
        Some(_) => None,
        None => {
            let pre = params.linear(g, &format!("{prefix}.gate"), x)?;
            Some(g.sigmoid(pre))
        }
    };
    let mut total: Option<Var> = None;
    for (i, branch) in [core.compress, core.select, core.local].into_iter().enumerate() {
        let Some(o) = branch else { continue };
        let term = match (cfg.fixed_gates, gates) {
            (Some(fixed), _) => {
                if fixed[i] == 0.0 {
                    continue;
                }
                g.scale(o, fixed[i])
            }
            (None, Some(gv)) => {
                let gi = g.slice(gv, 1, i * h..(i + 1) * h)?;
                g.mul_bcast(o, gi)?
            }
            (None, None) => unreachable!("learned gates are computed when not fixed"),
        };
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => {
            let n = g.value(x).dims2()?.0;
            g.constant(Tensor::zeros(&[n, h * cfg.head_dim]))
        }
    };
    Ok((params.linear(g, &format!("{prefix}.o"), total)?, gates))
}

/// Gated block-sparse attention layer on `x [N, d_model]`.
pub fn bsa_forward<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    prefix: &str,
    x: Var,
    cfg: &AttentionConfig,
    rope: Option<&Arc<RopeTable<T>>>,
) -> Result<BsaOutput<T>> {
    let (q, k, v) = project_qkv(g, params, prefix, x, rope)?;
    let core = bsa_core(g, q, k, v, cfg)?;
    let (out, gates) = combine(g, params, prefix, x, cfg, &core)?;
    Ok(BsaOutput {
        out,
        branches: core,
        gates,
    })
}

/// Gated token-level sparse attention with the same weights as [`bsa_forward`].
pub fn nsa_forward<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    prefix: &str,
    x: Var,
    cfg: &AttentionConfig,
    rope: Option<&Arc<RopeTable<T>>>,
) -> Result<BsaOutput<T>> {
    let (q, k, v) = project_qkv(g, params, prefix, x, rope)?;
    let core = nsa_core(g, q, k, v, cfg)?;
    let (out, gates) = combine(g, params, prefix, x, cfg, &core)?;
    Ok(BsaOutput {
        out,
        branches: core,
        gates,
    })
}

/// Attention multiply-accumulates of one block-sparse forward pass at length `n`.
pub fn bsa_cost(cfg: &AttentionConfig, n: usize) -> Result<u64> {
    cfg.validate(n)?;
    let layout = cfg.layout()?;
    let (b, m) = (cfg.block, n / cfg.block);
    let mut macs = 0;
    if cfg.branches.compress {
        macs += KeyPattern::dense(m, m).macs(&layout);
    }
    if cfg.branches.select {
        // pair count does not depend on which blocks are chosen
        let selected: Vec<Vec<usize>> = vec![(0..cfg.top_n).collect(); m];
        macs += selection_pattern(&selected, b, n)?.macs(&layout);
    }
    if cfg.branches.local {
        macs += KeyPattern::block_diagonal(n, cfg.local_block)?.macs(&layout);
    }
    Ok(macs)
}

pub fn dense_cost(layout: &HeadLayout, n: usize) -> u64 {
    KeyPattern::dense(n, n).macs(layout)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Bsa,
    Nsa,
    Dense,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Bsa => "bsa",
            Variant::Nsa => "nsa",
            Variant::Dense => "dense",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bsa" => Ok(Variant::Bsa),
            "nsa" => Ok(Variant::Nsa),
            "dense" => Ok(Variant::Dense),
            other => Err(Error::config(format!("unknown attention variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub length: usize,
    pub variant: Variant,
    /// Median wall time in milliseconds.
    pub ms: f64,
    pub macs: u64,
}

/// Median-of-`repeats` wall time of the attention core (no projections) on random
/// f32 inputs. With `backward`, the timed region includes the gradient sweep.
pub fn bench_attention(
    cfg: &AttentionConfig,
    lengths: &[usize],
    variants: &[Variant],
    repeats: usize,
    backward: bool,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("benchmark lengths must be strictly ascending"));
    }
    if repeats == 0 {
        return Err(Error::config("benchmark needs at least one repeat"));
    }
    let layout = cfg.layout()?;
    let mut rows = Vec::new();
    for &n in lengths {
        cfg.validate(n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ n as u64);
        let q = Tensor::<f32>::randn(&[n, layout.q_width()], 1.0, &mut rng).with_requires_grad(backward);
        let k = Tensor::<f32>::randn(&[n, layout.kv_width()], 1.0, &mut rng).with_requires_grad(backward);
        let v = Tensor::<f32>::randn(&[n, layout.kv_width()], 1.0, &mut rng).with_requires_grad(backward);
        for &variant in variants {
            let mut times = Vec::with_capacity(repeats);
            let mut macs = 0;
            for _ in 0..repeats {
                let start = Instant::now();
                let mut g = if backward { Graph::new() } else { Graph::no_grad() };
                let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
                let outputs: Vec<Var> = match variant {
                    Variant::Dense => {
                        let (o, c) = dense_core(&mut g, qv, kv, vv, layout)?;
                        macs = c;
                        vec![o]
                    }
                    Variant::Bsa | Variant::Nsa => {
                        let core = if variant == Variant::Bsa {
                            bsa_core(&mut g, qv, kv, vv, cfg)?
                        } else {
                            nsa_core(&mut g, qv, kv, vv, cfg)?
                        };
                        macs = core.macs;
                        [core.compress, core.select, core.local].into_iter().flatten().collect()
                    }
                };
                if backward {
                    let mut total = g.sum_all(outputs[0]);
                    for &o in &outputs[1..] {
                        let s = g.sum_all(o);
                        total = g.add(total, s)?;
                    }
                    g.backward(total)?;
                }
                times.push(start.elapsed().as_secs_f64() * 1e3);
            }
            times.sort_by(f64::total_cmp);
            rows.push(BenchRow {
                length: n,
                variant,
                ms: times[times.len() / 2],
                macs,
            });
        }
    }
    Ok(rows)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}
