//! Softmax attention over explicit key patterns.
//!
//! A [`KeyPattern`] partitions the queries into contiguous groups; every query in a
//! group attends to the union of that group's key ranges. Dense, block-local,
//! block-selected and per-token patterns are all expressed this way, so one kernel
//! (and one backward rule) serves every attention branch.
//!
//! Tensors are token-major: `q [Nq, heads * head_dim]`, `k, v [Nk, kv_heads * head_dim]`.
//! Query head `h` reads kv head `h / (heads / kv_heads)`.

use std::ops::Range;
use std::sync::Arc;

use rayon::prelude::*;

use super::{gemm, Real, Strides, Tensor};
use crate::error::{Error, Result};

/// Query rows processed per score tile.
const QUERY_TILE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl HeadLayout {
    pub fn new(heads: usize, kv_heads: usize, head_dim: usize) -> Result<Self> {
        if heads == 0 || kv_heads == 0 || head_dim == 0 || heads % kv_heads != 0 {
            return Err(Error::config(format!(
                "invalid head layout: {heads} query heads over {kv_heads} kv heads, head_dim {head_dim}"
            )));
        }
        Ok(HeadLayout {
            heads,
            kv_heads,
            head_dim,
        })
    }

    pub fn single(head_dim: usize) -> Self {
        HeadLayout {
            heads: 1,
            kv_heads: 1,
            head_dim,
        }
    }

    pub fn group_size(&self) -> usize {
        self.heads / self.kv_heads
    }

    pub fn q_width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.kv_heads * self.head_dim
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryGroup {
    pub queries: Range<usize>,
    pub keys: Vec<Range<usize>>,
}

impl QueryGroup {
    pub fn key_count(&self) -> usize {
        self.keys.iter().map(|r| r.len()).sum()
    }
}

/// Groups are sorted, disjoint and cover `0..num_queries` exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyPattern {
    groups: Vec<QueryGroup>,
    num_queries: usize,
    num_keys: usize,
}

impl KeyPattern {
    pub fn new(groups: Vec<QueryGroup>, num_queries: usize, num_keys: usize) -> Result<Self> {
        let mut next = 0;
        for g in &groups {
            if g.queries.start != next || g.queries.is_empty() {
                return Err(Error::config(format!(
                    "attention groups must tile the queries contiguously (group {:?} after {next})",
                    g.queries
                )));
            }
            if g.keys.is_empty() || g.keys.iter().any(|r| r.is_empty() || r.end > num_keys) {
                return Err(Error::config(format!("invalid key ranges {:?} for {num_keys} keys", g.keys)));
            }
            next = g.queries.end;
        }
        if next != num_queries {
            return Err(Error::config(format!(
                "attention groups cover {next} of {num_queries} queries"
            )));
        }
        Ok(KeyPattern {
            groups,
            num_queries,
            num_keys,
        })
    }

    /// Every query attends to every key.
    pub fn dense(num_queries: usize, num_keys: usize) -> Self {
        KeyPattern {
            groups: vec![QueryGroup {
                queries: 0..num_queries,
                keys: vec![0..num_keys],
            }],
            num_queries,
            num_keys,
        }
    }

    /// Independent attention inside each contiguous block of `block` tokens.
    pub fn block_diagonal(n: usize, block: usize) -> Result<Self> {
        if block == 0 || n % block != 0 {
            return Err(Error::config(format!("sequence length {n} not divisible by block size {block}")));
        }
        let groups = (0..n / block)
            .map(|i| QueryGroup {
                queries: i * block..(i + 1) * block,
                keys: vec![i * block..(i + 1) * block],
            })
            .collect();
        Ok(KeyPattern {
            groups,
            num_queries: n,
            num_keys: n,
        })
    }

    pub fn groups(&self) -> &[QueryGroup] {
        &self.groups
    }

    pub fn num_queries(&self) -> usize {
        self.num_queries
    }

    pub fn num_keys(&self) -> usize {
        self.num_keys
    }

    /// Query/key pairs scored by this pattern (per head).
    pub fn pair_count(&self) -> u64 {
        self.groups
            .iter()
            .map(|g| (g.queries.len() * g.key_count()) as u64)
            .sum()
    }

    /// Multiply-accumulates of one forward pass: `q·k` plus `p·v` for every pair and head.
    pub fn macs(&self, layout: &HeadLayout) -> u64 {
        2 * self.pair_count() * (layout.heads * layout.head_dim) as u64
    }

    /// Dense `[Nq, Nk]` 0/1 mask equivalent to this pattern (for oracles).
    pub fn to_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.num_queries * self.num_keys];
        for g in &self.groups {
            for q in g.queries.clone() {
                for r in &g.keys {
                    for k in r.clone() {
                        mask[q * self.num_keys + k] = true;
                    }
                }
            }
        }
        mask
    }
}

/// One pattern shared by all kv heads, or one per kv head.
#[derive(Clone, Debug)]
pub struct AttentionPattern {
    patterns: Vec<Arc<KeyPattern>>,
}

impl AttentionPattern {
    pub fn shared(pattern: KeyPattern) -> Self {
        AttentionPattern {
            patterns: vec![Arc::new(pattern)],
        }
    }

    pub fn per_kv_head(patterns: Vec<KeyPattern>) -> Result<Self> {
        let first = patterns.first().ok_or_else(|| Error::config("empty attention pattern list"))?;
        let (nq, nk) = (first.num_queries, first.num_keys);
        if patterns.iter().any(|p| p.num_queries != nq || p.num_keys != nk) {
            return Err(Error::config("per-head patterns disagree on sequence lengths"));
        }
        Ok(AttentionPattern {
            patterns: patterns.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn for_kv_head(&self, kv: usize) -> &KeyPattern {
        if self.patterns.len() == 1 {
            &self.patterns[0]
        } else {
            &self.patterns[kv]
        }
    }

    pub fn num_queries(&self) -> usize {
        self.patterns[0].num_queries
    }

    pub fn num_keys(&self) -> usize {
        self.patterns[0].num_keys
    }

    pub fn macs(&self, layout: &HeadLayout) -> u64 {
        let per_kv = HeadLayout {
            heads: layout.group_size(),
            kv_heads: 1,
            head_dim: layout.head_dim,
        };
        (0..layout.kv_heads).map(|kv| self.for_kv_head(kv).macs(&per_kv)).sum()
    }

    fn check(&self, layout: &HeadLayout) -> Result<()> {
        if self.patterns.len() != 1 && self.patterns.len() != layout.kv_heads {
            return Err(Error::config(format!(
                "{} patterns for {} kv heads",
                self.patterns.len(),
                layout.kv_heads
            )));
        }
        Ok(())
    }
}

fn check_inputs<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    layout: &HeadLayout,
    pattern: &AttentionPattern,
) -> Result<()> {
    pattern.check(layout)?;
    let (nq, qw) = q.dims2()?;
    let (nk, kw) = k.dims2()?;
    if qw != layout.q_width() || nq != pattern.num_queries() {
        return Err(Error::dim("attention query", q.shape(), &[pattern.num_queries(), layout.q_width()]));
    }
    if kw != layout.kv_width() || nk != pattern.num_keys() {
        return Err(Error::dim("attention key", k.shape(), &[pattern.num_keys(), layout.kv_width()]));
    }
    if v.shape() != k.shape() {
        return Err(Error::dim("attention value", v.shape(), k.shape()));
    }
    Ok(())
}

/// Splits `buf` into consecutive mutable chunks of `row_width * group_rows` elements.
fn split_by_groups<'a, T>(mut buf: &'a mut [T], groups: &[QueryGroup], row_width: usize) -> Vec<&'a mut [T]> {
    let mut out = Vec::with_capacity(groups.len());
    for g in groups {
        let (head, tail) = buf.split_at_mut(g.queries.len() * row_width);
        out.push(head);
        buf = tail;
    }
    out
}

/// Scores `scale * q_tile · K_rᵀ` for all key ranges into `s [rows, nk]`.
#[allow(clippy::too_many_arguments)]
fn scores<T: Real>(
    s: &mut [T],
    q_rows: &[T],
    rows: usize,
    q_stride: usize,
    keys: &[T],
    ranges: &[Range<usize>],
    kv_stride: usize,
    head_dim: usize,
    scale: T,
) {
    let nk: usize = ranges.iter().map(|r| r.len()).sum();
    let mut off = 0;
    for r in ranges {
        gemm(
            rows,
            head_dim,
            r.len(),
            scale,
            q_rows,
            Strides::row_major(q_stride),
            &keys[r.start * kv_stride..],
            Strides::transposed(kv_stride),
            T::zero(),
            &mut s[off..],
            Strides::row_major(nk),
        );
        off += r.len();
    }
}

/// Forward pass. Returns the output and the per-(query, head) log-sum-exp `[Nq, heads]`.
pub fn attention_forward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    layout: &HeadLayout,
    pattern: &AttentionPattern,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_inputs(q, k, v, layout, pattern)?;
    let nq = pattern.num_queries();
    let (qs, ks, dh) = (layout.q_width(), layout.kv_width(), layout.head_dim);
    let gsize = layout.group_size();
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut out = vec![T::zero(); nq * qs];
    let mut lse = vec![T::zero(); nq * layout.heads];
    let (qd, kd, vd) = (q.data(), k.data(), v.data());

    for kv in 0..layout.kv_heads {
        let pat = pattern.for_kv_head(kv);
        let out_chunks = split_by_groups(&mut out, pat.groups(), qs);
        let lse_chunks = split_by_groups(&mut lse, pat.groups(), layout.heads);
        pat.groups()
            .par_iter()
            .zip(out_chunks.into_par_iter().zip(lse_chunks.into_par_iter()))
            .for_each(|(g, (o_chunk, l_chunk))| {
                let nk = g.key_count();
                let kbase = kv * dh;
                let mut s = vec![T::zero(); QUERY_TILE.min(g.queries.len()) * nk];
                for h in kv * gsize..(kv + 1) * gsize {
                    let mut t0 = 0;
                    while t0 < g.queries.len() {
                        let rows = QUERY_TILE.min(g.queries.len() - t0);
                        let qrow = g.queries.start + t0;
                        let s = &mut s[..rows * nk];
                        scores(s, &qd[qrow * qs + h * dh..], rows, qs, &kd[kbase..], &g.keys, ks, dh, scale);
                        for (r, row) in s.chunks_exact_mut(nk).enumerate() {
                            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                            let mut total = T::zero();
                            for x in row.iter_mut() {
                                *x = (*x - mx).exp();
                                total = total + *x;
                            }
                            let inv = T::one() / total;
                            row.iter_mut().for_each(|x| *x = *x * inv);
                            l_chunk[(t0 + r) * layout.heads + h] = mx + total.ln();
                        }
                        let mut off = 0;
                        for (ri, rg) in g.keys.iter().enumerate() {
                            gemm(
                                rows,
                                rg.len(),
                                dh,
                                T::one(),
                                &s[off..],
                                Strides::row_major(nk),
                                &vd[rg.start * ks + kbase..],
                                Strides::row_major(ks),
                                if ri == 0 { T::zero() } else { T::one() },
                                &mut o_chunk[t0 * qs + h * dh..],
                                Strides::row_major(qs),
                            );
                            off += rg.len();
                        }
                        t0 += rows;
                    }
                }
            });
    }
    Ok((
        Tensor::from_parts(vec![nq, qs], out),
        Tensor::from_parts(vec![nq, layout.heads], lse),
    ))
}

/// Gradients `(dq, dk, dv)` of the attention output given upstream `dout`.
///
/// Runs sequentially so key/value gradient accumulation has a fixed order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    out: &Tensor<T>,
    lse: &Tensor<T>,
    dout: &Tensor<T>,
    layout: &HeadLayout,
    pattern: &AttentionPattern,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (qs, ks, dh) = (layout.q_width(), layout.kv_width(), layout.head_dim);
    let gsize = layout.group_size();
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let (qd, kd, vd, od, ld, gd) = (q.data(), k.data(), v.data(), out.data(), lse.data(), dout.data());
    let mut dq = vec![T::zero(); qd.len()];
    let mut dk = vec![T::zero(); kd.len()];
    let mut dv = vec![T::zero(); vd.len()];

    for kv in 0..layout.kv_heads {
        let kbase = kv * dh;
        for g in pattern.for_kv_head(kv).groups() {
            let nk = g.key_count();
            let tile = QUERY_TILE.min(g.queries.len());
            let mut p = vec![T::zero(); tile * nk];
            let mut dp = vec![T::zero(); tile * nk];
            for h in kv * gsize..(kv + 1) * gsize {
                let mut t0 = 0;
                while t0 < g.queries.len() {
                    let rows = tile.min(g.queries.len() - t0);
                    let qrow = g.queries.start + t0;
                    let qoff = qrow * qs + h * dh;
                    let (p, dp) = (&mut p[..rows * nk], &mut dp[..rows * nk]);
                    scores(p, &qd[qoff..], rows, qs, &kd[kbase..], &g.keys, ks, dh, scale);
                    // dP = dO · Vᵀ
                    let mut off = 0;
                    for rg in &g.keys {
                        gemm(
                            rows,
                            dh,
                            rg.len(),
                            T::one(),
                            &gd[qoff..],
                            Strides::row_major(qs),
                            &vd[rg.start * ks + kbase..],
                            Strides::transposed(ks),
                            T::zero(),
                            &mut dp[off..],
                            Strides::row_major(nk),
                        );
                        off += rg.len();
                    }
                    for r in 0..rows {
                        let l = ld[(qrow + r) * layout.heads + h];
                        let base = (qrow + r) * qs + h * dh;
                        let delta: T = (0..dh).map(|d| gd[base + d] * od[base + d]).sum();
                        for c in 0..nk {
                            let pr = (p[r * nk + c] - l).exp();
                            p[r * nk + c] = pr;
                            // dS, pre-scaled for the q/k products below
                            dp[r * nk + c] = pr * (dp[r * nk + c] - delta) * scale;
                        }
                    }
                    let mut off = 0;
                    for rg in &g.keys {
                        let koff = rg.start * ks + kbase;
                        // dQ += dS · K
                        gemm(
                            rows,
                            rg.len(),
                            dh,
                            T::one(),
                            &dp[off..],
                            Strides::row_major(nk),
                            &kd[koff..],
                            Strides::row_major(ks),
                            T::one(),
                            &mut dq[qoff..],
                            Strides::row_major(qs),
                        );
                        // dK += dSᵀ · Q
                        gemm(
                            rg.len(),
                            rows,
                            dh,
                            T::one(),
                            &dp[off..],
                            Strides::transposed(nk),
                            &qd[qoff..],
                            Strides::row_major(qs),
                            T::one(),
                            &mut dk[koff..],
                            Strides::row_major(ks),
                        );
                        // dV += Pᵀ · dO
                        gemm(
                            rg.len(),
                            rows,
                            dh,
                            T::one(),
                            &p[off..],
                            Strides::transposed(nk),
                            &gd[qoff..],
                            Strides::row_major(qs),
                            T::one(),
                            &mut dv[koff..],
                            Strides::row_major(ks),
                        );
                        off += rg.len();
                    }
                    t0 += rows;
                }
            }
        }
    }
    (
        Tensor::from_parts(q.shape().to_vec(), dq),
        Tensor::from_parts(k.shape().to_vec(), dk),
        Tensor::from_parts(v.shape().to_vec(), dv),
    )
}
