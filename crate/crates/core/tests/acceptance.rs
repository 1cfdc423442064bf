//! Acceptance criteria 1-14. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. A criterion also fails when it exceeds its time budget.
//!
//! `ACCEPTANCE_ONLY=3,7` runs a subset.

use std::collections::BTreeSet;
use std::error::Error as StdError;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use sphere_bsa::bsa::{
    self, bench_attention, bsa_core, bsa_cost, bsa_forward, log_log_slope, AttentionConfig, Branches, Variant,
    ROPE_THETA,
};
use sphere_bsa::diagnostics::{aliasing_demo, ensemble_metrics, gmsp_drift, spectral_ratio, AliasSignal, Coeffs, Nonlinearity, Sht};
use sphere_bsa::grid::LatLonGrid;
use sphere_bsa::healpix::{ang2pix, children, npix, parent, pix2ang, HealpixMesh};
use sphere_bsa::model::{Model, ModelConfig, ModelInput};
use sphere_bsa::msgt;
use sphere_bsa::nn::{init_std, ParamSet, RESIDUAL_INIT_STD};
use sphere_bsa::synth::{self, default_channels, Dataset, SynthConfig};
use sphere_bsa::tensor::{AttentionPattern, Graph, HeadLayout, KeyPattern, QueryGroup, RopeTable, Tensor, Var};
use sphere_bsa::training::crps::{fair_crps, fair_crps_graph};
use sphere_bsa::training::loss::{channel_alpha, pressure_alpha, weighted_loss, LossWeights};
use sphere_bsa::training::muon::{newton_schulz, NS_STEPS};
use sphere_bsa::training::{fit, generate_ensemble, split_samples, LoopConfig, TrainConfig, Trainer};

// 1, 2
const ORACLE_SEEDS: u64 = 100;
const DENSE_EQUIV_TOL: f64 = 1e-10;
// 3
const GRAD_REL_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so vanishing gradients are compared absolutely.
const GRAD_FLOOR: f64 = 1e-3;
const FD_STEP: f64 = 1e-5;
// 4
const FIXTURE_TOL_RAD: f64 = 1e-9;
const MC_SAMPLES: u64 = 1_000_000;
const MC_SIGMAS: f64 = 5.0;
// 5
const BENCH_LENGTHS: [usize; 4] = [8192, 16384, 32768, 65536];
const BSA_SLOPE: (f64, f64) = (1.0, 0.2);
const DENSE_SLOPE: (f64, f64) = (2.0, 0.25);
// 6
const COST_LENGTHS: [usize; 4] = [8192, 16384, 32768, 65536];
const MAC_SLOPE: (f64, f64) = (1.0, 0.01);
// 7
const CRPS_EXACT_TOL: f64 = 1e-12;
const CRPS_TRIALS: usize = 100_000;
const CRPS_MEMBERS: usize = 4;
const CRPS_SE: f64 = 3.0;
// 8
const OMEGA_MEAN_TOL: f64 = 1e-9;
const ALPHA_850: f64 = 1.834;
const ALPHA_500: f64 = 1.079;
const ALPHA_TOL: f64 = 1e-3;
// 9
const NS_MATRICES: usize = 50;
const NS_MAX_SIDE: usize = 64;
const NS_TOL: f64 = 5e-2;
const NS_FIXED_TOL: f64 = 1e-3;
// 10
const INIT_STD_TOL: f64 = 0.05;
/// Smallest tensor whose sample std is compared; keeps the sampling error near 1%.
const INIT_MIN_NUMEL: usize = 4096;
const NEAR_IDENTITY_TOL: f64 = 1e-2;
// 11
const TAPE_TOL: usize = 1;
// 12
const PARSEVAL_TOL: f64 = 0.01;
const CONCENTRATION_MIN: f64 = 0.99;
const SELF_RATIO_TOL: f64 = 1e-12;
// 13
const ALIAS_NATIVE: usize = 16;
const ALIAS_COARSE: [usize; 3] = [4, 8, 16];
const ALIAS_SEED: u64 = 0;
const ALIAS_EXCESS_MIN: f64 = 1.2;
// 14
const E2E_STEPS: usize = 2000;
// At batch 1 gradient noise dominates the noise projections and the ensemble comes out over-dispersed.
const E2E_BATCH: usize = 2;
const E2E_DATA_STEPS: usize = 120;
const E2E_MEMBERS: usize = 24;
const E2E_LEADS: usize = 10;
const E2E_SEED: u64 = 7;
const VAL_REDUCTION_MIN: f64 = 0.30;
const SSR_RANGE: (f64, f64) = (0.5, 1.5);
const DRIFT_FRACTION: f64 = 0.05;

type Fallible<T> = Result<T, Box<dyn StdError>>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Fallible<Outcome> {
    Ok(Outcome { pass, detail })
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Fallible<Outcome>,
}

const fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

const CRITERIA: [Criterion; 14] = [
    Criterion { id: 1, name: "dense equivalence", budget: secs(10), run: c01_dense_equivalence },
    Criterion { id: 2, name: "masked dense oracles", budget: secs(10), run: c02_masked_oracles },
    Criterion { id: 3, name: "gradient suite", budget: secs(120), run: c03_gradients },
    Criterion { id: 4, name: "healpix", budget: secs(60), run: c04_healpix },
    Criterion { id: 5, name: "attention scaling", budget: secs(600), run: c05_scaling },
    Criterion { id: 6, name: "mac counter", budget: secs(60), run: c06_mac_counter },
    Criterion { id: 7, name: "fair crps", budget: secs(60), run: c07_crps },
    Criterion { id: 8, name: "loss weights", budget: secs(60), run: c08_loss_weights },
    Criterion { id: 9, name: "newton-schulz", budget: secs(30), run: c09_newton_schulz },
    Criterion { id: 10, name: "init scheme", budget: secs(60), run: c10_init },
    Criterion { id: 11, name: "pushforward tape", budget: secs(120), run: c11_tape },
    Criterion { id: 12, name: "spectral transform", budget: secs(60), run: c12_spectral },
    Criterion { id: 13, name: "aliasing", budget: secs(120), run: c13_aliasing },
    Criterion { id: 14, name: "end-to-end training", budget: secs(1200), run: c14_end_to_end },
];

fn main() -> ExitCode {
    let only: Option<BTreeSet<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = 0;
    for c in &CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&c.id)) {
            continue;
        }
        let start = Instant::now();
        let result = (c.run)();
        let elapsed = start.elapsed();
        let (pass, mut detail) = match result {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let in_time = elapsed <= c.budget;
        if !in_time {
            detail.push_str(&format!("; over budget {}s", c.budget.as_secs()));
        }
        let verdict = if pass && in_time { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {verdict} [{:.1}s] {}: {detail}", c.id, elapsed.as_secs_f64(), c.name);
        if verdict == "FAIL" {
            failed += 1;
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------------------
// Independent oracles
// ---------------------------------------------------------------------------

/// `x [n, din] · w [din, dout]` by explicit loops.
fn naive_matmul(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[1];
    Tensor::from_fn(&[n, dout], |i| {
        let (r, c) = (i / dout, i % dout);
        (0..din).map(|k| x.data()[r * din + k] * w.data()[k * dout + c]).sum()
    })
}

fn naive_linear(params: &ParamSet<f64>, name: &str, x: &Tensor<f64>) -> Tensor<f64> {
    let mut y = naive_matmul(x, params.get(&format!("{name}.w")).unwrap());
    if let Ok(b) = params.get(&format!("{name}.b")) {
        let w = b.numel();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += b.data()[i % w];
        }
    }
    y
}

/// Softmax attention per query head over the keys `allowed(kv_head, query, key)` admits.
fn naive_attention(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    layout: HeadLayout,
    allowed: impl Fn(usize, usize, usize) -> bool,
) -> Tensor<f64> {
    let (nq, nk) = (q.shape()[0], k.shape()[0]);
    let (dh, qw, kw) = (layout.head_dim, layout.heads * layout.head_dim, layout.kv_heads * layout.head_dim);
    let group = layout.heads / layout.kv_heads;
    let mut out = vec![0.0; nq * qw];
    for h in 0..layout.heads {
        let kv = h / group;
        for i in 0..nq {
            let logits: Vec<Option<f64>> = (0..nk)
                .map(|j| {
                    allowed(kv, i, j).then(|| {
                        (0..dh).map(|d| q.data()[i * qw + h * dh + d] * k.data()[j * kw + kv * dh + d]).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                })
                .collect();
            let mx = logits.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let weights: Vec<f64> = logits.iter().map(|l| l.map_or(0.0, |l| (l - mx).exp())).collect();
            let total: f64 = weights.iter().sum();
            for (j, w) in weights.iter().enumerate() {
                for d in 0..dh {
                    out[i * qw + h * dh + d] += w / total * v.data()[j * kw + kv * dh + d];
                }
            }
        }
    }
    Tensor::new(&[nq, qw], out).unwrap()
}

/// Top-`n` key blocks per (kv head, query block) from pooled softmax scores summed over the group.
fn oracle_top_n(q: &Tensor<f64>, k: &Tensor<f64>, layout: HeadLayout, b: usize, n_top: usize) -> Vec<Vec<Vec<usize>>> {
    let n = q.shape()[0];
    let m = n / b;
    let pool = |t: &Tensor<f64>| -> Tensor<f64> {
        let w = t.shape()[1];
        Tensor::from_fn(&[m, w], |i| {
            let (r, c) = (i / w, i % w);
            (0..b).map(|t2| t.data()[(r * b + t2) * w + c]).sum::<f64>() / b as f64
        })
    };
    let (qp, kp) = (pool(q), pool(k));
    let (dh, qw, kw) = (layout.head_dim, layout.heads * layout.head_dim, layout.kv_heads * layout.head_dim);
    let group = layout.heads / layout.kv_heads;
    (0..layout.kv_heads)
        .map(|kv| {
            (0..m)
                .map(|i| {
                    let mut summed = vec![0.0; m];
                    for h in kv * group..(kv + 1) * group {
                        let logits: Vec<f64> = (0..m)
                            .map(|j| {
                                (0..dh).map(|d| qp.data()[i * qw + h * dh + d] * kp.data()[j * kw + kv * dh + d]).sum::<f64>()
                                    / (dh as f64).sqrt()
                            })
                            .collect();
                        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                        let total: f64 = e.iter().sum();
                        for (s, v) in summed.iter_mut().zip(&e) {
                            *s += v / total;
                        }
                    }
                    let mut idx: Vec<usize> = (0..m).collect();
                    idx.sort_by(|&a, &b| summed[b].total_cmp(&summed[a]).then(a.cmp(&b)));
                    idx.truncate(n_top);
                    idx.sort_unstable();
                    idx
                })
                .collect()
        })
        .collect()
}

fn random_lonlat(n: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    (0..n)
        .map(|_| (rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(-1.5..1.5)))
        .collect()
}

fn attention_config(heads: usize, gqa: usize, head_dim: usize, block: usize, local: usize, top_n: usize) -> AttentionConfig {
    AttentionConfig {
        d_model: 12,
        heads,
        gqa_ratio: gqa,
        head_dim,
        block,
        local_block: local,
        top_n,
        rope_theta: ROPE_THETA,
        branches: Branches::ALL,
        fixed_gates: None,
    }
}

// ---------------------------------------------------------------------------
// 1-2: attention oracles
// ---------------------------------------------------------------------------

const HEAD_SHAPES: [(usize, usize); 4] = [(1, 1), (2, 1), (4, 2), (4, 4)];

fn c01_dense_equivalence() -> Fallible<Outcome> {
    let mut worst = 0.0f64;
    for seed in 0..ORACLE_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = [64, 128, 192, 256][seed as usize % 4];
        let (heads, gqa) = HEAD_SHAPES[(seed as usize / 4) % 4];
        let b = [16, 32][(seed as usize / 16) % 2];
        let mut cfg = attention_config(heads, gqa, 4, b, b, n / b);
        cfg.fixed_gates = Some([0.0, 1.0, 0.0]);
        let mut params = ParamSet::<f64>::new();
        bsa::init_params(&mut params, "attn", &cfg, &mut rng);
        let x = Tensor::<f64>::randn(&[n, cfg.d_model], 1.0, &mut rng);
        let rope = (seed % 2 == 0).then(|| Arc::new(RopeTable::<f64>::new(&random_lonlat(n, &mut rng), 4, ROPE_THETA).unwrap()));

        let mut g = Graph::no_grad();
        let xv = g.input(x.clone());
        let out = bsa_forward(&mut g, &params, "attn", xv, &cfg, rope.as_ref())?.out;

        let mut q = naive_linear(&params, "attn.q", &x);
        let mut k = naive_linear(&params, "attn.k", &x);
        let v = naive_linear(&params, "attn.v", &x);
        if let Some(t) = &rope {
            q = t.apply(&q)?;
            k = t.apply(&k)?;
        }
        let o = naive_attention(&q, &k, &v, cfg.layout()?, |_, _, _| true);
        let expect = naive_linear(&params, "attn.o", &o);
        worst = worst.max(g.value(out).max_abs_diff(&expect)?);
    }
    outcome(
        worst < DENSE_EQUIV_TOL,
        format!("{ORACLE_SEEDS} seeds, max |bsa - dense| = {worst:.2e} (tol {DENSE_EQUIV_TOL:.0e})"),
    )
}

fn c02_masked_oracles() -> Fallible<Outcome> {
    let (mut worst_sel, mut worst_loc, mut selection_mismatch) = (0.0f64, 0.0f64, 0);
    for seed in 0..ORACLE_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = [64, 128, 256][seed as usize % 3];
        let (heads, gqa) = HEAD_SHAPES[(seed as usize / 3) % 4];
        let b = [8, 16][(seed as usize / 12) % 2];
        let m = n / b;
        let top_n = rng.gen_range(1..=m);
        let local = b * rng.gen_range(1..=2);
        let mut cfg = attention_config(heads, gqa, 4, b, local, top_n);
        let layout = cfg.layout()?;
        let q = Tensor::<f64>::randn(&[n, layout.q_width()], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[n, layout.kv_width()], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[n, layout.kv_width()], 1.0, &mut rng);

        cfg.branches = Branches { compress: false, select: true, local: false };
        let mut g = Graph::no_grad();
        let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
        let core = bsa_core(&mut g, qv, kv, vv, &cfg)?;
        let expected_blocks = oracle_top_n(&q, &k, layout, b, top_n);
        let chosen: Vec<Vec<Vec<usize>>> = core
            .selected
            .iter()
            .map(|per_kv| {
                per_kv
                    .iter()
                    .map(|s| {
                        let mut s = s.clone();
                        s.sort_unstable();
                        s
                    })
                    .collect()
            })
            .collect();
        if chosen != expected_blocks {
            selection_mismatch += 1;
        }
        let sel = naive_attention(&q, &k, &v, layout, |kvh, i, j| expected_blocks[kvh][i / b].contains(&(j / b)));
        worst_sel = worst_sel.max(g.value(core.select.unwrap()).max_abs_diff(&sel)?);

        cfg.branches = Branches { compress: false, select: false, local: true };
        let mut g = Graph::no_grad();
        let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
        let core = bsa_core(&mut g, qv, kv, vv, &cfg)?;
        let loc = naive_attention(&q, &k, &v, layout, |_, i, j| i / local == j / local);
        worst_loc = worst_loc.max(g.value(core.local.unwrap()).max_abs_diff(&loc)?);
    }
    outcome(
        worst_sel < DENSE_EQUIV_TOL && worst_loc < DENSE_EQUIV_TOL && selection_mismatch == 0,
        format!(
            "{ORACLE_SEEDS} seeds, selection {worst_sel:.2e}, local {worst_loc:.2e} (tol {DENSE_EQUIV_TOL:.0e}), \
             {selection_mismatch} top-n mismatches"
        ),
    )
}

// ---------------------------------------------------------------------------
// 3: gradients
// ---------------------------------------------------------------------------

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Worst elementwise relative error of `d sum(w ⊙ f(inputs))` against central differences.
fn op_grad_error(inputs: &[Tensor<f64>], f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var) -> Fallible<f64> {
    let build = |inputs: &[Tensor<f64>], w: Option<&Tensor<f64>>| -> (Graph<f64>, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone().with_requires_grad(true))).collect();
        let y = f(&mut g, &vars);
        let out = match w {
            Some(w) => {
                let wv = g.constant(w.clone());
                let p = g.mul(y, wv).unwrap();
                g.sum_all(p)
            }
            None => y,
        };
        (g, vars, out)
    };
    let (g0, _, y0) = build(inputs, None);
    let w = Tensor::<f64>::randn(g0.shape(y0), 1.0, &mut ChaCha8Rng::seed_from_u64(99));
    let (g, vars, s) = build(inputs, Some(&w));
    let grads = g.backward(s)?;
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).ok_or("missing input gradient")?;
        for j in 0..input.numel() {
            let eval = |delta: f64| {
                let mut x = inputs.to_vec();
                x[i].data_mut()[j] += delta;
                let (g, _, s) = build(&x, Some(&w));
                g.value(s).data()[0]
            };
            let fd = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(fd, analytic.data()[j]));
        }
    }
    Ok(worst)
}

type OpCase = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>);

fn op_cases() -> Vec<OpCase> {
    let table = Arc::new(RopeTable::<f64>::new(&[(0.3, 0.1), (1.2, -0.4), (2.0, 0.9)], 4, 100.0).unwrap());
    let layout = HeadLayout::new(4, 2, 3).unwrap();
    let sparse = KeyPattern::new(
        vec![
            QueryGroup { queries: 0..3, keys: vec![0..2, 5..7] },
            QueryGroup { queries: 3..7, keys: vec![2..6] },
        ],
        7,
        7,
    )
    .unwrap();
    let pattern = AttentionPattern::per_kv_head(vec![sparse, KeyPattern::dense(7, 7)]).unwrap();
    let grid = LatLonGrid::new(4, 8).unwrap();
    let weights = LossWeights::new(&grid, vec![1.0, 0.1]);
    let mut cases: Vec<OpCase> = vec![
        ("matmul", vec![randn(&[3, 4], 1), randn(&[4, 2], 2)], Box::new(|g, v| g.matmul(v[0], v[1]).unwrap())),
        ("add", vec![randn(&[3, 4], 3), randn(&[3, 4], 4)], Box::new(|g, v| g.add(v[0], v[1]).unwrap())),
        ("sub", vec![randn(&[3, 4], 5), randn(&[3, 4], 6)], Box::new(|g, v| g.sub(v[0], v[1]).unwrap())),
        ("mul", vec![randn(&[3, 4], 7), randn(&[3, 4], 8)], Box::new(|g, v| g.mul(v[0], v[1]).unwrap())),
        ("add_row", vec![randn(&[3, 4], 9), randn(&[4], 10)], Box::new(|g, v| g.add_row(v[0], v[1]).unwrap())),
        ("mul_bcast", vec![randn(&[3, 6], 11), randn(&[3, 2], 12)], Box::new(|g, v| g.mul_bcast(v[0], v[1]).unwrap())),
        ("scale", vec![randn(&[2, 5], 13)], Box::new(|g, v| g.scale(v[0], -2.5))),
        ("silu", vec![randn(&[2, 5], 14)], Box::new(|g, v| g.silu(v[0]))),
        ("sigmoid", vec![randn(&[2, 5], 15)], Box::new(|g, v| g.sigmoid(v[0]))),
        ("abs", vec![randn(&[2, 5], 16)], Box::new(|g, v| g.abs(v[0]))),
        ("rmsnorm", vec![randn(&[3, 6], 17)], Box::new(|g, v| g.rmsnorm(v[0], 1e-6))),
        ("sum_all", vec![randn(&[3, 4], 18)], Box::new(|g, v| g.sum_all(v[0]))),
        ("mean_all", vec![randn(&[3, 4], 19)], Box::new(|g, v| g.mean_all(v[0]))),
        (
            "concat",
            vec![randn(&[2, 3], 20), randn(&[2, 2], 21)],
            Box::new(|g, v| g.concat(&[v[0], v[1], v[0]], 1).unwrap()),
        ),
        ("index_select", vec![randn(&[4, 3], 22)], Box::new(|g, v| g.index_select(v[0], 0, &[3, 0, 3, 1]).unwrap())),
        ("slice", vec![randn(&[2, 5, 2], 23)], Box::new(|g, v| g.slice(v[0], 1, 1..4).unwrap())),
        ("transpose", vec![randn(&[3, 4], 24)], Box::new(|g, v| g.transpose(v[0]).unwrap())),
        ("reshape", vec![randn(&[3, 4], 25)], Box::new(|g, v| g.reshape(v[0], &[2, 6]).unwrap())),
        ("rope", vec![randn(&[3, 8], 26)], Box::new(move |g, v| g.rope(v[0], &table).unwrap())),
        (
            "attention",
            vec![randn(&[7, 12], 27), randn(&[7, 6], 28), randn(&[7, 6], 29)],
            Box::new(move |g, v| g.attention(v[0], v[1], v[2], layout, &pattern).unwrap()),
        ),
        (
            "swiglu_gated",
            vec![randn(&[3, 4], 30), randn(&[6], 31), randn(&[4, 6], 32), randn(&[4, 6], 33), randn(&[6, 4], 34)],
            Box::new(|g, v| g.swiglu_gated(v[0], v[1], v[2], v[3], v[4]).unwrap()),
        ),
        (
            "fair_crps",
            vec![randn(&[3, 4], 35), randn(&[3, 4], 36), randn(&[3, 4], 37), randn(&[3, 4], 38)],
            Box::new(|g, v| fair_crps_graph(g, &v[..3], v[3]).unwrap()),
        ),
        (
            "weighted_loss",
            vec![randn(&[32, 2], 39), randn(&[32, 2], 40), randn(&[32, 2], 41)],
            Box::new(move |g, v| weighted_loss(g, &v[..2], v[2], &weights).unwrap()),
        ),
        (
            "mean_pool",
            vec![randn(&[8, 3], 42)],
            Box::new(|g, v| bsa::mean_pool(g, v[0], 4).unwrap()),
        ),
    ];
    for axis in 0..3 {
        cases.push(("softmax", vec![randn(&[2, 3, 4], 50 + axis as u64)], Box::new(move |g, v| g.softmax(v[0], axis).unwrap())));
        cases.push(("sum_axis", vec![randn(&[2, 3, 4], 60 + axis as u64)], Box::new(move |g, v| g.sum_axis(v[0], axis).unwrap())));
        cases.push(("mean_axis", vec![randn(&[2, 3, 4], 70 + axis as u64)], Box::new(move |g, v| g.mean_axis(v[0], axis).unwrap())));
    }
    cases
}

fn toy_input<T: sphere_bsa::tensor::Real>(cfg: &ModelConfig, seed: u64) -> ModelInput<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.grid_h * cfg.grid_w;
    ModelInput {
        history: (0..cfg.history).map(|_| Tensor::randn(&[n, cfg.c_dyn], 1.0, &mut rng)).collect(),
        statics: Tensor::randn(&[n, cfg.c_static], 1.0, &mut rng),
        time: [0.3, -0.2, 0.9, 0.1],
    }
}

/// Worst relative error of the directional derivative of every parameter tensor
/// of the toy model against central differences along a random unit direction.
fn model_grad_error() -> Fallible<(f64, String, usize)> {
    let cfg = ModelConfig::toy();
    let model = Model::<f64>::new(cfg.clone())?;
    let mut params = model.init_params(3);
    // lift residual-path weights off their near-zero init so every path carries gradient
    for (_, t) in params.iter_mut() {
        let mut rng = ChaCha8Rng::seed_from_u64(t.numel() as u64);
        for v in t.data_mut() {
            *v += 0.05 * rng.gen_range(-1.0..1.0);
        }
    }
    let input = toy_input::<f64>(&cfg, 4);
    let z: Vec<f64> = (0..cfg.noise_dim).map(|i| (i as f64 * 0.7).sin()).collect();
    let n = cfg.grid_h * cfg.grid_w;
    let w = Tensor::<f64>::randn(&[n, cfg.c_dyn], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
    let objective = |params: &ParamSet<f64>, grad: bool| -> Fallible<(f64, Vec<(String, Tensor<f64>)>)> {
        let mut g = Graph::new();
        let y = model.forward(&mut g, params, &input, &z)?;
        let wv = g.constant(w.clone());
        let p = g.mul(y, wv)?;
        let s = g.sum_all(p);
        let value = g.value(s).data()[0];
        if !grad {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(s)?;
        Ok((value, g.param_grads(&grads)))
    };
    let (_, grads) = objective(&params, true)?;
    let (mut worst, mut worst_name) = (0.0f64, String::new());
    for (k, (name, grad)) in grads.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + k as u64);
        let dir = Tensor::<f64>::randn(grad.shape(), 1.0, &mut rng);
        let dir = dir.scale(1.0 / dir.norm());
        let analytic: f64 = grad.data().iter().zip(dir.data()).map(|(a, b)| a * b).sum();
        let shifted = |sign: f64| -> Fallible<f64> {
            let mut p = params.clone();
            let t = p.get_mut(name)?;
            for (v, d) in t.data_mut().iter_mut().zip(dir.data()) {
                *v += sign * FD_STEP * d;
            }
            Ok(objective(&p, false)?.0)
        };
        let fd = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * FD_STEP);
        let e = rel_err(fd, analytic);
        if e > worst {
            worst = e;
            worst_name = name.clone();
        }
    }
    Ok((worst, worst_name, grads.len()))
}

fn c03_gradients() -> Fallible<Outcome> {
    let mut worst_op = (0.0f64, "");
    let cases = op_cases();
    for (name, inputs, f) in &cases {
        let e = op_grad_error(inputs, f.as_ref())?;
        if e >= worst_op.0 {
            worst_op = (e, name);
        }
    }
    let (model_err, model_name, tensors) = model_grad_error()?;
    outcome(
        worst_op.0 < GRAD_REL_TOL && model_err < GRAD_REL_TOL,
        format!(
            "{} op cases worst {:.2e} ({}), toy model {tensors} tensors worst {model_err:.2e} ({model_name}) (tol {GRAD_REL_TOL:.0e})",
            cases.len(),
            worst_op.0,
            worst_op.1
        ),
    )
}

// ---------------------------------------------------------------------------
// 4: HEALPix
// ---------------------------------------------------------------------------

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn c04_healpix() -> Fallible<Outcome> {
    let mut problems = Vec::new();
    for nside in [1usize, 2, 4, 8, 16, 32, 64] {
        if npix(nside) != 12 * nside * nside || HealpixMesh::new(nside)?.npix() != 12 * nside * nside {
            problems.push(format!("npix({nside})"));
        }
    }
    for (nside, expected) in [(32, 12_288), (64, 49_152), (128, 196_608), (256, 786_432)] {
        if npix(nside) != expected {
            problems.push(format!("table npix({nside})"));
        }
    }
    for nside in [1usize, 2, 4, 8, 16] {
        for p in 0..npix(nside) {
            if children(p, nside)? != [4 * p, 4 * p + 1, 4 * p + 2, 4 * p + 3] {
                problems.push(format!("children({p}, {nside})"));
            }
            for c in children(p, nside)? {
                if parent(c, 2 * nside)? != p {
                    problems.push(format!("parent({c}, {})", 2 * nside));
                }
            }
        }
    }
    for nside in [1usize, 2, 4, 8] {
        for p in 0..npix(nside) {
            let (lat, lon) = pix2ang(nside, p)?;
            if ang2pix(nside, lat, lon)? != p {
                problems.push(format!("round trip {p} at {nside}"));
            }
        }
    }
    let nside = 8;
    let mut counts = vec![0u64; npix(nside)];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..MC_SAMPLES {
        let z: f64 = rng.gen_range(-1.0..1.0);
        let lon: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        counts[ang2pix(nside, z.asin(), lon)?] += 1;
    }
    let p = 1.0 / npix(nside) as f64;
    let sigma = (MC_SAMPLES as f64 * p * (1.0 - p)).sqrt();
    let worst_sigma = counts
        .iter()
        .map(|&c| (c as f64 - MC_SAMPLES as f64 * p).abs() / sigma)
        .fold(0.0, f64::max);
    if worst_sigma >= MC_SIGMAS {
        problems.push(format!("equal area {worst_sigma:.2} sigma"));
    }
    let mut worst_fixture = 0.0f64;
    for nside in [8, 16] {
        let reference: Tensor<f64> = msgt::read(&fixture(&format!("healpix_nested_centers_nside{nside}.msgt")))?;
        let mesh = HealpixMesh::new(nside)?;
        for p in 0..mesh.npix() {
            let (lat, lon) = (reference.data()[2 * p], reference.data()[2 * p + 1]);
            let dlon = (mesh.lon()[p] - lon).rem_euclid(std::f64::consts::TAU);
            let dlon = dlon.min(std::f64::consts::TAU - dlon);
            worst_fixture = worst_fixture.max((mesh.lat()[p] - lat).abs()).max(dlon);
        }
    }
    if worst_fixture >= FIXTURE_TOL_RAD {
        problems.push(format!("fixture deviation {worst_fixture:.2e}"));
    }
    outcome(
        problems.is_empty(),
        format!(
            "npix, children, round trip, equal area worst {worst_sigma:.2} sigma (< {MC_SIGMAS}), \
             fixtures {worst_fixture:.1e} rad (< {FIXTURE_TOL_RAD:.0e}){}",
            if problems.is_empty() { String::new() } else { format!("; failures: {}", problems[..problems.len().min(5)].join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------------------
// 5-6: scaling
// ---------------------------------------------------------------------------

fn bench_config() -> AttentionConfig {
    AttentionConfig {
        d_model: 16,
        heads: 1,
        gqa_ratio: 1,
        head_dim: 16,
        block: 64,
        local_block: 64,
        top_n: 8,
        rope_theta: ROPE_THETA,
        branches: Branches::ALL,
        fixed_gates: None,
    }
}

fn c05_scaling() -> Fallible<Outcome> {
    let cfg = bench_config();
    let rows = bench_attention(&cfg, &BENCH_LENGTHS, &[Variant::Bsa, Variant::Dense], 1, false, 0)?;
    let series = |v: Variant| -> (Vec<f64>, Vec<f64>) {
        rows.iter().filter(|r| r.variant == v).map(|r| (r.length as f64, r.ms)).unzip()
    };
    let (xb, yb) = series(Variant::Bsa);
    let (xd, yd) = series(Variant::Dense);
    let (sb, sd) = (log_log_slope(&xb, &yb), log_log_slope(&xd, &yd));
    let (tb, td) = (*yb.last().unwrap(), *yd.last().unwrap());
    let macs_agree = rows
        .iter()
        .filter(|r| r.variant == Variant::Bsa)
        .all(|r| bsa_cost(&cfg, r.length).is_ok_and(|c| c == r.macs));
    outcome(
        (sb - BSA_SLOPE.0).abs() <= BSA_SLOPE.1 && (sd - DENSE_SLOPE.0).abs() <= DENSE_SLOPE.1 && tb < td && macs_agree,
        format!(
            "slopes bsa {sb:.3} ({}±{}), dense {sd:.3} ({}±{}); at 64k bsa {tb:.0} ms vs dense {td:.0} ms ({:.1}x)",
            BSA_SLOPE.0,
            BSA_SLOPE.1,
            DENSE_SLOPE.0,
            DENSE_SLOPE.1,
            td / tb
        ),
    )
}

fn c06_mac_counter() -> Fallible<Outcome> {
    // finest stage of the full-size architecture
    let cfg = ModelConfig::paper().attention(0);
    let layout = cfg.layout()?;
    let mut counted = Vec::new();
    let mut formula_ok = true;
    for &n in &COST_LENGTHS {
        let c = bsa_cost(&cfg, n)?;
        let m = n / cfg.block;
        let pairs = m * m + n * cfg.top_n * cfg.block + n * cfg.local_block;
        formula_ok &= c == (pairs * 2 * layout.head_dim * layout.heads) as u64;
        counted.push(c as f64);
    }
    let xs: Vec<f64> = COST_LENGTHS.iter().map(|&n| n as f64).collect();
    let slope = log_log_slope(&xs, &counted);
    outcome(
        (slope - MAC_SLOPE.0).abs() <= MAC_SLOPE.1 && formula_ok,
        format!(
            "b={} top_n={} local={}: slope {slope:.4} ({}±{}), closed form {}",
            cfg.block,
            cfg.top_n,
            cfg.local_block,
            MAC_SLOPE.0,
            MAC_SLOPE.1,
            if formula_ok { "matches" } else { "differs" }
        ),
    )
}

// ---------------------------------------------------------------------------
// 7-8: loss
// ---------------------------------------------------------------------------

/// Closed-form CRPS of `N(mu, sigma²)` at `y`.
fn gaussian_crps(mu: f64, sigma: f64, y: f64) -> f64 {
    let std = Normal::new(0.0, 1.0).unwrap();
    let z = (y - mu) / sigma;
    sigma * (z * (2.0 * std.cdf(z) - 1.0) + 2.0 * std.pdf(z) - 1.0 / std::f64::consts::PI.sqrt())
}

fn c07_crps() -> Fallible<Outcome> {
    let a = fair_crps(&[0.0, 0.0], 1.0)?;
    let b = fair_crps(&[0.0, 2.0], 1.0)?;
    let exact = (a - 1.0).abs() <= CRPS_EXACT_TOL && b.abs() <= CRPS_EXACT_TOL;

    let (mu, sigma, y) = (0.0, 1.0, 0.7);
    let normal = Normal::new(mu, sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut members = vec![0.0; CRPS_MEMBERS];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..CRPS_TRIALS {
        for m in members.iter_mut() {
            *m = rng.sample(normal);
        }
        let c = fair_crps(&members, y)?;
        sum += c;
        sum_sq += c * c;
    }
    let n = CRPS_TRIALS as f64;
    let mean = sum / n;
    let se = ((sum_sq / n - mean * mean) / (n - 1.0)).sqrt();
    let truth = gaussian_crps(mu, sigma, y);
    let z = (mean - truth).abs() / se;
    outcome(
        exact && z < CRPS_SE,
        format!(
            "hand cases {a} and {b}; {CRPS_TRIALS} trials of {CRPS_MEMBERS} members: mean {mean:.5} vs closed form {truth:.5}, \
             {z:.2} standard errors (< {CRPS_SE})"
        ),
    )
}

fn c08_loss_weights() -> Fallible<Outcome> {
    let mut worst_mean = 0.0f64;
    for (h, w) in [(16, 32), (32, 64), (121, 240), (180, 360)] {
        let grid = LatLonGrid::new(h, w)?;
        let lw = LossWeights::new(&grid, vec![1.0]);
        let mean = lw.omega.iter().sum::<f64>() / lw.omega.len() as f64;
        worst_mean = worst_mean.max((mean - 1.0).abs());
    }
    let a850 = pressure_alpha(850.0);
    let a500 = pressure_alpha(500.0);
    let by_name = (channel_alpha("t850")? - a850).abs() < 1e-15 && (channel_alpha("z500")? - a500).abs() < 1e-15;
    outcome(
        worst_mean < OMEGA_MEAN_TOL && (a850 - ALPHA_850).abs() < ALPHA_TOL && (a500 - ALPHA_500).abs() < ALPHA_TOL && by_name,
        format!(
            "omega mean off by {worst_mean:.1e} (< {OMEGA_MEAN_TOL:.0e}); alpha(850) = {a850:.4} vs {ALPHA_850}, \
             alpha(500) = {a500:.4} vs {ALPHA_500} (tol {ALPHA_TOL:.0e})"
        ),
    )
}

// ---------------------------------------------------------------------------
// 9-11: optimizer, init, tape
// ---------------------------------------------------------------------------

fn to_matrix(t: &Tensor<f64>) -> DMatrix<f64> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    DMatrix::from_row_slice(r, c, t.data())
}

fn polar_factor(t: &Tensor<f64>) -> DMatrix<f64> {
    let svd = to_matrix(t).svd(true, true);
    svd.u.unwrap() * svd.v_t.unwrap()
}

fn c09_newton_schulz() -> Fallible<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..NS_MATRICES {
        let (r, c) = (rng.gen_range(2..=NS_MAX_SIDE), rng.gen_range(2..=NS_MAX_SIDE));
        let g = Tensor::<f64>::randn(&[r, c], 1.0, &mut rng);
        let oracle = polar_factor(&g);
        let ns = to_matrix(&newton_schulz(&g, NS_STEPS)?);
        worst = worst.max((ns - &oracle).norm() / oracle.norm());
    }
    let mut worst_fixed = 0.0f64;
    for n in [2usize, 16, 64] {
        let q = polar_factor(&Tensor::<f64>::randn(&[n, n], 1.0, &mut rng));
        let qt = Tensor::new(&[n, n], q.transpose().as_slice().to_vec())?;
        let out = to_matrix(&newton_schulz(&qt, NS_STEPS)?);
        worst_fixed = worst_fixed.max((out - &q).norm() / q.norm());
    }
    outcome(
        worst < NS_TOL && worst_fixed < NS_FIXED_TOL,
        format!(
            "{NS_MATRICES} matrices up to {NS_MAX_SIDE}x{NS_MAX_SIDE}: worst relative Frobenius {worst:.3e} (< {NS_TOL:.0e}); \
             orthogonal fixed point {worst_fixed:.2e} (< {NS_FIXED_TOL:.0e})"
        ),
    )
}

fn is_residual_path(name: &str) -> bool {
    name == "noise.z.w"
        || name.starts_with("up")
        || [".attn.o.w", ".ffn.gate.w", ".ffn.noise.w"].iter().any(|s| name.ends_with(s))
}

fn sample_std(t: &Tensor<f64>) -> f64 {
    let n = t.numel() as f64;
    let mean = t.data().iter().sum::<f64>() / n;
    (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn c10_init() -> Fallible<Outcome> {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut p = ParamSet::<f64>::new();
    for (din, dout) in [(256, 256), (512, 128), (128, 512), (384, 96)] {
        let name = format!("l{din}x{dout}");
        p.init_linear(&name, din, dout, None, &mut rng);
        let sigma = (1.0 / (din as f64).sqrt()) * (dout as f64 / din as f64).sqrt().min(1.0);
        worst = worst.max((sample_std(p.get(&format!("{name}.w"))?) / sigma - 1.0).abs());
    }
    let cfg = ModelConfig::desk();
    let model = Model::<f64>::new(cfg.clone())?;
    let params = model.init_params(0);
    let mut checked = 0;
    let mut biases_zero = true;
    for (name, t) in params.iter() {
        if name.ends_with(".b") {
            biases_zero &= t.data().iter().all(|&v| v == 0.0);
            continue;
        }
        if t.rank() != 2 || t.numel() < INIT_MIN_NUMEL {
            continue;
        }
        let sigma = if is_residual_path(name) {
            RESIDUAL_INIT_STD
        } else {
            init_std(t.shape()[0], t.shape()[1])
        };
        worst = worst.max((sample_std(t) / sigma - 1.0).abs());
        checked += 1;
    }

    let mut worst_identity = 0.0f64;
    let z: Vec<f64> = (0..cfg.noise_dim).map(|i| (i as f64).cos()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (s, stage) in cfg.stages.iter().enumerate() {
        for i in 0..stage.enc_depth {
            let mut g = Graph::no_grad();
            let x = Tensor::<f64>::randn(&[model.mesh(s).npix(), stage.dim], 1.0, &mut rng);
            let xv = g.input(x.clone());
            let y = model.encoder_block(&mut g, &params, s, i, xv, &z)?;
            let delta = g.value(y).sub(&x)?;
            worst_identity = worst_identity.max(delta.norm() / x.norm());
        }
    }
    outcome(
        worst < INIT_STD_TOL && biases_zero && worst_identity < NEAR_IDENTITY_TOL,
        format!(
            "std deviation {:.2}% over 4 probes and {checked} desk tensors (< {:.0}%); biases zero {biases_zero}; \
             block |out-in|/|in| {worst_identity:.2e} (< {NEAR_IDENTITY_TOL:.0e})",
            worst * 100.0,
            INIT_STD_TOL * 100.0
        ),
    )
}

fn toy_dataset(steps: usize, seed: u64) -> Fallible<(tempfile::TempDir, Dataset<f32>)> {
    let dir = tempfile::tempdir()?;
    let toy = ModelConfig::toy();
    let cfg = SynthConfig::new(toy.grid_h, toy.grid_w, default_channels(toy.c_dyn), steps, seed);
    synth::generate(&cfg, dir.path())?;
    let data = Dataset::load(dir.path())?;
    Ok((dir, data))
}

fn toy_trainer(data: &Dataset<f32>, steps: usize, seed: u64) -> Fallible<Trainer<f32>> {
    let mut cfg = ModelConfig::toy();
    cfg.c_static = data.config.static_channels();
    let model = Model::<f32>::new(cfg)?;
    let params = model.init_params(seed);
    let weights = LossWeights::for_channels(&data.grid, data.channels())?;
    Ok(Trainer::new(model, params, weights, TrainConfig::pretrain(steps, seed))?)
}

fn c11_tape() -> Fallible<Outcome> {
    let (_dir, data) = toy_dataset(24, 1)?;
    let mut peaks = Vec::new();
    for k in [2usize, 8] {
        let mut trainer = toy_trainer(&data, 10, 1)?;
        let batch = [data.sample(0, 2, k)?];
        trainer.rollout_finetune_step(&batch, k)?;
        peaks.push(trainer.peak_tape());
    }
    outcome(
        peaks[0].abs_diff(peaks[1]) <= TAPE_TOL,
        format!("peak tape k=2: {} ops, k=8: {} ops (±{TAPE_TOL})", peaks[0], peaks[1]),
    )
}

// ---------------------------------------------------------------------------
// 12-13: spectra
// ---------------------------------------------------------------------------

fn c12_spectral() -> Fallible<Outcome> {
    let grid = LatLonGrid::new(32, 64)?;
    let n_max = 15;
    let sht = Sht::new(grid, n_max)?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst_parseval = 0.0f64;
    for _ in 0..5 {
        let mut c = Coeffs::zeros(n_max);
        for v in c.cos.iter_mut().chain(c.sin.iter_mut()) {
            *v = rng.gen_range(-1.0..1.0);
        }
        let field = sht.synthesize(&c);
        let total: f64 = sht.power_spectrum(&field)?.iter().sum();
        worst_parseval = worst_parseval.max((total / sht.mean_square(&field)? - 1.0).abs());
    }
    let mut worst_concentration = 1.0f64;
    for n in 0..=n_max {
        for m in 0..=n {
            for sine in [false, true] {
                if sine && m == 0 {
                    continue;
                }
                let mut c = Coeffs::zeros(n_max);
                let k = sphere_bsa::diagnostics::sht::tri(n, m);
                if sine {
                    c.sin[k] = 1.0;
                } else {
                    c.cos[k] = 1.0;
                }
                let power = sht.power_spectrum(&sht.synthesize(&c))?;
                worst_concentration = worst_concentration.min(power[n] / power.iter().sum::<f64>());
            }
        }
    }
    let field: Vec<f64> = (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let spectrum = sht.power_spectrum(&field)?;
    let ratio = spectral_ratio(std::slice::from_ref(&spectrum), std::slice::from_ref(&spectrum), false);
    let worst_self = ratio.iter().map(|r| r.map_or(f64::INFINITY, |r| (r - 1.0).abs())).fold(0.0, f64::max);
    outcome(
        worst_parseval < PARSEVAL_TOL && worst_concentration > CONCENTRATION_MIN && worst_self < SELF_RATIO_TOL,
        format!(
            "Parseval {:.2e} (< {PARSEVAL_TOL}), Y_n^m concentration min {worst_concentration:.6} (> {CONCENTRATION_MIN}), \
             ratio(x,x) - 1 max {worst_self:.1e}",
            worst_parseval
        ),
    )
}

fn c13_aliasing() -> Fallible<Outcome> {
    let signal = AliasSignal::supra_nyquist(ALIAS_SEED);
    let mut excess = Vec::new();
    for &coarse in &ALIAS_COARSE {
        let r = aliasing_demo(&signal, ALIAS_NATIVE, coarse, Nonlinearity::Square)?;
        excess.push(r.excess.ok_or("no reference power in the aliased band")?);
    }
    let distance: Vec<f64> = excess.iter().map(|e| (e - 1.0).abs()).collect();
    let monotone = distance.windows(2).all(|w| w[1] <= w[0]);
    outcome(
        excess[0] > ALIAS_EXCESS_MIN && monotone,
        format!(
            "coarse/native ratio in aliased band at nside {:?}: {} (first > {ALIAS_EXCESS_MIN}, |excess-1| non-increasing)",
            ALIAS_COARSE,
            excess.iter().map(|e| format!("{e:.4}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 14: end to end
// ---------------------------------------------------------------------------

fn channel(t: &Tensor<f32>, c: usize) -> Vec<f64> {
    let w = t.shape()[1];
    t.data().iter().skip(c).step_by(w).map(|&v| f64::from(v)).collect()
}

fn c14_end_to_end() -> Fallible<Outcome> {
    let (_dir, data) = toy_dataset(E2E_DATA_STEPS, E2E_SEED)?;
    let mut trainer = toy_trainer(&data, E2E_STEPS, E2E_SEED)?;
    let loop_cfg = LoopConfig {
        steps: E2E_STEPS,
        batch: E2E_BATCH,
        rollout: 1,
        val_every: E2E_STEPS,
        val_samples: 8,
        seed: E2E_SEED,
    };
    let mut val = Vec::new();
    fit(&mut trainer, &data, &loop_cfg, |_| Ok(()), |_, l| {
        val.push(l);
        Ok(())
    })?;
    let (first, last) = (val[0], *val.last().unwrap());
    let reduction = 1.0 - last / first;

    let history = trainer.model.config().history;
    let start = split_samples(data.num_samples(history, 1))?.1.start;
    let base = start + history - 1;
    let initial = data.sample(start, history, 1)?.input;
    let ensemble = generate_ensemble(&trainer.model, &trainer.params, &initial, E2E_MEMBERS, E2E_LEADS, E2E_SEED, |j| {
        data.time(base + j)
    })?;
    let physical = ensemble
        .iter()
        .map(|traj| traj.iter().map(|y| data.stats.denormalize(y)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()?;
    let grid = data.grid;
    let mut ssr = Vec::new();
    for c in 0..data.channels().len() {
        let members: Vec<Vec<Vec<f64>>> = physical.iter().map(|t| t.iter().map(|y| channel(y, c)).collect()).collect();
        let truth: Vec<Vec<f64>> = (1..=E2E_LEADS).map(|j| channel(&data.states[base + j], c)).collect();
        let rows = ensemble_metrics(&grid, &members, &truth, data.stats.std[c])?;
        ssr.extend(rows.iter().filter_map(|r| r.ssr));
    }
    let mean_ssr = ssr.iter().sum::<f64>() / ssr.len() as f64;

    let msl = data.channels().iter().position(|c| c == "msl").ok_or("no msl channel")?;
    let mut trajectory = vec![channel(&data.states[base], msl)];
    for j in 0..E2E_LEADS {
        let n = grid.len();
        let fields: Vec<Vec<f64>> = physical.iter().map(|t| channel(&t[j], msl)).collect();
        trajectory.push((0..n).map(|p| fields.iter().map(|f| f[p]).sum::<f64>() / E2E_MEMBERS as f64).collect());
    }
    let drift = gmsp_drift(&grid, &trajectory)?;
    let max_drift = drift.iter().map(|d| d.abs()).fold(0.0, f64::max);
    let limit = DRIFT_FRACTION * data.stats.std[msl];
    outcome(
        reduction >= VAL_REDUCTION_MIN && (SSR_RANGE.0..=SSR_RANGE.1).contains(&mean_ssr) && max_drift < limit,
        format!(
            "validation CRPS {first:.4} -> {last:.4} ({:.1}% reduction, >= {:.0}%); {E2E_MEMBERS}x{E2E_LEADS} ensemble \
             SSR {mean_ssr:.3} in [{}, {}]; msl drift {max_drift:.3} hPa (< {limit:.3})",
            reduction * 100.0,
            VAL_REDUCTION_MIN * 100.0,
            SSR_RANGE.0,
            SSR_RANGE.1
        ),
    )
}
