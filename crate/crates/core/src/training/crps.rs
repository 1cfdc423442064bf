//! Fair (finite-ensemble unbiased) CRPS.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Var};

/// `(1/N)Σ|xⁿ − y| − (1/(2N(N−1)))Σ_{n,n'}|xⁿ − xⁿ'|`. Requires `N ≥ 2`.
pub fn fair_crps(members: &[f64], truth: f64) -> Result<f64> {
    let n = members.len();
    if n < 2 {
        return Err(Error::EnsembleSize(n));
    }
    let skill = members.iter().map(|x| (x - truth).abs()).sum::<f64>() / n as f64;
    let mut spread = 0.0;
    for (i, a) in members.iter().enumerate() {
        for b in &members[i + 1..] {
            spread += (a - b).abs();
        }
    }
    // Each unordered pair appears twice in the double sum.
    Ok(skill - spread / (n * (n - 1)) as f64)
}

/// Elementwise fair CRPS of same-shaped member tensors against `truth`.
pub fn fair_crps_graph<T: Real>(g: &mut Graph<T>, members: &[Var], truth: Var) -> Result<Var> {
    let n = members.len();
    if n < 2 {
        return Err(Error::EnsembleSize(n));
    }
    let mut skill = None;
    for &m in members {
        let d = g.sub(m, truth)?;
        let d = g.abs(d);
        skill = Some(match skill {
            None => d,
            Some(acc) => g.add(acc, d)?,
        });
    }
    let skill = g.scale(skill.expect("n >= 2"), 1.0 / n as f64);
    let mut spread = None;
    for i in 0..n {
        for j in i + 1..n {
            let d = g.sub(members[i], members[j])?;
            let d = g.abs(d);
            spread = Some(match spread {
                None => d,
                Some(acc) => g.add(acc, d)?,
            });
        }
    }
    let spread = g.scale(spread.expect("n >= 2"), 1.0 / (n * (n - 1)) as f64);
    g.sub(skill, spread)
}
