//! Named parameter storage and the layers shared by every network component.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Std-dev scale for layers on the residual path.
pub const RESIDUAL_INIT_STD: f64 = 0.01;

/// `σ = (1/√d_in)·min(1, √(d_out/d_in))`.
pub fn init_std(d_in: usize, d_out: usize) -> f64 {
    let (i, o) = (d_in as f64, d_out as f64);
    (1.0 / i.sqrt()) * (o / i).sqrt().min(1.0)
}

/// Parameters by dotted name, iterated in name order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { map: BTreeMap::new() }
    }

    pub fn from_map(map: BTreeMap<String, Tensor<T>>) -> Self {
        ParamSet { map }
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.map
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Adds `[d_in, d_out]` weights drawn from `N(0, std²)`; `std` defaults to [`init_std`].
    pub fn init_linear<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: Option<f64>,
        rng: &mut R,
    ) {
        let std = std.unwrap_or_else(|| init_std(d_in, d_out));
        self.insert(format!("{name}.w"), Tensor::randn(&[d_in, d_out], std, rng));
    }

    pub fn init_bias(&mut self, name: &str, d_out: usize) {
        self.insert(format!("{name}.b"), Tensor::zeros(&[d_out]));
    }

    /// Registers `name` on the graph.
    pub fn var(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        Ok(g.param(name, self.get(name)?))
    }

    /// `x · W (+ b)` using `{name}.w` and, when present, `{name}.b`.
    pub fn linear(&self, g: &mut Graph<T>, name: &str, x: Var) -> Result<Var> {
        let w = self.var(g, &format!("{name}.w"))?;
        let y = g.matmul(x, w)?;
        let bias = format!("{name}.b");
        if self.contains(&bias) {
            let b = self.var(g, &bias)?;
            g.add_row(y, b)
        } else {
            Ok(y)
        }
    }
}
