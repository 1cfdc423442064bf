use std::collections::HashMap;
use std::ops::Range;
use std::sync::Arc;

use super::attention::{attention_backward, attention_forward, AttentionPattern, HeadLayout};
use super::{Real, RopeTable, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps upstream gradient to one optional gradient per parent. The flags say which
/// parents need one.
type Backward<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<Backward<T>>,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so reverse index order
/// is a valid topological order for the backward sweep.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    params: HashMap<String, Var>,
    param_order: Vec<String>,
}

/// Gradients of a scalar with respect to every node that requires one.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            params: HashMap::new(),
            param_order: Vec::new(),
        }
    }

    /// A graph that records no backward rules (inference and pushforward warm-up steps).
    pub fn no_grad() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes carrying a backward rule.
    pub fn recorded_ops(&self) -> usize {
        self.nodes.iter().filter(|n| n.backward.is_some()).count()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            requires_grad: requires_grad && self.grad_enabled,
            value,
            parents: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf that receives a gradient iff the tensor is flagged `requires_grad`.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        let rg = value.requires_grad();
        self.leaf(value, rg)
    }

    /// Named trainable parameter. Registering the same name twice returns the cached node.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(value.clone(), true);
        self.params.insert(name.to_string(), v);
        self.param_order.push(name.to_string());
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Gradients of all registered parameters, in registration order.
    pub fn param_grads(&self, grads: &Grads<T>) -> Vec<(String, Tensor<T>)> {
        self.param_order
            .iter()
            .map(|name| {
                let v = self.params[name];
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
                (name.clone(), g)
            })
            .collect()
    }

    /// Records a node. `backward` is dropped when no parent needs a gradient.
    pub(crate) fn push(
        &mut self,
        value: Tensor<T>,
        parents: &[Var],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var {
        #[cfg(debug_assertions)]
        if !value.all_finite() && parents.iter().all(|p| self.nodes[p.0].value.all_finite()) {
            panic!("non-finite output from finite inputs (node {})", self.nodes.len());
        }
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Grads<T>> {
        let out = &self.nodes[output.0];
        if out.value.numel() != 1 {
            return Err(Error::dim("backward needs a scalar", out.value.shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::ones(out.value.shape()));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            let Some(rule) = &node.backward else { continue };
            let Some(g) = grads[i].clone() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let parent_grads = rule(&g, &needs);
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p].value.shape(), "gradient shape of node {p}");
                grads[p] = Some(match grads[p].take() {
                    None => pg,
                    Some(acc) => acc.add(&pg)?,
                });
            }
        }
        Ok(Grads { grads })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let y = av.matmul(&bv)?;
        Ok(self.push(y, &[a, b], move |g, need| {
            vec![
                need[0].then(|| g.matmul_nt(&bv).expect("matmul grad")),
                need[1].then(|| av.matmul_tn(g).expect("matmul grad")),
            ]
        }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, &[a, b], |g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).sub(self.value(b))?;
        Ok(self.push(y, &[a, b], |g, need| {
            vec![Some(g.clone()), need[1].then(|| g.scale(-T::one()))]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let y = av.mul(&bv)?;
        Ok(self.push(y, &[a, b], move |g, need| {
            vec![
                need[0].then(|| g.mul(&bv).expect("mul grad")),
                need[1].then(|| g.mul(&av).expect("mul grad")),
            ]
        }))
    }

    /// `x [.., n] + row [n]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let y = self.value(x).add_row(self.value(row))?;
        let row_shape = self.shape(row).to_vec();
        Ok(self.push(y, &[x, row], move |g, need| {
            vec![
                Some(g.clone()),
                need[1].then(|| g.sum_rows().reshape(&row_shape).expect("add_row grad")),
            ]
        }))
    }

    /// `x [M, G*r]` scaled per row by `gate [M, G]`, one gate column per `r` columns.
    pub fn mul_bcast(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x).clone(), self.value(gate).clone());
        let y = xv.mul_bcast(&gv)?;
        let groups = gv.shape()[1];
        Ok(self.push(y, &[x, gate], move |g, need| {
            vec![
                need[0].then(|| g.mul_bcast(&gv).expect("mul_bcast grad")),
                need[1].then(|| g.group_dot(&xv, groups)),
            ]
        }))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::lit(s);
        let y = self.value(x).scale(s);
        self.push(y, &[x], move |g, _| vec![Some(g.scale(s))])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x).clone();
        let y = xv.silu();
        self.push(y, &[x], move |g, _| {
            let d = xv
                .zip_map(g, "silu grad", |v, gv| {
                    let s = super::ops::sigmoid(v);
                    gv * s * (T::one() + v * (T::one() - s))
                })
                .expect("silu grad");
            vec![Some(d)]
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).sigmoid();
        let yv = y.clone();
        self.push(y, &[x], move |g, _| {
            vec![Some(yv.zip_map(g, "sigmoid grad", |s, gv| gv * s * (T::one() - s)).expect("sigmoid grad"))]
        })
    }

    /// `|x|` with subgradient 0 at 0.
    pub fn abs(&mut self, x: Var) -> Var {
        let xv = self.value(x).clone();
        let y = xv.abs();
        self.push(y, &[x], move |g, _| {
            let d = xv
                .zip_map(g, "abs grad", |v, gv| {
                    if v > T::zero() {
                        gv
                    } else if v < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                })
                .expect("abs grad");
            vec![Some(d)]
        })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = self.value(x).softmax(axis)?;
        let yv = y.clone();
        Ok(self.push(y, &[x], move |g, _| vec![Some(Tensor::softmax_backward(&yv, g, axis))]))
    }

    /// RMS normalization over the last axis, no affine parameters.
    pub fn rmsnorm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x).clone();
        let (y, inv) = xv.rmsnorm(eps);
        self.push(y, &[x], move |g, _| vec![Some(Tensor::rmsnorm_backward(&xv, &inv, g))])
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = self.value(x).sum_axis(axis)?;
        let full = self.shape(x).to_vec();
        Ok(self.push(y, &[x], move |g, _| vec![Some(g.expand_axis(&full, axis))]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = self.shape(x).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let y = Tensor::scalar(xv.sum());
        self.push(y, &[x], move |g, _| vec![Some(Tensor::full(&shape, g.data()[0]))])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::concat(&values, axis)?;
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        Ok(self.push(y, parts, move |g, need| {
            let mut start = 0;
            lens.iter()
                .zip(need)
                .map(|(&len, &n)| {
                    let r = start..start + len;
                    start += len;
                    n.then(|| slice_axis(g, axis, r).expect("concat grad"))
                })
                .collect()
        }))
    }

    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let y = self.value(x).index_select(axis, indices)?;
        let full = self.shape(x).to_vec();
        let idx: Arc<[usize]> = indices.into();
        Ok(self.push(y, &[x], move |g, _| vec![Some(g.index_add(&full, axis, &idx))]))
    }

    pub fn slice(&mut self, x: Var, axis: usize, range: Range<usize>) -> Result<Var> {
        let y = slice_axis(self.value(x), axis, range.clone())?;
        let full = self.shape(x).to_vec();
        Ok(self.push(y, &[x], move |g, _| {
            let idx: Vec<usize> = range.clone().collect();
            vec![Some(g.index_add(&full, axis, &idx))]
        }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).transpose()?;
        Ok(self.push(y, &[x], |g, _| vec![Some(g.transpose().expect("transpose grad"))]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        let orig = self.shape(x).to_vec();
        Ok(self.push(y, &[x], move |g, _| vec![Some(g.reshape(&orig).expect("reshape grad"))]))
    }

    /// Rotary embedding of `x [N, heads * head_dim]`.
    pub fn rope(&mut self, x: Var, table: &Arc<RopeTable<T>>) -> Result<Var> {
        let y = table.apply(self.value(x))?;
        let table = Arc::clone(table);
        Ok(self.push(y, &[x], move |g, _| vec![Some(table.apply_inverse(g).expect("rope grad"))]))
    }

    /// `(silu(x·wg + bias) ⊙ (x·wv))·wout` with `bias [d_ff]` shared by every row.
    pub fn swiglu_gated(&mut self, x: Var, bias: Var, wg: Var, wv: Var, wout: Var) -> Result<Var> {
        let pre = self.matmul(x, wg)?;
        let pre = self.add_row(pre, bias)?;
        let gate = self.silu(pre);
        let value = self.matmul(x, wv)?;
        let h = self.mul(gate, value)?;
        self.matmul(h, wout)
    }

    /// Fused softmax attention restricted to `pattern`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: HeadLayout,
        pattern: &AttentionPattern,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q).clone(), self.value(k).clone(), self.value(v).clone());
        let (out, lse) = attention_forward(&qv, &kv, &vv, &layout, pattern)?;
        let ov = out.clone();
        let pattern = pattern.clone();
        Ok(self.push(out, &[q, k, v], move |g, _| {
            let (dq, dk, dv) = attention_backward(&qv, &kv, &vv, &ov, &lse, g, &layout, &pattern);
            vec![Some(dq), Some(dk), Some(dv)]
        }))
    }
}

/// Contiguous sub-range along `axis`.
pub(crate) fn slice_axis<T: Real>(x: &Tensor<T>, axis: usize, range: Range<usize>) -> Result<Tensor<T>> {
    if axis >= x.rank() || range.end > x.shape()[axis] || range.is_empty() {
        return Err(Error::dim("slice", x.shape(), &[axis, range.start, range.end]));
    }
    let (outer, len, inner) = super::split_axis(x.shape(), axis);
    let src = x.data();
    let mut out = Vec::with_capacity(outer * range.len() * inner);
    for o in 0..outer {
        out.extend_from_slice(&src[(o * len + range.start) * inner..(o * len + range.end) * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = range.len();
    Ok(Tensor::from_parts(shape, out))
}
