//! Pure (non-recording) tensor operations. Forward values and backward rules of the
//! tape are both built from these.

use super::{gemm, split_axis, Real, Strides, Tensor};
use crate::error::{Error, Result};

impl<T: Real> Tensor<T> {
    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(), other.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            self.data(),
            Strides::row_major(k),
            other.data(),
            Strides::row_major(n),
            T::zero(),
            &mut out,
            Strides::row_major(n),
        );
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    /// `self · otherᵀ` for `self [m,k]`, `other [n,k]`.
    pub fn matmul_nt(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.dims2()?;
        let (n, k2) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.shape(), other.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            self.data(),
            Strides::row_major(k),
            other.data(),
            Strides::transposed(k),
            T::zero(),
            &mut out,
            Strides::row_major(n),
        );
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    /// `selfᵀ · other` for `self [k,m]`, `other [k,n]`.
    pub fn matmul_tn(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (k, m) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul_tn", self.shape(), other.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            self.data(),
            Strides::transposed(m),
            other.data(),
            Strides::row_major(n),
            T::zero(),
            &mut out,
            Strides::row_major(n),
        );
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (r, c) = self.dims2()?;
        let src = self.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor::from_parts(self.shape().to_vec(), self.data().iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape() != other.shape() {
            return Err(Error::dim(op, self.shape(), other.shape()));
        }
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_parts(self.shape().to_vec(), data))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        self.map(|v| v * s)
    }

    /// Adds `row [n]` to every length-`n` row of `self [.., n]`.
    pub fn add_row(&self, row: &Tensor<T>) -> Result<Tensor<T>> {
        let n = *self.shape().last().unwrap_or(&0);
        if row.numel() != n {
            return Err(Error::dim("add_row", self.shape(), row.shape()));
        }
        let r = row.data();
        let data = self
            .data()
            .chunks_exact(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&a, &b)| a + b))
            .collect();
        Ok(Tensor::from_parts(self.shape().to_vec(), data))
    }

    /// Column sums of `self [.., n]` as `[n]`.
    pub fn sum_rows(&self) -> Tensor<T> {
        let n = *self.shape().last().unwrap_or(&1);
        let mut out = vec![T::zero(); n];
        for chunk in self.data().chunks_exact(n) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o = *o + v;
            }
        }
        Tensor::from_parts(vec![n], out)
    }

    /// `self [M, G*r] ⊙ g [M, G]`, each gate column scaling `r` consecutive columns.
    pub fn mul_bcast(&self, gate: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.dims2()?;
        let (gm, gk) = gate.dims2()?;
        if gm != m || gk == 0 || k % gk != 0 {
            return Err(Error::dim("mul_bcast", self.shape(), gate.shape()));
        }
        let r = k / gk;
        let (a, g) = (self.data(), gate.data());
        let data = (0..m * k).map(|i| a[i] * g[(i / k) * gk + (i % k) / r]).collect();
        Ok(Tensor::from_parts(vec![m, k], data))
    }

    /// Reduce `self [M, G*r]` against `other` to `[M, G]`: `Σ_t self[m, j*r+t] * other[m, j*r+t]`.
    pub(crate) fn group_dot(&self, other: &Tensor<T>, groups: usize) -> Tensor<T> {
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let r = k / groups;
        let (a, b) = (self.data(), other.data());
        let mut out = vec![T::zero(); m * groups];
        for (i, o) in out.iter_mut().enumerate() {
            let base = (i / groups) * k + (i % groups) * r;
            *o = (base..base + r).map(|t| a[t] * b[t]).sum();
        }
        Tensor::from_parts(vec![m, groups], out)
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.rank() {
            return Err(Error::dim(op, self.shape(), &[axis]));
        }
        Ok(())
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        self.check_axis(axis, "sum_axis")?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let src = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &src[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d = *d + v;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor::from_parts(shape, out))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let len = T::lit(self.shape().get(axis).copied().unwrap_or(1) as f64);
        Ok(self.sum_axis(axis)?.scale(T::one() / len))
    }

    /// Inverse of a reduction: repeat `self` (shape with `axis` removed) `len` times along `axis`.
    pub(crate) fn expand_axis(&self, full_shape: &[usize], axis: usize) -> Tensor<T> {
        let (outer, len, inner) = split_axis(full_shape, axis);
        let src = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for _ in 0..len {
                out.extend_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        Tensor::from_parts(full_shape.to_vec(), out)
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        self.check_axis(axis, "softmax")?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let mut out = self.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mx = (0..len).map(|a| out[at(a)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for a in 0..len {
                    let e = (out[at(a)] - mx).exp();
                    out[at(a)] = e;
                    total = total + e;
                }
                for a in 0..len {
                    out[at(a)] = out[at(a)] / total;
                }
            }
        }
        Ok(Tensor::from_parts(self.shape().to_vec(), out))
    }

    /// Backward of softmax along `axis` given its output `y` and upstream `dy`.
    pub(crate) fn softmax_backward(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Tensor<T> {
        let (outer, len, inner) = split_axis(y.shape(), axis);
        let (yv, gv) = (y.data(), dy.data());
        let mut out = vec![T::zero(); yv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let dot: T = (0..len).map(|a| yv[at(a)] * gv[at(a)]).sum();
                for a in 0..len {
                    out[at(a)] = yv[at(a)] * (gv[at(a)] - dot);
                }
            }
        }
        Tensor::from_parts(y.shape().to_vec(), out)
    }

    /// RMS normalization over the last axis without affine parameters.
    /// Returns the output and the per-row reciprocal RMS.
    pub fn rmsnorm(&self, eps: f64) -> (Tensor<T>, Vec<T>) {
        let n = *self.shape().last().unwrap_or(&1);
        let eps = T::lit(eps);
        let inv_n = T::one() / T::lit(n as f64);
        let mut out = Vec::with_capacity(self.numel());
        let mut inv = Vec::with_capacity(self.numel() / n.max(1));
        for row in self.data().chunks_exact(n) {
            let ms: T = row.iter().map(|&v| v * v).sum::<T>() * inv_n;
            let r = T::one() / (ms + eps).sqrt();
            inv.push(r);
            out.extend(row.iter().map(|&v| v * r));
        }
        (Tensor::from_parts(self.shape().to_vec(), out), inv)
    }

    pub(crate) fn rmsnorm_backward(x: &Tensor<T>, inv: &[T], dy: &Tensor<T>) -> Tensor<T> {
        let n = *x.shape().last().unwrap_or(&1);
        let inv_n = T::one() / T::lit(n as f64);
        let mut out = Vec::with_capacity(x.numel());
        for ((row, grow), &r) in x.data().chunks_exact(n).zip(dy.data().chunks_exact(n)).zip(inv) {
            let dot: T = row.iter().zip(grow).map(|(&a, &b)| a * b).sum();
            let c = r * r * r * dot * inv_n;
            out.extend(row.iter().zip(grow).map(|(&a, &g)| r * g - c * a));
        }
        Tensor::from_parts(x.shape().to_vec(), out)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.map(sigmoid)
    }

    /// Swish / SiLU: `x / (1 + e^{-x})`.
    pub fn silu(&self) -> Tensor<T> {
        self.map(|v| v * sigmoid(v))
    }

    pub fn abs(&self) -> Tensor<T> {
        self.map(|v| v.abs())
    }

    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::config("concat of zero tensors"))?;
        first.check_axis(axis, "concat")?;
        for p in parts {
            let same_rank = p.rank() == first.rank();
            let same_other = same_rank
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same_other {
                return Err(Error::dim("concat", first.shape(), p.shape()));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = p.shape()[axis];
                out.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_parts(shape, out))
    }

    /// Gather entries along `axis` by an index list (indices may repeat).
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor<T>> {
        self.check_axis(axis, "index_select")?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::OutOfRange { index: bad, limit: len });
        }
        if indices.is_empty() {
            return Err(Error::config("index_select with an empty index list"));
        }
        let src = self.data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                out.extend_from_slice(&src[(o * len + i) * inner..(o * len + i + 1) * inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = indices.len();
        Ok(Tensor::from_parts(shape, out))
    }

    /// Scatter-add `self` (gathered along `axis`) back into a zero tensor of `full_shape`.
    pub(crate) fn index_add(&self, full_shape: &[usize], axis: usize, indices: &[usize]) -> Tensor<T> {
        let (outer, len, inner) = split_axis(full_shape, axis);
        let src = self.data();
        let mut out = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            for (k, &i) in indices.iter().enumerate() {
                let s = &src[(o * indices.len() + k) * inner..(o * indices.len() + k + 1) * inner];
                for (d, &v) in out[(o * len + i) * inner..(o * len + i + 1) * inner].iter_mut().zip(s) {
                    *d = *d + v;
                }
            }
        }
        Tensor::from_parts(full_shape.to_vec(), out)
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
