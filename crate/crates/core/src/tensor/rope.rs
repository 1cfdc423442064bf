use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Rotary table for two angular coordinates per token.
///
/// The head dimension is split in half: pairs in the first half rotate with
/// longitude, pairs in the second half with latitude. Within each half pair `i`
/// uses frequency `theta^(-2i / (head_dim/2))`.
#[derive(Clone, Debug)]
pub struct RopeTable<T> {
    tokens: usize,
    pairs: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Real> RopeTable<T> {
    /// `lonlat` holds `(longitude, latitude)` in radians per token.
    pub fn new(lonlat: &[(f64, f64)], head_dim: usize, theta: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 4 != 0 {
            return Err(Error::config(format!(
                "2D rotary embedding needs head_dim divisible by 4, got {head_dim}"
            )));
        }
        let half = head_dim / 2;
        let pairs = head_dim / 2;
        let per_axis = pairs / 2;
        let mut cos = Vec::with_capacity(lonlat.len() * pairs);
        let mut sin = Vec::with_capacity(lonlat.len() * pairs);
        for &(lon, lat) in lonlat {
            for p in 0..pairs {
                let (coord, i) = if p < per_axis { (lon, p) } else { (lat, p - per_axis) };
                let freq = theta.powf(-2.0 * i as f64 / half as f64);
                let angle = coord * freq;
                cos.push(T::lit(angle.cos()));
                sin.push(T::lit(angle.sin()));
            }
        }
        Ok(RopeTable {
            tokens: lonlat.len(),
            pairs,
            cos,
            sin,
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn head_dim(&self) -> usize {
        self.pairs * 2
    }

    fn check(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        let (n, width) = x.dims2()?;
        let hd = self.head_dim();
        if n != self.tokens || width % hd != 0 {
            return Err(Error::dim("rope", x.shape(), &[self.tokens, hd]));
        }
        Ok((n, width / hd))
    }

    fn rotate(&self, x: &Tensor<T>, inverse: bool) -> Result<Tensor<T>> {
        let (n, heads) = self.check(x)?;
        let hd = self.head_dim();
        let src = x.data();
        let mut out = vec![T::zero(); src.len()];
        for t in 0..n {
            let cs = &self.cos[t * self.pairs..(t + 1) * self.pairs];
            let sn = &self.sin[t * self.pairs..(t + 1) * self.pairs];
            for h in 0..heads {
                let base = t * heads * hd + h * hd;
                for p in 0..self.pairs {
                    let (a, b) = (src[base + 2 * p], src[base + 2 * p + 1]);
                    let s = if inverse { -sn[p] } else { sn[p] };
                    out[base + 2 * p] = a * cs[p] - b * s;
                    out[base + 2 * p + 1] = a * s + b * cs[p];
                }
            }
        }
        Ok(Tensor::from_parts(x.shape().to_vec(), out))
    }

    /// Rotate `x [N, heads * head_dim]`.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.rotate(x, false)
    }

    /// Adjoint (= inverse) rotation, used for gradients.
    pub fn apply_inverse(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.rotate(x, true)
    }
}
