//! Per-channel standardization statistics.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Welford's online mean and variance for every channel.
#[derive(Clone, Debug, Default)]
pub struct Welford {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    pub fn new(channels: usize) -> Self {
        Welford {
            count: 0,
            mean: vec![0.0; channels],
            m2: vec![0.0; channels],
        }
    }

    pub fn push(&mut self, row: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(row) {
            let d = x - *m;
            *m += d / n;
            *s += d * (x - *m);
        }
    }

    /// Adds every row of a `[points, C]` state.
    pub fn push_state<T: Real>(&mut self, state: &Tensor<T>) -> Result<()> {
        let c = self.mean.len();
        if state.rank() != 2 || state.shape()[1] != c {
            return Err(Error::dim("normalization state", state.shape(), &[0, c]));
        }
        let mut row = vec![0.0; c];
        for chunk in state.data().chunks(c) {
            for (r, v) in row.iter_mut().zip(chunk) {
                *r = v.as_f64();
            }
            self.push(&row);
        }
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Population statistics; constant channels get `σ = 1`.
    pub fn finish(&self) -> Result<NormStats> {
        if self.count == 0 {
            return Err(Error::config("normalization needs at least one sample"));
        }
        let std = self
            .m2
            .iter()
            .map(|s| {
                let sd = (s / self.count as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        NormStats::new(self.mean.clone(), std)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::dim("normalization stats", &[mean.len()], &[std.len()]));
        }
        if let Some(s) = std.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::Numeric(format!("standard deviation {s} must be positive")));
        }
        Ok(NormStats { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        NormStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn map<T: Real>(&self, x: &Tensor<T>, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor<T>> {
        let c = self.channels();
        if x.rank() != 2 || x.shape()[1] != c {
            return Err(Error::dim("normalize", x.shape(), &[0, c]));
        }
        let data = x.data().iter().enumerate().map(|(i, v)| T::lit(f(v.as_f64(), self.mean[i % c], self.std[i % c])));
        Tensor::new(x.shape(), data.collect())
    }

    pub fn normalize<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.map(x, |v, m, s| (v - m) / s)
    }

    pub fn denormalize<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.map(x, |v, m, s| v * s + m)
    }

    /// `[2, C]` with means in row 0 and standard deviations in row 1.
    pub fn to_tensor(&self) -> Tensor<f64> {
        let mut data = self.mean.clone();
        data.extend_from_slice(&self.std);
        Tensor::new(&[2, self.channels()], data).expect("2·C values")
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Result<Self> {
        let (rows, c) = t.dims2()?;
        if rows != 2 {
            return Err(Error::dim("normalization stats", t.shape(), &[2, c]));
        }
        Self::new(t.data()[..c].to_vec(), t.data()[c..].to_vec())
    }
}
