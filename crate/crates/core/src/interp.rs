//! Cross-attention interpolation between point sets on the sphere.
//!
//! Each target attends to its `k` nearest sources. Queries come only from the unit
//! relative position `(target − source)/‖·‖`; keys and values are projections of the
//! RMS-normalized source features. Neighbor lists and relative positions are fixed
//! at construction.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::LatLonGrid;
use crate::healpix::{knn_on_grid, HealpixMesh};
use crate::nn::ParamSet;
use crate::tensor::{Graph, Real, Tensor, Var};

pub const DEFAULT_NEIGHBORS: usize = 24;
pub const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct InterpOperator {
    k: usize,
    n_source: usize,
    /// `n_target · k` source indices, nearest first.
    neighbors: Vec<usize>,
    /// Unit relative positions, zero for coincident points.
    rel: Vec<[f64; 3]>,
}

impl InterpOperator {
    pub fn new(targets: &[[f64; 3]], sources: &[[f64; 3]], neighbors: Vec<usize>, k: usize) -> Result<Self> {
        if k == 0 || neighbors.len() != targets.len() * k {
            return Err(Error::dim("interp neighbors", &[neighbors.len()], &[targets.len(), k]));
        }
        if let Some(&bad) = neighbors.iter().find(|&&j| j >= sources.len()) {
            return Err(Error::OutOfRange {
                index: bad,
                limit: sources.len(),
            });
        }
        let rel = neighbors
            .iter()
            .enumerate()
            .map(|(e, &j)| {
                let (t, s) = (targets[e / k], sources[j]);
                let d = [t[0] - s[0], t[1] - s[1], t[2] - s[2]];
                let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                if norm < 1e-12 {
                    [0.0; 3]
                } else {
                    [d[0] / norm, d[1] / norm, d[2] / norm]
                }
            })
            .collect();
        Ok(InterpOperator {
            k,
            n_source: sources.len(),
            neighbors,
            rel,
        })
    }

    /// Lat-lon grid sources to mesh-pixel targets.
    pub fn grid_to_mesh(mesh: &HealpixMesh, grid: &LatLonGrid, k: usize) -> Result<Self> {
        let nb = knn_on_grid(mesh, grid, k)?;
        Self::new(mesh.xyz(), &grid.xyz(), nb.mesh_from_grid, k)
    }

    /// Mesh-pixel sources to lat-lon grid targets.
    pub fn mesh_to_grid(mesh: &HealpixMesh, grid: &LatLonGrid, k: usize) -> Result<Self> {
        let nb = knn_on_grid(mesh, grid, k)?;
        Self::new(&grid.xyz(), mesh.xyz(), nb.grid_from_mesh, k)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_targets(&self) -> usize {
        self.neighbors.len() / self.k
    }

    pub fn num_sources(&self) -> usize {
        self.n_source
    }

    pub fn neighbors(&self) -> &[usize] {
        &self.neighbors
    }

    pub fn relative_positions(&self) -> &[[f64; 3]] {
        &self.rel
    }

    /// Adds `{prefix}.{q,k,v,o}.w`; the query projection reads the 3-vector geometry.
    pub fn init_params<T: Real, R: Rng + ?Sized>(params: &mut ParamSet<T>, prefix: &str, d: usize, rng: &mut R) {
        params.init_linear(&format!("{prefix}.q"), 3, d, None, rng);
        for name in ["k", "v", "o"] {
            params.init_linear(&format!("{prefix}.{name}"), d, d, None, rng);
        }
    }

    /// Interpolates `x [n_source, d]` to `[n_target, d]`.
    pub fn apply<T: Real>(&self, g: &mut Graph<T>, params: &ParamSet<T>, prefix: &str, x: Var) -> Result<Var> {
        Ok(self.apply_with_weights(g, params, prefix, x)?.0)
    }

    /// Also returns the attention weights `[n_target, k]`.
    pub fn apply_with_weights<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        prefix: &str,
        x: Var,
    ) -> Result<(Var, Var)> {
        let (ns, d) = g.value(x).dims2()?;
        if ns != self.n_source {
            return Err(Error::dim("interp source", &[ns, d], &[self.n_source, d]));
        }
        let (nt, k) = (self.num_targets(), self.k);
        let xn = g.rmsnorm(x, RMS_EPS);
        let keys = params.linear(g, &format!("{prefix}.k"), xn)?;
        let values = params.linear(g, &format!("{prefix}.v"), xn)?;
        let keys = g.index_select(keys, 0, &self.neighbors)?;
        let values = g.index_select(values, 0, &self.neighbors)?;
        let rel = Tensor::from_fn(&[nt * k, 3], |i| T::lit(self.rel[i / 3][i % 3]));
        let rel = g.constant(rel);
        let queries = params.linear(g, &format!("{prefix}.q"), rel)?;
        let qk = g.mul(queries, keys)?;
        let logits = g.sum_axis(qk, 1)?;
        let logits = g.reshape(logits, &[nt, k])?;
        let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
        let weights = g.softmax(logits, 1)?;
        let values = g.reshape(values, &[nt, k * d])?;
        let weighted = g.mul_bcast(values, weights)?;
        let weighted = g.reshape(weighted, &[nt, k, d])?;
        let mixed = g.sum_axis(weighted, 1)?;
        Ok((params.linear(g, &format!("{prefix}.o"), mixed)?, weights))
    }
}
