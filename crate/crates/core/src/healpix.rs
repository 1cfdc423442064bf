//! NESTED HEALPix tessellation.
//!
//! Pixel `p` at resolution `nside` lives on base face `p / nside²`; the remainder
//! interleaves the in-face coordinates `(ix, iy)` bitwise (Morton order), so the four
//! children of `p` are `4p..4p+4` and every aligned power-of-four index range is one
//! quad-tree subtree.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::ops::Range;

use crate::error::{Error, Result};
use crate::grid::{angular_distance, lonlat_to_xyz, LatLonGrid};

const JRLL: [i64; 12] = [2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4];
const JPLL: [i64; 12] = [1, 3, 5, 7, 0, 2, 4, 6, 1, 3, 5, 7];
pub const MAX_NSIDE: usize = 1 << 10;

pub fn npix(nside: usize) -> usize {
    12 * nside * nside
}

pub fn check_nside(nside: usize) -> Result<()> {
    if nside == 0 || !nside.is_power_of_two() || nside > MAX_NSIDE {
        return Err(Error::config(format!(
            "nside must be a power of two in 1..={MAX_NSIDE}, got {nside}"
        )));
    }
    Ok(())
}

fn check_pixel(p: usize, nside: usize) -> Result<()> {
    check_nside(nside)?;
    if p >= npix(nside) {
        return Err(Error::OutOfRange {
            index: p,
            limit: npix(nside),
        });
    }
    Ok(())
}

/// Even bits of `v` packed into the low half.
fn compress_bits(v: u64) -> u64 {
    let mut x = v & 0x5555_5555_5555_5555;
    x = (x | (x >> 1)) & 0x3333_3333_3333_3333;
    x = (x | (x >> 2)) & 0x0f0f_0f0f_0f0f_0f0f;
    x = (x | (x >> 4)) & 0x00ff_00ff_00ff_00ff;
    x = (x | (x >> 8)) & 0x0000_ffff_0000_ffff;
    (x | (x >> 16)) & 0x0000_0000_ffff_ffff
}

fn spread_bits(v: u64) -> u64 {
    let mut x = v & 0x0000_0000_ffff_ffff;
    x = (x | (x << 16)) & 0x0000_ffff_0000_ffff;
    x = (x | (x << 8)) & 0x00ff_00ff_00ff_00ff;
    x = (x | (x << 4)) & 0x0f0f_0f0f_0f0f_0f0f;
    x = (x | (x << 2)) & 0x3333_3333_3333_3333;
    (x | (x << 1)) & 0x5555_5555_5555_5555
}

/// `(latitude, longitude)` in radians of the center of NESTED pixel `p`.
pub fn pix2ang(nside: usize, p: usize) -> Result<(f64, f64)> {
    check_pixel(p, nside)?;
    let ns = nside as i64;
    let npface = (nside * nside) as u64;
    let face = (p as u64 / npface) as usize;
    let local = p as u64 % npface;
    let ix = compress_bits(local) as i64;
    let iy = compress_bits(local >> 1) as i64;

    let jr = JRLL[face] * ns - ix - iy - 1;
    let fact2 = 4.0 / npix(nside) as f64;
    let (nr, kshift, lat) = if jr < ns || jr > 3 * ns {
        let nr = if jr < ns { jr } else { 4 * ns - jr };
        let tmp = (nr * nr) as f64 * fact2;
        // sin θ from 1 - cos θ keeps full precision near the poles
        let sth = (tmp * (2.0 - tmp)).sqrt();
        let z = 1.0 - tmp;
        let lat = z.atan2(sth);
        (nr, 0, if jr < ns { lat } else { -lat })
    } else {
        let z = (2 * ns - jr) as f64 * 2.0 * ns as f64 * fact2;
        (ns, (jr - ns) & 1, z.asin())
    };
    let mut jp = (JPLL[face] * nr + ix - iy + 1 + kshift) / 2;
    if jp > 4 * ns {
        jp -= 4 * ns;
    }
    if jp < 1 {
        jp += 4 * ns;
    }
    let lon = (jp as f64 - (kshift + 1) as f64 * 0.5) * (FRAC_PI_2 / nr as f64);
    Ok((lat, lon))
}

/// NESTED pixel containing the direction. Latitude is clamped, longitude wrapped.
pub fn ang2pix(nside: usize, lat: f64, lon: f64) -> Result<usize> {
    check_nside(nside)?;
    let ns = nside as i64;
    let lat = lat.clamp(-FRAC_PI_2, FRAC_PI_2);
    let z = lat.sin();
    let za = z.abs();
    let tt = (lon.rem_euclid(2.0 * PI) / FRAC_PI_2).rem_euclid(4.0);

    let (face, ix, iy) = if za <= 2.0 / 3.0 {
        let t1 = ns as f64 * (0.5 + tt);
        let t2 = ns as f64 * z * 0.75;
        let jp = (t1 - t2) as i64;
        let jm = (t1 + t2) as i64;
        let ifp = jp / ns;
        let ifm = jm / ns;
        let face = match ifp.cmp(&ifm) {
            Ordering::Equal => ifp | 4,
            Ordering::Less => ifp,
            Ordering::Greater => ifm + 8,
        };
        (face, jm & (ns - 1), ns - (jp & (ns - 1)) - 1)
    } else {
        let ntt = (tt as i64).min(3);
        let tp = tt - ntt as f64;
        // sqrt(3 (1 - |z|)) written via cos(lat) to avoid cancellation near the poles
        let tmp = ns as f64 * lat.cos() / ((1.0 + za) / 3.0).sqrt();
        let jp = ((tp * tmp) as i64).min(ns - 1);
        let jm = (((1.0 - tp) * tmp) as i64).min(ns - 1);
        if z >= 0.0 {
            (ntt, ns - jm - 1, ns - jp - 1)
        } else {
            (ntt + 8, jp, jm)
        }
    };
    let npface = (nside * nside) as u64;
    Ok((face as u64 * npface + spread_bits(ix as u64) + (spread_bits(iy as u64) << 1)) as usize)
}

pub fn children(p: usize, nside: usize) -> Result<[usize; 4]> {
    check_pixel(p, nside)?;
    if nside * 2 > MAX_NSIDE {
        return Err(Error::config(format!("children of nside {nside} exceed nside {MAX_NSIDE}")));
    }
    Ok([4 * p, 4 * p + 1, 4 * p + 2, 4 * p + 3])
}

/// Parent at `nside / 2` of pixel `p` at `nside`.
pub fn parent(p: usize, nside: usize) -> Result<usize> {
    check_pixel(p, nside)?;
    if nside < 2 {
        return Err(Error::config("nside 1 pixels have no parent"));
    }
    Ok(p / 4)
}

/// Immutable tessellation with cached pixel centers.
#[derive(Clone, Debug)]
pub struct HealpixMesh {
    nside: usize,
    lat: Vec<f64>,
    lon: Vec<f64>,
    xyz: Vec<[f64; 3]>,
}

impl HealpixMesh {
    pub fn new(nside: usize) -> Result<Self> {
        check_nside(nside)?;
        let n = npix(nside);
        let mut lat = Vec::with_capacity(n);
        let mut lon = Vec::with_capacity(n);
        let mut xyz = Vec::with_capacity(n);
        for p in 0..n {
            let (la, lo) = pix2ang(nside, p)?;
            lat.push(la);
            lon.push(lo);
            xyz.push(lonlat_to_xyz(lo, la));
        }
        Ok(HealpixMesh { nside, lat, lon, xyz })
    }

    pub fn nside(&self) -> usize {
        self.nside
    }

    pub fn npix(&self) -> usize {
        self.lat.len()
    }

    pub fn lat(&self) -> &[f64] {
        &self.lat
    }

    pub fn lon(&self) -> &[f64] {
        &self.lon
    }

    pub fn xyz(&self) -> &[[f64; 3]] {
        &self.xyz
    }

    pub fn lonlat(&self) -> Vec<(f64, f64)> {
        self.lon.iter().copied().zip(self.lat.iter().copied()).collect()
    }

    /// Square root of the pixel area, in degrees.
    pub fn resolution_deg(&self) -> f64 {
        (4.0 * PI / self.npix() as f64).sqrt().to_degrees()
    }

    pub fn blocks(&self, block_size: usize) -> Result<BlockPartition> {
        BlockPartition::new(self.npix(), block_size)
    }
}

/// Contiguous NESTED index ranges of equal size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockPartition {
    pub npix: usize,
    pub block_size: usize,
}

impl BlockPartition {
    pub fn new(npix: usize, block_size: usize) -> Result<Self> {
        if block_size == 0 || npix % block_size != 0 {
            return Err(Error::config(format!(
                "block size {block_size} does not divide {npix} pixels"
            )));
        }
        Ok(BlockPartition { npix, block_size })
    }

    pub fn count(&self) -> usize {
        self.npix / self.block_size
    }

    pub fn range(&self, i: usize) -> Range<usize> {
        i * self.block_size..(i + 1) * self.block_size
    }

    pub fn ranges(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        (0..self.count()).map(|i| self.range(i))
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    dist: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

enum KdNode {
    Leaf(Range<usize>),
    Split {
        axis: usize,
        value: f64,
        left: Box<KdNode>,
        right: Box<KdNode>,
    },
}

/// k-d tree over unit vectors. Ordering is by chord length, which is monotone in
/// great-circle distance, with ties resolved toward the smaller point index.
pub struct KnnIndex {
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
    root: KdNode,
}

const LEAF_SIZE: usize = 16;

/// Squared-chord distances closer than this are ties.
pub const TIE_EPS: f64 = 1e-12;

/// Sorts by distance, orders runs of near-equal distances by index, keeps `k`.
fn rank_with_ties(mut c: Vec<Candidate>, k: usize) -> Vec<usize> {
    c.sort();
    let mut out = Vec::with_capacity(c.len());
    let mut start = 0;
    while start < c.len() {
        let mut end = start + 1;
        while end < c.len() && c[end].dist - c[end - 1].dist < TIE_EPS {
            end += 1;
        }
        let mut run: Vec<usize> = c[start..end].iter().map(|x| x.index).collect();
        run.sort_unstable();
        out.extend(run);
        start = end;
    }
    out.truncate(k);
    out
}

/// Brute-force reference for [`KnnIndex::query`].
pub fn knn_brute_force(points: &[[f64; 3]], q: &[f64; 3], k: usize) -> Vec<usize> {
    let all = points
        .iter()
        .enumerate()
        .map(|(index, p)| Candidate {
            dist: chord2(q, p),
            index,
        })
        .collect();
    rank_with_ties(all, k)
}

fn chord2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

impl KnnIndex {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let root = Self::build(&points, &mut order, 0);
        KnnIndex { points, order, root }
    }

    fn build(points: &[[f64; 3]], order: &mut [usize], offset: usize) -> KdNode {
        if order.len() <= LEAF_SIZE {
            return KdNode::Leaf(offset..offset + order.len());
        }
        let axis = (0..3)
            .max_by(|&a, &b| {
                let spread = |ax: usize| {
                    let (lo, hi) = order.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                        (lo.min(points[i][ax]), hi.max(points[i][ax]))
                    });
                    hi - lo
                };
                spread(a).total_cmp(&spread(b))
            })
            .unwrap_or(0);
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let value = points[order[mid]][axis];
        let (lo, hi) = order.split_at_mut(mid);
        KdNode::Split {
            axis,
            value,
            left: Box::new(Self::build(points, lo, offset)),
            right: Box::new(Self::build(points, hi, offset + mid)),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The `k` nearest points to `q`, nearest first. Distances within [`TIE_EPS`]
    /// (squared chord) count as equal and are ordered by index.
    pub fn query(&self, q: &[f64; 3], k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.len() {
            return Err(Error::config(format!("k = {k} neighbors requested from {} points", self.len())));
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.visit(&self.root, q, k, &mut heap);
        let kth = heap.peek().expect("k >= 1").dist;
        let mut near = Vec::new();
        self.within(&self.root, q, kth + 2.0 * TIE_EPS, &mut near);
        Ok(rank_with_ties(near, k))
    }

    fn within(&self, node: &KdNode, q: &[f64; 3], radius2: f64, out: &mut Vec<Candidate>) {
        match node {
            KdNode::Leaf(r) => out.extend(self.order[r.clone()].iter().filter_map(|&i| {
                let dist = chord2(q, &self.points[i]);
                (dist <= radius2).then_some(Candidate { dist, index: i })
            })),
            KdNode::Split {
                axis,
                value,
                left,
                right,
            } => {
                let delta = q[*axis] - value;
                if delta < 0.0 || delta * delta <= radius2 {
                    self.within(left, q, radius2, out);
                }
                if delta >= 0.0 || delta * delta <= radius2 {
                    self.within(right, q, radius2, out);
                }
            }
        }
    }

    fn visit(&self, node: &KdNode, q: &[f64; 3], k: usize, heap: &mut BinaryHeap<Candidate>) {
        match node {
            KdNode::Leaf(r) => {
                for &i in &self.order[r.clone()] {
                    let c = Candidate {
                        dist: chord2(q, &self.points[i]),
                        index: i,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            KdNode::Split {
                axis,
                value,
                left,
                right,
            } => {
                let delta = q[*axis] - value;
                let (near, far) = if delta < 0.0 { (left, right) } else { (right, left) };
                self.visit(near, q, k, heap);
                // `<=` keeps equal-distance candidates with smaller indices reachable
                if heap.len() < k || delta * delta <= heap.peek().expect("heap is full").dist {
                    self.visit(far, q, k, heap);
                }
            }
        }
    }
}

/// Neighbor lists between a mesh and a grid, in both directions.
#[derive(Clone, Debug)]
pub struct GridNeighbors {
    pub k: usize,
    /// `[npix * k]`: grid points nearest each mesh pixel.
    pub mesh_from_grid: Vec<usize>,
    /// `[h * w * k]`: mesh pixels nearest each grid point.
    pub grid_from_mesh: Vec<usize>,
}

pub fn knn_on_grid(mesh: &HealpixMesh, grid: &LatLonGrid, k: usize) -> Result<GridNeighbors> {
    let grid_xyz = grid.xyz();
    if k == 0 || k > grid_xyz.len() || k > mesh.npix() {
        return Err(Error::config(format!(
            "k = {k} must be in 1..={}",
            grid_xyz.len().min(mesh.npix())
        )));
    }
    let grid_index = KnnIndex::new(grid_xyz.clone());
    let mesh_index = KnnIndex::new(mesh.xyz().to_vec());
    let mut mesh_from_grid = Vec::with_capacity(mesh.npix() * k);
    for p in mesh.xyz() {
        mesh_from_grid.extend(grid_index.query(p, k)?);
    }
    let mut grid_from_mesh = Vec::with_capacity(grid_xyz.len() * k);
    for g in &grid_xyz {
        grid_from_mesh.extend(mesh_index.query(g, k)?);
    }
    Ok(GridNeighbors {
        k,
        mesh_from_grid,
        grid_from_mesh,
    })
}

/// Largest pairwise great-circle distance inside a set of pixels.
pub fn angular_diameter(mesh: &HealpixMesh, pixels: Range<usize>) -> f64 {
    let xyz = &mesh.xyz()[pixels];
    let mut best: f64 = 0.0;
    for (i, a) in xyz.iter().enumerate() {
        for b in &xyz[i + 1..] {
            best = best.max(angular_distance(a, b));
        }
    }
    best
}
