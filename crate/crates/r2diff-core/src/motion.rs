//! Motion representation, weighted motion-space distances, and exact
//! nearest-neighbor search.
//!
//! A motion is a sequence of `T` hand states, flattened to a `d_m = 10·T`
//! vector in the fixed per-timestep order `[u, v, z, r1..r6, g]`. The
//! weighted distance scales position dims by 1, rotation dims by `w_r`, and
//! grasp dims by `w_g`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scene::SceneField;

/// Entries per hand state in the flat vector: 3 position + 6 rotation + 1 grasp.
pub const STATE_DIM: usize = 10;

/// One robot-hand state: image coords + depth, 6D rotation, grasp scalar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandState {
    /// (u, v, z): image-x, image-y in grid units, depth.
    pub position: [f64; 3],
    /// Continuous 6D rotation representation (two 3-vectors, Gram-Schmidt).
    pub rotation: [f64; 6],
    /// Grasp scalar, 1 = open, 0 = closed. In [0, 1] for ground truth.
    pub grasp: f64,
}

impl HandState {
    pub fn from_slice(s: &[f64]) -> Self {
        assert_eq!(s.len(), STATE_DIM);
        HandState {
            position: [s[0], s[1], s[2]],
            rotation: [s[3], s[4], s[5], s[6], s[7], s[8]],
            grasp: s[9],
        }
    }

    pub fn write_to(&self, out: &mut [f64]) {
        assert_eq!(out.len(), STATE_DIM);
        out[..3].copy_from_slice(&self.position);
        out[3..9].copy_from_slice(&self.rotation);
        out[9] = self.grasp;
    }
}

/// Which weight applies to flat dimension `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DimKind {
    Position,
    Rotation,
    Grasp,
}

/// Classifies flat dimension `d` (0-based) by its per-timestep offset.
pub fn dim_kind(d: usize) -> DimKind {
    match d % STATE_DIM {
        0..=2 => DimKind::Position,
        3..=8 => DimKind::Rotation,
        _ => DimKind::Grasp,
    }
}

/// A trajectory of `T` hand states stored as a flat `d_m`-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Motion {
    t_len: usize,
    data: Vec<f64>,
}

impl Motion {
    pub fn from_flat(t_len: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != t_len * STATE_DIM {
            return Err(Error::InvalidInput(format!(
                "flat motion length {} does not match T = {} (expected {})",
                data.len(),
                t_len,
                t_len * STATE_DIM
            )));
        }
        Ok(Motion { t_len, data })
    }

    pub fn from_states(states: &[HandState]) -> Self {
        let mut data = Vec::with_capacity(states.len() * STATE_DIM);
        for s in states {
            let mut buf = [0.0; STATE_DIM];
            s.write_to(&mut buf);
            data.extend_from_slice(&buf);
        }
        Motion {
            t_len: states.len(),
            data,
        }
    }

    pub fn zeros(t_len: usize) -> Self {
        Motion {
            t_len,
            data: alloc::vec![0.0; t_len * STATE_DIM],
        }
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    /// d_m = 10·T.
    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn state(&self, t: usize) -> HandState {
        HandState::from_slice(&self.data[t * STATE_DIM..(t + 1) * STATE_DIM])
    }

    pub fn states(&self) -> impl Iterator<Item = HandState> + '_ {
        (0..self.t_len).map(move |t| self.state(t))
    }

    /// Image coordinates (u, v) at motion timestep `t`.
    pub fn uv(&self, t: usize) -> (f64, f64) {
        (
            self.data[t * STATE_DIM],
            self.data[t * STATE_DIM + 1],
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Weights of the per-dimension squared distance; position weight is fixed at 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceWeights {
    pub w_r: f64,
    pub w_g: f64,
}

impl DistanceWeights {
    pub fn new(w_r: f64, w_g: f64) -> Result<Self> {
        if !(w_r >= 0.0 && w_g >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "distance weights must be nonnegative (w_r = {w_r}, w_g = {w_g})"
            )));
        }
        Ok(DistanceWeights { w_r, w_g })
    }

    pub fn weight_for(&self, d: usize) -> f64 {
        match dim_kind(d) {
            DimKind::Position => 1.0,
            DimKind::Rotation => self.w_r,
            DimKind::Grasp => self.w_g,
        }
    }
}

impl Default for DistanceWeights {
    /// w_r = 0.01, w_g = 0.
    fn default() -> Self {
        DistanceWeights {
            w_r: 0.01,
            w_g: 0.0,
        }
    }
}

/// Generation metadata carried with a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetMeta {
    pub seed: u64,
    pub family_id: u32,
    pub t_len: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Training set: J (motion, scene field) pairs plus generation metadata.
#[derive(Debug, Clone)]
pub struct MotionDataset {
    pub entries: Vec<(Motion, SceneField)>,
    pub meta: DatasetMeta,
}

impl MotionDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn motion(&self, i: usize) -> &Motion {
        &self.entries[i].0
    }

    pub fn field(&self, i: usize) -> &SceneField {
        &self.entries[i].1
    }

    pub fn motion_dim(&self) -> usize {
        self.meta.t_len * STATE_DIM
    }
}

fn check_same_dim(a: &Motion, b: &Motion) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidInput(format!(
            "motion dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Weighted squared difference at flat dimension `d` (0-based): D_0(a, b, d).
pub fn per_dim_sq_distance(a: &Motion, b: &Motion, d: usize, w: &DistanceWeights) -> Result<f64> {
    check_same_dim(a, b)?;
    if d >= a.dim() {
        return Err(Error::InvalidInput(format!(
            "dimension index {} out of range (d_m = {})",
            d,
            a.dim()
        )));
    }
    let diff = a.flat()[d] - b.flat()[d];
    Ok(w.weight_for(d) * diff * diff)
}

/// Weighted squared distance summed over all dimensions (no sqrt).
pub fn motion_sq_distance(a: &Motion, b: &Motion, w: &DistanceWeights) -> Result<f64> {
    check_same_dim(a, b)?;
    let wa = [1.0, 1.0, 1.0, w.w_r, w.w_r, w.w_r, w.w_r, w.w_r, w.w_r, w.w_g];
    let mut sum = 0.0;
    for (ca, cb) in a
        .flat()
        .chunks_exact(STATE_DIM)
        .zip(b.flat().chunks_exact(STATE_DIM))
    {
        for k in 0..STATE_DIM {
            let diff = ca[k] - cb[k];
            sum += wa[k] * diff * diff;
        }
    }
    Ok(sum)
}

/// Weighted Euclidean motion distance.
pub fn motion_distance(a: &Motion, b: &Motion, w: &DistanceWeights) -> Result<f64> {
    Ok(libm::sqrt(motion_sq_distance(a, b, w)?))
}

/// Index of the k-th nearest motion to entry `i` among all j != i
/// (rank `k` is 1-based). Ties break toward the lowest index.
pub fn kth_nearest_index(
    ds: &MotionDataset,
    i: usize,
    k: usize,
    w: &DistanceWeights,
) -> Result<usize> {
    let j = ds.len();
    if i >= j {
        return Err(Error::InvalidInput(format!(
            "entry index {i} out of range (J = {j})"
        )));
    }
    if k == 0 || k > j.saturating_sub(1) {
        return Err(Error::InvalidInput(format!(
            "rank {k} out of range (must be in [1, J-1] = [1, {}])",
            j.saturating_sub(1)
        )));
    }
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(j - 1);
    for jj in 0..j {
        if jj == i {
            continue;
        }
        let d = motion_sq_distance(ds.motion(i), ds.motion(jj), w)?;
        cand.push((d, jj));
    }
    cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(cand[k - 1].1)
}

/// Gram-Schmidt orthonormalization of the 6D rotation representation.
/// Returns the 3x3 rotation with columns [b1 b2 b3].
pub fn rot6d_to_matrix(r: &[f64; 6]) -> Result<[[f64; 3]; 3]> {
    const EPS: f64 = 1e-12;
    let a1 = [r[0], r[1], r[2]];
    let a2 = [r[3], r[4], r[5]];
    let n1 = libm::sqrt(a1[0] * a1[0] + a1[1] * a1[1] + a1[2] * a1[2]);
    if n1 < EPS {
        return Err(Error::DegenerateRotation);
    }
    let b1 = [a1[0] / n1, a1[1] / n1, a1[2] / n1];
    let dot = b1[0] * a2[0] + b1[1] * a2[1] + b1[2] * a2[2];
    let p = [a2[0] - dot * b1[0], a2[1] - dot * b1[1], a2[2] - dot * b1[2]];
    let n2 = libm::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
    if n2 < EPS {
        return Err(Error::DegenerateRotation);
    }
    let b2 = [p[0] / n2, p[1] / n2, p[2] / n2];
    let b3 = [
        b1[1] * b2[2] - b1[2] * b2[1],
        b1[2] * b2[0] - b1[0] * b2[2],
        b1[0] * b2[1] - b1[1] * b2[0],
    ];
    // columns [b1 b2 b3]
    Ok([
        [b1[0], b2[0], b3[0]],
        [b1[1], b2[1], b3[1]],
        [b1[2], b2[2], b3[2]],
    ])
}
