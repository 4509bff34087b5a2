//! Scene feature grids and trajectory-aligned (STE) feature extraction,
//! plus the three retrieval strategies: STE similarity, whole-field MSE,
//! and the evaluation-only motion-space "cheat" retrieval.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::motion::{motion_distance, DistanceWeights, Motion, MotionDataset};

/// Additive guard in the STE similarity 1/(dist + EPS_SIM), which is
/// otherwise singular at zero feature distance.
pub const EPS_SIM: f64 = 1e-12;

/// H x W x C feature grid, row-major, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneField {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl SceneField {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(Error::InvalidConfig(format!(
                "scene field needs H, W >= 2 (got {height} x {width})"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidInput(format!(
                "scene data length {} does not match {height} x {width} x {channels}",
                data.len()
            )));
        }
        Ok(SceneField {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Self {
        SceneField {
            height,
            width,
            channels,
            data: alloc::vec![value; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn at_mut(&mut self, row: usize, col: usize, ch: usize) -> &mut f64 {
        &mut self.data[(row * self.width + col) * self.channels + ch]
    }

    pub fn same_shape(&self, other: &SceneField) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.channels == other.channels
    }

    /// Bilinear interpolation of all channels at (u, v), clamping the
    /// coordinates to [0, W-1] x [0, H-1]. `u` indexes columns, `v` rows.
    pub fn sample_bilinear(&self, u: f64, v: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.channels);
        let u = clamp(u, 0.0, (self.width - 1) as f64);
        let v = clamp(v, 0.0, (self.height - 1) as f64);
        let c0 = libm::floor(u) as usize;
        let r0 = libm::floor(v) as usize;
        let c1 = (c0 + 1).min(self.width - 1);
        let r1 = (r0 + 1).min(self.height - 1);
        let fu = u - c0 as f64;
        let fv = v - r0 as f64;
        let w00 = (1.0 - fu) * (1.0 - fv);
        let w01 = fu * (1.0 - fv);
        let w10 = (1.0 - fu) * fv;
        let w11 = fu * fv;
        for ch in 0..self.channels {
            out[ch] = w00 * self.at(r0, c0, ch)
                + w01 * self.at(r0, c1, ch)
                + w10 * self.at(r1, c0, ch)
                + w11 * self.at(r1, c1, ch);
        }
    }
}

fn clamp(x: f64, lo: f64, hi: f64) -> f64 {
    if x < lo {
        lo
    } else if x > hi {
        hi
    } else {
        x
    }
}

/// T rows of C channel values, row t sampled at the motion's (u_t, v_t).
#[derive(Debug, Clone, PartialEq)]
pub struct SteFeature {
    t_len: usize,
    channels: usize,
    data: Vec<f64>,
}

impl SteFeature {
    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.channels..(t + 1) * self.channels]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Euclidean norm of the elementwise difference.
    pub fn distance(&self, other: &SteFeature) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        let mut s = 0.0;
        for (a, b) in self.data.iter().zip(other.data.iter()) {
            let d = a - b;
            s += d * d;
        }
        libm::sqrt(s)
    }
}

/// Samples the field along the motion's image coordinates (bilinear,
/// clamped). Depth, rotation, and grasp do not affect sampling.
pub fn ste_extract(field: &SceneField, m: &Motion) -> SteFeature {
    let channels = field.channels();
    let mut data = alloc::vec![0.0; m.t_len() * channels];
    for t in 0..m.t_len() {
        let (u, v) = m.uv(t);
        field.sample_bilinear(u, v, &mut data[t * channels..(t + 1) * channels]);
    }
    SteFeature {
        t_len: m.t_len(),
        channels,
        data,
    }
}

/// Which retrieval strategy produced a result.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrievalMethod {
    Ste,
    Mse,
    Cheat,
}

impl RetrievalMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            RetrievalMethod::Ste => "ste",
            RetrievalMethod::Mse => "mse",
            RetrievalMethod::Cheat => "cheat",
        }
    }
}

/// Index of the retrieved training entry plus the score that selected it
/// (a similarity for STE, a distance for MSE and cheat).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalResult {
    pub index: usize,
    pub score: f64,
    pub method: RetrievalMethod,
}

/// STE image similarity of Eq-style 1/(||f - f~|| + eps): features are
/// extracted from both fields along the TRAINING motion's trajectory.
/// Not symmetric in the (query, train) roles.
pub fn ste_similarity(
    query: &SceneField,
    train_field: &SceneField,
    train_motion: &Motion,
) -> Result<f64> {
    if !query.same_shape(train_field) {
        return Err(shape_mismatch(query, train_field));
    }
    let f = ste_extract(train_field, train_motion);
    let f_tilde = ste_extract(query, train_motion);
    Ok(1.0 / (f.distance(&f_tilde) + EPS_SIM))
}

fn shape_mismatch(a: &SceneField, b: &SceneField) -> Error {
    Error::InvalidInput(format!(
        "scene field shape mismatch: {}x{}x{} vs {}x{}x{}",
        a.height(),
        a.width(),
        a.channels(),
        b.height(),
        b.width(),
        b.channels()
    ))
}

fn require_nonempty(ds: &MotionDataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::InvalidInput(String::from(
            "retrieval over an empty dataset",
        )))
    }
    Ok(())
}

/// Argmax of STE similarity over all training entries; ties break toward
/// the lowest index.
pub fn retrieve_ste(query: &SceneField, ds: &MotionDataset) -> Result<RetrievalResult> {
    require_nonempty(ds)?;
    let mut best = RetrievalResult {
        index: 0,
        score: f64::NEG_INFINITY,
        method: RetrievalMethod::Ste,
    };
    for i in 0..ds.len() {
        let s = ste_similarity(query, ds.field(i), ds.motion(i))?;
        if s > best.score {
            best.index = i;
            best.score = s;
        }
    }
    Ok(best)
}

/// Argmin of the mean squared difference between full grids.
pub fn retrieve_mse(query: &SceneField, ds: &MotionDataset) -> Result<RetrievalResult> {
    require_nonempty(ds)?;
    let mut best = RetrievalResult {
        index: 0,
        score: f64::INFINITY,
        method: RetrievalMethod::Mse,
    };
    for i in 0..ds.len() {
        let f = ds.field(i);
        if !query.same_shape(f) {
            return Err(shape_mismatch(query, f));
        }
        let mut s = 0.0;
        for (a, b) in query.data().iter().zip(f.data().iter()) {
            let d = a - b;
            s += d * d;
        }
        let mse = s / query.data().len() as f64;
        if mse < best.score {
            best.index = i;
            best.score = mse;
        }
    }
    Ok(best)
}

/// Evaluation-only baseline: argmin of the weighted motion distance to the
/// ground-truth motion. No self-exclusion (the query is held out).
pub fn retrieve_cheat(
    gt_motion: &Motion,
    ds: &MotionDataset,
    w: &DistanceWeights,
) -> Result<RetrievalResult> {
    require_nonempty(ds)?;
    let mut best = RetrievalResult {
        index: 0,
        score: f64::INFINITY,
        method: RetrievalMethod::Cheat,
    };
    for i in 0..ds.len() {
        let d = motion_distance(gt_motion, ds.motion(i), w)?;
        if d < best.score {
            best.index = i;
            best.score = d;
        }
    }
    Ok(best)
}
