//! Small reverse-mode op set backing the denoiser: affine, layer norm,
//! GELU, multi-head self-attention, and the squared-error loss. Each op is
//! a forward/backward pair over [`Mat`]; backward passes are checked
//! against finite differences in the tests.

use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::Mat;

// ---- fast elementwise math --------------------------------------------

const LOG2_E: f64 = core::f64::consts::LOG2_E;
// ln(2) split into a high part exact in ~30 bits plus the remainder, so
// x - k*ln2 stays accurate for large |k| (Cody-Waite range reduction).
const LN2_HI: f64 = 0.693_147_180_369_123_8;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;

/// exp(x) via range reduction to |r| <= ln(2)/2 and a degree-11 Taylor
/// polynomial; relative error < 1e-12 over the finite range. Much cheaper
/// than libm::exp, which dominates softmax/GELU cost at our sizes.
#[inline]
pub fn fast_exp(x: f64) -> f64 {
    if x < -708.0 {
        return 0.0;
    }
    if x > 709.0 {
        return f64::INFINITY;
    }
    // round-to-nearest via the 2^52 shifter trick; |x * log2(e)| < 1023
    // here, so adding and subtracting 1.5 * 2^52 rounds exactly (any
    // nearest integer is a valid reduction, ties included)
    const SHIFTER: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    let k = (x * LOG2_E + SHIFTER) - SHIFTER;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0
                        + r * (1.0 / 120.0
                            + r * (1.0 / 720.0
                                + r * (1.0 / 5040.0
                                    + r * (1.0 / 40320.0
                                        + r * (1.0 / 362_880.0
                                            + r * (1.0 / 3_628_800.0
                                                + r * (1.0 / 39_916_800.0)))))))))));
    // scale by 2^k through the exponent bits; k in [-1021, 1024) here
    let bits = ((k as i64 + 1023) as u64) << 52;
    p * f64::from_bits(bits)
}

/// tanh(x) through [`fast_exp`]: tanh(x) = 1 - 2 / (exp(2x) + 1).
#[inline]
pub fn fast_tanh(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 - 2.0 / (fast_exp(2.0 * x) + 1.0)
    } else {
        2.0 / (fast_exp(-2.0 * x) + 1.0) - 1.0
    }
}

// ---- affine ----------------------------------------------------------

/// Y = X W + b, b broadcast over rows.
pub fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    let mut y = x.matmul(w);
    for r in 0..y.rows {
        for (v, bias) in y.row_mut(r).iter_mut().zip(b.iter()) {
            *v += bias;
        }
    }
    y
}

/// Returns (dX, dW, db) given dY and the forward input X.
pub fn affine_backward(dy: &Mat, x: &Mat, w: &Mat) -> (Mat, Mat, Vec<f64>) {
    let dx = dy.matmul_nt(w);
    let dw = x.matmul_tn(dy);
    let mut db = vec![0.0; dy.cols];
    for r in 0..dy.rows {
        for (acc, v) in db.iter_mut().zip(dy.row(r).iter()) {
            *acc += v;
        }
    }
    (dx, dw, db)
}

// ---- layer norm ------------------------------------------------------

pub const LN_EPS: f64 = 1e-5;

pub struct LayerNormCache {
    /// Normalized activations (x - mean) / std, before gain/bias.
    pub xhat: Mat,
    pub inv_std: Vec<f64>,
}

/// Row-wise layer norm with gain/bias.
pub fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64]) -> (Mat, LayerNormCache) {
    let d = x.cols as f64;
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut inv_std = vec![0.0; x.rows];
    let mut y = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean: f64 = row.iter().sum::<f64>() / d;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let istd = 1.0 / libm::sqrt(var + LN_EPS);
        inv_std[r] = istd;
        for c in 0..x.cols {
            let h = (row[c] - mean) * istd;
            *xhat.at_mut(r, c) = h;
            *y.at_mut(r, c) = gamma[c] * h + beta[c];
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns (dX, dgamma, dbeta).
pub fn layer_norm_backward(
    dy: &Mat,
    gamma: &[f64],
    cache: &LayerNormCache,
) -> (Mat, Vec<f64>, Vec<f64>) {
    let d = dy.cols as f64;
    let mut dx = Mat::zeros(dy.rows, dy.cols);
    let mut dgamma = vec![0.0; dy.cols];
    let mut dbeta = vec![0.0; dy.cols];
    for r in 0..dy.rows {
        let xhat = cache.xhat.row(r);
        let dyr = dy.row(r);
        let mut sum_dh = 0.0;
        let mut sum_dh_xhat = 0.0;
        for c in 0..dy.cols {
            dgamma[c] += dyr[c] * xhat[c];
            dbeta[c] += dyr[c];
            let dh = dyr[c] * gamma[c];
            sum_dh += dh;
            sum_dh_xhat += dh * xhat[c];
        }
        let istd = cache.inv_std[r];
        for c in 0..dy.cols {
            let dh = dyr[c] * gamma[c];
            *dx.at_mut(r, c) = istd * (dh - sum_dh / d - xhat[c] * sum_dh_xhat / d);
        }
    }
    (dx, dgamma, dbeta)
}

// ---- GELU ------------------------------------------------------------

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[inline]
fn gelu_scalar(x: f64) -> (f64, f64) {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = fast_tanh(inner);
    let y = 0.5 * x * (1.0 + t);
    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

/// tanh-approximation GELU, elementwise.
pub fn gelu(x: &Mat) -> Mat {
    let mut y = x.clone();
    for v in &mut y.data {
        *v = gelu_scalar(*v).0;
    }
    y
}

pub fn gelu_backward(dy: &Mat, x: &Mat) -> Mat {
    let mut dx = dy.clone();
    for (g, v) in dx.data.iter_mut().zip(x.data.iter()) {
        *g *= gelu_scalar(*v).1;
    }
    dx
}

// ---- multi-head self-attention ----------------------------------------

pub struct AttentionCache {
    /// Softmax probabilities, one S x S matrix per head.
    pub probs: Vec<Mat>,
}

fn slice_cols(x: &Mat, start: usize, width: usize) -> Mat {
    let mut data = Vec::with_capacity(x.rows * width);
    for r in 0..x.rows {
        data.extend_from_slice(&x.row(r)[start..start + width]);
    }
    Mat::from_vec(x.rows, width, data)
}

fn add_cols(dst: &mut Mat, start: usize, src: &Mat) {
    for r in 0..dst.rows {
        for c in 0..src.cols {
            *dst.at_mut(r, start + c) += src.at(r, c);
        }
    }
}

/// Scaled dot-product attention over `heads` column groups of Q, K, V.
pub fn multi_head_attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> (Mat, AttentionCache) {
    let dh = q.cols / heads;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut out = Mat::zeros(q.rows, q.cols);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = slice_cols(q, h * dh, dh);
        let kh = slice_cols(k, h * dh, dh);
        let vh = slice_cols(v, h * dh, dh);
        let mut scores = qh.matmul_nt(&kh);
        scores.scale(scale);
        // row softmax
        for r in 0..scores.rows {
            let row = scores.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in row.iter_mut() {
                *s = fast_exp(*s - max);
                sum += *s;
            }
            for s in row.iter_mut() {
                *s /= sum;
            }
        }
        let oh = scores.matmul(&vh);
        add_cols(&mut out, h * dh, &oh);
        probs.push(scores);
    }
    (out, AttentionCache { probs })
}

/// Returns (dQ, dK, dV).
pub fn attention_backward(
    dout: &Mat,
    q: &Mat,
    k: &Mat,
    v: &Mat,
    heads: usize,
    cache: &AttentionCache,
) -> (Mat, Mat, Mat) {
    let dh = q.cols / heads;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut dq = Mat::zeros(q.rows, q.cols);
    let mut dk = Mat::zeros(k.rows, k.cols);
    let mut dv = Mat::zeros(v.rows, v.cols);
    for h in 0..heads {
        let qh = slice_cols(q, h * dh, dh);
        let kh = slice_cols(k, h * dh, dh);
        let vh = slice_cols(v, h * dh, dh);
        let doh = slice_cols(dout, h * dh, dh);
        let p = &cache.probs[h];

        let dvh = p.matmul_tn(&doh);
        let dp = doh.matmul_nt(&vh);
        // softmax backward: ds_ij = p_ij * (dp_ij - sum_k dp_ik p_ik)
        let mut ds = Mat::zeros(p.rows, p.cols);
        for r in 0..p.rows {
            let dot: f64 = dp
                .row(r)
                .iter()
                .zip(p.row(r).iter())
                .map(|(a, b)| a * b)
                .sum();
            for c in 0..p.cols {
                *ds.at_mut(r, c) = p.at(r, c) * (dp.at(r, c) - dot);
            }
        }
        ds.scale(scale);
        let dqh = ds.matmul(&kh);
        let dkh = ds.matmul_tn(&qh);
        add_cols(&mut dq, h * dh, &dqh);
        add_cols(&mut dk, h * dh, &dkh);
        add_cols(&mut dv, h * dh, &dvh);
    }
    (dq, dk, dv)
}

// ---- loss --------------------------------------------------------------

/// Sum of squared differences and its gradient w.r.t. `pred`.
pub fn sum_sq_diff(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for i in 0..pred.len() {
        let d = pred[i] - target[i];
        loss += d * d;
        grad[i] = 2.0 * d;
    }
    (loss, grad)
}
