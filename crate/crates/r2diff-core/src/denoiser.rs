//! The trainable noise predictor: per-timestep tokens (state + scene
//! feature + sinusoidal PE) plus one noise-step token, run through
//! self-attention blocks with a per-token residual noise head. Training
//! minimizes the simple DDPM loss with hand-chained reverse-mode gradients
//! from [`crate::nn`].

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::motion::{Motion, MotionDataset, STATE_DIM};
use crate::nn;
use crate::scene::{ste_extract, SceneField, SteFeature};
use crate::schedule::{forward_noise, NoiseSchedule};

/// Architecture hyperparameters; the parameter count is a pure function of
/// this config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchConfig {
    /// Channels of the conditioning scene feature rows.
    pub feat_dim: usize,
    /// Token width h.
    pub hidden: usize,
    /// Number of self-attention blocks L.
    pub blocks: usize,
    pub heads: usize,
    /// Sinusoidal embedding size for the noise step n.
    pub temb_dim: usize,
    pub mlp_hidden: usize,
}

impl ArchConfig {
    /// Desk-scale default; trains in minutes on CPU.
    pub fn desk(feat_dim: usize) -> Self {
        ArchConfig {
            feat_dim,
            hidden: 64,
            blocks: 2,
            heads: 4,
            temb_dim: 64,
            mlp_hidden: 128,
        }
    }

    /// Minimal config used by the gradient checks.
    pub fn tiny(feat_dim: usize) -> Self {
        ArchConfig {
            feat_dim,
            hidden: 8,
            blocks: 1,
            heads: 2,
            temb_dim: 8,
            mlp_hidden: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.blocks == 0 || self.heads == 0 || self.mlp_hidden == 0 {
            return Err(Error::InvalidConfig(String::from(
                "architecture sizes must be positive",
            )));
        }
        if self.hidden % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden width {} must be even for sinusoidal PE",
                self.hidden
            )));
        }
        if self.temb_dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "timestep embedding size {} must be even",
                self.temb_dim
            )));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden width {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

/// Standard sinusoidal embedding: pairs (sin(n / 10000^{2k/dim}),
/// cos(n / 10000^{2k/dim})) for k = 0..dim/2.
pub fn embed_timestep(n: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "sinusoidal embedding size {dim} must be positive and even"
        )));
    }
    let mut out = vec![0.0; dim];
    for k in 0..dim / 2 {
        let freq = libm::pow(10000.0, -(2.0 * k as f64) / dim as f64);
        let x = n as f64 * freq;
        out[2 * k] = libm::sin(x);
        out[2 * k + 1] = libm::cos(x);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
struct BlockParams {
    ln1_gamma: Vec<f64>,
    ln1_beta: Vec<f64>,
    w_q: Mat,
    b_q: Vec<f64>,
    w_k: Mat,
    b_k: Vec<f64>,
    w_v: Mat,
    b_v: Vec<f64>,
    w_o: Mat,
    b_o: Vec<f64>,
    ln2_gamma: Vec<f64>,
    ln2_beta: Vec<f64>,
    w_mlp1: Mat,
    b_mlp1: Vec<f64>,
    w_mlp2: Mat,
    b_mlp2: Vec<f64>,
}

/// The noise predictor eps_theta. Also serves as its own gradient
/// container (`zeros_like` + `axpy`).
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    cfg: ArchConfig,
    w_state: Mat,
    b_state: Vec<f64>,
    w_feat: Mat,
    b_feat: Vec<f64>,
    w_temb: Mat,
    b_temb: Vec<f64>,
    blocks: Vec<BlockParams>,
    ln_out_gamma: Vec<f64>,
    ln_out_beta: Vec<f64>,
    w_head: Mat,
    b_head: Vec<f64>,
    // residual noise head: out_t += gate(n) ⊙ (W_skip·state_t + b_skip).
    // Gives the head a direct, noise-step-gated path to the noised state so
    // the attention stack only has to model the clean-motion component.
    w_skip: Mat,
    b_skip: Vec<f64>,
    w_gate: Mat,
    b_gate: Vec<f64>,
}

fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    let std = libm::sqrt(2.0 / (rows + cols) as f64);
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
            .collect(),
    )
}

impl DenoiserModel {
    /// Seeded initialization: Xavier weights, zero biases, unit layer-norm
    /// gains, zero output head (the model starts by predicting zero noise).
    pub fn init(cfg: ArchConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        let blocks = (0..cfg.blocks)
            .map(|_| BlockParams {
                ln1_gamma: vec![1.0; h],
                ln1_beta: vec![0.0; h],
                w_q: xavier(rng, h, h),
                b_q: vec![0.0; h],
                w_k: xavier(rng, h, h),
                b_k: vec![0.0; h],
                w_v: xavier(rng, h, h),
                b_v: vec![0.0; h],
                w_o: xavier(rng, h, h),
                b_o: vec![0.0; h],
                ln2_gamma: vec![1.0; h],
                ln2_beta: vec![0.0; h],
                w_mlp1: xavier(rng, h, cfg.mlp_hidden),
                b_mlp1: vec![0.0; cfg.mlp_hidden],
                w_mlp2: xavier(rng, cfg.mlp_hidden, h),
                b_mlp2: vec![0.0; h],
            })
            .collect();
        Ok(DenoiserModel {
            cfg,
            w_state: xavier(rng, STATE_DIM, h),
            b_state: vec![0.0; h],
            w_feat: xavier(rng, cfg.feat_dim, h),
            b_feat: vec![0.0; h],
            w_temb: xavier(rng, cfg.temb_dim, h),
            b_temb: vec![0.0; h],
            blocks,
            ln_out_gamma: vec![1.0; h],
            ln_out_beta: vec![0.0; h],
            w_head: Mat::zeros(h, STATE_DIM),
            b_head: vec![0.0; STATE_DIM],
            w_skip: {
                let mut m = Mat::zeros(STATE_DIM, STATE_DIM);
                for d in 0..STATE_DIM {
                    *m.at_mut(d, d) = 1.0;
                }
                m
            },
            b_skip: vec![0.0; STATE_DIM],
            // zero gate: the skip path is silent at initialization
            w_gate: Mat::zeros(cfg.temb_dim, STATE_DIM),
            b_gate: vec![0.0; STATE_DIM],
        })
    }

    /// Same shapes, all parameters zero. Used as a gradient accumulator.
    pub fn zeros_like(cfg: ArchConfig) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        let blocks = (0..cfg.blocks)
            .map(|_| BlockParams {
                ln1_gamma: vec![0.0; h],
                ln1_beta: vec![0.0; h],
                w_q: Mat::zeros(h, h),
                b_q: vec![0.0; h],
                w_k: Mat::zeros(h, h),
                b_k: vec![0.0; h],
                w_v: Mat::zeros(h, h),
                b_v: vec![0.0; h],
                w_o: Mat::zeros(h, h),
                b_o: vec![0.0; h],
                ln2_gamma: vec![0.0; h],
                ln2_beta: vec![0.0; h],
                w_mlp1: Mat::zeros(h, cfg.mlp_hidden),
                b_mlp1: vec![0.0; cfg.mlp_hidden],
                w_mlp2: Mat::zeros(cfg.mlp_hidden, h),
                b_mlp2: vec![0.0; h],
            })
            .collect();
        Ok(DenoiserModel {
            cfg,
            w_state: Mat::zeros(STATE_DIM, h),
            b_state: vec![0.0; h],
            w_feat: Mat::zeros(cfg.feat_dim, h),
            b_feat: vec![0.0; h],
            w_temb: Mat::zeros(cfg.temb_dim, h),
            b_temb: vec![0.0; h],
            blocks,
            ln_out_gamma: vec![0.0; h],
            ln_out_beta: vec![0.0; h],
            w_head: Mat::zeros(h, STATE_DIM),
            b_head: vec![0.0; STATE_DIM],
            w_skip: Mat::zeros(STATE_DIM, STATE_DIM),
            b_skip: vec![0.0; STATE_DIM],
            w_gate: Mat::zeros(cfg.temb_dim, STATE_DIM),
            b_gate: vec![0.0; STATE_DIM],
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.cfg
    }

    /// Named-shape registry in flat-vector order.
    pub fn registry(cfg: &ArchConfig) -> Vec<(String, usize, usize)> {
        let h = cfg.hidden;
        let mut reg = vec![
            (String::from("w_state"), STATE_DIM, h),
            (String::from("b_state"), 1, h),
            (String::from("w_feat"), cfg.feat_dim, h),
            (String::from("b_feat"), 1, h),
            (String::from("w_temb"), cfg.temb_dim, h),
            (String::from("b_temb"), 1, h),
        ];
        for i in 0..cfg.blocks {
            for (name, rows, cols) in [
                ("ln1_gamma", 1, h),
                ("ln1_beta", 1, h),
                ("w_q", h, h),
                ("b_q", 1, h),
                ("w_k", h, h),
                ("b_k", 1, h),
                ("w_v", h, h),
                ("b_v", 1, h),
                ("w_o", h, h),
                ("b_o", 1, h),
                ("ln2_gamma", 1, h),
                ("ln2_beta", 1, h),
                ("w_mlp1", h, cfg.mlp_hidden),
                ("b_mlp1", 1, cfg.mlp_hidden),
                ("w_mlp2", cfg.mlp_hidden, h),
                ("b_mlp2", 1, h),
            ] {
                reg.push((format!("block{i}.{name}"), rows, cols));
            }
        }
        reg.push((String::from("ln_out_gamma"), 1, h));
        reg.push((String::from("ln_out_beta"), 1, h));
        reg.push((String::from("w_head"), h, STATE_DIM));
        reg.push((String::from("b_head"), 1, STATE_DIM));
        reg.push((String::from("w_skip"), STATE_DIM, STATE_DIM));
        reg.push((String::from("b_skip"), 1, STATE_DIM));
        reg.push((String::from("w_gate"), cfg.temb_dim, STATE_DIM));
        reg.push((String::from("b_gate"), 1, STATE_DIM));
        reg
    }

    /// Total trainable scalar count; pure function of the config.
    pub fn param_count(cfg: &ArchConfig) -> usize {
        Self::registry(cfg).iter().map(|(_, r, c)| r * c).sum()
    }

    fn for_each(&self, f: &mut impl FnMut(&[f64])) {
        f(&self.w_state.data);
        f(&self.b_state);
        f(&self.w_feat.data);
        f(&self.b_feat);
        f(&self.w_temb.data);
        f(&self.b_temb);
        for b in &self.blocks {
            f(&b.ln1_gamma);
            f(&b.ln1_beta);
            f(&b.w_q.data);
            f(&b.b_q);
            f(&b.w_k.data);
            f(&b.b_k);
            f(&b.w_v.data);
            f(&b.b_v);
            f(&b.w_o.data);
            f(&b.b_o);
            f(&b.ln2_gamma);
            f(&b.ln2_beta);
            f(&b.w_mlp1.data);
            f(&b.b_mlp1);
            f(&b.w_mlp2.data);
            f(&b.b_mlp2);
        }
        f(&self.ln_out_gamma);
        f(&self.ln_out_beta);
        f(&self.w_head.data);
        f(&self.b_head);
        f(&self.w_skip.data);
        f(&self.b_skip);
        f(&self.w_gate.data);
        f(&self.b_gate);
    }

    fn for_each_mut(&mut self, f: &mut impl FnMut(&mut [f64])) {
        f(&mut self.w_state.data);
        f(&mut self.b_state);
        f(&mut self.w_feat.data);
        f(&mut self.b_feat);
        f(&mut self.w_temb.data);
        f(&mut self.b_temb);
        for b in &mut self.blocks {
            f(&mut b.ln1_gamma);
            f(&mut b.ln1_beta);
            f(&mut b.w_q.data);
            f(&mut b.b_q);
            f(&mut b.w_k.data);
            f(&mut b.b_k);
            f(&mut b.w_v.data);
            f(&mut b.b_v);
            f(&mut b.w_o.data);
            f(&mut b.b_o);
            f(&mut b.ln2_gamma);
            f(&mut b.ln2_beta);
            f(&mut b.w_mlp1.data);
            f(&mut b.b_mlp1);
            f(&mut b.w_mlp2.data);
            f(&mut b.b_mlp2);
        }
        f(&mut self.ln_out_gamma);
        f(&mut self.ln_out_beta);
        f(&mut self.w_head.data);
        f(&mut self.b_head);
        f(&mut self.w_skip.data);
        f(&mut self.b_skip);
        f(&mut self.w_gate.data);
        f(&mut self.b_gate);
    }

    /// Parameters concatenated in registry order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::param_count(&self.cfg));
        self.for_each(&mut |s| out.extend_from_slice(s));
        out
    }

    pub fn from_flat(cfg: ArchConfig, flat: &[f64]) -> Result<Self> {
        if flat.len() != Self::param_count(&cfg) {
            return Err(Error::InvalidInput(format!(
                "flat parameter vector length {} does not match config ({} expected)",
                flat.len(),
                Self::param_count(&cfg)
            )));
        }
        let mut model = Self::zeros_like(cfg)?;
        let mut offset = 0;
        model.for_each_mut(&mut |s| {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        });
        Ok(model)
    }

    /// self += scale * other (same shapes).
    fn axpy(&mut self, scale: f64, other: &DenoiserModel) {
        let flat = other.to_flat();
        let mut offset = 0;
        self.for_each_mut(&mut |s| {
            for v in s.iter_mut() {
                *v += scale * flat[offset];
                offset += 1;
            }
        });
    }

    fn grad_norm(&self) -> f64 {
        let mut sq = 0.0;
        self.for_each(&mut |s| {
            for v in s {
                sq += v * v;
            }
        });
        libm::sqrt(sq)
    }

    fn scale_params(&mut self, scale: f64) {
        self.for_each_mut(&mut |s| {
            for v in s.iter_mut() {
                *v *= scale;
            }
        });
    }

    /// Deterministic forward pass; output has exactly d_m entries in
    /// flat-motion order.
    pub fn predict_noise(&self, mn: &Motion, feats: &SteFeature, n: usize) -> Result<Vec<f64>> {
        let (out, _) = self.forward(mn, feats, n, false)?;
        Ok(out)
    }

    fn forward(
        &self,
        mn: &Motion,
        feats: &SteFeature,
        n: usize,
        keep_trace: bool,
    ) -> Result<(Vec<f64>, Option<ForwardTrace>)> {
        let t_len = mn.t_len();
        if feats.t_len() != t_len {
            return Err(Error::InvalidInput(format!(
                "feature rows {} do not match motion timesteps {}",
                feats.t_len(),
                t_len
            )));
        }
        if feats.channels() != self.cfg.feat_dim {
            return Err(Error::InvalidInput(format!(
                "feature channels {} do not match architecture feat_dim {}",
                feats.channels(),
                self.cfg.feat_dim
            )));
        }
        let h = self.cfg.hidden;

        let s_in = Mat::from_vec(t_len, STATE_DIM, mn.flat().to_vec());
        let f_in = Mat::from_vec(t_len, self.cfg.feat_dim, feats.data().to_vec());
        let temb = Mat::from_vec(1, self.cfg.temb_dim, embed_timestep(n, self.cfg.temb_dim)?);

        // token rows 0..T: state affine + feature affine + PE(t)
        let mut x = Mat::zeros(t_len + 1, h);
        let xs = nn::affine(&s_in, &self.w_state, &self.b_state);
        let xf = nn::affine(&f_in, &self.w_feat, &self.b_feat);
        // PE rows share their frequencies across t; hoist the pow out of the
        // per-token loop (values identical to embed_timestep(t, h)).
        let freqs: Vec<f64> = (0..h / 2)
            .map(|k| libm::pow(10000.0, -(2.0 * k as f64) / h as f64))
            .collect();
        for t in 0..t_len {
            for (k, &freq) in freqs.iter().enumerate() {
                let angle = t as f64 * freq;
                *x.at_mut(t, 2 * k) = xs.at(t, 2 * k) + xf.at(t, 2 * k) + libm::sin(angle);
                *x.at_mut(t, 2 * k + 1) =
                    xs.at(t, 2 * k + 1) + xf.at(t, 2 * k + 1) + libm::cos(angle);
            }
        }
        // final token: the noise-step embedding
        let xt = nn::affine(&temb, &self.w_temb, &self.b_temb);
        x.row_mut(t_len).copy_from_slice(xt.row(0));

        let mut block_traces = Vec::new();
        for b in &self.blocks {
            let x_in = x;
            let (a, ln1_cache) = nn::layer_norm(&x_in, &b.ln1_gamma, &b.ln1_beta);
            let q = nn::affine(&a, &b.w_q, &b.b_q);
            let k = nn::affine(&a, &b.w_k, &b.b_k);
            let v = nn::affine(&a, &b.w_v, &b.b_v);
            let (attn_out, attn_cache) = nn::multi_head_attention(&q, &k, &v, self.cfg.heads);
            let o = nn::affine(&attn_out, &b.w_o, &b.b_o);
            let mut x_mid = x_in.clone();
            x_mid.add_assign(&o);
            let (b_out, ln2_cache) = nn::layer_norm(&x_mid, &b.ln2_gamma, &b.ln2_beta);
            let h1 = nn::affine(&b_out, &b.w_mlp1, &b.b_mlp1);
            let g = nn::gelu(&h1);
            let m = nn::affine(&g, &b.w_mlp2, &b.b_mlp2);
            let mut x_out = x_mid.clone();
            x_out.add_assign(&m);
            x = x_out;
            if keep_trace {
                block_traces.push(BlockTrace {
                    ln1_cache,
                    a,
                    q,
                    k,
                    v,
                    attn_cache,
                    attn_out,
                    ln2_cache,
                    b_out,
                    h1,
                    g,
                });
            }
        }

        let (y, lnf_cache) = nn::layer_norm(&x, &self.ln_out_gamma, &self.ln_out_beta);
        let mut y_motion = Mat::zeros(t_len, h);
        for t in 0..t_len {
            y_motion.row_mut(t).copy_from_slice(y.row(t));
        }
        let out_mat = nn::affine(&y_motion, &self.w_head, &self.b_head);
        let skip = nn::affine(&s_in, &self.w_skip, &self.b_skip);
        let gate = nn::affine(&temb, &self.w_gate, &self.b_gate);
        let mut out = out_mat.data.clone();
        for t in 0..t_len {
            for d in 0..STATE_DIM {
                out[t * STATE_DIM + d] += gate.at(0, d) * skip.at(t, d);
            }
        }

        let trace = if keep_trace {
            Some(ForwardTrace {
                s_in,
                f_in,
                temb,
                blocks: block_traces,
                lnf_cache,
                y_motion,
                skip,
                gate,
            })
        } else {
            None
        };
        Ok((out, trace))
    }

    /// Reverse-mode gradients of a scalar loss given dL/d(output).
    fn backward(&self, trace: &ForwardTrace, dout: &[f64]) -> Result<DenoiserModel> {
        let t_len = trace.s_in.rows;
        let h = self.cfg.hidden;
        let mut grads = DenoiserModel::zeros_like(self.cfg)?;

        let dout_mat = Mat::from_vec(t_len, STATE_DIM, dout.to_vec());

        // gated skip path (additive, so the head path sees dout unchanged)
        let mut d_skip = Mat::zeros(t_len, STATE_DIM);
        let mut d_gate = Mat::zeros(1, STATE_DIM);
        for t in 0..t_len {
            for d in 0..STATE_DIM {
                let g = dout_mat.at(t, d);
                *d_skip.at_mut(t, d) = g * trace.gate.at(0, d);
                *d_gate.at_mut(0, d) += g * trace.skip.at(t, d);
            }
        }
        let (_, dw_skip, db_skip) = nn::affine_backward(&d_skip, &trace.s_in, &self.w_skip);
        grads.w_skip = dw_skip;
        grads.b_skip = db_skip;
        let (_, dw_gate, db_gate) = nn::affine_backward(&d_gate, &trace.temb, &self.w_gate);
        grads.w_gate = dw_gate;
        grads.b_gate = db_gate;

        let (dy_motion, dw_head, db_head) =
            nn::affine_backward(&dout_mat, &trace.y_motion, &self.w_head);
        grads.w_head = dw_head;
        grads.b_head = db_head;

        let mut dy = Mat::zeros(t_len + 1, h);
        for t in 0..t_len {
            dy.row_mut(t).copy_from_slice(dy_motion.row(t));
        }
        let (mut dx, dg, db) = nn::layer_norm_backward(&dy, &self.ln_out_gamma, &trace.lnf_cache);
        grads.ln_out_gamma = dg;
        grads.ln_out_beta = db;

        for (bi, b) in self.blocks.iter().enumerate().rev() {
            let t = &trace.blocks[bi];
            let gb = &mut grads.blocks[bi];

            // mlp branch: x_out = x_mid + mlp(ln2(x_mid))
            let (d_g, dw2, db2) = nn::affine_backward(&dx, &t.g, &b.w_mlp2);
            gb.w_mlp2 = dw2;
            gb.b_mlp2 = db2;
            let dh1 = nn::gelu_backward(&d_g, &t.h1);
            let (d_bout, dw1, db1) = nn::affine_backward(&dh1, &t.b_out, &b.w_mlp1);
            gb.w_mlp1 = dw1;
            gb.b_mlp1 = db1;
            let (dx_mid_ln, dg2, dbeta2) =
                nn::layer_norm_backward(&d_bout, &b.ln2_gamma, &t.ln2_cache);
            gb.ln2_gamma = dg2;
            gb.ln2_beta = dbeta2;
            let mut dx_mid = dx;
            dx_mid.add_assign(&dx_mid_ln);

            // attention branch: x_mid = x_in + W_o(attn(qkv(ln1(x_in))))
            let (d_attn_out, dwo, dbo) = nn::affine_backward(&dx_mid, &t.attn_out, &b.w_o);
            gb.w_o = dwo;
            gb.b_o = dbo;
            let (dq, dk, dv) = nn::attention_backward(
                &d_attn_out,
                &t.q,
                &t.k,
                &t.v,
                self.cfg.heads,
                &t.attn_cache,
            );
            let (da_q, dwq, dbq) = nn::affine_backward(&dq, &t.a, &b.w_q);
            let (da_k, dwk, dbk) = nn::affine_backward(&dk, &t.a, &b.w_k);
            let (da_v, dwv, dbv) = nn::affine_backward(&dv, &t.a, &b.w_v);
            gb.w_q = dwq;
            gb.b_q = dbq;
            gb.w_k = dwk;
            gb.b_k = dbk;
            gb.w_v = dwv;
            gb.b_v = dbv;
            let mut da = da_q;
            da.add_assign(&da_k);
            da.add_assign(&da_v);
            let (dx_in_ln, dg1, dbeta1) =
                nn::layer_norm_backward(&da, &b.ln1_gamma, &t.ln1_cache);
            gb.ln1_gamma = dg1;
            gb.ln1_beta = dbeta1;
            let mut dx_in = dx_mid;
            dx_in.add_assign(&dx_in_ln);
            dx = dx_in;
        }

        // token assembly: rows 0..T feed both input affines; row T the temb affine
        let mut dx0 = Mat::zeros(t_len, h);
        for t in 0..t_len {
            dx0.row_mut(t).copy_from_slice(dx.row(t));
        }
        let (_, dws, dbs) = nn::affine_backward(&dx0, &trace.s_in, &self.w_state);
        grads.w_state = dws;
        grads.b_state = dbs;
        let (_, dwf, dbf) = nn::affine_backward(&dx0, &trace.f_in, &self.w_feat);
        grads.w_feat = dwf;
        grads.b_feat = dbf;
        let dxt = Mat::from_vec(1, h, dx.row(t_len).to_vec());
        let (_, dwt, dbt) = nn::affine_backward(&dxt, &trace.temb, &self.w_temb);
        grads.w_temb = dwt;
        grads.b_temb = dbt;

        Ok(grads)
    }

    /// Gradients of mean(output^2) over all parameters; used by the
    /// finite-difference checks.
    pub fn mean_sq_output_and_grads(
        &self,
        mn: &Motion,
        feats: &SteFeature,
        n: usize,
    ) -> Result<(f64, Vec<f64>)> {
        let (out, trace) = self.forward(mn, feats, n, true)?;
        let d = out.len() as f64;
        let loss = out.iter().map(|v| v * v).sum::<f64>() / d;
        let dout: Vec<f64> = out.iter().map(|v| 2.0 * v / d).collect();
        let grads = self.backward(trace.as_ref().unwrap(), &dout)?;
        Ok((loss, grads.to_flat()))
    }
}

struct BlockTrace {
    ln1_cache: nn::LayerNormCache,
    a: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    attn_cache: nn::AttentionCache,
    attn_out: Mat,
    ln2_cache: nn::LayerNormCache,
    b_out: Mat,
    h1: Mat,
    g: Mat,
}

struct ForwardTrace {
    s_in: Mat,
    f_in: Mat,
    temb: Mat,
    blocks: Vec<BlockTrace>,
    lnf_cache: nn::LayerNormCache,
    y_motion: Mat,
    skip: Mat,
    gate: Mat,
}

// ---- training ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Training hyperparameters; the seed fixes every random draw (init, batch
/// sampling, noise-step sampling, eps sampling).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate at the last step; the rate follows a cosine from
    /// `learning_rate` down to this. Equal values give a constant rate.
    pub lr_final: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 16,
            learning_rate: 1e-3,
            lr_final: 1e-3,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.learning_rate < 0.0
            || self.lr_final < 0.0
            || self.grad_clip <= 0.0
        {
            return Err(Error::InvalidConfig(String::from(
                "train config needs batch_size > 0, learning rates >= 0, grad_clip > 0",
            )));
        }
        Ok(())
    }

    /// Cosine-interpolated learning rate for a given step.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.steps <= 1 || self.learning_rate == self.lr_final {
            return self.learning_rate;
        }
        let progress = step as f64 / (self.steps - 1) as f64;
        let w = 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress));
        self.lr_final + (self.learning_rate - self.lr_final) * w
    }
}

/// Adam moment buffers over the flat parameter vector.
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, param_count: usize) -> Self {
        Optimizer {
            kind,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    fn apply(&mut self, model: &mut DenoiserModel, grads: &DenoiserModel, lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => model.axpy(-lr, grads),
            OptimizerKind::Adam => {
                self.t += 1;
                let g = grads.to_flat();
                let bc1 = 1.0 - libm::pow(ADAM_BETA1, self.t as f64);
                let bc2 = 1.0 - libm::pow(ADAM_BETA2, self.t as f64);
                let mut i = 0;
                let m = &mut self.m;
                let v = &mut self.v;
                model.for_each_mut(&mut |s| {
                    for p in s.iter_mut() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        *p -= lr * mhat / (libm::sqrt(vhat) + ADAM_EPS);
                        i += 1;
                    }
                });
            }
        }
    }
}

/// Squared-error loss ||eps_theta(m_n, f, n) - eps||^2 of one training
/// example and its gradients w.r.t. every model parameter. This is the
/// per-item building block of [`training_step`], exposed so gradients can
/// be verified against finite differences.
pub fn loss_and_grads(
    model: &DenoiserModel,
    mn: &Motion,
    feats: &SteFeature,
    eps: &[f64],
    n: usize,
) -> Result<(f64, DenoiserModel)> {
    let (pred, trace) = model.forward(mn, feats, n, true)?;
    let (loss, dout) = nn::sum_sq_diff(&pred, eps);
    let grads = model.backward(trace.as_ref().unwrap(), &dout)?;
    Ok((loss, grads))
}

/// One DDPM training step over a batch of (motion, scene field) pairs:
/// noise each motion to a uniform step, extract conditioning features at
/// the noised coordinates, predict the noise, take one optimizer step.
/// Returns the pre-update mean loss.
pub fn training_step(
    model: &mut DenoiserModel,
    batch: &[(&Motion, &SceneField)],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    opt: &mut Optimizer,
    step: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput(String::from("empty training batch")));
    }
    // all randomness drawn up front so gradient evaluation order cannot
    // change the stream
    let mut items: Vec<(Motion, SteFeature, Vec<f64>, usize)> = Vec::with_capacity(batch.len());
    for (m0, field) in batch {
        let n = rng.gen_range(1..=schedule.len());
        let eps: Vec<f64> = (0..m0.dim())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mn = forward_noise(m0, n, &eps, schedule)?;
        let feats = ste_extract(field, &mn);
        items.push((mn, feats, eps, n));
    }

    let eval = |(mn, feats, eps, n): &(Motion, SteFeature, Vec<f64>, usize)| {
        loss_and_grads(model, mn, feats, eps, *n)
    };

    #[cfg(feature = "parallel")]
    let results: Vec<Result<(f64, DenoiserModel)>> = {
        use rayon::prelude::*;
        items.par_iter().map(eval).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<(f64, DenoiserModel)>> = items.iter().map(eval).collect();

    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = DenoiserModel::zeros_like(*model.config())?;
    for r in results {
        let (l, g) = r?;
        loss += l * scale;
        grads.axpy(scale, &g);
    }
    if !loss.is_finite() {
        return Err(Error::TrainingDiverged {
            step,
            learning_rate: cfg.learning_rate,
        });
    }
    let norm = grads.grad_norm();
    if norm > cfg.grad_clip {
        grads.scale_params(cfg.grad_clip / norm);
    }
    opt.apply(model, &grads, cfg.lr_at(step));
    Ok(loss)
}

/// Full training run; fully reproducible under the config seed. Returns the
/// model and the per-step loss curve.
pub fn train(
    ds: &MotionDataset,
    schedule: &NoiseSchedule,
    arch: ArchConfig,
    cfg: &TrainConfig,
) -> Result<(DenoiserModel, Vec<f64>)> {
    use rand::SeedableRng;
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::InvalidInput(String::from("empty training dataset")));
    }
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut model = DenoiserModel::init(arch, &mut rng)?;
    let mut opt = Optimizer::new(cfg.optimizer, DenoiserModel::param_count(&arch));
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<(&Motion, &SceneField)> = (0..cfg.batch_size)
            .map(|_| {
                let i = rng.gen_range(0..ds.len());
                (ds.motion(i), ds.field(i))
            })
            .collect();
        let loss = training_step(&mut model, &batch, schedule, cfg, &mut opt, step, &mut rng)?;
        losses.push(loss);
    }
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::DatasetMeta;
    use alloc::vec::Vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rand_motion(rng: &mut ChaCha12Rng, t_len: usize, span: f64) -> Motion {
        Motion::from_flat(
            t_len,
            (0..t_len * STATE_DIM)
                .map(|_| rng.gen_range(-span..span))
                .collect(),
        )
        .unwrap()
    }

    fn rand_field(rng: &mut ChaCha12Rng, h: usize, w: usize, c: usize) -> SceneField {
        SceneField::new(
            h,
            w,
            c,
            (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn tiny_inputs(rng: &mut ChaCha12Rng, t_len: usize, c: usize) -> (Motion, SteFeature) {
        let m = rand_motion(rng, t_len, 3.0);
        let f = rand_field(rng, 6, 6, c);
        let feats = ste_extract(&f, &m);
        (m, feats)
    }

    #[test]
    fn embed_timestep_examples() {
        // n = 0 -> alternating (0, 1, 0, 1, ...)
        let e = embed_timestep(0, 6).unwrap();
        assert_eq!(e, alloc::vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        // n = 1, dim = 4 -> (sin 1, cos 1, sin 1e-2, cos 1e-2)
        let e = embed_timestep(1, 4).unwrap();
        assert!((e[0] - libm::sin(1.0)).abs() < 1e-15);
        assert!((e[1] - libm::cos(1.0)).abs() < 1e-15);
        assert!((e[2] - libm::sin(0.01)).abs() < 1e-15);
        assert!((e[3] - libm::cos(0.01)).abs() < 1e-15);
        // range
        let e = embed_timestep(12345, 32).unwrap();
        assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
        // odd dim rejected
        assert!(embed_timestep(1, 5).is_err());
    }

    #[test]
    fn param_count_is_pure_function_of_config() {
        let cfg = ArchConfig::tiny(2);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let m1 = DenoiserModel::init(cfg, &mut rng).unwrap();
        let m2 = DenoiserModel::zeros_like(cfg).unwrap();
        let n = DenoiserModel::param_count(&cfg);
        assert_eq!(m1.to_flat().len(), n);
        assert_eq!(m2.to_flat().len(), n);
        let reg = DenoiserModel::registry(&cfg);
        assert_eq!(reg.iter().map(|(_, r, c)| r * c).sum::<usize>(), n);
    }

    #[test]
    fn flat_round_trip() {
        let cfg = ArchConfig::tiny(3);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let model = DenoiserModel::init(cfg, &mut rng).unwrap();
        let flat = model.to_flat();
        let back = DenoiserModel::from_flat(cfg, &flat).unwrap();
        assert_eq!(model, back);
        assert!(DenoiserModel::from_flat(cfg, &flat[1..]).is_err());
    }

    #[test]
    fn zero_head_outputs_zero() {
        // default init has a zero output head
        let cfg = ArchConfig::tiny(2);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let model = DenoiserModel::init(cfg, &mut rng).unwrap();
        let (m, feats) = tiny_inputs(&mut rng, 4, 2);
        let out = model.predict_noise(&m, &feats, 3).unwrap();
        assert_eq!(out.len(), m.dim());
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = ArchConfig::tiny(2);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut model = DenoiserModel::init(cfg, &mut rng).unwrap();
        // non-zero head so the output is nontrivial
        model.w_head = super::xavier(&mut rng, cfg.hidden, STATE_DIM);
        let (m, feats) = tiny_inputs(&mut rng, 5, 2);
        let a = model.predict_noise(&m, &feats, 7).unwrap();
        let b = model.predict_noise(&m, &feats, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_shape_mismatches() {
        let cfg = ArchConfig::tiny(2);
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let model = DenoiserModel::init(cfg, &mut rng).unwrap();
        let m = rand_motion(&mut rng, 4, 1.0);
        let f = rand_field(&mut rng, 6, 6, 2);
        let short = rand_motion(&mut rng, 3, 1.0);
        let feats_short = ste_extract(&f, &short);
        assert!(model.predict_noise(&m, &feats_short, 1).is_err());
        let f3 = rand_field(&mut rng, 6, 6, 3);
        let feats_wrong_c = ste_extract(&f3, &m);
        assert!(model.predict_noise(&m, &feats_wrong_c, 1).is_err());
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let cfg = ArchConfig::tiny(2);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut model = DenoiserModel::init(cfg, &mut rng).unwrap();
        model.w_head = super::xavier(&mut rng, cfg.hidden, STATE_DIM);
        let (m, feats) = tiny_inputs(&mut rng, 4, 2);
        let n = 3;

        let (_, analytic) = model.mean_sq_output_and_grads(&m, &feats, n).unwrap();
        let flat = model.to_flat();
        let h = 1e-5;
        for i in 0..flat.len() {
            let mut fp = flat.clone();
            fp[i] += h;
            let mut fm = flat.clone();
            fm[i] -= h;
            let lp = DenoiserModel::from_flat(cfg, &fp)
                .unwrap()
                .mean_sq_output_and_grads(&m, &feats, n)
                .unwrap()
                .0;
            let lm = DenoiserModel::from_flat(cfg, &fm)
                .unwrap()
                .mean_sq_output_and_grads(&m, &feats, n)
                .unwrap()
                .0;
            let fd = (lp - lm) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1.0);
            assert!(
                (analytic[i] - fd).abs() / denom < 1e-4,
                "param {i}: analytic {} vs fd {}",
                analytic[i],
                fd
            );
        }
    }

    #[test]
    fn no_nan_for_large_inputs() {
        let cfg = ArchConfig::tiny(2);
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let mut model = DenoiserModel::init(cfg, &mut rng).unwrap();
        model.w_head = super::xavier(&mut rng, cfg.hidden, STATE_DIM);
        let m = rand_motion(&mut rng, 6, 1000.0);
        let f = rand_field(&mut rng, 4, 4, 2);
        let feats = ste_extract(&f, &m);
        let out = model.predict_noise(&m, &feats, 999).unwrap();
        assert_eq!(out.len(), m.dim());
        assert!(out.iter().all(|v| v.is_finite()));
    }

    fn smoke_dataset(rng: &mut ChaCha12Rng, j: usize, t_len: usize, c: usize) -> MotionDataset {
        // motions cluster around a shared base trajectory, like real task
        // data, so the noise becomes predictable from the noised motion
        let base = rand_motion(rng, t_len, 2.0);
        let entries: Vec<(Motion, SceneField)> = (0..j)
            .map(|_| {
                let mut m = base.clone();
                for v in m.flat_mut() {
                    *v += rng.gen_range(-0.3..0.3);
                }
                (m, rand_field(rng, 6, 6, c))
            })
            .collect();
        MotionDataset {
            entries,
            meta: DatasetMeta {
                seed: 0,
                family_id: 0,
                t_len,
                height: 6,
                width: 6,
                channels: c,
            },
        }
    }

    #[test]
    fn zero_model_loss_is_about_d_m() {
        // E||eps||^2 = d_m for a model that always outputs zero; lr = 0
        // keeps the zero head intact across steps
        let cfg = ArchConfig::tiny(2);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let ds = smoke_dataset(&mut rng, 8, 8, 2);
        let schedule = NoiseSchedule::linear(1e-3, 1e-4, 50).unwrap();
        let tc = TrainConfig {
            steps: 50,
            batch_size: 8,
            learning_rate: 0.0,
            lr_final: 0.0,
            seed: 7,
            optimizer: OptimizerKind::Sgd,
            grad_clip: 1.0,
        };
        let d_m = (8 * STATE_DIM) as f64;
        let (_, losses) = train(&ds, &schedule, cfg, &tc).unwrap();
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        assert!(
            (mean - d_m).abs() < 0.1 * d_m,
            "mean loss {mean} not near d_m = {d_m}"
        );
    }

    #[test]
    fn training_reduces_loss_on_small_dataset() {
        let cfg = ArchConfig::desk(2);
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let ds = smoke_dataset(&mut rng, 16, 8, 2);
        let schedule = NoiseSchedule::basic(1e-2, 0.2, 100).unwrap();
        let tc = TrainConfig {
            steps: 500,
            batch_size: 8,
            learning_rate: 3e-3,
            lr_final: 3e-3,
            seed: 8,
            optimizer: OptimizerKind::Adam,
            grad_clip: 1.0,
        };
        let (_, losses) = train(&ds, &schedule, cfg, &tc).unwrap();
        assert!(losses.iter().all(|l| l.is_finite()));
        let first: f64 = losses[..50].iter().sum::<f64>() / 50.0;
        let last: f64 = losses[450..].iter().sum::<f64>() / 50.0;
        assert!(
            last < 0.5 * first,
            "loss did not halve: first {first}, last {last}"
        );
    }

    #[test]
    fn train_zero_steps_returns_initialized_model() {
        let cfg = ArchConfig::tiny(2);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let ds = smoke_dataset(&mut rng, 4, 4, 2);
        let schedule = NoiseSchedule::linear(1e-3, 1e-4, 10).unwrap();
        let tc = TrainConfig {
            steps: 0,
            seed: 42,
            ..TrainConfig::default()
        };
        let (model, losses) = train(&ds, &schedule, cfg, &tc).unwrap();
        assert!(losses.is_empty());
        let mut rng2 = ChaCha12Rng::seed_from_u64(42);
        let fresh = DenoiserModel::init(cfg, &mut rng2).unwrap();
        assert_eq!(model, fresh);
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let cfg = ArchConfig::tiny(2);
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let ds = smoke_dataset(&mut rng, 8, 6, 2);
        let schedule = NoiseSchedule::linear(1e-3, 1e-4, 20).unwrap();
        let tc = TrainConfig {
            steps: 30,
            batch_size: 4,
            seed: 123,
            ..TrainConfig::default()
        };
        let (m1, l1) = train(&ds, &schedule, cfg, &tc).unwrap();
        let (m2, l2) = train(&ds, &schedule, cfg, &tc).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(m1.to_flat(), m2.to_flat());
    }

    #[test]
    fn positional_encoding_breaks_timestep_symmetry() {
        let cfg = ArchConfig::tiny(2);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let ds = smoke_dataset(&mut rng, 8, 6, 2);
        let schedule = NoiseSchedule::linear(1e-3, 1e-4, 20).unwrap();
        let tc = TrainConfig {
            steps: 10,
            batch_size: 4,
            seed: 99,
            ..TrainConfig::default()
        };
        let (model, _) = train(&ds, &schedule, cfg, &tc).unwrap();
        let m = rand_motion(&mut rng, 6, 2.0);
        let f = rand_field(&mut rng, 6, 6, 2);
        let feats = ste_extract(&f, &m);
        let out = model.predict_noise(&m, &feats, 5).unwrap();

        // swap timesteps 1 and 4 in both the states and the features
        let mut swapped = m.clone();
        for k in 0..STATE_DIM {
            swapped.flat_mut().swap(STATE_DIM + k, 4 * STATE_DIM + k);
        }
        let feats_sw = ste_extract(&f, &swapped);
        let out_sw = model.predict_noise(&swapped, &feats_sw, 5).unwrap();

        // compare token 1's prediction against what token 4 produced for
        // the same (state, feature) content: PE must make them differ
        let mut diff = 0.0f64;
        for k in 0..STATE_DIM {
            diff = diff.max((out[STATE_DIM + k] - out_sw[4 * STATE_DIM + k]).abs());
        }
        assert!(diff > 1e-8, "PE failed to break permutation symmetry");
    }
}
