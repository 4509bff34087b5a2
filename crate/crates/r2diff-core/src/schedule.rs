//! DDPM noise-schedule algebra (forward noising, reverse posterior) and the
//! noise-scale tuner that fits the terminal alpha-bar to nearest-neighbor
//! motion distances.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::motion::{kth_nearest_index, DistanceWeights, Motion, MotionDataset, STATE_DIM};

/// Lower clamp on the max per-dim squared nearest-neighbor distance, so a
/// duplicate-saturated dataset cannot force alpha_bar_N = 1 (a zero-noise
/// degenerate schedule).
pub const DELTA_MIN: f64 = 1e-6;

/// Which posterior variance the reverse step uses.
///
/// `Ddpm` is the standard (1 - ab_{n-1})/(1 - ab_n) * beta_n. `Paper` drops
/// the beta_n factor, which makes the variance approach 1 at small n and
/// destroys fine refinement; it is kept selectable for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosteriorVariance {
    Ddpm,
    Paper,
}

impl PosteriorVariance {
    pub fn tag(&self) -> &'static str {
        match self {
            PosteriorVariance::Ddpm => "ddpm",
            PosteriorVariance::Paper => "paper",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "ddpm" => Ok(PosteriorVariance::Ddpm),
            "paper" => Ok(PosteriorVariance::Paper),
            other => Err(Error::InvalidConfig(format!(
                "unknown posterior variance '{other}' (expected ddpm|paper)"
            ))),
        }
    }
}

/// beta_1..beta_N with derived alpha_n and the running product alpha_bar_n.
/// Convention: alpha_bar_0 = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    /// alpha_bars[n] = prod_{i<=n} (1 - beta_i); index 0 holds 1.0.
    alpha_bars: Vec<f64>,
    beta0: f64,
    gamma: f64,
    posterior: PosteriorVariance,
}

impl NoiseSchedule {
    /// Linear schedule beta_n = beta0 + gamma * n for n = 1..N.
    pub fn linear(beta0: f64, gamma: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidSchedule(String::from(
                "schedule needs at least one step",
            )));
        }
        let mut betas = Vec::with_capacity(n_steps);
        let mut alpha_bars = Vec::with_capacity(n_steps + 1);
        alpha_bars.push(1.0);
        for n in 1..=n_steps {
            let beta = beta0 + gamma * n as f64;
            if !(beta > 0.0 && beta < 1.0) {
                return Err(Error::InvalidSchedule(format!(
                    "beta_{n} = {beta} outside (0, 1) for beta0 = {beta0}, gamma = {gamma}"
                )));
            }
            betas.push(beta);
            alpha_bars.push(alpha_bars[n - 1] * (1.0 - beta));
        }
        Ok(NoiseSchedule {
            betas,
            alpha_bars,
            beta0,
            gamma,
            posterior: PosteriorVariance::Ddpm,
        })
    }

    /// Builds a schedule from explicit betas (used when re-reading exported
    /// schedule files); beta0/gamma are kept for the header round trip.
    pub fn from_betas(
        betas: Vec<f64>,
        beta0: f64,
        gamma: f64,
        posterior: PosteriorVariance,
    ) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule(String::from(
                "schedule needs at least one step",
            )));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for (i, beta) in betas.iter().enumerate() {
            if !(*beta > 0.0 && *beta < 1.0) {
                return Err(Error::InvalidSchedule(format!(
                    "beta_{} = {beta} outside (0, 1)",
                    i + 1
                )));
            }
            alpha_bars.push(alpha_bars[i] * (1.0 - beta));
        }
        Ok(NoiseSchedule {
            betas,
            alpha_bars,
            beta0,
            gamma,
            posterior,
        })
    }

    /// Standard DDPM baseline: beta linear from `lo` to `hi` over N steps,
    /// so alpha_bar_N is driven toward 0.
    pub fn basic(lo: f64, hi: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 1 {
            return NoiseSchedule::linear(lo, 0.0, 1);
        }
        let gamma = (hi - lo) / (n_steps as f64 - 1.0);
        NoiseSchedule::linear(lo - gamma, gamma, n_steps)
    }

    pub fn with_posterior(mut self, posterior: PosteriorVariance) -> Self {
        self.posterior = posterior;
        self
    }

    pub fn posterior(&self) -> PosteriorVariance {
        self.posterior
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta0(&self) -> f64 {
        self.beta0
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// beta_n, n in [1, N].
    pub fn beta(&self, n: usize) -> f64 {
        self.betas[n - 1]
    }

    /// alpha_n = 1 - beta_n, n in [1, N].
    pub fn alpha(&self, n: usize) -> f64 {
        1.0 - self.betas[n - 1]
    }

    /// alpha_bar_n, n in [0, N]; alpha_bar_0 = 1.
    pub fn alpha_bar(&self, n: usize) -> f64 {
        self.alpha_bars[n]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Posterior variance beta_hat_n under the configured convention.
    pub fn posterior_variance(&self, n: usize) -> f64 {
        let ratio = (1.0 - self.alpha_bars[n - 1]) / (1.0 - self.alpha_bars[n]);
        match self.posterior {
            PosteriorVariance::Ddpm => ratio * self.beta(n),
            PosteriorVariance::Paper => ratio,
        }
    }
}

/// Everything the tuner derived on the way to a schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuningResult {
    pub gamma: f64,
    pub beta0: f64,
    /// alpha_bar_N = 1 / (1 + max_nn_sq_distance).
    pub target_alpha_bar_n: f64,
    /// Max over (i, d) of the per-dim squared distance to the rank-k
    /// neighbor, clamped below at DELTA_MIN.
    pub max_nn_sq_distance: f64,
    pub rank: usize,
}

/// sqrt(alpha_bar_n) * m0 + sqrt(1 - alpha_bar_n) * eps; n = 0 returns m0.
pub fn forward_noise(m0: &Motion, n: usize, eps: &[f64], s: &NoiseSchedule) -> Result<Motion> {
    if n > s.len() {
        return Err(Error::InvalidInput(format!(
            "noise step {n} exceeds schedule length {}",
            s.len()
        )));
    }
    if eps.len() != m0.dim() {
        return Err(Error::InvalidInput(format!(
            "noise vector length {} does not match d_m = {}",
            eps.len(),
            m0.dim()
        )));
    }
    if n == 0 {
        return Ok(m0.clone());
    }
    let ab = s.alpha_bar(n);
    let scale_signal = libm::sqrt(ab);
    let scale_noise = libm::sqrt(1.0 - ab);
    let mut out = m0.clone();
    for (x, e) in out.flat_mut().iter_mut().zip(eps.iter()) {
        *x = scale_signal * *x + scale_noise * e;
    }
    Ok(out)
}

/// One reverse update: mu + sqrt(beta_hat_n) * z with
/// mu = (1/sqrt(alpha_n)) * (mn - beta_n / sqrt(1 - alpha_bar_n) * eps_hat).
/// The caller supplies z (zero vector allowed, and required at n = 1).
pub fn reverse_step(
    mn: &Motion,
    eps_hat: &[f64],
    n: usize,
    s: &NoiseSchedule,
    z: &[f64],
) -> Result<Motion> {
    if n == 0 || n > s.len() {
        return Err(Error::InvalidInput(format!(
            "reverse step index {n} outside [1, {}]",
            s.len()
        )));
    }
    if eps_hat.len() != mn.dim() || z.len() != mn.dim() {
        return Err(Error::InvalidInput(format!(
            "eps_hat/z length mismatch: {} / {} vs d_m = {}",
            eps_hat.len(),
            z.len(),
            mn.dim()
        )));
    }
    let alpha = s.alpha(n);
    let inv_sqrt_alpha = 1.0 / libm::sqrt(alpha);
    let eps_coeff = s.beta(n) / libm::sqrt(1.0 - s.alpha_bar(n));
    let sigma = libm::sqrt(s.posterior_variance(n));
    let mut out = mn.clone();
    for ((x, e), zz) in out.flat_mut().iter_mut().zip(eps_hat.iter()).zip(z.iter()) {
        let mu = inv_sqrt_alpha * (*x - eps_coeff * e);
        *x = mu + sigma * zz;
    }
    Ok(out)
}

/// The tuner target: alpha_bar_N = 1 / (1 + maxD) where maxD is the max over
/// (i, d) of the per-dim squared distance between each motion and its rank-k
/// neighbor, clamped below at `delta_min`. Returns (alpha_bar_N, maxD).
pub fn target_alpha_bar_with(
    ds: &MotionDataset,
    rank: usize,
    w: &DistanceWeights,
    delta_min: f64,
) -> Result<(f64, f64)> {
    if ds.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "nearest-neighbor tuning needs J >= 2 (got {})",
            ds.len()
        )));
    }
    let dim_weights = [1.0, 1.0, 1.0, w.w_r, w.w_r, w.w_r, w.w_r, w.w_r, w.w_r, w.w_g];
    let mut max_d = 0.0f64;
    for i in 0..ds.len() {
        let k_i = kth_nearest_index(ds, i, rank, w)?;
        let a = ds.motion(i).flat();
        let b = ds.motion(k_i).flat();
        for (ca, cb) in a.chunks_exact(STATE_DIM).zip(b.chunks_exact(STATE_DIM)) {
            for k in 0..STATE_DIM {
                let diff = ca[k] - cb[k];
                let d = dim_weights[k] * diff * diff;
                if d > max_d {
                    max_d = d;
                }
            }
        }
    }
    let clamped = if max_d < delta_min { delta_min } else { max_d };
    Ok((1.0 / (1.0 + clamped), clamped))
}

/// `target_alpha_bar_with` at the default clamp DELTA_MIN.
pub fn target_alpha_bar(
    ds: &MotionDataset,
    rank: usize,
    w: &DistanceWeights,
) -> Result<(f64, f64)> {
    target_alpha_bar_with(ds, rank, w, DELTA_MIN)
}

fn schedule_product(beta0: f64, gamma: f64, n_steps: usize) -> f64 {
    let mut prod = 1.0;
    for n in 1..=n_steps {
        prod *= 1.0 - beta0 - gamma * n as f64;
    }
    prod
}

/// Solves prod_{n=1..N} (1 - beta0 - gamma*n) = target for gamma by
/// bisection on [0, (1 - beta0)/N). The product is strictly decreasing in
/// gamma, so bisection is globally convergent; tolerance 1e-9 on the product.
pub fn solve_gamma(beta0: f64, n_steps: usize, target: f64) -> Result<f64> {
    const TOL: f64 = 1e-9;
    if n_steps == 0 {
        return Err(Error::InvalidInput(String::from(
            "schedule needs at least one step",
        )));
    }
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidInput(format!(
            "target alpha_bar_N must lie in (0, 1), got {target}"
        )));
    }
    let max_attainable = schedule_product(beta0, 0.0, n_steps);
    if target >= max_attainable {
        return Err(Error::UnreachableTarget {
            target,
            beta0,
            max_attainable,
        });
    }
    let mut lo = 0.0f64;
    let mut hi = (1.0 - beta0) / n_steps as f64 * (1.0 - 1e-12);
    for _ in 0..500 {
        let mid = 0.5 * (lo + hi);
        let p = schedule_product(beta0, mid, n_steps);
        if (p - target).abs() <= TOL {
            return Ok(mid);
        }
        if p > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // interval exhausted below f64 resolution; product cannot get closer
    let mid = 0.5 * (lo + hi);
    let p = schedule_product(beta0, mid, n_steps);
    if (p - target).abs() <= TOL {
        Ok(mid)
    } else {
        Err(Error::UnreachableTarget {
            target,
            beta0,
            max_attainable,
        })
    }
}

/// Full tuner: nearest-neighbor target -> gamma solve -> linear schedule.
pub fn tune(
    ds: &MotionDataset,
    rank: usize,
    beta0: f64,
    n_steps: usize,
    w: &DistanceWeights,
) -> Result<(NoiseSchedule, TuningResult)> {
    tune_with(ds, rank, beta0, n_steps, w, DELTA_MIN)
}

/// `tune` with an explicit clamp on the max squared NN distance.
pub fn tune_with(
    ds: &MotionDataset,
    rank: usize,
    beta0: f64,
    n_steps: usize,
    w: &DistanceWeights,
    delta_min: f64,
) -> Result<(NoiseSchedule, TuningResult)> {
    let (target, max_d) = target_alpha_bar_with(ds, rank, w, delta_min)?;
    let gamma = solve_gamma(beta0, n_steps, target)?;
    let schedule = NoiseSchedule::linear(beta0, gamma, n_steps)?;
    Ok((
        schedule,
        TuningResult {
            gamma,
            beta0,
            target_alpha_bar_n: target,
            max_nn_sq_distance: max_d,
            rank,
        },
    ))
}
