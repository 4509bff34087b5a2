//! R2-Diff inference: retrieve a training motion for the query scene, noise
//! it to step n_start, then denoise back to 0 with features re-extracted at
//! the current trajectory each iteration. Random initialization (plain
//! conditional DDPM sampling) is kept as a baseline.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::denoiser::DenoiserModel;
use crate::error::{Error, Result};
use crate::motion::{DistanceWeights, Motion, MotionDataset};
use crate::scene::{
    retrieve_cheat, retrieve_mse, retrieve_ste, ste_extract, RetrievalResult, SceneField,
};
use crate::schedule::{forward_noise, reverse_step, NoiseSchedule};

/// How the reverse process is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Unit Gaussian start; always denoises from n = N.
    Rand,
    /// Retrieve by spatially-aligned feature similarity.
    RetSte,
    /// Retrieve by whole-grid mean squared error.
    RetMse,
    /// Evaluation-only: retrieve by ground-truth motion distance.
    RetCheat,
}

impl InitMode {
    pub fn tag(&self) -> &'static str {
        match self {
            InitMode::Rand => "rand",
            InitMode::RetSte => "ret-ste",
            InitMode::RetMse => "ret-mse",
            InitMode::RetCheat => "ret-cheat",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "rand" => Ok(InitMode::Rand),
            "ret-ste" => Ok(InitMode::RetSte),
            "ret-mse" => Ok(InitMode::RetMse),
            "ret-cheat" => Ok(InitMode::RetCheat),
            other => Err(Error::InvalidInput(format!(
                "unknown inference mode '{other}' (expected rand, ret-ste, ret-mse, ret-cheat)"
            ))),
        }
    }
}

/// Inference settings; `mode = Rand` ignores `n_start` and always starts at
/// the schedule's last step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceConfig {
    pub mode: InitMode,
    pub n_start: usize,
    /// Cheat retrieval only: the ground-truth motion to match, plus weights.
    pub weights: DistanceWeights,
}

impl InferenceConfig {
    pub fn new(mode: InitMode, n_start: usize) -> Self {
        InferenceConfig {
            mode,
            n_start,
            weights: DistanceWeights::default(),
        }
    }
}

/// Everything `infer` produced: the final motion, the retrieval decision (if
/// any), and the initialization before refinement.
#[derive(Debug, Clone)]
pub struct InferenceOutcome {
    pub motion: Motion,
    pub retrieval: Option<RetrievalResult>,
    /// The motion the reverse process started from (retrieved motion before
    /// noising, or the Gaussian draw for `Rand`).
    pub initial: Motion,
}

/// Abstraction over the noise predictor so tests can swap in oracles.
pub trait NoisePredictor {
    fn predict(&self, mn: &Motion, query: &SceneField, n: usize) -> Result<Vec<f64>>;
}

impl NoisePredictor for DenoiserModel {
    fn predict(&self, mn: &Motion, query: &SceneField, n: usize) -> Result<Vec<f64>> {
        let feats = ste_extract(query, mn);
        self.predict_noise(mn, &feats, n)
    }
}

/// Run R2-Diff inference for one query scene. `gt_for_cheat` supplies the
/// ground-truth motion required by cheat retrieval and must be None for
/// every other mode's retrieval semantics to hold.
pub fn infer(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    query: &SceneField,
    ds: &MotionDataset,
    cfg: &InferenceConfig,
    gt_for_cheat: Option<&Motion>,
    rng: &mut impl Rng,
) -> Result<InferenceOutcome> {
    let n_total = schedule.len();
    let d_m = ds.motion_dim();
    let t_len = ds.meta.t_len;

    let (initial, retrieval, n_start) = match cfg.mode {
        InitMode::Rand => {
            let flat: Vec<f64> = (0..d_m)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            (Motion::from_flat(t_len, flat)?, None, n_total)
        }
        mode => {
            if cfg.n_start > n_total {
                return Err(Error::InvalidInput(format!(
                    "n_start {} exceeds schedule length {}",
                    cfg.n_start, n_total
                )));
            }
            let res = match mode {
                InitMode::RetSte => retrieve_ste(query, ds)?,
                InitMode::RetMse => retrieve_mse(query, ds)?,
                InitMode::RetCheat => {
                    let gt = gt_for_cheat.ok_or_else(|| {
                        Error::InvalidInput(String::from(
                            "cheat retrieval needs the episode's ground-truth motion",
                        ))
                    })?;
                    retrieve_cheat(gt, ds, &cfg.weights)?
                }
                InitMode::Rand => unreachable!(),
            };
            let retrieved = ds.motion(res.index).clone();
            (retrieved, Some(res), cfg.n_start)
        }
    };

    let mut m = if n_start == 0 {
        initial.clone()
    } else {
        let eps: Vec<f64> = (0..d_m)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        forward_noise(&initial, n_start, &eps, schedule)?
    };

    for n in (1..=n_start).rev() {
        let eps_hat = model.predict(&m, query, n)?;
        let z: Vec<f64> = if n == 1 {
            alloc::vec![0.0; d_m]
        } else {
            (0..d_m)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        m = reverse_step(&m, &eps_hat, n, schedule, &z)?;
        if !m.is_finite() {
            return Err(Error::InferenceDiverged { step: n });
        }
    }

    Ok(InferenceOutcome {
        motion: m,
        retrieval,
        initial,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ArchConfig;
    use crate::motion::{DatasetMeta, STATE_DIM};
    use alloc::vec::Vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn tiny_dataset(rng: &mut ChaCha12Rng, j: usize, t_len: usize) -> MotionDataset {
        let entries: Vec<(Motion, SceneField)> = (0..j)
            .map(|i| {
                let m = Motion::from_flat(
                    t_len,
                    (0..t_len * STATE_DIM)
                        .map(|_| rng.gen_range(-2.0..2.0))
                        .collect(),
                )
                .unwrap();
                let f = SceneField::constant(8, 8, 2, i as f64);
                (m, f)
            })
            .collect();
        MotionDataset {
            entries,
            meta: DatasetMeta {
                seed: 0,
                family_id: 0,
                t_len,
                height: 8,
                width: 8,
                channels: 2,
            },
        }
    }

    fn zero_model(rng: &mut ChaCha12Rng) -> DenoiserModel {
        // default init has a zero output head: predicts zero noise
        DenoiserModel::init(ArchConfig::tiny(2), rng).unwrap()
    }

    #[test]
    fn n_start_zero_is_identity_on_retrieved_motion() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let ds = tiny_dataset(&mut rng, 4, 5);
        let model = zero_model(&mut rng);
        let schedule = NoiseSchedule::linear(1e-3, 1e-5, 20).unwrap();
        let cfg = InferenceConfig::new(InitMode::RetMse, 0);
        let query = ds.field(2).clone();
        let out = infer(&model, &schedule, &query, &ds, &cfg, None, &mut rng).unwrap();
        assert_eq!(out.retrieval.as_ref().unwrap().index, 2);
        assert_eq!(out.motion.flat(), ds.motion(2).flat());
        assert_eq!(out.initial.flat(), ds.motion(2).flat());
    }

    #[test]
    fn inference_is_deterministic_under_seed() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let ds = tiny_dataset(&mut rng, 4, 5);
        let model = zero_model(&mut rng);
        let schedule = NoiseSchedule::linear(1e-3, 1e-5, 20).unwrap();
        let cfg = InferenceConfig::new(InitMode::RetSte, 10);
        let query = ds.field(1).clone();
        let mut r1 = ChaCha12Rng::seed_from_u64(99);
        let mut r2 = ChaCha12Rng::seed_from_u64(99);
        let a = infer(&model, &schedule, &query, &ds, &cfg, None, &mut r1).unwrap();
        let b = infer(&model, &schedule, &query, &ds, &cfg, None, &mut r2).unwrap();
        assert_eq!(a.motion.flat(), b.motion.flat());
    }

    /// Oracle predictor: returns the exact eps that was injected by
    /// forward_noise, reconstructed from the known clean motion.
    struct OraclePredictor {
        m0: Motion,
        schedule: NoiseSchedule,
    }

    impl NoisePredictor for OraclePredictor {
        fn predict(&self, mn: &Motion, _query: &SceneField, n: usize) -> Result<Vec<f64>> {
            // eps = (mn - sqrt(abar_n) m0) / sqrt(1 - abar_n)
            let ab = self.schedule.alpha_bar(n);
            let s = libm::sqrt(ab);
            let q = libm::sqrt(1.0 - ab);
            Ok(mn
                .flat()
                .iter()
                .zip(self.m0.flat())
                .map(|(x, x0)| (x - s * x0) / q)
                .collect())
        }
    }

    #[test]
    fn oracle_denoiser_recovers_retrieved_motion_at_n_start_1() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let ds = tiny_dataset(&mut rng, 4, 5);
        let schedule = NoiseSchedule::linear(1e-2, 1e-4, 50).unwrap();
        let query = ds.field(3).clone();
        let oracle = OraclePredictor {
            m0: ds.motion(3).clone(),
            schedule: schedule.clone(),
        };
        let cfg = InferenceConfig::new(InitMode::RetMse, 1);
        let out = infer(&oracle, &schedule, &query, &ds, &cfg, None, &mut rng).unwrap();
        assert_eq!(out.retrieval.as_ref().unwrap().index, 3);
        for (a, b) in out.motion.flat().iter().zip(ds.motion(3).flat()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn rand_mode_ignores_n_start_and_needs_no_retrieval() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let ds = tiny_dataset(&mut rng, 3, 4);
        let model = zero_model(&mut rng);
        let schedule = NoiseSchedule::linear(1e-3, 1e-5, 10).unwrap();
        let cfg = InferenceConfig::new(InitMode::Rand, 0);
        let query = ds.field(0).clone();
        let out = infer(&model, &schedule, &query, &ds, &cfg, None, &mut rng).unwrap();
        assert!(out.retrieval.is_none());
        assert!(out.motion.is_finite());
        // rand mode denoises from n = N even though cfg.n_start = 0
        assert_ne!(out.motion.flat(), out.initial.flat());
    }

    #[test]
    fn cheat_mode_requires_ground_truth() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let ds = tiny_dataset(&mut rng, 3, 4);
        let model = zero_model(&mut rng);
        let schedule = NoiseSchedule::linear(1e-3, 1e-5, 10).unwrap();
        let cfg = InferenceConfig::new(InitMode::RetCheat, 0);
        let query = ds.field(0).clone();
        assert!(infer(&model, &schedule, &query, &ds, &cfg, None, &mut rng).is_err());
        let gt = ds.motion(1).clone();
        let out = infer(&model, &schedule, &query, &ds, &cfg, Some(&gt), &mut rng).unwrap();
        assert_eq!(out.retrieval.unwrap().index, 1);
    }

    #[test]
    fn n_start_above_schedule_is_rejected() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let ds = tiny_dataset(&mut rng, 3, 4);
        let model = zero_model(&mut rng);
        let schedule = NoiseSchedule::linear(1e-3, 1e-5, 10).unwrap();
        let cfg = InferenceConfig::new(InitMode::RetSte, 11);
        let query = ds.field(0).clone();
        assert!(infer(&model, &schedule, &query, &ds, &cfg, None, &mut rng).is_err());
    }

    #[test]
    fn mode_tags_round_trip() {
        for mode in [
            InitMode::Rand,
            InitMode::RetSte,
            InitMode::RetMse,
            InitMode::RetCheat,
        ] {
            assert_eq!(InitMode::from_tag(mode.tag()).unwrap(), mode);
        }
        assert!(InitMode::from_tag("retrieve").is_err());
    }
}
