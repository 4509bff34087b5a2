//! Procedural desk-scale manipulation episodes: a scene field with Gaussian
//! object blobs, a smooth ground-truth hand trajectory, and a binary success
//! predicate. Three families — reach, reach-grasp, and a bimodal obstacle
//! avoidance that exercises motion multimodality.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::motion::{DatasetMeta, Motion, MotionDataset, STATE_DIM};
use crate::scene::SceneField;

/// Channel layout of generated scenes.
pub const CH_BACKGROUND: usize = 0;
pub const CH_GOAL: usize = 1;
pub const CH_WALL: usize = 2;
pub const CH_DISTRACTOR: usize = 3;
/// Goal-displacement channels: at pixel (u, v) they hold (goal_u − u)/W and
/// (goal_v − v)/H. They stand in for the global receptive field of the
/// paper's U-Net features ("retains the precise position information"): a
/// feature sampled anywhere in the image reveals the offset to the goal,
/// which is what makes denoising goal-seeking at high noise steps where the
/// trajectory's own samples never pass near the goal blob.
pub const CH_GOAL_DU: usize = 4;
pub const CH_GOAL_DV: usize = 5;
/// Wall-displacement channels, same encoding as the goal pair; zero for
/// families without a wall.
pub const CH_WALL_DU: usize = 6;
pub const CH_WALL_DV: usize = 7;
/// Minimum channel count a generated scene needs.
pub const MIN_CHANNELS: usize = 8;

/// Lateral half-amplitude of the bimodal detour, in grid units. Chosen so
/// the detour clears the wall blob (radius `wall_radius` = 2) with margin:
/// at the path midpoint the offset is exactly 4.
const AVOID_AMPLITUDE: f64 = 4.0;
/// Minimum straight-line start-to-goal separation; guarantees the detour
/// never re-enters the wall radius and stays inside the grid.
const MIN_SEPARATION: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FamilyKind {
    Reach,
    ReachGrasp,
    BimodalAvoid,
}

impl FamilyKind {
    pub fn id(&self) -> u32 {
        match self {
            FamilyKind::Reach => 0,
            FamilyKind::ReachGrasp => 1,
            FamilyKind::BimodalAvoid => 2,
        }
    }

    pub fn from_id(id: u32) -> Result<Self> {
        match id {
            0 => Ok(FamilyKind::Reach),
            1 => Ok(FamilyKind::ReachGrasp),
            2 => Ok(FamilyKind::BimodalAvoid),
            other => Err(Error::InvalidInput(format!("unknown family id {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FamilyKind::Reach => "reach",
            FamilyKind::ReachGrasp => "reach-grasp",
            FamilyKind::BimodalAvoid => "bimodal-avoid",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "reach" => Ok(FamilyKind::Reach),
            "reach-grasp" => Ok(FamilyKind::ReachGrasp),
            "bimodal-avoid" => Ok(FamilyKind::BimodalAvoid),
            other => Err(Error::InvalidInput(format!(
                "unknown task family '{other}' (expected reach, reach-grasp, or bimodal-avoid)"
            ))),
        }
    }

    pub fn all() -> [FamilyKind; 3] {
        [
            FamilyKind::Reach,
            FamilyKind::ReachGrasp,
            FamilyKind::BimodalAvoid,
        ]
    }
}

/// Geometry and tolerance parameters of a task family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskFamily {
    pub kind: FamilyKind,
    /// Gaussian blob standard deviation for compact objects (wall,
    /// distractor), grid units.
    pub blob_sigma: f64,
    /// Standard deviation of the goal blob. Deliberately wide: the goal
    /// channel then varies over the whole grid, so features sampled along a
    /// trajectory carry enough signal to locate the goal.
    pub goal_sigma: f64,
    /// Placement margin from grid borders, grid units.
    pub margin: f64,
    /// Hard radius of the wall obstacle (bimodal-avoid only).
    pub wall_radius: f64,
    /// Peak lateral nuisance-wobble amplitude, grid units. Wobble vanishes
    /// at both endpoints, so it never moves the final position; it exists so
    /// full-trajectory motion distance is not determined by the goal alone
    /// and nearest-neighbor retrieval stays fallible.
    pub wobble_amp: f64,
    /// Peak height (z) nuisance-wobble amplitude.
    pub z_wobble_amp: f64,
    /// Uniform jitter added to the detour amplitude (bimodal-avoid only).
    pub detour_jitter: f64,
    /// Success tolerance on final position, grid units.
    pub tau_pos: f64,
    /// Success threshold on final grasp (reach-grasp only).
    pub tau_grasp: f64,
}

impl TaskFamily {
    pub fn new(kind: FamilyKind) -> Self {
        TaskFamily {
            kind,
            blob_sigma: 1.2,
            goal_sigma: 6.0,
            margin: 3.0,
            wall_radius: 2.0,
            // bimodal wobble is capped so the detour still clears the wall
            wobble_amp: if kind == FamilyKind::BimodalAvoid { 1.0 } else { 5.0 },
            z_wobble_amp: 6.0,
            detour_jitter: 1.5,
            tau_pos: 1.5,
            tau_grasp: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau_pos <= 0.0 {
            return Err(Error::InvalidConfig(String::from("tau_pos must be > 0")));
        }
        if self.blob_sigma <= 0.0
            || self.goal_sigma <= 0.0
            || self.margin < 0.0
            || self.wall_radius <= 0.0
        {
            return Err(Error::InvalidConfig(String::from(
                "blob_sigma, goal_sigma and wall_radius must be > 0, margin >= 0",
            )));
        }
        if self.wobble_amp < 0.0 || self.z_wobble_amp < 0.0 || self.detour_jitter < 0.0 {
            return Err(Error::InvalidConfig(String::from(
                "wobble amplitudes must be >= 0",
            )));
        }
        if self.kind == FamilyKind::BimodalAvoid && self.wobble_amp > 1.0 {
            return Err(Error::InvalidConfig(String::from(
                "bimodal-avoid wobble_amp must be <= 1 to keep wall clearance",
            )));
        }
        Ok(())
    }
}

/// Which side of the wall the ground truth takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Direct,
    Left,
    Right,
}

impl Mode {
    pub fn tag(&self) -> &'static str {
        match self {
            Mode::Direct => "direct",
            Mode::Left => "left",
            Mode::Right => "right",
        }
    }
}

/// One held-out task instance with its success-predicate parameters.
#[derive(Debug, Clone)]
pub struct Episode {
    pub scene: SceneField,
    pub gt_motion: Motion,
    pub goal: (f64, f64),
    /// Wall blob center; present only for bimodal-avoid.
    pub wall: Option<(f64, f64)>,
    pub family: TaskFamily,
    pub seed: u64,
    pub mode: Mode,
}

/// Smoothstep cubic ease 3s² − 2s³.
fn ease(s: f64) -> f64 {
    s * s * (3.0 - 2.0 * s)
}

fn add_blob(scene: &mut SceneField, ch: usize, cu: f64, cv: f64, sigma: f64) {
    let inv = 1.0 / (2.0 * sigma * sigma);
    for row in 0..scene.height() {
        for col in 0..scene.width() {
            let du = col as f64 - cu;
            let dv = row as f64 - cv;
            *scene.at_mut(row, col, ch) += libm::exp(-(du * du + dv * dv) * inv);
        }
    }
}

struct EpisodeDraw {
    scene: SceneField,
    motion: Motion,
    goal: (f64, f64),
    wall: Option<(f64, f64)>,
    mode: Mode,
}

fn generate_episode(
    family: &TaskFamily,
    t_len: usize,
    height: usize,
    width: usize,
    channels: usize,
    seed: u64,
) -> Result<EpisodeDraw> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let h = height as f64;
    let w = width as f64;
    let m = family.margin;

    let start = (w / 2.0, h - 2.0);
    // lateral detours reach AVOID_AMPLITUDE off-axis, so keep the goal far
    // enough from the side borders and high enough for MIN_SEPARATION
    let lateral_max = if family.kind == FamilyKind::BimodalAvoid {
        AVOID_AMPLITUDE + family.detour_jitter
    } else {
        0.0
    };
    let u_lo = m + lateral_max;
    let u_hi = w - 1.0 - m - lateral_max;
    let v_lo = m;
    let v_hi = start.1 - MIN_SEPARATION;
    if !(u_lo < u_hi && v_lo < v_hi) || channels < MIN_CHANNELS {
        return Err(Error::InvalidConfig(format!(
            "grid {height}x{width}x{channels} too small for family '{}' \
             (need margins {m}+{lateral_max} horizontally, {MIN_SEPARATION} start-goal \
             separation, and at least {MIN_CHANNELS} channels)",
            family.kind.name()
        )));
    }
    let goal = (rng.gen_range(u_lo..u_hi), rng.gen_range(v_lo..v_hi));

    let mode = match family.kind {
        FamilyKind::BimodalAvoid => {
            if rng.gen_bool(0.5) {
                Mode::Left
            } else {
                Mode::Right
            }
        }
        _ => Mode::Direct,
    };

    // wall sits on the straight start-goal line at its midpoint
    let wall = match family.kind {
        FamilyKind::BimodalAvoid => Some((
            0.5 * (start.0 + goal.0),
            0.5 * (start.1 + goal.1),
        )),
        _ => None,
    };
    let distractor = (rng.gen_range(m..w - 1.0 - m), rng.gen_range(m..v_hi));

    // render the scene: constant background plus one Gaussian blob per object
    let mut scene = SceneField::constant(height, width, channels, 0.0);
    for row in 0..height {
        for col in 0..width {
            *scene.at_mut(row, col, CH_BACKGROUND) = 1.0;
        }
    }
    add_blob(&mut scene, CH_GOAL, goal.0, goal.1, family.goal_sigma);
    if let Some((wu, wv)) = wall {
        add_blob(&mut scene, CH_WALL, wu, wv, family.blob_sigma);
    }
    add_blob(
        &mut scene,
        CH_DISTRACTOR,
        distractor.0,
        distractor.1,
        family.blob_sigma,
    );
    for row in 0..height {
        for col in 0..width {
            *scene.at_mut(row, col, CH_GOAL_DU) = (goal.0 - col as f64) / w;
            *scene.at_mut(row, col, CH_GOAL_DV) = (goal.1 - row as f64) / h;
            if let Some((wu, wv)) = wall {
                *scene.at_mut(row, col, CH_WALL_DU) = (wu - col as f64) / w;
                *scene.at_mut(row, col, CH_WALL_DV) = (wv - row as f64) / h;
            }
        }
    }

    // smooth rotation wobble: small per-dim sinusoids on top of identity 6D
    let rot_base = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    let rot_phase: [f64; 6] = core::array::from_fn(|_| rng.gen_range(0.0..core::f64::consts::TAU));
    let rot_amp = 0.05;

    let dir = (goal.0 - start.0, goal.1 - start.1);
    let dist = libm::sqrt(dir.0 * dir.0 + dir.1 * dir.1);
    let unit = (dir.0 / dist, dir.1 / dist);
    // perpendicular pointing to the hand's left when walking start -> goal
    let perp = match mode {
        Mode::Left => (unit.1, -unit.0),
        Mode::Right => (-unit.1, unit.0),
        Mode::Direct => (0.0, 0.0),
    };
    let wobble_perp = (unit.1, -unit.0);

    let lateral = match family.kind {
        FamilyKind::BimodalAvoid => {
            AVOID_AMPLITUDE + rng.gen_range(0.0..=family.detour_jitter)
        }
        _ => 0.0,
    };
    // per-episode nuisance: two lateral harmonics plus one height harmonic,
    // all under a sin(pi*e) envelope so endpoints are untouched
    let tau = core::f64::consts::TAU;
    let wob = (
        rng.gen_range(0.0..=family.wobble_amp * 0.5),
        rng.gen_range(0.0..tau),
        rng.gen_range(0.0..=family.wobble_amp * 0.5),
        rng.gen_range(0.0..tau),
    );
    let z_wob = (rng.gen_range(0.0..=family.z_wobble_amp), rng.gen_range(0.0..tau));

    let mut flat = vec![0.0; t_len * STATE_DIM];
    for t in 0..t_len {
        let s = if t_len == 1 {
            1.0
        } else {
            t as f64 / (t_len - 1) as f64
        };
        let e = ease(s);
        let env = libm::sin(core::f64::consts::PI * e);
        let off = lateral * env;
        let nuis = env * (wob.0 * libm::sin(tau * e + wob.1) + wob.2 * libm::sin(2.0 * tau * e + wob.3));
        let u = start.0 + dir.0 * e + perp.0 * off + wobble_perp.0 * nuis;
        let v = start.1 + dir.1 * e + perp.1 * off + wobble_perp.1 * nuis;
        // descends as the hand approaches the goal, plus height nuisance
        let z = 1.0 - 0.8 * e * e + env * z_wob.0 * libm::sin(tau * e + z_wob.1);
        let du = u - goal.0;
        let dv = v - goal.1;
        let arrived = libm::sqrt(du * du + dv * dv) <= family.tau_pos;
        let grasp = match family.kind {
            FamilyKind::ReachGrasp if arrived => 1.0,
            _ => 0.0,
        };
        let row = &mut flat[t * STATE_DIM..(t + 1) * STATE_DIM];
        row[0] = u;
        row[1] = v;
        row[2] = z;
        for k in 0..6 {
            row[3 + k] = rot_base[k]
                + rot_amp * libm::sin(core::f64::consts::TAU * e + rot_phase[k]);
        }
        row[9] = grasp;
    }
    let motion = Motion::from_flat(t_len, flat)?;

    Ok(EpisodeDraw {
        scene,
        motion,
        goal,
        wall,
        mode,
    })
}

/// Generate a training dataset of `j_train` pairs plus `n_test` held-out
/// episodes. Fully deterministic under `seed`: episode i draws from its own
/// stream seeded by `derive_seed(seed, i)`, so generation order (or
/// parallelism) cannot change the output.
pub fn generate_dataset(
    family: &TaskFamily,
    j_train: usize,
    n_test: usize,
    t_len: usize,
    grid: (usize, usize, usize),
    seed: u64,
) -> Result<(MotionDataset, Vec<Episode>)> {
    family.validate()?;
    if j_train < 2 {
        return Err(Error::InvalidInput(format!(
            "training set needs J >= 2, got {j_train}"
        )));
    }
    if t_len == 0 {
        return Err(Error::InvalidInput(String::from("T must be >= 1")));
    }
    let (height, width, channels) = grid;

    let mut entries = Vec::with_capacity(j_train);
    for i in 0..j_train {
        let ep_seed = derive_seed(seed, i as u64);
        let draw = generate_episode(family, t_len, height, width, channels, ep_seed)?;
        entries.push((draw.motion, draw.scene));
    }
    let mut episodes = Vec::with_capacity(n_test);
    for i in 0..n_test {
        let ep_seed = derive_seed(seed, (j_train + i) as u64);
        let draw = generate_episode(family, t_len, height, width, channels, ep_seed)?;
        episodes.push(Episode {
            scene: draw.scene,
            gt_motion: draw.motion,
            goal: draw.goal,
            wall: draw.wall,
            family: *family,
            seed: ep_seed,
            mode: draw.mode,
        });
    }

    let ds = MotionDataset {
        entries,
        meta: DatasetMeta {
            seed,
            family_id: family.kind.id(),
            t_len,
            height,
            width,
            channels,
        },
    };
    Ok((ds, episodes))
}

/// Binary success predicate: final position within tau_pos of the goal,
/// final grasp closed for reach-grasp, and no trajectory point inside the
/// wall radius for bimodal-avoid.
pub fn evaluate_success(m: &Motion, ep: &Episode) -> Result<bool> {
    if m.t_len() != ep.gt_motion.t_len() {
        return Err(Error::InvalidInput(format!(
            "motion has {} timesteps, episode expects {}",
            m.t_len(),
            ep.gt_motion.t_len()
        )));
    }
    let (u, v) = m.uv(m.t_len() - 1);
    let du = u - ep.goal.0;
    let dv = v - ep.goal.1;
    if libm::sqrt(du * du + dv * dv) > ep.family.tau_pos {
        return Ok(false);
    }
    if ep.family.kind == FamilyKind::ReachGrasp {
        let g = m.flat()[m.dim() - 1];
        if g < ep.family.tau_grasp {
            return Ok(false);
        }
    }
    if let Some((wu, wv)) = ep.wall {
        for t in 0..m.t_len() {
            let (u, v) = m.uv(t);
            let du = u - wu;
            let dv = v - wv;
            if libm::sqrt(du * du + dv * dv) <= ep.family.wall_radius {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Final-position error of a predicted motion against the episode goal.
pub fn final_position_error(m: &Motion, ep: &Episode) -> f64 {
    let (u, v) = m.uv(m.t_len() - 1);
    let du = u - ep.goal.0;
    let dv = v - ep.goal.1;
    libm::sqrt(du * du + dv * dv)
}

/// Minimum distance of any trajectory point to the episode's wall center;
/// `None` for families without a wall. A value ≤ `wall_radius` means the
/// motion collides.
pub fn wall_clearance(m: &Motion, ep: &Episode) -> Option<f64> {
    let (wu, wv) = ep.wall?;
    let mut best = f64::INFINITY;
    for t in 0..m.t_len() {
        let (u, v) = m.uv(t);
        let du = u - wu;
        let dv = v - wv;
        let d = libm::sqrt(du * du + dv * dv);
        if d < best {
            best = d;
        }
    }
    Some(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::ste_extract;

    const GRID: (usize, usize, usize) = (32, 32, 8);

    fn gen(kind: FamilyKind, j: usize, n: usize, seed: u64) -> (MotionDataset, Vec<Episode>) {
        generate_dataset(&TaskFamily::new(kind), j, n, 100, GRID, seed).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        for kind in FamilyKind::all() {
            let (ds1, eps1) = gen(kind, 4, 3, 7);
            let (ds2, eps2) = gen(kind, 4, 3, 7);
            for i in 0..ds1.len() {
                assert_eq!(ds1.motion(i).flat(), ds2.motion(i).flat());
                assert_eq!(ds1.field(i).data(), ds2.field(i).data());
            }
            for (a, b) in eps1.iter().zip(&eps2) {
                assert_eq!(a.gt_motion.flat(), b.gt_motion.flat());
                assert_eq!(a.scene.data(), b.scene.data());
                assert_eq!(a.mode, b.mode);
            }
        }
    }

    #[test]
    fn training_prefix_is_stable_under_j() {
        // episode streams are keyed by index, so growing J keeps the prefix
        let (small, _) = gen(FamilyKind::Reach, 4, 0, 11);
        let (large, _) = gen(FamilyKind::Reach, 8, 0, 11);
        for i in 0..4 {
            assert_eq!(small.motion(i).flat(), large.motion(i).flat());
        }
    }

    #[test]
    fn ground_truth_always_succeeds() {
        for kind in FamilyKind::all() {
            let (_, eps) = gen(kind, 2, 40, 3);
            for ep in &eps {
                assert!(
                    evaluate_success(&ep.gt_motion, ep).unwrap(),
                    "gt failed for {} seed {}",
                    kind.name(),
                    ep.seed
                );
                assert!(final_position_error(&ep.gt_motion, ep) < 1e-9);
            }
        }
    }

    #[test]
    fn gt_stays_in_bounds_with_valid_grasp() {
        for kind in FamilyKind::all() {
            let (ds, eps) = gen(kind, 30, 10, 5);
            let motions = ds
                .entries
                .iter()
                .map(|(m, _)| m)
                .chain(eps.iter().map(|e| &e.gt_motion));
            for m in motions {
                for t in 0..m.t_len() {
                    let st = m.state(t);
                    assert!((0.0..32.0).contains(&st.position[0]));
                    assert!((0.0..32.0).contains(&st.position[1]));
                    assert!((0.0..=1.0).contains(&st.grasp));
                }
            }
        }
    }

    #[test]
    fn shifted_gt_fails() {
        let (_, eps) = gen(FamilyKind::Reach, 2, 5, 13);
        for ep in &eps {
            let mut bad = ep.gt_motion.clone();
            // shift every u by 2 * tau_pos so the final position misses
            for t in 0..bad.t_len() {
                bad.flat_mut()[t * STATE_DIM] += 2.0 * ep.family.tau_pos;
            }
            assert!(!evaluate_success(&bad, ep).unwrap());
        }
    }

    #[test]
    fn reach_ignores_grasp_but_reach_grasp_requires_it() {
        let (_, eps) = gen(FamilyKind::Reach, 2, 3, 17);
        for ep in &eps {
            let mut zeroed = ep.gt_motion.clone();
            for t in 0..zeroed.t_len() {
                zeroed.flat_mut()[t * STATE_DIM + 9] = 0.0;
            }
            assert!(evaluate_success(&zeroed, ep).unwrap());
        }
        let (_, eps) = gen(FamilyKind::ReachGrasp, 2, 3, 17);
        for ep in &eps {
            assert!(ep.gt_motion.flat()[ep.gt_motion.dim() - 1] >= 0.5);
            let mut open = ep.gt_motion.clone();
            for t in 0..open.t_len() {
                open.flat_mut()[t * STATE_DIM + 9] = 0.0;
            }
            assert!(!evaluate_success(&open, ep).unwrap());
        }
    }

    #[test]
    fn wall_collision_fails() {
        let (_, eps) = gen(FamilyKind::BimodalAvoid, 2, 5, 19);
        for ep in &eps {
            let (wu, wv) = ep.wall.unwrap();
            let mut bad = ep.gt_motion.clone();
            // park the midpoint sample on the wall center
            let t = bad.t_len() / 2;
            bad.flat_mut()[t * STATE_DIM] = wu;
            bad.flat_mut()[t * STATE_DIM + 1] = wv;
            assert!(!evaluate_success(&bad, ep).unwrap());
        }
    }

    #[test]
    fn bimodal_produces_both_modes() {
        let (_, eps) = gen(FamilyKind::BimodalAvoid, 2, 200, 23);
        let left = eps.iter().filter(|e| e.mode == Mode::Left).count();
        let right = eps.iter().filter(|e| e.mode == Mode::Right).count();
        assert_eq!(left + right, 200);
        assert!(left >= 60, "left mode underrepresented: {left}/200");
        assert!(right >= 60, "right mode underrepresented: {right}/200");
    }

    #[test]
    fn t_mismatch_is_rejected() {
        let (_, eps) = gen(FamilyKind::Reach, 2, 1, 29);
        let short = Motion::zeros(50);
        assert!(evaluate_success(&short, &eps[0]).is_err());
    }

    #[test]
    fn scene_motion_consistency() {
        // goal channel sampled at the trajectory's end exceeds its start value
        for kind in FamilyKind::all() {
            let (_, eps) = gen(kind, 2, 10, 31);
            for ep in &eps {
                let feats = ste_extract(&ep.scene, &ep.gt_motion);
                let first = feats.row(0)[CH_GOAL];
                let last = feats.row(ep.gt_motion.t_len() - 1)[CH_GOAL];
                assert!(
                    last > first,
                    "goal channel not peaked at trajectory end ({first} vs {last})"
                );
            }
        }
    }

    #[test]
    fn small_grid_is_rejected() {
        let family = TaskFamily::new(FamilyKind::BimodalAvoid);
        assert!(generate_dataset(&family, 2, 0, 10, (12, 12, 4), 1).is_err());
        let family = TaskFamily::new(FamilyKind::Reach);
        assert!(generate_dataset(&family, 2, 0, 10, (32, 32, 3), 1).is_err());
    }

    #[test]
    fn family_round_trips() {
        for kind in FamilyKind::all() {
            assert_eq!(FamilyKind::from_id(kind.id()).unwrap(), kind);
            assert_eq!(FamilyKind::from_name(kind.name()).unwrap(), kind);
        }
        assert!(FamilyKind::from_name("grasp").is_err());
        assert!(FamilyKind::from_id(9).is_err());
    }
}
