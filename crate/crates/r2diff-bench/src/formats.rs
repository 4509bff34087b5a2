//! Binary and text artifact formats: R2DF datasets, R2DM model checkpoints,
//! exported noise schedules, and the small CSV sidecars. All binary values
//! little-endian; floats stored as f32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use r2diff_core::{
    ArchConfig, DatasetMeta, DenoiserModel, Episode, Motion, MotionDataset, NoiseSchedule,
    PosteriorVariance, SceneField,
};

pub const DATASET_MAGIC: [u8; 4] = *b"R2DF";
pub const MODEL_MAGIC: [u8; 4] = *b"R2DM";
pub const FORMAT_VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f32s(w: &mut impl Write, vals: impl Iterator<Item = f64>) -> Result<()> {
    for v in vals {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn open_for_read(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn open_for_write(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

// ---- R2DF dataset container ---------------------------------------------

pub fn write_dataset(path: &Path, ds: &MotionDataset) -> Result<()> {
    let mut w = open_for_write(path)?;
    w.write_all(&DATASET_MAGIC)?;
    write_u32(&mut w, FORMAT_VERSION)?;
    write_u32(&mut w, ds.len() as u32)?;
    write_u32(&mut w, ds.meta.t_len as u32)?;
    write_u32(&mut w, ds.motion_dim() as u32)?;
    write_u32(&mut w, ds.meta.height as u32)?;
    write_u32(&mut w, ds.meta.width as u32)?;
    write_u32(&mut w, ds.meta.channels as u32)?;
    write_u64(&mut w, ds.meta.seed)?;
    write_u32(&mut w, ds.meta.family_id)?;
    for (m, f) in &ds.entries {
        write_f32s(&mut w, m.flat().iter().copied())?;
        write_f32s(&mut w, f.data().iter().copied())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<MotionDataset> {
    let mut r = open_for_read(path)?;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .with_context(|| format!("{} is truncated", path.display()))?;
    if magic != DATASET_MAGIC {
        bail!("{} is not an R2DF dataset (bad magic)", path.display());
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        bail!(
            "{}: unsupported dataset format version {version}",
            path.display()
        );
    }
    let j = read_u32(&mut r)? as usize;
    let t_len = read_u32(&mut r)? as usize;
    let d_m = read_u32(&mut r)? as usize;
    let height = read_u32(&mut r)? as usize;
    let width = read_u32(&mut r)? as usize;
    let channels = read_u32(&mut r)? as usize;
    let seed = read_u64(&mut r)?;
    let family_id = read_u32(&mut r)?;
    if d_m != t_len * 10 {
        bail!("{}: header d_m {d_m} != 10*T = {}", path.display(), t_len * 10);
    }
    let mut entries = Vec::with_capacity(j);
    for _ in 0..j {
        let motion = Motion::from_flat(t_len, read_f32s(&mut r, d_m)?)?;
        let field = SceneField::new(
            height,
            width,
            channels,
            read_f32s(&mut r, height * width * channels)?,
        )?;
        entries.push((motion, field));
    }
    Ok(MotionDataset {
        entries,
        meta: DatasetMeta {
            seed,
            family_id,
            t_len,
            height,
            width,
            channels,
        },
    })
}

// ---- R2DM model checkpoint ----------------------------------------------

pub fn write_model(path: &Path, model: &DenoiserModel) -> Result<()> {
    let cfg = model.config();
    let mut w = open_for_write(path)?;
    w.write_all(&MODEL_MAGIC)?;
    write_u32(&mut w, FORMAT_VERSION)?;
    for v in [
        cfg.feat_dim,
        cfg.hidden,
        cfg.blocks,
        cfg.heads,
        cfg.temb_dim,
        cfg.mlp_hidden,
    ] {
        write_u32(&mut w, v as u32)?;
    }
    let flat = model.to_flat();
    write_u64(&mut w, flat.len() as u64)?;
    write_f32s(&mut w, flat.into_iter())?;
    w.flush()?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<DenoiserModel> {
    let mut r = open_for_read(path)?;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .with_context(|| format!("{} is truncated", path.display()))?;
    if magic != MODEL_MAGIC {
        bail!("{} is not an R2DM checkpoint (bad magic)", path.display());
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        bail!(
            "{}: unsupported checkpoint format version {version}",
            path.display()
        );
    }
    let cfg = ArchConfig {
        feat_dim: read_u32(&mut r)? as usize,
        hidden: read_u32(&mut r)? as usize,
        blocks: read_u32(&mut r)? as usize,
        heads: read_u32(&mut r)? as usize,
        temb_dim: read_u32(&mut r)? as usize,
        mlp_hidden: read_u32(&mut r)? as usize,
    };
    let count = read_u64(&mut r)? as usize;
    if count != DenoiserModel::param_count(&cfg) {
        bail!(
            "{}: parameter count {count} does not match architecture (expected {})",
            path.display(),
            DenoiserModel::param_count(&cfg)
        );
    }
    let flat = read_f32s(&mut r, count)?;
    Ok(DenoiserModel::from_flat(cfg, &flat)?)
}

// ---- schedule text file ---------------------------------------------------

pub fn write_schedule(path: &Path, s: &NoiseSchedule) -> Result<()> {
    let mut w = open_for_write(path)?;
    writeln!(
        w,
        "{} {:.16e} {:.16e} {}",
        s.len(),
        s.beta0(),
        s.gamma(),
        s.posterior().tag()
    )?;
    for n in 1..=s.len() {
        writeln!(w, "{n} {:.16e} {:.16e}", s.beta(n), s.alpha_bar(n))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_schedule(path: &Path) -> Result<NoiseSchedule> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .with_context(|| format!("{} is empty", path.display()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 {
        bail!(
            "{}: malformed schedule header (want 'N beta0 gamma posterior_variance')",
            path.display()
        );
    }
    let n_steps: usize = fields[0].parse().context("bad N in schedule header")?;
    let beta0: f64 = fields[1].parse().context("bad beta0 in schedule header")?;
    let gamma: f64 = fields[2].parse().context("bad gamma in schedule header")?;
    let posterior = PosteriorVariance::from_tag(fields[3])?;
    let mut betas = Vec::with_capacity(n_steps);
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            bail!("{}: malformed schedule line {}", path.display(), i + 2);
        }
        let n: usize = fields[0].parse()?;
        if n != i + 1 {
            bail!("{}: schedule lines out of order at line {}", path.display(), i + 2);
        }
        betas.push(fields[1].parse::<f64>()?);
    }
    if betas.len() != n_steps {
        bail!(
            "{}: header says {n_steps} steps but found {}",
            path.display(),
            betas.len()
        );
    }
    Ok(NoiseSchedule::from_betas(betas, beta0, gamma, posterior)?)
}

// ---- CSV sidecars ----------------------------------------------------------

pub fn write_sidecar(path: &Path, episodes: &[Episode]) -> Result<()> {
    let mut w = open_for_write(path)?;
    writeln!(w, "id,family,seed,goal_u,goal_v,mode")?;
    for (i, ep) in episodes.iter().enumerate() {
        writeln!(
            w,
            "{i},{},{},{:.6},{:.6},{}",
            ep.family.kind.name(),
            ep.seed,
            ep.goal.0,
            ep.goal.1,
            ep.mode.tag()
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = open_for_write(path)?;
    writeln!(w, "step,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{i},{l:.9}")?;
    }
    w.flush()?;
    Ok(())
}
