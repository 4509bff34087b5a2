//! `r2diff` command-line interface: dataset generation, schedule tuning,
//! training, single-condition evaluation, experiment sweeps, and artifact
//! inspection. Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use r2diff_core::{
    tune, ArchConfig, DenoiserModel, DistanceWeights, FamilyKind, InitMode, NoiseSchedule,
    OptimizerKind, PosteriorVariance, TaskFamily, TrainConfig,
};
use r2diff_bench::report::{ExperimentReport, ReportRow, CSV_HEADER};
use r2diff_bench::{config, formats, runner};

#[derive(Parser)]
#[command(
    name = "r2diff",
    about = "Retrieval-and-refinement diffusion benchmark harness",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic task dataset (R2DF) and its episode sidecar.
    Gen {
        /// Task family: reach | reach-grasp | bimodal-avoid
        #[arg(long)]
        family: String,
        /// Training set size J
        #[arg(long, default_value_t = 512)]
        j_train: usize,
        /// Held-out episode count (sidecar only; episodes are regenerable)
        #[arg(long, default_value_t = 128)]
        episodes: usize,
        /// Trajectory length T
        #[arg(long, default_value_t = 100)]
        t_len: usize,
        /// Scene grid as HxWxC
        #[arg(long, default_value = "32x32x8")]
        grid: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Episode metadata CSV (id,family,seed,goal_u,goal_v,mode)
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
    /// Tune a noise schedule to the dataset's nearest-neighbor distances.
    Tune {
        #[arg(long)]
        dataset: PathBuf,
        /// Neighbor rank k calibrating the target distance
        #[arg(long, default_value_t = 1)]
        rank: usize,
        #[arg(long, default_value_t = 1e-4)]
        beta0: f64,
        /// Schedule length N
        #[arg(long, default_value_t = 1000)]
        n_steps: usize,
        #[arg(long, default_value_t = 0.01)]
        w_r: f64,
        #[arg(long, default_value_t = 0.0)]
        w_g: f64,
        /// Posterior variance convention: ddpm | paper
        #[arg(long, default_value = "ddpm")]
        posterior: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export the basic (untuned) DDPM baseline schedule.
    BasicSchedule {
        #[arg(long, default_value_t = 1e-4)]
        lo: f64,
        #[arg(long, default_value_t = 0.02)]
        hi: f64,
        #[arg(long, default_value_t = 1000)]
        n_steps: usize,
        /// Posterior variance convention: ddpm | paper
        #[arg(long, default_value = "ddpm")]
        posterior: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the denoiser on a dataset under a schedule.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Final learning rate (cosine decay); defaults to --lr (constant)
        #[arg(long)]
        lr_final: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        grad_clip: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        hidden: usize,
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 64)]
        temb: usize,
        #[arg(long, default_value_t = 128)]
        mlp_hidden: usize,
        #[arg(long)]
        out: PathBuf,
        /// Loss curve CSV (step,loss)
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Evaluate a single condition and print one report row.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        schedule: PathBuf,
        /// rand | ret-ste | ret-mse | ret-cheat
        #[arg(long, default_value = "ret-ste")]
        mode: String,
        #[arg(long, default_value_t = 500)]
        n_start: usize,
        #[arg(long, default_value_t = 128)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.01)]
        w_r: f64,
        #[arg(long, default_value_t = 0.0)]
        w_g: f64,
        /// Rank recorded in the report row
        #[arg(long, default_value_t = 1)]
        rank: usize,
    },
    /// Run a condition grid from a TOML config and write report artifacts.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Print the header of a dataset, checkpoint, or schedule file.
    Inspect {
        #[arg(long)]
        file: PathBuf,
    },
}

fn parse_grid(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 3 {
        bail!("grid must be HxWxC, e.g. 32x32x8 (got '{s}')");
    }
    Ok((
        parts[0].parse().context("bad grid height")?,
        parts[1].parse().context("bad grid width")?,
        parts[2].parse().context("bad grid channels")?,
    ))
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Gen {
            family,
            j_train,
            episodes,
            t_len,
            grid,
            seed,
            out,
            sidecar,
        } => {
            let kind = FamilyKind::from_name(&family)?;
            let fam = TaskFamily::new(kind);
            let grid = parse_grid(&grid)?;
            let (ds, eps) =
                r2diff_core::generate_dataset(&fam, j_train, episodes, t_len, grid, seed)?;
            formats::write_dataset(&out, &ds)?;
            if let Some(sc) = sidecar {
                formats::write_sidecar(&sc, &eps)?;
            }
            println!(
                "wrote {} ({} motions, T={}, grid {}x{}x{}, seed {})",
                out.display(),
                ds.len(),
                t_len,
                grid.0,
                grid.1,
                grid.2,
                seed
            );
        }
        Cmd::Tune {
            dataset,
            rank,
            beta0,
            n_steps,
            w_r,
            w_g,
            posterior,
            out,
        } => {
            let ds = formats::read_dataset(&dataset)?;
            let w = DistanceWeights::new(w_r, w_g)?;
            let posterior = PosteriorVariance::from_tag(&posterior)?;
            let (schedule, result) = tune(&ds, rank, beta0, n_steps, &w)?;
            let schedule = schedule.with_posterior(posterior);
            println!("rank = {}", result.rank);
            println!("max_nn_sq_distance = {:.12}", result.max_nn_sq_distance);
            println!("target_alpha_bar_N = {:.12}", result.target_alpha_bar_n);
            println!("beta0 = {:.12}", result.beta0);
            println!("gamma = {:.12e}", result.gamma);
            println!("alpha_bar_N = {:.12}", schedule.alpha_bar(n_steps));
            if let Some(out) = out {
                formats::write_schedule(&out, &schedule)?;
                println!("wrote {}", out.display());
            }
        }
        Cmd::BasicSchedule {
            lo,
            hi,
            n_steps,
            posterior,
            out,
        } => {
            let posterior = PosteriorVariance::from_tag(&posterior)?;
            let schedule = NoiseSchedule::basic(lo, hi, n_steps)?.with_posterior(posterior);
            formats::write_schedule(&out, &schedule)?;
            println!(
                "wrote {} (N={}, alpha_bar_N={:.3e})",
                out.display(),
                n_steps,
                schedule.alpha_bar(n_steps)
            );
        }
        Cmd::Train {
            dataset,
            schedule,
            steps,
            batch,
            lr,
            lr_final,
            grad_clip,
            seed,
            hidden,
            blocks,
            heads,
            temb,
            mlp_hidden,
            out,
            loss_csv,
        } => {
            let ds = formats::read_dataset(&dataset)?;
            let s = formats::read_schedule(&schedule)?;
            let arch = ArchConfig {
                feat_dim: ds.meta.channels,
                hidden,
                blocks,
                heads,
                temb_dim: temb,
                mlp_hidden,
            };
            let cfg = TrainConfig {
                steps,
                batch_size: batch,
                learning_rate: lr,
                lr_final: lr_final.unwrap_or(lr),
                seed,
                optimizer: OptimizerKind::Adam,
                grad_clip,
            };
            let started = std::time::Instant::now();
            let (model, losses) = r2diff_core::denoiser::train(&ds, &s, arch, &cfg)?;
            formats::write_model(&out, &model)?;
            if let Some(lc) = loss_csv {
                formats::write_loss_csv(&lc, &losses)?;
            }
            let last = losses.last().copied().unwrap_or(f64::NAN);
            println!(
                "wrote {} ({} params, {} steps, final loss {:.4}, {:.1}s)",
                out.display(),
                DenoiserModel::param_count(&arch),
                steps,
                last,
                started.elapsed().as_secs_f64()
            );
        }
        Cmd::Eval {
            dataset,
            model,
            schedule,
            mode,
            n_start,
            episodes,
            seed,
            w_r,
            w_g,
            rank,
        } => {
            let ds = formats::read_dataset(&dataset)?;
            let m = formats::read_model(&model)?;
            let s = formats::read_schedule(&schedule)?;
            let mode = InitMode::from_tag(&mode)?;
            let w = DistanceWeights::new(w_r, w_g)?;
            let eps = runner::episodes_for_dataset(&ds, episodes)?;
            let outcomes =
                runner::evaluate_condition(&m, &s, &ds, &eps, mode, n_start, w, seed)?;
            let row = ReportRow {
                condition_id: String::from("eval"),
                mode: mode.tag().into(),
                schedule: schedule
                    .file_stem()
                    .map(|x| x.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                rank,
                n_start: if mode == InitMode::Rand { s.len() } else { n_start },
                n_steps: s.len(),
                family: FamilyKind::from_id(ds.meta.family_id)?.name().into(),
                success_rate: runner::success_rate(&outcomes),
                mean_final_err: runner::mean_final_err(&outcomes),
                episodes: outcomes.len(),
            };
            println!("{CSV_HEADER}");
            println!("{}", row.to_csv());
            let walled: Vec<f64> = outcomes.iter().filter_map(|o| o.wall_clearance).collect();
            if !walled.is_empty() {
                let radius = eps[0].family.wall_radius;
                let hits = walled.iter().filter(|&&c| c <= radius).count();
                eprintln!(
                    "diagnostic: {}/{} episodes collide with the wall",
                    hits,
                    walled.len()
                );
            }
        }
        Cmd::Sweep { config, out_dir } => {
            let cfg = config::ExperimentConfig::load(&config)?;
            let started = std::time::Instant::now();
            let report: ExperimentReport = runner::run_and_write(&cfg, &out_dir)?;
            print!("{}", report.summary());
            eprintln!(
                "sweep '{}': {} rows in {:.1}s -> {}",
                cfg.experiment.name,
                report.rows.len(),
                started.elapsed().as_secs_f64(),
                out_dir.display()
            );
        }
        Cmd::Inspect { file } => {
            inspect(&file)?;
        }
    }
    Ok(())
}

fn inspect(path: &std::path::Path) -> Result<()> {
    let mut head = [0u8; 4];
    {
        use std::io::Read;
        let mut f = std::fs::File::open(path)
            .with_context(|| format!("cannot open {}", path.display()))?;
        let n = f.read(&mut head)?;
        if n < 4 {
            bail!("{}: file too short to identify", path.display());
        }
    }
    if head == formats::DATASET_MAGIC {
        let ds = formats::read_dataset(path)?;
        println!("R2DF dataset {}", path.display());
        println!("  J = {}", ds.len());
        println!("  T = {} (d_m = {})", ds.meta.t_len, ds.motion_dim());
        println!(
            "  grid = {}x{}x{}",
            ds.meta.height, ds.meta.width, ds.meta.channels
        );
        println!("  seed = {}", ds.meta.seed);
        println!(
            "  family = {} ({})",
            ds.meta.family_id,
            FamilyKind::from_id(ds.meta.family_id)
                .map(|k| k.name())
                .unwrap_or("unknown")
        );
    } else if head == formats::MODEL_MAGIC {
        let m = formats::read_model(path)?;
        let c = m.config();
        println!("R2DM checkpoint {}", path.display());
        println!(
            "  arch: feat_dim={} hidden={} blocks={} heads={} temb={} mlp={}",
            c.feat_dim, c.hidden, c.blocks, c.heads, c.temb_dim, c.mlp_hidden
        );
        println!("  params = {}", DenoiserModel::param_count(c));
    } else {
        let s = formats::read_schedule(path)
            .with_context(|| format!("{}: not an R2DF/R2DM file or schedule", path.display()))?;
        println!("noise schedule {}", path.display());
        println!("  N = {}", s.len());
        println!("  beta0 = {:.6e}, gamma = {:.6e}", s.beta0(), s.gamma());
        println!("  posterior_variance = {}", s.posterior().tag());
        println!(
            "  beta_1 = {:.6e}, beta_N = {:.6e}, alpha_bar_N = {:.6e}",
            s.beta(1),
            s.beta(s.len()),
            s.alpha_bar(s.len())
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
