use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use voxmim::scenegen::MultiViewClip;
use voxmim::trainer::{
    ablate, evaluate, generate_dataset, init_params, load_dataset, run_suite, train, write_ablation_csv, write_render, Axis, Checkpoint, CheckKind, Config, RunOptions,
};

#[derive(Parser)]
#[command(name = "voxmim", version, about = "Masked multi-frame voxel pre-training on synthetic driving clips")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides scene.seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default config.
    Defaults,
    /// Generate synthetic clips into OUT/clip{i}.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Also dump every image as PPM.
        #[arg(long)]
        ppm: bool,
    },
    /// Pre-train on a clip directory.
    ///
    /// Writes OUT/metrics.csv with columns
    /// step,loss,rgb_term,depth_term,grad_norm,wall_time (one row per step;
    /// wall_time in seconds since the run started), periodic
    /// OUT/checkpoint_{step}.mv4d and a final OUT/checkpoint.mv4d.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// A clip directory or a directory of clip* directories.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Total step budget (overrides optimizer.steps).
        #[arg(long)]
        steps: Option<u64>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Check analytic gradients against central differences.
    Gradcheck {
        /// Every registered op and the composed paths.
        #[arg(long)]
        all: bool,
        /// Random instances per op.
        #[arg(long, default_value_t = 3)]
        instances: usize,
    },
    /// Render the reconstructed frame of a clip with a trained checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seed of the masks and dropped frame.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sweep window length or temporal strategy.
    ///
    /// Writes a CSV with columns axis,setting,window,strategy,train_loss,
    /// render_loss,rgb_term,depth_term,depth_mae,reconstruction_error.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// window | strategy | all
        #[arg(long, default_value = "all")]
        axis: String,
        /// Training steps per setting (overrides optimizer.steps).
        #[arg(long)]
        steps: Option<u64>,
    },
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = common.seed {
        cfg.scene.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("thread pool")?;
    }
    match cli.command {
        Command::Defaults => print!("{}", Config::default().serialize()),
        Command::Gen { common, out, ppm } => {
            let cfg = load_config(&common)?;
            let dirs = generate_dataset(&cfg, &out, ppm)?;
            println!("wrote {} clips to {}", dirs.len(), out.display());
        }
        Command::Pretrain { common, data, out, steps, checkpoint } => {
            let cfg = load_config(&common)?;
            let clips = load_dataset(&data)?;
            let before = init_params(&cfg, cfg.scene.seed);
            let summary = train(&cfg, &clips, &RunOptions { out, steps, resume: checkpoint })?;
            if let (Some(first), Some(last)) = (summary.metrics.first(), summary.metrics.last()) {
                println!("training loss {:.5} -> {:.5} over {} steps", first.loss, last.loss, summary.metrics.len());
            }
            let (_, after) = Checkpoint::load_for_inference(&summary.checkpoint)?;
            for (i, clip) in clips.iter().enumerate() {
                let (a, b) = (evaluate(clip, &cfg, &before, 0)?.diagnostics, evaluate(clip, &cfg, &after, 0)?.diagnostics);
                println!("clip {i}: eval loss {:.5} -> {:.5}, depth error {:.3} -> {:.3} m", a.loss, b.loss, a.depth_mae, b.depth_mae);
            }
            println!("checkpoint {}", summary.checkpoint.display());
        }
        Command::Gradcheck { all, instances } => {
            if !all {
                bail!("nothing to check; pass --all");
            }
            let rows = run_suite(instances);
            println!("{:<28} {:>10} {:>8} {:<4} note", "check", "max_rel", "tol", "");
            for r in &rows {
                println!("{r}");
            }
            let failed: Vec<_> = rows.iter().filter(|r| !r.passed()).collect();
            if !failed.is_empty() {
                let ops = failed.iter().filter(|r| r.kind == CheckKind::Op).count();
                bail!("{} checks failed ({ops} ops)", failed.len());
            }
        }
        Command::Render { checkpoint, clip, out, seed } => {
            let (cfg, params) = Checkpoint::load_for_inference(&checkpoint)?;
            let clip = MultiViewClip::load(&clip)?;
            write_render(&clip, &cfg, &params, seed, &out)?;
            println!("wrote renders to {}", out.display());
        }
        Command::Ablate { common, data, out, axis, steps } => {
            let cfg = load_config(&common)?;
            let clips = load_dataset(&data)?;
            let axes = match axis.as_str() {
                "all" => vec![Axis::Window, Axis::Strategy],
                a => vec![a.parse::<Axis>().map_err(anyhow::Error::msg)?],
            };
            let steps = steps.unwrap_or(cfg.optimizer.steps as u64);
            let mut rows = Vec::new();
            for a in axes {
                rows.extend(ablate(&cfg, &clips, a, steps)?);
            }
            write_ablation_csv(&rows, &out)?;
            for r in &rows {
                println!("{:<9} {:<9} render_loss {:.5} reconstruction_error {:.5}", r.axis, r.setting, r.render_loss, r.reconstruction_error);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
