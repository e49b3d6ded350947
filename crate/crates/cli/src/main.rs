use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use echosynth::harness::{self, ExperimentConfig};
use echosynth::model::Variant;

#[derive(Parser)]
#[command(name = "echosynth", version, about = "Synthetic ultrasound dataset generation and learned B-mode rendering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Desk-scale defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads; 1 gives the deterministic single-thread mode.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Render (s, a, y) frames and the manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frames: Option<usize>,
        /// Master seed of the dataset.
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite a different or partial dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train every (variant, seed) cell of the plan.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict the plan to these variants (repeatable or comma separated).
        #[arg(long, value_delimiter = ',')]
        variant: Vec<Variant>,
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
    },
    /// Evaluate trained cells on the eval split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        variant: Vec<Variant>,
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
        /// Metrics to compute: psnr, mae, pchi2, fid. PSNR, MAE and pchi2 are always reported.
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<String>,
    },
    /// Paired-difference box plots and a summary document from an eval directory.
    Report {
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "sa2h")]
        reference: Variant,
    },
    /// Render generator output for dataset frames.
    Infer {
        /// Trained cell directory holding generator.bin/json.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Frame ids; all eval frames when omitted.
        #[arg(long, value_delimiter = ',')]
        frame: Vec<String>,
        /// Noise seed; per-frame seeds when omitted.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(common: &Common, variants: &[Variant], seeds: &[u64]) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk(),
    };
    if !variants.is_empty() {
        cfg.experiment.variants = variants.to_vec();
    }
    if !seeds.is_empty() {
        cfg.experiment.seeds = seeds.to_vec();
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData { common, out, frames, seed, force } => {
            let cfg = load_config(&common, &[], &[])?;
            let m = harness::cmd_gen_data(&cfg, &out, frames, seed, force, common.threads)?;
            println!(
                "dataset {}: {} frames ({} train, {} eval) in {}",
                m.dataset_id,
                m.frames.len(),
                m.ids(harness::Split::Train).len(),
                m.ids(harness::Split::Eval).len(),
                out.display()
            );
        }
        Command::Train { common, data, out, variant, seed } => {
            let cfg = load_config(&common, &variant, &seed)?;
            for r in harness::cmd_train(&cfg, &data, &out)? {
                println!("{} seed {}: {} generator parameters, inputs {}", r.variant, r.seed, r.generator_params, r.inputs.join("+"));
            }
        }
        Command::Eval { common, data, runs, out, variant, seed, metrics } => {
            let mut cfg = load_config(&common, &variant, &seed)?;
            for m in &metrics {
                if !matches!(m.as_str(), "psnr" | "mae" | "pchi2" | "fid") {
                    bail!("unknown metric `{m}` (expected psnr, mae, pchi2 or fid)");
                }
            }
            if !metrics.is_empty() {
                cfg.eval.fid = metrics.iter().any(|m| m == "fid");
            }
            let summary = harness::cmd_eval(&cfg, &data, &runs, &out)?;
            print!("{}", harness::render_table(&summary.table));
        }
        Command::Report { eval, out, reference } => {
            let r = harness::cmd_report(&eval, reference, &out)?;
            if let Some(n) = &r.notice {
                println!("{n}");
            }
            println!("{} paired-difference series written to {}", r.series.len(), out.display());
        }
        Command::Infer { checkpoint, data, out, frame, seed } => {
            let written = harness::cmd_infer(&checkpoint, &data, &out, &frame, seed)
                .with_context(|| format!("inference with {}", checkpoint.display()))?;
            println!("{} images written to {}", written.len(), out.display());
        }
    }
    Ok(())
}
