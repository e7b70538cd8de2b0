use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use pnp_core::cost::{self, named_config};
use pnp_core::density::{location_weights, render_density};
use pnp_core::harness::{self, OptimizerConfig, TrainConfig};
use pnp_core::instance::AbstractInstance;
use pnp_core::sampler::PollRatioSchedule;
use pnp_core::subsample::{class_incremental_sample, load_index, save_selection};
use pnp_core::transformer::TransformerConfig;

#[derive(Parser)]
#[command(name = "pnp", version, about = "Poll-and-pool token abstraction tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Transformer MAC counts with and without token abstraction, as CSV.
    Cost {
        /// Named configuration (detr-r50, detr-r50-dc5, desk) or a JSON file.
        #[arg(long)]
        config: String,
        #[arg(long)]
        length: u64,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        pool: u64,
        /// Comma-separated poll ratios; replaces `--alpha` when given.
        #[arg(long, value_delimiter = ',')]
        curve: Option<Vec<f64>>,
    },
    /// Renders a computation density map from a saved abstract-set instance.
    Density {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        cost: u64,
        #[arg(long)]
        pgm: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Trains the desk-scale detector and records sampler statistics.
    Train {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        epochs: usize,
        #[arg(long)]
        alpha_low: f64,
        #[arg(long)]
        alpha_high: f64,
        #[arg(long)]
        pool: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        save_instance: Option<PathBuf>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        quiet: bool,
    },
    /// Class-incremental subsampling of a category-to-images index.
    Subsample {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        threshold: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(name: &str) -> Result<TransformerConfig> {
    if let Some(cfg) = named_config(name) {
        return Ok(cfg);
    }
    let path = Path::new(name);
    if !path.exists() {
        bail!("unknown configuration `{name}` (neither a known name nor an existing file)");
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: TransformerConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing configuration {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn run_cost(config: &str, length: u64, alpha: f64, pool: u64, curve: Option<Vec<f64>>) -> Result<()> {
    let cfg = load_config(config)?;
    let alphas = curve.unwrap_or_else(|| vec![alpha]);
    let rows = cost::tradeoff_curve(&cfg, length, &alphas, pool)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    cost::write_csv(&rows, &mut out)?;
    out.flush()?;
    Ok(())
}

fn run_density(input: &Path, total: u64, pgm: &Path, csv: &Path) -> Result<()> {
    let file = File::open(input).with_context(|| format!("opening {}", input.display()))?;
    let inst = AbstractInstance::read_from(BufReader::new(file))
        .with_context(|| format!("reading instance {}", input.display()))?;
    let weights = location_weights(&inst)?;
    let map = render_density(&weights, total as f64, inst.height, inst.width)?;
    let mut w = BufWriter::new(File::create(pgm).with_context(|| format!("creating {}", pgm.display()))?);
    map.write_pgm(&mut w)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(csv).with_context(|| format!("creating {}", csv.display()))?);
    map.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_train(
    seed: u64,
    epochs: usize,
    alpha_low: f64,
    alpha_high: f64,
    pool: usize,
    out: &Path,
    save_instance: Option<&Path>,
    lr: Option<f64>,
    quiet: bool,
) -> Result<()> {
    let mut config = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    config.detector.pool_size = pool;
    if let Some(lr) = lr {
        config.optimizer = OptimizerConfig::adam(lr);
    }
    let mut schedule = PollRatioSchedule::new(alpha_low, alpha_high, seed)?;
    let run = harness::train_with_progress(&config, &mut schedule, epochs, |s| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  in_box {:.4}  iou {:.4}  loss {:.5}",
                s.epoch, s.in_box_fraction, s.sample_iou, s.mean_loss
            );
        }
    })?;
    let mut w = BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    harness::write_stats_csv(&run.epochs, &mut w)?;
    w.flush()?;
    if let Some(path) = save_instance {
        let scene = config
            .eval_set()?
            .into_iter()
            .next()
            .context("empty evaluation set")?;
        let inst = harness::snapshot_instance(&run.params, &scene, config.eval_alpha)?;
        let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        inst.write_to(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn run_subsample(annotations: &Path, threshold: usize, seed: u64, out: &Path) -> Result<()> {
    let index = load_index(annotations, threshold)
        .with_context(|| format!("loading annotations {}", annotations.display()))?;
    let selection = class_incremental_sample(&index, seed);
    save_selection(out, &selection).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Cost {
            config,
            length,
            alpha,
            pool,
            curve,
        } => run_cost(&config, length, alpha, pool, curve),
        Command::Density { input, cost, pgm, csv } => run_density(&input, cost, &pgm, &csv),
        Command::Train {
            seed,
            epochs,
            alpha_low,
            alpha_high,
            pool,
            out,
            save_instance,
            lr,
            quiet,
        } => run_train(
            seed,
            epochs,
            alpha_low,
            alpha_high,
            pool,
            &out,
            save_instance.as_deref(),
            lr,
            quiet,
        ),
        Command::Subsample {
            annotations,
            threshold,
            seed,
            out,
        } => run_subsample(&annotations, threshold, seed, &out),
    }
}
