//! Batch-experiment CLI.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 infeasible privacy budget, 1 anything else.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use dptt::data;
use dptt::experiment::{self, ExperimentConfig, ExperimentError};

/// Output directory resolution: `--out` flag, then `DPTT_OUT`, then the
/// config's `out_dir`, then `./dptt-out`.
const OUT_ENV: &str = "DPTT_OUT";

#[derive(Parser)]
#[command(name = "dptt", version, about = "Differentially private training and parameter-efficient fine-tuning for tabular transformers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides DPTT_OUT and the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// DP-pretrain a model; writes checkpoint, schema, and summary.
    Pretrain(ConfigArg),
    /// Freeze + PEFT + DP fine-tune a pretrained checkpoint.
    Finetune {
        #[command(flatten)]
        common: ConfigArg,
        /// Pretrained checkpoint to adapt.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a checkpoint on the config's downstream test split.
    Evaluate {
        #[command(flatten)]
        common: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the full (method, eps_pretrain, eps_finetune, seed) grid with
    /// resumable records and CSV reports.
    Grid(ConfigArg),
    /// Calibrate noise multipliers for a list of epsilon targets.
    Calibrate {
        /// Comma-separated epsilon targets, e.g. 0.5,1,2,4,8,16,32.
        #[arg(long, value_delimiter = ',')]
        epsilons: Vec<f64>,
        #[arg(long, default_value_t = 1e-5)]
        delta: f64,
        /// Sampling rate q = batch size / dataset size.
        #[arg(long)]
        q: f64,
        /// Total optimizer steps.
        #[arg(long)]
        steps: usize,
        /// Write the table as CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the trainable-parameter table for every method.
    CountParams {
        /// Optional TOML config for architecture and PEFT hyperparameters.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate a synthetic shifted CSV dataset.
    Synth {
        #[arg(long)]
        rows: usize,
        /// Distribution shift in [0, 1].
        #[arg(long, default_value_t = 0.0)]
        shift: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Write a JSON summary here as well.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
}

fn resolve_out(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("dptt-out"))
}

fn run() -> Result<(), ExperimentError> {
    match Cli::parse().cmd {
        Cmd::Pretrain(args) => {
            let cfg = ExperimentConfig::from_toml_path(&args.config)?;
            let out = resolve_out(args.out, &cfg);
            let artifacts = experiment::cmd_pretrain(&cfg, &out)?;
            println!("checkpoint: {}", artifacts.checkpoint.display());
            println!("schema:     {}", artifacts.schema.display());
            println!("summary:    {}", artifacts.summary.display());
        }
        Cmd::Finetune { common, checkpoint } => {
            let cfg = ExperimentConfig::from_toml_path(&common.config)?;
            let out = resolve_out(common.out, &cfg);
            let (ckpt, record) = experiment::cmd_finetune(&cfg, &checkpoint, &out)?;
            println!("checkpoint: {}", ckpt.display());
            println!(
                "method={} accuracy={:.4} trainable={} achieved_eps_finetune={}",
                record.method,
                record.accuracy,
                record.trainable_params,
                record
                    .achieved_eps_finetune
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "non-private".to_string()),
            );
        }
        Cmd::Evaluate { common, checkpoint } => {
            let cfg = ExperimentConfig::from_toml_path(&common.config)?;
            let accuracy = experiment::cmd_evaluate(&cfg, &checkpoint)?;
            println!("accuracy={accuracy:.4}");
        }
        Cmd::Grid(args) => {
            let cfg = ExperimentConfig::from_toml_path(&args.config)?;
            let out = resolve_out(args.out, &cfg);
            let outcome = experiment::run_grid(&cfg, &out)?;
            println!(
                "grid complete: {} records ({} computed, {} resumed) in {}",
                outcome.records.len(),
                outcome.computed,
                outcome.skipped,
                out.display()
            );
        }
        Cmd::Calibrate { epsilons, delta, q, steps, out } => {
            if epsilons.is_empty() {
                return Err(ExperimentError::Config("at least one epsilon target required".into()));
            }
            let rows = experiment::calibration_table(&epsilons, delta, q, steps)?;
            let mut lines = vec!["target_epsilon,q,steps,sigma,achieved_epsilon,best_order".to_string()];
            for r in &rows {
                lines.push(format!(
                    "{},{},{},{:.6},{:.6},{}",
                    r.target_epsilon, r.q, r.steps, r.sigma, r.achieved_epsilon, r.best_order
                ));
            }
            let table = lines.join("\n") + "\n";
            match out {
                Some(path) => std::fs::write(path, table)?,
                None => print!("{table}"),
            }
        }
        Cmd::CountParams { config } => {
            let cfg = match config {
                Some(path) => ExperimentConfig::from_toml_path(&path)?,
                None => ExperimentConfig::default(),
            };
            // Reference census-style schema unless data is configured.
            let (vocab_sizes, n_cont) = if cfg.data.source == "csv" {
                let data = experiment::load_data(&cfg.data)?;
                (data.schema.vocab_sizes(), data.schema.n_continuous())
            } else {
                (data::acs_reference_vocab_sizes(), 2)
            };
            let rows = experiment::count_table(&cfg, vocab_sizes, n_cont)?;
            println!("{:<12} {:>16} {:>12} {:>12}", "method", "trainable", "total", "reduction");
            for (method, trainable, total) in rows {
                let reduction = 100.0 * (1.0 - trainable as f64 / total as f64);
                println!("{method:<12} {trainable:>16} {total:>12} {reduction:>11.2}%");
            }
        }
        Cmd::Synth { rows, shift, seed, out, summary } => {
            if !(0.0..=1.0).contains(&shift) {
                return Err(ExperimentError::Config("shift must lie in [0, 1]".into()));
            }
            let (written, base_rate) = data::synth::write_csv(&out, rows, shift, seed)?;
            println!("wrote {written} rows to {} (base rate {base_rate:.3})", out.display());
            if let Some(path) = summary {
                let text = serde_json::json!({
                    "rows": written,
                    "shift": shift,
                    "seed": seed,
                    "label_base_rate": base_rate,
                    "vocab_sizes": data::synth::VOCAB_SIZES,
                });
                std::fs::write(path, serde_json::to_vec_pretty(&text).unwrap())?;
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
