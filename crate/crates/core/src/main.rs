//! Command-line front end: data generation, training, evaluation, ablations,
//! alpha sweeps, and checkpoint quantization.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use gsvr::cli::{self, RunConfig};
use gsvr::data::Split;
use gsvr::error::{GsvrError, Result};

#[derive(Parser)]
#[command(name = "gsvr", about = "Scenario-specific variational embedding trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flag overrides mirroring the config keys; precedence is
/// defaults < --config file < flags.
#[derive(Args, Default)]
struct Overrides {
    /// Config file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// One of: full, distinct, uniform, rmoe.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    encoder_hidden: Option<usize>,
    /// Comma-separated hidden sizes, e.g. 256,128,64.
    #[arg(long)]
    mlp_hidden: Option<String>,
    #[arg(long)]
    experts_shared: Option<usize>,
    #[arg(long)]
    experts_specific: Option<usize>,
    #[arg(long)]
    expert_hidden: Option<usize>,
    #[arg(long)]
    expert_out: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    adam_eps: Option<f64>,
    /// Interaction-log path.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    synth: Option<bool>,
    #[arg(long)]
    synth_users: Option<usize>,
    #[arg(long)]
    synth_items: Option<usize>,
    #[arg(long)]
    synth_scenarios: Option<usize>,
    /// Comma-separated scenario weights summing to 1.
    #[arg(long)]
    synth_skew: Option<String>,
    #[arg(long)]
    synth_noise: Option<f64>,
    #[arg(long)]
    synth_seq_len: Option<usize>,
    #[arg(long)]
    synth_sessions_per_user: Option<usize>,
    #[arg(long)]
    synth_impressions_per_session: Option<usize>,
    #[arg(long)]
    synth_latent_dim: Option<usize>,
    #[arg(long)]
    synth_side_categories: Option<String>,
    #[arg(long)]
    synth_offset_map_scale: Option<f64>,
    #[arg(long)]
    synth_offset_noise_scale: Option<f64>,
    #[arg(long)]
    synth_bias: Option<f64>,
}

impl Overrides {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        macro_rules! apply {
            ($field:ident, $key:literal) => {
                if let Some(v) = &self.$field {
                    cfg.set($key, &v.to_string())?;
                }
            };
        }
        apply!(seed, "seed");
        apply!(epochs, "epochs");
        apply!(batch_size, "batch_size");
        apply!(alpha, "alpha");
        apply!(variant, "variant");
        apply!(mc_samples, "mc_samples");
        apply!(embed_dim, "embed_dim");
        apply!(latent_dim, "latent_dim");
        apply!(encoder_hidden, "encoder_hidden");
        apply!(mlp_hidden, "mlp_hidden");
        apply!(experts_shared, "experts_shared");
        apply!(experts_specific, "experts_specific");
        apply!(expert_hidden, "expert_hidden");
        apply!(expert_out, "expert_out");
        apply!(lr, "lr");
        apply!(decay, "decay");
        apply!(beta1, "beta1");
        apply!(beta2, "beta2");
        apply!(adam_eps, "adam_eps");
        if let Some(p) = &self.data {
            cfg.set("data", &p.display().to_string())?;
        }
        apply!(synth, "synth");
        apply!(synth_users, "synth_users");
        apply!(synth_items, "synth_items");
        apply!(synth_scenarios, "synth_scenarios");
        apply!(synth_skew, "synth_skew");
        apply!(synth_noise, "synth_noise");
        apply!(synth_seq_len, "synth_seq_len");
        apply!(synth_sessions_per_user, "synth_sessions_per_user");
        apply!(
            synth_impressions_per_session,
            "synth_impressions_per_session"
        );
        apply!(synth_latent_dim, "synth_latent_dim");
        apply!(synth_side_categories, "synth_side_categories");
        apply!(synth_offset_map_scale, "synth_offset_map_scale");
        apply!(synth_offset_noise_scale, "synth_offset_noise_scale");
        apply!(synth_bias, "synth_bias");
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic interaction log plus ground-truth metadata.
    GenData {
        #[command(flatten)]
        overrides: Overrides,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint.gsvr, run.cfg, and metrics.jsonl.
    Train {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one split of a dataset.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split to score: train, valid, or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train all four variants with identical seed and data.
    Ablate {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train once per KL weight over a grid.
    SweepAlpha {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated grid; defaults to 0.1,0.3,0.5,0.7,0.9.
        #[arg(long)]
        alphas: Option<String>,
    },
    /// Quantize the scenario-specific tables of a checkpoint.
    Quantize {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        bits: u32,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(command: &Command) -> Result<()> {
    match command {
        Command::GenData { overrides, out } => {
            let cfg = overrides.build()?;
            println!("{}", cli::header_line("gen-data", &cfg));
            let (log, meta) = cli::cmd_gen_data(&cfg, out)?;
            println!(
                "{{\"event\":\"gen_data_done\",\"log\":\"{}\",\"meta\":\"{}\"}}",
                log.display(),
                meta.display()
            );
        }
        Command::Train { overrides, out } => {
            let cfg = overrides.build()?;
            println!("{}", cli::header_line("train", &cfg));
            let result = cli::cmd_train(&cfg, out)?;
            for line in &result.metric_lines {
                println!("{line}");
            }
            println!(
                "{{\"event\":\"train_done\",\"checkpoint\":\"{}\"}}",
                result.checkpoint.display()
            );
        }
        Command::Eval {
            overrides,
            checkpoint,
            split,
        } => {
            let cfg = overrides.build()?;
            let split = Split::from_str(split)?;
            println!("{}", cli::header_line("eval", &cfg));
            let report = cli::cmd_eval(&cfg, checkpoint, split)?;
            println!("{}", report.to_json_line());
        }
        Command::Ablate { overrides, out } => {
            let cfg = overrides.build()?;
            println!("{}", cli::header_line("ablate", &cfg));
            println!(
                "{{\"event\":\"ablate_plan\",\"seed\":{},\"variants\":[\"full\",\"distinct\",\"uniform\",\"rmoe\"]}}",
                cfg.seed
            );
            let rows = cli::cmd_ablate(&cfg, out)?;
            for row in &rows {
                let mut line = serde_json::to_value(&row.report).unwrap();
                line["variant"] = serde_json::Value::String(row.variant.as_str().to_string());
                println!("{line}");
            }
            print!("{}", cli::ablate_table(&rows));
        }
        Command::SweepAlpha {
            overrides,
            out,
            alphas,
        } => {
            let cfg = overrides.build()?;
            let grid: Vec<f64> = match alphas {
                Some(s) => s
                    .split(',')
                    .map(|a| {
                        a.trim().parse::<f64>().map_err(|_| {
                            GsvrError::Config(format!("bad alpha '{a}' in grid"))
                        })
                    })
                    .collect::<Result<_>>()?,
                None => cli::DEFAULT_ALPHA_GRID.to_vec(),
            };
            println!("{}", cli::header_line("sweep-alpha", &cfg));
            let rows = cli::cmd_sweep_alpha(&cfg, &grid, out)?;
            for row in &rows {
                let mut line = serde_json::to_value(&row.report).unwrap();
                line["alpha"] = serde_json::json!(row.alpha);
                println!("{line}");
            }
            print!("{}", cli::sweep_table(&rows));
        }
        Command::Quantize {
            overrides,
            checkpoint,
            bits,
            out,
        } => {
            let cfg = overrides.build()?;
            println!("{}", cli::header_line("quantize", &cfg));
            let result = cli::cmd_quantize(&cfg, checkpoint, *bits, out)?;
            let delta = match (result.auc_before, result.auc_after) {
                (Some(b), Some(a)) => format!("{:+.6}", a - b),
                _ => "null".to_string(),
            };
            println!(
                "{{\"event\":\"quantize_done\",\"bits\":{},\"memory_ratio\":{:.6},\"max_abs_error\":{:.3e},\"auc_before\":{},\"auc_after\":{},\"auc_delta\":{}}}",
                result.report.bits,
                result.report.memory_ratio,
                result.report.max_abs_error,
                result
                    .auc_before
                    .map_or("null".into(), |v| format!("{v:.6}")),
                result
                    .auc_after
                    .map_or("null".into(), |v| format!("{v:.6}")),
                delta
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
