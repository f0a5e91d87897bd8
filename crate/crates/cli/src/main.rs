use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use sen_core::datasets::{save_sample_set, synth_dataset};
use sen_core::harness::{
    checkpoint_load, run_classification_with, run_denoise, run_noise_robustness, run_prep, run_stress, run_train,
    ExperimentConfig,
};
use sen_core::network::SenConfig;
use sen_core::pairwise::check_sen_pairwise;
use sen_core::tensor::check_ops;
use sen_core::{Error, ErrorKind};

/// Similarity embedding network experiments for activity recognition.
#[derive(Parser)]
#[command(name = "sen", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-key overrides, e.g. --seed=7 --epochs=20.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        ExperimentConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Preprocess a raw dataset into the sample cache.
    Prep(ConfigArgs),
    /// Train the encoder and save a checkpoint.
    Train(ConfigArgs),
    /// Train and evaluate the selected classifiers.
    Eval {
        /// Reuse a saved encoder instead of training one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Accuracy against the number of training samples per class.
    Stress(ConfigArgs),
    /// Encoder versus baseline under training-label noise.
    Noise(ConfigArgs),
    /// Flag mislabeled samples with a small clean subset.
    Denoise(ConfigArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck {
        /// Finite-difference step for the per-operation checks.
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        /// Step for the whole network, kept small to stay clear of ReLU kinks.
        #[arg(long, default_value_t = 1e-4)]
        network_eps: f64,
    },
    /// Write a synthetic sample set.
    Synth {
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long, default_value_t = 30)]
        per_class: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err.kind() {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}

/// Writes a line to stdout; a closed pipe is not an error.
fn say(line: &str) {
    let _ = writeln!(std::io::stdout(), "{line}");
}

fn print(value: serde_json::Value) {
    say(&serde_json::to_string_pretty(&value).expect("json values serialize"));
}

/// Gradient check config: two intervals, five bins, four channels, hidden 8.
fn gradcheck_config() -> SenConfig {
    SenConfig {
        conv_widths: [2, 2, 2, 2],
        channels: 4,
        lstm_hidden: 8,
        intervals: 2,
        freq_bins: 5,
        sensors: 2,
        seed: 3,
    }
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Prep(a) => {
            let set = run_prep(&a.load()?)?;
            print(json!({ "samples": set.len(), "class_counts": set.class_counts() }));
        }
        Command::Train(a) => {
            let cfg = a.load()?;
            let sen = run_train(&cfg)?;
            print(json!({
                "final_loss": sen.loss_history.last(),
                "checkpoint": cfg.output_dir.join("sen.senw"),
            }));
        }
        Command::Eval { checkpoint, args } => {
            let cfg = args.load()?;
            let weights = checkpoint
                .map(|p| checkpoint_load(&p, Some(&cfg.sen_config())))
                .transpose()?;
            let report = run_classification_with(&cfg, weights)?;
            let summary: serde_json::Map<_, _> = report
                .metrics
                .iter()
                .map(|(k, m)| (k.clone(), json!({ "accuracy": m.accuracy, "avg_f1": m.avg_f1 })))
                .collect();
            print(json!({ "metrics": summary, "similarity_gap": report.similarity_gap }));
        }
        Command::Stress(a) => {
            let rows = run_stress(&a.load()?)?;
            print(serde_json::to_value(rows).expect("rows serialize"));
        }
        Command::Noise(a) => {
            let rows = run_noise_robustness(&a.load()?)?;
            let summary: Vec<_> = rows
                .iter()
                .map(|r| {
                    json!({
                        "rate": r.rate,
                        "sen_sm_accuracy": r.sen_sm.accuracy,
                        "baseline_accuracy": r.baseline.accuracy,
                    })
                })
                .collect();
            print(json!(summary));
        }
        Command::Denoise(a) => {
            let out = run_denoise(&a.load()?)?;
            print(json!({
                "kept": out.report.kept.len(),
                "flagged": out.report.flagged.len(),
                "detection": out.report.detection,
            }));
        }
        Command::Gradcheck { eps, network_eps } => {
            let mut ok = true;
            for c in check_ops(eps)? {
                ok &= c.passed();
                say(&format!(
                    "{:<24} {:.3e} (tolerance {:.0e})",
                    c.name, c.error, c.tolerance
                ));
            }
            let err = check_sen_pairwise(&gradcheck_config(), 10.0, network_eps)?;
            ok &= err <= 1e-4;
            say(&format!("{:<24} {:.3e} (tolerance 1e-4)", "sen+pairwise", err));
            if !ok {
                eprintln!("gradient check failed");
                return Ok(ExitCode::from(3));
            }
        }
        Command::Synth {
            classes,
            per_class,
            seed,
            out,
        } => {
            let set = synth_dataset(classes, per_class, seed)?;
            save_sample_set(&set, &out)?;
            print(json!({ "samples": set.len(), "path": out }));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
