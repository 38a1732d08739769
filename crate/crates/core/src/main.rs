//! Command-line entry point: dataset generation, training, evaluation,
//! DET export, and gradient checking.
//!
//! Exit codes: 0 success, 1 usage error (bad flags or invalid
//! configuration, before any output is written), 2 runtime error. Every
//! non-zero exit prints one error line to standard error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use orthomad::error::{Error, Result};
use orthomad::metrics;
use orthomad::model::{load_model, ModelConfig};
use orthomad::objective::full_loss_check;
use orthomad::synthdata::{generate_dataset, load_manifest, DatasetManifest, GenParams, Split};
use orthomad::trainer::{evaluate, train, Optimizer, TrainConfig};

#[derive(Parser)]
#[command(name = "orthomad", version, about = "Morphing attack detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic morph dataset.
    Gen {
        /// Output directory for images and manifest.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Number of synthetic identities.
        #[arg(long, default_value_t = 40)]
        identities: u32,
        /// Bona fide images per identity.
        #[arg(long = "per-id", default_value_t = 10)]
        per_id: u32,
        /// Number of morph (attack) images.
        #[arg(long, default_value_t = 300)]
        morphs: u32,
        /// Fraction of identities assigned to the train split.
        #[arg(long, default_value_t = 0.75)]
        split: f64,
        /// Image side length in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Per-pixel Gaussian noise standard deviation.
        #[arg(long, default_value_t = 0.03)]
        noise: f64,
    },
    /// Train the two-headed classifier on a generated dataset.
    Train {
        /// Dataset directory (from `gen`).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and the training log.
        #[arg(long)]
        out: PathBuf,
        /// Orthogonality regularization weight.
        #[arg(long, default_value_t = 100.0)]
        alpha: f64,
        #[arg(long, default_value_t = 1e-5)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Length of each identity embedding.
        #[arg(long = "embed-dim", default_value_t = 32)]
        embed_dim: usize,
        /// adam or sgd.
        #[arg(long, default_value = "adam")]
        optimizer: String,
        /// Disable horizontal-flip augmentation.
        #[arg(long)]
        no_augment: bool,
        /// Use the cosine form of the regularizer.
        #[arg(long)]
        normalize_reg: bool,
    },
    /// Score a split and write the metrics report.
    Eval {
        /// Model checkpoint file.
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// train or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Output path for the score CSV.
        #[arg(long)]
        scores: PathBuf,
        /// Output path for the metrics JSON.
        #[arg(long)]
        report: PathBuf,
    },
    /// Export a DET curve from a score CSV.
    Det {
        /// Input score CSV (from `eval`).
        #[arg(long)]
        scores: PathBuf,
        /// Output path for the DET CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the training-loss gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Maximum allowed relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, not usage errors.
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Gen {
            out,
            seed,
            identities,
            per_id,
            morphs,
            split,
            size,
            noise,
        } => {
            let params = GenParams {
                seed,
                n_identities: identities,
                bona_fide_per_identity: per_id,
                n_morphs: morphs,
                split_fraction: split,
                size,
                noise_std: noise,
            };
            let manifest = generate_dataset(&params, &out)?;
            print_gen_summary(&manifest, &out);
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            data,
            out,
            alpha,
            lr,
            batch,
            epochs,
            seed,
            embed_dim,
            optimizer,
            no_augment,
            normalize_reg,
        } => {
            let config = TrainConfig {
                alpha,
                learning_rate: lr,
                batch_size: batch,
                epochs,
                seed,
                optimizer: optimizer.parse::<Optimizer>()?,
                flip_augment: !no_augment,
                normalize_reg,
            };
            config.validate()?;
            if embed_dim == 0 {
                return Err(Error::Config("embed dim must be ≥ 1".into()));
            }
            let model_config = ModelConfig {
                embed_dim,
                ..ModelConfig::default()
            };
            let manifest = load_manifest(&data)?;
            let outcome = train::<f32>(&config, &model_config, &manifest, &out)?;
            let last = outcome.log.last().expect("training ran at least one step");
            println!(
                "trained {} epochs ({} steps); final step: bce {:.6}, reg {:.6}, total {:.6}",
                epochs,
                outcome.log.len(),
                last.bce,
                last.reg,
                last.total
            );
            println!(
                "best epoch {} (mean loss {:.6}); checkpoints and log in {}",
                outcome.best_epoch,
                outcome.best_loss,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            model,
            data,
            split,
            scores,
            report,
        } => {
            let split: Split = split.parse()?;
            let params = load_model::<f32>(&model)?;
            let manifest = load_manifest(&data)?;
            let score_set = evaluate(&params, &manifest, split)?;
            let metrics_report = metrics::report(&score_set)?;
            metrics::write_scores_csv(&score_set, &scores)?;
            metrics::write_report_json(&metrics_report, &report)?;
            println!("scored {} samples on split {}", score_set.len(), split);
            println!("EER: {:.2}%", metrics_report.eer * 100.0);
            for (target, point) in &metrics_report.bpcer_at_apcer {
                println!(
                    "BPCER@APCER={:.0}%: {:.2}%",
                    target.parse::<f64>().expect("report keys are numeric") * 100.0,
                    point.bpcer * 100.0
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Det { scores, out } => {
            let score_set = metrics::read_scores_csv(&scores)?;
            let curve = metrics::det_curve(&score_set)?;
            metrics::write_det_csv(&curve, &out)?;
            println!("wrote {} DET points to {}", curve.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { seed, tolerance } => {
            let report = full_loss_check(seed, 1e-5, tolerance, 200)?;
            println!(
                "checked {} parameter elements, max relative error {:.3e} (tolerance {:.1e})",
                report.checked, report.max_rel_err, report.tolerance
            );
            if report.pass() {
                println!("PASS");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("FAIL");
                let worst = report.worst.as_ref().expect("failures imply a worst element");
                eprintln!(
                    "error: gradient check failed at {}[{}]: analytic {:.6e}, numeric {:.6e}",
                    worst.param, worst.index, worst.analytic, worst.numeric
                );
                Ok(ExitCode::from(2))
            }
        }
    }
}

fn print_gen_summary(manifest: &DatasetManifest, out: &std::path::Path) {
    let count = |split, label| {
        manifest
            .split_records(split)
            .iter()
            .filter(|r| r.label == label)
            .count()
    };
    println!(
        "generated {} samples in {}",
        manifest.records.len(),
        out.display()
    );
    for split in [Split::Train, Split::Test] {
        println!(
            "  {}: {} bona fide, {} attacks",
            split,
            count(split, 1),
            count(split, 0)
        );
    }
}
