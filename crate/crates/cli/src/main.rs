//! Staged command-line driver: synthetic data, autoencoder pretraining,
//! latent diffusion, augmentation, cross-validated training, evaluation,
//! saliency export and the experiment matrix.

mod commands;
mod layout;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use multivit::config::ProfileName;

#[derive(Debug, Parser)]
#[command(name = "multivit", version, about = "Multimodal sMRI + FNC classification pipeline")]
pub struct Cli {
    /// JSON run configuration; fields left out fall back to the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Profile used for fields missing from the config file.
    #[arg(long, global = true, value_parser = parse_profile)]
    pub preset: Option<ProfileName>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output root shared by all stages.
    #[arg(long, global = true, default_value = "runs/default")]
    pub out: PathBuf,

    /// Accept upstream artifacts produced under a different configuration.
    #[arg(long, global = true)]
    pub allow_config_mismatch: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic cohort and its folds.
    SynthData,
    /// Train the KL autoencoder on every real volume.
    PretrainAe,
    /// Fit the per-class latent diffusion augmenters.
    TrainLdm,
    /// Generate subjects and write the augmented manifest.
    Augment,
    /// Cross-validate one experiment and save the fold classifiers.
    Train {
        #[arg(long, default_value = "multivit2")]
        experiment: String,
    },
    /// Re-score saved fold classifiers on their evaluation folds.
    Evaluate {
        #[arg(long, default_value = "multivit2")]
        experiment: String,
    },
    /// Export attention saliency overlays for evaluation subjects.
    Saliency {
        #[arg(long, default_value = "multivit2")]
        experiment: String,
        /// Subjects per fold that get overlay files; all are summarised.
        #[arg(long, default_value_t = 2)]
        overlays: usize,
        /// Number of evenly spaced axial slices per overlay.
        #[arg(long, default_value_t = 3)]
        slices: usize,
    },
    /// Run every experiment row and write the comparison table.
    Matrix,
}

fn parse_profile(s: &str) -> Result<ProfileName, String> {
    s.parse().map_err(|e: multivit::Error| e.to_string())
}

const EXIT_CONFIG: u8 = 1;
const EXIT_MISSING: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<multivit::Error>() {
            return match e {
                multivit::Error::MissingStage { .. } | multivit::Error::Missing(_) => EXIT_MISSING,
                e if e.is_numerical() => EXIT_NUMERICAL,
                _ => EXIT_CONFIG,
            };
        }
    }
    EXIT_CONFIG
}

fn init_workers() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("MULTIVIT_WORKERS") {
        let n: usize = v.parse().map_err(|_| anyhow::anyhow!("MULTIVIT_WORKERS must be a positive integer, got `{v}`"))?;
        if n == 0 {
            anyhow::bail!("MULTIVIT_WORKERS must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = init_workers().and_then(|_| commands::run(&cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
