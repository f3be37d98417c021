//! Run configuration shared by every pipeline stage.

use serde::{Deserialize, Serialize};

use crate::augmentation::AugmentHyper;
use crate::autoencoder::{AutoencoderDescriptor, AutoencoderHyper};
use crate::classifier::VitConfig;
use crate::container::sha256_hex;
use crate::data::{GeneratorMode, SynthConfig};
use crate::error::{Error, Result};
use crate::training::cv::ClassifierHyper;
use crate::training::experiment::{ExperimentSpec, Preset};
use crate::training::optim::AdamWConfig;
use crate::training::schedule::SchedulerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileName {
    Desk,
    Paper,
}

impl std::str::FromStr for ProfileName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(Error::Invalid(format!("unknown preset `{other}` (expected desk or paper)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_subjects: usize,
    pub dims: [usize; 3],
    pub fnc_size: usize,
    pub mode: GeneratorMode,
    /// ROI intensity difference between the two values of the volume factor.
    pub volume_effect: f32,
    /// FNC block offset difference between the two values of the FNC factor.
    pub fnc_effect: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub enc_channels: Vec<usize>,
    pub latent_channels: usize,
    pub dec_channels: Vec<usize>,
    pub hyper: AutoencoderHyper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: ProfileName,
    pub seed: u64,
    pub folds: usize,
    pub data: DataConfig,
    pub autoencoder: AutoencoderConfig,
    pub augmentation: AugmentHyper,
    pub classifier: ClassifierHyper,
    /// Adds the FNC-only unimodal row to the matrix.
    pub include_fnc_only: bool,
}

impl RunConfig {
    /// Minutes-scale CPU profile: learning rate 3e-4, 30 epochs and a
    /// proportionally shorter warm-up.
    pub fn desk() -> Self {
        let dims = [24, 28, 24];
        let ae = AutoencoderDescriptor::desk(dims);
        let synth = SynthConfig::desk(dims, 16, GeneratorMode::Additive);
        Self {
            preset: ProfileName::Desk,
            seed: 7,
            folds: 5,
            data: DataConfig {
                n_subjects: 200,
                dims,
                fnc_size: 16,
                mode: GeneratorMode::Additive,
                volume_effect: synth.volume_effect,
                fnc_effect: synth.fnc_effect,
            },
            autoencoder: AutoencoderConfig {
                enc_channels: ae.enc_channels,
                latent_channels: ae.latent_channels,
                dec_channels: ae.dec_channels,
                // The library default KL weight collapses the posterior at
                // this scale; a weaker prior keeps the ROI in the latent.
                hyper: AutoencoderHyper { lambda_kl: 1e-4, lr: 5e-3, epochs: 12, ..AutoencoderHyper::default() },
            },
            augmentation: AugmentHyper::default(),
            classifier: ClassifierHyper {
                epochs: 30,
                batch_size: 16,
                optimizer: AdamWConfig::default(),
                scheduler: SchedulerConfig { warmup_epochs: 5, ..SchedulerConfig::default() },
                vit: VitConfig::default(),
                ..ClassifierHyper::default()
            },
            include_fnc_only: true,
        }
    }

    /// Long schedule: lr 3e-4, 150 epochs, 20 warm-up
    /// epochs.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.preset = ProfileName::Paper;
        c.classifier.epochs = 150;
        c.classifier.scheduler.warmup_epochs = 20;
        c
    }

    pub fn for_profile(p: ProfileName) -> Self {
        match p {
            ProfileName::Desk => Self::desk(),
            ProfileName::Paper => Self::paper(),
        }
    }

    pub fn ae_descriptor(&self) -> AutoencoderDescriptor {
        AutoencoderDescriptor {
            input_dims: self.data.dims,
            enc_channels: self.autoencoder.enc_channels.clone(),
            latent_channels: self.autoencoder.latent_channels,
            dec_channels: self.autoencoder.dec_channels.clone(),
        }
    }

    pub fn synth(&self) -> SynthConfig {
        let mut s = SynthConfig::desk(self.data.dims, self.data.fnc_size, self.data.mode);
        s.volume_effect = self.data.volume_effect;
        s.fnc_effect = self.data.fnc_effect;
        s
    }

    pub fn experiments(&self) -> Vec<ExperimentSpec> {
        let mut rows = ExperimentSpec::table();
        if self.include_fnc_only {
            rows.push(ExperimentSpec::preset(Preset::FncOnly));
        }
        rows
    }

    /// Checks every stage's preconditions up front.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.n_subjects < 10 || d.n_subjects % 2 != 0 {
            return Err(Error::Invalid(format!("subject count {} must be even and at least 10", d.n_subjects)));
        }
        if d.fnc_size < 2 {
            return Err(Error::Invalid("FNC size must be at least 2".into()));
        }
        if self.folds < 2 || d.n_subjects / 2 < self.folds {
            return Err(Error::Invalid(format!("{} folds cannot stratify {} subjects", self.folds, d.n_subjects)));
        }
        let synth = self.synth();
        if !synth.roi.fits(d.dims) {
            return Err(Error::Invalid(format!("ROI does not fit dims {:?}", d.dims)));
        }
        let ae = self.ae_descriptor();
        ae.validate()?;
        let h = &self.autoencoder.hyper;
        if h.lambda_recon < 0.0 || h.lambda_kl < 0.0 || h.batch_size == 0 || !(h.lr > 0.0) {
            return Err(Error::Invalid("autoencoder weights must be non-negative with positive lr and batch".into()));
        }
        let a = &self.augmentation;
        if a.diffusion_steps == 0 || a.denoiser.batch_size == 0 || !(a.ratio >= 0.0) || !(a.fnc_noise_std >= 0.0) {
            return Err(Error::Invalid("augmentation needs T >= 1, a positive batch and non-negative ratio/noise".into()));
        }
        let c = &self.classifier;
        if c.batch_size == 0 || !(c.optimizer.lr > 0.0) {
            return Err(Error::Invalid("classifier needs a positive batch size and learning rate".into()));
        }
        let s = &c.scheduler;
        if !(s.factor > 0.0 && s.factor < 1.0) || s.patience == 0 {
            return Err(Error::Invalid("plateau factor must lie in (0, 1) with positive patience".into()));
        }
        let info = crate::data::ManifestInfo { dims: d.dims, fnc_size: d.fnc_size, mode: Some(d.mode) };
        let probe = crate::data::DatasetManifest { subjects: Vec::new(), seed: self.seed, info };
        for spec in self.experiments() {
            c.descriptor(&spec, &probe, ae.latent_shape()).validate()?;
        }
        Ok(())
    }

    /// Digest of the canonical JSON serialisation.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        sha256_hex(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::desk().validate().unwrap();
        RunConfig::paper().validate().unwrap();
        assert_eq!(RunConfig::paper().classifier.epochs, 150);
        assert_eq!(RunConfig::paper().classifier.scheduler.warmup_epochs, 20);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::desk();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn odd_subject_count_rejected() {
        let mut c = RunConfig::desk();
        c.data.n_subjects = 201;
        assert!(c.validate().is_err());
    }
}
