//! Stage glue: pretraining, augmentation and checkpoint round trips for the
//! trained models.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::augmentation::{augment_training_folds, fit_augmenters, AugmenterSet, ClassAugmenter};
use crate::autoencoder::{train_autoencoder, AeEpochLoss, Autoencoder, AutoencoderDescriptor};
use crate::classifier::{ClassifierDescriptor, ClassifierModel, Extractor};
use crate::config::RunConfig;
use crate::container::{load_checkpoint, save_checkpoint, CheckpointHeader};
use crate::data::{make_folds, synthesize_dataset, DatasetManifest, FoldAssignment, Label, StructuralVolume};
use crate::diffusion::{Denoiser, DenoiserDescriptor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::params::Params;
use crate::scalar::Scalar;

pub const KIND_AUTOENCODER: &str = "autoencoder";
pub const KIND_AUGMENTER: &str = "class-augmenter";
pub const KIND_CLASSIFIER: &str = "classifier";

/// Synthetic cohort and stratified folds for a configuration.
pub fn synthesize(cfg: &RunConfig) -> Result<(DatasetManifest, FoldAssignment)> {
    let manifest = synthesize_dataset(cfg.data.n_subjects, &cfg.synth(), cfg.seed)?;
    let folds = make_folds(&manifest, cfg.folds, cfg.seed)?;
    Ok((manifest, folds))
}

/// Label-free autoencoder pretraining on every real volume.
pub fn pretrain_autoencoder<T: Scalar>(manifest: &DatasetManifest, cfg: &RunConfig) -> Result<(Autoencoder<T>, Vec<AeEpochLoss>)> {
    let volumes: Vec<&StructuralVolume> = manifest.real_subjects().map(|r| r.volume.as_ref()).collect();
    let init = Autoencoder::init(cfg.ae_descriptor(), cfg.seed ^ 0xAE)?;
    train_autoencoder(&volumes, &init, &cfg.autoencoder.hyper, cfg.seed)
}

pub fn fit_augmenter_set<T: Scalar>(
    manifest: &DatasetManifest,
    folds: &FoldAssignment,
    ae: &Arc<Autoencoder<T>>,
    cfg: &RunConfig,
) -> Result<AugmenterSet<T>> {
    fit_augmenters(manifest, folds, ae, &cfg.augmentation, cfg.seed ^ 0x1D)
}

pub fn generate_augmented<T: Scalar>(
    manifest: &DatasetManifest,
    folds: &FoldAssignment,
    set: &AugmenterSet<T>,
    cfg: &RunConfig,
) -> Result<DatasetManifest> {
    augment_training_folds(manifest, folds, set, &cfg.augmentation, cfg.seed ^ 0x6E)
}

/// Fits the augmenters and returns them with the augmented manifest.
pub fn build_augmented<T: Scalar>(
    manifest: &DatasetManifest,
    folds: &FoldAssignment,
    ae: &Arc<Autoencoder<T>>,
    cfg: &RunConfig,
) -> Result<(AugmenterSet<T>, DatasetManifest)> {
    let set = fit_augmenter_set(manifest, folds, ae, cfg)?;
    let augmented = generate_augmented(manifest, folds, &set, cfg)?;
    Ok((set, augmented))
}

/// Checkpoint scope name and augmenter pair for every entry of the set.
pub fn augmenter_scopes<T>(set: &AugmenterSet<T>) -> Vec<(String, &[ClassAugmenter<T>; 2])> {
    match set {
        AugmenterSet::Shared(pair) => vec![("all".to_string(), pair)],
        AugmenterSet::PerFold(pairs) => pairs.iter().enumerate().map(|(f, p)| (format!("f{f}"), p)).collect(),
    }
}

/// Scope names the configuration expects, in the order of
/// [`augmenter_scopes`].
pub fn expected_scopes(cfg: &RunConfig) -> Vec<String> {
    if cfg.augmentation.refit_per_fold {
        (0..cfg.folds).map(|f| format!("f{f}")).collect()
    } else {
        vec!["all".to_string()]
    }
}

fn expect_kind(header: &CheckpointHeader, path: &Path, kind: &str) -> Result<()> {
    if header.kind != kind {
        return Err(Error::Invalid(format!("{} holds a `{}` checkpoint, expected `{kind}`", path.display(), header.kind)));
    }
    Ok(())
}

pub fn save_autoencoder<T: Scalar>(path: &Path, ae: &Autoencoder<T>, config_hash: Option<String>, metadata: serde_json::Value) -> Result<String> {
    save_checkpoint(path, KIND_AUTOENCODER, serde_json::to_value(&ae.desc)?, &ae.params.cast(), config_hash, metadata)
}

pub fn load_autoencoder<T: Scalar>(path: &Path) -> Result<(CheckpointHeader, Autoencoder<T>)> {
    let (header, params) = load_checkpoint(path)?;
    expect_kind(&header, path, KIND_AUTOENCODER)?;
    let desc: AutoencoderDescriptor = serde_json::from_value(header.descriptor.clone())?;
    let ae = Autoencoder::from_params(desc, params.cast())?;
    Ok((header, ae))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AugmenterDescriptor {
    label: Label,
    denoiser: DenoiserDescriptor,
    betas: Vec<f64>,
    latent_scale: f64,
    corpus_size: usize,
    loss_curve: Vec<f64>,
}

/// Stores the denoiser and its schedule. The autoencoder is stored
/// separately and re-attached on load.
pub fn save_augmenter<T: Scalar>(path: &Path, aug: &ClassAugmenter<T>, config_hash: Option<String>, metadata: serde_json::Value) -> Result<String> {
    let desc = AugmenterDescriptor {
        label: aug.label,
        denoiser: aug.denoiser.desc.clone(),
        betas: aug.schedule.betas.clone(),
        latent_scale: aug.latent_scale,
        corpus_size: aug.corpus_size,
        loss_curve: aug.loss_curve.clone(),
    };
    save_checkpoint(path, KIND_AUGMENTER, serde_json::to_value(desc)?, &aug.denoiser.params.cast(), config_hash, metadata)
}

pub fn load_augmenter<T: Scalar>(path: &Path, ae: &Arc<Autoencoder<T>>) -> Result<(CheckpointHeader, ClassAugmenter<T>)> {
    let (header, params) = load_checkpoint(path)?;
    expect_kind(&header, path, KIND_AUGMENTER)?;
    let d: AugmenterDescriptor = serde_json::from_value(header.descriptor.clone())?;
    if d.denoiser.latent_shape != ae.desc.latent_shape() {
        return Err(Error::Shape(format!("augmenter latent {:?} vs autoencoder {:?}", d.denoiser.latent_shape, ae.desc.latent_shape())));
    }
    let schedule = NoiseSchedule::from_betas(d.betas)?;
    let denoiser = Denoiser::from_params(d.denoiser, params.cast())?;
    let aug = ClassAugmenter {
        label: d.label,
        denoiser,
        schedule,
        autoencoder: Arc::clone(ae),
        latent_scale: d.latent_scale,
        corpus_size: d.corpus_size,
        loss_curve: d.loss_curve,
    };
    Ok((header, aug))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ClassifierCheckpointDescriptor {
    classifier: ClassifierDescriptor,
    extractor: Option<AutoencoderDescriptor>,
}

/// Classifier parameters and, with the LFFM, the extractor weights it ran
/// with (the `enc.` entries).
pub fn save_classifier<T: Scalar>(path: &Path, model: &ClassifierModel<T>, config_hash: Option<String>, metadata: serde_json::Value) -> Result<String> {
    let desc = ClassifierCheckpointDescriptor {
        classifier: model.desc.clone(),
        extractor: model.extractor.as_ref().map(|e| e.desc.clone()),
    };
    let mut all: Params<f32> = model.params.cast();
    if let Some(e) = &model.extractor {
        all.extend(e.params.cast());
    }
    save_checkpoint(path, KIND_CLASSIFIER, serde_json::to_value(desc)?, &all, config_hash, metadata)
}

pub fn load_classifier<T: Scalar>(path: &Path) -> Result<(CheckpointHeader, ClassifierModel<T>)> {
    let (header, all) = load_checkpoint(path)?;
    expect_kind(&header, path, KIND_CLASSIFIER)?;
    let d: ClassifierCheckpointDescriptor = serde_json::from_value(header.descriptor.clone())?;
    let mut params = Params::new();
    let mut enc = Params::new();
    for (name, t) in all.iter() {
        if name.starts_with("enc.") {
            enc.insert(name, t.cast());
        } else {
            params.insert(name, t.cast());
        }
    }
    let extractor = match d.extractor {
        Some(desc) => Some(Extractor { desc, params: enc }),
        None if enc.is_empty() => None,
        None => return Err(Error::Invalid(format!("{}: extractor weights without a descriptor", path.display()))),
    };
    let model = ClassifierModel::from_parts(d.classifier, params, extractor)?;
    Ok((header, model))
}

/// Metadata recorded with every checkpoint.
pub fn stage_metadata(stage: &str, seed: u64, extra: serde_json::Value) -> serde_json::Value {
    json!({ "stage": stage, "seed": seed, "details": extra })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{ArchMode, Modalities};

    #[test]
    fn classifier_round_trip() {
        let dims = [8, 8, 8];
        let ae = Autoencoder::<f64>::init(AutoencoderDescriptor { input_dims: dims, enc_channels: vec![2], latent_channels: 2, dec_channels: vec![2, 2] }, 1).unwrap();
        let mut desc = ClassifierDescriptor::new(ArchMode::Hybrid, Modalities::MriFnc, true, dims, 4, ae.desc.latent_shape());
        desc.vit.embed_dim = 8;
        desc.vit.heads = 2;
        desc.vit.ff_dim = 8;
        desc.vit.mlp_hidden = 8;
        desc.vit.layers = 1;
        let model = ClassifierModel::init(desc, Some(&ae), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt.json");
        save_classifier(&path, &model, Some("h".into()), json!({})).unwrap();
        let (header, back) = load_classifier::<f64>(&path).unwrap();
        assert_eq!(header.config_hash.as_deref(), Some("h"));
        assert_eq!(back.desc, model.desc);
        let cast: ClassifierModel<f64> =
            ClassifierModel { desc: model.desc.clone(), params: model.params.cast::<f32>().cast(), extractor: back.extractor.clone() };
        assert_eq!(back.params, cast.params);
        assert!(back.extractor.is_some());
    }
}
