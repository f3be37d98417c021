//! On-disk layout of a run directory and the per-stage provenance stamps.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use multivit::config::{ProfileName, RunConfig};
use multivit::container::{read_json, write_json};
use multivit::Error;

pub const STAMP: &str = "stage.json";

/// Written next to every stage's artifacts.
#[derive(Debug, Serialize, Deserialize)]
pub struct StageStamp {
    pub stage: String,
    pub config_hash: String,
    pub config: RunConfig,
}

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn manifest(&self) -> PathBuf {
        self.data().join("manifest.json")
    }

    pub fn folds(&self) -> PathBuf {
        self.data().join("folds.json")
    }

    pub fn ae(&self) -> PathBuf {
        self.root.join("ae")
    }

    pub fn ae_checkpoint(&self) -> PathBuf {
        self.ae().join("autoencoder.ckpt.json")
    }

    pub fn ldm(&self) -> PathBuf {
        self.root.join("ldm")
    }

    pub fn augmenter_checkpoint(&self, scope: &str, label: usize) -> PathBuf {
        self.ldm().join(format!("augmenter-{scope}-c{label}.ckpt.json"))
    }

    pub fn augmented(&self) -> PathBuf {
        self.root.join("augmented")
    }

    pub fn augmented_manifest(&self) -> PathBuf {
        self.augmented().join("manifest.json")
    }

    pub fn train(&self, experiment: &str) -> PathBuf {
        self.root.join("train").join(experiment)
    }

    pub fn fold_checkpoint(&self, experiment: &str, fold: usize) -> PathBuf {
        self.train(experiment).join(format!("fold{fold}.ckpt.json"))
    }

    pub fn evaluate(&self, experiment: &str) -> PathBuf {
        self.root.join("evaluate").join(experiment)
    }

    pub fn saliency(&self, experiment: &str) -> PathBuf {
        self.root.join("saliency").join(experiment)
    }

    pub fn matrix(&self) -> PathBuf {
        self.root.join("matrix")
    }
}

pub fn stamp(dir: &Path, stage: &str, cfg: &RunConfig) -> anyhow::Result<()> {
    let s = StageStamp { stage: stage.into(), config_hash: cfg.hash(), config: cfg.clone() };
    write_json(&dir.join(STAMP), &s).with_context(|| format!("writing {stage} stamp"))
}

/// Fails with a missing-stage error when `dir` holds no finished `stage`,
/// and with a config error when it was produced under another config.
pub fn require(dir: &Path, stage: &str, cfg: &RunConfig, allow_mismatch: bool) -> anyhow::Result<StageStamp> {
    let path = dir.join(STAMP);
    if !path.exists() {
        return Err(Error::MissingStage { stage: stage.into(), detail: format!("{} not found; run `multivit {stage}` first", path.display()) }.into());
    }
    let s: StageStamp = read_json(&path)?;
    let hash = cfg.hash();
    if s.config_hash != hash && !allow_mismatch {
        return Err(Error::Invalid(format!(
            "{} was produced under config {} but the current config is {}; pass --allow-config-mismatch to use it anyway",
            dir.display(),
            short(&s.config_hash),
            short(&hash)
        ))
        .into());
    }
    Ok(s)
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Preset defaults, overlaid with the config file, then the flags.
pub fn load_config(path: Option<&Path>, preset: Option<ProfileName>, seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let file: Value = match path {
        Some(p) => read_json(p).with_context(|| format!("reading config {}", p.display()))?,
        None => Value::Object(Default::default()),
    };
    if !file.is_object() {
        return Err(Error::Invalid("config must be a JSON object".into()).into());
    }
    let profile = match (preset, file.get("preset")) {
        (Some(p), _) => p,
        (None, Some(v)) => serde_json::from_value(v.clone()).map_err(|e| Error::Invalid(format!("config preset: {e}")))?,
        (None, None) => ProfileName::Desk,
    };
    let mut value = serde_json::to_value(RunConfig::for_profile(profile))?;
    merge(&mut value, file);
    value["preset"] = serde_json::to_value(profile)?;
    let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Invalid(format!("config: {e}")))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}
