//! Per-fold classifier training and k-fold aggregation.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::experiment::ExperimentSpec;
use super::metrics::{compute_accuracy, compute_auc};
use super::optim::{adamw_step, AdamWConfig, OptimizerState};
use super::schedule::{lr_at, LrState, SchedulerConfig};
use crate::autoencoder::Autoencoder;
use crate::classifier::{forward_graph, AttentionVars, ClassifierDescriptor, ClassifierInput, ClassifierModel, VitConfig};
use crate::data::{rng_for, DatasetManifest, FoldAssignment, Label, SubjectRecord};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::Params;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Warm-up length here applies only to experiments that use warm-up.
    pub scheduler: SchedulerConfig,
    pub vit: VitConfig,
    pub raw_patch: [usize; 3],
    pub latent_patch: [usize; 3],
    pub stem_channels: usize,
    pub stem_patch: [usize; 3],
    pub finetune_extractor: bool,
}

impl Default for ClassifierHyper {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            optimizer: AdamWConfig::default(),
            scheduler: SchedulerConfig::default(),
            vit: VitConfig::default(),
            raw_patch: [8, 7, 8],
            latent_patch: [1, 1, 1],
            stem_channels: 4,
            stem_patch: [4, 7, 4],
            finetune_extractor: false,
        }
    }
}

impl ClassifierHyper {
    pub fn descriptor(&self, spec: &ExperimentSpec, manifest: &DatasetManifest, latent_shape: [usize; 4]) -> ClassifierDescriptor {
        let mut d = ClassifierDescriptor::new(spec.mode, spec.modalities, spec.lffm, manifest.info.dims, manifest.info.fnc_size, latent_shape);
        d.vit = self.vit;
        d.raw_patch = self.raw_patch;
        d.latent_patch = self.latent_patch;
        d.stem_channels = self.stem_channels;
        d.stem_patch = self.stem_patch;
        d.finetune_extractor = spec.lffm && self.finetune_extractor;
        d
    }

    pub fn scheduler_for(&self, spec: &ExperimentSpec) -> SchedulerConfig {
        let mut s = self.scheduler;
        s.base_lr = self.optimizer.lr;
        if !spec.warmup {
            s.warmup_epochs = 0;
        }
        s
    }
}

/// Shared upstream artifacts a fold may need.
#[derive(Clone, Debug, Default)]
pub struct FoldResources<T> {
    pub autoencoder: Option<Arc<Autoencoder<T>>>,
    /// Manifest with generated subjects appended; required by augmented
    /// experiments.
    pub augmented: Option<Arc<DatasetManifest>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub accuracy: f64,
    pub auc: f64,
    pub n_train: usize,
    pub n_train_augmented: usize,
    pub n_eval: usize,
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
    /// Subjects scored in this fold, for leakage audits.
    #[serde(default)]
    pub eval_ids: Vec<String>,
}

pub struct FoldOutcome<T> {
    pub model: ClassifierModel<T>,
    pub metrics: FoldMetrics,
    /// Evaluation subject ids with their predicted probabilities.
    pub predictions: Vec<(String, Label, [f64; 2])>,
}

/// Fails unless the evaluation set is disjoint from the training set and
/// free of generated subjects.
pub fn assert_no_leakage(train: &[&SubjectRecord], eval: &[&SubjectRecord]) -> Result<()> {
    if let Some(r) = eval.iter().find(|r| r.is_augmented()) {
        return Err(Error::Leakage(format!("generated subject {} is in an evaluation set", r.id)));
    }
    let train_ids: HashSet<&str> = train.iter().map(|r| r.id.as_str()).collect();
    if let Some(r) = eval.iter().find(|r| train_ids.contains(r.id.as_str())) {
        return Err(Error::Leakage(format!("subject {} is in both training and evaluation sets", r.id)));
    }
    Ok(())
}

pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    rng_for(seed, 0xF000 + fold as u64).gen()
}

fn prepare_all<T: Scalar>(model: &ClassifierModel<T>, records: &[&SubjectRecord]) -> Result<Vec<ClassifierInput<T>>> {
    records.par_iter().map(|r| model.prepare(&r.volume, &r.fnc)).collect()
}

struct SampleGrad<T> {
    params: Params<T>,
    extractor: Option<Params<T>>,
    loss: f64,
}

fn sample_grad<T: Scalar>(model: &ClassifierModel<T>, input: &ClassifierInput<T>, label: Label, weight: T) -> Result<SampleGrad<T>> {
    let mut g = Graph::new();
    let p = g.bind(&model.params);
    let finetune = model.desc.finetune_extractor;
    let ex = model.extractor.as_ref().map(|e| {
        let b = if finetune { g.bind(&e.params) } else { g.bind_frozen(&e.params) };
        (b, &e.desc)
    });
    let mut attn = AttentionVars::default();
    let logits = forward_graph(&mut g, &p, ex.as_ref().map(|(b, d)| (b, *d)), &model.desc, input, &mut attn)?;
    let ce = g.cross_entropy(logits, label.index());
    let scaled = g.scale(ce, weight);
    let grads = g.backward(scaled);
    Ok(SampleGrad {
        params: grads.for_params(&p),
        extractor: if finetune { ex.as_ref().map(|(b, _)| grads.for_params(b)) } else { None },
        loss: g.value(ce).item().to_f64_lossy(),
    })
}

/// Trains one classifier on `train` and scores it on `eval`.
pub fn train_and_evaluate<T: Scalar>(
    init: ClassifierModel<T>,
    train: &[&SubjectRecord],
    eval: &[&SubjectRecord],
    hyper: &ClassifierHyper,
    scheduler: SchedulerConfig,
    seed: u64,
) -> Result<(ClassifierModel<T>, Vec<EpochLog>, Vec<[f64; 2]>)> {
    assert_no_leakage(train, eval)?;
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Insufficient("training and evaluation sets must be non-empty".into()));
    }
    if hyper.batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let mut model = init;
    let train_inputs = prepare_all(&model, train)?;
    let labels: Vec<Label> = train.iter().map(|r| r.label).collect();
    let mut opt = OptimizerState::new(&model.params, hyper.optimizer);
    let mut ex_opt = model.extractor.as_ref().filter(|_| model.desc.finetune_extractor).map(|e| OptimizerState::new(&e.params, hyper.optimizer));
    let mut lr_state = LrState::new(scheduler);
    let mut last_loss = None;
    let mut log = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        let (lr, next) = lr_at(epoch, last_loss, lr_state);
        lr_state = next;
        opt.config.lr = lr;
        if let Some(o) = ex_opt.as_mut() {
            o.config.lr = lr;
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_for(seed, epoch as u64 + 1));
        let mut loss_sum = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let w = T::one() / T::c(batch.len() as f64);
            let m = &model;
            let grads: Vec<SampleGrad<T>> = batch
                .par_iter()
                .map(|&i| sample_grad(m, &train_inputs[i], labels[i], w))
                .collect::<Result<_>>()
                .map_err(|e| match e {
                    Error::NonFinite { stage, layer } => Error::Diverged { epoch, detail: format!("non-finite {stage} layer {layer}") },
                    other => other,
                })?;
            let mut total = model.params.zeros_like();
            let mut ex_total = model.extractor.as_ref().map(|e| e.params.zeros_like());
            for sg in &grads {
                total.add_assign(&sg.params);
                if let (Some(t), Some(gr)) = (ex_total.as_mut(), sg.extractor.as_ref()) {
                    t.add_assign(gr);
                }
                loss_sum += sg.loss;
            }
            let diverged = |_| Error::Diverged { epoch, detail: "non-finite gradient".into() };
            adamw_step(&mut model.params, &total, &mut opt).map_err(diverged)?;
            if let (Some(o), Some(t), Some(e)) = (ex_opt.as_mut(), ex_total.as_ref(), model.extractor.as_mut()) {
                adamw_step(&mut e.params, t, o).map_err(diverged)?;
            }
        }
        let mean = loss_sum / train.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { epoch, detail: format!("training loss {mean}") });
        }
        log.push(EpochLog { lr, loss: mean });
        last_loss = Some(mean);
    }

    let eval_inputs = prepare_all(&model, eval)?;
    let probs = eval_inputs.par_iter().map(|x| model.predict(x)).collect::<Result<Vec<_>>>()?;
    Ok((model, log, probs))
}

/// Trains on every subject outside `fold` (plus generated subjects tagged
/// for it when the experiment is augmented) and evaluates on `fold`.
pub fn train_one_fold<T: Scalar>(
    manifest: &DatasetManifest,
    folds: &FoldAssignment,
    fold: usize,
    spec: &ExperimentSpec,
    hyper: &ClassifierHyper,
    resources: &FoldResources<T>,
    seed: u64,
) -> Result<FoldOutcome<T>> {
    if fold >= folds.k {
        return Err(Error::Range(format!("fold {fold} outside 0..{}", folds.k)));
    }
    let source: &DatasetManifest = if spec.augmented {
        resources
            .augmented
            .as_deref()
            .ok_or_else(|| Error::MissingStage { stage: "augment".into(), detail: "no augmented manifest".into() })?
    } else {
        manifest
    };
    let train = folds.train_records(source, fold, spec.augmented);
    let eval = folds.eval_ids(manifest, fold);
    assert_no_leakage(&train, &eval)?;
    let ae = if spec.lffm {
        Some(
            resources
                .autoencoder
                .as_deref()
                .ok_or_else(|| Error::MissingStage { stage: "pretrain-ae".into(), detail: "no autoencoder".into() })?,
        )
    } else {
        None
    };
    let latent_shape = ae.map_or([0; 4], |a| a.desc.latent_shape());
    let desc = hyper.descriptor(spec, manifest, latent_shape);
    let fseed = fold_seed(seed, fold);
    let init = ClassifierModel::init(desc, ae, fseed)?;
    let (model, epochs, probs) = train_and_evaluate(init, &train, &eval, hyper, hyper.scheduler_for(spec), fseed)?;

    let labels: Vec<Label> = eval.iter().map(|r| r.label).collect();
    let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
    let metrics = FoldMetrics {
        fold,
        accuracy: compute_accuracy(&probs, &labels)?,
        auc: compute_auc(&scores, &labels)?,
        n_train: train.len(),
        n_train_augmented: train.iter().filter(|r| r.is_augmented()).count(),
        n_eval: eval.len(),
        seed: fseed,
        epochs,
        eval_ids: eval.iter().map(|r| r.id.clone()).collect(),
    };
    let predictions = eval.iter().zip(probs).map(|(r, p)| (r.id.clone(), r.label, p)).collect();
    Ok(FoldOutcome { model, metrics, predictions })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub experiment: String,
    pub folds: Vec<FoldMetrics>,
    pub mean_accuracy: f64,
    pub mean_auc: f64,
    pub config_hash: String,
    pub seed: u64,
}

impl MetricsReport {
    pub fn from_folds(experiment: &str, folds: Vec<FoldMetrics>, config_hash: &str, seed: u64) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::Invalid("a report needs at least one fold".into()));
        }
        let n = folds.len() as f64;
        let mean_accuracy = folds.iter().map(|f| f.accuracy).sum::<f64>() / n;
        let mean_auc = folds.iter().map(|f| f.auc).sum::<f64>() / n;
        Ok(Self { experiment: experiment.into(), folds, mean_accuracy, mean_auc, config_hash: config_hash.into(), seed })
    }

    /// One row per fold followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fold,accuracy,auc\n");
        for f in &self.folds {
            let _ = writeln!(s, "{},{:.6},{:.6}", f.fold, f.accuracy, f.auc);
        }
        let _ = writeln!(s, "mean,{:.6},{:.6}", self.mean_accuracy, self.mean_auc);
        s
    }
}

pub struct CvOutcome<T> {
    pub report: MetricsReport,
    pub models: Vec<ClassifierModel<T>>,
    pub predictions: Vec<(String, Label, [f64; 2])>,
}

/// All `k` folds, run in parallel and merged in fold order.
pub fn run_cv<T: Scalar>(
    manifest: &DatasetManifest,
    folds: &FoldAssignment,
    spec: &ExperimentSpec,
    hyper: &ClassifierHyper,
    resources: &FoldResources<T>,
    config_hash: &str,
    seed: u64,
) -> Result<CvOutcome<T>> {
    let outcomes: Vec<FoldOutcome<T>> = (0..folds.k)
        .into_par_iter()
        .map(|f| train_one_fold(manifest, folds, f, spec, hyper, resources, seed))
        .collect::<Result<_>>()?;
    let mut models = Vec::with_capacity(outcomes.len());
    let mut metrics = Vec::with_capacity(outcomes.len());
    let mut predictions = Vec::new();
    for o in outcomes {
        models.push(o.model);
        metrics.push(o.metrics);
        predictions.extend(o.predictions);
    }
    let report = MetricsReport::from_folds(&spec.name, metrics, config_hash, seed)?;
    Ok(CvOutcome { report, models, predictions })
}
