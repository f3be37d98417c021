//! One function per subcommand. Every stage reads its inputs from the run
//! directory, checks the upstream stamps and writes a stamp of its own.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use serde_json::json;

use multivit::augmentation::AugmenterSet;
use multivit::config::RunConfig;
use multivit::container::{read_json, write_json};
use multivit::data::{read_manifest, write_manifest, DatasetManifest, FoldAssignment, Label};
use multivit::pipeline::{self, stage_metadata};
use multivit::saliency::{export_overlay, subject_saliency, SliceSpec};
use multivit::training::cv::FoldMetrics;
use multivit::training::metrics::{compute_accuracy, compute_auc};
use multivit::training::{run_cv, run_experiment_matrix, ExperimentSpec, FoldResources, MetricsReport};
use multivit::{Autoencoder32, Error};

use crate::layout::{require, stamp, Layout};
use crate::{Cli, Command};

pub const STAGE_DATA: &str = "synth-data";
pub const STAGE_AE: &str = "pretrain-ae";
pub const STAGE_LDM: &str = "train-ldm";
pub const STAGE_AUGMENT: &str = "augment";
pub const STAGE_TRAIN: &str = "train";

struct Ctx {
    cfg: RunConfig,
    hash: String,
    layout: Layout,
    allow_mismatch: bool,
}

impl Ctx {
    fn require(&self, dir: &Path, stage: &str) -> anyhow::Result<()> {
        require(dir, stage, &self.cfg, self.allow_mismatch).map(|_| ())
    }

    fn data(&self) -> anyhow::Result<(DatasetManifest, FoldAssignment)> {
        self.require(&self.layout.data(), STAGE_DATA)?;
        let manifest = read_manifest(&self.layout.manifest())?;
        let folds: FoldAssignment = read_json(&self.layout.folds())?;
        Ok((manifest, folds))
    }

    fn autoencoder(&self) -> anyhow::Result<Arc<Autoencoder32>> {
        self.require(&self.layout.ae(), STAGE_AE)?;
        let (_, ae) = pipeline::load_autoencoder(&self.layout.ae_checkpoint())?;
        Ok(Arc::new(ae))
    }

    fn augmented(&self) -> anyhow::Result<Arc<DatasetManifest>> {
        self.require(&self.layout.augmented(), STAGE_AUGMENT)?;
        Ok(Arc::new(read_manifest(&self.layout.augmented_manifest())?))
    }
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = crate::layout::load_config(cli.config.as_deref(), cli.preset, cli.seed)?;
    let ctx = Ctx { hash: cfg.hash(), cfg, layout: Layout::new(&cli.out), allow_mismatch: cli.allow_config_mismatch };
    match &cli.command {
        Command::SynthData => synth_data(&ctx),
        Command::PretrainAe => pretrain_ae(&ctx),
        Command::TrainLdm => train_ldm(&ctx),
        Command::Augment => augment(&ctx),
        Command::Train { experiment } => train(&ctx, experiment),
        Command::Evaluate { experiment } => evaluate(&ctx, experiment),
        Command::Saliency { experiment, overlays, slices } => saliency(&ctx, experiment, *overlays, *slices),
        Command::Matrix => matrix(&ctx),
    }
}

fn experiment(name: &str) -> anyhow::Result<ExperimentSpec> {
    ExperimentSpec::by_name(name).ok_or_else(|| {
        Error::Invalid(format!("unknown experiment `{name}` (expected baseline1, baseline2, ablation1, ablation2, multivit2 or fnc-only)")).into()
    })
}

fn synth_data(ctx: &Ctx) -> anyhow::Result<()> {
    let (manifest, folds) = pipeline::synthesize(&ctx.cfg)?;
    let dir = ctx.layout.data();
    let path = write_manifest(&dir, &manifest).context("writing synthetic cohort")?;
    write_json(&ctx.layout.folds(), &folds)?;
    stamp(&dir, STAGE_DATA, &ctx.cfg)?;
    println!("{} subjects, {} folds -> {}", manifest.len(), folds.k, path.display());
    Ok(())
}

fn pretrain_ae(ctx: &Ctx) -> anyhow::Result<()> {
    let (manifest, _) = ctx.data()?;
    let (ae, losses) = pipeline::pretrain_autoencoder::<f32>(&manifest, &ctx.cfg)?;
    let dir = ctx.layout.ae();
    let meta = stage_metadata(STAGE_AE, ctx.cfg.seed, json!({ "epochs": losses.len() }));
    pipeline::save_autoencoder(&ctx.layout.ae_checkpoint(), &ae, Some(ctx.hash.clone()), meta)?;
    write_json(&dir.join("losses.json"), &json!({ "config_hash": ctx.hash, "epochs": losses }))?;
    stamp(&dir, STAGE_AE, &ctx.cfg)?;
    if let Some(last) = losses.last() {
        println!("autoencoder trained for {} epochs, final loss {:?}", losses.len(), last);
    }
    Ok(())
}

fn train_ldm(ctx: &Ctx) -> anyhow::Result<()> {
    let (manifest, folds) = ctx.data()?;
    let ae = ctx.autoencoder()?;
    let set = pipeline::fit_augmenter_set(&manifest, &folds, &ae, &ctx.cfg)?;
    for (scope, pair) in pipeline::augmenter_scopes(&set) {
        for aug in pair {
            let label = aug.label.index();
            let meta = stage_metadata(STAGE_LDM, ctx.cfg.seed, json!({ "scope": scope, "label": label }));
            pipeline::save_augmenter(&ctx.layout.augmenter_checkpoint(&scope, label), aug, Some(ctx.hash.clone()), meta)?;
        }
    }
    stamp(&ctx.layout.ldm(), STAGE_LDM, &ctx.cfg)?;
    println!("fitted augmenters for scopes {:?}", pipeline::expected_scopes(&ctx.cfg));
    Ok(())
}

fn augment(ctx: &Ctx) -> anyhow::Result<()> {
    let (manifest, folds) = ctx.data()?;
    let ae = ctx.autoencoder()?;
    ctx.require(&ctx.layout.ldm(), STAGE_LDM)?;
    let mut pairs = Vec::new();
    for scope in pipeline::expected_scopes(&ctx.cfg) {
        let load = |label: Label| -> anyhow::Result<_> {
            let path = ctx.layout.augmenter_checkpoint(&scope, label.index());
            let (_, aug) = pipeline::load_augmenter(&path, &ae).with_context(|| format!("loading {}", path.display()))?;
            Ok(aug)
        };
        pairs.push([load(Label::from_index(0)?)?, load(Label::from_index(1)?)?]);
    }
    let set = if ctx.cfg.augmentation.refit_per_fold {
        AugmenterSet::PerFold(pairs)
    } else {
        AugmenterSet::Shared(pairs.pop().expect("one shared scope"))
    };
    let augmented = pipeline::generate_augmented(&manifest, &folds, &set, &ctx.cfg)?;
    let dir = ctx.layout.augmented();
    write_manifest(&dir, &augmented)?;
    stamp(&dir, STAGE_AUGMENT, &ctx.cfg)?;
    println!("{} generated subjects -> {}", augmented.augmented_subjects().count(), dir.display());
    Ok(())
}

fn resources(ctx: &Ctx, spec: &ExperimentSpec) -> anyhow::Result<FoldResources<f32>> {
    let autoencoder = if spec.lffm { Some(ctx.autoencoder()?) } else { None };
    let augmented = if spec.augmented { Some(ctx.augmented()?) } else { None };
    Ok(FoldResources { autoencoder, augmented })
}

fn predictions_csv(rows: &[(String, Label, [f64; 2])]) -> String {
    let mut s = String::from("subject,label,p_control,p_patient\n");
    for (id, label, p) in rows {
        let _ = writeln!(s, "{id},{},{:.6},{:.6}", label.index(), p[0], p[1]);
    }
    s
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn train(ctx: &Ctx, name: &str) -> anyhow::Result<()> {
    let spec = experiment(name)?;
    let (manifest, folds) = ctx.data()?;
    let res = resources(ctx, &spec)?;
    let out = run_cv(&manifest, &folds, &spec, &ctx.cfg.classifier, &res, &ctx.hash, ctx.cfg.seed)?;
    let id = spec.id();
    let dir = ctx.layout.train(&id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (model, fm) in out.models.iter().zip(&out.report.folds) {
        let meta = stage_metadata(STAGE_TRAIN, ctx.cfg.seed, json!({ "experiment": spec.name, "fold_metrics": fm }));
        pipeline::save_classifier(&ctx.layout.fold_checkpoint(&id, fm.fold), model, Some(ctx.hash.clone()), meta)?;
    }
    write_json(&dir.join("metrics.json"), &out.report)?;
    write_text(&dir.join("metrics.csv"), &out.report.to_csv())?;
    write_text(&dir.join("predictions.csv"), &predictions_csv(&out.predictions))?;
    stamp(&dir, STAGE_TRAIN, &ctx.cfg)?;
    println!("{}: accuracy {:.4}, AUC {:.4}", spec.name, out.report.mean_accuracy, out.report.mean_auc);
    Ok(())
}

fn evaluate(ctx: &Ctx, name: &str) -> anyhow::Result<()> {
    let spec = experiment(name)?;
    let id = spec.id();
    let (manifest, folds) = ctx.data()?;
    ctx.require(&ctx.layout.train(&id), STAGE_TRAIN)?;
    let mut fold_metrics = Vec::with_capacity(folds.k);
    let mut predictions = Vec::new();
    let mut hash = None;
    for f in 0..folds.k {
        let path = ctx.layout.fold_checkpoint(&id, f);
        let (header, model) = pipeline::load_classifier::<f32>(&path).with_context(|| format!("loading {}", path.display()))?;
        let trained: FoldMetrics = serde_json::from_value(header.metadata["details"]["fold_metrics"].clone())
            .map_err(|e| Error::Invalid(format!("{}: fold metrics missing from metadata: {e}", path.display())))?;
        let eval = folds.eval_ids(&manifest, f);
        let probs = eval
            .iter()
            .map(|r| model.prepare(&r.volume, &r.fnc).and_then(|x| model.predict(&x)))
            .collect::<multivit::error::Result<Vec<_>>>()?;
        let labels: Vec<Label> = eval.iter().map(|r| r.label).collect();
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        fold_metrics.push(FoldMetrics {
            fold: f,
            accuracy: compute_accuracy(&probs, &labels)?,
            auc: compute_auc(&scores, &labels)?,
            n_eval: eval.len(),
            eval_ids: eval.iter().map(|r| r.id.clone()).collect(),
            ..trained
        });
        predictions.extend(eval.iter().zip(probs).map(|(r, p)| (r.id.clone(), r.label, p)));
        hash = header.config_hash.or(hash);
    }
    let report = MetricsReport::from_folds(&spec.name, fold_metrics, hash.as_deref().unwrap_or(&ctx.hash), ctx.cfg.seed)?;
    let dir = ctx.layout.evaluate(&id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_json(&dir.join("metrics.json"), &report)?;
    write_text(&dir.join("metrics.csv"), &report.to_csv())?;
    write_text(&dir.join("predictions.csv"), &predictions_csv(&predictions))?;
    println!("{}: accuracy {:.4}, AUC {:.4}", spec.name, report.mean_accuracy, report.mean_auc);
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SubjectSaliency {
    subject: String,
    fold: usize,
    degenerate: bool,
    roi_inside_mean: Option<f64>,
    roi_outside_mean: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct SaliencyReport {
    experiment: String,
    config_hash: String,
    n_subjects: usize,
    n_degenerate: usize,
    roi_inside_mean: Option<f64>,
    roi_outside_mean: Option<f64>,
    subjects: Vec<SubjectSaliency>,
}

fn saliency(ctx: &Ctx, name: &str, overlays: usize, slices: usize) -> anyhow::Result<()> {
    let spec = experiment(name)?;
    let id = spec.id();
    let (manifest, folds) = ctx.data()?;
    ctx.require(&ctx.layout.train(&id), STAGE_TRAIN)?;
    let mask = manifest.info.mode.map(|_| ctx.cfg.synth().roi.mask(manifest.info.dims));
    let dir = ctx.layout.saliency(&id);
    let slice_spec = SliceSpec::Even(slices);
    let mut subjects = Vec::new();
    for f in 0..folds.k {
        let path = ctx.layout.fold_checkpoint(&id, f);
        let (_, model) = pipeline::load_classifier::<f32>(&path).with_context(|| format!("loading {}", path.display()))?;
        for (i, r) in folds.eval_ids(&manifest, f).into_iter().enumerate() {
            let s = subject_saliency(&model, &r.volume, &r.fnc)?;
            let (inside, outside) = match &mask {
                Some(m) => {
                    let (a, b) = s.masked_means(m)?;
                    (Some(a), Some(b))
                }
                None => (None, None),
            };
            if i < overlays {
                export_overlay(&r.volume, &s, &dir.join(&r.id), &slice_spec, mask.as_deref())?;
            }
            subjects.push(SubjectSaliency { subject: r.id.clone(), fold: f, degenerate: s.degenerate, roi_inside_mean: inside, roi_outside_mean: outside });
        }
    }
    let mean = |get: fn(&SubjectSaliency) -> Option<f64>| -> Option<f64> {
        let v: Vec<f64> = subjects.iter().filter_map(get).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let report = SaliencyReport {
        experiment: spec.name.clone(),
        config_hash: ctx.hash.clone(),
        n_subjects: subjects.len(),
        n_degenerate: subjects.iter().filter(|s| s.degenerate).count(),
        roi_inside_mean: mean(|s| s.roi_inside_mean),
        roi_outside_mean: mean(|s| s.roi_outside_mean),
        subjects,
    };
    write_json(&dir.join("summary.json"), &report)?;
    match (report.roi_inside_mean, report.roi_outside_mean) {
        (Some(a), Some(b)) => println!("{}: saliency inside ROI {a:.4}, outside {b:.4} over {} subjects", spec.name, report.n_subjects),
        _ => println!("{}: saliency for {} subjects", spec.name, report.n_subjects),
    }
    Ok(())
}

fn optional<T>(r: anyhow::Result<T>) -> anyhow::Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e) if e.downcast_ref::<Error>().is_some_and(|e| matches!(e, Error::MissingStage { .. })) => Ok(None),
        Err(e) => Err(e),
    }
}

fn matrix(ctx: &Ctx) -> anyhow::Result<()> {
    let (manifest, folds) = ctx.data()?;
    let res = FoldResources { autoencoder: optional(ctx.autoencoder())?, augmented: optional(ctx.augmented())? };
    let specs = ctx.cfg.experiments();
    let report = run_experiment_matrix(&manifest, &folds, &specs, &ctx.cfg.classifier, &res, &ctx.hash, ctx.cfg.seed)?;
    let dir = ctx.layout.matrix();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let table = report.table_csv();
    write_text(&dir.join("matrix.csv"), &table)?;
    if report.rows.iter().any(|r| !r.spec.is_table_row()) {
        write_text(&dir.join("extra.csv"), &report.extra_csv())?;
    }
    write_json(&dir.join("matrix.json"), &report)?;
    stamp(&dir, "matrix", &ctx.cfg)?;
    print!("{table}");
    for r in report.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!("{} failed: {}", r.spec.name, r.error.as_deref().unwrap_or_default());
    }
    Ok(())
}
