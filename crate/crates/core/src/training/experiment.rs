//! The five comparison/ablation rows and the matrix that runs them.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cv::{run_cv, ClassifierHyper, CvOutcome, FoldResources, MetricsReport};
use crate::classifier::{ArchMode, Modalities};
use crate::data::{DatasetManifest, FoldAssignment};
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Baseline1,
    Baseline2,
    Ablation1,
    Ablation2,
    Multivit2,
    /// FNC-only unimodal row; not part of the comparison table.
    FncOnly,
}

impl Preset {
    pub const TABLE: [Preset; 5] = [Preset::Baseline1, Preset::Baseline2, Preset::Ablation1, Preset::Ablation2, Preset::Multivit2];
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub preset: Preset,
    pub name: String,
    pub mode: ArchMode,
    pub modalities: Modalities,
    pub lffm: bool,
    pub augmented: bool,
    pub warmup: bool,
}

impl ExperimentSpec {
    pub fn preset(preset: Preset) -> Self {
        use ArchMode::*;
        use Modalities::*;
        let (name, mode, modalities, lffm, augmented, warmup) = match preset {
            Preset::Baseline1 => ("Baseline1", VitUnimodal, Mri, false, false, false),
            Preset::Baseline2 => ("Baseline2", Multivit1, MriFnc, false, false, false),
            Preset::Ablation1 => ("Ablation1", Hybrid, MriFnc, false, true, true),
            Preset::Ablation2 => ("Ablation2", Hybrid, MriFnc, true, false, true),
            Preset::Multivit2 => ("MultiViT2", Hybrid, MriFnc, true, true, true),
            Preset::FncOnly => ("Baseline1-FNC", VitUnimodal, Fnc, false, false, false),
        };
        Self { preset, name: name.into(), mode, modalities, lffm, augmented, warmup }
    }

    /// Looks a row up by preset id (`multivit2`) or display name
    /// (`MultiViT2`), ignoring case.
    pub fn by_name(name: &str) -> Option<Self> {
        let all = [Preset::Baseline1, Preset::Baseline2, Preset::Ablation1, Preset::Ablation2, Preset::Multivit2, Preset::FncOnly];
        all.into_iter().map(Self::preset).find(|s| {
            let id = serde_json::to_value(s.preset).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
            id.eq_ignore_ascii_case(name) || s.name.eq_ignore_ascii_case(name)
        })
    }

    /// Directory-safe identifier.
    pub fn id(&self) -> String {
        self.name.to_ascii_lowercase()
    }

    pub fn table() -> Vec<Self> {
        Preset::TABLE.iter().map(|&p| Self::preset(p)).collect()
    }

    pub fn is_table_row(&self) -> bool {
        Preset::TABLE.contains(&self.preset)
    }

    pub fn main_model(&self) -> &'static str {
        match self.preset {
            Preset::Baseline1 | Preset::FncOnly => "ViT",
            Preset::Baseline2 => "MultiViT",
            Preset::Ablation1 | Preset::Ablation2 => "CNN/ViT",
            Preset::Multivit2 => "MultiViT2",
        }
    }

    pub fn data_label(&self) -> &'static str {
        match self.modalities {
            Modalities::Mri => "MRI",
            Modalities::Fnc => "FNC",
            Modalities::MriFnc => "MRI/FNC",
        }
    }

    fn flag(&self, on: bool) -> &'static str {
        match (self.mode, on) {
            (ArchMode::VitUnimodal, _) => "-",
            (_, true) => "Yes",
            (_, false) => "No",
        }
    }

    pub fn lffm_label(&self) -> &'static str {
        self.flag(self.lffm)
    }

    pub fn augmented_label(&self) -> &'static str {
        self.flag(self.augmented)
    }
}

pub const MATRIX_HEADER: [&str; 7] = ["Name", "Main Model", "Data", "LFFM", "Augmented", "Accuracy", "AUC"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub spec: ExperimentSpec,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub rows: Vec<MatrixRow>,
    pub config_hash: String,
    pub seed: u64,
}

impl MatrixReport {
    pub fn row(&self, preset: Preset) -> Option<&MatrixRow> {
        self.rows.iter().find(|r| r.spec.preset == preset)
    }

    pub fn complete(&self) -> bool {
        self.rows.iter().all(|r| r.report.is_some())
    }

    /// The five comparison rows only.
    pub fn table_csv(&self) -> String {
        Self::csv(self.rows.iter().filter(|r| r.spec.is_table_row()))
    }

    /// Rows outside the comparison table, same layout.
    pub fn extra_csv(&self) -> String {
        Self::csv(self.rows.iter().filter(|r| !r.spec.is_table_row()))
    }

    pub fn to_csv(&self) -> String {
        Self::csv(self.rows.iter())
    }

    fn csv<'a>(rows: impl Iterator<Item = &'a MatrixRow>) -> String {
        let mut s = MATRIX_HEADER.join(",");
        s.push('\n');
        for r in rows {
            let sp = &r.spec;
            let (acc, auc) = match &r.report {
                Some(rep) => (format!("{:.4}", rep.mean_accuracy), format!("{:.4}", rep.mean_auc)),
                None => ("failed".into(), "failed".into()),
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                sp.name,
                sp.main_model(),
                sp.data_label(),
                sp.lffm_label(),
                sp.augmented_label(),
                acc,
                auc
            );
        }
        s
    }
}

/// Runs every spec through cross-validation. A failing row is recorded and
/// the remaining rows still run. Leakage failures are never swallowed.
pub fn run_experiment_matrix<T: Scalar>(
    manifest: &DatasetManifest,
    folds: &FoldAssignment,
    specs: &[ExperimentSpec],
    hyper: &ClassifierHyper,
    resources: &FoldResources<T>,
    config_hash: &str,
    seed: u64,
) -> Result<MatrixReport> {
    run_matrix_outcomes(manifest, folds, specs, hyper, resources, config_hash, seed).map(|(report, _)| report)
}

/// [`run_experiment_matrix`] that also hands back each successful row's
/// fold models and predictions, in spec order.
pub fn run_matrix_outcomes<T: Scalar>(
    manifest: &DatasetManifest,
    folds: &FoldAssignment,
    specs: &[ExperimentSpec],
    hyper: &ClassifierHyper,
    resources: &FoldResources<T>,
    config_hash: &str,
    seed: u64,
) -> Result<(MatrixReport, Vec<Option<CvOutcome<T>>>)> {
    let results: Vec<Result<CvOutcome<T>>> =
        specs.par_iter().map(|spec| run_cv(manifest, folds, spec, hyper, resources, config_hash, seed)).collect();
    let mut rows = Vec::with_capacity(specs.len());
    let mut outcomes = Vec::with_capacity(specs.len());
    for (spec, res) in specs.iter().zip(results) {
        match res {
            Ok(o) => {
                rows.push(MatrixRow { spec: spec.clone(), report: Some(o.report.clone()), error: None });
                outcomes.push(Some(o));
            }
            Err(e @ crate::error::Error::Leakage(_)) => return Err(e),
            Err(e) => {
                rows.push(MatrixRow { spec: spec.clone(), report: None, error: Some(e.to_string()) });
                outcomes.push(None);
            }
        }
    }
    Ok((MatrixReport { rows, config_hash: config_hash.into(), seed }, outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_flags() {
        let rows = ExperimentSpec::table();
        let flags: Vec<(&str, &str, &str)> = rows.iter().map(|r| (r.name.as_str(), r.lffm_label(), r.augmented_label())).collect();
        assert_eq!(
            flags,
            [
                ("Baseline1", "-", "-"),
                ("Baseline2", "No", "No"),
                ("Ablation1", "No", "Yes"),
                ("Ablation2", "Yes", "No"),
                ("MultiViT2", "Yes", "Yes")
            ]
        );
        assert!(!ExperimentSpec::preset(Preset::FncOnly).is_table_row());
    }
}
