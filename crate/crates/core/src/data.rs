//! Subject data: structural volumes, FNC matrices, manifests, folds and the
//! synthetic cohort generator.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{self, read_array, write_array};
use crate::error::{Error, Result};

/// Tolerance used for FNC symmetry and unit-diagonal checks.
pub const FNC_TOLERANCE: f32 = 1e-6;

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// 3D gray-matter intensity grid in `[depth, height, width]` order.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuralVolume {
    dims: [usize; 3],
    voxels: Vec<f32>,
    spacing: [f64; 3],
}

impl StructuralVolume {
    pub fn new(dims: [usize; 3], voxels: Vec<f32>) -> Result<Self> {
        Self::with_spacing(dims, voxels, [1.0; 3])
    }

    pub fn with_spacing(dims: [usize; 3], voxels: Vec<f32>, spacing: [f64; 3]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n == 0 || voxels.len() != n {
            return Err(Error::Shape(format!("volume dims {dims:?} need {n} voxels, got {}", voxels.len())));
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::Range(format!("non-finite voxel at flat index {i}")));
        }
        if spacing.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Range(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Self { dims, voxels, spacing })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[self.index(z, y, x)]
    }
}

/// Symmetric `C x C` functional network connectivity matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FncMatrix {
    size: usize,
    entries: Vec<f32>,
}

impl FncMatrix {
    /// Validates and, for asymmetry within tolerance, symmetrises.
    pub fn new(size: usize, mut entries: Vec<f32>) -> Result<Self> {
        if size == 0 || entries.len() != size * size {
            return Err(Error::Shape(format!("FNC of size {size} needs {} entries, got {}", size * size, entries.len())));
        }
        if let Some(i) = entries.iter().position(|v| !v.is_finite() || *v < -1.0 || *v > 1.0) {
            return Err(Error::Range(format!("FNC entry {} = {} outside [-1, 1]", i, entries[i])));
        }
        for i in 0..size {
            let d = entries[i * size + i];
            if (d - 1.0).abs() > FNC_TOLERANCE {
                return Err(Error::Range(format!("FNC diagonal entry {i} = {d}, expected 1")));
            }
            for j in i + 1..size {
                let (a, b) = (entries[i * size + j], entries[j * size + i]);
                if (a - b).abs() > FNC_TOLERANCE {
                    return Err(Error::Invalid(format!("FNC asymmetric at ({i}, {j}): {a} vs {b}")));
                }
                let m = (a + b) / 2.0;
                entries[i * size + j] = m;
                entries[j * size + i] = m;
            }
        }
        Ok(Self { size, entries })
    }

    /// Identity matrix (no cross-network coupling).
    pub fn identity(size: usize) -> Self {
        let mut entries = vec![0.0; size * size];
        for i in 0..size {
            entries[i * size + i] = 1.0;
        }
        Self { size, entries }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn entries(&self) -> &[f32] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.entries[i * self.size + j]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Control = 0,
    Patient = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::try_from(i as u8)
    }

    pub fn sign(self) -> f32 {
        match self {
            Label::Control => -1.0,
            Label::Patient => 1.0,
        }
    }

    pub const ALL: [Label; 2] = [Label::Control, Label::Patient];
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Label::Control),
            1 => Ok(Label::Patient),
            other => Err(Error::Range(format!("label must be 0 or 1, got {other}"))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", *self as u8)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Real,
    SyntheticGenerated,
    LdmAugmented,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub volume: Arc<StructuralVolume>,
    pub fnc: Arc<FncMatrix>,
    pub label: Label,
    pub site: String,
    provenance: Provenance,
    train_folds: Option<Vec<usize>>,
}

impl SubjectRecord {
    pub fn new(
        id: impl Into<String>,
        volume: Arc<StructuralVolume>,
        fnc: Arc<FncMatrix>,
        label: Label,
        provenance: Provenance,
        site: impl Into<String>,
    ) -> Self {
        Self { id: id.into(), volume, fnc, label, site: site.into(), provenance, train_folds: None }
    }

    /// Generated subject usable only in the training phase of `folds`.
    pub fn augmented(
        id: impl Into<String>,
        volume: Arc<StructuralVolume>,
        fnc: Arc<FncMatrix>,
        label: Label,
        site: impl Into<String>,
        folds: Vec<usize>,
    ) -> Self {
        Self {
            id: id.into(),
            volume,
            fnc,
            label,
            site: site.into(),
            provenance: Provenance::LdmAugmented,
            train_folds: Some(folds),
        }
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn is_augmented(&self) -> bool {
        self.provenance == Provenance::LdmAugmented
    }

    /// Folds whose training phase may use this record (augmented only).
    pub fn train_folds(&self) -> Option<&[usize]> {
        self.train_folds.as_deref()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorMode {
    Additive,
    Xor,
}

/// Configuration recorded alongside a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestInfo {
    pub dims: [usize; 3],
    pub fnc_size: usize,
    #[serde(default)]
    pub mode: Option<GeneratorMode>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub subjects: Vec<SubjectRecord>,
    pub seed: u64,
    pub info: ManifestInfo,
}

impl DatasetManifest {
    pub fn new(subjects: Vec<SubjectRecord>, seed: u64, info: ManifestInfo) -> Result<Self> {
        let m = Self { subjects, seed, info };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.subjects {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Invalid(format!("duplicate subject id {}", s.id)));
            }
            if s.volume.dims() != self.info.dims {
                return Err(Error::Shape(format!(
                    "subject {} volume dims {:?} differ from manifest dims {:?}",
                    s.id,
                    s.volume.dims(),
                    self.info.dims
                )));
            }
            if s.fnc.size() != self.info.fnc_size {
                return Err(Error::Shape(format!(
                    "subject {} FNC size {} differs from manifest size {}",
                    s.id,
                    s.fnc.size(),
                    self.info.fnc_size
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn real_subjects(&self) -> impl Iterator<Item = &SubjectRecord> {
        self.subjects.iter().filter(|s| !s.is_augmented())
    }

    pub fn augmented_subjects(&self) -> impl Iterator<Item = &SubjectRecord> {
        self.subjects.iter().filter(|s| s.is_augmented())
    }

    pub fn get(&self, id: &str) -> Option<&SubjectRecord> {
        self.subjects.iter().find(|s| s.id == id)
    }

    pub fn count_label(&self, label: Label) -> usize {
        self.real_subjects().filter(|s| s.label == label).count()
    }
}

pub fn load_volume(path: &Path, expected: [usize; 3]) -> Result<StructuralVolume> {
    let (header, data) = read_array(path)?;
    if header.dims.len() != 3 || header.dims[..] != expected[..] {
        return Err(Error::Shape(format!(
            "{}: dims {:?}, expected {expected:?}",
            path.display(),
            header.dims
        )));
    }
    let spacing = match header.spacing.as_slice() {
        [a, b, c] => [*a, *b, *c],
        [] => [1.0; 3],
        other => return Err(Error::Invalid(format!("spacing {other:?} must have 3 entries"))),
    };
    StructuralVolume::with_spacing(expected, data, spacing)
}

pub fn write_volume(path: &Path, v: &StructuralVolume) -> Result<()> {
    write_array(path, &v.dims, &v.spacing, &v.voxels)
}

pub fn load_fnc(path: &Path, size: usize) -> Result<FncMatrix> {
    let (header, data) = read_array(path)?;
    if header.dims != [size, size] {
        return Err(Error::Shape(format!("{}: dims {:?}, expected [{size}, {size}]", path.display(), header.dims)));
    }
    FncMatrix::new(size, data)
}

pub fn write_fnc(path: &Path, f: &FncMatrix) -> Result<()> {
    write_array(path, &[f.size, f.size], &[], &f.entries)
}

/// Min-max scaling to `[0, 1]`.
pub fn normalize_volume(v: &StructuralVolume) -> Result<StructuralVolume> {
    let (lo, hi) = v.voxels.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if !(hi > lo) {
        return Err(Error::Degenerate(format!("constant volume (value {lo})")));
    }
    let range = hi - lo;
    let voxels = v.voxels.iter().map(|&x| ((x - lo) / range).clamp(0.0, 1.0)).collect();
    StructuralVolume::with_spacing(v.dims, voxels, v.spacing)
}

// ---------------------------------------------------------------------------
// Manifest files

pub const MANIFEST_FORMAT: &str = "multivit-manifest";

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    format: String,
    version: u32,
    seed: u64,
    info: ManifestInfo,
    subjects: Vec<SubjectEntry>,
}

#[derive(Serialize, Deserialize)]
struct SubjectEntry {
    id: String,
    label: Label,
    provenance: Provenance,
    site: String,
    volume: String,
    fnc: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_folds: Option<Vec<usize>>,
}

/// Writes `manifest.json` plus one volume and one FNC container per subject
/// under `dir/subjects/`. Returns the manifest path.
pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<PathBuf> {
    let sub_dir = dir.join("subjects");
    let entries: Vec<SubjectEntry> = manifest
        .subjects
        .par_iter()
        .map(|s| -> Result<SubjectEntry> {
            let vol = format!("subjects/{}_vol.json", s.id);
            let fnc = format!("subjects/{}_fnc.json", s.id);
            write_volume(&sub_dir.join(format!("{}_vol.json", s.id)), &s.volume)?;
            write_fnc(&sub_dir.join(format!("{}_fnc.json", s.id)), &s.fnc)?;
            Ok(SubjectEntry {
                id: s.id.clone(),
                label: s.label,
                provenance: s.provenance,
                site: s.site.clone(),
                volume: vol,
                fnc,
                train_folds: s.train_folds.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let file = ManifestFile {
        format: MANIFEST_FORMAT.into(),
        version: 1,
        seed: manifest.seed,
        info: manifest.info.clone(),
        subjects: entries,
    };
    let path = dir.join("manifest.json");
    container::write_json(&path, &file)?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let file: ManifestFile = container::read_json(path)?;
    if file.format != MANIFEST_FORMAT {
        return Err(Error::Invalid(format!("{}: not a manifest", path.display())));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let info = file.info;
    let subjects = file
        .subjects
        .into_par_iter()
        .map(|e| -> Result<SubjectRecord> {
            let volume = Arc::new(load_volume(&base.join(&e.volume), info.dims)?);
            let fnc = Arc::new(load_fnc(&base.join(&e.fnc), info.fnc_size)?);
            Ok(SubjectRecord {
                id: e.id,
                volume,
                fnc,
                label: e.label,
                site: e.site,
                provenance: e.provenance,
                train_folds: e.train_folds,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    DatasetManifest::new(subjects, file.seed, info)
}

// ---------------------------------------------------------------------------
// Synthetic cohort

/// Axis-aligned ellipsoid in voxel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let p = [z as f64, y as f64, x as f64];
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }

    /// Whether the whole ellipsoid lies inside a grid of the given dims.
    pub fn fits(&self, dims: [usize; 3]) -> bool {
        (0..3).all(|a| {
            self.radii[a] > 0.0
                && self.center[a] - self.radii[a] >= 0.0
                && self.center[a] + self.radii[a] <= (dims[a] - 1) as f64
        })
    }

    pub fn mask(&self, dims: [usize; 3]) -> Vec<bool> {
        let mut m = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    m.push(self.contains(z, y, x));
                }
            }
        }
        m
    }
}

/// Planted-signal cohort parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dims: [usize; 3],
    pub fnc_size: usize,
    pub mode: GeneratorMode,
    /// Region whose mean intensity carries the volume-side signal.
    pub roi: Ellipsoid,
    /// Total ROI intensity separation between the two factor values.
    pub volume_effect: f32,
    /// Total FNC block offset separation between the two factor values.
    pub fnc_effect: f32,
    pub noise_std: f32,
    pub field_amplitude: f32,
    /// Rank of the random factor model behind each FNC matrix.
    pub fnc_rank: usize,
}

impl SynthConfig {
    /// Desk-scale defaults for the given dims and FNC size.
    pub fn desk(dims: [usize; 3], fnc_size: usize, mode: GeneratorMode) -> Self {
        let f = |a: usize, frac: f64| dims[a] as f64 * frac;
        Self {
            dims,
            fnc_size,
            mode,
            roi: Ellipsoid {
                center: [f(0, 0.36), f(1, 0.36), f(2, 0.62)],
                radii: [f(0, 0.17), f(1, 0.15), f(2, 0.17)],
            },
            volume_effect: 0.3,
            fnc_effect: 0.5,
            noise_std: 0.03,
            field_amplitude: 0.04,
            fnc_rank: 4,
        }
    }

    /// Rows `[0, C/2)` by columns `[C/2, C)` and its mirror.
    pub fn fnc_block(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let h = self.fnc_size / 2;
        (0..h, h..self.fnc_size)
    }

    pub fn brain(&self) -> Ellipsoid {
        let d = self.dims.map(|n| n as f64);
        Ellipsoid {
            center: [(d[0] - 1.0) / 2.0, (d[1] - 1.0) / 2.0, (d[2] - 1.0) / 2.0],
            radii: [d[0] * 0.45, d[1] * 0.45, d[2] * 0.45],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 2) {
            return Err(Error::Invalid(format!("volume dims {:?} too small", self.dims)));
        }
        if self.fnc_size < 2 {
            return Err(Error::Invalid("FNC size must be at least 2".into()));
        }
        if !self.roi.fits(self.dims) {
            return Err(Error::Invalid(format!("ROI {:?} does not fit dims {:?}", self.roi, self.dims)));
        }
        Ok(())
    }
}

/// Hidden factors behind one synthetic subject.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubjectFactors {
    pub label: Label,
    /// Drives the volume ROI (+1 / -1).
    pub volume_factor: f32,
    /// Drives the FNC block (+1 / -1).
    pub fnc_factor: f32,
}

/// Draws the label-independent parts and combines them with the class signal.
pub fn synthesize_subject(cfg: &SynthConfig, seed: u64, index: usize, label: Label) -> (StructuralVolume, FncMatrix, SubjectFactors) {
    let mut rng = rng_for(seed, index as u64 + 1);
    let (a, b) = match cfg.mode {
        GeneratorMode::Additive => (label.sign(), label.sign()),
        GeneratorMode::Xor => {
            let a = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            // label = 1 iff a * b = 1
            (a, a * label.sign())
        }
    };
    let volume = synth_volume(cfg, &mut rng, a);
    let fnc = synth_fnc(cfg, &mut rng, b);
    (volume, fnc, SubjectFactors { label, volume_factor: a, fnc_factor: b })
}

fn synth_volume(cfg: &SynthConfig, rng: &mut ChaCha8Rng, factor: f32) -> StructuralVolume {
    let [d, h, w] = cfg.dims;
    let brain = cfg.brain();
    // per-subject smooth field from one low-frequency cosine per axis
    let mut axis = |n: usize| -> Vec<f64> {
        let phase = rng.gen::<f64>() * std::f64::consts::TAU;
        let freq = 1.0 + rng.gen::<f64>();
        (0..n).map(|i| (freq * std::f64::consts::PI * i as f64 / n as f64 + phase).cos()).collect()
    };
    let (fz, fy, fx) = (axis(d), axis(h), axis(w));
    let gain = 1.0 + 0.05 * normal(rng);
    let shift = factor * cfg.volume_effect / 2.0;
    let mut voxels = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !brain.contains(z, y, x) {
                    voxels.push(0.0);
                    continue;
                }
                // radial shell: brighter rim, dimmer core
                let r = (0..3)
                    .map(|a| {
                        let p = [z, y, x][a] as f64;
                        ((p - brain.center[a]) / brain.radii[a]).powi(2)
                    })
                    .sum::<f64>()
                    .sqrt();
                let anatomy = 0.35 + 0.25 * r;
                let field = cfg.field_amplitude as f64 * (fz[z] + fy[y] + fx[x]) / 3.0;
                let mut v = gain * anatomy + field + cfg.noise_std as f64 * normal(rng);
                if cfg.roi.contains(z, y, x) {
                    v += shift as f64;
                }
                voxels.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    StructuralVolume::new(cfg.dims, voxels).expect("generator produces valid volumes")
}

fn synth_fnc(cfg: &SynthConfig, rng: &mut ChaCha8Rng, factor: f32) -> FncMatrix {
    let c = cfg.fnc_size;
    let r = cfg.fnc_rank;
    let loadings: Vec<f64> = (0..c * r).map(|_| normal(rng) * 0.6).collect();
    let mut cov = vec![0.0f64; c * c];
    for i in 0..c {
        for j in 0..c {
            let dot: f64 = (0..r).map(|k| loadings[i * r + k] * loadings[j * r + k]).sum();
            cov[i * c + j] = dot + if i == j { 1.0 } else { 0.0 };
        }
    }
    let (rows, cols) = cfg.fnc_block();
    let offset = (factor * cfg.fnc_effect / 2.0) as f64;
    let mut entries = vec![0.0f32; c * c];
    for i in 0..c {
        for j in 0..c {
            let mut v = cov[i * c + j] / (cov[i * c + i] * cov[j * c + j]).sqrt();
            if (rows.contains(&i) && cols.contains(&j)) || (rows.contains(&j) && cols.contains(&i)) {
                v += offset;
            }
            entries[i * c + j] = if i == j { 1.0 } else { v.clamp(-1.0, 1.0) as f32 };
        }
    }
    FncMatrix::new(c, entries).expect("generator produces valid FNC")
}

/// Balanced synthetic cohort; a pure function of `(n, cfg, seed)`.
pub fn synthesize_dataset(n: usize, cfg: &SynthConfig, seed: u64) -> Result<DatasetManifest> {
    if n < 10 {
        return Err(Error::Invalid(format!("need at least 10 subjects, got {n}")));
    }
    if n % 2 != 0 {
        return Err(Error::Invalid(format!("subject count must be even for a balanced split, got {n}")));
    }
    cfg.validate()?;
    let mut labels: Vec<Label> = (0..n).map(|i| if i < n / 2 { Label::Control } else { Label::Patient }).collect();
    labels.shuffle(&mut rng_for(seed, 0));
    let subjects = labels
        .par_iter()
        .enumerate()
        .map(|(i, &label)| {
            let (v, f, _) = synthesize_subject(cfg, seed, i, label);
            SubjectRecord::new(
                format!("sub-{i:05}"),
                Arc::new(v),
                Arc::new(f),
                label,
                Provenance::SyntheticGenerated,
                format!("site-{}", (b'a' + (i % 3) as u8) as char),
            )
        })
        .collect();
    DatasetManifest::new(subjects, seed, ManifestInfo { dims: cfg.dims, fnc_size: cfg.fnc_size, mode: Some(cfg.mode) })
}

// ---------------------------------------------------------------------------
// Folds

/// Stratified assignment of non-augmented subjects to `k` folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.folds.get(id).copied()
    }

    /// Ids evaluated in `fold`, in manifest order.
    pub fn eval_ids<'m>(&self, manifest: &'m DatasetManifest, fold: usize) -> Vec<&'m SubjectRecord> {
        manifest.real_subjects().filter(|s| self.fold_of(&s.id) == Some(fold)).collect()
    }

    /// Training records for `fold`: real subjects of other folds, plus
    /// augmented records tagged for this fold when `augmented` is set.
    pub fn train_records<'m>(&self, manifest: &'m DatasetManifest, fold: usize, augmented: bool) -> Vec<&'m SubjectRecord> {
        manifest
            .subjects
            .iter()
            .filter(|s| match s.train_folds() {
                None => self.fold_of(&s.id).is_some_and(|f| f != fold),
                Some(tags) => augmented && tags.contains(&fold),
            })
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.folds.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

pub fn make_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Invalid(format!("fold count must be at least 2, got {k}")));
    }
    let mut rng = rng_for(seed, 0xF01D);
    let mut order = Vec::new();
    for label in [Label::Patient, Label::Control] {
        let mut ids: Vec<&str> = manifest.real_subjects().filter(|s| s.label == label).map(|s| s.id.as_str()).collect();
        if ids.len() < k {
            return Err(Error::Insufficient(format!("class {label} has {} subjects, need at least {k}", ids.len())));
        }
        ids.shuffle(&mut rng);
        order.extend(ids);
    }
    let folds = order.into_iter().enumerate().map(|(i, id)| (id.to_string(), i % k)).collect();
    Ok(FoldAssignment { k, folds })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(mode: GeneratorMode) -> SynthConfig {
        SynthConfig::desk([12, 14, 12], 8, mode)
    }

    #[test]
    fn fnc_rejects_out_of_range_entry() {
        let mut e = FncMatrix::identity(3).entries().to_vec();
        e[1] = 1.5;
        e[3] = 1.5;
        assert!(matches!(FncMatrix::new(3, e), Err(Error::Range(_))));
    }

    #[test]
    fn fnc_rejects_asymmetry() {
        let mut e = FncMatrix::identity(3).entries().to_vec();
        e[1] = 0.2;
        e[3] = 0.1;
        assert!(matches!(FncMatrix::new(3, e), Err(Error::Invalid(_))));
    }

    #[test]
    fn fnc_symmetrises_round_off() {
        let mut e = FncMatrix::identity(3).entries().to_vec();
        e[1] = 0.3;
        e[3] = 0.3 + 1e-8;
        let m = FncMatrix::new(3, e).unwrap();
        assert_eq!(m.get(0, 1), m.get(1, 0));
    }

    #[test]
    fn normalize_examples() {
        let v = StructuralVolume::new([3, 1, 1], vec![0.0, 5.0, 10.0]).unwrap();
        assert_eq!(normalize_volume(&v).unwrap().voxels(), &[0.0, 0.5, 1.0]);
        let u = StructuralVolume::new([3, 1, 1], vec![0.0, 0.25, 1.0]).unwrap();
        assert_eq!(normalize_volume(&u).unwrap(), u);
        let c = StructuralVolume::new([2, 1, 1], vec![3.0, 3.0]).unwrap();
        assert!(matches!(normalize_volume(&c), Err(Error::Degenerate(_))));
    }

    #[test]
    fn volume_rejects_nan() {
        assert!(StructuralVolume::new([2, 1, 1], vec![0.0, f32::NAN]).is_err());
    }

    #[test]
    fn synth_rejects_odd_and_small() {
        let cfg = tiny_cfg(GeneratorMode::Additive);
        assert!(synthesize_dataset(11, &cfg, 1).is_err());
        assert!(synthesize_dataset(8, &cfg, 1).is_err());
    }

    #[test]
    fn synth_rejects_roi_outside() {
        let mut cfg = tiny_cfg(GeneratorMode::Additive);
        cfg.roi.center = [0.0, 0.0, 0.0];
        assert!(synthesize_dataset(10, &cfg, 1).is_err());
    }

    #[test]
    fn xor_factors_match_label() {
        let cfg = tiny_cfg(GeneratorMode::Xor);
        for i in 0..20 {
            let label = Label::ALL[i % 2];
            let (_, _, f) = synthesize_subject(&cfg, 3, i, label);
            assert_eq!(f.volume_factor * f.fnc_factor > 0.0, label == Label::Patient);
        }
    }

    #[test]
    fn folds_exclude_augmented() {
        let cfg = tiny_cfg(GeneratorMode::Additive);
        let mut m = synthesize_dataset(20, &cfg, 2).unwrap();
        let donor = m.subjects[0].clone();
        m.subjects.push(SubjectRecord::augmented("aug-0", donor.volume, donor.fnc, donor.label, "ldm", vec![0, 1]));
        let folds = make_folds(&m, 5, 1).unwrap();
        assert!(folds.fold_of("aug-0").is_none());
        assert_eq!(folds.folds.len(), 20);
        let train = folds.train_records(&m, 0, true);
        assert!(train.iter().any(|s| s.id == "aug-0"));
        let train = folds.train_records(&m, 2, true);
        assert!(!train.iter().any(|s| s.id == "aug-0"));
    }

    #[test]
    fn folds_need_k_per_class() {
        let cfg = tiny_cfg(GeneratorMode::Additive);
        let m = synthesize_dataset(10, &cfg, 2).unwrap();
        assert!(matches!(make_folds(&m, 6, 0), Err(Error::Insufficient(_))));
    }
}
