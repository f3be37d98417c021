//! Attention-received saliency over the structural stream, painted back onto
//! the volume grid.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::classifier::{AttentionRecord, ClassifierModel, PatchMap, StreamTag};
use crate::container::{write_array, write_json};
use crate::data::{FncMatrix, StructuralVolume};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mean attention received by each structural token, averaged over layers,
/// heads and query rows of the structural self-attention matrices.
///
/// Cross-attention matrices take their keys from the FNC stream, so no
/// column of theirs belongs to a structural token and they do not enter.
pub fn token_attention_scores(record: &AttentionRecord) -> Result<Vec<f64>> {
    let mut mats = record.stream(StreamTag::Fused).peekable();
    let n = match mats.peek() {
        Some(m) => m.cols,
        None => return Err(Error::Invalid("attention record has no structural self-attention".into())),
    };
    let mut scores = vec![0.0; n];
    let mut count = 0usize;
    for m in mats {
        if m.cols != n || m.rows != n {
            return Err(Error::Shape(format!("structural attention {}x{} in a {n}-token record", m.rows, m.cols)));
        }
        for i in 0..m.rows {
            for (s, &a) in scores.iter_mut().zip(m.row(i)) {
                *s += a;
            }
        }
        count += m.rows;
    }
    let inv = 1.0 / count as f64;
    scores.iter_mut().for_each(|s| *s *= inv);
    Ok(scores)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyVolume {
    pub dims: [usize; 3],
    pub values: Vec<f32>,
    /// Set when the scores were constant and the volume is the flat 0.5
    /// fallback.
    pub degenerate: bool,
}

impl SaliencyVolume {
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        let [_, h, w] = self.dims;
        self.values[(z * h + y) * w + x]
    }

    /// Mean saliency inside and outside a voxel mask.
    pub fn masked_means(&self, mask: &[bool]) -> Result<(f64, f64)> {
        if mask.len() != self.values.len() {
            return Err(Error::Shape(format!("mask of {} voxels for a {}-voxel map", mask.len(), self.values.len())));
        }
        let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
        for (&v, &m) in self.values.iter().zip(mask) {
            if m {
                si += v as f64;
                ni += 1;
            } else {
                so += v as f64;
                no += 1;
            }
        }
        if ni == 0 || no == 0 {
            return Err(Error::Invalid("mask must split the volume into two non-empty parts".into()));
        }
        Ok((si / ni as f64, so / no as f64))
    }
}

/// Half-pixel source coordinate with edge clamping.
fn source(i: usize, from: usize, to: usize) -> (usize, usize, f64) {
    let s = ((i as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, (from - 1) as f64);
    let lo = s.floor() as usize;
    (lo, (lo + 1).min(from - 1), s - lo as f64)
}

/// Trilinear resampling of a `grid` volume to `dims`.
pub fn trilinear_resize(values: &[f64], grid: [usize; 3], dims: [usize; 3]) -> Vec<f64> {
    let [gd, gh, gw] = grid;
    let at = |z: usize, y: usize, x: usize| values[(z * gh + y) * gw + x];
    let mut out = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[0] {
        let (z0, z1, fz) = source(z, gd, dims[0]);
        for y in 0..dims[1] {
            let (y0, y1, fy) = source(y, gh, dims[1]);
            for x in 0..dims[2] {
                let (x0, x1, fx) = source(x, gw, dims[2]);
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let plane = |zz: usize| {
                    lerp(lerp(at(zz, y0, x0), at(zz, y0, x1), fx), lerp(at(zz, y1, x0), at(zz, y1, x1), fx), fy)
                };
                out.push(lerp(plane(z0), plane(z1), fz));
            }
        }
    }
    out
}

/// Paints token scores on the token grid, upsamples to the ambient grid and
/// min-max normalises. Constant scores give a flagged all-0.5 volume.
pub fn scores_to_volume(scores: &[f64], map: &PatchMap, ambient: [usize; 3]) -> Result<SaliencyVolume> {
    if scores.len() != map.len() {
        return Err(Error::Shape(format!("{} scores for {} tokens", scores.len(), map.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Range("non-finite saliency score".into()));
    }
    let n: usize = ambient.iter().product();
    let (lo, hi) = scores.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));
    if hi <= lo {
        return Ok(SaliencyVolume { dims: ambient, values: vec![0.5; n], degenerate: true });
    }
    let [gd, gh, gw] = map.grid;
    let mut grid = Vec::with_capacity(gd * gh * gw);
    for z in 0..gd {
        for y in 0..gh {
            for x in 0..gw {
                grid.push(scores[map.token_of(z, y, x)]);
            }
        }
    }
    let up = trilinear_resize(&grid, map.grid, ambient);
    let (ulo, uhi) = up.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));
    let span = uhi - ulo;
    let values = up.iter().map(|&v| (((v - ulo) / span) as f32).clamp(0.0, 1.0)).collect();
    Ok(SaliencyVolume { dims: ambient, values, degenerate: false })
}

/// Axial (depth) slices to render.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SliceSpec {
    Indices(Vec<usize>),
    /// `n` slices spread evenly through the interior.
    Even(usize),
}

impl SliceSpec {
    pub fn resolve(&self, depth: usize) -> Result<Vec<usize>> {
        let idx = match self {
            Self::Indices(v) => v.clone(),
            Self::Even(n) => (0..*n).map(|i| (i + 1) * depth / (n + 1)).collect(),
        };
        if idx.is_empty() {
            return Err(Error::Invalid("no slices requested".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&z| z >= depth) {
            return Err(Error::Range(format!("slice {bad} outside depth {depth}")));
        }
        Ok(idx)
    }
}

/// Runs `model` on one subject and paints its structural attention back
/// onto the volume grid.
pub fn subject_saliency<T: Scalar>(model: &ClassifierModel<T>, v: &StructuralVolume, f: &FncMatrix) -> Result<SaliencyVolume> {
    let (_, record) = model.forward(v, f)?;
    let map = record.patch_map.as_ref().ok_or_else(|| Error::Invalid("model has no structural stream to explain".into()))?;
    let scores = token_attention_scores(&record)?;
    scores_to_volume(&scores, map, v.dims())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencySummary {
    pub degenerate: bool,
    pub slices: Vec<usize>,
    pub roi_inside_mean: Option<f64>,
    pub roi_outside_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlayFiles {
    pub volume: PathBuf,
    pub slices: Vec<PathBuf>,
    pub summary: PathBuf,
}

const OVERLAY_ALPHA: f32 = 0.6;
const PIXEL_SCALE: u32 = 4;

fn ramp(s: f32) -> [f32; 3] {
    [(3.0 * s).min(1.0), (3.0 * s - 1.0).clamp(0.0, 1.0), (3.0 * s - 2.0).clamp(0.0, 1.0)]
}

/// Saliency alpha-blended over grayscale anatomy for one depth slice.
pub fn render_slice(v: &StructuralVolume, s: &SaliencyVolume, z: usize) -> RgbImage {
    let [_, h, w] = v.dims();
    RgbImage::from_fn(w as u32 * PIXEL_SCALE, h as u32 * PIXEL_SCALE, |px, py| {
        let (x, y) = ((px / PIXEL_SCALE) as usize, (py / PIXEL_SCALE) as usize);
        let gray = v.get(z, y, x).clamp(0.0, 1.0);
        let sal = s.get(z, y, x);
        let a = OVERLAY_ALPHA * sal;
        let c = ramp(sal);
        Rgb([0, 1, 2].map(|k| (((1.0 - a) * gray + a * c[k]) * 255.0).round() as u8))
    })
}

/// Writes `saliency.json`/`saliency.raw`, one PNG per requested slice and a
/// JSON summary into `dir`. `roi` is an optional voxel mask used for the
/// inside/outside means.
pub fn export_overlay(v: &StructuralVolume, s: &SaliencyVolume, dir: &Path, slices: &SliceSpec, roi: Option<&[bool]>) -> Result<OverlayFiles> {
    if v.dims() != s.dims {
        return Err(Error::Shape(format!("volume {:?} and saliency {:?} differ", v.dims(), s.dims)));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let idx = slices.resolve(s.dims[0])?;
    let volume = dir.join("saliency.json");
    write_array(&volume, &s.dims, &v.spacing(), &s.values)?;
    let mut pngs = Vec::with_capacity(idx.len());
    for &z in &idx {
        let path = dir.join(format!("slice_{z:03}.png"));
        render_slice(v, s, z).save(&path)?;
        pngs.push(path);
    }
    let (inside, outside) = match roi {
        Some(mask) => {
            let (i, o) = s.masked_means(mask)?;
            (Some(i), Some(o))
        }
        None => (None, None),
    };
    let summary = dir.join("summary.json");
    write_json(
        &summary,
        &SaliencySummary { degenerate: s.degenerate, slices: idx, roi_inside_mean: inside, roi_outside_mean: outside },
    )?;
    Ok(OverlayFiles { volume, slices: pngs, summary })
}
