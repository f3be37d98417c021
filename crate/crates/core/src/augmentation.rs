//! Per-class latent diffusion augmenters and fold-scoped merging of the
//! generated subjects.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{Autoencoder, LatentTensor};
use crate::data::{normal, rng_for, DatasetManifest, FncMatrix, FoldAssignment, Label, SubjectRecord};
use crate::diffusion::{default_beta_bounds, make_schedule, sample, train_denoiser, Denoiser, DenoiserDescriptor, DenoiserHyper, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MIN_AUGMENTER_SUBJECTS: usize = 10;

/// How a generated volume is paired with an FNC matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DonorPairing {
    /// Uniformly random same-label donor.
    Random,
    /// Same-label donor whose extractor latent is closest to the sample.
    NearestLatent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentHyper {
    pub diffusion_steps: usize,
    pub denoiser: DenoiserHyper,
    pub ratio: f64,
    pub fnc_noise_std: f64,
    pub refit_per_fold: bool,
    pub pairing: DonorPairing,
}

impl Default for AugmentHyper {
    fn default() -> Self {
        Self {
            diffusion_steps: 50,
            denoiser: DenoiserHyper::default(),
            ratio: 0.5,
            fnc_noise_std: 0.02,
            refit_per_fold: false,
            pairing: DonorPairing::Random,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClassAugmenter<T> {
    pub label: Label,
    pub denoiser: Denoiser<T>,
    pub schedule: NoiseSchedule,
    pub autoencoder: Arc<Autoencoder<T>>,
    /// Latents are divided by this before diffusion and multiplied back
    /// after sampling.
    pub latent_scale: f64,
    pub corpus_size: usize,
    pub loss_curve: Vec<f64>,
}

fn posterior_means<T: Scalar>(ae: &Autoencoder<T>, records: &[&SubjectRecord]) -> Result<Vec<Tensor<T>>> {
    records.par_iter().map(|r| Ok(ae.encode(&r.volume)?.mu)).collect()
}

/// Trains an unconditional denoiser on the posterior-mean latents of the
/// real `label` subjects in `records`.
pub fn fit_augmenter<T: Scalar>(
    records: &[&SubjectRecord],
    label: Label,
    ae: &Arc<Autoencoder<T>>,
    hyper: &AugmentHyper,
    seed: u64,
) -> Result<ClassAugmenter<T>> {
    let own: Vec<&SubjectRecord> = records.iter().copied().filter(|r| r.label == label && !r.is_augmented()).collect();
    if own.len() < MIN_AUGMENTER_SUBJECTS {
        return Err(Error::Insufficient(format!(
            "augmenter for label {label} needs {MIN_AUGMENTER_SUBJECTS} subjects, found {}",
            own.len()
        )));
    }
    let latents = posterior_means(ae, &own)?;
    let n: usize = latents.iter().map(|t| t.len()).sum();
    let sq: f64 = latents.iter().flat_map(|t| t.data()).map(|v| v.to_f64_lossy().powi(2)).sum();
    let latent_scale = (sq / n as f64).sqrt().max(1e-6);
    let inv = T::c(1.0 / latent_scale);
    let corpus: Vec<Tensor<T>> = latents.iter().map(|t| t.map(|v| v * inv)).collect();

    let (b0, b1) = default_beta_bounds(hyper.diffusion_steps);
    let schedule = make_schedule(ScheduleKind::Linear, b0, b1, hyper.diffusion_steps)?;
    let desc = DenoiserDescriptor::desk(ae.desc.latent_shape(), hyper.diffusion_steps);
    let init = Denoiser::init(desc, seed ^ 0xD0)?;
    let (denoiser, loss_curve) = train_denoiser(&corpus, &init, &schedule, &hyper.denoiser, seed)?;
    Ok(ClassAugmenter {
        label,
        denoiser,
        schedule,
        autoencoder: Arc::clone(ae),
        latent_scale,
        corpus_size: corpus.len(),
        loss_curve,
    })
}

/// Symmetric Gaussian perturbation, clipped to `[-1, 1]` with a unit
/// diagonal.
pub fn perturb_fnc(f: &FncMatrix, std: f64, rng: &mut impl Rng) -> Result<FncMatrix> {
    let n = f.size();
    let mut e = f.entries().to_vec();
    for i in 0..n {
        e[i * n + i] = 1.0;
        for j in i + 1..n {
            let v = (f.get(i, j) as f64 + std * normal(rng)).clamp(-1.0, 1.0) as f32;
            e[i * n + j] = v;
            e[j * n + i] = v;
        }
    }
    FncMatrix::new(n, e)
}

fn squared_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).to_f64_lossy().powi(2)).sum()
}

/// Draws `n` labelled subjects. `donors` supplies FNC matrices and must hold
/// same-label real subjects. `folds` tags which training phases may use the
/// records.
pub fn generate_subjects<T: Scalar>(
    aug: &ClassAugmenter<T>,
    n: usize,
    donors: &[&SubjectRecord],
    hyper: &AugmentHyper,
    id_prefix: &str,
    folds: &[usize],
    seed: u64,
) -> Result<Vec<SubjectRecord>> {
    if n == 0 {
        return Err(Error::Invalid("asked to generate zero subjects".into()));
    }
    let donors: Vec<&SubjectRecord> = donors.iter().copied().filter(|d| d.label == aug.label && !d.is_augmented()).collect();
    if donors.is_empty() {
        return Err(Error::Insufficient(format!("no same-label donors for label {}", aug.label)));
    }
    let donor_latents = match hyper.pairing {
        DonorPairing::NearestLatent => Some(posterior_means(&aug.autoencoder, &donors)?),
        DonorPairing::Random => None,
    };
    let shape = aug.autoencoder.desc.latent_shape();
    let scale = T::c(aug.latent_scale);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, i as u64 + 1);
            let z = sample(&aug.denoiser, &aug.schedule, &shape, rng.gen())?;
            let z = z.map(|v| v * scale);
            let decoded = aug.autoencoder.decode(&LatentTensor::new(z.clone())?)?;
            let voxels = decoded.voxels().iter().map(|v| v.clamp(0.0, 1.0)).collect();
            let volume = crate::data::StructuralVolume::with_spacing(decoded.dims(), voxels, donors[0].volume.spacing())?;
            let donor = match &donor_latents {
                Some(lat) => {
                    let mut best = 0;
                    let mut best_d = f64::INFINITY;
                    for (j, l) in lat.iter().enumerate() {
                        let d = squared_distance(&z, l);
                        if d < best_d {
                            best = j;
                            best_d = d;
                        }
                    }
                    donors[best]
                }
                None => donors[rng.gen_range(0..donors.len())],
            };
            let fnc = perturb_fnc(&donor.fnc, hyper.fnc_noise_std, &mut rng)?;
            Ok(SubjectRecord::augmented(
                format!("{id_prefix}-{i:05}"),
                Arc::new(volume),
                Arc::new(fnc),
                aug.label,
                "synthetic",
                folds.to_vec(),
            ))
        })
        .collect()
}

/// Either one augmenter pair for every fold, or one pair per fold trained on
/// that fold's training subjects only. Pairs are indexed by label.
pub enum AugmenterSet<T> {
    Shared([ClassAugmenter<T>; 2]),
    PerFold(Vec<[ClassAugmenter<T>; 2]>),
}

/// Fits the augmenters the hyper-parameters ask for.
pub fn fit_augmenters<T: Scalar>(
    manifest: &DatasetManifest,
    folds: &FoldAssignment,
    ae: &Arc<Autoencoder<T>>,
    hyper: &AugmentHyper,
    seed: u64,
) -> Result<AugmenterSet<T>> {
    let fit_pair = |records: &[&SubjectRecord], stream: u64| -> Result<[ClassAugmenter<T>; 2]> {
        Ok([
            fit_augmenter(records, Label::Control, ae, hyper, seed.wrapping_add(stream * 2))?,
            fit_augmenter(records, Label::Patient, ae, hyper, seed.wrapping_add(stream * 2 + 1))?,
        ])
    };
    if hyper.refit_per_fold {
        (0..folds.k)
            .map(|f| fit_pair(&folds.train_records(manifest, f, false), f as u64 + 1))
            .collect::<Result<_>>()
            .map(AugmenterSet::PerFold)
    } else {
        let real: Vec<&SubjectRecord> = manifest.real_subjects().collect();
        fit_pair(&real, 0).map(AugmenterSet::Shared)
    }
}

/// Appends generated subjects tagged with the folds whose training phase may
/// use them. The fold assignment itself is untouched.
pub fn augment_training_folds<T: Scalar>(
    manifest: &DatasetManifest,
    folds: &FoldAssignment,
    augmenters: &AugmenterSet<T>,
    hyper: &AugmentHyper,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(hyper.ratio >= 0.0) || !hyper.ratio.is_finite() {
        return Err(Error::Invalid(format!("augmentation ratio {} must be non-negative", hyper.ratio)));
    }
    let mut subjects = manifest.subjects.clone();
    if hyper.ratio > 0.0 {
        let jobs: Vec<(Option<usize>, &[ClassAugmenter<T>; 2])> = match augmenters {
            AugmenterSet::Shared(pair) => vec![(None, pair)],
            AugmenterSet::PerFold(pairs) => {
                if pairs.len() != folds.k {
                    return Err(Error::Invalid(format!("{} augmenter pairs for {} folds", pairs.len(), folds.k)));
                }
                pairs.iter().enumerate().map(|(f, p)| (Some(f), p)).collect()
            }
        };
        for (fold, pair) in jobs {
            let pool: Vec<&SubjectRecord> = match fold {
                Some(f) => folds.train_records(manifest, f, false),
                None => manifest.real_subjects().collect(),
            };
            let tags: Vec<usize> = match fold {
                Some(f) => vec![f],
                None => (0..folds.k).collect(),
            };
            for label in Label::ALL {
                let aug = &pair[label.index()];
                if aug.label != label {
                    return Err(Error::Invalid(format!("augmenter slot {} holds label {}", label.index(), aug.label)));
                }
                let real = pool.iter().filter(|r| r.label == label).count();
                let n = (hyper.ratio * real as f64).ceil() as usize;
                if n == 0 {
                    continue;
                }
                let scope = fold.map_or_else(|| "all".to_string(), |f| format!("f{f}"));
                let prefix = format!("aug-{scope}-c{}", label.index());
                let stream = fold.map_or(0, |f| f as u64 + 1) * 2 + label.index() as u64;
                let gen_seed = rng_for(seed, 0xA0 + stream).gen();
                subjects.extend(generate_subjects(aug, n, &pool, hyper, &prefix, &tags, gen_seed)?);
            }
        }
    }
    DatasetManifest::new(subjects, manifest.seed, manifest.info.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perturbed_fnc_stays_valid() {
        let mut rng = rng_for(4, 0);
        let mut e = vec![0.99f32; 25];
        for i in 0..5 {
            e[i * 6] = 1.0;
        }
        let f = FncMatrix::new(5, e).unwrap();
        for _ in 0..50 {
            let p = perturb_fnc(&f, 0.5, &mut rng).unwrap();
            for i in 0..5 {
                assert_eq!(p.get(i, i), 1.0);
                for j in 0..5 {
                    assert_eq!(p.get(i, j), p.get(j, i));
                    assert!(p.get(i, j).abs() <= 1.0);
                }
            }
        }
    }
}
