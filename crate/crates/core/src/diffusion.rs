//! Latent-space DDPM: variance schedule, forward noising, epsilon-predicting
//! denoiser, ancestral sampler and denoiser training.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{normal, rng_for};
use crate::error::{Error, Result};
use crate::graph::{nearest_resize_index, Bound, Graph, Var};
use crate::params::{scaled_normal, Params};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::optim::{adamw_step, AdamWConfig, OptimizerState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Linear,
}

/// Per-timestep tables, indexed `t - 1` for `t = 1..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Range(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// Schedule from explicit betas, each in `(0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Invalid("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Range(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alphas, alpha_bars })
    }
}

pub fn make_schedule(kind: ScheduleKind, beta_start: f64, beta_end: f64, steps: usize) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Invalid("T must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Range(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")));
    }
    let betas = match kind {
        ScheduleKind::Linear if steps == 1 => vec![beta_start],
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect(),
    };
    NoiseSchedule::from_betas(betas)
}

/// Default linear bounds for `T` steps: the 1000-step `1e-4 .. 0.02` range
/// rescaled by `1000 / T`, clipped into `(0, 1)`.
pub fn default_beta_bounds(steps: usize) -> (f64, f64) {
    let k = 1000.0 / steps as f64;
    let clip = |b: f64| b.clamp(1e-8, 0.999);
    (clip(1e-4 * k), clip(0.02 * k))
}

/// One forward kernel step: `sqrt(1 - beta) * z + sqrt(beta) * noise`.
/// `beta = 0` is accepted as the degenerate identity.
pub fn forward_step<T: Scalar>(z_prev: &Tensor<T>, beta: f64, noise: &Tensor<T>) -> Result<Tensor<T>> {
    noise.expect_shape(z_prev.shape())?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Range(format!("beta {beta} outside [0, 1]")));
    }
    let a = T::c((1.0 - beta).sqrt());
    let b = T::c(beta.sqrt());
    z_prev.zip_map(noise, |z, e| a * z + b * e)
}

/// Closed-form marginal `q(z_t | z_0)`.
pub fn forward_marginal<T: Scalar>(z0: &Tensor<T>, t: usize, schedule: &NoiseSchedule, noise: &Tensor<T>) -> Result<Tensor<T>> {
    schedule.check_t(t)?;
    noise.expect_shape(z0.shape())?;
    let ab = schedule.alpha_bar(t);
    let a = T::c(ab.sqrt());
    let b = T::c((1.0 - ab).sqrt());
    z0.zip_map(noise, |z, e| a * z + b * e)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserDescriptor {
    /// `[C_z, d, h, w]`.
    pub latent_shape: [usize; 4],
    pub width: usize,
    pub time_dim: usize,
    pub steps: usize,
}

impl DenoiserDescriptor {
    pub fn desk(latent_shape: [usize; 4], steps: usize) -> Self {
        Self { latent_shape, width: 32, time_dim: 32, steps }
    }

    fn spatial(&self) -> [usize; 3] {
        [self.latent_shape[1], self.latent_shape[2], self.latent_shape[3]]
    }

    fn coarse(&self) -> [usize; 3] {
        self.spatial().map(|n| (n + 2 - 3) / 2 + 1)
    }
}

/// Two-level convolutional epsilon-predictor over latent channels with an
/// additive sinusoidal timestep embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<T> {
    pub desc: DenoiserDescriptor,
    pub params: Params<T>,
    /// Sinusoidal embedding per timestep, `[T, time_dim]`; not trained.
    pub time_table: Tensor<T>,
}

pub fn sinusoidal_table<T: Scalar>(steps: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(steps * dim);
    for t in 1..=steps {
        for i in 0..dim {
            let k = i % half.max(1);
            let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
            let arg = t as f64 * freq;
            data.push(T::c(if i < half { arg.sin() } else { arg.cos() }));
        }
    }
    Tensor::from_vec(&[steps, dim], data).expect("table shape")
}

fn conv<T: Scalar>(g: &mut Graph<'_, T>, p: &Bound<'_, T>, name: &str, x: Var, stride: usize) -> Var {
    let y = g.conv3d(x, p.var(&format!("{name}.w")), stride, 1);
    g.add_channel_bias(y, p.var(&format!("{name}.b")))
}

/// Noise-prediction graph for one latent at timestep `t`.
pub fn predict_noise_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: &Bound<'_, T>,
    desc: &DenoiserDescriptor,
    time_row: Var,
    z: Var,
) -> Var {
    let w = desc.width;
    let fine = desc.spatial();
    let coarse = desc.coarse();
    // time embedding -> per-channel shifts for both levels
    let temb = g.reshape(time_row, &[1, desc.time_dim]);
    let t1 = g.matmul(temb, p.var("time.0.w"));
    let t1 = g.add_row_bias(t1, p.var("time.0.b"));
    let t1 = g.silu(t1);
    let shift1 = g.matmul(t1, p.var("time.1.w"));
    let shift1 = g.reshape(shift1, &[w]);
    let shift2 = g.matmul(t1, p.var("time.2.w"));
    let shift2 = g.reshape(shift2, &[w]);

    let h1 = conv(g, p, "in", z, 1);
    let h1 = g.add_channel_bias(h1, shift1);
    let h1 = g.silu(h1);
    let h2 = conv(g, p, "down", h1, 2);
    let h2 = g.add_channel_bias(h2, shift2);
    let h2 = g.silu(h2);
    let h3 = conv(g, p, "mid", h2, 1);
    let h3 = g.silu(h3);
    let up = g.gather(h3, Arc::new(nearest_resize_index(w, coarse, fine)), &[w, fine[0], fine[1], fine[2]]);
    let cat = g.concat(&[up, h1]);
    let h4 = conv(g, p, "up", cat, 1);
    let h4 = g.silu(h4);
    conv(g, p, "out", h4, 1)
}

impl<T: Scalar> Denoiser<T> {
    pub fn init(desc: DenoiserDescriptor, seed: u64) -> Result<Self> {
        if desc.latent_shape.iter().any(|&n| n == 0) || desc.width == 0 || desc.time_dim < 2 || desc.steps == 0 {
            return Err(Error::Invalid(format!("invalid denoiser descriptor {desc:?}")));
        }
        let mut rng = rng_for(seed, 0xD1F);
        let c = desc.latent_shape[0];
        let w = desc.width;
        let td = desc.time_dim;
        let mut p = Params::new();
        p.insert("time.0.w", scaled_normal(&mut rng, &[td, w], td, 1.0));
        p.insert("time.0.b", Tensor::zeros(&[w]));
        p.insert("time.1.w", scaled_normal(&mut rng, &[w, w], w, 1.0));
        p.insert("time.2.w", scaled_normal(&mut rng, &[w, w], w, 1.0));
        for (name, ci, co) in [("in", c, w), ("down", w, w), ("mid", w, w), ("up", 2 * w, w), ("out", w, c)] {
            p.insert(format!("{name}.w"), scaled_normal(&mut rng, &[co, ci, 3, 3, 3], ci * 27, 1.0));
            p.insert(format!("{name}.b"), Tensor::zeros(&[co]));
        }
        let time_table = sinusoidal_table(desc.steps, td);
        Ok(Self { desc, params: p, time_table })
    }

    pub fn from_params(desc: DenoiserDescriptor, params: Params<T>) -> Result<Self> {
        let fresh = Self::init(desc, 0)?;
        if fresh.params.specs() != params.specs() {
            return Err(Error::Shape("parameter layout does not match the descriptor".into()));
        }
        Ok(Self { params, ..fresh })
    }

    fn time_row(&self, t: usize) -> Tensor<T> {
        let d = self.desc.time_dim;
        Tensor::from_vec(&[d], self.time_table.data()[(t - 1) * d..t * d].to_vec()).expect("row")
    }

    fn check(&self, z: &Tensor<T>, t: usize) -> Result<()> {
        z.expect_shape(&self.desc.latent_shape)?;
        if t == 0 || t > self.desc.steps {
            return Err(Error::Range(format!("timestep {t} outside 1..={}", self.desc.steps)));
        }
        Ok(())
    }

    /// Epsilon prediction for `z_t` at timestep `t`.
    pub fn predict_noise(&self, z_t: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self.check(z_t, t)?;
        let mut g = Graph::new();
        let p = g.bind_frozen(&self.params);
        let tr = g.constant(self.time_row(t));
        let zv = g.constant(z_t.clone());
        let out = predict_noise_graph(&mut g, &p, &self.desc, tr, zv);
        let eps = g.value(out).clone();
        if !eps.all_finite() {
            return Err(Error::NonFinite { stage: format!("denoiser t={t}"), layer: 0 });
        }
        Ok(eps)
    }
}

/// Anything that predicts the noise in `z_t`.
pub trait NoisePredictor<T: Scalar> {
    fn predict(&self, z_t: &Tensor<T>, t: usize) -> Result<Tensor<T>>;
}

impl<T: Scalar> NoisePredictor<T> for Denoiser<T> {
    fn predict(&self, z_t: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self.predict_noise(z_t, t)
    }
}

/// `mu = (z_t - beta_t / sqrt(1 - abar_t) * eps) / sqrt(alpha_t)`; adds
/// `sqrt(beta_t) * noise` for `t > 1`.
pub fn denoise_step<T: Scalar>(
    z_t: &Tensor<T>,
    t: usize,
    model: &impl NoisePredictor<T>,
    schedule: &NoiseSchedule,
    noise: &Tensor<T>,
) -> Result<Tensor<T>> {
    schedule.check_t(t)?;
    noise.expect_shape(z_t.shape())?;
    let eps = model.predict(z_t, t)?;
    eps.expect_shape(z_t.shape())?;
    let coef = T::c(schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt());
    let inv_sqrt_a = T::c(1.0 / schedule.alpha(t).sqrt());
    let mean = z_t.zip_map(&eps, |z, e| inv_sqrt_a * (z - coef * e))?;
    if t == 1 {
        return Ok(mean);
    }
    let sigma = T::c(schedule.beta(t).sqrt());
    mean.zip_map(noise, |m, n| m + sigma * n)
}

fn gaussian<T: Scalar>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::c(normal(rng))).collect()).expect("shape")
}

/// Ancestral sampling from `z_T ~ N(0, I)` down to `t = 1`.
pub fn sample<T: Scalar>(
    model: &impl NoisePredictor<T>,
    schedule: &NoiseSchedule,
    shape: &[usize],
    seed: u64,
) -> Result<Tensor<T>> {
    let mut rng = rng_for(seed, 0x5A);
    let mut z = gaussian(&mut rng, shape);
    for t in (1..=schedule.steps()).rev() {
        let noise = if t > 1 { gaussian(&mut rng, shape) } else { Tensor::zeros(shape) };
        z = denoise_step(&z, t, model, schedule, &noise)?;
        if !z.all_finite() {
            return Err(Error::NonFinite { stage: format!("sampler t={t}"), layer: 0 });
        }
    }
    Ok(z)
}

/// `mean((noise - eps_theta(forward_marginal(z0, t, noise), t))^2)`.
pub fn diffusion_train_loss<T: Scalar>(
    model: &Denoiser<T>,
    schedule: &NoiseSchedule,
    z0: &Tensor<T>,
    t: usize,
    noise: &Tensor<T>,
) -> Result<T> {
    let zt = forward_marginal(z0, t, schedule, noise)?;
    let eps = model.predict_noise(&zt, t)?;
    let s: T = eps.data().iter().zip(noise.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(s / T::c(noise.len() as f64))
}

/// Graph form of the epsilon-matching loss (used for training and gradient checks).
pub fn diffusion_loss_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: &Bound<'_, T>,
    model: &Denoiser<T>,
    schedule: &NoiseSchedule,
    z0: &Tensor<T>,
    t: usize,
    noise: &Tensor<T>,
) -> Result<Var> {
    let zt = forward_marginal(z0, t, schedule, noise)?;
    let tr = g.constant(model.time_row(t));
    let zv = g.constant(zt);
    let eps = predict_noise_graph(g, p, &model.desc, tr, zv);
    let target = g.constant(noise.clone());
    Ok(g.mse(eps, target))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserHyper {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for DenoiserHyper {
    fn default() -> Self {
        Self { lr: 2e-3, steps: 400, batch_size: 16 }
    }
}

/// Trains with one uniformly drawn timestep per sample per step; returns the
/// per-step mean batch loss.
pub fn train_denoiser<T: Scalar>(
    corpus: &[Tensor<T>],
    init: &Denoiser<T>,
    schedule: &NoiseSchedule,
    hyper: &DenoiserHyper,
    seed: u64,
) -> Result<(Denoiser<T>, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::Insufficient("denoiser corpus is empty".into()));
    }
    if schedule.steps() != init.desc.steps {
        return Err(Error::Invalid(format!(
            "schedule has {} steps, denoiser expects {}",
            schedule.steps(),
            init.desc.steps
        )));
    }
    for z in corpus {
        z.expect_shape(&init.desc.latent_shape)?;
    }
    let mut model = init.clone();
    let mut opt = OptimizerState::new(&model.params, AdamWConfig { lr: hyper.lr, weight_decay: 0.0, ..Default::default() });
    let mut rng = rng_for(seed, 0x7D);
    let shape = model.desc.latent_shape;
    let mut curve = Vec::with_capacity(hyper.steps);
    for step in 0..hyper.steps {
        let draws: Vec<(usize, usize, u64)> = (0..hyper.batch_size.max(1))
            .map(|_| (rng.gen_range(0..corpus.len()), rng.gen_range(1..=schedule.steps()), rng.gen()))
            .collect();
        let inv_b = T::one() / T::c(draws.len() as f64);
        let m = &model;
        let results: Vec<(Params<T>, f64)> = draws
            .par_iter()
            .map(|&(i, t, s)| -> Result<_> {
                let noise = gaussian(&mut rng_for(s, 0), &shape);
                let mut g = Graph::new();
                let p = g.bind(&m.params);
                let loss = diffusion_loss_graph(&mut g, &p, m, schedule, &corpus[i], t, &noise)?;
                let scaled = g.scale(loss, inv_b);
                let grads = g.backward(scaled);
                Ok((grads.for_params(&p), g.value(loss).item().to_f64_lossy()))
            })
            .collect::<Result<_>>()?;
        let mut total = model.params.zeros_like();
        let mut loss = 0.0;
        for (gr, l) in &results {
            total.add_assign(gr);
            loss += l;
        }
        loss /= results.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch: step, detail: format!("denoiser loss {loss}") });
        }
        adamw_step(&mut model.params, &total, &mut opt)
            .map_err(|_| Error::Diverged { epoch: step, detail: "non-finite gradient".into() })?;
        curve.push(loss);
    }
    Ok((model, curve))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Zero;
    impl NoisePredictor<f64> for Zero {
        fn predict(&self, z: &Tensor<f64>, _t: usize) -> Result<Tensor<f64>> {
            Ok(Tensor::zeros(z.shape()))
        }
    }

    fn s(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn schedule_examples() {
        let one = make_schedule(ScheduleKind::Linear, 0.01, 0.02, 1).unwrap();
        assert_eq!(one.betas, vec![0.01]);
        let c = make_schedule(ScheduleKind::Linear, 0.1, 0.1, 3).unwrap();
        for (a, b) in c.alpha_bars.iter().zip([0.9, 0.81, 0.729]) {
            assert!((a - b).abs() < 1e-12);
        }
        let lin = make_schedule(ScheduleKind::Linear, 1e-3, 0.2, 5).unwrap();
        assert_eq!(lin.betas[0], 1e-3);
        assert!((lin.betas[4] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn schedule_bound_violations() {
        assert!(make_schedule(ScheduleKind::Linear, 0.0, 0.1, 3).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 0.2, 0.1, 3).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 0.1, 1.0, 3).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 0.1, 0.2, 0).is_err());
    }

    #[test]
    fn default_bounds_scale_with_steps() {
        let (a, b) = default_beta_bounds(50);
        assert!((a - 2e-3).abs() < 1e-15 && (b - 0.4).abs() < 1e-15);
        let (_, b) = default_beta_bounds(10);
        assert!(b < 1.0);
    }

    #[test]
    fn forward_step_examples() {
        assert_eq!(forward_step(&s(2.0), 0.0, &s(5.0)).unwrap().item(), 2.0);
        assert_eq!(forward_step(&s(2.0), 1.0, &s(5.0)).unwrap().item(), 5.0);
        let v = forward_step(&s(2.0), 0.75, &s(1.0)).unwrap().item();
        assert!((v - (1.0 + 0.75f64.sqrt())).abs() < 1e-12);
        assert!((v - 1.86603).abs() < 1e-5);
    }

    #[test]
    fn forward_marginal_examples() {
        let c = make_schedule(ScheduleKind::Linear, 0.1, 0.1, 3).unwrap();
        let v = forward_marginal(&s(1.0), 2, &c, &s(0.0)).unwrap().item();
        assert!((v - 0.9).abs() < 1e-12);
        assert!(forward_marginal(&s(1.0), 0, &c, &s(0.0)).is_err());
        assert!(forward_marginal(&s(1.0), 4, &c, &s(0.0)).is_err());
    }

    #[test]
    fn denoise_step_examples() {
        let c = make_schedule(ScheduleKind::Linear, 0.1, 0.3, 4).unwrap();
        let z = s(1.5);
        let out = denoise_step(&z, 3, &Zero, &c, &s(0.0)).unwrap().item();
        assert!((out - 1.5 / c.alpha(3).sqrt()).abs() < 1e-12);
        // t = 1 ignores the noise argument
        let a = denoise_step(&z, 1, &Zero, &c, &s(7.0)).unwrap().item();
        assert!((a - 1.5 / c.alpha(1).sqrt()).abs() < 1e-12);
        assert!(denoise_step(&z, 5, &Zero, &c, &s(0.0)).is_err());
    }

    #[test]
    fn single_step_sampler_with_zero_predictor() {
        let c = make_schedule(ScheduleKind::Linear, 0.2, 0.2, 1).unwrap();
        let out = sample(&Zero, &c, &[3], 11).unwrap();
        let mut rng = rng_for(11, 0x5A);
        let z_t: Vec<f64> = (0..3).map(|_| normal(&mut rng)).collect();
        for (o, z) in out.data().iter().zip(&z_t) {
            assert!((o - z / 0.8f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn train_loss_examples() {
        // zeroed network predicts 0 everywhere
        let c = make_schedule(ScheduleKind::Linear, 0.1, 0.2, 2).unwrap();
        let desc = DenoiserDescriptor { latent_shape: [1, 2, 2, 2], width: 2, time_dim: 4, steps: 2 };
        let mut d = Denoiser::<f64>::init(desc, 1).unwrap();
        for t in d.params.tensors_mut() {
            t.scale_assign(0.0);
        }
        let z0 = Tensor::full(&[1, 2, 2, 2], 0.3);
        let ones = Tensor::full(&[1, 2, 2, 2], 1.0);
        assert_eq!(diffusion_train_loss(&d, &c, &z0, 1, &ones).unwrap(), 1.0);
    }
}
