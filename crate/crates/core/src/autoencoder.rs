//! KL-regularised 3D convolutional autoencoder.
//!
//! The encoder is a stack of stride-2 `3x3x3` convolutions whose last layer
//! emits `2 * C_z` channels, split into the posterior mean and log-variance.
//! The decoder mirrors it with nearest-neighbour upsampling back to each
//! encoder level's dims, followed by a logistic output.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{normal, rng_for, StructuralVolume};
use crate::error::{Error, Result};
use crate::graph::{nearest_resize_index, Bound, Graph, Var};
use crate::params::{scaled_normal, Params};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::optim::{adamw_step, AdamWConfig, OptimizerState};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoencoderDescriptor {
    pub input_dims: [usize; 3],
    /// Output channels of every encoder level except the last.
    pub enc_channels: Vec<usize>,
    pub latent_channels: usize,
    /// Channels of the decoder levels, coarse to fine; one per encoder level.
    pub dec_channels: Vec<usize>,
}

impl AutoencoderDescriptor {
    pub fn desk(input_dims: [usize; 3]) -> Self {
        Self { input_dims, enc_channels: vec![8, 16], latent_channels: 4, dec_channels: vec![16, 8, 4] }
    }

    pub fn levels(&self) -> usize {
        self.enc_channels.len() + 1
    }

    /// Spatial dims at every level, from input to latent.
    pub fn level_dims(&self) -> Vec<[usize; 3]> {
        let mut dims = vec![self.input_dims];
        for _ in 0..self.levels() {
            let last = *dims.last().expect("non-empty");
            dims.push(last.map(|n| (n + 2 - 3) / 2 + 1));
        }
        dims
    }

    pub fn latent_dims(&self) -> [usize; 3] {
        *self.level_dims().last().expect("non-empty")
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        let [d, h, w] = self.latent_dims();
        [self.latent_channels, d, h, w]
    }

    pub fn latent_len(&self) -> usize {
        self.latent_shape().iter().product()
    }

    pub fn input_len(&self) -> usize {
        self.input_dims.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dims.iter().any(|&n| n < 2) {
            return Err(Error::Invalid(format!("input dims {:?} too small", self.input_dims)));
        }
        if self.latent_channels == 0 || self.enc_channels.iter().chain(&self.dec_channels).any(|&c| c == 0) {
            return Err(Error::Invalid("channel counts must be positive".into()));
        }
        if self.dec_channels.len() != self.levels() {
            return Err(Error::Invalid(format!(
                "decoder needs {} channel entries, got {}",
                self.levels(),
                self.dec_channels.len()
            )));
        }
        if self.latent_len() >= self.input_len() {
            return Err(Error::Invalid(format!(
                "latent size {} does not compress input size {}",
                self.latent_len(),
                self.input_len()
            )));
        }
        Ok(())
    }

    fn enc_io(&self) -> Vec<(usize, usize)> {
        let mut chans = vec![1];
        chans.extend(&self.enc_channels);
        chans.push(2 * self.latent_channels);
        chans.windows(2).map(|w| (w[0], w[1])).collect()
    }

    fn dec_io(&self) -> Vec<(usize, usize)> {
        let mut chans = vec![self.latent_channels];
        chans.extend(&self.dec_channels);
        chans.push(1);
        chans.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Diagonal Gaussian posterior `N(mu, exp(log_var))`, both `[C_z, d, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior<T> {
    pub mu: Tensor<T>,
    pub log_var: Tensor<T>,
}

impl<T: Scalar> GaussianPosterior<T> {
    pub fn new(mu: Tensor<T>, log_var: Tensor<T>) -> Result<Self> {
        log_var.expect_shape(mu.shape())?;
        if !mu.all_finite() || !log_var.all_finite() {
            return Err(Error::Range("posterior contains non-finite values".into()));
        }
        Ok(Self { mu, log_var })
    }
}

/// Latent code `[C_z, d, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor<T> {
    pub values: Tensor<T>,
}

impl<T: Scalar> LatentTensor<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.shape().len() != 4 {
            return Err(Error::Shape(format!("latent must be 4-D, got {:?}", values.shape())));
        }
        if !values.all_finite() {
            return Err(Error::Range("latent contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn shape(&self) -> [usize; 4] {
        let s = self.values.shape();
        [s[0], s[1], s[2], s[3]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder<T> {
    pub desc: AutoencoderDescriptor,
    pub params: Params<T>,
}

fn check_finite<T: Scalar>(g: &Graph<'_, T>, v: Var, stage: &str, layer: usize) -> Result<()> {
    if g.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { stage: stage.into(), layer })
    }
}

fn conv_block<T: Scalar>(g: &mut Graph<'_, T>, p: &Bound<'_, T>, name: &str, x: Var, stride: usize) -> Var {
    let w = p.var(&format!("{name}.w"));
    let b = p.var(&format!("{name}.b"));
    let y = g.conv3d(x, w, stride, 1);
    g.add_channel_bias(y, b)
}

/// Encoder graph: returns `(mu, log_var)` vars.
pub fn encode_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: &Bound<'_, T>,
    desc: &AutoencoderDescriptor,
    x: Var,
) -> Result<(Var, Var)> {
    let dims = desc.level_dims();
    let n = desc.levels();
    let mut h = x;
    for i in 0..n {
        h = conv_block(g, p, &format!("enc.{i}"), h, 2);
        if i + 1 < n {
            h = g.silu(h);
        }
        check_finite(g, h, "encoder", i)?;
    }
    let [d, hh, w] = dims[n];
    let half = desc.latent_channels * d * hh * w;
    let mu = g.gather(h, Arc::new((0..half).collect()), &desc.latent_shape());
    let lv = g.gather(h, Arc::new((half..2 * half).collect()), &desc.latent_shape());
    Ok((mu, lv))
}

/// Decoder graph: latent var to a `[1, D, H, W]` var in `(0, 1)`.
pub fn decode_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: &Bound<'_, T>,
    desc: &AutoencoderDescriptor,
    z: Var,
) -> Result<Var> {
    let dims = desc.level_dims();
    let n = desc.levels();
    let io = desc.dec_io();
    let mut h = conv_block(g, p, "dec.0", z, 1);
    h = g.silu(h);
    check_finite(g, h, "decoder", 0)?;
    for i in 1..=n {
        let from = dims[n - i + 1];
        let to = dims[n - i];
        let ch = io[i].0;
        let idx = nearest_resize_index(ch, from, to);
        h = g.gather(h, Arc::new(idx), &[ch, to[0], to[1], to[2]]);
        h = conv_block(g, p, &format!("dec.{i}"), h, 1);
        h = if i < n { g.silu(h) } else { g.sigmoid(h) };
        check_finite(g, h, "decoder", i)?;
    }
    Ok(h)
}

/// `z = mu + exp(log_var / 2) * noise` as graph ops.
pub fn reparameterize<T: Scalar>(g: &mut Graph<'_, T>, mu: Var, log_var: Var, noise: Var) -> Var {
    let half = g.scale(log_var, T::c(0.5));
    let std = g.exp(half);
    let scaled = g.mul(std, noise);
    g.add(mu, scaled)
}

/// `0.5 * sum(mu^2 + exp(log_var) - log_var - 1)` as graph ops.
pub fn kl_graph<T: Scalar>(g: &mut Graph<'_, T>, mu: Var, log_var: Var) -> Var {
    let mu2 = g.square(mu);
    let var = g.exp(log_var);
    let a = g.add(mu2, var);
    let b = g.sub(a, log_var);
    let c = g.add_scalar(b, -T::one());
    let s = g.sum(c);
    g.scale(s, T::c(0.5))
}

impl<T: Scalar> Autoencoder<T> {
    pub fn init(desc: AutoencoderDescriptor, seed: u64) -> Result<Self> {
        desc.validate()?;
        let mut rng = rng_for(seed, 0xAE);
        let mut params = Params::new();
        for (prefix, io) in [("enc", desc.enc_io()), ("dec", desc.dec_io())] {
            for (i, (ci, co)) in io.into_iter().enumerate() {
                let fan_in = ci * 27;
                params.insert(format!("{prefix}.{i}.w"), scaled_normal(&mut rng, &[co, ci, 3, 3, 3], fan_in, 1.0));
                params.insert(format!("{prefix}.{i}.b"), Tensor::zeros(&[co]));
            }
        }
        // start the log-variance head near zero so sampling begins at unit scale
        let last = desc.levels() - 1;
        let w = params.get_mut(&format!("enc.{last}.w")).expect("last encoder layer");
        let per_out = w.len() / (2 * desc.latent_channels);
        for v in &mut w.data_mut()[desc.latent_channels * per_out..] {
            *v *= T::c(0.1);
        }
        Ok(Self { desc, params })
    }

    pub fn from_params(desc: AutoencoderDescriptor, params: Params<T>) -> Result<Self> {
        desc.validate()?;
        let expected = Self::init(desc.clone(), 0)?.params.specs();
        if params.specs() != expected {
            return Err(Error::Shape("parameter layout does not match the descriptor".into()));
        }
        if !params.all_finite() {
            return Err(Error::Range("autoencoder parameters contain non-finite values".into()));
        }
        Ok(Self { desc, params })
    }

    pub fn volume_tensor(&self, x: &StructuralVolume) -> Result<Tensor<T>> {
        if x.dims() != self.desc.input_dims {
            return Err(Error::Shape(format!(
                "volume dims {:?} do not match encoder input {:?}",
                x.dims(),
                self.desc.input_dims
            )));
        }
        let [d, h, w] = x.dims();
        Tensor::from_vec(&[1, d, h, w], x.voxels().iter().map(|&v| T::c(v as f64)).collect())
    }

    pub fn encode(&self, x: &StructuralVolume) -> Result<GaussianPosterior<T>> {
        let input = self.volume_tensor(x)?;
        let mut g = Graph::new();
        let p = g.bind_frozen(&self.params);
        let xv = g.constant(input);
        let (mu, lv) = encode_graph(&mut g, &p, &self.desc, xv)?;
        GaussianPosterior::new(g.value(mu).clone(), g.value(lv).clone())
    }

    pub fn decode(&self, z: &LatentTensor<T>) -> Result<StructuralVolume> {
        if z.shape() != self.desc.latent_shape() {
            return Err(Error::Shape(format!(
                "latent shape {:?} does not match decoder input {:?}",
                z.shape(),
                self.desc.latent_shape()
            )));
        }
        let mut g = Graph::new();
        let p = g.bind_frozen(&self.params);
        let zv = g.constant(z.values.clone());
        let out = decode_graph(&mut g, &p, &self.desc, zv)?;
        let voxels = g.value(out).data().iter().map(|v| v.to_f64_lossy() as f32).collect();
        StructuralVolume::new(self.desc.input_dims, voxels)
    }
}

pub fn sample_latent<T: Scalar>(p: &GaussianPosterior<T>, noise: &Tensor<T>) -> Result<LatentTensor<T>> {
    noise.expect_shape(p.mu.shape())?;
    let data = p
        .mu
        .data()
        .iter()
        .zip(p.log_var.data())
        .zip(noise.data())
        .map(|((&m, &lv), &e)| m + (lv * T::c(0.5)).exp() * e)
        .collect();
    LatentTensor::new(Tensor::from_vec(p.mu.shape(), data)?)
}

/// Mean squared error over elements.
pub fn recon_loss<T: Scalar>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<T> {
    x_hat.expect_shape(x.shape())?;
    if x.is_empty() {
        return Err(Error::Shape("empty tensors".into()));
    }
    let s: T = x.data().iter().zip(x_hat.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(s / T::c(x.len() as f64))
}

/// `0.5 * sum_i (mu_i^2 + sigma_i^2 - log sigma_i^2 - 1)`.
pub fn kl_loss<T: Scalar>(p: &GaussianPosterior<T>) -> Result<T> {
    if !p.mu.all_finite() || !p.log_var.all_finite() {
        return Err(Error::Range("non-finite posterior".into()));
    }
    p.log_var.expect_shape(p.mu.shape())?;
    let s: T = p
        .mu
        .data()
        .iter()
        .zip(p.log_var.data())
        .map(|(&m, &lv)| m * m + lv.exp() - lv - T::one())
        .sum();
    Ok(T::c(0.5) * s)
}

pub fn total_loss<T: Scalar>(l_recon: T, l_kl: T, lambda_recon: T, lambda_kl: T) -> Result<T> {
    if lambda_recon < T::zero() || lambda_kl < T::zero() {
        return Err(Error::Range("loss weights must be non-negative".into()));
    }
    Ok(lambda_recon * l_recon + lambda_kl * l_kl)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderHyper {
    pub lambda_recon: f64,
    pub lambda_kl: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for AutoencoderHyper {
    fn default() -> Self {
        Self { lambda_recon: 1.0, lambda_kl: 1e-2, lr: 2e-3, epochs: 30, batch_size: 8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeEpochLoss {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

/// Trains on the given volumes with reparameterised sampling. Deterministic
/// given `seed` irrespective of thread count.
pub fn train_autoencoder<T: Scalar>(
    volumes: &[&StructuralVolume],
    init: &Autoencoder<T>,
    hyper: &AutoencoderHyper,
    seed: u64,
) -> Result<(Autoencoder<T>, Vec<AeEpochLoss>)> {
    if volumes.is_empty() {
        return Err(Error::Insufficient("autoencoder training needs at least one volume".into()));
    }
    if hyper.batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let inputs: Vec<Tensor<T>> = volumes.iter().map(|v| init.volume_tensor(v)).collect::<Result<_>>()?;
    let mut model = init.clone();
    let mut opt = OptimizerState::new(&model.params, AdamWConfig { lr: hyper.lr, weight_decay: 0.0, ..Default::default() });
    let (lr_w, kl_w) = (T::c(hyper.lambda_recon), T::c(hyper.lambda_kl));
    let latent_shape = model.desc.latent_shape();
    let mut curve = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        let mut rng = rng_for(seed, epoch as u64 + 1);
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let (mut sum_r, mut sum_k) = (0.0, 0.0);
        for batch in order.chunks(hyper.batch_size) {
            let seeds: Vec<u64> = batch.iter().map(|_| rng.gen()).collect();
            let inv_b = T::one() / T::c(batch.len() as f64);
            let params = &model.params;
            let desc = &model.desc;
            let results: Vec<(Params<T>, f64, f64)> = batch
                .par_iter()
                .zip(&seeds)
                .map(|(&i, &s)| -> Result<_> {
                    let mut nrng = rng_for(s, 0);
                    let noise = Tensor::from_vec(
                        &latent_shape,
                        (0..latent_shape.iter().product::<usize>()).map(|_| T::c(normal(&mut nrng))).collect(),
                    )?;
                    let mut g = Graph::new();
                    let p = g.bind(params);
                    let x = g.borrowed(&inputs[i], false);
                    let (mu, lv) = encode_graph(&mut g, &p, desc, x)?;
                    let nv = g.constant(noise);
                    let z = reparameterize(&mut g, mu, lv, nv);
                    let xh = decode_graph(&mut g, &p, desc, z)?;
                    let rec = g.mse(xh, x);
                    let kl = kl_graph(&mut g, mu, lv);
                    let a = g.scale(rec, lr_w * inv_b);
                    let b = g.scale(kl, kl_w * inv_b);
                    let loss = g.add(a, b);
                    let grads = g.backward(loss);
                    Ok((grads.for_params(&p), g.value(rec).item().to_f64_lossy(), g.value(kl).item().to_f64_lossy()))
                })
                .collect::<Result<_>>()
                .map_err(|e| match e {
                    Error::NonFinite { stage, layer } => Error::Diverged { epoch, detail: format!("non-finite {stage} layer {layer}") },
                    other => other,
                })?;
            let mut total = model.params.zeros_like();
            for (gr, r, k) in &results {
                total.add_assign(gr);
                sum_r += r;
                sum_k += k;
            }
            adamw_step(&mut model.params, &total, &mut opt).map_err(|_| Error::Diverged {
                epoch,
                detail: "non-finite gradient".into(),
            })?;
        }
        let n = inputs.len() as f64;
        let (recon, kl) = (sum_r / n, sum_k / n);
        let total = hyper.lambda_recon * recon + hyper.lambda_kl * kl;
        if !total.is_finite() {
            return Err(Error::Diverged { epoch, detail: format!("loss {total}") });
        }
        curve.push(AeEpochLoss { recon, kl, total });
    }
    Ok((model, curve))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn post(mu: f64, lv: f64) -> GaussianPosterior<f64> {
        GaussianPosterior::new(t(&[1, 1, 1, 1], &[mu]), t(&[1, 1, 1, 1], &[lv])).unwrap()
    }

    #[test]
    fn desk_descriptor_latent_shape() {
        let d = AutoencoderDescriptor::desk([24, 28, 24]);
        assert_eq!(d.latent_shape(), [4, 3, 4, 3]);
        assert_eq!(d.level_dims()[1], [12, 14, 12]);
        d.validate().unwrap();
    }

    #[test]
    fn rejects_non_compressing_descriptor() {
        let d = AutoencoderDescriptor { input_dims: [2, 2, 2], enc_channels: vec![], latent_channels: 8, dec_channels: vec![4] };
        assert!(d.validate().is_err());
    }

    #[test]
    fn sample_latent_examples() {
        let p = post(1.0, 4f64.ln());
        let z = sample_latent(&p, &t(&[1, 1, 1, 1], &[0.5])).unwrap();
        assert!((z.values.item() - 2.0).abs() < 1e-12);
        let z0 = sample_latent(&p, &t(&[1, 1, 1, 1], &[0.0])).unwrap();
        assert_eq!(z0.values.item(), 1.0);
        let q = post(0.3, 0.0);
        let z1 = sample_latent(&q, &t(&[1, 1, 1, 1], &[-0.7])).unwrap();
        assert!((z1.values.item() - (0.3 - 0.7)).abs() < 1e-15);
        assert!(sample_latent(&q, &t(&[2, 1, 1, 1], &[0.0, 0.0])).is_err());
    }

    #[test]
    fn loss_weights_must_be_non_negative() {
        assert!(total_loss(1.0, 1.0, -1.0, 0.0).is_err());
        assert_eq!(total_loss(0.3, 7.0, 1.0, 0.0).unwrap(), 0.3);
        assert_eq!(total_loss(0.3, 7.0, 0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn kl_rejects_non_finite() {
        let p = GaussianPosterior { mu: t(&[1], &[f64::NAN]), log_var: t(&[1], &[0.0]) };
        assert!(kl_loss(&p).is_err());
    }
}
