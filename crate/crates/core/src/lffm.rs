//! Latent feature fusion: the frozen encoder's posterior mean, an FNC map
//! resampled onto the latent grid, and a residual convolutional fusion.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{Autoencoder, LatentTensor};
use crate::data::{FncMatrix, StructuralVolume};
use crate::error::{Error, Result};
use crate::graph::{Bound, Graph, Var};
use crate::params::{scaled_normal, Params};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// FNC-derived tensor `[C_z, h_z, w_z]` on the latent grid without depth.
#[derive(Clone, Debug, PartialEq)]
pub struct FncLatent<T> {
    pub values: Tensor<T>,
}

/// Early-fused latent, same shape as the structural latent.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedLatent<T> {
    pub values: Tensor<T>,
}

/// Deterministic structural feature: the encoder posterior mean.
pub fn extract_latent<T: Scalar>(v: &StructuralVolume, ae: &Autoencoder<T>) -> Result<LatentTensor<T>> {
    let post = ae.encode(v)?;
    LatentTensor::new(post.mu)
}

/// Bilinear resampling of a square matrix to `rows x cols` using
/// half-pixel centres with edge clamping.
pub fn resample_bilinear<T: Scalar>(f: &FncMatrix, rows: usize, cols: usize) -> Result<Tensor<T>> {
    if rows == 0 || cols == 0 {
        return Err(Error::Invalid(format!("degenerate target dims {rows} x {cols}")));
    }
    let n = f.size();
    let coord = |i: usize, out: usize| -> (usize, usize, f64) {
        let src = ((i as f64 + 0.5) * n as f64 / out as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, src - lo as f64)
    };
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let (r0, r1, fr) = coord(i, rows);
        for j in 0..cols {
            let (c0, c1, fc) = coord(j, cols);
            let g = |r: usize, c: usize| f.get(r, c) as f64;
            let top = g(r0, c0) * (1.0 - fc) + g(r0, c1) * fc;
            let bot = g(r1, c0) * (1.0 - fc) + g(r1, c1) * fc;
            data.push(T::c(top * (1.0 - fr) + bot * fr));
        }
    }
    Tensor::from_vec(&[rows, cols], data)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LffmDescriptor {
    /// Structural latent shape `[C_z, d, h, w]`.
    pub latent_shape: [usize; 4],
}

impl LffmDescriptor {
    pub fn fnc_latent_shape(&self) -> [usize; 3] {
        [self.latent_shape[0], self.latent_shape[2], self.latent_shape[3]]
    }
}

pub fn init_lffm_params<T: Scalar>(desc: &LffmDescriptor, rng: &mut impl Rng) -> Params<T> {
    let c = desc.latent_shape[0];
    let mut p = Params::new();
    p.insert("lffm.lift.w", scaled_normal(rng, &[c, 1], 1, 1.0));
    p.insert("lffm.lift.b", Tensor::zeros(&[c]));
    p.insert("lffm.fuse.w", scaled_normal(rng, &[c, 2 * c, 3, 3, 3], 2 * c * 27, 1.0));
    p.insert("lffm.fuse.b", Tensor::zeros(&[c]));
    p
}

/// `1x1` lift of a resampled `[h, w]` map to `[C_z, h, w]`.
pub fn lift_graph<T: Scalar>(g: &mut Graph<'_, T>, p: &Bound<'_, T>, resampled: Var) -> Var {
    let s = g.shape(resampled).to_vec();
    let (h, w) = (s[0], s[1]);
    let flat = g.reshape(resampled, &[1, h * w]);
    let lifted = g.matmul(p.var("lffm.lift.w"), flat);
    let c = g.shape(lifted)[0];
    let biased = g.add_channel_bias(lifted, p.var("lffm.lift.b"));
    g.reshape(biased, &[c, h, w])
}

/// `Z + Conv([Z ; broadcast_depth(Z')])`.
pub fn fuse_graph<T: Scalar>(g: &mut Graph<'_, T>, p: &Bound<'_, T>, z: Var, zp: Var) -> Result<Var> {
    let zs = g.shape(z).to_vec();
    let ps = g.shape(zp).to_vec();
    if zs.len() != 4 || ps.len() != 3 || ps != [zs[0], zs[2], zs[3]] {
        return Err(Error::Shape(format!("cannot fuse latent {zs:?} with FNC latent {ps:?}")));
    }
    let (c, d, h, w) = (zs[0], zs[1], zs[2], zs[3]);
    let mut idx = Vec::with_capacity(c * d * h * w);
    for ch in 0..c {
        for _ in 0..d {
            for y in 0..h {
                for x in 0..w {
                    idx.push((ch * h + y) * w + x);
                }
            }
        }
    }
    let broadcast = g.gather(zp, Arc::new(idx), &zs);
    let cat = g.concat(&[z, broadcast]);
    let conv = g.conv3d(cat, p.var("lffm.fuse.w"), 1, 1);
    let conv = g.add_channel_bias(conv, p.var("lffm.fuse.b"));
    Ok(g.add(z, conv))
}

/// Resample + lift (no gradient bookkeeping).
pub fn project_fnc<T: Scalar>(f: &FncMatrix, target: [usize; 3], params: &Params<T>) -> Result<FncLatent<T>> {
    let [c, h, w] = target;
    if c == 0 {
        return Err(Error::Invalid("zero channel target".into()));
    }
    let lift = params
        .get("lffm.lift.w")
        .ok_or_else(|| Error::Invalid("missing lffm.lift.w".into()))?;
    if lift.shape() != [c, 1] {
        return Err(Error::Shape(format!("lift weights {:?} do not produce {c} channels", lift.shape())));
    }
    let resampled = resample_bilinear::<T>(f, h, w)?;
    let mut g = Graph::new();
    let p = g.bind_frozen(params);
    let r = g.constant(resampled);
    let out = lift_graph(&mut g, &p, r);
    Ok(FncLatent { values: g.value(out).clone() })
}

pub fn fuse<T: Scalar>(z: &LatentTensor<T>, zp: &FncLatent<T>, params: &Params<T>) -> Result<FusedLatent<T>> {
    let mut g = Graph::new();
    let p = g.bind_frozen(params);
    let zv = g.constant(z.values.clone());
    let pv = g.constant(zp.values.clone());
    let out = fuse_graph(&mut g, &p, zv, pv)?;
    Ok(FusedLatent { values: g.value(out).clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::rng_for;

    #[test]
    fn resample_identity_at_equal_size() {
        let mut e = vec![0.0f32; 9];
        for (i, v) in e.iter_mut().enumerate() {
            let (r, c) = (i / 3, i % 3);
            *v = if r == c { 1.0 } else { 0.1 * (r + c) as f32 };
        }
        let f = FncMatrix::new(3, e.clone()).unwrap();
        let r = resample_bilinear::<f64>(&f, 3, 3).unwrap();
        for (a, b) in r.data().iter().zip(&e) {
            assert_eq!(*a, *b as f64);
        }
    }

    #[test]
    fn resample_rejects_degenerate_target() {
        assert!(resample_bilinear::<f64>(&FncMatrix::identity(4), 0, 2).is_err());
    }

    #[test]
    fn zero_fusion_weights_give_residual() {
        let desc = LffmDescriptor { latent_shape: [2, 2, 3, 2] };
        let mut p = init_lffm_params::<f64>(&desc, &mut rng_for(1, 1));
        p.get_mut("lffm.fuse.w").unwrap().scale_assign(0.0);
        let z = LatentTensor::new(Tensor::from_vec(&[2, 2, 3, 2], (0..24).map(|i| i as f64 * 0.1).collect()).unwrap()).unwrap();
        let zp = project_fnc(&FncMatrix::identity(4), desc.fnc_latent_shape(), &p).unwrap();
        let fused = fuse(&z, &zp, &p).unwrap();
        assert_eq!(fused.values, z.values);
    }

    #[test]
    fn fuse_rejects_incompatible_shapes() {
        let desc = LffmDescriptor { latent_shape: [2, 2, 3, 2] };
        let p = init_lffm_params::<f64>(&desc, &mut rng_for(1, 1));
        let z = LatentTensor::new(Tensor::zeros(&[2, 2, 3, 2])).unwrap();
        let zp = FncLatent { values: Tensor::zeros(&[2, 2, 2]) };
        assert!(fuse(&z, &zp, &p).is_err());
    }
}
