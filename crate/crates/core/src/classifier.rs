//! Two-stream ViT with cross-attention late fusion.
//!
//! The structural stream tokenizes either raw volume patches, a learned
//! convolutional stem, or the LFFM-fused latent. The FNC stream turns each
//! row of an FNC map into a token. Cross-attention takes queries from the
//! structural stream and keys/values from the FNC stream.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{encode_graph, Autoencoder, AutoencoderDescriptor};
use crate::data::{rng_for, FncMatrix, StructuralVolume};
use crate::error::{Error, Result};
use crate::graph::{Bound, Graph, Var};
use crate::lffm::{fuse_graph, init_lffm_params, lift_graph, resample_bilinear, LffmDescriptor};
use crate::params::{scaled_normal, Params};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchMode {
    VitUnimodal,
    Multivit1,
    Hybrid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modalities {
    #[serde(rename = "MRI")]
    Mri,
    #[serde(rename = "FNC")]
    Fnc,
    #[serde(rename = "MRI+FNC")]
    MriFnc,
}

impl Modalities {
    pub fn uses_mri(self) -> bool {
        matches!(self, Self::Mri | Self::MriFnc)
    }

    pub fn uses_fnc(self) -> bool {
        matches!(self, Self::Fnc | Self::MriFnc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub mlp_hidden: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self { embed_dim: 32, layers: 2, heads: 4, ff_dim: 64, mlp_hidden: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierDescriptor {
    pub mode: ArchMode,
    pub modalities: Modalities,
    pub lffm: bool,
    pub volume_dims: [usize; 3],
    pub fnc_size: usize,
    /// Extractor latent shape `[C_z, d, h, w]`; only read when `lffm` is set.
    pub latent_shape: [usize; 4],
    pub raw_patch: [usize; 3],
    pub latent_patch: [usize; 3],
    pub stem_channels: usize,
    pub stem_patch: [usize; 3],
    pub vit: VitConfig,
    pub finetune_extractor: bool,
}

impl ClassifierDescriptor {
    pub fn new(mode: ArchMode, modalities: Modalities, lffm: bool, volume_dims: [usize; 3], fnc_size: usize, latent_shape: [usize; 4]) -> Self {
        Self {
            mode,
            modalities,
            lffm,
            volume_dims,
            fnc_size,
            latent_shape,
            raw_patch: [8, 7, 8],
            latent_patch: [1, 1, 1],
            stem_channels: 4,
            stem_patch: [4, 7, 4],
            vit: VitConfig::default(),
            finetune_extractor: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let legal = match self.mode {
            ArchMode::VitUnimodal => self.modalities != Modalities::MriFnc && !self.lffm,
            ArchMode::Multivit1 => self.modalities == Modalities::MriFnc && !self.lffm,
            ArchMode::Hybrid => self.modalities == Modalities::MriFnc,
        };
        if !legal {
            return Err(Error::Invalid(format!(
                "{:?} cannot run on {:?} with lffm={}",
                self.mode, self.modalities, self.lffm
            )));
        }
        let v = &self.vit;
        if v.embed_dim == 0 || v.heads == 0 || v.embed_dim % v.heads != 0 {
            return Err(Error::Invalid(format!("embed dim {} not divisible into {} heads", v.embed_dim, v.heads)));
        }
        if v.ff_dim == 0 || v.mlp_hidden == 0 {
            return Err(Error::Invalid("feed-forward and head widths must be positive".into()));
        }
        if self.finetune_extractor && !self.lffm {
            return Err(Error::Invalid("extractor fine-tuning requires the LFFM".into()));
        }
        if self.modalities.uses_mri() {
            let (grid, patch) = self.structural_grid();
            PatchMap::new(grid, patch)?;
        }
        if self.modalities.uses_fnc() && self.fnc_size == 0 {
            return Err(Error::Invalid("FNC size must be positive".into()));
        }
        Ok(())
    }

    fn uses_stem(&self) -> bool {
        self.mode == ArchMode::Hybrid && !self.lffm
    }

    /// Channel count, grid dims and patch size of the tensor the structural
    /// stream patchifies.
    fn structural_source(&self) -> (usize, [usize; 3], [usize; 3]) {
        if self.lffm {
            let [c, d, h, w] = self.latent_shape;
            (c, [d, h, w], self.latent_patch)
        } else if self.uses_stem() {
            let dims = self.volume_dims.map(|n| (n + 1) / 2);
            (self.stem_channels, dims, self.stem_patch)
        } else {
            (1, self.volume_dims, self.raw_patch)
        }
    }

    fn structural_grid(&self) -> ([usize; 3], [usize; 3]) {
        let (_, grid, patch) = self.structural_source();
        (grid, patch)
    }

    pub fn structural_tokens(&self) -> Result<(usize, usize)> {
        let (c, grid, patch) = self.structural_source();
        let map = PatchMap::new(grid, patch)?;
        Ok((map.len(), c * patch.iter().product::<usize>()))
    }

    /// `[channels, rows, cols]` of the FNC map that becomes row tokens.
    pub fn fnc_source(&self) -> [usize; 3] {
        if self.lffm {
            let [c, _, h, w] = self.latent_shape;
            [c, h, w]
        } else {
            [1, self.fnc_size, self.fnc_size]
        }
    }

    pub fn cross_fusion(&self) -> bool {
        self.modalities == Modalities::MriFnc
    }

    pub fn lffm_descriptor(&self) -> LffmDescriptor {
        LffmDescriptor { latent_shape: self.latent_shape }
    }
}

/// Partition of a 3D grid into equal non-overlapping blocks, one per token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchMap {
    pub grid: [usize; 3],
    pub patch: [usize; 3],
}

impl PatchMap {
    pub fn new(grid: [usize; 3], patch: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if patch[a] == 0 || grid[a] % patch[a] != 0 {
                return Err(Error::Shape(format!("grid {grid:?} is not divisible by patch {patch:?}")));
            }
        }
        Ok(Self { grid, patch })
    }

    pub fn counts(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.grid[a] / self.patch[a])
    }

    pub fn len(&self) -> usize {
        self.counts().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Voxel ranges of token `t` along (depth, height, width).
    pub fn block(&self, t: usize) -> [Range<usize>; 3] {
        let [_, nh, nw] = self.counts();
        let pos = [t / (nh * nw), (t / nw) % nh, t % nw];
        [0, 1, 2].map(|a| pos[a] * self.patch[a]..(pos[a] + 1) * self.patch[a])
    }

    /// Token index owning grid voxel `(z, y, x)`.
    pub fn token_of(&self, z: usize, y: usize, x: usize) -> usize {
        let [_, nh, nw] = self.counts();
        ((z / self.patch[0]) * nh + y / self.patch[1]) * nw + x / self.patch[2]
    }

    /// Gather index turning a `[C, D, H, W]` tensor into `[N, C*pd*ph*pw]`.
    pub fn gather_index(&self, channels: usize) -> Vec<usize> {
        let [d, h, w] = self.grid;
        let mut idx = Vec::with_capacity(channels * d * h * w);
        for t in 0..self.len() {
            let [bz, by, bx] = self.block(t);
            for c in 0..channels {
                for z in bz.clone() {
                    for y in by.clone() {
                        for x in bx.clone() {
                            idx.push(((c * d + z) * h + y) * w + x);
                        }
                    }
                }
            }
        }
        idx
    }
}

/// Gather index turning `[C, H, W]` into `H` row tokens of width `C*W`.
pub fn row_token_index(shape: [usize; 3]) -> Vec<usize> {
    let [c, h, w] = shape;
    let mut idx = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for ch in 0..c {
            for x in 0..w {
                idx.push((ch * h + y) * w + x);
            }
        }
    }
    idx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamTag {
    Fused,
    Fnc,
    Cross,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMatrix {
    pub stream: StreamTag,
    pub layer: usize,
    pub head: usize,
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

impl AttentionMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub matrices: Vec<AttentionMatrix>,
    /// Token layout of the structural stream, when there is one.
    pub patch_map: Option<PatchMap>,
}

impl AttentionRecord {
    pub fn stream(&self, tag: StreamTag) -> impl Iterator<Item = &AttentionMatrix> {
        self.matrices.iter().filter(move |m| m.stream == tag)
    }
}

/// Tokens `[N, E]` plus, for structural tokens, the patch layout.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    pub tokens: Tensor<T>,
    pub patch_map: Option<PatchMap>,
}

/// Attention probability vars collected while building a graph.
#[derive(Default)]
pub struct AttentionVars {
    entries: Vec<(StreamTag, usize, usize, Var)>,
}

impl AttentionVars {
    pub fn record<T: Scalar>(&self, g: &Graph<'_, T>, patch_map: Option<PatchMap>) -> AttentionRecord {
        let matrices = self
            .entries
            .iter()
            .map(|&(stream, layer, head, v)| {
                let t = g.value(v);
                AttentionMatrix {
                    stream,
                    layer,
                    head,
                    rows: t.shape()[0],
                    cols: t.shape()[1],
                    weights: t.data().iter().map(|x| x.to_f64_lossy()).collect(),
                }
            })
            .collect();
        AttentionRecord { matrices, patch_map }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn check_finite<T: Scalar>(g: &Graph<'_, T>, v: Var, stage: &str, layer: usize) -> Result<()> {
    if g.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { stage: stage.into(), layer })
    }
}

fn slice_rows<T: Scalar>(g: &mut Graph<'_, T>, w: Var, block: usize, per: usize, shape: [usize; 2]) -> Var {
    g.gather(w, Arc::new((block * per..(block + 1) * per).collect()), &shape)
}

/// Multi-head attention of already-normalised `q_in [Nq, E]` over
/// `kv_in [Nk, E]`. Returns the summed head outputs and the per-head
/// attention probabilities.
pub fn attention_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: &Bound<'_, T>,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    heads: usize,
) -> (Var, Vec<Var>) {
    let e = g.shape(q_in)[1];
    assert_eq!(g.shape(kv_in)[1], e, "attention embed dims differ");
    let dh = e / heads;
    let scale = T::c(1.0 / (dh as f64).sqrt());
    let [wq, wk, wv, wo] = ["q", "k", "v", "o"].map(|n| p.var(&format!("{prefix}.{n}")));
    let mut out = None;
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = slice_rows(g, wq, h, e * dh, [e, dh]);
        let q = g.matmul(q_in, q);
        let k = slice_rows(g, wk, h, e * dh, [e, dh]);
        let k = g.matmul(kv_in, k);
        let v = slice_rows(g, wv, h, e * dh, [e, dh]);
        let v = g.matmul(kv_in, v);
        let s = g.matmul_nt(q, k);
        let s = g.scale(s, scale);
        let a = g.softmax_rows(s);
        probs.push(a);
        let o = g.matmul(a, v);
        let wo_h = slice_rows(g, wo, h, dh * e, [dh, e]);
        let o = g.matmul(o, wo_h);
        out = Some(match out {
            None => o,
            Some(acc) => g.add(acc, o),
        });
    }
    (out.expect("at least one head"), probs)
}

fn linear<T: Scalar>(g: &mut Graph<'_, T>, p: &Bound<'_, T>, x: Var, name: &str) -> Var {
    let y = g.matmul(x, p.var(&format!("{name}.w")));
    g.add_row_bias(y, p.var(&format!("{name}.b")))
}

fn norm<T: Scalar>(g: &mut Graph<'_, T>, p: &Bound<'_, T>, x: Var, name: &str) -> Var {
    g.layer_norm(x, p.var(&format!("{name}.g")), p.var(&format!("{name}.b")))
}

/// Pre-norm block: `x + MHA(LN(x))` then `+ FF(LN(.))`.
pub fn block_graph<T: Scalar>(g: &mut Graph<'_, T>, p: &Bound<'_, T>, prefix: &str, x: Var, heads: usize) -> (Var, Vec<Var>) {
    let n1 = norm(g, p, x, &format!("{prefix}.ln1"));
    let (a, probs) = attention_graph(g, p, &format!("{prefix}.attn"), n1, n1, heads);
    let x1 = g.add(x, a);
    let n2 = norm(g, p, x1, &format!("{prefix}.ln2"));
    let f = linear(g, p, n2, &format!("{prefix}.ff1"));
    let f = g.gelu(f);
    let f = linear(g, p, f, &format!("{prefix}.ff2"));
    (g.add(x1, f), probs)
}

/// `layers` blocks named `{prefix}.l{i}`.
pub fn stack_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: &Bound<'_, T>,
    prefix: &str,
    x: Var,
    layers: usize,
    heads: usize,
    tag: StreamTag,
    attn: &mut AttentionVars,
) -> Result<Var> {
    let mut h = x;
    for l in 0..layers {
        let (next, probs) = block_graph(g, p, &format!("{prefix}.l{l}"), h, heads);
        check_finite(g, next, prefix, l)?;
        attn.entries.extend(probs.into_iter().enumerate().map(|(hd, v)| (tag, l, hd, v)));
        h = next;
    }
    Ok(h)
}

/// `q + MHA(LN_q(q), LN_kv(kv))` without a feed-forward sublayer.
pub fn cross_graph<T: Scalar>(g: &mut Graph<'_, T>, p: &Bound<'_, T>, q: Var, kv: Var, heads: usize, attn: &mut AttentionVars) -> Result<Var> {
    let nq = norm(g, p, q, "cross.lnq");
    let nkv = norm(g, p, kv, "cross.lnkv");
    let (a, probs) = attention_graph(g, p, "cross.attn", nq, nkv, heads);
    let out = g.add(q, a);
    check_finite(g, out, "cross", 0)?;
    attn.entries.extend(probs.into_iter().enumerate().map(|(hd, v)| (StreamTag::Cross, 0, hd, v)));
    Ok(out)
}

/// Mean-pool, layer norm, two-layer GELU MLP: returns logits `[2]`.
pub fn head_graph<T: Scalar>(g: &mut Graph<'_, T>, p: &Bound<'_, T>, seq: Var) -> Var {
    let pooled = g.mean_rows(seq);
    let e = g.shape(pooled)[0];
    let pooled = g.reshape(pooled, &[1, e]);
    let h = norm(g, p, pooled, "head.ln");
    let h = linear(g, p, h, "head.fc1");
    let h = g.gelu(h);
    let logits = linear(g, p, h, "head.fc2");
    g.reshape(logits, &[2])
}

/// Linear projection of gathered patches/rows plus positional embeddings.
pub fn embed_graph<T: Scalar>(g: &mut Graph<'_, T>, p: &Bound<'_, T>, prefix: &str, src: Var, index: Arc<Vec<usize>>, n: usize) -> Var {
    let dim = index.len() / n;
    let patches = g.gather(src, index, &[n, dim]);
    let t = linear(g, p, patches, &format!("{prefix}.proj"));
    g.add(t, p.var(&format!("{prefix}.pos")))
}

/// Per-subject inputs after any frozen preprocessing.
///
/// `structural` is the raw volume `[1, D, H, W]`, or the extractor latent
/// `[C_z, d, h, w]` when the LFFM runs with a frozen extractor. `fnc` is the
/// raw matrix `[1, C, C]`, or the resampled `[h_z, w_z]` map for the LFFM.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierInput<T> {
    pub structural: Option<Tensor<T>>,
    pub fnc: Option<Tensor<T>>,
}

/// Encoder-only view of an autoencoder used as the structural extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct Extractor<T> {
    pub desc: AutoencoderDescriptor,
    pub params: Params<T>,
}

impl<T: Scalar> Extractor<T> {
    pub fn from_autoencoder(ae: &Autoencoder<T>) -> Self {
        let mut params = Params::new();
        for (name, t) in ae.params.iter().filter(|(n, _)| n.starts_with("enc.")) {
            params.insert(name, t.clone());
        }
        Self { desc: ae.desc.clone(), params }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel<T> {
    pub desc: ClassifierDescriptor,
    pub params: Params<T>,
    /// Present exactly when the LFFM is enabled.
    pub extractor: Option<Extractor<T>>,
}

fn init_stream<T: Scalar>(p: &mut Params<T>, rng: &mut impl Rng, prefix: &str, n: usize, dim: usize, vit: &VitConfig) {
    let e = vit.embed_dim;
    p.insert(format!("{prefix}.proj.w"), scaled_normal(rng, &[dim, e], dim, 1.0));
    p.insert(format!("{prefix}.proj.b"), Tensor::zeros(&[e]));
    p.insert(format!("{prefix}.pos"), scaled_normal(rng, &[n, e], 1, 0.02));
    for l in 0..vit.layers {
        init_block(p, rng, &format!("{prefix}.l{l}"), vit);
    }
}

fn init_norm<T: Scalar>(p: &mut Params<T>, name: &str, e: usize) {
    p.insert(format!("{name}.g"), Tensor::full(&[e], T::one()));
    p.insert(format!("{name}.b"), Tensor::zeros(&[e]));
}

fn init_attention<T: Scalar>(p: &mut Params<T>, rng: &mut impl Rng, prefix: &str, vit: &VitConfig) {
    let (e, h) = (vit.embed_dim, vit.heads);
    let dh = e / h;
    for n in ["q", "k", "v"] {
        p.insert(format!("{prefix}.{n}"), scaled_normal(rng, &[h, e, dh], e, 1.0));
    }
    p.insert(format!("{prefix}.o"), scaled_normal(rng, &[h, dh, e], e, 1.0));
}

fn init_block<T: Scalar>(p: &mut Params<T>, rng: &mut impl Rng, prefix: &str, vit: &VitConfig) {
    let (e, f) = (vit.embed_dim, vit.ff_dim);
    init_norm(p, &format!("{prefix}.ln1"), e);
    init_attention(p, rng, &format!("{prefix}.attn"), vit);
    init_norm(p, &format!("{prefix}.ln2"), e);
    p.insert(format!("{prefix}.ff1.w"), scaled_normal(rng, &[e, f], e, 1.0));
    p.insert(format!("{prefix}.ff1.b"), Tensor::zeros(&[f]));
    p.insert(format!("{prefix}.ff2.w"), scaled_normal(rng, &[f, e], f, 1.0));
    p.insert(format!("{prefix}.ff2.b"), Tensor::zeros(&[e]));
}

fn to_tensor<T: Scalar>(shape: &[usize], values: &[f32]) -> Result<Tensor<T>> {
    Tensor::from_vec(shape, values.iter().map(|&v| T::c(v as f64)).collect())
}

impl<T: Scalar> ClassifierModel<T> {
    /// Fresh parameters. `ae` supplies the pretrained extractor and is
    /// required exactly when the descriptor enables the LFFM.
    pub fn init(desc: ClassifierDescriptor, ae: Option<&Autoencoder<T>>, seed: u64) -> Result<Self> {
        desc.validate()?;
        let extractor = match (desc.lffm, ae) {
            (true, Some(ae)) => {
                if ae.desc.latent_shape() != desc.latent_shape || ae.desc.input_dims != desc.volume_dims {
                    return Err(Error::Shape("extractor does not match the classifier descriptor".into()));
                }
                Some(Extractor::from_autoencoder(ae))
            }
            (true, None) => return Err(Error::Invalid("the LFFM needs a pretrained extractor".into())),
            (false, _) => None,
        };
        let mut rng = rng_for(seed, 0xC1);
        let vit = desc.vit;
        let mut p = Params::new();
        if desc.lffm {
            p.extend(init_lffm_params(&desc.lffm_descriptor(), &mut rng));
        }
        if desc.uses_stem() {
            let c = desc.stem_channels;
            p.insert("stem.w", scaled_normal(&mut rng, &[c, 1, 3, 3, 3], 27, 1.0));
            p.insert("stem.b", Tensor::zeros(&[c]));
        }
        if desc.modalities.uses_mri() {
            let (n, dim) = desc.structural_tokens()?;
            init_stream(&mut p, &mut rng, "mri", n, dim, &vit);
        }
        if desc.modalities.uses_fnc() {
            let [c, h, w] = desc.fnc_source();
            init_stream(&mut p, &mut rng, "fnc", h, c * w, &vit);
        }
        if desc.cross_fusion() {
            init_norm(&mut p, "cross.lnq", vit.embed_dim);
            init_norm(&mut p, "cross.lnkv", vit.embed_dim);
            init_attention(&mut p, &mut rng, "cross.attn", &vit);
        }
        init_norm(&mut p, "head.ln", vit.embed_dim);
        p.insert("head.fc1.w", scaled_normal(&mut rng, &[vit.embed_dim, vit.mlp_hidden], vit.embed_dim, 1.0));
        p.insert("head.fc1.b", Tensor::zeros(&[vit.mlp_hidden]));
        p.insert("head.fc2.w", scaled_normal(&mut rng, &[vit.mlp_hidden, 2], vit.mlp_hidden, 1.0));
        p.insert("head.fc2.b", Tensor::zeros(&[2]));
        Ok(Self { desc, params: p, extractor })
    }

    pub fn from_parts(desc: ClassifierDescriptor, params: Params<T>, extractor: Option<Extractor<T>>) -> Result<Self> {
        let dummy_ae = extractor.as_ref().map(|e| {
            let mut full = Autoencoder::<T>::init(e.desc.clone(), 0)?;
            for (name, t) in e.params.iter() {
                match full.params.get_mut(name) {
                    Some(slot) if slot.shape() == t.shape() => *slot = t.clone(),
                    _ => return Err(Error::Shape(format!("unexpected extractor parameter `{name}`"))),
                }
            }
            Ok(full)
        });
        let dummy_ae = dummy_ae.transpose()?;
        let reference = Self::init(desc.clone(), dummy_ae.as_ref(), 0)?;
        if reference.params.specs() != params.specs() {
            return Err(Error::Shape("classifier parameter layout does not match the descriptor".into()));
        }
        if !params.all_finite() {
            return Err(Error::Range("classifier parameters contain non-finite values".into()));
        }
        Ok(Self { desc, params, extractor })
    }

    /// Builds the inputs this architecture consumes. With a frozen
    /// extractor the latent is computed here, once.
    pub fn prepare(&self, v: &StructuralVolume, f: &FncMatrix) -> Result<ClassifierInput<T>> {
        let d = &self.desc;
        let structural = if !d.modalities.uses_mri() {
            None
        } else if d.lffm && !d.finetune_extractor {
            let ex = self.extractor.as_ref().expect("lffm models carry an extractor");
            if v.dims() != ex.desc.input_dims {
                return Err(Error::Shape(format!("volume dims {:?} do not match {:?}", v.dims(), ex.desc.input_dims)));
            }
            let mut g = Graph::new();
            let p = g.bind_frozen(&ex.params);
            let [dd, h, w] = v.dims();
            let x = g.constant(to_tensor(&[1, dd, h, w], v.voxels())?);
            let (mu, _) = encode_graph(&mut g, &p, &ex.desc, x)?;
            Some(g.value(mu).clone())
        } else {
            if v.dims() != d.volume_dims {
                return Err(Error::Shape(format!("volume dims {:?} do not match {:?}", v.dims(), d.volume_dims)));
            }
            let [dd, h, w] = v.dims();
            Some(to_tensor(&[1, dd, h, w], v.voxels())?)
        };
        let fnc = if !d.modalities.uses_fnc() {
            None
        } else {
            if f.size() != d.fnc_size {
                return Err(Error::Shape(format!("FNC size {} does not match {}", f.size(), d.fnc_size)));
            }
            if d.lffm {
                let [_, h, w] = d.fnc_source();
                Some(resample_bilinear(f, h, w)?)
            } else {
                Some(to_tensor(&[1, f.size(), f.size()], f.entries())?)
            }
        };
        Ok(ClassifierInput { structural, fnc })
    }

    pub fn patch_map(&self) -> Option<PatchMap> {
        self.desc.modalities.uses_mri().then(|| {
            let (grid, patch) = self.desc.structural_grid();
            PatchMap::new(grid, patch).expect("validated descriptor")
        })
    }

    /// Probabilities and attention for one subject.
    pub fn forward(&self, v: &StructuralVolume, f: &FncMatrix) -> Result<([f64; 2], AttentionRecord)> {
        let input = self.prepare(v, f)?;
        self.forward_input(&input)
    }

    pub fn forward_input(&self, input: &ClassifierInput<T>) -> Result<([f64; 2], AttentionRecord)> {
        let mut g = Graph::new();
        let p = g.bind_frozen(&self.params);
        let ex = self.extractor.as_ref().map(|e| (g.bind_frozen(&e.params), &e.desc));
        let mut attn = AttentionVars::default();
        let logits = forward_graph(&mut g, &p, ex.as_ref().map(|(b, d)| (b, *d)), &self.desc, input, &mut attn)?;
        let probs = softmax2(g.value(logits).data());
        Ok((probs, attn.record(&g, self.patch_map())))
    }

    pub fn predict(&self, input: &ClassifierInput<T>) -> Result<[f64; 2]> {
        let mut g = Graph::new();
        let p = g.bind_frozen(&self.params);
        let ex = self.extractor.as_ref().map(|e| (g.bind_frozen(&e.params), &e.desc));
        let mut attn = AttentionVars::default();
        let logits = forward_graph(&mut g, &p, ex.as_ref().map(|(b, d)| (b, *d)), &self.desc, input, &mut attn)?;
        Ok(softmax2(g.value(logits).data()))
    }
}

pub fn softmax2<T: Scalar>(logits: &[T]) -> [f64; 2] {
    let (a, b) = (logits[0].to_f64_lossy(), logits[1].to_f64_lossy());
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    [ea / (ea + eb), eb / (ea + eb)]
}

/// Full forward pass to logits `[2]`. `extractor` is only read when the
/// descriptor fine-tunes the extractor; otherwise the input already holds
/// the latent.
pub fn forward_graph<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    p: &Bound<'a, T>,
    extractor: Option<(&Bound<'a, T>, &AutoencoderDescriptor)>,
    desc: &ClassifierDescriptor,
    input: &'a ClassifierInput<T>,
    attn: &mut AttentionVars,
) -> Result<Var> {
    let vit = desc.vit;
    let missing = |what: &str| Error::Invalid(format!("input is missing the {what} modality"));

    let fnc_map = if desc.modalities.uses_fnc() {
        let src = input.fnc.as_ref().ok_or_else(|| missing("FNC"))?;
        let x = g.borrowed(src, false);
        Some(if desc.lffm { lift_graph(g, p, x) } else { x })
    } else {
        None
    };

    let mri = if desc.modalities.uses_mri() {
        let src = input.structural.as_ref().ok_or_else(|| missing("structural"))?;
        let x = g.borrowed(src, false);
        let (channels, _, _) = desc.structural_source();
        let grid_src = if desc.lffm {
            let z = if desc.finetune_extractor {
                let (eb, ed) = extractor.ok_or_else(|| Error::Invalid("fine-tuning needs the extractor bound".into()))?;
                encode_graph(g, eb, ed, x)?.0
            } else {
                x
            };
            let zp = fnc_map.ok_or_else(|| missing("FNC"))?;
            let fused = fuse_graph(g, p, z, zp)?;
            check_finite(g, fused, "lffm", 0)?;
            fused
        } else if desc.uses_stem() {
            let s = g.conv3d(x, p.var("stem.w"), 2, 1);
            let s = g.add_channel_bias(s, p.var("stem.b"));
            g.silu(s)
        } else {
            x
        };
        let (grid, patch) = desc.structural_grid();
        let map = PatchMap::new(grid, patch)?;
        let tokens = embed_graph(g, p, "mri", grid_src, Arc::new(map.gather_index(channels)), map.len());
        Some(stack_graph(g, p, "mri", tokens, vit.layers, vit.heads, StreamTag::Fused, attn)?)
    } else {
        None
    };

    let fnc = match fnc_map {
        Some(x) => {
            let shape = desc.fnc_source();
            let tokens = embed_graph(g, p, "fnc", x, Arc::new(row_token_index(shape)), shape[1]);
            Some(stack_graph(g, p, "fnc", tokens, vit.layers, vit.heads, StreamTag::Fnc, attn)?)
        }
        None => None,
    };

    let final_seq = match (mri, fnc) {
        (Some(m), Some(f)) => cross_graph(g, p, m, f, vit.heads, attn)?,
        (Some(m), None) => m,
        (None, Some(f)) => f,
        (None, None) => unreachable!("validated descriptor uses a modality"),
    };
    let logits = head_graph(g, p, final_seq);
    check_finite(g, logits, "head", 0)?;
    Ok(logits)
}

/// Stand-alone tokenization of a fused latent with the `mri` stream
/// projection and positional embeddings.
pub fn tokenize_latent<T: Scalar>(zf: &Tensor<T>, patch: [usize; 3], params: &Params<T>) -> Result<TokenSequence<T>> {
    let s = zf.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("latent must be 4-D, got {s:?}")));
    }
    let map = PatchMap::new([s[1], s[2], s[3]], patch)?;
    let mut g = Graph::new();
    let p = g.bind_frozen(params);
    let x = g.borrowed(zf, false);
    let t = embed_graph(&mut g, &p, "mri", x, Arc::new(map.gather_index(s[0])), map.len());
    Ok(TokenSequence { tokens: g.value(t).clone(), patch_map: Some(map) })
}

/// Stand-alone FNC row tokenization of a `[C, H, W]` map.
pub fn tokenize_fnc<T: Scalar>(zp: &Tensor<T>, params: &Params<T>) -> Result<TokenSequence<T>> {
    let s = zp.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("FNC map must be 3-D, got {s:?}")));
    }
    let mut g = Graph::new();
    let p = g.bind_frozen(params);
    let x = g.borrowed(zp, false);
    let t = embed_graph(&mut g, &p, "fnc", x, Arc::new(row_token_index([s[0], s[1], s[2]])), s[1]);
    Ok(TokenSequence { tokens: g.value(t).clone(), patch_map: None })
}

fn matrices<T: Scalar>(g: &Graph<'_, T>, vars: &[Var]) -> Vec<Tensor<T>> {
    vars.iter().map(|&v| g.value(v).clone()).collect()
}

/// One pre-norm block named `prefix`; returns the new tokens and one
/// attention matrix per head.
pub fn self_attention_block<T: Scalar>(seq: &Tensor<T>, params: &Params<T>, prefix: &str, heads: usize) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let p = g.bind_frozen(params);
    let x = g.borrowed(seq, false);
    let (out, probs) = block_graph(&mut g, &p, prefix, x, heads);
    check_finite(&g, out, prefix, 0)?;
    Ok((g.value(out).clone(), matrices(&g, &probs)))
}

/// `layers` blocks named `{prefix}.l{i}` with every attention matrix kept.
pub fn transformer_stack<T: Scalar>(
    seq: &Tensor<T>,
    params: &Params<T>,
    prefix: &str,
    layers: usize,
    heads: usize,
    tag: StreamTag,
) -> Result<(Tensor<T>, AttentionRecord)> {
    let mut g = Graph::new();
    let p = g.bind_frozen(params);
    let x = g.borrowed(seq, false);
    let mut attn = AttentionVars::default();
    let out = stack_graph(&mut g, &p, prefix, x, layers, heads, tag, &mut attn)?;
    Ok((g.value(out).clone(), attn.record(&g, None)))
}

pub fn cross_attention<T: Scalar>(q_seq: &Tensor<T>, kv_seq: &Tensor<T>, params: &Params<T>, heads: usize) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    if q_seq.shape().len() != 2 || kv_seq.shape().len() != 2 || q_seq.shape()[1] != kv_seq.shape()[1] {
        return Err(Error::Shape(format!(
            "cross-attention embed dims differ: {:?} vs {:?}",
            q_seq.shape(),
            kv_seq.shape()
        )));
    }
    let mut g = Graph::new();
    let p = g.bind_frozen(params);
    let q = g.borrowed(q_seq, false);
    let kv = g.borrowed(kv_seq, false);
    let mut attn = AttentionVars::default();
    let out = cross_graph(&mut g, &p, q, kv, heads, &mut attn)?;
    let probs: Vec<Var> = attn.entries.iter().map(|e| e.3).collect();
    Ok((g.value(out).clone(), matrices(&g, &probs)))
}

/// Class probabilities from a final token sequence.
pub fn classify<T: Scalar>(seq: &Tensor<T>, params: &Params<T>) -> Result<[f64; 2]> {
    let mut g = Graph::new();
    let p = g.bind_frozen(params);
    let x = g.borrowed(seq, false);
    let logits = head_graph(&mut g, &p, x);
    check_finite(&g, logits, "head", 0)?;
    Ok(softmax2(g.value(logits).data()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_vit() -> VitConfig {
        VitConfig { embed_dim: 8, layers: 1, heads: 2, ff_dim: 8, mlp_hidden: 6 }
    }

    #[test]
    fn patch_map_partitions_grid() {
        let m = PatchMap::new([4, 4, 4], [2, 2, 2]).unwrap();
        assert_eq!(m.len(), 8);
        let mut seen = vec![0; 64];
        for t in 0..m.len() {
            let [a, b, c] = m.block(t);
            for z in a.clone() {
                for y in b.clone() {
                    for x in c.clone() {
                        seen[(z * 4 + y) * 4 + x] += 1;
                        assert_eq!(m.token_of(z, y, x), t);
                    }
                }
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
        assert!(PatchMap::new([4, 5, 4], [2, 2, 2]).is_err());
    }

    #[test]
    fn row_tokens_follow_rows() {
        let idx = row_token_index([2, 3, 2]);
        assert_eq!(&idx[..4], &[0, 1, 6, 7]);
        assert_eq!(&idx[4..8], &[2, 3, 8, 9]);
    }

    #[test]
    fn illegal_descriptors_are_rejected() {
        let d = ClassifierDescriptor::new(ArchMode::VitUnimodal, Modalities::MriFnc, false, [24, 28, 24], 16, [4, 3, 4, 3]);
        assert!(d.validate().is_err());
        let d = ClassifierDescriptor::new(ArchMode::Multivit1, Modalities::MriFnc, true, [24, 28, 24], 16, [4, 3, 4, 3]);
        assert!(d.validate().is_err());
        let mut d = ClassifierDescriptor::new(ArchMode::Hybrid, Modalities::MriFnc, true, [24, 28, 24], 16, [4, 3, 4, 3]);
        d.vit.heads = 3;
        assert!(d.validate().is_err());
    }

    #[test]
    fn unimodal_models_ignore_the_other_modality() {
        let mut d = ClassifierDescriptor::new(ArchMode::VitUnimodal, Modalities::Mri, false, [8, 8, 8], 4, [0; 4]);
        d.raw_patch = [4, 4, 4];
        d.vit = tiny_vit();
        let m = ClassifierModel::<f64>::init(d, None, 3).unwrap();
        let v = StructuralVolume::new([8, 8, 8], (0..512).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let (a, rec) = m.forward(&v, &FncMatrix::identity(4)).unwrap();
        let mut e = vec![0.3f32; 16];
        for i in 0..4 {
            e[i * 5] = 1.0;
        }
        let (b, _) = m.forward(&v, &FncMatrix::new(4, e).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(rec.matrices.len(), 2);
        assert!(rec.stream(StreamTag::Fnc).next().is_none());
    }
}
