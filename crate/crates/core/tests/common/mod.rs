//! Independent oracles shared by the per-topic tests and the acceptance
//! runner. Each check returns `Ok(summary)` on success and `Err(reason)`
//! otherwise.

#![allow(dead_code)]

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use multivit::autoencoder::{
    decode_graph, encode_graph, kl_graph, kl_loss, recon_loss, reparameterize, total_loss, Autoencoder, AutoencoderDescriptor,
    GaussianPosterior, LatentTensor,
};
use multivit::classifier::{
    block_graph, cross_graph, forward_graph, head_graph, softmax2, ArchMode, AttentionVars, ClassifierDescriptor, ClassifierModel,
    Modalities, VitConfig,
};
use multivit::data::{FncMatrix, Label, StructuralVolume};
use multivit::diffusion::{diffusion_loss_graph, forward_marginal, forward_step, make_schedule, Denoiser, DenoiserDescriptor, ScheduleKind};
use multivit::graph::{Bound, Graph, Var};
use multivit::lffm::{fuse, fuse_graph, init_lffm_params, lift_graph, FncLatent, LffmDescriptor};
use multivit::params::Params;
use multivit::training::{adamw_step, compute_auc, lr_at, AdamWConfig, LrState, OptimizerState, SchedulerConfig};
use multivit::Tensor;

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

pub fn within_budget(name: &str, started: Instant, budget: Duration) -> Check {
    let took = started.elapsed();
    if took > budget {
        Err(format!("{name} took {:.1}s, budget {:.0}s", took.as_secs_f64(), budget.as_secs_f64()))
    } else {
        Ok(format!("{:.2}s", took.as_secs_f64()))
    }
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{name}: got {got:.12}, want {want:.12} (tol {tol:e})"))
    }
}

// ---------------------------------------------------------------------------
// Loss closed forms

pub fn loss_closed_forms() -> Check {
    let started = Instant::now();
    let t = |v: &[f64]| Tensor::from_vec(&[v.len()], v.to_vec()).unwrap();
    close("recon identical", recon_loss(&t(&[0.3, 0.7]), &t(&[0.3, 0.7])).unwrap(), 0.0, 1e-9)?;
    close("recon zeros vs ones", recon_loss(&t(&[0.0; 4]), &t(&[1.0; 4])).unwrap(), 1.0, 1e-9)?;
    close("recon {0,1} vs {0.5,0.5}", recon_loss(&t(&[0.0, 1.0]), &t(&[0.5, 0.5])).unwrap(), 0.25, 1e-9)?;

    let post = |mu: &[f64], var: &[f64]| GaussianPosterior::new(t(mu), t(&var.iter().map(|v| v.ln()).collect::<Vec<_>>())).unwrap();
    close("kl prior", kl_loss(&post(&[0.0; 3], &[1.0; 3])).unwrap(), 0.0, 1e-9)?;
    close("kl mu=1", kl_loss(&post(&[1.0], &[1.0])).unwrap(), 0.5, 1e-9)?;
    let e = std::f64::consts::E;
    close("kl var=e", kl_loss(&post(&[0.0], &[e])).unwrap(), (e - 2.0) / 2.0, 1e-9)?;
    close("total", total_loss(0.25, 0.5, 1.0, 1e-2).unwrap(), 0.255, 1e-9)?;

    let mut r = rng(11);
    let mut min_kl = f64::INFINITY;
    for _ in 0..1000 {
        let n = r.gen_range(1..16);
        let mu = uniform(&mut r, &[n], -3.0, 3.0);
        let lv = uniform(&mut r, &[n], -6.0, 4.0);
        let kl = kl_loss(&GaussianPosterior::new(mu, lv).unwrap()).unwrap();
        min_kl = min_kl.min(kl);
        if !(kl >= 0.0) {
            return Err(format!("negative KL {kl}"));
        }
    }
    let time = within_budget("loss checks", started, Duration::from_secs(1))?;
    Ok(format!("hand examples exact to 1e-9, min KL over 1000 posteriors {min_kl:.3e}, {time}"))
}

// ---------------------------------------------------------------------------
// Finite-difference gradients

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

fn bind<'a>(g: &mut Graph<'a, f64>, p: &'a Params<f64>, grad: bool) -> Bound<'a, f64> {
    if grad {
        g.bind(p)
    } else {
        g.bind_frozen(p)
    }
}

/// Reduces `out` to a scalar with a fixed random projection, returning the
/// value and, when requested, the parameter gradients.
fn finish(mut g: Graph<'_, f64>, b: &Bound<'_, f64>, out: Var, grad: bool) -> (f64, Option<Params<f64>>) {
    let shape = g.shape(out).to_vec();
    let r = uniform(&mut rng(0xFD), &shape, -1.0, 1.0);
    let rv = g.constant(r);
    let m = g.mul(out, rv);
    let loss = g.sum(m);
    let value = g.value(loss).item();
    let grads = grad.then(|| g.backward(loss).for_params(b));
    (value, grads)
}

/// Compares analytic gradients of every parameter whose name starts with one
/// of `only` (all parameters when empty) against central differences.
/// Returns the worst relative error.
pub fn gradcheck(params: &Params<f64>, only: &[&str], f: impl Fn(&Params<f64>, bool) -> (f64, Option<Params<f64>>)) -> Result<f64, String> {
    let (_, analytic) = f(params, true);
    let analytic = analytic.expect("gradients requested");
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (name, t) in params.iter() {
        if !only.is_empty() && !only.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        let n = t.len();
        let picks: Vec<usize> = if n <= 6 { (0..n).collect() } else { (0..6).map(|k| k * n / 6 + (k % 2)).collect() };
        for i in picks {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.get_mut(name).unwrap().data_mut()[i] += delta;
                f(&p, false).0
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let a = analytic.get(name).unwrap().data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel >= FD_TOL {
                return Err(format!("{name}[{i}]: analytic {a:.9e} vs numeric {numeric:.9e} (rel {rel:.2e})"));
            }
            worst = worst.max(rel);
            checked += 1;
        }
    }
    if checked == 0 {
        return Err("no parameters selected".into());
    }
    Ok(worst)
}

pub fn tiny_ae_desc() -> AutoencoderDescriptor {
    AutoencoderDescriptor { input_dims: [4, 6, 4], enc_channels: vec![2], latent_channels: 2, dec_channels: vec![3, 2] }
}

pub fn tiny_vit() -> VitConfig {
    VitConfig { embed_dim: 4, layers: 1, heads: 2, ff_dim: 6, mlp_hidden: 5 }
}

pub fn tiny_volume(seed: u64, dims: [usize; 3]) -> StructuralVolume {
    let mut r = rng(seed);
    let n = dims.iter().product();
    StructuralVolume::new(dims, (0..n).map(|_| r.gen_range(0.0f32..1.0)).collect()).unwrap()
}

pub fn tiny_fnc(seed: u64, size: usize) -> FncMatrix {
    let mut r = rng(seed);
    let mut e = vec![0.0f32; size * size];
    for i in 0..size {
        for j in 0..size {
            if i == j {
                e[i * size + j] = 1.0;
            } else if j > i {
                let v = r.gen_range(-0.9f32..0.9);
                e[i * size + j] = v;
                e[j * size + i] = v;
            }
        }
    }
    FncMatrix::new(size, e).unwrap()
}

pub fn tiny_ae(seed: u64) -> Autoencoder<f64> {
    Autoencoder::init(tiny_ae_desc(), seed).unwrap()
}

/// Every architecture the matrix uses, at toy size.
pub fn tiny_classifiers(seed: u64) -> Vec<(&'static str, ClassifierModel<f64>)> {
    let ae = tiny_ae(seed);
    let dims = ae.desc.input_dims;
    let latent = ae.desc.latent_shape();
    let make = |mode, modalities, lffm, finetune: bool| {
        let mut d = ClassifierDescriptor::new(mode, modalities, lffm, dims, 4, latent);
        d.vit = tiny_vit();
        d.raw_patch = [2, 3, 2];
        d.stem_channels = 2;
        d.stem_patch = [1, 3, 1];
        d.finetune_extractor = finetune;
        ClassifierModel::init(d, lffm.then_some(&ae), seed).unwrap()
    };
    vec![
        ("vit-mri", make(ArchMode::VitUnimodal, Modalities::Mri, false, false)),
        ("vit-fnc", make(ArchMode::VitUnimodal, Modalities::Fnc, false, false)),
        ("multivit1", make(ArchMode::Multivit1, Modalities::MriFnc, false, false)),
        ("hybrid-stem", make(ArchMode::Hybrid, Modalities::MriFnc, false, false)),
        ("hybrid-lffm", make(ArchMode::Hybrid, Modalities::MriFnc, true, false)),
        ("hybrid-lffm-finetune", make(ArchMode::Hybrid, Modalities::MriFnc, true, true)),
    ]
}

pub fn grad_encoder() -> Result<f64, String> {
    let ae = tiny_ae(1);
    let x = uniform(&mut rng(2), &[1, 4, 6, 4], 0.0, 1.0);
    gradcheck(&ae.params, &["enc."], |p, grad| {
        let mut g = Graph::new();
        let b = bind(&mut g, p, grad);
        let xv = g.constant(x.clone());
        let (mu, lv) = encode_graph(&mut g, &b, &ae.desc, xv).unwrap();
        let out = g.concat(&[mu, lv]);
        finish(g, &b, out, grad)
    })
}

pub fn grad_decoder() -> Result<f64, String> {
    let ae = tiny_ae(3);
    let z = uniform(&mut rng(4), &ae.desc.latent_shape(), -1.0, 1.0);
    gradcheck(&ae.params, &["dec."], |p, grad| {
        let mut g = Graph::new();
        let b = bind(&mut g, p, grad);
        let zv = g.constant(z.clone());
        let out = decode_graph(&mut g, &b, &ae.desc, zv).unwrap();
        finish(g, &b, out, grad)
    })
}

/// Reconstruction plus KL through the reparameterised sample.
pub fn grad_autoencoder_losses() -> Result<f64, String> {
    let ae = tiny_ae(5);
    let x = uniform(&mut rng(6), &[1, 4, 6, 4], 0.0, 1.0);
    let noise = uniform(&mut rng(7), &ae.desc.latent_shape(), -1.0, 1.0);
    gradcheck(&ae.params, &[], |p, grad| {
        let mut g = Graph::new();
        let b = bind(&mut g, p, grad);
        let xv = g.constant(x.clone());
        let (mu, lv) = encode_graph(&mut g, &b, &ae.desc, xv).unwrap();
        let nv = g.constant(noise.clone());
        let z = reparameterize(&mut g, mu, lv, nv);
        let xh = decode_graph(&mut g, &b, &ae.desc, z).unwrap();
        let rl = g.mse(xh, xv);
        let kl = kl_graph(&mut g, mu, lv);
        let kl = g.scale(kl, 0.1);
        let out = g.add(rl, kl);
        finish(g, &b, out, grad)
    })
}

pub fn grad_denoiser() -> Result<f64, String> {
    let desc = DenoiserDescriptor { latent_shape: [2, 3, 4, 3], width: 3, time_dim: 4, steps: 10 };
    let model = Denoiser::<f64>::init(desc, 8).unwrap();
    let schedule = make_schedule(ScheduleKind::Linear, 0.01, 0.2, 10).unwrap();
    let z0 = uniform(&mut rng(9), &[2, 3, 4, 3], -1.0, 1.0);
    let noise = uniform(&mut rng(10), &[2, 3, 4, 3], -1.0, 1.0);
    gradcheck(&model.params, &[], |p, grad| {
        let mut g = Graph::new();
        let b = bind(&mut g, p, grad);
        let out = diffusion_loss_graph(&mut g, &b, &model, &schedule, &z0, 6, &noise).unwrap();
        finish(g, &b, out, grad)
    })
}

pub fn grad_lffm() -> Result<f64, String> {
    let desc = LffmDescriptor { latent_shape: [2, 2, 3, 3] };
    let params: Params<f64> = init_lffm_params(&desc, &mut rng(12));
    let z = uniform(&mut rng(13), &[2, 2, 3, 3], -1.0, 1.0);
    let map = uniform(&mut rng(14), &[3, 3], -1.0, 1.0);
    gradcheck(&params, &[], |p, grad| {
        let mut g = Graph::new();
        let b = bind(&mut g, p, grad);
        let zv = g.constant(z.clone());
        let mv = g.constant(map.clone());
        let zp = lift_graph(&mut g, &b, mv);
        let out = fuse_graph(&mut g, &b, zv, zp).unwrap();
        finish(g, &b, out, grad)
    })
}

fn model(name: &str) -> ClassifierModel<f64> {
    tiny_classifiers(15).into_iter().find(|(n, _)| *n == name).unwrap().1
}

pub fn grad_self_attention() -> Result<f64, String> {
    let m = model("hybrid-lffm");
    let seq = uniform(&mut rng(16), &[5, 4], -1.0, 1.0);
    gradcheck(&m.params, &["mri.l0."], |p, grad| {
        let mut g = Graph::new();
        let b = bind(&mut g, p, grad);
        let x = g.constant(seq.clone());
        let (out, _) = block_graph(&mut g, &b, "mri.l0", x, 2);
        finish(g, &b, out, grad)
    })
}

pub fn grad_cross_attention() -> Result<f64, String> {
    let m = model("hybrid-lffm");
    let q = uniform(&mut rng(17), &[5, 4], -1.0, 1.0);
    let kv = uniform(&mut rng(18), &[3, 4], -1.0, 1.0);
    gradcheck(&m.params, &["cross."], |p, grad| {
        let mut g = Graph::new();
        let b = bind(&mut g, p, grad);
        let qv = g.constant(q.clone());
        let kvv = g.constant(kv.clone());
        let mut attn = AttentionVars::default();
        let out = cross_graph(&mut g, &b, qv, kvv, 2, &mut attn).unwrap();
        finish(g, &b, out, grad)
    })
}

pub fn grad_head() -> Result<f64, String> {
    let m = model("multivit1");
    let seq = uniform(&mut rng(19), &[6, 4], -1.0, 1.0);
    gradcheck(&m.params, &["head."], |p, grad| {
        let mut g = Graph::new();
        let b = bind(&mut g, p, grad);
        let x = g.constant(seq.clone());
        let out = head_graph(&mut g, &b, x);
        finish(g, &b, out, grad)
    })
}

/// Cross-entropy through the whole classifier, including the stem, patch
/// and row embeddings and, when fine-tuned, the extractor encoder.
pub fn grad_classifier(name: &str) -> Result<f64, String> {
    let m = model(name);
    let v = tiny_volume(20, m.desc.volume_dims);
    let f = tiny_fnc(21, m.desc.fnc_size);
    let input = m.prepare(&v, &f).map_err(|e| e.to_string())?;
    let mut all = m.params.clone();
    if let (true, Some(e)) = (m.desc.finetune_extractor, &m.extractor) {
        all.extend(e.params.clone());
    }
    let ex_desc = m.extractor.as_ref().map(|e| e.desc.clone());
    gradcheck(&all, &[], |p, grad| {
        let mut g = Graph::new();
        let b = bind(&mut g, p, grad);
        let ex = match (&ex_desc, m.desc.finetune_extractor) {
            (Some(d), true) => Some((&b, d)),
            _ => None,
        };
        let mut attn = AttentionVars::default();
        let logits = forward_graph(&mut g, &b, ex, &m.desc, &input, &mut attn).unwrap();
        let out = g.cross_entropy(logits, Label::Patient.index());
        finish(g, &b, out, grad)
    })
}

pub const CLASSIFIER_VARIANTS: [&str; 6] = ["vit-mri", "vit-fnc", "multivit1", "hybrid-stem", "hybrid-lffm", "hybrid-lffm-finetune"];

pub fn gradient_suite() -> Check {
    let started = Instant::now();
    let mut parts: Vec<(String, Result<f64, String>)> = vec![
        ("encoder".into(), grad_encoder()),
        ("decoder".into(), grad_decoder()),
        ("autoencoder losses".into(), grad_autoencoder_losses()),
        ("denoiser".into(), grad_denoiser()),
        ("lffm".into(), grad_lffm()),
        ("self-attention".into(), grad_self_attention()),
        ("cross-attention".into(), grad_cross_attention()),
        ("head".into(), grad_head()),
    ];
    for v in CLASSIFIER_VARIANTS {
        parts.push((format!("classifier {v}"), grad_classifier(v)));
    }
    let mut worst = 0.0f64;
    for (name, r) in &parts {
        match r {
            Ok(e) => worst = worst.max(*e),
            Err(e) => return Err(format!("{name}: {e}")),
        }
    }
    let time = within_budget("gradient suite", started, Duration::from_secs(120))?;
    Ok(format!("{} components, worst relative error {worst:.2e}, {time}", parts.len()))
}

// ---------------------------------------------------------------------------
// Diffusion marginal

/// Iterates `forward_step` `t` times from `z0` over `n` noise draws and
/// compares the empirical mean/std with `forward_marginal`.
pub fn marginal_probe(z0: f64, t: usize, beta_start: f64, beta_end: f64, steps: usize, n: usize, seed: u64) -> Result<String, String> {
    let schedule = make_schedule(ScheduleKind::Linear, beta_start, beta_end, steps).unwrap();
    let z0t = Tensor::from_vec(&[1], vec![z0]).unwrap();
    let mean = forward_marginal(&z0t, t, &schedule, &Tensor::zeros(&[1])).unwrap().data()[0];
    let std = forward_marginal(&z0t, t, &schedule, &Tensor::full(&[1], 1.0)).unwrap().data()[0] - mean;
    let mut r = rng(seed);
    let normal = rand_distr::StandardNormal;
    let mut xs = Vec::with_capacity(n);
    for _ in 0..n {
        let mut z = z0t.clone();
        for s in 1..=t {
            let eps = Tensor::from_vec(&[1], vec![r.sample::<f64, _>(normal)]).unwrap();
            z = forward_step(&z, schedule.beta(s), &eps).unwrap();
        }
        xs.push(z.data()[0]);
    }
    let nf = n as f64;
    let m = xs.iter().sum::<f64>() / nf;
    let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
    let se_mean = std / nf.sqrt();
    let se_std = std / (2.0 * (nf - 1.0)).sqrt();
    let dm = (m - mean).abs() / se_mean;
    let ds = (sd - std).abs() / se_std;
    let summary = format!("z0={z0:.2} t={t}/{steps}: mean {m:.4} vs {mean:.4} ({dm:.2} SE), std {sd:.4} vs {std:.4} ({ds:.2} SE)");
    if dm <= 3.0 && ds <= 3.0 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

pub fn diffusion_marginal() -> Check {
    let started = Instant::now();
    let mut r = rng(0xD1F);
    let mut lines = Vec::new();
    for probe in 0..3 {
        let steps = r.gen_range(10..60);
        let t = r.gen_range(1..=steps);
        let z0 = r.gen_range(-2.0..2.0);
        let b0 = r.gen_range(1e-4..5e-3);
        let b1 = r.gen_range(0.02..0.2);
        lines.push(marginal_probe(z0, t, b0, b1, steps, 10_000, 100 + probe)?);
    }
    let time = within_budget("marginal oracle", started, Duration::from_secs(60))?;
    Ok(format!("{}; {time}", lines.join("; ")))
}

// ---------------------------------------------------------------------------
// Optimizer, metric and schedule oracles

/// AdamW written out from its definition, one scalar at a time.
pub fn adamw_reference(theta0: &[f64], curvature: &[f64], cfg: AdamWConfig, steps: usize) -> Vec<Vec<f64>> {
    let mut theta = theta0.to_vec();
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    let mut trace = Vec::new();
    for t in 1..=steps {
        for i in 0..theta.len() {
            let g = curvature[i] * theta[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = m[i] / (1.0 - cfg.beta1.powi(t as i32));
            let vh = v[i] / (1.0 - cfg.beta2.powi(t as i32));
            theta[i] -= cfg.lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * theta[i]);
        }
        trace.push(theta.clone());
    }
    trace
}

pub fn adamw_trace() -> Result<String, String> {
    let theta0 = [1.0, -2.0, 0.5];
    let curvature = [1.0, 0.3, 4.0];
    let cfg = AdamWConfig { lr: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 };
    let want = adamw_reference(&theta0, &curvature, cfg, 10);
    let mut p = Params::new();
    p.insert("theta", Tensor::from_vec(&[3], theta0.to_vec()).unwrap());
    let mut state = OptimizerState::new(&p, cfg);
    let mut worst = 0.0f64;
    for (k, row) in want.iter().enumerate() {
        let th = p.get("theta").unwrap().data().to_vec();
        let mut grads = Params::new();
        grads.insert("theta", Tensor::from_vec(&[3], th.iter().zip(&curvature).map(|(t, c)| t * c).collect()).unwrap());
        adamw_step(&mut p, &grads, &mut state).map_err(|e| e.to_string())?;
        if state.step != k as u64 + 1 {
            return Err(format!("step counter {} after {} calls", state.step, k + 1));
        }
        for (a, b) in p.get("theta").unwrap().data().iter().zip(row) {
            worst = worst.max((a - b).abs());
        }
    }
    if worst > 1e-10 {
        return Err(format!("AdamW trace deviates by {worst:.3e}"));
    }

    let mut p = Params::new();
    p.insert("theta", Tensor::from_vec(&[1], vec![1.0]).unwrap());
    let mut state = OptimizerState::new(&p, AdamWConfig { lr: 0.1, weight_decay: 0.1, ..AdamWConfig::default() });
    let zero = p.zeros_like();
    adamw_step(&mut p, &zero, &mut state).map_err(|e| e.to_string())?;
    let th: f64 = p.get("theta").unwrap().data()[0];
    if (th - 0.99).abs() > 1e-12 {
        return Err(format!("pure decay step gave {th}"));
    }
    Ok(format!("10-step trace within {worst:.1e}"))
}

pub fn auc_pairwise(scores: &[f64], labels: &[Label]) -> f64 {
    let (mut wins, mut ties, mut pairs) = (0.0, 0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        if li != Label::Patient {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != Label::Control {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                ties += 1.0;
            }
        }
    }
    (wins + 0.5 * ties) / pairs
}

pub fn auc_matches_pairwise() -> Result<String, String> {
    let mut r = rng(0xA0C);
    let mut tied = 0;
    for k in 0..1000 {
        let n = r.gen_range(2..40);
        let levels = if k % 2 == 0 { r.gen_range(2..6) } else { 1_000_000 };
        let mut labels: Vec<Label> = (0..n).map(|_| if r.gen_bool(0.5) { Label::Patient } else { Label::Control }).collect();
        labels[0] = Label::Patient;
        labels[1] = Label::Control;
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..levels) as f64 / levels as f64).collect();
        let fast = compute_auc(&scores, &labels).map_err(|e| e.to_string())?;
        let slow = auc_pairwise(&scores, &labels);
        if fast != slow {
            return Err(format!("instance {k}: fast {fast} vs pairwise {slow}"));
        }
        if levels < 10 {
            tied += 1;
        }
    }
    Ok(format!("1000 instances ({tied} heavily tied) exact"))
}

pub fn schedule_boundaries() -> Result<String, String> {
    let mut r = rng(0x5C4);
    for case in 0..200 {
        let w = r.gen_range(1..30);
        let cfg = SchedulerConfig { base_lr: r.gen_range(1e-5..1e-2), warmup_epochs: w, patience: r.gen_range(1..6), ..SchedulerConfig::default() };
        let mut state = LrState::new(cfg);
        let mut last = None;
        let mut prev_after = f64::INFINITY;
        for epoch in 0..w + 60 {
            let (lr, next) = lr_at(epoch, last, state);
            state = next;
            if epoch + 1 == w && lr != cfg.base_lr {
                return Err(format!("case {case}: lr at epoch W-1 is {lr}, base {}", cfg.base_lr));
            }
            if epoch >= w {
                if lr > prev_after {
                    return Err(format!("case {case}: lr rose from {prev_after} to {lr} at epoch {epoch}"));
                }
                prev_after = lr;
            }
            last = Some(r.gen_range(0.0..1.0));
        }
    }
    Ok("warm-up endpoint exact, non-increasing afterwards over 200 schedules".into())
}

pub fn optimizer_metric_oracles() -> Check {
    Ok([adamw_trace()?, auc_matches_pairwise()?, schedule_boundaries()?].join("; "))
}

// ---------------------------------------------------------------------------
// Structural identities

pub fn attention_rows_and_probabilities() -> Result<String, String> {
    let mut worst_row = 0.0f64;
    let mut worst_prob = 0.0f64;
    for (name, m) in tiny_classifiers(30) {
        for s in 0..3 {
            let v = tiny_volume(40 + s, m.desc.volume_dims);
            let f = tiny_fnc(50 + s, m.desc.fnc_size);
            let (probs, rec) = m.forward(&v, &f).map_err(|e| format!("{name}: {e}"))?;
            worst_prob = worst_prob.max((probs[0] + probs[1] - 1.0).abs());
            for mat in &rec.matrices {
                for i in 0..mat.rows {
                    worst_row = worst_row.max((mat.row(i).iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
    }
    for logits in [[0.0f64, 0.0], [40.0, -40.0], [-700.0, 700.0], [1e-3, 2e-3]] {
        let p = softmax2(&logits);
        worst_prob = worst_prob.max((p[0] + p[1] - 1.0).abs());
    }
    if worst_row > 1e-5 {
        return Err(format!("attention row sum off by {worst_row:.2e}"));
    }
    if worst_prob > 1e-6 {
        return Err(format!("class probabilities off by {worst_prob:.2e}"));
    }
    Ok(format!("row sums within {worst_row:.1e}, probabilities within {worst_prob:.1e}"))
}

fn zero(p: &mut Params<f64>, name: &str) {
    p.get_mut(name).unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
}

pub fn zero_residual_identities() -> Result<String, String> {
    let mut m = model("hybrid-lffm").params;
    for n in ["mri.l0.attn.o", "mri.l0.ff2.w", "mri.l0.ff2.b", "cross.attn.o"] {
        zero(&mut m, n);
    }
    let x = uniform(&mut rng(60), &[5, 4], -2.0, 2.0);
    let kv = uniform(&mut rng(61), &[3, 4], -2.0, 2.0);
    let mut g = Graph::new();
    let b = g.bind_frozen(&m);
    let xv = g.constant(x.clone());
    let (out, _) = block_graph(&mut g, &b, "mri.l0", xv, 2);
    if g.value(out) != &x {
        return Err("zero-weight transformer block is not an identity".into());
    }
    let kvv = g.constant(kv);
    let mut attn = AttentionVars::default();
    let cross = cross_graph(&mut g, &b, xv, kvv, 2, &mut attn).map_err(|e| e.to_string())?;
    if g.value(cross) != &x {
        return Err("zero-weight cross-attention is not an identity".into());
    }

    let desc = LffmDescriptor { latent_shape: [2, 2, 3, 3] };
    let mut lp: Params<f64> = init_lffm_params(&desc, &mut rng(62));
    zero(&mut lp, "lffm.fuse.w");
    zero(&mut lp, "lffm.fuse.b");
    let z = LatentTensor::new(uniform(&mut rng(63), &[2, 2, 3, 3], -2.0, 2.0)).unwrap();
    let zp = FncLatent { values: uniform(&mut rng(64), &[2, 3, 3], -2.0, 2.0) };
    let fused = fuse(&z, &zp, &lp).map_err(|e| e.to_string())?;
    if fused.values != z.values {
        return Err("fuse with zero weights changed Z".into());
    }
    Ok("zeroed blocks and zero-weight fusion are exact identities".into())
}

pub fn structural_identities() -> Check {
    Ok([attention_rows_and_probabilities()?, zero_residual_identities()?].join("; "))
}
