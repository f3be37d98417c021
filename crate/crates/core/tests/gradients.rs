mod common;

use common::*;

fn ok(r: Result<f64, String>) {
    let worst = r.unwrap();
    assert!(worst < FD_TOL, "{worst}");
}

#[test]
fn encoder() {
    ok(grad_encoder());
}

#[test]
fn decoder() {
    ok(grad_decoder());
}

#[test]
fn reconstruction_and_kl_through_sample() {
    ok(grad_autoencoder_losses());
}

#[test]
fn denoiser_epsilon_loss() {
    ok(grad_denoiser());
}

#[test]
fn lffm_lift_and_fuse() {
    ok(grad_lffm());
}

#[test]
fn self_attention_block() {
    ok(grad_self_attention());
}

#[test]
fn cross_attention() {
    ok(grad_cross_attention());
}

#[test]
fn mlp_head() {
    ok(grad_head());
}

#[test]
fn every_classifier_variant_end_to_end() {
    for v in CLASSIFIER_VARIANTS {
        grad_classifier(v).unwrap_or_else(|e| panic!("{v}: {e}"));
    }
}

#[test]
fn checker_rejects_a_perturbed_gradient() {
    let worst = grad_head().unwrap();
    println!("head worst {worst:.2e}");
    let m = tiny_classifiers(1).remove(2).1;
    let seq = uniform(&mut rng(3), &[4, 4], -1.0, 1.0);
    let r = gradcheck(&m.params, &["head.fc2"], |p, grad| {
        let mut g = multivit::graph::Graph::new();
        let b = if grad { g.bind(p) } else { g.bind_frozen(p) };
        let x = g.constant(seq.clone());
        let out = multivit::classifier::head_graph(&mut g, &b, x);
        let loss = g.sum(out);
        let value = g.value(loss).item();
        let grads = grad.then(|| {
            let mut gr = g.backward(loss).for_params(&b);
            gr.scale_assign(1.001);
            gr
        });
        (value, grads)
    });
    assert!(r.is_err());
}
