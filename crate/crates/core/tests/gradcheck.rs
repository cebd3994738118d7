//! Central finite differences against every hand-written backward pass.

use ndarray::Array2;
use pllfer::datasets::Image;
use pllfer::hog::{hog_targets_for_patches, HogParams};
use pllfer::mim::{mim_loss, mim_loss_and_grad, pretrain_batch_loss_and_grad, PatchMask};
use pllfer::model::params::{named, named_mut};
use pllfer::model::{softmax, Classifier, DecoderConfig, EncoderConfig, HeadKind, ModelConfig, PretrainModel};
use pllfer::objectives::{
    anchor_alignment_loss, anchor_alignment_loss_and_grad, pll_loss, pll_loss_and_logit_grad,
    optimal_anchor_positions, uniform_loss, uniform_loss_and_grad,
};
use pllfer::trainer::{batch_loss_and_grad, Regularizers};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
}

fn check_matrix(
    x: &Array2<f64>,
    grad: &Array2<f64>,
    f: impl Fn(&Array2<f64>) -> f64,
    h: f64,
    tol: f64,
) {
    let mut worst = 0.0f64;
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let mut xp = x.clone();
        xp[[r, c]] += h;
        let mut xm = x.clone();
        xm[[r, c]] -= h;
        let num = (f(&xp) - f(&xm)) / (2.0 * h);
        worst = worst.max(rel_err(grad[[r, c]], num));
    }
    assert!(worst < tol, "max relative error {worst}");
}

#[test]
fn mim_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pred = random_matrix(&mut rng, 6, 5);
    let target = random_matrix(&mut rng, 6, 5);
    let mask = PatchMask {
        flags: vec![true, false, true, true, false, false],
        ratio: 0.5,
    };
    let (_, g) = mim_loss_and_grad(&pred, &target, &mask).unwrap();
    check_matrix(&pred, &g, |p| mim_loss(p, &target, &mask).unwrap(), H, 1e-4);
    // Unmasked rows carry no gradient at all.
    assert!(g.row(1).iter().chain(g.row(4).iter()).all(|&v| v == 0.0));
}

#[test]
fn pll_gradient_through_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let logits: Vec<f64> = (0..7).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut c: Vec<f64> = (0..7).map(|j| if j % 3 == 0 { 0.0 } else { rng.gen::<f64>() }).collect();
        let s: f64 = c.iter().sum();
        c.iter_mut().for_each(|v| *v /= s);
        let (_, g) = pll_loss_and_logit_grad(&logits, &c).unwrap();
        let f = |z: &[f64]| pll_loss(&softmax(z).unwrap(), &c).unwrap();
        let h = 1e-5;
        for j in 0..7 {
            let mut zp = logits.clone();
            zp[j] += h;
            let mut zm = logits.clone();
            zm[j] -= h;
            let num = (f(&zp) - f(&zm)) / (2.0 * h);
            assert!(rel_err(g[j], num) < 1e-6, "logit {j}: {} vs {num}", g[j]);
        }
    }
}

#[test]
fn uniform_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (k, d, tau) in [(7, 5, 0.5), (4, 3, 0.1), (7, 8, 0.05), (3, 2, 1.0)] {
        let x = random_matrix(&mut rng, k, d);
        let (_, g) = uniform_loss_and_grad(&x, tau).unwrap();
        // The value is about 1/τ while the gradient can be tiny, so a
        // smaller step would drown in rounding error.
        check_matrix(&x, &g, |p| uniform_loss(p, tau).unwrap(), 1e-4, 1e-4);
    }
}

#[test]
fn alignment_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let anchors = optimal_anchor_positions(4, 6, 0.1, 300, 1).unwrap().anchors;
    let q = random_matrix(&mut rng, 4, 6);
    let (_, g) = anchor_alignment_loss_and_grad(&q, &anchors).unwrap();
    check_matrix(&q, &g, |p| anchor_alignment_loss(p, &anchors).unwrap(), H, 1e-4);
}

fn tiny_config(head: HeadKind) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
        },
        decoder: DecoderConfig {
            num_classes: 3,
            depth: 1,
            heads: 2,
        },
        head,
    }
}

fn images(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Vec<Image> {
    (0..n).map(|_| Array2::from_shape_fn((size, size), |_| rng.gen::<f64>())).collect()
}

/// Perturbs every parameter of `model` and compares with `grads`.
fn check_model<M: pllfer::model::Parameters + Clone>(
    model: &M,
    grads: &M,
    loss: impl Fn(&M) -> f64,
    tol: f64,
) -> usize {
    let analytic: Vec<(String, Array2<f64>)> = named(grads).into_iter().map(|(n, t)| (n, t.clone())).collect();
    let mut checked = 0;
    let mut worst = (0.0f64, String::new());
    for (ti, (name, g)) in analytic.iter().enumerate() {
        for idx in 0..g.len() {
            let (r, c) = (idx / g.ncols(), idx % g.ncols());
            let eval = |delta: f64| {
                let mut m = model.clone();
                named_mut(&mut m)[ti].1[[r, c]] += delta;
                loss(&m)
            };
            let num = (eval(H) - eval(-H)) / (2.0 * H);
            let e = rel_err(g[[r, c]], num);
            if e > worst.0 {
                worst = (e, format!("{name}[{r},{c}] analytic {} numeric {num}", g[[r, c]]));
            }
            checked += 1;
        }
    }
    assert!(worst.0 < tol, "max relative error {} at {}", worst.0, worst.1);
    checked
}

fn end_to_end(head: HeadKind, masks: Option<Vec<PatchMask>>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_config(head);
    let anchors = optimal_anchor_positions(3, 8, 0.1, 300, 1).unwrap().anchors;
    let init = (head == HeadKind::Query).then_some(&anchors);
    let mut model = Classifier::new(cfg, init, seed).unwrap();
    // Move away from the anchor initialisation so the alignment term is live.
    if let Some(q) = model.queries_mut() {
        q.mapv_inplace(|v| v + rng.gen_range(-0.3..0.3));
    }
    let imgs = images(&mut rng, 3, 8);
    let refs: Vec<&Image> = imgs.iter().collect();
    let conf = vec![vec![0.5, 0.5, 0.0], vec![0.0, 0.0, 1.0], vec![0.2, 0.3, 0.5]];
    let reg = Regularizers {
        anchors: init,
        tau: 0.1,
        lambda_uniform: 0.7,
        lambda_align: 1.3,
    };
    let masks = masks.as_deref();
    let (_, grads) = batch_loss_and_grad(&model, &refs, &conf, &reg, masks).unwrap();
    let n = check_model(
        &model,
        &grads,
        |m| batch_loss_and_grad(m, &refs, &conf, &reg, masks).unwrap().0.total,
        1e-3,
    );
    assert!(n > 500, "only {n} parameters checked");
}

#[test]
fn end_to_end_query_decoder_gradient() {
    end_to_end(HeadKind::Query, None, 5);
}

#[test]
fn end_to_end_pooled_head_gradient() {
    end_to_end(HeadKind::Pooled, None, 6);
}

#[test]
fn end_to_end_gradient_with_finetune_masking() {
    let m = |flags: Vec<bool>| PatchMask { flags, ratio: 0.5 };
    let masks = vec![
        m(vec![true, false, false, true]),
        m(vec![false, true, true, false]),
        m(vec![true, true, false, false]),
    ];
    end_to_end(HeadKind::Query, Some(masks), 7);
}

#[test]
fn pretrain_model_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = tiny_config(HeadKind::Query).encoder;
    let hog = HogParams {
        cell_size: 2,
        bins: 4,
        epsilon: 1e-6,
    };
    let model = PretrainModel::new(cfg, hog.patch_dim(4), 3).unwrap();
    let imgs = images(&mut rng, 2, 8);
    let targets: Vec<_> = imgs.iter().map(|im| hog_targets_for_patches(im, 4, &hog).unwrap()).collect();
    let masks = vec![
        PatchMask {
            flags: vec![true, false, true, false],
            ratio: 0.5,
        },
        PatchMask {
            flags: vec![false, false, true, true],
            ratio: 0.5,
        },
    ];
    let (_, grads) = pretrain_batch_loss_and_grad(&model, &imgs, &targets, &masks).unwrap();
    let n = check_model(
        &model,
        &grads,
        |m| pretrain_batch_loss_and_grad(m, &imgs, &targets, &masks).unwrap().0,
        1e-3,
    );
    assert!(n > 300);
}
