//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line each; exits non-zero if any criterion fails.
//!
//! The training criteria (6 to 9) share one set of runs over seeds 1..=3 and
//! take several minutes on a single core.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use pllfer::candidate_store::{check_simplex, is_one_hot, ConfidenceStore};
use pllfer::checkpoint::{load_checkpoint, save_checkpoint, sidecar_path, Checkpoint};
use pllfer::datasets::{
    corrupt_to_partial_labels, draw_single_labels, generate_synthetic_dataset, load_partial_folder,
    write_image_folder, PartialSample, Sample, SynthSpec,
};
use pllfer::eval::{disambiguation_report, evaluate, Metrics, RUNS_HEADER};
use pllfer::hog::{hog_descriptor, HogParams};
use pllfer::mim::{mim_loss, mim_loss_and_grad, PatchMask};
use pllfer::model::params::{named, named_mut};
use pllfer::model::{sigmoid, softmax, Classifier, DecoderConfig, EncoderConfig, HeadKind, ModelConfig};
use pllfer::objectives::{
    optimal_anchor_positions, pll_loss, pll_loss_and_logit_grad, revise_confidence, total_finetune_loss,
    uniform_loss, uniform_loss_and_grad, RevisionConfig,
};
use pllfer::trainer::{
    batch_loss_and_grad, finetune, finetune_checkpoint, pretrain, FinetuneOptions, FinetuneOutcome,
    PretrainConfig, PretrainRun, Regularizers, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run(id: u32, name: &str, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} {id:>2} {name}: {detail} [{secs:.1}s]");
    outcome.is_ok()
}

// 1

fn formula_oracles() -> Verdict {
    let mut worst = 0.0f64;
    let mut close = |got: f64, want: f64| worst = worst.max((got - want).abs());

    close(pll_loss(&[1.0 / 7.0; 7], &[1.0 / 7.0; 7]).unwrap(), 7f64.ln());
    close(pll_loss(&[1.0 / 7.0; 7], &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap(), 7f64.ln());
    let zeta = [0.7, 0.1, 0.2];
    close(pll_loss(&zeta, &[0.5, 0.5, 0.0]).unwrap(), -0.5 * 0.7f64.ln() - 0.5 * 0.1f64.ln());

    let pair = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, -1.0, 0.0]).unwrap();
    close(uniform_loss(&pair, 1.0).unwrap(), (1f64.exp() + (-1f64).exp()).ln());
    close(uniform_loss(&pair, 1.0).unwrap(), 1.1269280110429727);
    let single = Array2::from_shape_vec((1, 3), vec![0.3, -0.4, 1.2]).unwrap();
    close(uniform_loss(&single, 0.25).unwrap(), 4.0);

    let p = softmax(&[2f64.ln(), 0.0, 0.0]).unwrap();
    for (a, b) in p.iter().zip([0.5, 0.25, 0.25]) {
        close(*a, b);
    }
    let z = [0.3, -1.7, 2.2, 0.0];
    let shifted: Vec<f64> = z.iter().map(|v| v + 123.4).collect();
    for (a, b) in softmax(&z).unwrap().iter().zip(softmax(&shifted).unwrap()) {
        close(*a, b);
    }
    close(sigmoid(2.0), 1.0 / (1.0 + (-2f64).exp()));
    close(sigmoid(2.0), 0.8807970779778823);
    close(sigmoid(-2.0), 0.11920292202211755);
    close(sigmoid(0.0), 0.5);
    close(total_finetune_loss(1.0, 0.5, 0.25, 1.0, 1.0).unwrap(), 1.75);
    check(worst < 1e-6, format!("max deviation {worst:.2e} (tol 1e-6)"))
}

// 2

fn naive_hog(img: &Array2<f64>, cell: usize, bins: usize, eps: f64) -> Vec<Vec<Vec<f64>>> {
    let (h, w) = img.dim();
    let at = |y: isize, x: isize| img[[y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize]];
    let width = 180.0 / bins as f64;
    let mut out = vec![vec![vec![0.0; bins]; w / cell]; h / cell];
    for (cy, row) in out.iter_mut().enumerate() {
        for (cx, hist) in row.iter_mut().enumerate() {
            for dy in 0..cell {
                for dx in 0..cell {
                    let (y, x) = ((cy * cell + dy) as isize, (cx * cell + dx) as isize);
                    let gx = at(y, x + 1) - at(y, x - 1);
                    let gy = at(y + 1, x) - at(y - 1, x);
                    let mag = gx.hypot(gy);
                    if mag == 0.0 {
                        continue;
                    }
                    let deg = gy.atan2(gx).to_degrees().rem_euclid(180.0);
                    for (b, v) in hist.iter_mut().enumerate() {
                        let d = (deg - b as f64 * width).abs();
                        *v += mag * (1.0 - d.min(180.0 - d) / width).max(0.0);
                    }
                }
            }
            let norm = (hist.iter().map(|v| v * v).sum::<f64>() + eps * eps).sqrt();
            hist.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

fn hog_oracle() -> Verdict {
    let params = HogParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let img = Array2::from_shape_fn((32, 32), |_| rng.gen::<f64>());
        let fast = hog_descriptor(&img, &params).unwrap();
        let slow = naive_hog(&img, params.cell_size, params.bins, params.epsilon);
        for (cy, row) in slow.iter().enumerate() {
            for (cx, hist) in row.iter().enumerate() {
                for (b, v) in hist.iter().enumerate() {
                    worst = worst.max((fast[[cy, cx, b]] - v).abs());
                }
            }
        }
    }
    check(worst < 1e-6, format!("100 images, max deviation {worst:.2e} (tol 1e-6)"))
}

// 3

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn fd_matrix(x: &Array2<f64>, grad: &Array2<f64>, h: f64, f: impl Fn(&Array2<f64>) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for ((r, c), g) in grad.indexed_iter() {
        let mut xp = x.clone();
        xp[[r, c]] += h;
        let mut xm = x.clone();
        xm[[r, c]] -= h;
        worst = worst.max(rel_err(*g, (f(&xp) - f(&xm)) / (2.0 * h)));
    }
    worst
}

fn gradient_checks() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut rand_m = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0));

    let pred = rand_m(6, 5);
    let target = rand_m(6, 5);
    let mask = PatchMask {
        flags: vec![true, false, true, true, false, true],
        ratio: 0.5,
    };
    let (_, g) = mim_loss_and_grad(&pred, &target, &mask).unwrap();
    let mim = fd_matrix(&pred, &g, 1e-6, |p| mim_loss(p, &target, &mask).unwrap());

    let logits = rand_m(1, 7);
    let conf = vec![0.0, 0.2, 0.5, 0.0, 0.3, 0.0, 0.0];
    let (_, g) = pll_loss_and_logit_grad(logits.as_slice().unwrap(), &conf).unwrap();
    let g = Array2::from_shape_vec((1, 7), g).unwrap();
    let pll = fd_matrix(&logits, &g, 1e-5, |z| {
        pll_loss(&softmax(z.as_slice().unwrap()).unwrap(), &conf).unwrap()
    });

    let mut uni = 0.0f64;
    for (k, d, tau) in [(7, 5, 0.5), (4, 3, 0.1), (3, 2, 1.0)] {
        let x = rand_m(k, d);
        let (_, g) = uniform_loss_and_grad(&x, tau).unwrap();
        uni = uni.max(fd_matrix(&x, &g, 1e-4, |p| uniform_loss(p, tau).unwrap()));
    }

    let cfg = ModelConfig {
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
        head: HeadKind::Query,
    };
    let anchors = optimal_anchor_positions(3, 8, 0.1, 300, 1).unwrap().anchors;
    let mut model = Classifier::new(cfg, Some(&anchors), 5).unwrap();
    if let Some(q) = model.queries_mut() {
        q.mapv_inplace(|v| v + 0.2 * v.sin());
    }
    let imgs: Vec<_> = (0..3).map(|_| rand_m(8, 8).mapv(|v| v * 0.5 + 0.5)).collect();
    let refs: Vec<_> = imgs.iter().collect();
    let conf = vec![vec![0.5, 0.5, 0.0], vec![0.0, 0.0, 1.0], vec![0.2, 0.3, 0.5]];
    let reg = Regularizers {
        anchors: Some(&anchors),
        tau: 0.1,
        lambda_uniform: 0.7,
        lambda_align: 1.3,
    };
    let (_, grads) = batch_loss_and_grad(&model, &refs, &conf, &reg, None).unwrap();
    let analytic: Vec<Array2<f64>> = named(&grads).into_iter().map(|(_, t)| t.clone()).collect();
    let mut e2e = 0.0f64;
    let h = 1e-6;
    for (ti, g) in analytic.iter().enumerate() {
        for ((r, c), gv) in g.indexed_iter() {
            let eval = |delta: f64| {
                let mut m = model.clone();
                named_mut(&mut m)[ti].1[[r, c]] += delta;
                batch_loss_and_grad(&m, &refs, &conf, &reg, None).unwrap().0.total
            };
            e2e = e2e.max(rel_err(*gv, (eval(h) - eval(-h)) / (2.0 * h)));
        }
    }
    let detail = format!(
        "rel err mim {mim:.1e}, pll {pll:.1e}, uniform {uni:.1e} (tol 1e-4); end-to-end {e2e:.1e} (tol 1e-3)"
    );
    check(mim < 1e-4 && pll < 1e-4 && uni < 1e-4 && e2e < 1e-3, detail)
}

// 4

fn anchor_geometry() -> Verdict {
    let mut parts = Vec::new();
    let mut ok = true;
    for (k, d, want, tol) in [(2, 8, -1.0, 1e-3), (3, 2, -0.5, 1e-2), (4, 3, -1.0 / 3.0, 1e-2)] {
        let set = optimal_anchor_positions(k, d, 0.1, 2000, 1).unwrap().anchors;
        let mut worst = 0.0f64;
        for i in 0..k {
            for j in i + 1..k {
                let dot: f64 = set.anchors[i].iter().zip(&set.anchors[j]).map(|(a, b)| a * b).sum();
                worst = worst.max((dot - want).abs());
            }
        }
        ok &= worst <= tol;
        parts.push(format!("K={k} d={d} max |<t_i,t_j> - {want:.3}| = {worst:.1e}"));
    }
    check(ok, parts.join("; "))
}

// 5

fn revision_rule() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut failures = Vec::new();
    let mut collapsed = 0;
    for case in 0..10_000 {
        let k = rng.gen_range(2..9);
        let mut c: Vec<f64> = (0..k).map(|_| if rng.gen_bool(0.6) { rng.gen::<f64>() } else { 0.0 }).collect();
        if c.iter().all(|&v| v == 0.0) {
            c[rng.gen_range(0..k)] = 1.0;
        }
        let s: f64 = c.iter().sum();
        c.iter_mut().for_each(|v| *v /= s);
        let phi: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
        let cfg = RevisionConfig {
            threshold: rng.gen_range(0.0..1.0),
            k_top: rng.gen_range(2..=k),
        };
        let out = revise_confidence(&c, &phi, &cfg).unwrap();
        let support_ok = (0..k).all(|j| out[j] == 0.0 || c[j] > 0.0);
        let twice = revise_confidence(&out, &phi, &cfg).unwrap();
        let j0 = (0..k).find(|&j| c[j] > 0.0).unwrap();
        let hot: Vec<f64> = (0..k).map(|j| if j == j0 { 1.0 } else { 0.0 }).collect();
        let fixed = revise_confidence(&hot, &phi, &cfg).unwrap() == hot;

        let scores: Vec<f64> = phi.iter().zip(&c).map(|(p, v)| p * v).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let winners: Vec<usize> = (0..k).filter(|&j| scores[j] == max).collect();
        let zero_ok = winners.len() != 1 || {
            collapsed += 1;
            let z = revise_confidence(&c, &phi, &RevisionConfig { threshold: 0.0, k_top: 2 }).unwrap();
            is_one_hot(&z) && z[winners[0]] == 1.0
        };
        let checks = [
            ("simplex", check_simplex(&out).is_ok()),
            ("support", support_ok),
            ("kept-or-one-hot", out == c || is_one_hot(&out)),
            ("idempotent", twice == out),
            ("one-hot fixed point", fixed),
            ("zero threshold", zero_ok),
        ];
        for (name, ok) in checks {
            if !ok && failures.len() < 5 {
                failures.push(format!("case {case}: {name}"));
            }
        }
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            format!("10000 triples, {collapsed} unique-argmax inputs collapsed at threshold 0")
        } else {
            failures.join(", ")
        },
    )
}

// 6 to 9

const SEEDS: [u64; 3] = [1, 2, 3];

fn data_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        num_classes: 7,
        train_count: 2000,
        test_count: 500,
        image_size: 32,
        noise_sigma: 0.1,
        seed,
        imbalance: None,
    }
}

fn model_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_size: 32,
            patch_size: 8,
            embed_dim: 32,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
        },
        decoder: DecoderConfig {
            num_classes: 7,
            depth: 2,
            heads: 2,
        },
        head: HeadKind::Query,
    }
}

fn train_config(seed: u64, threshold: f64) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs: 20,
        batch_size: 64,
        base_lr: 1e-3,
        seed,
        ..TrainConfig::default()
    };
    cfg.revision.threshold = threshold;
    cfg
}

struct SeedRuns {
    seed: u64,
    partial: Vec<PartialSample>,
    pll: FinetuneOutcome,
    pll_acc: f64,
    ce_acc: f64,
    pretrained_acc: f64,
}

fn tune(train: &[PartialSample], test: &[Sample], init: Option<&Checkpoint>, seed: u64) -> FinetuneOutcome {
    let opts = FinetuneOptions {
        keep_snapshots: true,
        ..FinetuneOptions::default()
    };
    finetune(train, test, init, model_config(), &train_config(seed, 0.1), &opts).unwrap()
}

fn accuracy(out: &FinetuneOutcome, test: &[Sample]) -> f64 {
    evaluate(&out.model, test).unwrap().accuracy
}

fn seed_runs(seed: u64) -> SeedRuns {
    let t = Instant::now();
    let (train, test) = generate_synthetic_dataset(&data_spec(seed)).unwrap();
    let partial = corrupt_to_partial_labels(&train, 7, 0.3, seed).unwrap();

    let pll = tune(&partial, &test, None, seed);
    let pll_acc = accuracy(&pll, &test);

    let single = draw_single_labels(&partial, seed);
    let ce_acc = accuracy(&tune(&single, &test, None, seed), &test);

    let images: Vec<_> = train.iter().map(|s| s.image.clone()).collect();
    let pre = pretrain(
        &images,
        model_config().encoder,
        &PretrainConfig::default(),
        &train_config(seed, 0.1),
        &PretrainRun::default(),
    )
    .unwrap();
    let ckpt = Checkpoint::from_params(pre.meta, &pre.model);
    let pretrained_acc = accuracy(&tune(&partial, &test, Some(&ckpt), seed), &test);
    eprintln!(
        "seed {seed}: pll {pll_acc:.4}, single-label CE {ce_acc:.4}, pretrained {pretrained_acc:.4} ({:.0}s)",
        t.elapsed().as_secs_f64()
    );
    SeedRuns {
        seed,
        partial,
        pll,
        pll_acc,
        ce_acc,
        pretrained_acc,
    }
}

fn invariants(runs: &[SeedRuns]) -> Verdict {
    let mut parts = Vec::new();
    let mut ok = true;
    for r in runs {
        // finetune validates the whole store after every step and errors out
        // otherwise, so reaching here already covers per-step validity. The
        // snapshots are rechecked independently against the candidate sets.
        let cands: std::collections::HashMap<usize, &PartialSample> = r.partial.iter().map(|p| (p.id(), p)).collect();
        let snap_ok = r.pll.snapshots.iter().all(|s| {
            s.confidences.iter().all(|(id, c)| {
                check_simplex(c).is_ok() && (0..c.len()).all(|j| c[j] == 0.0 || cands[id].candidates.contains(j))
            })
        });
        let fractions: Vec<f64> = r.pll.steps.iter().map(|s| s.collapse.fraction_one_hot).collect();
        let monotone = fractions.windows(2).all(|w| w[1] >= w[0]);
        let valid = r.pll.store.validate().is_ok();
        ok &= snap_ok && monotone && valid;
        parts.push(format!(
            "seed {}: {} steps, snapshots valid {snap_ok}, one-hot fraction monotone {monotone} (final {:.3})",
            r.seed,
            fractions.len(),
            fractions.last().copied().unwrap_or(0.0)
        ));
    }

    let (train, test) = generate_synthetic_dataset(&data_spec(1)).unwrap();
    let clean = corrupt_to_partial_labels(&train, 7, 0.0, 1).unwrap();
    let opts = FinetuneOptions::default();
    let acc = |thr: f64| {
        let out = finetune(&clean, &test, None, model_config(), &train_config(1, thr), &opts).unwrap();
        let before = ConfidenceStore::from_samples(&clean, 7).unwrap();
        (accuracy(&out, &test), out.store.rows() == before.rows())
    };
    let (a, same_a) = acc(0.1);
    let (b, same_b) = acc(0.9);
    ok &= a == b && same_a && same_b;
    parts.push(format!("q=0 accuracy at threshold 0.1 / 0.9: {a:.4} / {b:.4}"));
    check(ok, parts.join("; "))
}

fn recovery(runs: &[SeedRuns]) -> Verdict {
    let mut passing = 0;
    let mut parts = Vec::new();
    for r in runs {
        let rep = disambiguation_report(&r.pll.store, &r.partial, &r.pll.snapshots).unwrap();
        let cc = rep.confidence_correctness.unwrap_or(0.0);
        let top2 = rep.top2_coverage.unwrap_or(0.0);
        if cc >= 0.90 && top2 >= 0.95 {
            passing += 1;
        }
        parts.push(format!("seed {}: cc {cc:.3}, top2 {top2:.3}", r.seed));
    }
    parts.push(format!("{passing}/3 seeds meet cc>=0.90 and top2>=0.95 (need 2)"));
    check(passing >= 2, parts.join("; "))
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn paradigm_trend(runs: &[SeedRuns]) -> Verdict {
    let pll = mean(runs.iter().map(|r| r.pll_acc));
    let ce = mean(runs.iter().map(|r| r.ce_acc));
    check(
        pll - ce >= 0.02,
        format!("mean accuracy PLL {pll:.4} vs single-label CE {ce:.4}, gap {:+.2} points (need >= 2)", 100.0 * (pll - ce)),
    )
}

fn pretraining_trend(runs: &[SeedRuns]) -> Verdict {
    let pre = mean(runs.iter().map(|r| r.pretrained_acc));
    let rand = mean(runs.iter().map(|r| r.pll_acc));
    check(pre >= rand, format!("mean accuracy pretrained {pre:.4} vs random init {rand:.4}"))
}

// 10

fn cli(args: &[&str], cwd: &Path) -> Option<i32> {
    Command::new(env!("CARGO_BIN_EXE_pllfer"))
        .args(args)
        .current_dir(cwd)
        .env_remove("PLLFER_SEED")
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
        .status
        .code()
}

fn interfaces() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let bytes = |f: &PathBuf| fs::read(f).unwrap();
    let mut failures = Vec::new();

    let spec = SynthSpec {
        train_count: 14,
        test_count: 7,
        image_size: 16,
        ..data_spec(4)
    };
    let (train, _) = generate_synthetic_dataset(&spec).unwrap();
    let parts = corrupt_to_partial_labels(&train, 7, 0.3, 4).unwrap();
    let sets: Vec<_> = parts.iter().map(|x| x.candidates.clone()).collect();
    let m1 = write_image_folder(&p.join("a"), &train, Some(&sets)).unwrap();
    let loaded = load_partial_folder(&p.join("a"), &m1, 16, 7).unwrap();
    let samples: Vec<_> = loaded.iter().map(|x| x.sample.clone()).collect();
    let m2 = write_image_folder(&p.join("b"), &samples, Some(&sets)).unwrap();
    if bytes(&m1) != bytes(&m2) {
        failures.push("manifest");
    }

    let model = Classifier::new(ModelConfig::default(), None, 3).unwrap();
    let c1 = p.join("a.ckpt");
    save_checkpoint(&c1, &finetune_checkpoint(&model, &TrainConfig::default())).unwrap();
    let c2 = p.join("b.ckpt");
    save_checkpoint(&c2, &load_checkpoint(&c1).unwrap()).unwrap();
    if bytes(&c1) != bytes(&c2) || bytes(&sidecar_path(&c1)) != bytes(&sidecar_path(&c2)) {
        failures.push("checkpoint");
    }

    let m = Metrics::from_confusion(vec![vec![8, 2], vec![3, 7]]).unwrap();
    let j1 = p.join("m1.json");
    m.write_json(&j1).unwrap();
    let j2 = p.join("m2.json");
    Metrics::read_json(&j1).unwrap().write_json(&j2).unwrap();
    if bytes(&j1) != bytes(&j2) {
        failures.push("metrics");
    }

    let codes = [
        (cli(&["--help"], p), 0),
        (cli(&["finetune", "--frobnicate"], p), 1),
        (cli(&["finetune", "--no-pretrain"], p), 1),
        (cli(&["gen-data", "--out", "d", "--flip-prob", "2"], p), 1),
        (cli(&["eval", "--data", "a", "--checkpoint", "missing.ckpt"], p), 2),
    ];
    let got: Vec<String> = codes.iter().map(|(c, _)| format!("{c:?}")).collect();
    if codes.iter().any(|(c, want)| *c != Some(*want)) {
        failures.push("exit codes");
    }

    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden/runs_header.csv");
    if fs::read_to_string(golden).unwrap() != format!("{RUNS_HEADER}\n") {
        failures.push("csv header golden");
    }
    check(
        failures.is_empty(),
        format!(
            "round trips and golden header {}; exit codes {}",
            if failures.is_empty() { "ok".to_string() } else { format!("failed: {}", failures.join(", ")) },
            got.join(",")
        ),
    )
}

fn main() {
    let mut passed = Vec::new();
    passed.push(run(1, "formula oracles", formula_oracles));
    passed.push(run(2, "HOG oracle", hog_oracle));
    passed.push(run(3, "gradient checks", gradient_checks));
    passed.push(run(4, "anchor geometry", anchor_geometry));
    passed.push(run(5, "revision rule", revision_rule));
    passed.push(run(10, "interfaces", interfaces));

    let start = Instant::now();
    let runs = catch_unwind(|| SEEDS.iter().map(|&s| seed_runs(s)).collect::<Vec<_>>());
    match runs {
        Ok(runs) => {
            eprintln!("training runs finished in {:.0}s", start.elapsed().as_secs_f64());
            passed.push(run(6, "training invariants", || invariants(&runs)));
            passed.push(run(7, "disambiguation recovery", || recovery(&runs)));
            passed.push(run(8, "paradigm trend", || paradigm_trend(&runs)));
            passed.push(run(9, "pre-training trend", || pretraining_trend(&runs)));
        }
        Err(_) => {
            for (id, name) in [(6, "training invariants"), (7, "disambiguation recovery"), (8, "paradigm trend"), (9, "pre-training trend")] {
                println!("FAIL {id:>2} {name}: training runs failed");
                passed.push(false);
            }
        }
    }

    let n_pass = passed.iter().filter(|&&p| p).count();
    println!("acceptance: {n_pass}/{} criteria passed", passed.len());
    if n_pass != passed.len() {
        std::process::exit(1);
    }
}
