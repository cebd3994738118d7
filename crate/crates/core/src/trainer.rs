//! Pre-training and the fine-tuning loop.
//!
//! Each fine-tuning step runs, in order: forward pass to logits, the
//! uniformity and alignment terms on the class queries, revision of the
//! stored confidences from the sigmoid response, the candidate-weighted
//! cross-entropy against the revised confidences, and one AdamW update.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::candidate_store::{CollapseStats, ConfidenceStore};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, Stage};
use crate::datasets::{Image, PartialSample, Sample};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::hog::{HogParams, HogTarget};
use crate::mim::{batch_targets, pretrain_batch_loss_and_grad, sample_mask, PatchMask};
use crate::model::params::{accumulate, all_finite, zeros_like};
use crate::model::{confidence_response, patchify, Classifier, ClassifierCache, HeadKind, ModelConfig, PretrainModel};
use crate::model::EncoderConfig;
use crate::objectives::{
    anchor_alignment_loss_and_grad, optimal_anchor_positions_with, pll_loss_and_logit_grad, revise_confidence,
    total_finetune_loss, uniform_loss_and_grad, AnchorSearch, AnchorSet, RevisionConfig,
};
use crate::optim::{warmup_cosine, warmup_steps, AdamW, AdamWConfig};
use crate::rng::{derive_seed, rng_for, stream};

pub const SEED_ENV: &str = "PLLFER_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub optimizer: AdamWConfig,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub seed: u64,
    pub lambda_uniform: f64,
    pub lambda_align: f64,
    pub tau: f64,
    pub revision: RevisionConfig,
    /// Initialise the class queries from the precomputed anchors.
    pub anchor_init: bool,
    pub anchor_search: AnchorSearch,
    /// Patch masking during fine-tuning; 0 disables it.
    pub finetune_mask_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            base_lr: 1e-4,
            optimizer: AdamWConfig::default(),
            warmup_fraction: 0.05,
            seed: 1,
            lambda_uniform: 1.0,
            lambda_align: 1.0,
            tau: 0.001,
            revision: RevisionConfig::default(),
            anchor_init: true,
            anchor_search: AnchorSearch::default(),
            finetune_mask_ratio: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        let rates = [
            ("base_lr", self.base_lr),
            ("beta1", self.optimizer.beta1),
            ("beta2", self.optimizer.beta2),
            ("eps", self.optimizer.eps),
            ("tau", self.tau),
        ];
        if let Some((name, v)) = rates.iter().find(|(_, v)| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("{name} must be > 0, got {v}")));
        }
        if !(self.optimizer.beta1 < 1.0 && self.optimizer.beta2 < 1.0) {
            return Err(Error::Config("momentum coefficients must be < 1".into()));
        }
        if !(self.optimizer.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must be in [0,1)".into()));
        }
        if !(0.0..1.0).contains(&self.finetune_mask_ratio) {
            return Err(Error::Config("finetune_mask_ratio must be in [0,1)".into()));
        }
        total_finetune_loss(0.0, 0.0, 0.0, self.lambda_uniform, self.lambda_align)?;
        self.revision.validate(num_classes)
    }

    /// Replaces the seed with `$PLLFER_SEED` when that variable is set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub mask_ratio: f64,
    pub hog: HogParams,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.4,
            hog: HogParams::default(),
        }
    }
}

fn config_digest<T: Serialize>(v: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("config serializes")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub pll: f64,
    pub uniform: f64,
    pub alignment: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_accuracy: Option<f64>,
    pub fraction_one_hot: f64,
    pub mean_entropy: f64,
    pub lr: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config_hash: String,
    pub epochs: Vec<EpochRecord>,
}

impl RunRecord {
    pub fn new<T: Serialize>(config: &T, seed: u64) -> Self {
        let config_hash = config_digest(config);
        let run_id = config_digest(&(config_hash.as_str(), seed))[..12].to_string();
        Self {
            run_id,
            config_hash,
            epochs: Vec::new(),
        }
    }

    /// One JSON object per epoch, each carrying the run id and config hash.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for e in &self.epochs {
            let mut v = serde_json::to_value(e).expect("record serializes");
            v["run_id"] = self.run_id.clone().into();
            v["config_hash"] = self.config_hash.clone().into();
            serde_json::to_writer(&mut buf, &v).expect("record serializes");
            buf.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pll: f64,
    pub uniform: f64,
    pub alignment: f64,
    pub total: f64,
}

/// Regularizer settings shared by the step and the gradient check.
#[derive(Debug, Clone, Copy)]
pub struct Regularizers<'a> {
    pub anchors: Option<&'a AnchorSet>,
    pub tau: f64,
    pub lambda_uniform: f64,
    pub lambda_align: f64,
}

struct Forward {
    logits: Vec<f64>,
    cache: ClassifierCache,
}

fn forward_batch(model: &Classifier, images: &[&Image], masks: Option<&[PatchMask]>) -> Result<Vec<Forward>> {
    let patch = model.config.encoder.patch_size;
    images
        .par_iter()
        .enumerate()
        .map(|(i, im)| {
            let p = patchify(im, patch)?;
            let m = masks.map(|ms| ms[i].flags.as_slice());
            let (logits, cache) = model.forward(&p, m)?;
            Ok(Forward { logits, cache })
        })
        .collect()
}

fn query_terms(model: &Classifier, reg: &Regularizers, grads: &mut Classifier) -> Result<(f64, f64)> {
    let Some(q) = model.queries() else {
        return Ok((0.0, 0.0));
    };
    let (mut u, mut a) = (0.0, 0.0);
    let gq = grads.queries_mut().expect("gradient has queries");
    if reg.lambda_uniform > 0.0 {
        let (v, g) = uniform_loss_and_grad(q, reg.tau)?;
        gq.scaled_add(reg.lambda_uniform, &g);
        u = v;
    }
    if reg.lambda_align > 0.0 {
        if let Some(anchors) = reg.anchors {
            let (v, g) = anchor_alignment_loss_and_grad(q, anchors)?;
            gq.scaled_add(reg.lambda_align, &g);
            a = v;
        }
    }
    Ok((u, a))
}

fn loss_and_grad_from(
    model: &Classifier,
    fwd: &[Forward],
    confidences: &[Vec<f64>],
    reg: &Regularizers,
) -> Result<(LossBreakdown, Classifier)> {
    let n = fwd.len() as f64;
    let per_sample: Vec<(f64, Classifier)> = fwd
        .par_iter()
        .zip(confidences)
        .map(|(f, c)| {
            let (loss, mut dl) = pll_loss_and_logit_grad(&f.logits, c)?;
            dl.iter_mut().for_each(|v| *v /= n);
            let mut g = zeros_like(model);
            model.backward(&f.cache, &dl, &mut g);
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;
    let mut grads = zeros_like(model);
    let mut pll = 0.0;
    for (l, g) in &per_sample {
        pll += l;
        accumulate(&mut grads, g);
    }
    pll /= n;
    let (uniform, alignment) = query_terms(model, reg, &mut grads)?;
    let total = total_finetune_loss(pll, uniform, alignment, reg.lambda_uniform, reg.lambda_align)?;
    Ok((
        LossBreakdown {
            pll,
            uniform,
            alignment,
            total,
        },
        grads,
    ))
}

/// Loss breakdown and parameter gradient for fixed confidences. This is the
/// objective each step descends on, exposed for gradient checks.
pub fn batch_loss_and_grad(
    model: &Classifier,
    images: &[&Image],
    confidences: &[Vec<f64>],
    reg: &Regularizers,
    masks: Option<&[PatchMask]>,
) -> Result<(LossBreakdown, Classifier)> {
    if images.len() != confidences.len() || images.is_empty() {
        return Err(Error::Validation(format!(
            "{} images but {} confidence rows",
            images.len(),
            confidences.len()
        )));
    }
    let fwd = forward_batch(model, images, masks)?;
    loss_and_grad_from(model, &fwd, confidences, reg)
}

pub struct StepOutput {
    pub losses: LossBreakdown,
    /// Sigmoid response of each batch sample, as used for revision.
    pub phi: Vec<Vec<f64>>,
}

/// One fine-tuning step on `batch`: forward, revise the stored confidences
/// of the batch, then update parameters against the revised confidences.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Classifier,
    opt: &mut AdamW,
    store: &mut ConfidenceStore,
    batch: &[&PartialSample],
    reg: &Regularizers,
    revision: &RevisionConfig,
    lr: f64,
    masks: Option<&[PatchMask]>,
) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let ids: Vec<usize> = batch.iter().map(|s| s.id()).collect();
    let prev = store.get_batch(&ids)?;
    let images: Vec<&Image> = batch.iter().map(|s| &s.sample.image).collect();
    let fwd = forward_batch(model, &images, masks)?;

    let phi: Vec<Vec<f64>> = fwd.iter().map(|f| confidence_response(&f.logits)).collect::<Result<_>>()?;
    let revised: Vec<Vec<f64>> = prev
        .rows()
        .into_iter()
        .zip(&phi)
        .map(|(c, p)| revise_confidence(&c.to_vec(), p, revision))
        .collect::<Result<_>>()?;
    let mut mat = Array2::zeros(prev.raw_dim());
    for (i, r) in revised.iter().enumerate() {
        mat.row_mut(i).assign(&ndarray::ArrayView1::from(r.as_slice()));
    }
    store.set_batch(&ids, &mat)?;

    let (losses, grads) = loss_and_grad_from(model, &fwd, &revised, reg)?;
    if !losses.total.is_finite() || !all_finite(&grads) {
        return Err(Error::Diverged {
            step: opt.step as usize,
            msg: format!("non-finite loss or gradient ({losses:?})"),
        });
    }
    opt.update(model, &grads, lr)?;
    Ok(StepOutput { losses, phi })
}

/// Anchors for `K` classes in the model's embedding dimension.
pub fn compute_anchors(num_classes: usize, dim: usize, cfg: &TrainConfig) -> Result<AnchorSet> {
    let out = optimal_anchor_positions_with(num_classes, dim, cfg.tau, &cfg.anchor_search, cfg.seed)?;
    Ok(out.anchors)
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, stream::SHUFFLE, epoch as u64));
    order
}

fn masks_for(
    positions: &[usize],
    num_patches: usize,
    ratio: f64,
    seed: u64,
    stream_id: u64,
    epoch: usize,
) -> Result<Vec<PatchMask>> {
    positions
        .iter()
        .map(|&i| {
            let s = derive_seed(seed, stream_id, ((epoch as u64) << 32) | i as u64);
            sample_mask(num_patches, ratio, s)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Pre-training

#[derive(Debug, Clone, Default)]
pub struct PretrainRun {
    /// Checkpoint written after every epoch.
    pub checkpoint: Option<PathBuf>,
    /// Continue from this checkpoint (same configuration and seed).
    pub resume: Option<PathBuf>,
    /// Stop once this many epochs are complete.
    pub stop_after: Option<usize>,
}

pub struct PretrainOutcome {
    pub model: PretrainModel,
    /// Mean loss of every completed epoch, including resumed ones.
    pub epoch_losses: Vec<f64>,
    pub meta: CheckpointMeta,
}

fn pretrain_meta(
    encoder: EncoderConfig,
    pcfg: &PretrainConfig,
    cfg: &TrainConfig,
    epoch: usize,
    losses: &[f64],
) -> CheckpointMeta {
    CheckpointMeta {
        stage: Stage::Pretrain,
        mask_ratio: Some(pcfg.mask_ratio),
        hog: Some(pcfg.hog),
        config_hash: encoder.config_hash(),
        encoder,
        num_classes: None,
        model: None,
        discardable: vec!["mim_head".into()],
        seed: cfg.seed,
        epoch,
        optimizer_step: 0,
        epoch_losses: losses.to_vec(),
        blob_sha256: String::new(),
    }
}

/// Masked HOG regression on `images`.
pub fn pretrain(
    images: &[Image],
    encoder: EncoderConfig,
    pcfg: &PretrainConfig,
    cfg: &TrainConfig,
    run: &PretrainRun,
) -> Result<PretrainOutcome> {
    if images.is_empty() {
        return Err(Error::Validation("pre-training needs a non-empty dataset".into()));
    }
    encoder.validate()?;
    pcfg.hog.validate()?;
    if !(0.0..1.0).contains(&pcfg.mask_ratio) {
        return Err(Error::Config(format!("mask ratio must lie in [0,1), got {}", pcfg.mask_ratio)));
    }
    if crate::mim::masked_count(encoder.num_patches(), pcfg.mask_ratio) == 0 {
        return Err(Error::Validation(format!(
            "mask ratio {} masks no patches out of {}",
            pcfg.mask_ratio,
            encoder.num_patches()
        )));
    }
    cfg.validate(2)?;
    let target_dim = pcfg.hog.patch_dim(encoder.patch_size);
    let targets: Vec<HogTarget> = batch_targets(images, encoder.patch_size, &pcfg.hog)?;

    let mut model = PretrainModel::new(encoder, target_dim, cfg.seed)?;
    let mut opt = AdamW::new(cfg.optimizer, &model);
    let mut losses = Vec::new();
    let mut start = 0;
    if let Some(path) = &run.resume {
        let ck = load_checkpoint(path)?;
        if ck.meta.stage != Stage::Pretrain {
            return Err(Error::Incompatible(format!("{} is not a pre-training checkpoint", path.display())));
        }
        ck.require_encoder(&encoder)?;
        ck.load_into("", &mut model)?;
        ck.load_optimizer(&model, &mut opt)?;
        start = ck.meta.epoch;
        losses = ck.meta.epoch_losses.clone();
    }

    let n = images.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = warmup_steps(total, cfg.warmup_fraction);
    let end = run.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    let mut meta = pretrain_meta(encoder, pcfg, cfg, start, &losses);

    for epoch in start..end {
        let order = shuffled(n, cfg.seed, epoch);
        let mut sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step = epoch * steps_per_epoch + b;
            let imgs: Vec<Image> = chunk.iter().map(|&i| images[i].clone()).collect();
            let tgts: Vec<HogTarget> = chunk.iter().map(|&i| targets[i].clone()).collect();
            let masks = masks_for(chunk, encoder.num_patches(), pcfg.mask_ratio, cfg.seed, stream::MASK, epoch)?;
            let (loss, grads) = pretrain_batch_loss_and_grad(&model, &imgs, &tgts, &masks)?;
            if !loss.is_finite() || !all_finite(&grads) {
                return Err(Error::Diverged {
                    step,
                    msg: format!("pre-training loss {loss} in epoch {epoch}"),
                });
            }
            opt.update(&mut model, &grads, warmup_cosine(step, total, warmup, cfg.base_lr))?;
            sum += loss * chunk.len() as f64;
        }
        let mean = sum / n as f64;
        log::info!("pretrain epoch {epoch}: loss {mean:.6}");
        losses.push(mean);
        meta = pretrain_meta(encoder, pcfg, cfg, epoch + 1, &losses);
        if let Some(path) = &run.checkpoint {
            let ck = Checkpoint::from_params(meta.clone(), &model).with_optimizer(&model, &opt);
            meta = save_checkpoint(path, &ck)?;
        }
    }
    Ok(PretrainOutcome {
        model,
        epoch_losses: losses,
        meta,
    })
}

// ---------------------------------------------------------------------------
// Fine-tuning

/// Per-epoch state kept for disambiguation reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSnapshot {
    pub epoch: usize,
    /// `(id, confidence)` at the end of the epoch, ordered by id.
    pub confidences: Vec<(usize, Vec<f64>)>,
    /// `(id, φ)` from the sample's forward pass in this epoch, ordered by id.
    pub phi: Vec<(usize, Vec<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub epoch: usize,
    pub step: usize,
    pub losses: LossBreakdown,
    pub collapse: CollapseStats,
}

#[derive(Debug, Clone, Default)]
pub struct FinetuneOptions {
    /// Directory for per-epoch store snapshots (`store_epoch_NNN.jsonl`).
    pub snapshot_dir: Option<PathBuf>,
    /// Keep an in-memory [`EpochSnapshot`] for every epoch.
    pub keep_snapshots: bool,
    /// Evaluate on the test set every this many epochs (and always after
    /// the last one). 0 means only after the last epoch.
    pub eval_every: usize,
}

pub struct FinetuneOutcome {
    pub model: Classifier,
    pub store: ConfidenceStore,
    pub record: RunRecord,
    pub snapshots: Vec<EpochSnapshot>,
    pub steps: Vec<StepStats>,
    pub anchors: Option<AnchorSet>,
}

#[derive(Serialize)]
struct RunIdentity<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    pretrained: Option<&'a str>,
}

/// Builds the classifier, copying encoder weights from `init` when given.
pub fn build_classifier(
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    init: Option<&Checkpoint>,
) -> Result<(Classifier, Option<AnchorSet>)> {
    model_cfg.validate()?;
    let anchors = match model_cfg.head {
        HeadKind::Query if cfg.anchor_init || cfg.lambda_align > 0.0 => Some(compute_anchors(
            model_cfg.num_classes(),
            model_cfg.encoder.embed_dim,
            cfg,
        )?),
        _ => None,
    };
    let init_anchors = anchors.as_ref().filter(|_| cfg.anchor_init);
    let mut model = Classifier::new(model_cfg, init_anchors, cfg.seed)?;
    if let Some(ck) = init {
        ck.require_encoder(&model_cfg.encoder)?;
        ck.load_into("encoder.", &mut model)?;
    }
    Ok((model, anchors))
}

pub fn finetune(
    train: &[PartialSample],
    test: &[Sample],
    init: Option<&Checkpoint>,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    opts: &FinetuneOptions,
) -> Result<FinetuneOutcome> {
    let k = model_cfg.num_classes();
    cfg.validate(k)?;
    if train.is_empty() {
        return Err(Error::Validation("fine-tuning needs a non-empty training set".into()));
    }
    if let Some(ps) = train.iter().find(|ps| ps.candidates.num_classes() != k) {
        return Err(Error::Validation(format!(
            "sample {} has {} candidate flags but the model has K={k}",
            ps.id(),
            ps.candidates.num_classes()
        )));
    }
    let mut store = ConfidenceStore::from_samples(train, k)?;
    let (mut model, anchors) = build_classifier(model_cfg, cfg, init)?;
    let mut opt = AdamW::new(cfg.optimizer, &model);
    let reg = Regularizers {
        anchors: anchors.as_ref(),
        tau: cfg.tau,
        lambda_uniform: cfg.lambda_uniform,
        lambda_align: cfg.lambda_align,
    };
    let identity = RunIdentity {
        model: &model_cfg,
        train: cfg,
        pretrained: init.map(|c| c.meta.blob_sha256.as_str()),
    };
    let mut record = RunRecord::new(&identity, cfg.seed);
    if let Some(dir) = &opts.snapshot_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let n = train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = warmup_steps(total, cfg.warmup_fraction);
    let num_patches = model_cfg.encoder.num_patches();
    let mut snapshots = Vec::new();
    let mut steps = Vec::new();
    let mut phi_by_pos: Vec<Vec<f64>> = vec![Vec::new(); n];
    let started = Instant::now();

    for epoch in 0..cfg.epochs {
        let order = shuffled(n, cfg.seed, epoch);
        let mut sums = LossBreakdown::default();
        let mut lr = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step = epoch * steps_per_epoch + b;
            lr = warmup_cosine(step, total, warmup, cfg.base_lr);
            let batch: Vec<&PartialSample> = chunk.iter().map(|&i| &train[i]).collect();
            let masks = if cfg.finetune_mask_ratio > 0.0 {
                Some(masks_for(
                    chunk,
                    num_patches,
                    cfg.finetune_mask_ratio,
                    cfg.seed,
                    stream::FINETUNE_MASK,
                    epoch,
                )?)
            } else {
                None
            };
            let out = train_step(&mut model, &mut opt, &mut store, &batch, &reg, &cfg.revision, lr, masks.as_deref())
                .map_err(|e| match e {
                    // Non-finite logits mean the previous update blew up.
                    Error::Diverged { msg, .. } | Error::Numeric(msg) => Error::Diverged { step, msg },
                    other => other,
                })?;
            store.validate()?;
            let w = chunk.len() as f64;
            sums.pll += out.losses.pll * w;
            sums.uniform += out.losses.uniform * w;
            sums.alignment += out.losses.alignment * w;
            sums.total += out.losses.total * w;
            for (&i, p) in chunk.iter().zip(out.phi) {
                phi_by_pos[i] = p;
            }
            steps.push(StepStats {
                epoch,
                step,
                losses: out.losses,
                collapse: store.collapse_stats()?,
            });
        }
        let last = epoch + 1 == cfg.epochs;
        let due = opts.eval_every > 0 && (epoch + 1) % opts.eval_every == 0;
        let test_accuracy = if !test.is_empty() && (last || due) {
            Some(evaluate(&model, test)?.accuracy)
        } else {
            None
        };
        let collapse = store.collapse_stats()?;
        let nf = n as f64;
        let rec = EpochRecord {
            epoch,
            train_loss: sums.total / nf,
            pll: sums.pll / nf,
            uniform: sums.uniform / nf,
            alignment: sums.alignment / nf,
            test_accuracy,
            fraction_one_hot: collapse.fraction_one_hot,
            mean_entropy: collapse.mean_entropy,
            lr,
            wall_s: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "finetune epoch {epoch}: loss {:.5} one-hot {:.3} acc {:?}",
            rec.train_loss,
            rec.fraction_one_hot,
            rec.test_accuracy
        );
        record.epochs.push(rec);
        if let Some(dir) = &opts.snapshot_dir {
            store.write_snapshot(&dir.join(format!("store_epoch_{epoch:03}.jsonl")))?;
        }
        if opts.keep_snapshots || epoch + 1 == cfg.epochs {
            let mut phi: Vec<(usize, Vec<f64>)> = train.iter().map(|s| s.id()).zip(phi_by_pos.iter().cloned()).collect();
            phi.sort_by_key(|p| p.0);
            let snap = EpochSnapshot {
                epoch,
                confidences: store.rows(),
                phi,
            };
            if opts.keep_snapshots {
                snapshots.push(snap);
            } else {
                snapshots = vec![snap];
            }
        }
    }
    Ok(FinetuneOutcome {
        model,
        store,
        record,
        snapshots,
        steps,
        anchors,
    })
}

/// Fine-tuning checkpoint for a trained classifier.
pub fn finetune_checkpoint(model: &Classifier, cfg: &TrainConfig) -> Checkpoint {
    let meta = CheckpointMeta {
        stage: Stage::Finetune,
        mask_ratio: None,
        hog: None,
        config_hash: model.config.encoder.config_hash(),
        encoder: model.config.encoder,
        num_classes: Some(model.num_classes()),
        model: Some(model.config),
        discardable: vec![],
        seed: cfg.seed,
        epoch: cfg.epochs,
        optimizer_step: 0,
        epoch_losses: vec![],
        blob_sha256: String::new(),
    };
    Checkpoint::from_params(meta, model)
}

/// Rebuilds a classifier from a fine-tuning checkpoint.
pub fn load_classifier(path: &Path) -> Result<Classifier> {
    let ck = load_checkpoint(path)?;
    let cfg = match (ck.meta.stage, ck.meta.model) {
        (Stage::Finetune, Some(cfg)) => cfg,
        _ => {
            return Err(Error::Incompatible(format!(
                "{} is not a fine-tuned classifier checkpoint",
                path.display()
            )))
        }
    };
    let mut model = Classifier::new(cfg, None, 0)?;
    ck.load_into("", &mut model)?;
    Ok(model)
}
