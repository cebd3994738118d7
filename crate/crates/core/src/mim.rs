//! Masked patch prediction: random patch masks and the masked HOG regression
//! loss used for pre-training.

use ndarray::Array2;
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::Image;
use crate::error::{Error, Result};
use crate::hog::{hog_targets_for_patches, HogParams, HogTarget};
use crate::model::params::{accumulate, scale, zeros_like};
use crate::model::{patchify, PretrainModel, Tensor};
use crate::rng::{rng_for, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMask {
    pub flags: Vec<bool>,
    pub ratio: f64,
}

impl PatchMask {
    pub fn num_patches(&self) -> usize {
        self.flags.len()
    }

    pub fn num_masked(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

pub fn masked_count(num_patches: usize, ratio: f64) -> usize {
    (ratio * num_patches as f64).floor() as usize
}

/// Uniformly random subset of exactly `floor(ratio * N)` patches.
pub fn sample_mask(num_patches: usize, ratio: f64, seed: u64) -> Result<PatchMask> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio must lie in [0, 1), got {ratio}")));
    }
    if num_patches == 0 {
        return Err(Error::Config("cannot mask an image with no patches".into()));
    }
    let m = masked_count(num_patches, ratio);
    let mut rng = rng_for(seed, stream::MASK, 0);
    let mut flags = vec![false; num_patches];
    for i in sample(&mut rng, num_patches, m) {
        flags[i] = true;
    }
    Ok(PatchMask { flags, ratio })
}

fn check_shapes(pred: &Tensor, targets: &HogTarget, mask: &PatchMask) -> Result<usize> {
    if pred.dim() != targets.dim() {
        return Err(Error::Validation(format!(
            "predictions {:?} and targets {:?} differ in shape",
            pred.dim(),
            targets.dim()
        )));
    }
    if mask.num_patches() != pred.nrows() {
        return Err(Error::Validation(format!(
            "mask covers {} patches but there are {}",
            mask.num_patches(),
            pred.nrows()
        )));
    }
    let m = mask.num_masked();
    if m == 0 {
        return Err(Error::Validation("no masked patches; the masked loss is undefined".into()));
    }
    Ok(m)
}

/// Mean squared error over masked patches and descriptor dimensions.
pub fn mim_loss(pred: &Tensor, targets: &HogTarget, mask: &PatchMask) -> Result<f64> {
    Ok(mim_loss_and_grad(pred, targets, mask)?.0)
}

/// Loss and its gradient with respect to `pred` (zero on unmasked rows).
pub fn mim_loss_and_grad(pred: &Tensor, targets: &HogTarget, mask: &PatchMask) -> Result<(f64, Tensor)> {
    let m = check_shapes(pred, targets, mask)?;
    let denom = (m * pred.ncols()) as f64;
    let mut grad = Array2::zeros(pred.raw_dim());
    let mut total = 0.0;
    for (i, &masked) in mask.flags.iter().enumerate() {
        if !masked {
            continue;
        }
        for ((g, p), t) in grad.row_mut(i).iter_mut().zip(pred.row(i)).zip(targets.row(i)) {
            let d = p - t;
            total += d * d;
            *g = 2.0 * d / denom;
        }
    }
    Ok((total / denom, grad))
}

fn check_batch(model: &PretrainModel, images: &[Image], masks: &[PatchMask]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::Validation("empty pre-training batch".into()));
    }
    if images.len() != masks.len() {
        return Err(Error::Validation(format!(
            "{} images but {} masks",
            images.len(),
            masks.len()
        )));
    }
    let size = model.encoder.config.image_size;
    if let Some(img) = images.iter().find(|im| im.dim() != (size, size)) {
        return Err(Error::Validation(format!(
            "expected {size}x{size} images, got {:?}",
            img.dim()
        )));
    }
    Ok(())
}

/// HOG targets for each image, computed from the unmasked original.
pub fn batch_targets(images: &[Image], patch_size: usize, hog: &HogParams) -> Result<Vec<HogTarget>> {
    images
        .par_iter()
        .map(|im| hog_targets_for_patches(im, patch_size, hog))
        .collect()
}

fn sample_loss(
    model: &PretrainModel,
    image: &Image,
    target: &HogTarget,
    mask: &PatchMask,
    grads: Option<&mut PretrainModel>,
) -> Result<f64> {
    let patches = patchify(image, model.encoder.config.patch_size)?;
    let (pred, cache) = model.forward(&patches, &mask.flags)?;
    let (loss, dpred) = mim_loss_and_grad(&pred, target, mask)?;
    if let Some(g) = grads {
        model.backward(&cache, &dpred, g);
    }
    Ok(loss)
}

/// Mean masked-HOG loss over a batch.
pub fn pretrain_batch_forward(
    model: &PretrainModel,
    images: &[Image],
    masks: &[PatchMask],
    hog: &HogParams,
) -> Result<f64> {
    check_batch(model, images, masks)?;
    let targets = batch_targets(images, model.encoder.config.patch_size, hog)?;
    let losses: Vec<f64> = images
        .par_iter()
        .zip(&targets)
        .zip(masks)
        .map(|((im, t), m)| sample_loss(model, im, t, m, None))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / images.len() as f64)
}

/// Mean batch loss and the gradient of that mean. Per-sample work runs in
/// parallel; gradients are summed in sample order so results do not depend
/// on the thread count.
pub fn pretrain_batch_loss_and_grad(
    model: &PretrainModel,
    images: &[Image],
    targets: &[HogTarget],
    masks: &[PatchMask],
) -> Result<(f64, PretrainModel)> {
    check_batch(model, images, masks)?;
    if targets.len() != images.len() {
        return Err(Error::Validation(format!(
            "{} images but {} target sets",
            images.len(),
            targets.len()
        )));
    }
    let per_sample: Vec<(f64, PretrainModel)> = images
        .par_iter()
        .zip(targets)
        .zip(masks)
        .map(|((im, t), m)| {
            let mut g = zeros_like(model);
            let loss = sample_loss(model, im, t, m, Some(&mut g))?;
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;
    let n = images.len() as f64;
    let mut total = 0.0;
    let mut grads = zeros_like(model);
    for (loss, g) in &per_sample {
        total += loss;
        accumulate(&mut grads, g);
    }
    scale(&mut grads, 1.0 / n);
    Ok((total / n, grads))
}
