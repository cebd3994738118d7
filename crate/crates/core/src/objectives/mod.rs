//! Training objectives: the candidate-weighted cross-entropy, the hypersphere
//! uniformity energy (with precomputed anchors and a live alignment term),
//! and the thresholded top-k confidence revision rule.

mod pll;
mod revision;
mod uniform;

pub use pll::{pll_loss, pll_loss_and_logit_grad, PROB_FLOOR};
pub use revision::{revise_confidence, RevisionConfig};
pub use uniform::{
    anchor_alignment_loss, anchor_alignment_loss_and_grad, optimal_anchor_positions,
    optimal_anchor_positions_with, uniform_loss, uniform_loss_and_grad, AnchorSearch, AnchorSet,
};

use crate::error::{Error, Result};

/// `pll + λ_u · uniform + λ_a · alignment`.
pub fn total_finetune_loss(
    pll: f64,
    uniform: f64,
    alignment: f64,
    lambda_uniform: f64,
    lambda_align: f64,
) -> Result<f64> {
    if !(lambda_uniform >= 0.0) || !(lambda_align >= 0.0) {
        return Err(Error::Config(format!(
            "loss weights must be non-negative, got λ_u={lambda_uniform}, λ_a={lambda_align}"
        )));
    }
    Ok(pll + lambda_uniform * uniform + lambda_align * alignment)
}
