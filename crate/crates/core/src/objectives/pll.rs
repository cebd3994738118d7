use crate::candidate_store::check_simplex;
use crate::error::{Error, Result};
use crate::model::softmax;

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// `-Σ_j C_j log ζ_j`, with ζ clamped below at [`PROB_FLOOR`].
pub fn pll_loss(probs: &[f64], confidence: &[f64]) -> Result<f64> {
    if probs.len() != confidence.len() {
        return Err(Error::Validation(format!(
            "probability vector has {} entries, confidence has {}",
            probs.len(),
            confidence.len()
        )));
    }
    check_simplex(probs).map_err(|m| Error::Validation(format!("probabilities: {m}")))?;
    check_simplex(confidence).map_err(|m| Error::Validation(format!("confidence: {m}")))?;
    Ok(probs
        .iter()
        .zip(confidence)
        .filter(|(_, &c)| c != 0.0)
        .map(|(&p, &c)| -c * p.max(PROB_FLOOR).ln())
        .sum())
}

/// Loss and its gradient with respect to the logits feeding the softmax.
///
/// Clamped classes contribute a constant, so they drop out of the gradient:
/// `∂L/∂z_k = ζ_k Σ_{j∈U} C_j − C_k [k∈U]` where `U` is the unclamped set.
pub fn pll_loss_and_logit_grad(logits: &[f64], confidence: &[f64]) -> Result<(f64, Vec<f64>)> {
    let probs = softmax(logits)?;
    let loss = pll_loss(&probs, confidence)?;
    let mass: f64 = probs
        .iter()
        .zip(confidence)
        .filter(|(&p, _)| p >= PROB_FLOOR)
        .map(|(_, &c)| c)
        .sum();
    let grad = probs
        .iter()
        .zip(confidence)
        .map(|(&p, &c)| p * mass - if p >= PROB_FLOOR { c } else { 0.0 })
        .collect();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_reduces_to_cross_entropy() {
        let z = [0.2, 0.5, 0.3];
        let c = [0.0, 1.0, 0.0];
        assert_eq!(pll_loss(&z, &c).unwrap(), -(0.5f64).ln());
    }

    #[test]
    fn uniform_prediction_costs_log_k() {
        let z = [1.0 / 7.0; 7];
        let c = [0.0, 0.5, 0.0, 0.25, 0.25, 0.0, 0.0];
        assert!((pll_loss(&z, &c).unwrap() - 7f64.ln()).abs() < 1e-12);
        assert!((7f64.ln() - 1.9459).abs() < 1e-4);
    }

    #[test]
    fn hand_computed_two_candidate_case() {
        let z = [0.7, 0.1, 0.2];
        let c = [0.5, 0.5, 0.0];
        let want = -0.5 * 0.7f64.ln() - 0.5 * 0.1f64.ln();
        assert!((pll_loss(&z, &c).unwrap() - want).abs() < 1e-12);
        assert!((want - 1.3297).abs() < 1e-4);
    }

    #[test]
    fn rejects_off_simplex_inputs() {
        assert!(pll_loss(&[0.5, 0.6], &[1.0, 0.0]).is_err());
        assert!(pll_loss(&[0.5, 0.5], &[0.9, 0.0]).is_err());
        assert!(pll_loss(&[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn clamped_probability_gives_finite_loss() {
        let l = pll_loss(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((l - 0.5 * -(PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn logit_gradient_is_softmax_minus_confidence() {
        let (_, g) = pll_loss_and_logit_grad(&[0.3, -0.2, 1.0], &[0.5, 0.5, 0.0]).unwrap();
        let p = softmax(&[0.3, -0.2, 1.0]).unwrap();
        for (k, c) in [0.5, 0.5, 0.0].iter().enumerate() {
            assert!((g[k] - (p[k] - c)).abs() < 1e-15);
        }
    }
}
