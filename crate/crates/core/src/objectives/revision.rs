use serde::{Deserialize, Serialize};

use crate::candidate_store::check_simplex;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RevisionConfig {
    pub threshold: f64,
    pub k_top: usize,
}

impl Default for RevisionConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            k_top: 2,
        }
    }
}

impl RevisionConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "revision threshold must be in [0,1), got {}",
                self.threshold
            )));
        }
        if self.k_top < 2 || self.k_top > num_classes {
            return Err(Error::Config(format!(
                "k_top must be in [2, {num_classes}], got {}",
                self.k_top
            )));
        }
        Ok(())
    }
}

/// One revision step for a single sample.
///
/// Scores `s = φ ⊙ C_prev` are ranked (ties to the lower index). When the gap
/// between the best score and the `k_top`-th best exceeds the threshold the
/// confidence collapses to one-hot at the best index; otherwise it is kept.
/// With `k_top = 2` this is the usual top-2 margin rule.
pub fn revise_confidence(prev: &[f64], phi: &[f64], config: &RevisionConfig) -> Result<Vec<f64>> {
    let k = prev.len();
    if phi.len() != k {
        return Err(Error::Validation(format!(
            "response has {} entries, confidence has {k}",
            phi.len()
        )));
    }
    config.validate(k)?;
    check_simplex(prev).map_err(|m| Error::Validation(format!("confidence: {m}")))?;
    if let Some(p) = phi.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Validation(format!("response {p} outside [0,1]")));
    }

    let scores: Vec<f64> = phi.iter().zip(prev).map(|(p, c)| p * c).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let best = order[0];
    let gap = (scores[best] - scores[order[config.k_top - 1]]).abs();
    if gap > config.threshold {
        let mut out = vec![0.0; k];
        out[best] = 1.0;
        Ok(out)
    } else {
        Ok(prev.to_vec())
    }
}
