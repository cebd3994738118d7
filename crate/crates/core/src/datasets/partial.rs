use rand::Rng;

use super::{CandidateSet, PartialSample, Sample};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

/// Standard PLL corruption: the true label is always a candidate and every
/// other label joins independently with probability `q`.
pub fn corrupt_to_partial_labels(
    samples: &[Sample],
    num_classes: usize,
    q: f64,
    seed: u64,
) -> Result<Vec<PartialSample>> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::Config(format!("flip-in probability must be in [0,1), got {q}")));
    }
    samples
        .iter()
        .map(|s| {
            let truth = s.true_label.ok_or_else(|| {
                Error::Validation(format!("sample {} has no true label to corrupt", s.id))
            })?;
            if truth >= num_classes {
                return Err(Error::Schema(format!(
                    "sample {} label {truth} >= K={num_classes}",
                    s.id
                )));
            }
            // One stream per sample id keeps the result independent of order.
            let mut rng = rng_for(seed, stream::CORRUPT, s.id as u64);
            let flags = (0..num_classes)
                .map(|j| j == truth || rng.gen::<f64>() < q)
                .collect();
            PartialSample::new(s.clone(), CandidateSet::from_flags(flags))
        })
        .collect()
}

/// Builds candidate sets from a reference model's class probabilities.
/// Samples whose top-1/top-2 margin is below `ambiguity_margin` are treated
/// as ambiguous and get their top-`k` classes; the rest get their top-1.
pub fn build_candidate_sets_from_reference(
    samples: &[Sample],
    ref_probs: &[Vec<f64>],
    k: usize,
    ambiguity_margin: f64,
) -> Result<Vec<PartialSample>> {
    if samples.len() != ref_probs.len() {
        return Err(Error::Validation(format!(
            "{} reference rows for {} samples",
            ref_probs.len(),
            samples.len()
        )));
    }
    samples
        .iter()
        .zip(ref_probs)
        .map(|(s, probs)| {
            let num_classes = probs.len();
            if num_classes < 2 {
                return Err(Error::Validation(format!(
                    "sample {}: reference row needs >= 2 classes",
                    s.id
                )));
            }
            if k < 1 || k > num_classes {
                return Err(Error::Config(format!("top-k must be in [1, {num_classes}], got {k}")));
            }
            let sum: f64 = probs.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || probs.iter().any(|p| !(*p >= 0.0)) {
                return Err(Error::Validation(format!(
                    "sample {}: reference probabilities sum to {sum}, expected 1",
                    s.id
                )));
            }
            let mut order: Vec<usize> = (0..num_classes).collect();
            order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
            let margin = probs[order[0]] - probs[order[1]];
            let take = if margin < ambiguity_margin { k } else { 1 };
            let set = CandidateSet::from_indices(num_classes, &order[..take])?;
            // The reference model may be wrong, so the truth is not asserted here.
            Ok(PartialSample {
                sample: s.clone(),
                candidates: set,
            })
        })
        .collect()
}

/// Replaces each candidate set with one label drawn uniformly from it.
/// Used for the plain cross-entropy baseline.
pub fn draw_single_labels(samples: &[PartialSample], seed: u64) -> Vec<PartialSample> {
    samples
        .iter()
        .map(|ps| {
            let idx = ps.candidates.indices();
            let mut rng = rng_for(seed, stream::SINGLE_LABEL, ps.id() as u64);
            let pick = idx[rng.gen_range(0..idx.len())];
            // The drawn label may be wrong; truth stays on the sample for scoring.
            let flags = (0..ps.candidates.num_classes()).map(|j| j == pick).collect();
            PartialSample {
                sample: ps.sample.clone(),
                candidates: CandidateSet::from_flags(flags),
            }
        })
        .collect()
}
