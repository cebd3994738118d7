//! Test metrics, disambiguation forensics, confusion plots and the ablation
//! driver.

mod ablation;
mod plot;

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::candidate_store::ConfidenceStore;
use crate::datasets::{PartialSample, Sample};
use crate::error::{Error, Result};
use crate::model::{classifier_probs, Classifier};
use crate::trainer::EpochSnapshot;

pub use ablation::{
    read_runs_csv, run_ablation, run_ablation_with, summarize, write_runs_csv, write_summary_csv,
    AblationGrid, AblationOutcome, CellParams, CellResult, RunRow, SummaryRow, RUNS_HEADER, SUMMARY_HEADER,
};
pub use plot::{confusion_csv, confusion_svg, export_confusion_plot, row_percentages};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub mean_class_accuracy: f64,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<u64>>,
    pub support: Vec<u64>,
}

impl Metrics {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let k = confusion.len();
        if k == 0 || confusion.iter().any(|r| r.len() != k) {
            return Err(Error::Validation("confusion matrix must be square and non-empty".into()));
        }
        let support: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
        let total: u64 = support.iter().sum();
        if total == 0 {
            return Err(Error::Validation("no samples to score".into()));
        }
        let trace: u64 = (0..k).map(|i| confusion[i][i]).sum();
        let per_class: Vec<f64> = (0..k)
            .filter(|&i| support[i] > 0)
            .map(|i| confusion[i][i] as f64 / support[i] as f64)
            .collect();
        Ok(Self {
            accuracy: trace as f64 / total as f64,
            mean_class_accuracy: per_class.iter().sum::<f64>() / per_class.len() as f64,
            confusion,
            support,
        })
    }

    pub fn from_pairs(num_classes: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Validation("truth and prediction lengths differ".into()));
        }
        let mut m = vec![vec![0u64; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::Schema(format!("label pair ({t}, {p}) out of range for K={num_classes}")));
            }
            m[t][p] += 1;
        }
        Self::from_confusion(m)
    }

    /// Accuracy of each class with non-zero support, `None` otherwise.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.support.len())
            .map(|i| (self.support[i] > 0).then(|| self.confusion[i][i] as f64 / self.support[i] as f64))
            .collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("metrics serialize");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Predicted class of every sample (argmax of the softmax).
pub fn predict(model: &Classifier, samples: &[Sample]) -> Result<Vec<usize>> {
    samples
        .par_iter()
        .map(|s| Ok(argmax(&classifier_probs(&model.logits(&s.image)?)?)))
        .collect()
}

pub fn evaluate(model: &Classifier, samples: &[Sample]) -> Result<Metrics> {
    let truth: Vec<usize> = samples
        .iter()
        .map(|s| {
            s.true_label
                .ok_or_else(|| Error::Validation(format!("test sample {} has no label", s.id)))
        })
        .collect::<Result<_>>()?;
    let pred = predict(model, samples)?;
    Metrics::from_pairs(model.num_classes(), &truth, &pred)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub epoch: usize,
    pub top2_coverage: Option<f64>,
    pub confidence_correctness: Option<f64>,
    pub collapse_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisambiguationReport {
    /// Fraction of ambiguous samples whose true label is among the top-2
    /// positive entries of `φ ⊙ C`. `None` without truth or response data.
    pub top2_coverage: Option<f64>,
    /// Fraction of samples whose stored confidence argmax is the truth.
    pub confidence_correctness: Option<f64>,
    pub collapse_fraction: f64,
    pub mean_entropy: f64,
    pub num_samples: usize,
    pub num_ambiguous: usize,
    pub trajectory: Vec<TrajectoryPoint>,
}

/// Top-2 indices of `φ ⊙ C` restricted to positive scores.
fn top2_positive(phi: &[f64], conf: &[f64]) -> Vec<usize> {
    let s: Vec<f64> = phi.iter().zip(conf).map(|(p, c)| p * c).collect();
    let mut order: Vec<usize> = (0..s.len()).filter(|&j| s[j] > 0.0).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
    order.truncate(2);
    order
}

struct Scores {
    top2: Option<f64>,
    correctness: Option<f64>,
    collapse: f64,
}

fn score(
    samples: &[PartialSample],
    conf: &dyn Fn(usize) -> Result<Vec<f64>>,
    phi: Option<&dyn Fn(usize) -> Option<Vec<f64>>>,
) -> Result<Scores> {
    let mut correct = 0usize;
    let mut with_truth = 0usize;
    let mut covered = 0usize;
    let mut ambiguous = 0usize;
    let mut one_hot = 0usize;
    for ps in samples {
        let c = conf(ps.id())?;
        if crate::candidate_store::is_one_hot(&c) {
            one_hot += 1;
        }
        let Some(t) = ps.sample.true_label else { continue };
        with_truth += 1;
        if argmax(&c) == t {
            correct += 1;
        }
        if ps.candidates.is_ambiguous() {
            if let Some(p) = phi.and_then(|f| f(ps.id())) {
                ambiguous += 1;
                if top2_positive(&p, &c).contains(&t) {
                    covered += 1;
                }
            }
        }
    }
    let frac = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Ok(Scores {
        top2: frac(covered, ambiguous),
        correctness: frac(correct, with_truth),
        collapse: one_hot as f64 / samples.len().max(1) as f64,
    })
}

fn snapshot_lookup(snap: &EpochSnapshot, store_ids: &[usize]) -> Result<()> {
    let ids: Vec<usize> = snap.confidences.iter().map(|r| r.0).collect();
    let phi_ids: Vec<usize> = snap.phi.iter().map(|r| r.0).collect();
    if ids != store_ids || phi_ids != store_ids {
        return Err(Error::Validation(format!(
            "snapshot for epoch {} covers different samples than the store",
            snap.epoch
        )));
    }
    Ok(())
}

/// Disambiguation statistics of a finished run. `snapshots` must be ordered
/// by epoch and cover exactly the store's samples; the last one supplies
/// the response used for the final top-2 coverage.
pub fn disambiguation_report(
    store: &ConfidenceStore,
    samples: &[PartialSample],
    snapshots: &[EpochSnapshot],
) -> Result<DisambiguationReport> {
    let store_ids: Vec<usize> = store.ids().collect();
    let mut sample_ids: Vec<usize> = samples.iter().map(|s| s.id()).collect();
    sample_ids.sort_unstable();
    if sample_ids != store_ids {
        return Err(Error::Validation("samples and store cover different ids".into()));
    }
    for (i, s) in snapshots.iter().enumerate() {
        snapshot_lookup(s, &store_ids)?;
        if i > 0 && s.epoch <= snapshots[i - 1].epoch {
            return Err(Error::Validation(format!(
                "snapshot epochs are not increasing ({} after {})",
                s.epoch,
                snapshots[i - 1].epoch
            )));
        }
        if s.phi.iter().any(|(_, p)| p.len() != store.num_classes()) {
            return Err(Error::Validation(format!(
                "snapshot for epoch {} has responses of the wrong length",
                s.epoch
            )));
        }
    }
    let index = |rows: &[(usize, Vec<f64>)], id: usize| -> Option<Vec<f64>> {
        rows.binary_search_by_key(&id, |r| r.0).ok().map(|i| rows[i].1.clone())
    };

    let mut trajectory = Vec::with_capacity(snapshots.len());
    for s in snapshots {
        let conf = |id: usize| index(&s.confidences, id).ok_or(Error::Lookup(id));
        let phi = |id: usize| index(&s.phi, id);
        let sc = score(samples, &conf, Some(&phi))?;
        trajectory.push(TrajectoryPoint {
            epoch: s.epoch,
            top2_coverage: sc.top2,
            confidence_correctness: sc.correctness,
            collapse_fraction: sc.collapse,
        });
    }

    let conf = |id: usize| store.get(id).map(<[f64]>::to_vec);
    let last = snapshots.last();
    let phi = |id: usize| last.and_then(|s| index(&s.phi, id));
    let phi_ref: Option<&dyn Fn(usize) -> Option<Vec<f64>>> = if last.is_some() { Some(&phi) } else { None };
    let sc = score(samples, &conf, phi_ref)?;
    let stats = store.collapse_stats()?;
    Ok(DisambiguationReport {
        top2_coverage: sc.top2,
        confidence_correctness: sc.correctness,
        collapse_fraction: stats.fraction_one_hot,
        mean_entropy: stats.mean_entropy,
        num_samples: samples.len(),
        num_ambiguous: samples.iter().filter(|s| s.candidates.is_ambiguous()).count(),
        trajectory,
    })
}
