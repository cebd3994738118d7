//! Samples, candidate label sets, and the ways of producing them: the
//! parametric face renderer, image-folder manifests, and partial-label
//! construction (random corruption or top-k of a reference model).

mod manifest;
mod partial;
mod synth;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use manifest::{
    load_image_folder, load_partial_folder, read_manifest, write_image_folder, write_pgm, MANIFEST_NAME,
    ManifestRow,
};
pub use partial::{
    build_candidate_sets_from_reference, corrupt_to_partial_labels, draw_single_labels,
};
pub use synth::{generate_synthetic_dataset, render_face, FaceParams, SynthSpec};

/// A grayscale image with intensities in `[0, 1]`, rows first.
pub type Image = Array2<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub image: Image,
    pub true_label: Option<usize>,
}

/// Binary indicator over the `K` classes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CandidateSet(Vec<bool>);

impl CandidateSet {
    pub fn from_indices(num_classes: usize, indices: &[usize]) -> Result<Self> {
        let mut flags = vec![false; num_classes];
        for &i in indices {
            if i >= num_classes {
                return Err(Error::Schema(format!(
                    "candidate label {i} out of range for {num_classes} classes"
                )));
            }
            flags[i] = true;
        }
        Ok(Self(flags))
    }

    pub fn singleton(num_classes: usize, label: usize) -> Result<Self> {
        Self::from_indices(num_classes, &[label])
    }

    pub fn from_flags(flags: Vec<bool>) -> Self {
        Self(flags)
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn size(&self) -> usize {
        self.0.iter().filter(|&&f| f).count()
    }

    pub fn contains(&self, label: usize) -> bool {
        self.0.get(label).copied().unwrap_or(false)
    }

    pub fn indices(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect()
    }

    pub fn flags(&self) -> &[bool] {
        &self.0
    }

    pub fn is_ambiguous(&self) -> bool {
        self.size() > 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartialSample {
    pub sample: Sample,
    pub candidates: CandidateSet,
}

impl PartialSample {
    pub fn new(sample: Sample, candidates: CandidateSet) -> Result<Self> {
        if candidates.size() == 0 {
            return Err(Error::Validation(format!(
                "sample {} has an empty candidate set",
                sample.id
            )));
        }
        if let Some(t) = sample.true_label {
            if !candidates.contains(t) {
                return Err(Error::Validation(format!(
                    "sample {} candidate set excludes its true label {t}",
                    sample.id
                )));
            }
        }
        Ok(Self { sample, candidates })
    }

    pub fn id(&self) -> usize {
        self.sample.id
    }
}
