//! Per-sample confidence vectors over the candidate labels.
//!
//! Every stored vector lives on the probability simplex and puts mass only
//! on its sample's candidates. Writes that would break either property are
//! rejected as a whole, leaving the store untouched.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datasets::{CandidateSet, PartialSample};
use crate::error::{Error, Result};

pub const SIMPLEX_TOL: f64 = 1e-6;

/// `Y / |Y|`.
pub fn init_confidence(candidates: &CandidateSet) -> Result<Vec<f64>> {
    let n = candidates.size();
    if n == 0 {
        return Err(Error::Validation("cannot initialise confidence from an empty candidate set".into()));
    }
    let w = 1.0 / n as f64;
    Ok(candidates
        .flags()
        .iter()
        .map(|&f| if f { w } else { 0.0 })
        .collect())
}

/// Checks simplex membership; returns a diagnostic on failure.
pub fn check_simplex(v: &[f64]) -> std::result::Result<(), String> {
    if let Some((j, x)) = v.iter().enumerate().find(|(_, x)| !x.is_finite() || **x < 0.0) {
        return Err(format!("entry {j} = {x} is negative or non-finite"));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(format!("entries sum to {sum}, expected 1"));
    }
    Ok(())
}

pub fn is_one_hot(v: &[f64]) -> bool {
    v.iter().filter(|&&x| x != 0.0).count() == 1 && v.iter().any(|&x| x == 1.0)
}

pub fn entropy(v: &[f64]) -> f64 {
    v.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseStats {
    pub fraction_one_hot: f64,
    pub mean_entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    candidates: CandidateSet,
    confidence: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceStore {
    num_classes: usize,
    entries: BTreeMap<usize, Entry>,
}

#[derive(Serialize, Deserialize)]
struct SnapshotRow {
    id: usize,
    confidence: Vec<f64>,
}

impl ConfidenceStore {
    /// One uniform-over-candidates entry per sample.
    pub fn from_samples(samples: &[PartialSample], num_classes: usize) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for ps in samples {
            if ps.candidates.num_classes() != num_classes {
                return Err(Error::Validation(format!(
                    "sample {} candidate vector has length {}, expected {num_classes}",
                    ps.id(),
                    ps.candidates.num_classes()
                )));
            }
            let confidence = init_confidence(&ps.candidates)?;
            let prev = entries.insert(
                ps.id(),
                Entry {
                    candidates: ps.candidates.clone(),
                    confidence,
                },
            );
            if prev.is_some() {
                return Err(Error::Validation(format!("duplicate sample id {}", ps.id())));
            }
        }
        Ok(Self {
            num_classes,
            entries,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn get(&self, id: usize) -> Result<&[f64]> {
        self.entries
            .get(&id)
            .map(|e| e.confidence.as_slice())
            .ok_or(Error::Lookup(id))
    }

    pub fn candidates(&self, id: usize) -> Result<&CandidateSet> {
        self.entries
            .get(&id)
            .map(|e| &e.candidates)
            .ok_or(Error::Lookup(id))
    }

    /// Rows in the order of `ids`.
    pub fn get_batch(&self, ids: &[usize]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((ids.len(), self.num_classes));
        for (r, &id) in ids.iter().enumerate() {
            let c = self.get(id)?;
            out.row_mut(r).assign(&ndarray::ArrayView1::from(c));
        }
        Ok(out)
    }

    fn check_row(&self, id: usize, v: &[f64]) -> std::result::Result<(), String> {
        let entry = self.entries.get(&id).ok_or_else(|| format!("unknown sample id {id}"))?;
        if v.len() != self.num_classes {
            return Err(format!("length {} != K={}", v.len(), self.num_classes));
        }
        check_simplex(v)?;
        if let Some(j) = (0..v.len()).find(|&j| v[j] > 0.0 && !entry.candidates.contains(j)) {
            return Err(format!("mass {} on non-candidate label {j}", v[j]));
        }
        Ok(())
    }

    /// Writes all rows or none.
    pub fn set_batch(&mut self, ids: &[usize], rows: &Array2<f64>) -> Result<()> {
        if rows.nrows() != ids.len() {
            return Err(Error::Validation(format!(
                "{} rows for {} ids",
                rows.nrows(),
                ids.len()
            )));
        }
        if let Some(&id) = ids.iter().find(|id| !self.entries.contains_key(id)) {
            return Err(Error::Lookup(id));
        }
        let problems: Vec<String> = ids
            .iter()
            .zip(rows.rows())
            .filter_map(|(&id, row)| {
                let v = row.to_vec();
                self.check_row(id, &v).err().map(|m| format!("id {id}: {m}"))
            })
            .collect();
        if !problems.is_empty() {
            return Err(Error::Validation(format!(
                "rejected confidence update: {}",
                problems.join("; ")
            )));
        }
        for (&id, row) in ids.iter().zip(rows.rows()) {
            self.entries.get_mut(&id).unwrap().confidence = row.to_vec();
        }
        Ok(())
    }

    pub fn collapse_stats(&self) -> Result<CollapseStats> {
        if self.entries.is_empty() {
            return Err(Error::Validation("collapse statistics of an empty store".into()));
        }
        let n = self.entries.len() as f64;
        let one_hot = self.entries.values().filter(|e| is_one_hot(&e.confidence)).count();
        let ent: f64 = self.entries.values().map(|e| entropy(&e.confidence)).sum();
        Ok(CollapseStats {
            fraction_one_hot: one_hot as f64 / n,
            mean_entropy: ent / n,
        })
    }

    /// Confidence rows ordered by id.
    pub fn rows(&self) -> Vec<(usize, Vec<f64>)> {
        self.entries
            .iter()
            .map(|(&id, e)| (id, e.confidence.clone()))
            .collect()
    }

    /// Full validity sweep: simplex and support containment for every entry.
    pub fn validate(&self) -> Result<()> {
        for (&id, e) in &self.entries {
            self.check_row(id, &e.confidence)
                .map_err(|m| Error::Validation(format!("id {id}: {m}")))?;
        }
        Ok(())
    }

    /// JSON-lines `{"id", "confidence"}` rows in id order.
    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for (&id, e) in &self.entries {
            serde_json::to_writer(
                &mut buf,
                &SnapshotRow {
                    id,
                    confidence: e.confidence.clone(),
                },
            )
            .expect("snapshot row serializes");
            buf.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Loads a snapshot written by [`write_snapshot`](Self::write_snapshot)
    /// into this store, validating every row.
    pub fn load_snapshot(&mut self, path: &Path) -> Result<()> {
        let rows = read_snapshot(path)?;
        let ids: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let mut mat = Array2::zeros((rows.len(), self.num_classes));
        for (i, (_, c)) in rows.iter().enumerate() {
            if c.len() != self.num_classes {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    msg: format!("row {} has {} entries", i + 1, c.len()),
                });
            }
            mat.row_mut(i).assign(&ndarray::ArrayView1::from(c.as_slice()));
        }
        self.set_batch(&ids, &mat)
    }
}

pub fn read_snapshot(path: &Path) -> Result<Vec<(usize, Vec<f64>)>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true))
        .map(|(i, line)| {
            let line = line.map_err(|e| Error::io(path, e))?;
            let row: SnapshotRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                msg: format!("line {}: {e}", i + 1),
            })?;
            Ok((row.id, row.confidence))
        })
        .collect()
}
