//! Hypersphere uniformity energy
//! `L(t) = (1/K) Σ_i log Σ_j exp(t_i·t_j / τ)` over L2-normalised rows,
//! its minimisers (the class anchors), and the alignment term that pulls the
//! live query embeddings toward them.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

fn normalize_rows(points: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = points.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|&n| !(n > 0.0) || !n.is_finite()) {
        return Err(Error::Numeric(format!("row {i} has zero or non-finite norm")));
    }
    let unit = points / &norms.view().insert_axis(Axis(1));
    Ok((unit, norms))
}

/// Row-wise log-sum-exp of `sims / τ` and the matching softmax weights.
fn row_lse(sims: &Array2<f64>, tau: f64) -> (Array1<f64>, Array2<f64>) {
    let k = sims.nrows();
    let mut lse = Array1::zeros(k);
    let mut weights = Array2::zeros((k, k));
    for i in 0..k {
        let row = sims.row(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) / tau;
        let mut s = 0.0;
        for j in 0..k {
            let e = (row[j] / tau - m).exp();
            weights[[i, j]] = e;
            s += e;
        }
        lse[i] = m + s.ln();
        weights.row_mut(i).mapv_inplace(|w| w / s);
    }
    (lse, weights)
}

pub fn uniform_loss(points: &Array2<f64>, tau: f64) -> Result<f64> {
    uniform_loss_and_grad(points, tau).map(|(v, _)| v)
}

/// Value and gradient with respect to the raw (unnormalised) rows.
pub fn uniform_loss_and_grad(points: &Array2<f64>, tau: f64) -> Result<(f64, Array2<f64>)> {
    check_tau(tau)?;
    let k = points.nrows();
    if k == 0 {
        return Err(Error::Validation("uniform loss needs at least one point".into()));
    }
    let (unit, norms) = normalize_rows(points)?;
    let sims = unit.dot(&unit.t());
    let (lse, w) = row_lse(&sims, tau);
    let value = lse.sum() / k as f64;

    // dL/dS_ij = (W_ij) / (K τ); S = U Uᵀ, so dL/dU = (W + Wᵀ) U / (K τ).
    let sym = &w + &w.t();
    let grad_unit = sym.dot(&unit) / (k as f64 * tau);
    Ok((value, project_through_norm(&unit, &norms, &grad_unit)))
}

/// Backpropagates a gradient on `u = x/|x|` to `x`: `(I − u uᵀ) g / |x|`.
fn project_through_norm(unit: &Array2<f64>, norms: &Array1<f64>, grad_unit: &Array2<f64>) -> Array2<f64> {
    let mut out = grad_unit.clone();
    for i in 0..unit.nrows() {
        let u = unit.row(i);
        let radial = u.dot(&grad_unit.row(i));
        let mut r = out.row_mut(i);
        r.scaled_add(-radial, &u);
        r.mapv_inplace(|v| v / norms[i]);
    }
    out
}

/// Precomputed class anchors on the unit sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub tau: f64,
    pub anchors: Vec<Vec<f64>>,
}

impl AnchorSet {
    pub fn new(tau: f64, anchors: Array2<f64>) -> Result<Self> {
        let set = Self {
            tau,
            anchors: anchors.rows().into_iter().map(|r| r.to_vec()).collect(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if self.anchors.len() < 2 {
            return Err(Error::Validation("an anchor set needs K >= 2".into()));
        }
        let d = self.anchors[0].len();
        for (i, a) in self.anchors.iter().enumerate() {
            if a.len() != d {
                return Err(Error::Validation(format!("anchor {i} has dimension {}", a.len())));
            }
            let n = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Validation(format!("anchor {i} has norm {n}")));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.anchors.len()
    }

    pub fn dim(&self) -> usize {
        self.anchors[0].len()
    }

    pub fn matrix(&self) -> Array2<f64> {
        let (k, d) = (self.num_classes(), self.dim());
        Array2::from_shape_fn((k, d), |(i, j)| self.anchors[i][j])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self).expect("anchor set serializes");
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let set: Self = serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        set.validate()?;
        Ok(set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorSearch {
    pub steps: usize,
    pub restarts: usize,
    pub learning_rate: f64,
}

impl Default for AnchorSearch {
    fn default() -> Self {
        Self {
            steps: 2000,
            restarts: 8,
            learning_rate: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnchorOutcome {
    pub anchors: AnchorSet,
    pub loss: f64,
    /// Norm of the tangent-space gradient at the returned iterate.
    pub grad_norm: f64,
    /// Set when the gradient norm is still above 1e-3 after the last step.
    pub warning: Option<String>,
}

fn tangent_grad(unit: &Array2<f64>, tau: f64) -> Result<(f64, Array2<f64>)> {
    // Rows are unit length, so the raw-point gradient is already tangent.
    uniform_loss_and_grad(unit, tau)
}

fn renormalize(x: &mut Array2<f64>) {
    for mut r in x.rows_mut() {
        let n = r.dot(&r).sqrt();
        r.mapv_inplace(|v| v / n);
    }
}

/// Projected gradient descent on the sphere from one random start.
///
/// The temperature is annealed geometrically from `max(τ, 1)` down to `τ`
/// over the first half of the steps; at small τ the energy is flat almost
/// everywhere (gradients underflow) and a cold start would never move.
fn descend(k: usize, d: usize, tau: f64, search: &AnchorSearch, seed: u64, restart: u64) -> Result<(Array2<f64>, f64, f64)> {
    let mut rng = rng_for(seed, stream::ANCHORS, restart);
    let mut x = Array2::from_shape_simple_fn((k, d), || StandardNormal.sample(&mut rng));
    renormalize(&mut x);
    let tau_start = tau.max(1.0);
    let anneal = (search.steps / 2).max(1);
    for step in 0..search.steps {
        let t = if step < anneal {
            let frac = step as f64 / anneal as f64;
            tau_start * (tau / tau_start).powf(frac)
        } else {
            tau
        };
        let (_, g) = tangent_grad(&x, t)?;
        // Gradient scales like 1/τ; keep the step length temperature-free.
        let lr = search.learning_rate * t * k as f64 / 2.0;
        x.scaled_add(-lr, &g);
        renormalize(&mut x);
    }
    let (loss, g) = tangent_grad(&x, tau)?;
    let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok((x, loss, gnorm))
}

pub fn optimal_anchor_positions(k: usize, d: usize, tau: f64, steps: usize, seed: u64) -> Result<AnchorOutcome> {
    optimal_anchor_positions_with(
        k,
        d,
        tau,
        &AnchorSearch {
            steps,
            ..AnchorSearch::default()
        },
        seed,
    )
}

/// Best of `search.restarts` seeded descents; deterministic per seed.
pub fn optimal_anchor_positions_with(k: usize, d: usize, tau: f64, search: &AnchorSearch, seed: u64) -> Result<AnchorOutcome> {
    check_tau(tau)?;
    if k < 2 || d < 2 {
        return Err(Error::Config(format!("anchors need K >= 2 and d >= 2, got K={k}, d={d}")));
    }
    if search.restarts == 0 {
        return Err(Error::Config("anchor search needs at least one restart".into()));
    }
    let mut best: Option<(Array2<f64>, f64, f64)> = None;
    for r in 0..search.restarts {
        let cand = descend(k, d, tau, search, seed, r as u64)?;
        if best.as_ref().map_or(true, |b| cand.1 < b.1) {
            best = Some(cand);
        }
    }
    let (x, loss, grad_norm) = best.unwrap();
    let warning = (grad_norm > 1e-3).then(|| {
        format!("anchor search did not converge: gradient norm {grad_norm:.3e} after {} steps", search.steps)
    });
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(AnchorOutcome {
        anchors: AnchorSet::new(tau, x)?,
        loss,
        grad_norm,
        warning,
    })
}

pub fn anchor_alignment_loss(queries: &Array2<f64>, anchors: &AnchorSet) -> Result<f64> {
    anchor_alignment_loss_and_grad(queries, anchors).map(|(v, _)| v)
}

/// `(1/K) Σ_i ||q_i/|q_i| − t_i||²` and its gradient with respect to `Q`.
pub fn anchor_alignment_loss_and_grad(queries: &Array2<f64>, anchors: &AnchorSet) -> Result<(f64, Array2<f64>)> {
    let t = anchors.matrix();
    if queries.dim() != t.dim() {
        return Err(Error::Validation(format!(
            "queries are {:?} but anchors are {:?}",
            queries.dim(),
            t.dim()
        )));
    }
    let k = queries.nrows() as f64;
    let (unit, norms) = normalize_rows(queries)?;
    let diff = &unit - &t;
    let value = diff.iter().map(|v| v * v).sum::<f64>() / k;
    let grad_unit = diff * (2.0 / k);
    Ok((value, project_through_norm(&unit, &norms, &grad_unit)))
}
