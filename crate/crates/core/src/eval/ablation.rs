//! Grid ablations: one fine-tuning run per (cell, seed), recorded in
//! `runs.csv`, with mean and standard deviation per cell in `summary.csv`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{disambiguation_report, evaluate};
use crate::checkpoint::Checkpoint;
use crate::datasets::{corrupt_to_partial_labels, generate_synthetic_dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::model::{HeadKind, ModelConfig};
use crate::objectives::RevisionConfig;
use crate::trainer::{finetune, pretrain, FinetuneOptions, PretrainConfig, PretrainRun, TrainConfig};

pub const RUNS_HEADER: &str = "threshold,tau,k_top,pretrain,decoder,lambda_uniform,lambda_align,flip_prob,seed,accuracy,confidence_correctness,top2_coverage,wall_s,status";
pub const SUMMARY_HEADER: &str = "threshold,tau,k_top,pretrain,decoder,lambda_uniform,lambda_align,flip_prob,runs,failed,accuracy_mean,accuracy_std,confidence_correctness_mean,confidence_correctness_std,top2_coverage_mean,top2_coverage_std,wall_s_mean";

/// Grid axes plus the shared base configuration. Omitted axes take the
/// single value from the base configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub thresholds: Option<Vec<f64>>,
    pub taus: Option<Vec<f64>>,
    pub k_tops: Option<Vec<usize>>,
    pub pretrain: Option<Vec<bool>>,
    pub decoder: Option<Vec<bool>>,
    pub lambda_uniform: Option<Vec<f64>>,
    pub lambda_align: Option<Vec<f64>>,
    pub flip_probs: Option<Vec<f64>>,
    pub seeds: Vec<u64>,
    pub data: SynthSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain_config: PretrainConfig,
    pub pretrain_epochs: usize,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            thresholds: None,
            taus: None,
            k_tops: None,
            pretrain: None,
            decoder: None,
            lambda_uniform: None,
            lambda_align: None,
            flip_probs: None,
            seeds: vec![1],
            data: SynthSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            pretrain_config: PretrainConfig::default(),
            pretrain_epochs: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    pub threshold: f64,
    pub tau: f64,
    pub k_top: usize,
    pub pretrain: bool,
    pub decoder: bool,
    pub lambda_uniform: f64,
    pub lambda_align: f64,
    pub flip_prob: f64,
}

impl AblationGrid {
    /// Cartesian product of the axes, last axis varying fastest.
    pub fn cells(&self) -> Result<Vec<CellParams>> {
        fn axis<T: Clone>(v: &Option<Vec<T>>, base: T, name: &str) -> Result<Vec<T>> {
            match v {
                Some(v) if v.is_empty() => Err(Error::Config(format!("ablation axis {name} is empty"))),
                Some(v) => Ok(v.clone()),
                None => Ok(vec![base]),
            }
        }
        let t = &self.train;
        let thresholds = axis(&self.thresholds, t.revision.threshold, "thresholds")?;
        let taus = axis(&self.taus, t.tau, "taus")?;
        let k_tops = axis(&self.k_tops, t.revision.k_top, "k_tops")?;
        let pretrain = axis(&self.pretrain, true, "pretrain")?;
        let decoder = axis(&self.decoder, self.model.head == HeadKind::Query, "decoder")?;
        let lu = axis(&self.lambda_uniform, t.lambda_uniform, "lambda_uniform")?;
        let la = axis(&self.lambda_align, t.lambda_align, "lambda_align")?;
        let flips = axis(&self.flip_probs, 0.3, "flip_probs")?;
        if self.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one seed".into()));
        }
        let mut out = Vec::new();
        for &threshold in &thresholds {
            for &tau in &taus {
                for &k_top in &k_tops {
                    for &pretrain in &pretrain {
                        for &decoder in &decoder {
                            for &lambda_uniform in &lu {
                                for &lambda_align in &la {
                                    for &flip_prob in &flips {
                                        out.push(CellParams {
                                            threshold,
                                            tau,
                                            k_top,
                                            pretrain,
                                            decoder,
                                            lambda_uniform,
                                            lambda_align,
                                            flip_prob,
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Training and model configuration for one cell and seed.
    pub fn cell_configs(&self, cell: &CellParams, seed: u64) -> (ModelConfig, TrainConfig) {
        let mut model = self.model;
        model.head = if cell.decoder { HeadKind::Query } else { HeadKind::Pooled };
        let mut train = self.train;
        train.seed = seed;
        train.tau = cell.tau;
        train.revision = RevisionConfig {
            threshold: cell.threshold,
            k_top: cell.k_top,
        };
        train.lambda_uniform = cell.lambda_uniform;
        train.lambda_align = cell.lambda_align;
        (model, train)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellResult {
    pub accuracy: f64,
    pub confidence_correctness: Option<f64>,
    pub top2_coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub threshold: f64,
    pub tau: f64,
    pub k_top: usize,
    pub pretrain: bool,
    pub decoder: bool,
    pub lambda_uniform: f64,
    pub lambda_align: f64,
    pub flip_prob: f64,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub confidence_correctness: Option<f64>,
    pub top2_coverage: Option<f64>,
    pub wall_s: f64,
    pub status: String,
}

impl RunRow {
    pub fn cell(&self) -> CellParams {
        CellParams {
            threshold: self.threshold,
            tau: self.tau,
            k_top: self.k_top,
            pretrain: self.pretrain,
            decoder: self.decoder,
            lambda_uniform: self.lambda_uniform,
            lambda_align: self.lambda_align,
            flip_prob: self.flip_prob,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub threshold: f64,
    pub tau: f64,
    pub k_top: usize,
    pub pretrain: bool,
    pub decoder: bool,
    pub lambda_uniform: f64,
    pub lambda_align: f64,
    pub flip_prob: f64,
    pub runs: usize,
    pub failed: usize,
    pub accuracy_mean: Option<f64>,
    pub accuracy_std: Option<f64>,
    pub confidence_correctness_mean: Option<f64>,
    pub confidence_correctness_std: Option<f64>,
    pub top2_coverage_mean: Option<f64>,
    pub top2_coverage_std: Option<f64>,
    pub wall_s_mean: f64,
}

pub struct AblationOutcome {
    pub runs: Vec<RunRow>,
    pub summary: Vec<SummaryRow>,
}

/// Mean and sample standard deviation (0 for a single value).
fn mean_std(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (Some(mean), Some(std))
}

/// One summary row per distinct cell, in first-seen order.
pub fn summarize(runs: &[RunRow]) -> Vec<SummaryRow> {
    let mut cells: Vec<CellParams> = Vec::new();
    for r in runs {
        let c = r.cell();
        if !cells.contains(&c) {
            cells.push(c);
        }
    }
    cells
        .into_iter()
        .map(|c| {
            let rows: Vec<&RunRow> = runs.iter().filter(|r| r.cell() == c).collect();
            let ok: Vec<&&RunRow> = rows.iter().filter(|r| r.status == "ok").collect();
            let acc: Vec<f64> = ok.iter().filter_map(|r| r.accuracy).collect();
            let cc: Vec<f64> = ok.iter().filter_map(|r| r.confidence_correctness).collect();
            let t2: Vec<f64> = ok.iter().filter_map(|r| r.top2_coverage).collect();
            let (accuracy_mean, accuracy_std) = mean_std(&acc);
            let (cc_mean, cc_std) = mean_std(&cc);
            let (t2_mean, t2_std) = mean_std(&t2);
            SummaryRow {
                threshold: c.threshold,
                tau: c.tau,
                k_top: c.k_top,
                pretrain: c.pretrain,
                decoder: c.decoder,
                lambda_uniform: c.lambda_uniform,
                lambda_align: c.lambda_align,
                flip_prob: c.flip_prob,
                runs: rows.len(),
                failed: rows.len() - ok.len(),
                accuracy_mean,
                accuracy_std,
                confidence_correctness_mean: cc_mean,
                confidence_correctness_std: cc_std,
                top2_coverage_mean: t2_mean,
                top2_coverage_std: t2_std,
                wall_s_mean: rows.iter().map(|r| r.wall_s).sum::<f64>() / rows.len() as f64,
            }
        })
        .collect()
}

/// Runs every (cell, seed) pair through `runner`. A failing pair is
/// recorded with its error and the remaining pairs still run.
pub fn run_ablation_with<F>(grid: &AblationGrid, mut runner: F) -> Result<AblationOutcome>
where
    F: FnMut(&CellParams, u64) -> Result<CellResult>,
{
    let cells = grid.cells()?;
    let mut runs = Vec::with_capacity(cells.len() * grid.seeds.len());
    for cell in &cells {
        for &seed in &grid.seeds {
            let start = Instant::now();
            let result = runner(cell, seed);
            let wall_s = start.elapsed().as_secs_f64();
            let (res, status) = match result {
                Ok(r) => (Some(r), "ok".to_string()),
                Err(e) => {
                    log::warn!("ablation cell {cell:?} seed {seed} failed: {e}");
                    (None, format!("failed: {e}"))
                }
            };
            runs.push(RunRow {
                threshold: cell.threshold,
                tau: cell.tau,
                k_top: cell.k_top,
                pretrain: cell.pretrain,
                decoder: cell.decoder,
                lambda_uniform: cell.lambda_uniform,
                lambda_align: cell.lambda_align,
                flip_prob: cell.flip_prob,
                seed,
                accuracy: res.map(|r| r.accuracy),
                confidence_correctness: res.and_then(|r| r.confidence_correctness),
                top2_coverage: res.and_then(|r| r.top2_coverage),
                wall_s,
                status,
            });
        }
    }
    let summary = summarize(&runs);
    Ok(AblationOutcome { runs, summary })
}

/// Runs the grid on synthetic data generated from `grid.data`. Pre-trained
/// encoders are shared between cells with the same seed.
pub fn run_ablation(grid: &AblationGrid) -> Result<AblationOutcome> {
    grid.data.validate()?;
    grid.model.validate()?;
    if grid.model.num_classes() != grid.data.num_classes {
        return Err(Error::Config(format!(
            "model has K={} but the data has {} classes",
            grid.model.num_classes(),
            grid.data.num_classes
        )));
    }
    let (train, test) = generate_synthetic_dataset(&grid.data)?;
    let images: Vec<_> = train.iter().map(|s| s.image.clone()).collect();
    let mut encoders: HashMap<u64, Checkpoint> = HashMap::new();
    run_ablation_with(grid, |cell, seed| {
        let (model_cfg, cfg) = grid.cell_configs(cell, seed);
        let init = if cell.pretrain {
            if !encoders.contains_key(&seed) {
                let pcfg = TrainConfig {
                    epochs: grid.pretrain_epochs.max(1),
                    ..cfg
                };
                let out = pretrain(&images, model_cfg.encoder, &grid.pretrain_config, &pcfg, &PretrainRun::default())?;
                encoders.insert(seed, Checkpoint::from_params(out.meta, &out.model));
            }
            encoders.get(&seed)
        } else {
            None
        };
        let partial = corrupt_to_partial_labels(&train, grid.data.num_classes, cell.flip_prob, seed)?;
        let out = finetune(&partial, &test, init, model_cfg, &cfg, &FinetuneOptions::default())?;
        let report = disambiguation_report(&out.store, &partial, &out.snapshots)?;
        Ok(CellResult {
            accuracy: evaluate(&out.model, &test)?.accuracy,
            confidence_correctness: report.confidence_correctness,
            top2_coverage: report.top2_coverage,
        })
    })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &str) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Validation(e.to_string()))?;
    }
    let body = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
    let mut bytes = format!("{header}\n").into_bytes();
    bytes.extend(body);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_runs_csv(path: &Path, rows: &[RunRow]) -> Result<()> {
    write_csv(path, rows, RUNS_HEADER)
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    write_csv(path, rows, SUMMARY_HEADER)
}

pub fn read_runs_csv(path: &Path) -> Result<Vec<RunRow>> {
    let parse = |e: csv::Error| Error::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut r = csv::Reader::from_path(path).map_err(parse)?;
    let header = r.headers().map_err(parse)?.iter().collect::<Vec<_>>().join(",");
    if header != RUNS_HEADER {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            msg: format!("unexpected header {header:?}"),
        });
    }
    r.deserialize().collect::<std::result::Result<_, _>>().map_err(parse)
}
