//! Experiment pipelines. Each one draws its data per trial, fits every configured
//! method as an independent job on the rayon pool and returns all cells plus an
//! aggregated table.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use choicelab::classical::{oracle_ce, ChoiceModel, ClassicalModel, MccmModel};
use choicelab::datagen::{
    gen_assortments, gen_feature_models, gen_mccm_clustered, gen_mccm_plain, gen_mnl, gen_np, sample_dataset,
    shrink_mccm, AssortmentDistribution, AssortmentKind, FeatureModelConfig, FeatureModelKind, MccmGenConfig,
};
use choicelab::estimators::EmIteration;
use choicelab::evaluation::{accuracy, ace, calibration_bins, ce_loss, delta_u, CalibrationBins, DeltaUHistogram, DELTA_U_SAMPLES};
use choicelab::ingest::{load_expedia, load_hotel, load_swissmetro, FeatureScaling, IngestReport};
use choicelab::neural::TrainHistory;
use choicelab::rng::{derive_seed, seeded};
use choicelab::{ChoiceDataset, FeatureTable, ProductUniverse};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, Generator, GridConfig, Method, OodConfig, PipelineConfig, RealSource, RealdataConfig, WarmstartConfig};
use crate::models::{fit, Fit, Predictor};

pub const ORACLE: &str = "Oracle";
pub const UNIFORM: &str = "Uniform";

/// One measured number: a method (row) at a training size on a column in one trial.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub trial: usize,
    pub seed: u64,
    pub row: String,
    pub samples: Option<usize>,
    pub column: String,
    pub value: Option<f64>,
    pub error: Option<String>,
}

/// Mean and sample standard deviation of a cell over the successful trials.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub row: String,
    pub samples: Option<usize>,
    pub column: String,
    pub mean: f64,
    pub std: f64,
    pub trials: usize,
    pub failed: usize,
}

#[derive(Debug, Clone)]
pub struct EmRun {
    pub key: String,
    pub iterations: usize,
    pub converged: bool,
    /// Largest decrease of the log-likelihood between consecutive iterations.
    pub max_drop: f64,
    pub trace: Vec<EmIteration>,
}

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub pipeline: String,
    pub trial_seeds: Vec<u64>,
    pub cells: Vec<Cell>,
    pub table: Vec<TableRow>,
    pub em_runs: Vec<EmRun>,
    pub histories: Vec<(String, TrainHistory)>,
    pub calibration: Vec<(String, CalibrationBins)>,
    pub delta_u: Vec<(String, DeltaUHistogram)>,
    pub ingest: Option<IngestReport>,
}

impl Outcome {
    pub fn failed(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }

    pub fn lookup(&self, row: &str, samples: Option<usize>, column: &str) -> Option<&TableRow> {
        self.table.iter().find(|t| t.row == row && t.samples == samples && t.column == column)
    }

    /// Per-trial values of one cell, in trial order.
    pub fn values(&self, row: &str, samples: Option<usize>, column: &str) -> Vec<Option<f64>> {
        self.cells
            .iter()
            .filter(|c| c.row == row && c.samples == samples && c.column == column)
            .map(|c| c.value)
            .collect()
    }
}

pub fn trial_seeds(config: &ExperimentConfig) -> Vec<u64> {
    (0..config.trials).map(|t| derive_seed(config.seed, t as u64)).collect()
}

fn aggregate(cells: &[Cell]) -> Vec<TableRow> {
    let mut order: Vec<(String, Option<usize>, String)> = Vec::new();
    type Key = (String, Option<usize>, String);
    let mut groups: BTreeMap<Key, (Vec<f64>, usize)> = BTreeMap::new();
    for c in cells {
        let key = (c.row.clone(), c.samples, c.column.clone());
        let entry = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (Vec::new(), 0)
        });
        match c.value {
            Some(v) => entry.0.push(v),
            None => entry.1 += 1,
        }
    }
    order
        .into_iter()
        .map(|key| {
            let (values, failed) = &groups[&key];
            let k = values.len() as f64;
            let mean = if values.is_empty() { f64::NAN } else { values.iter().sum::<f64>() / k };
            let std = if values.len() < 2 {
                0.0
            } else {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
            };
            TableRow { row: key.0, samples: key.1, column: key.2, mean, std, trials: values.len(), failed: *failed }
        })
        .collect()
}

fn cell(trial: usize, seed: u64, row: &str, samples: Option<usize>, column: &str, value: Result<f64>) -> Cell {
    let (value, error) = match value {
        Ok(v) => (Some(v), None),
        Err(e) => {
            log::warn!("trial {trial} {row} / {column}: {e:#}");
            (None, Some(format!("{e:#}")))
        }
    };
    Cell { trial, seed, row: row.to_string(), samples, column: column.to_string(), value, error }
}

fn prefix(ds: &ChoiceDataset, m: usize) -> ChoiceDataset {
    ds.with_observations(ds.observations[..m].to_vec())
}

/// Runs the configured pipeline on the current rayon pool. `data` overrides the
/// real-data file path.
pub fn run(config: &ExperimentConfig, data: Option<PathBuf>) -> Result<Outcome> {
    let mut outcome = match &config.pipeline {
        PipelineConfig::Table1(g) | PipelineConfig::Table2(g) | PipelineConfig::Custom(g) => run_grid(config, g)?,
        PipelineConfig::Table6(o) => run_ood(config, o)?,
        PipelineConfig::Warmstart(w) => run_warmstart(config, w)?,
        PipelineConfig::Realdata(r) => run_realdata(config, r, data)?,
    };
    outcome.pipeline = config.pipeline.id().to_string();
    outcome.trial_seeds = trial_seeds(config);
    outcome.table = aggregate(&outcome.cells);
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// Ground truths and synthetic datasets

/// A true model with the static product features it was generated from, if any.
#[derive(Debug, Clone)]
pub struct Truth {
    pub model: ClassicalModel,
    pub features: Option<FeatureTable>,
}

pub fn generate_truth(generator: &Generator, rng: &mut choicelab::rng::ChoiceRng) -> Result<Truth> {
    let plain = |model| Truth { model, features: None };
    Ok(match *generator {
        Generator::Mnl { n } => plain(ClassicalModel::Mnl(gen_mnl(n, rng)?)),
        Generator::Mccm { n, sigma, c_num } => plain(ClassicalModel::Mccm(gen_mccm_clustered(&MccmGenConfig { n, sigma, c_num }, rng)?)),
        Generator::MccmPlain { n } => plain(ClassicalModel::Mccm(gen_mccm_plain(n, rng)?)),
        Generator::Np { n, n_perm } => plain(ClassicalModel::Np(gen_np(n, n_perm, rng)?)),
        Generator::FeatureMnl { n, d } | Generator::FeatureMccm { n, d, .. } => {
            let (kind, arrival) = match *generator {
                Generator::FeatureMccm { arrival, .. } => (FeatureModelKind::FeatureMccm, arrival),
                _ => (FeatureModelKind::FeatureMnl, Default::default()),
            };
            let fm = gen_feature_models(&FeatureModelConfig { n, d, kind, arrival }, rng)?;
            Truth { model: fm.model, features: Some(fm.features) }
        }
    })
}

fn draw(truth: &Truth, dist: &AssortmentDistribution, m: usize, rng: &mut choicelab::rng::ChoiceRng) -> Result<ChoiceDataset> {
    let s = gen_assortments(dist, m, rng)?;
    let mut ds = sample_dataset(&truth.model, &s, rng)?;
    ds.product_features = truth.features.clone();
    Ok(ds)
}

/// Data for one truth column of a grid trial; smaller training sets are prefixes of `train`.
#[derive(Debug, Clone)]
pub struct GridData {
    pub label: String,
    pub truth: Truth,
    pub train: ChoiceDataset,
    pub val: ChoiceDataset,
    pub test: ChoiceDataset,
}

pub fn grid_data(grid: &GridConfig, trial_seed: u64) -> Result<Vec<GridData>> {
    let largest = grid.sizes.iter().copied().max().unwrap_or(0);
    grid.truths
        .par_iter()
        .enumerate()
        .map(|(c, spec)| {
            let mut rng = seeded(derive_seed(trial_seed, c as u64));
            let truth = generate_truth(&spec.model, &mut rng)?;
            let dist = AssortmentDistribution { kind: grid.assortments, n: spec.model.n(), no_purchase: None };
            let train = draw(&truth, &dist, largest, &mut rng)?;
            let val = draw(&truth, &dist, grid.validation, &mut rng)?;
            let test = draw(&truth, &dist, grid.test, &mut rng)?;
            Ok(GridData { label: spec.label.clone(), truth, train, val, test })
        })
        .collect()
}

fn job_seed(trial_seed: u64, parts: &[usize]) -> u64 {
    parts.iter().fold(derive_seed(trial_seed, u64::MAX), |s, &p| derive_seed(s, p as u64))
}

struct FitRecord {
    key: String,
    fit: Fit,
}

fn record(outcome: &mut Outcome, rec: FitRecord) {
    if let Some(h) = rec.fit.history {
        outcome.histories.push((rec.key.clone(), h));
    }
    if let Some(trace) = rec.fit.em_trace {
        let max_drop = trace.windows(2).map(|w| w[0].log_likelihood - w[1].log_likelihood).fold(0.0, f64::max);
        outcome.em_runs.push(EmRun {
            key: rec.key,
            iterations: trace.len(),
            converged: rec.fit.converged.unwrap_or(false),
            max_drop,
            trace,
        });
    }
}

fn run_grid(config: &ExperimentConfig, grid: &GridConfig) -> Result<Outcome> {
    let seeds = trial_seeds(config);
    let mut outcome = Outcome::default();
    for (trial, &seed) in seeds.iter().enumerate() {
        let data = grid_data(grid, seed)?;
        for d in &data {
            let oracle = oracle_ce(&d.truth.model, &d.test.observations).map_err(Into::into);
            outcome.cells.push(cell(trial, seed, ORACLE, None, &d.label, oracle));
            outcome.cells.push(cell(trial, seed, UNIFORM, None, &d.label, Predictor::Uniform.cross_entropy(&d.test)));
        }
        let mut jobs = Vec::new();
        for (mi, method) in grid.methods.iter().enumerate() {
            for (si, &size) in grid.sizes.iter().enumerate() {
                for (ci, d) in data.iter().enumerate() {
                    if method.applies(&d.label, size) {
                        jobs.push((mi, method, si, size, ci, d));
                    }
                }
            }
        }
        let results: Vec<(Cell, Option<FitRecord>)> = jobs
            .par_iter()
            .map(|&(mi, method, si, size, ci, d)| {
                let key = format!("trial{trial}/{}/{}/{size}", d.label, method.label);
                log::info!("fitting {key}");
                let fitted = fit(&method.model, &prefix(&d.train, size), &d.val, &config.train, job_seed(seed, &[ci, mi, si]), None)
                    .with_context(|| format!("fitting {key}"));
                match fitted {
                    Ok(f) => {
                        let ce = f.predictor.cross_entropy(&d.test);
                        (cell(trial, seed, &method.label, Some(size), &d.label, ce), Some(FitRecord { key, fit: f }))
                    }
                    Err(e) => (cell(trial, seed, &method.label, Some(size), &d.label, Err(e)), None),
                }
            })
            .collect();
        for (c, rec) in results {
            outcome.cells.push(c);
            if let Some(rec) = rec {
                record(&mut outcome, rec);
            }
        }
    }
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// Out-of-domain assortment study

#[derive(Debug, Clone)]
pub struct OodData {
    pub truth: Truth,
    /// Training label with its training and validation sets.
    pub trains: Vec<(String, ChoiceDataset, ChoiceDataset)>,
    pub tests: Vec<(String, ChoiceDataset)>,
}

/// Equal shares of every source, remainder to the first ones, in shuffled order.
fn mix(sources: &[&ChoiceDataset], total: usize, seed: u64) -> ChoiceDataset {
    let k = sources.len();
    let mut observations = Vec::with_capacity(total);
    for (j, src) in sources.iter().enumerate() {
        let share = total / k + usize::from(j < total % k);
        observations.extend_from_slice(&src.observations[..share]);
    }
    observations.shuffle(&mut seeded(seed));
    sources[0].with_observations(observations)
}

pub fn ood_data(ood: &OodConfig, trial_seed: u64) -> Result<OodData> {
    let truth = generate_truth(&ood.truth.model, &mut seeded(derive_seed(trial_seed, 0)))?;
    let n = ood.truth.model.n();
    let sets: Vec<(ChoiceDataset, ChoiceDataset, ChoiceDataset)> = ood
        .kinds
        .par_iter()
        .enumerate()
        .map(|(k, &kind)| {
            let mut rng = seeded(derive_seed(trial_seed, 1 + k as u64));
            let dist = AssortmentDistribution { kind, n, no_purchase: None };
            Ok((draw(&truth, &dist, ood.train_size, &mut rng)?, draw(&truth, &dist, ood.validation, &mut rng)?, draw(&truth, &dist, ood.test, &mut rng)?))
        })
        .collect::<Result<_>>()?;
    let mut trains: Vec<(String, ChoiceDataset, ChoiceDataset)> =
        ood.kinds.iter().zip(&sets).map(|(k, (tr, va, _))| (k.label().to_string(), tr.clone(), va.clone())).collect();
    if ood.mix {
        let tr: Vec<&ChoiceDataset> = sets.iter().map(|s| &s.0).collect();
        let va: Vec<&ChoiceDataset> = sets.iter().map(|s| &s.1).collect();
        trains.push((
            "Mix".to_string(),
            mix(&tr, ood.train_size, derive_seed(trial_seed, 100)),
            mix(&va, ood.validation, derive_seed(trial_seed, 101)),
        ));
    }
    let tests = ood.kinds.iter().zip(sets).map(|(k, (_, _, te))| (k.label().to_string(), te)).collect();
    Ok(OodData { truth, trains, tests })
}

fn run_ood(config: &ExperimentConfig, ood: &OodConfig) -> Result<Outcome> {
    let mut outcome = Outcome::default();
    for (trial, seed) in trial_seeds(config).into_iter().enumerate() {
        let data = ood_data(ood, seed)?;
        for (label, test) in &data.tests {
            let oracle = oracle_ce(&data.truth.model, &test.observations).map_err(Into::into);
            outcome.cells.push(cell(trial, seed, ORACLE, None, label, oracle));
        }
        let results: Vec<(Vec<Cell>, Option<FitRecord>)> = data
            .trains
            .par_iter()
            .enumerate()
            .map(|(k, (label, train, val))| {
                let key = format!("trial{trial}/{}/{label}", ood.method.label);
                log::info!("fitting {key}");
                let row = label.clone();
                match fit(&ood.method.model, train, val, &config.train, job_seed(seed, &[k]), None).with_context(|| format!("fitting {key}")) {
                    Ok(f) => {
                        let cells = data
                            .tests
                            .iter()
                            .map(|(col, test)| cell(trial, seed, &row, Some(ood.train_size), col, f.predictor.cross_entropy(test)))
                            .collect();
                        (cells, Some(FitRecord { key, fit: f }))
                    }
                    Err(e) => {
                        let msg = format!("{e:#}");
                        let cells = data
                            .tests
                            .iter()
                            .map(|(col, _)| cell(trial, seed, &row, Some(ood.train_size), col, Err(anyhow::anyhow!(msg.clone()))))
                            .collect();
                        (cells, None)
                    }
                }
            })
            .collect();
        for (cells, rec) in results {
            outcome.cells.extend(cells);
            if let Some(rec) = rec {
                record(&mut outcome, rec);
            }
        }
    }
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// Warm start

#[derive(Debug, Clone)]
pub struct WarmData {
    pub augment_truth: MccmModel,
    pub shrink_truth: MccmModel,
    pub augment: ChoiceDataset,
    pub shrink: ChoiceDataset,
}

/// Product 0 is the no-purchase option and is offered in every assortment.
fn no_purchase_dataset(model: &MccmModel, m: usize, rng: &mut choicelab::rng::ChoiceRng) -> Result<ChoiceDataset> {
    let n = model.n();
    let dist = AssortmentDistribution { kind: AssortmentKind::D1, n, no_purchase: Some(0) };
    let s = gen_assortments(&dist, m, rng)?;
    let mut ds = sample_dataset(model, &s, rng)?;
    ds.universe = ProductUniverse::new(n, Some(0))?;
    ds.no_purchase_always_offered = true;
    Ok(ds)
}

pub fn warm_data(w: &WarmstartConfig, trial_seed: u64) -> Result<WarmData> {
    let mut rng = seeded(derive_seed(trial_seed, 0));
    let augment_truth = gen_mccm_plain(w.products, &mut rng)?;
    let keep: Vec<usize> = (0..w.kept).collect();
    let shrink_truth = shrink_mccm(&augment_truth, &keep, 0)?;
    let augment = no_purchase_dataset(&augment_truth, w.samples, &mut seeded(derive_seed(trial_seed, 1)))?;
    let shrink = no_purchase_dataset(&shrink_truth, w.samples, &mut seeded(derive_seed(trial_seed, 2)))?;
    Ok(WarmData { augment_truth, shrink_truth, augment, shrink })
}

pub const COLD: &str = "cold";
pub const WARM: &str = "warm";

fn run_warmstart(config: &ExperimentConfig, w: &WarmstartConfig) -> Result<Outcome> {
    let mut outcome = Outcome::default();
    for (trial, seed) in trial_seeds(config).into_iter().enumerate() {
        let data = warm_data(w, seed)?;
        let tail = |ds: &ChoiceDataset| ds.with_observations(ds.observations[ds.len() - w.validation..].to_vec());
        let (shrink_val, augment_val) = (tail(&data.shrink), tail(&data.augment));
        let per_method: Vec<(Vec<Cell>, Vec<FitRecord>)> = w
            .methods
            .par_iter()
            .enumerate()
            .map(|(mi, method)| {
                let key = format!("trial{trial}/{}/pretrain", method.label);
                log::info!("fitting {key}");
                let pre = fit(&method.model, &prefix(&data.shrink, w.pretrain_size), &shrink_val, &config.train, job_seed(seed, &[mi]), None);
                let pre = match pre {
                    Ok(f) => f,
                    Err(e) => {
                        let msg = format!("{e:#}");
                        let cells = w
                            .sizes
                            .iter()
                            .flat_map(|&m| [COLD, WARM].map(|s| (m, s)))
                            .map(|(m, s)| cell(trial, seed, &format!("{} {s}", method.label), Some(m), "val_ce", Err(anyhow::anyhow!(msg.clone()))))
                            .collect();
                        return (cells, Vec::new());
                    }
                };
                let donor = match &pre.predictor {
                    Predictor::Neural(m) => Some(m.clone()),
                    _ => None,
                };
                let pre_ce = pre.history.as_ref().map(|h| h.best_val_ce).context("pretraining produced no history");
                let mut cells = vec![cell(trial, seed, &format!("{} pretrain", method.label), Some(w.pretrain_size), "val_ce", pre_ce)];
                let mut records = vec![FitRecord { key, fit: pre }];
                let runs: Vec<(Cell, Option<FitRecord>)> = w
                    .sizes
                    .par_iter()
                    .enumerate()
                    .flat_map_iter(|(si, &m)| [(si, m, COLD), (si, m, WARM)])
                    .map(|(si, m, scheme)| {
                        let key = format!("trial{trial}/{}/{m}/{scheme}", method.label);
                        log::info!("fitting {key}");
                        // Cold and warm runs share the fresh initialization; only the transplant differs.
                        let fseed = job_seed(seed, &[mi, si, 1]);
                        let d = if scheme == WARM { donor.as_ref() } else { None };
                        let row = format!("{} {scheme}", method.label);
                        match fit(&method.model, &prefix(&data.augment, m), &augment_val, &config.train, fseed, d) {
                            Ok(f) => {
                                let v = f.history.as_ref().map(|h| h.best_val_ce).context("no history");
                                (cell(trial, seed, &row, Some(m), "val_ce", v), Some(FitRecord { key, fit: f }))
                            }
                            Err(e) => (cell(trial, seed, &row, Some(m), "val_ce", Err(e)), None),
                        }
                    })
                    .collect();
                for (c, r) in runs {
                    cells.push(c);
                    records.extend(r);
                }
                (cells, records)
            })
            .collect();
        for (cells, records) in per_method {
            outcome.cells.extend(cells);
            for r in records {
                record(&mut outcome, r);
            }
        }
    }
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// Real data

pub fn load_source(source: &RealSource, path: Option<PathBuf>) -> Result<(ChoiceDataset, IngestReport)> {
    let path = path
        .or_else(|| source.path().map(PathBuf::from))
        .with_context(|| format!("no {} file given; pass --data or set the path in the config", source.label()))?;
    let loaded = match source {
        RealSource::Swissmetro { .. } => load_swissmetro(&path),
        RealSource::Expedia { .. } => load_expedia(&path),
        RealSource::Hotel { hotel_id, rare_threshold, .. } => load_hotel(&path, hotel_id, *rare_threshold),
    };
    loaded.with_context(|| format!("ingesting {}", path.display()))
}

fn run_realdata(config: &ExperimentConfig, r: &RealdataConfig, data: Option<PathBuf>) -> Result<Outcome> {
    let (dataset, report) = load_source(&r.source, data)?;
    let violations = dataset.validate();
    if !violations.is_empty() {
        bail!("ingested dataset has {} violations, first: {}", violations.len(), violations[0].message);
    }
    let mut outcome = Outcome { ingest: Some(report), ..Default::default() };
    let [a, b, c] = r.split;
    for (trial, seed) in trial_seeds(config).into_iter().enumerate() {
        let (mut train, mut val, mut test) = dataset.split((a, b, c), seed)?;
        if r.standardize {
            let scaling = FeatureScaling::fit(&train);
            for ds in [&mut train, &mut val, &mut test] {
                scaling.apply(ds);
            }
        }
        let val = if val.is_empty() { train.clone() } else { val };
        let results: Vec<_> = r
            .methods
            .par_iter()
            .enumerate()
            .map(|(mi, method)| {
                let key = format!("trial{trial}/{}", method.label);
                log::info!("fitting {key}");
                let fseed = job_seed(seed, &[mi]);
                let fitted = fit(&method.model, &train, &val, &config.train, fseed, None).with_context(|| format!("fitting {key}"));
                evaluate_real(trial, seed, method, &key, fitted, &test, r.ace_bins, fseed)
            })
            .collect();
        for (cells, extras) in results {
            outcome.cells.extend(cells);
            if let Some((rec, bins, du)) = extras {
                outcome.calibration.push((rec.key.clone(), bins));
                if let Some(du) = du {
                    outcome.delta_u.push((rec.key.clone(), du));
                }
                record(&mut outcome, rec);
            }
        }
    }
    Ok(outcome)
}

type RealExtras = (FitRecord, CalibrationBins, Option<DeltaUHistogram>);

#[allow(clippy::too_many_arguments)]
fn evaluate_real(
    trial: usize,
    seed: u64,
    method: &Method,
    key: &str,
    fitted: Result<Fit>,
    test: &ChoiceDataset,
    bins: usize,
    fseed: u64,
) -> (Vec<Cell>, Option<RealExtras>) {
    let metrics = ["ce", "accuracy", "ace"];
    let scored = fitted.and_then(|f| {
        let preds = f.predictor.predict(test)?;
        let obs = &test.observations;
        let values = [ce_loss(&preds, obs)?.mean, accuracy(&preds, obs)?, ace(&preds, obs, bins)?];
        let calibration = calibration_bins(&preds, obs, bins)?;
        let du = match &f.predictor {
            Predictor::Neural(m) if m.graph().mark("latent").is_some() => {
                Some(delta_u(m, test, DELTA_U_SAMPLES, &mut seeded(derive_seed(fseed, 7)))?)
            }
            _ => None,
        };
        Ok((f, values, calibration, du))
    });
    match scored {
        Ok((f, values, calibration, du)) => {
            let cells = metrics.iter().zip(values).map(|(m, v)| cell(trial, seed, &method.label, None, m, Ok(v))).collect();
            (cells, Some((FitRecord { key: key.to_string(), fit: f }, calibration, du)))
        }
        Err(e) => {
            let msg = format!("{e:#}");
            let cells = metrics.iter().map(|m| cell(trial, seed, &method.label, None, m, Err(anyhow::anyhow!(msg.clone())))).collect();
            (cells, None)
        }
    }
}

/// Named datasets and true models of one trial, as written by `generate`.
pub enum Artifact {
    Dataset(ChoiceDataset),
    Model(ClassicalModel),
}

pub fn trial_artifacts(config: &ExperimentConfig, trial_seed: u64, data: Option<PathBuf>) -> Result<Vec<(String, Artifact)>> {
    let mut out = Vec::new();
    match &config.pipeline {
        PipelineConfig::Table1(g) | PipelineConfig::Table2(g) | PipelineConfig::Custom(g) => {
            for d in grid_data(g, trial_seed)? {
                let dir = d.label.clone();
                out.push((format!("{dir}/truth.json"), Artifact::Model(d.truth.model)));
                out.push((format!("{dir}/train.jsonl"), Artifact::Dataset(d.train)));
                out.push((format!("{dir}/val.jsonl"), Artifact::Dataset(d.val)));
                out.push((format!("{dir}/test.jsonl"), Artifact::Dataset(d.test)));
            }
        }
        PipelineConfig::Table6(o) => {
            let d = ood_data(o, trial_seed)?;
            out.push(("truth.json".into(), Artifact::Model(d.truth.model)));
            for (label, train, val) in d.trains {
                out.push((format!("train-{label}.jsonl"), Artifact::Dataset(train)));
                out.push((format!("val-{label}.jsonl"), Artifact::Dataset(val)));
            }
            for (label, test) in d.tests {
                out.push((format!("test-{label}.jsonl"), Artifact::Dataset(test)));
            }
        }
        PipelineConfig::Warmstart(w) => {
            let d = warm_data(w, trial_seed)?;
            out.push(("augment/truth.json".into(), Artifact::Model(ClassicalModel::Mccm(d.augment_truth))));
            out.push(("shrink/truth.json".into(), Artifact::Model(ClassicalModel::Mccm(d.shrink_truth))));
            out.push(("augment/data.jsonl".into(), Artifact::Dataset(d.augment)));
            out.push(("shrink/data.jsonl".into(), Artifact::Dataset(d.shrink)));
        }
        PipelineConfig::Realdata(r) => {
            let (ds, _) = load_source(&r.source, data)?;
            let [a, b, c] = r.split;
            let (train, val, test) = ds.split((a, b, c), trial_seed)?;
            out.push(("train.jsonl".into(), Artifact::Dataset(train)));
            out.push(("val.jsonl".into(), Artifact::Dataset(val)));
            out.push(("test.jsonl".into(), Artifact::Dataset(test)));
        }
    }
    Ok(out)
}
