//! Subcommands of the `choicelab` binary.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use choicelab::evaluation::{accuracy, ace, calibration_bins, ce_loss, delta_u, DEFAULT_ACE_BINS, DELTA_U_SAMPLES};
use choicelab::rng::{derive_seed, seeded};
use choicelab::ChoiceDataset;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use crate::config::{ExperimentConfig, PIPELINES};
use crate::models::{fit, write_em_trace, Predictor};
use crate::output::{write_outcome, Manifest};
use crate::pipelines::{self, Artifact};

#[derive(Debug, Parser)]
#[command(name = "choicelab", version, about = "Synthetic and real-data choice modelling experiments")]
pub struct Cli {
    /// Increase log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw the datasets and true models of a pipeline without fitting anything.
    Generate(GenerateArgs),
    /// Fit one configured method on a dataset file.
    Train(TrainArgs),
    /// Score a saved model (or the uniform baseline) on a dataset file.
    Evaluate(EvaluateArgs),
    /// Run a whole experiment pipeline and write its tables.
    Reproduce(ReproduceArgs),
    /// Summarize a dataset, model or run manifest.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Configuration file; defaults to the built-in one for the pipeline.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trials: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self, pipeline: Option<&str>) -> Result<ExperimentConfig> {
        let mut config = match (&self.config, pipeline) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(id)) => ExperimentConfig::builtin(id)?,
            (None, None) => bail!("give a pipeline name or --config"),
        };
        if let Some(id) = pipeline {
            if config.pipeline.id() != id {
                bail!("config describes pipeline {:?}, not {id:?}", config.pipeline.id());
            }
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(trials) = self.trials {
            config.trials = trials;
        }
        config.validate()?;
        Ok(config)
    }
}

fn output_dir(out: &Option<PathBuf>, name: &str) -> PathBuf {
    out.clone().unwrap_or_else(|| {
        let root = std::env::var_os("CHOICELAB_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(name)
    })
}

fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Built-in pipeline name.
    #[arg(value_parser = clap::builder::PossibleValuesParser::new(PIPELINES))]
    pub pipeline: Option<String>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Raw data file for the real-data pipeline.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

pub fn generate(args: &GenerateArgs) -> Result<()> {
    let config = args.config.resolve(args.pipeline.as_deref())?;
    let dir = output_dir(&args.out, &format!("data-{}-seed{}", config.pipeline.id(), config.seed));
    let seeds = pipelines::trial_seeds(&config);
    let mut manifest = Manifest::new(&command_line(), &config, seeds.clone());
    for (t, &seed) in seeds.iter().enumerate() {
        for (name, artifact) in pipelines::trial_artifacts(&config, seed, args.data.clone())? {
            let rel = format!("trial{t}/{name}");
            let path = dir.join(&rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            match artifact {
                Artifact::Dataset(ds) => ds.save(&path)?,
                Artifact::Model(m) => m.save(&path)?,
            }
            manifest.files.push(rel);
        }
    }
    manifest.write(&dir)?;
    println!("{}", dir.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Built-in pipeline whose method list to use.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PIPELINES), required_unless_present = "config")]
    pub pipeline: Option<String>,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Method label as it appears in the config.
    #[arg(long)]
    pub method: String,
    #[arg(long)]
    pub train: PathBuf,
    /// Validation set for early stopping; the training set when omitted.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Neural model whose parameters seed the new one.
    #[arg(long)]
    pub warm_start: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn load_dataset(path: &Path) -> Result<ChoiceDataset> {
    let ds = ChoiceDataset::load(path).with_context(|| format!("loading dataset {}", path.display()))?;
    let violations = ds.validate();
    if let Some(v) = violations.first() {
        bail!("{} has {} invalid observations, first: {}", path.display(), violations.len(), v.message);
    }
    Ok(ds)
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let config = args.config.resolve(args.pipeline.as_deref())?;
    let method = config.method(&args.method)?;
    let train_set = load_dataset(&args.train)?;
    let val_set = match &args.val {
        Some(p) => load_dataset(p)?,
        None => train_set.clone(),
    };
    let donor = match &args.warm_start {
        Some(p) => match Predictor::load(p)? {
            Predictor::Neural(m) => Some(m),
            other => bail!("warm start needs a neural model, {} is {}", p.display(), other.kind()),
        },
        None => None,
    };
    let seed = derive_seed(config.seed, 0);
    let fitted = fit(&method.model, &train_set, &val_set, &config.train, seed, donor.as_ref())?;
    let dir = output_dir(&args.out, &format!("train-{}", crate::output::sanitize(&method.label)));
    std::fs::create_dir_all(&dir)?;
    fitted.predictor.save(&dir.join("model.json"))?;
    let mut files = vec!["model.json".to_string()];
    if let Some(h) = &fitted.history {
        h.write_csv(&dir.join("history.csv"))?;
        files.push("history.csv".into());
    }
    if let Some(trace) = &fitted.em_trace {
        write_em_trace(trace, &dir.join("em_trace.csv"))?;
        files.push("em_trace.csv".into());
    }
    for w in &fitted.warnings {
        log::warn!("{w}");
    }
    let summary = json!({
        "method": method.label,
        "kind": fitted.predictor.kind(),
        "seed": seed,
        "train_ce": fitted.predictor.cross_entropy(&train_set)?,
        "val_ce": fitted.predictor.cross_entropy(&val_set)?,
        "best_epoch": fitted.history.as_ref().map(|h| h.best_epoch),
        "em_iterations": fitted.em_trace.as_ref().map(Vec::len),
        "converged": fitted.converged,
        "max_log_likelihood_drop": fitted.max_likelihood_drop(),
        "warnings": fitted.warnings,
        "warm_start": args.warm_start.as_ref().map(|p| p.display().to_string()),
    });
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    files.push("summary.json".into());
    let mut manifest = Manifest::new(&command_line(), &config, vec![seed]);
    manifest.files = files;
    manifest.warm_start = args.warm_start.as_ref().map(|p| p.display().to_string());
    manifest.write(&dir)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Ce,
    Accuracy,
    Ace,
    Calibration,
    DeltaU,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub test: PathBuf,
    /// Saved model, including true models written by `generate`.
    #[arg(long, required_unless_present = "uniform", conflicts_with = "uniform")]
    pub model: Option<PathBuf>,
    /// Score the uniform-over-assortment baseline instead of a model.
    #[arg(long)]
    pub uniform: bool,
    #[arg(long, value_delimiter = ',', default_values = ["ce", "accuracy", "ace"])]
    pub metrics: Vec<Metric>,
    #[arg(long, default_value_t = DEFAULT_ACE_BINS)]
    pub bins: usize,
    /// Directory for calibration and utility-shift files.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let test = load_dataset(&args.test)?;
    let predictor = match &args.model {
        Some(p) => Predictor::load(p)?,
        None => Predictor::Uniform,
    };
    let preds = predictor.predict(&test)?;
    let obs = &test.observations;
    let mut result = Map::new();
    result.insert("model".into(), Value::from(predictor.kind()));
    result.insert("observations".into(), Value::from(obs.len()));
    let needs_dir = args.metrics.iter().any(|m| matches!(m, Metric::Calibration | Metric::DeltaU));
    let dir = needs_dir.then(|| output_dir(&args.out, "evaluate"));
    if let Some(d) = &dir {
        std::fs::create_dir_all(d)?;
    }
    for metric in &args.metrics {
        match metric {
            Metric::Ce => {
                let ce = ce_loss(&preds, obs)?;
                result.insert("ce".into(), Value::from(ce.mean));
                result.insert("clamped".into(), Value::from(ce.clamped));
            }
            Metric::Accuracy => {
                result.insert("accuracy".into(), Value::from(accuracy(&preds, obs)?));
            }
            Metric::Ace => {
                result.insert("ace".into(), Value::from(ace(&preds, obs, args.bins)?));
            }
            Metric::Calibration => {
                let path = dir.as_ref().expect("dir set").join("calibration.csv");
                calibration_bins(&preds, obs, args.bins)?.write_csv(&path)?;
                result.insert("calibration".into(), Value::from(path.display().to_string()));
            }
            Metric::DeltaU => {
                let Predictor::Neural(m) = &predictor else {
                    bail!("utility shift needs a neural model, got {}", predictor.kind());
                };
                let h = delta_u(m, &test, DELTA_U_SAMPLES, &mut seeded(args.seed))?;
                let path = dir.as_ref().expect("dir set").join("delta_u.json");
                std::fs::write(&path, serde_json::to_string(&h)?)?;
                result.insert("delta_u".into(), Value::from(path.display().to_string()));
            }
        }
    }
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    /// Built-in pipeline name; optional with --config.
    #[arg(value_parser = clap::builder::PossibleValuesParser::new(PIPELINES), required_unless_present = "config")]
    pub pipeline: Option<String>,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Worker threads; all cores when omitted.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Raw data file for the real-data pipeline.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

/// Runs the pipeline and returns the number of failed cells.
pub fn reproduce(args: &ReproduceArgs) -> Result<usize> {
    let config = args.config.resolve(args.pipeline.as_deref())?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(args.jobs.unwrap_or(0)).build()?;
    let outcome = pool.install(|| pipelines::run(&config, args.data.clone()))?;
    let dir = output_dir(&args.out, &format!("{}-seed{}", config.pipeline.id(), config.seed));
    write_outcome(&dir, &command_line(), &config, &outcome)?;
    print!("{}", crate::output::markdown_table(&outcome.table));
    println!("results in {}", dir.display());
    Ok(outcome.failed())
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

pub fn inspect(args: &InspectArgs) -> Result<()> {
    let path = &args.path;
    let summary = if path.extension().is_some_and(|e| e == "jsonl") {
        let ds = ChoiceDataset::load(path).with_context(|| format!("loading dataset {}", path.display()))?;
        let mut shares = vec![0usize; ds.n()];
        for o in &ds.observations {
            shares[o.choice] += 1;
        }
        let mean_size = ds.observations.iter().map(|o| o.assortment.len()).sum::<usize>() as f64 / ds.len().max(1) as f64;
        json!({
            "type": "dataset",
            "observations": ds.len(),
            "products": ds.n(),
            "no_purchase": ds.universe.no_purchase(),
            "product_dim": ds.product_dim(),
            "customer_dim": ds.customer_dim(),
            "mean_assortment_size": mean_size,
            "choice_counts": shares,
            "violations": ds.validate().len(),
        })
    } else {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let value: Value = serde_json::from_str(&text).with_context(|| format!("{} is not JSON", path.display()))?;
        if value.get("manifest_version").is_some() {
            json!({
                "type": "manifest",
                "pipeline": value["pipeline"],
                "seed": value["seed"],
                "trials": value["trials"],
                "config_sha256": value["config_sha256"],
                "failed_cells": value["failed_cells"],
                "files": value["files"].as_array().map_or(0, Vec::len),
            })
        } else {
            let p = Predictor::load(path)?;
            let (products, parameters) = match &p {
                Predictor::Neural(m) => (Some(m.n()), m.graph().param_count()),
                Predictor::Classical(m) => (Some(choicelab::classical::ChoiceModel::n(m)), classical_params(m)),
                Predictor::FeatureMnl(m) => (None, m.beta.len()),
                Predictor::Uniform => (None, 0),
            };
            json!({ "type": "model", "kind": p.kind(), "products": products, "parameters": parameters })
        }
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn classical_params(m: &choicelab::classical::ClassicalModel) -> usize {
    use choicelab::classical::{ChoiceModel, ClassicalModel};
    let n = m.n();
    match m {
        ClassicalModel::Mnl(_) => n,
        ClassicalModel::Mccm(_) => n + n * n,
        ClassicalModel::Np(np) => np.weights().len() * (n + 1),
    }
}
