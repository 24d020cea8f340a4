//! Fitting any configured method and scoring the result on a dataset.

use std::path::Path;

use anyhow::{bail, Context, Result};
use choicelab::classical::{ChoiceModel, ClassicalModel};
use choicelab::estimators::{fit_mccm_em, fit_mnl_f_mle, fit_mnl_mle, EmIteration, EmOptions, FeatureMnl, MleOptions};
use choicelab::evaluation::ce_loss;
use choicelab::neural::{train, warm_start_transplant, NeuralModel, TrainHistory};
use choicelab::rng::seeded;
use choicelab::{ChoiceDataset, ProbVector};
use serde::{Deserialize, Serialize};

use crate::config::{MethodSpec, TrainSettings};

const FEATURE_MNL_FORMAT_VERSION: u32 = 1;

/// Anything that can assign choice probabilities to a dataset.
#[derive(Debug, Clone)]
pub enum Predictor {
    Neural(NeuralModel),
    Classical(ClassicalModel),
    FeatureMnl(FeatureMnl),
    Uniform,
}

#[derive(Serialize, Deserialize)]
struct FeatureMnlFile {
    format_version: u32,
    kind: String,
    #[serde(flatten)]
    model: FeatureMnl,
}

impl Predictor {
    pub fn predict(&self, dataset: &ChoiceDataset) -> Result<Vec<ProbVector>> {
        match self {
            Self::Neural(m) => Ok(m.predict(dataset)?),
            Self::Classical(m) => {
                if m.n() != dataset.n() {
                    bail!("model has {} products, dataset {}", m.n(), dataset.n());
                }
                dataset.observations.iter().map(|o| Ok(m.probs(&o.assortment)?)).collect()
            }
            Self::FeatureMnl(m) => Ok(m.predict(dataset)?),
            Self::Uniform => dataset
                .observations
                .iter()
                .map(|o| {
                    let s = &o.assortment;
                    let p = 1.0 / s.len() as f64;
                    let values = (0..s.n()).map(|i| if s.contains(i) { p } else { 0.0 }).collect();
                    Ok(ProbVector::new(values, s)?)
                })
                .collect(),
        }
    }

    pub fn cross_entropy(&self, dataset: &ChoiceDataset) -> Result<f64> {
        Ok(ce_loss(&self.predict(dataset)?, &dataset.observations)?.mean)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Neural(m) => m.architecture().label(),
            Self::Classical(m) => m.kind(),
            Self::FeatureMnl(_) => "feature_mnl",
            Self::Uniform => "uniform",
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            Self::Neural(m) => m.save(path)?,
            Self::Classical(m) => m.save(path)?,
            Self::FeatureMnl(m) => {
                let file = FeatureMnlFile { format_version: FEATURE_MNL_FORMAT_VERSION, kind: "feature_mnl".into(), model: m.clone() };
                std::fs::write(path, serde_json::to_string(&file)?)?;
            }
            Self::Uniform => bail!("the uniform baseline has no parameters to save"),
        }
        Ok(())
    }

    /// Loads any model file written by [`Predictor::save`], dispatching on its content.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading model {}", path.display()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("model file {} is not JSON", path.display()))?;
        if value.get("architecture").is_some() {
            return Ok(Self::Neural(NeuralModel::from_json(&text, path)?));
        }
        if value.get("kind").and_then(|k| k.as_str()) == Some("feature_mnl") {
            let file: FeatureMnlFile = serde_json::from_value(value)?;
            if file.format_version != FEATURE_MNL_FORMAT_VERSION {
                bail!("unsupported format version {} in {}", file.format_version, path.display());
            }
            return Ok(Self::FeatureMnl(file.model));
        }
        Ok(Self::Classical(ClassicalModel::from_json(&text)?))
    }
}

/// A fitted method plus whatever its estimator recorded along the way.
#[derive(Debug, Clone)]
pub struct Fit {
    pub predictor: Predictor,
    pub history: Option<TrainHistory>,
    pub em_trace: Option<Vec<EmIteration>>,
    pub converged: Option<bool>,
    pub warnings: Vec<String>,
}

impl Fit {
    /// Largest drop in log-likelihood between consecutive EM iterations (0 when monotone).
    pub fn max_likelihood_drop(&self) -> Option<f64> {
        self.em_trace.as_ref().map(|t| {
            t.windows(2).map(|w| w[0].log_likelihood - w[1].log_likelihood).fold(0.0, f64::max)
        })
    }
}

/// Fits `spec` on `train`, using `val` for early stopping of neural methods. A donor
/// network, when given, is transplanted into the fresh initialization.
pub fn fit(
    spec: &MethodSpec,
    train_set: &ChoiceDataset,
    val_set: &ChoiceDataset,
    settings: &TrainSettings,
    seed: u64,
    donor: Option<&NeuralModel>,
) -> Result<Fit> {
    if donor.is_some() && !spec.is_neural() {
        bail!("warm start needs a neural method");
    }
    let plain = |predictor, converged, warnings| Fit { predictor, history: None, em_trace: None, converged, warnings };
    match spec {
        MethodSpec::MnlMle => {
            let f = fit_mnl_mle(train_set, &MleOptions::default())?;
            Ok(plain(Predictor::Classical(ClassicalModel::Mnl(f.model)), Some(f.converged), f.warnings))
        }
        MethodSpec::MnlFMle => {
            let f = fit_mnl_f_mle(train_set, &MleOptions::default())?;
            Ok(plain(Predictor::FeatureMnl(f.model), Some(f.converged), f.warnings))
        }
        MethodSpec::MccmEm { tolerance, max_iterations, change } => {
            let options = EmOptions { init_seed: seed, tolerance: *tolerance, max_iterations: *max_iterations, change: *change };
            let f = fit_mccm_em(train_set, &options)?;
            Ok(Fit {
                predictor: Predictor::Classical(ClassicalModel::Mccm(f.model)),
                history: None,
                em_trace: Some(f.trace),
                converged: Some(f.converged),
                warnings: f.warnings,
            })
        }
        _ => {
            let arch = spec.architecture(train_set.n(), train_set.product_dim(), train_set.customer_dim())?;
            let mut model = NeuralModel::new(arch, &mut seeded(seed))?;
            if let Some(old) = donor {
                warm_start_transplant(old, &mut model)?;
            }
            let history = train(&mut model, train_set, val_set, &settings.with_seed(seed))?;
            Ok(Fit { predictor: Predictor::Neural(model), history: Some(history), em_trace: None, converged: None, warnings: Vec::new() })
        }
    }
}

/// Writes an EM trace as CSV: iteration, log_likelihood, mean_change.
pub fn write_em_trace(trace: &[EmIteration], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "log_likelihood", "mean_change"])?;
    for it in trace {
        w.write_record([it.iteration.to_string(), it.log_likelihood.to_string(), it.mean_change.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use choicelab::classical::MnlModel;
    use choicelab::{Assortment, ChoiceObservation, ProductUniverse};

    fn toy() -> ChoiceDataset {
        let obs = |c: usize, m: &[usize]| ChoiceObservation::new(c, Assortment::new(m.to_vec(), 3).unwrap());
        ChoiceDataset::new(ProductUniverse::new(3, None).unwrap(), vec![obs(0, &[0, 1]), obs(2, &[0, 1, 2]), obs(1, &[1])])
    }

    #[test]
    fn uniform_ce_is_mean_log_size() {
        let ce = Predictor::Uniform.cross_entropy(&toy()).unwrap();
        assert!((ce - (2f64.ln() + 3f64.ln()) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn classical_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let p = Predictor::Classical(ClassicalModel::Mnl(MnlModel::new(vec![0.1, 0.2, -0.3]).unwrap()));
        p.save(&path).unwrap();
        let q = Predictor::load(&path).unwrap();
        assert_eq!(p.cross_entropy(&toy()).unwrap(), q.cross_entropy(&toy()).unwrap());
    }

    #[test]
    fn feature_mnl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.json");
        let p = Predictor::FeatureMnl(FeatureMnl { beta: vec![0.5], customer_dim: 0, product_dim: 1 });
        p.save(&path).unwrap();
        assert!(matches!(Predictor::load(&path).unwrap(), Predictor::FeatureMnl(m) if m.beta == vec![0.5]));
    }

    #[test]
    fn size_mismatch_is_reported() {
        let p = Predictor::Classical(ClassicalModel::Mnl(MnlModel::uniform(4)));
        assert!(p.predict(&toy()).is_err());
    }
}
