//! Cross-entropy, accuracy, equal-mass calibration bins, adaptive calibration error and
//! the input/output utility shift of an assortment network.

use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{Assortment, ChoiceDataset, ChoiceObservation, ProbVector};
use crate::error::{Error, Result};
use crate::neural::NeuralModel;
use crate::rng::ChoiceRng;

/// Probabilities are clamped to at least this before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_ACE_BINS: usize = 25;
pub const DELTA_U_SAMPLES: usize = 200;
pub const DELTA_U_HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossEntropy {
    pub mean: f64,
    /// Observations whose chosen-product probability fell below [`PROB_FLOOR`].
    pub clamped: usize,
}

fn check_aligned(predictions: &[ProbVector], observations: &[ChoiceObservation]) -> Result<()> {
    if predictions.len() != observations.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} observations",
            predictions.len(),
            observations.len()
        )));
    }
    Ok(())
}

pub fn ce_loss(predictions: &[ProbVector], observations: &[ChoiceObservation]) -> Result<CrossEntropy> {
    check_aligned(predictions, observations)?;
    let mut clamped = 0;
    let total: f64 = predictions
        .iter()
        .zip(observations)
        .map(|(p, o)| {
            let v = p.get(o.choice);
            if v < PROB_FLOOR {
                clamped += 1;
            }
            -v.max(PROB_FLOOR).ln()
        })
        .sum();
    if clamped > 0 {
        log::warn!("{clamped} probabilities clamped to {PROB_FLOOR:e} in cross-entropy");
    }
    Ok(CrossEntropy { mean: total / observations.len() as f64, clamped })
}

/// Share of observations whose most probable product (lowest index on ties) was chosen.
pub fn accuracy(predictions: &[ProbVector], observations: &[ChoiceObservation]) -> Result<f64> {
    check_aligned(predictions, observations)?;
    let hits = predictions.iter().zip(observations).filter(|(p, o)| p.argmax() == o.choice).count();
    Ok(hits as f64 / observations.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub mean_predicted: f64,
    pub mean_empirical: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductBins {
    pub product: usize,
    /// Observations offering the product.
    pub offered: usize,
    pub bins: Vec<Bin>,
    /// Fewer offered observations than requested bins; each sample got its own bin.
    pub sparse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBins {
    pub requested_bins: usize,
    pub products: Vec<ProductBins>,
}

impl CalibrationBins {
    /// One row per bin: product, bin, mean_predicted, mean_empirical, count.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["product", "bin", "mean_predicted", "mean_empirical", "count"])?;
        for p in &self.products {
            for (b, bin) in p.bins.iter().enumerate() {
                w.write_record([
                    p.product.to_string(),
                    b.to_string(),
                    bin.mean_predicted.to_string(),
                    bin.mean_empirical.to_string(),
                    bin.count.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Equal-mass bins of predicted probability per product; the first `n_i mod B` bins
/// take one extra sample.
pub fn calibration_bins(predictions: &[ProbVector], observations: &[ChoiceObservation], bins: usize) -> Result<CalibrationBins> {
    check_aligned(predictions, observations)?;
    if bins == 0 {
        return Err(Error::Config("at least one calibration bin required".into()));
    }
    let n = observations.first().map_or(0, |o| o.assortment.n());
    let mut samples: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n];
    for (p, o) in predictions.iter().zip(observations) {
        for &i in o.assortment.members() {
            samples[i].push((p.get(i), if o.choice == i { 1.0 } else { 0.0 }));
        }
    }
    let products = samples
        .into_iter()
        .enumerate()
        .map(|(product, mut s)| {
            s.sort_by(|a, b| a.0.total_cmp(&b.0));
            let offered = s.len();
            let sparse = offered < bins;
            let count = if sparse { offered.max(1) } else { bins };
            let (base, extra) = (offered / count, offered % count);
            let mut start = 0;
            let bins = (0..count)
                .map(|b| {
                    let size = base + usize::from(b < extra);
                    let chunk = &s[start..start + size];
                    start += size;
                    let mean = |f: fn(&(f64, f64)) -> f64| {
                        if size == 0 {
                            0.0
                        } else {
                            chunk.iter().map(f).sum::<f64>() / size as f64
                        }
                    };
                    Bin { mean_predicted: mean(|x| x.0), mean_empirical: mean(|x| x.1), count: size }
                })
                .collect();
            ProductBins { product, offered, bins, sparse }
        })
        .collect();
    Ok(CalibrationBins { requested_bins: bins, products })
}

/// `(1 / (m B)) sum_i n_i sum_b |acc(b, i) - conf(b, i)|`.
pub fn ace(predictions: &[ProbVector], observations: &[ChoiceObservation], bins: usize) -> Result<f64> {
    let table = calibration_bins(predictions, observations, bins)?;
    let m = observations.len() as f64;
    let total: f64 = table
        .products
        .iter()
        .map(|p| {
            p.offered as f64 * p.bins.iter().map(|b| (b.mean_empirical - b.mean_predicted).abs()).sum::<f64>()
        })
        .sum();
    Ok(total / (m * bins as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub observations: usize,
    pub cross_entropy: f64,
    pub clamped: usize,
    pub accuracy: f64,
    pub ace: f64,
}

impl MetricReport {
    pub fn compute(model: &str, predictions: &[ProbVector], observations: &[ChoiceObservation]) -> Result<Self> {
        let ce = ce_loss(predictions, observations)?;
        Ok(Self {
            model: model.to_string(),
            observations: observations.len(),
            cross_entropy: ce.mean,
            clamped: ce.clamped,
            accuracy: accuracy(predictions, observations)?,
            ace: ace(predictions, observations, DEFAULT_ACE_BINS)?,
        })
    }
}

/// Min-max normalized output minus normalized input utilities over the assortment, or
/// `None` when either side is constant there.
pub fn delta_u_values(input: &[f64], output: &[f64], assortment: &Assortment) -> Option<Vec<f64>> {
    let normalize = |u: &[f64]| -> Option<Vec<f64>> {
        let members = assortment.members();
        let lo = members.iter().map(|&i| u[i]).fold(f64::INFINITY, f64::min);
        let hi = members.iter().map(|&i| u[i]).fold(f64::NEG_INFINITY, f64::max);
        (hi > lo).then(|| members.iter().map(|&i| (u[i] - lo) / (hi - lo)).collect())
    };
    let (a, b) = (normalize(input)?, normalize(output)?);
    Some(b.iter().zip(&a).map(|(o, i)| o - i).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaUHistogram {
    pub values: Vec<f64>,
    /// Sampled observations dropped because utilities were constant on the assortment.
    pub skipped: usize,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl DeltaUHistogram {
    pub fn from_values(values: Vec<f64>, skipped: usize, bins: usize) -> Self {
        let edges: Vec<f64> = (0..=bins).map(|b| -1.0 + 2.0 * b as f64 / bins as f64).collect();
        let mut counts = vec![0; bins];
        for &v in &values {
            let b = (((v + 1.0) / 2.0) * bins as f64).floor() as usize;
            counts[b.min(bins - 1)] += 1;
        }
        Self { values, skipped, edges, counts }
    }
}

/// Utility shift between the encoder output and the pre-gate logits on a seeded sample
/// of `dataset`.
pub fn delta_u(model: &NeuralModel, dataset: &ChoiceDataset, sample_count: usize, rng: &mut ChoiceRng) -> Result<DeltaUHistogram> {
    let picked = sample(rng, dataset.len(), sample_count.min(dataset.len())).into_vec();
    let utilities = model.utilities(dataset, &picked)?;
    let mut values = Vec::new();
    let mut skipped = 0;
    for (&k, (input, output)) in picked.iter().zip(&utilities) {
        let s = &dataset.observations[k].assortment;
        match (s.len() >= 2).then(|| delta_u_values(input, output, s)).flatten() {
            Some(v) => values.extend(v),
            None => skipped += 1,
        }
    }
    Ok(DeltaUHistogram::from_values(values, skipped, DELTA_U_HISTOGRAM_BINS))
}
