//! Benchmark estimators: MNL maximum likelihood (feature-free and feature-based) and
//! expectation-maximization for the Markov chain choice model.

use std::collections::BTreeMap;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classical::{masked_softmax, ChoiceModel, MccmModel, MnlModel};
use crate::data::{Assortment, ChoiceDataset, ChoiceObservation, ProbVector};
use crate::error::{Error, Result};
use crate::linalg::Lu;
use crate::rng;

/// Utilities are kept inside `[-UTILITY_CLAMP, UTILITY_CLAMP]`.
pub const UTILITY_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleOptions {
    /// Stop once the gradient norm of the mean log-likelihood drops below this.
    pub grad_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for MleOptions {
    fn default() -> Self {
        Self { grad_tolerance: 1e-6, max_iterations: 500 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MnlFit {
    pub model: MnlModel,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

/// Observations grouped by assortment, with per-product choice counts.
struct AssortmentGroups {
    groups: Vec<(Assortment, Vec<(usize, f64)>)>,
    total: f64,
}

impl AssortmentGroups {
    fn new(observations: &[ChoiceObservation]) -> Self {
        let mut map: BTreeMap<&Assortment, BTreeMap<usize, f64>> = BTreeMap::new();
        for o in observations {
            *map.entry(&o.assortment).or_default().entry(o.choice).or_insert(0.0) += 1.0;
        }
        let groups = map
            .into_iter()
            .map(|(s, counts)| (s.clone(), counts.into_iter().collect()))
            .collect();
        Self { groups, total: observations.len() as f64 }
    }
}

/// Projected gradient ascent with Barzilai-Borwein trial steps and Armijo backtracking,
/// for a concave objective. `free[j] == false` pins coordinate `j`.
fn gradient_ascent(
    x0: Vec<f64>,
    free: &[bool],
    bound: Option<f64>,
    options: &MleOptions,
    mut eval: impl FnMut(&[f64], Option<&mut [f64]>) -> f64,
) -> (Vec<f64>, f64, usize, bool) {
    let dim = x0.len();
    let project = |x: &mut [f64]| {
        if let Some(b) = bound {
            x.iter_mut().for_each(|v| *v = v.clamp(-b, b));
        }
    };
    let mut x = x0;
    let mut grad = vec![0.0; dim];
    let mut value = eval(&x, Some(&mut grad));
    let mut step = 1.0;
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;

    for iter in 0..options.max_iterations {
        for j in 0..dim {
            let at_bound = bound.is_some_and(|b| (x[j] >= b && grad[j] > 0.0) || (x[j] <= -b && grad[j] < 0.0));
            if !free[j] || at_bound {
                grad[j] = 0.0;
            }
        }
        let gnorm2: f64 = grad.iter().map(|g| g * g).sum();
        if gnorm2.sqrt() < options.grad_tolerance {
            return (x, value, iter, true);
        }
        if let Some((px, pg)) = &prev {
            let (mut ss, mut sy) = (0.0, 0.0);
            for j in 0..dim {
                let s = x[j] - px[j];
                ss += s * s;
                sy -= s * (grad[j] - pg[j]);
            }
            if sy > 0.0 && ss > 0.0 {
                step = ss / sy;
            }
        }
        let mut trial = vec![0.0; dim];
        let mut accepted = None;
        for _ in 0..60 {
            for j in 0..dim {
                trial[j] = x[j] + step * grad[j];
            }
            project(&mut trial);
            let v = eval(&trial, None);
            let gain: f64 = (0..dim).map(|j| grad[j] * (trial[j] - x[j])).sum();
            if v.is_finite() && v >= value + 1e-4 * gain {
                accepted = Some(v);
                break;
            }
            step *= 0.5;
        }
        let Some(_) = accepted else {
            // No ascent direction left at machine precision.
            return (x, value, iter, false);
        };
        prev = Some((x.clone(), grad.clone()));
        x = trial;
        value = eval(&x, Some(&mut grad));
    }
    for j in 0..dim {
        if !free[j] {
            grad[j] = 0.0;
        }
    }
    let converged = grad.iter().map(|g| g * g).sum::<f64>().sqrt() < options.grad_tolerance;
    (x, value, options.max_iterations, converged)
}

/// MNL maximum likelihood with the last product's utility pinned to zero.
pub fn fit_mnl_mle(dataset: &ChoiceDataset, options: &MleOptions) -> Result<MnlFit> {
    let n = dataset.n();
    if dataset.is_empty() {
        return Err(Error::InvalidDataset("cannot fit an empty dataset".into()));
    }
    let data = AssortmentGroups::new(&dataset.observations);
    let mut offered = vec![false; n];
    let mut chosen = vec![false; n];
    for (s, counts) in &data.groups {
        s.members().iter().for_each(|&i| offered[i] = true);
        counts.iter().for_each(|&(i, _)| chosen[i] = true);
    }
    let mut warnings = Vec::new();
    let mut free = vec![true; n];
    let mut u0 = vec![0.0; n];
    free[n - 1] = false;
    for i in 0..n {
        if !offered[i] {
            warnings.push(format!("product {i} is never offered; utility pinned to 0"));
            free[i] = false;
        } else if !chosen[i] {
            warnings.push(format!("product {i} is never chosen; utility clamped at -{UTILITY_CLAMP}"));
            free[i] = false;
            u0[i] = -UTILITY_CLAMP;
        }
    }
    for w in &warnings {
        warn!("{w}");
    }

    let eval = |u: &[f64], grad: Option<&mut [f64]>| {
        let mut ll = 0.0;
        let mut g = grad;
        if let Some(g) = g.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        for (s, counts) in &data.groups {
            let p = masked_softmax(u, s);
            let total: f64 = counts.iter().map(|c| c.1).sum();
            for &(i, c) in counts {
                ll += c * p[i].ln();
            }
            if let Some(g) = g.as_deref_mut() {
                for &(i, c) in counts {
                    g[i] += c;
                }
                for &j in s.members() {
                    g[j] -= total * p[j];
                }
            }
        }
        if let Some(g) = g {
            g.iter_mut().for_each(|v| *v /= data.total);
        }
        ll / data.total
    };
    let (u, ll, iterations, converged) = gradient_ascent(u0, &free, Some(UTILITY_CLAMP), options, eval);
    Ok(MnlFit {
        model: MnlModel::new(u)?,
        log_likelihood: ll * data.total,
        iterations,
        converged,
        warnings,
    })
}

/// Feature-based MNL: `u_i = z_i^T beta` with `z_i = (customer features, product features of i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMnl {
    pub beta: Vec<f64>,
    pub customer_dim: usize,
    pub product_dim: usize,
}

impl FeatureMnl {
    fn utilities(&self, dataset: &ChoiceDataset, k: usize) -> Vec<f64> {
        let obs = &dataset.observations[k];
        let n = dataset.n();
        let base: f64 = obs
            .customer_features
            .as_deref()
            .map_or(0.0, |g| g.iter().zip(&self.beta).map(|(a, b)| a * b).sum());
        let pb = &self.beta[self.customer_dim..];
        let table = dataset.features_for(k);
        (0..n)
            .map(|i| base + table.map_or(0.0, |t| t.row(i).iter().zip(pb).map(|(a, b)| a * b).sum()))
            .collect()
    }

    pub fn probs(&self, dataset: &ChoiceDataset, k: usize) -> ProbVector {
        let u = self.utilities(dataset, k);
        ProbVector::new_unchecked(masked_softmax(&u, &dataset.observations[k].assortment))
    }

    fn check_dims(&self, dataset: &ChoiceDataset) -> Result<()> {
        if dataset.customer_dim().unwrap_or(0) != self.customer_dim
            || dataset.product_dim().unwrap_or(0) != self.product_dim
        {
            return Err(Error::Dimension("dataset features do not match the fitted model".into()));
        }
        Ok(())
    }

    pub fn predict(&self, dataset: &ChoiceDataset) -> Result<Vec<ProbVector>> {
        self.check_dims(dataset)?;
        Ok((0..dataset.len()).map(|k| self.probs(dataset, k)).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMnlFit {
    pub model: FeatureMnl,
    pub log_likelihood: f64,
    /// Asymptotic standard errors from the observed Fisher information;
    /// `None` when the information matrix is singular.
    pub standard_errors: Option<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

pub fn fit_mnl_f_mle(dataset: &ChoiceDataset, options: &MleOptions) -> Result<FeatureMnlFit> {
    let customer_dim = dataset.customer_dim().unwrap_or(0);
    let product_dim = dataset.product_dim().unwrap_or(0);
    if customer_dim + product_dim == 0 {
        return Err(Error::MissingFeatures("feature MNL needs customer or product features".into()));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidDataset("cannot fit an empty dataset".into()));
    }
    let dim = customer_dim + product_dim;
    let m = dataset.len() as f64;
    let n = dataset.n();
    let feature_row = |k: usize, i: usize, out: &mut [f64]| {
        let obs = &dataset.observations[k];
        if let Some(g) = &obs.customer_features {
            out[..customer_dim].copy_from_slice(g);
        }
        match dataset.features_for(k) {
            Some(t) => out[customer_dim..].copy_from_slice(t.row(i)),
            None => out[customer_dim..].iter_mut().for_each(|v| *v = 0.0),
        }
    };

    let eval = |beta: &[f64], grad: Option<&mut [f64]>| {
        let model = FeatureMnl { beta: beta.to_vec(), customer_dim, product_dim };
        let mut ll = 0.0;
        let mut g = grad;
        if let Some(g) = g.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut z = vec![0.0; dim];
        for k in 0..dataset.len() {
            let obs = &dataset.observations[k];
            let p = model.probs(dataset, k);
            ll += p.get(obs.choice).ln();
            if let Some(g) = g.as_deref_mut() {
                for &j in obs.assortment.members() {
                    feature_row(k, j, &mut z);
                    let w = if j == obs.choice { 1.0 } else { 0.0 } - p.get(j);
                    for (gv, zv) in g.iter_mut().zip(&z) {
                        *gv += w * zv;
                    }
                }
            }
        }
        if let Some(g) = g {
            g.iter_mut().for_each(|v| *v /= m);
        }
        ll / m
    };
    let free = vec![true; dim];
    let (beta, ll, iterations, converged) = gradient_ascent(vec![0.0; dim], &free, None, options, eval);
    let model = FeatureMnl { beta, customer_dim, product_dim };

    // Fisher information: sum over observations of the within-assortment feature covariance.
    let mut info = vec![0.0; dim * dim];
    let mut rows = vec![0.0; n * dim];
    for k in 0..dataset.len() {
        let obs = &dataset.observations[k];
        let p = model.probs(dataset, k);
        let mut mean = vec![0.0; dim];
        for &j in obs.assortment.members() {
            feature_row(k, j, &mut rows[j * dim..(j + 1) * dim]);
            for a in 0..dim {
                mean[a] += p.get(j) * rows[j * dim + a];
            }
        }
        for &j in obs.assortment.members() {
            let pj = p.get(j);
            for a in 0..dim {
                let da = rows[j * dim + a] - mean[a];
                for b in 0..dim {
                    info[a * dim + b] += pj * da * (rows[j * dim + b] - mean[b]);
                }
            }
        }
    }
    let scale = info.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
    let mut warnings = Vec::new();
    let standard_errors = match Lu::factor(info.iter().map(|v| v / scale).collect(), dim) {
        Ok(lu) => {
            let inv = lu.inverse();
            Some((0..dim).map(|a| (inv[a * dim + a] / scale).max(0.0).sqrt()).collect())
        }
        Err(_) => {
            let msg = "feature design is rank deficient; coefficients are a pseudo-solution".to_string();
            warn!("{msg}");
            warnings.push(msg);
            None
        }
    };
    Ok(FeatureMnlFit { model, log_likelihood: ll * m, standard_errors, iterations, converged, warnings })
}

/// Expected complete-data statistics of one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct EmStatistics {
    /// Posterior probability that the customer arrived at each product.
    pub arrivals: Vec<f64>,
    /// Expected number of transitions `j -> k`, row-major n x n.
    pub transitions: Vec<f64>,
    /// Likelihood of the observed choice.
    pub probability: f64,
}

/// Accumulates `weight` times the conditional statistics of choosing `choice` under the
/// absorbing system `abs`. Returns the choice probability.
fn accumulate_statistics(
    model: &MccmModel,
    assortment: &Assortment,
    abs: &crate::classical::Absorption,
    choice: usize,
    weight: f64,
    arrivals: &mut [f64],
    transitions: &mut [f64],
) -> f64 {
    let n = model.n();
    let lambda = model.arrival();
    let into = abs.absorb_into(model, choice);
    let mut p = lambda[choice];
    for (a, &j) in abs.transient.iter().enumerate() {
        p += lambda[j] * into[a];
    }
    if !(p > 0.0) {
        return p;
    }
    let scale = weight / p;
    arrivals[choice] += scale * lambda[choice];
    for (a, &j) in abs.transient.iter().enumerate() {
        arrivals[j] += scale * lambda[j] * into[a];
    }
    debug_assert!(assortment.contains(choice));
    for (a, &j) in abs.transient.iter().enumerate() {
        let w = scale * abs.visits[a];
        if w == 0.0 {
            continue;
        }
        let row = model.row(j);
        transitions[j * n + choice] += w * row[choice];
        for (b, &k) in abs.transient.iter().enumerate() {
            transitions[j * n + k] += w * row[k] * into[b];
        }
    }
    p
}

/// Conditional expected arrivals and transitions given one observed purchase.
pub fn em_expectation(model: &MccmModel, observation: &ChoiceObservation) -> Result<EmStatistics> {
    let n = model.n();
    let s = &observation.assortment;
    if !s.contains(observation.choice) {
        return Err(Error::ChoiceNotOffered { choice: observation.choice });
    }
    let abs = model.absorption(s)?;
    let mut arrivals = vec![0.0; n];
    let mut transitions = vec![0.0; n * n];
    let probability =
        accumulate_statistics(model, s, &abs, observation.choice, 1.0, &mut arrivals, &mut transitions);
    if !(probability > 0.0) {
        return Err(Error::ZeroProbability { index: 0 });
    }
    Ok(EmStatistics { arrivals, transitions, probability })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub init_seed: u64,
    /// Stop once the mean parameter change falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    #[serde(default)]
    pub change: ChangeMeasure,
}

impl EmOptions {
    pub fn new(init_seed: u64) -> Self {
        Self { init_seed, tolerance: 1e-4, max_iterations: 500, change: ChangeMeasure::default() }
    }
}

/// How successive EM parameter sets are compared, averaged over all `n + n^2` entries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeMeasure {
    /// `|new - old|`; the parameters are probabilities, so this is a change in probability units.
    #[default]
    Absolute,
    /// `|new - old| / |old|`. Entries that EM drives toward zero shrink by a roughly
    /// constant factor per step, which keeps this measure from settling.
    Relative,
}

/// One EM iteration: the log-likelihood of the parameters entering the E-step and the
/// mean parameter change produced by the M-step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmIteration {
    pub iteration: usize,
    pub log_likelihood: f64,
    pub mean_change: f64,
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: MccmModel,
    pub trace: Vec<EmIteration>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

fn random_distribution(len: usize, rng: &mut rng::ChoiceRng) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn mean_change(old: &MccmModel, new: &MccmModel, measure: ChangeMeasure) -> f64 {
    let pairs = old
        .arrival()
        .iter()
        .zip(new.arrival())
        .chain(old.transition().iter().zip(new.transition()));
    let (mut total, mut count) = (0.0, 0usize);
    for (&a, &b) in pairs {
        if a != b {
            total += match measure {
                ChangeMeasure::Absolute => (b - a).abs(),
                ChangeMeasure::Relative => (b - a).abs() / a.abs().max(f64::MIN_POSITIVE),
            };
        }
        count += 1;
    }
    total / count as f64
}

/// EM for the Markov chain choice model with exact absorbing-chain E-steps.
pub fn fit_mccm_em(dataset: &ChoiceDataset, options: &EmOptions) -> Result<EmFit> {
    let n = dataset.n();
    if dataset.is_empty() {
        return Err(Error::InvalidDataset("cannot fit an empty dataset".into()));
    }
    let data = AssortmentGroups::new(&dataset.observations);
    let mut rng = rng::seeded(options.init_seed);
    let arrival = random_distribution(n, &mut rng);
    let transition: Vec<f64> = (0..n).flat_map(|_| random_distribution(n, &mut rng)).collect();
    let mut model = MccmModel::new(arrival, transition)?;

    let mut trace = Vec::new();
    let mut stale_rows = vec![false; n];
    let mut converged = false;
    for iteration in 0..options.max_iterations {
        let mut arrivals = vec![0.0; n];
        let mut transitions = vec![0.0; n * n];
        let mut ll = 0.0;
        for (s, counts) in &data.groups {
            let abs = model.absorption(s)?;
            for &(choice, c) in counts {
                let p = accumulate_statistics(&model, s, &abs, choice, c, &mut arrivals, &mut transitions);
                if !(p > 0.0) {
                    let index = dataset
                        .observations
                        .iter()
                        .position(|o| &o.assortment == s && o.choice == choice)
                        .unwrap_or(0);
                    return Err(Error::ZeroProbability { index });
                }
                ll += c * p.ln();
            }
        }

        let total: f64 = arrivals.iter().sum();
        let new_arrival: Vec<f64> = arrivals.iter().map(|v| v / total).collect();
        let mut new_transition = model.transition().to_vec();
        for j in 0..n {
            let row = &transitions[j * n..(j + 1) * n];
            let row_total: f64 = row.iter().sum();
            if row_total > 0.0 {
                for k in 0..n {
                    new_transition[j * n + k] = row[k] / row_total;
                }
            } else {
                stale_rows[j] = true;
            }
        }
        let updated = MccmModel::new(new_arrival, new_transition)?;
        let mean_change = mean_change(&model, &updated, options.change);
        trace.push(EmIteration { iteration, log_likelihood: ll, mean_change });
        model = updated;
        if mean_change < options.tolerance {
            converged = true;
            break;
        }
    }
    let warnings: Vec<String> = stale_rows
        .iter()
        .enumerate()
        .filter(|(_, &stale)| stale)
        .map(|(j, _)| format!("transition row {j} never visited transiently; kept at its previous value"))
        .collect();
    for w in &warnings {
        warn!("{w}");
    }
    Ok(EmFit { model, trace, converged, warnings })
}

/// Log-likelihood of a dataset under any choice model.
pub fn log_likelihood<M: ChoiceModel + ?Sized>(model: &M, observations: &[ChoiceObservation]) -> Result<f64> {
    observations
        .iter()
        .map(|o| Ok(model.probs(&o.assortment)?.get(o.choice).ln()))
        .sum()
}
