//! Synthetic ground-truth models, assortment distributions and dataset sampling.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::classical::{ChoiceModel, ClassicalModel, MccmModel, MnlModel, NpModel};
use crate::data::{Assortment, ChoiceDataset, ChoiceObservation, FeatureTable, ProductUniverse};
use crate::error::{Error, Result};
use crate::rng::ChoiceRng;

fn normal(rng: &mut ChoiceRng) -> f64 {
    StandardNormal.sample(rng)
}

fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// MNL with i.i.d. standard normal mean utilities.
pub fn gen_mnl(n: usize, rng: &mut ChoiceRng) -> Result<MnlModel> {
    MnlModel::new((0..n).map(|_| normal(rng)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MccmGenConfig {
    pub n: usize,
    pub sigma: f64,
    pub c_num: usize,
}

impl MccmGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c_num == 0 || self.n % self.c_num != 0 {
            return Err(Error::Config(format!(
                "cluster count {} must divide product count {}",
                self.c_num, self.n
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Clustered MCCM: transitions favour products in the same block of size `n / c_num`.
pub fn gen_mccm_clustered(config: &MccmGenConfig, rng: &mut ChoiceRng) -> Result<MccmModel> {
    config.validate()?;
    let MccmGenConfig { n, sigma, c_num } = *config;
    let block = n / c_num;
    let mu: Vec<f64> = (0..n).map(|_| sigma * normal(rng)).collect();
    let mut transition = Vec::with_capacity(n * n);
    for i in 0..n {
        let nu: Vec<f64> = (0..n)
            .map(|j| {
                let mean = if i / block == j / block { 2.0 * sigma } else { 0.0 };
                mean + sigma * normal(rng)
            })
            .collect();
        transition.extend(softmax(&nu));
    }
    MccmModel::new(softmax(&mu), transition)
}

/// MCCM with standard normal arrival and transition logits.
pub fn gen_mccm_plain(n: usize, rng: &mut ChoiceRng) -> Result<MccmModel> {
    let mu: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
    let mut transition = Vec::with_capacity(n * n);
    for _ in 0..n {
        let nu: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
        transition.extend(softmax(&nu));
    }
    MccmModel::new(softmax(&mu), transition)
}

/// NP model over `n_perm` uniform random orderings with normalized uniform weights.
pub fn gen_np(n: usize, n_perm: usize, rng: &mut ChoiceRng) -> Result<NpModel> {
    if n_perm == 0 || n == 0 {
        return Err(Error::Config("need at least one product and one permutation".into()));
    }
    let permutations: Vec<Vec<usize>> = (0..n_perm)
        .map(|_| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(rng);
            p
        })
        .collect();
    let raw: Vec<f64> = (0..n_perm).map(|_| rng.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    NpModel::new(permutations, raw.into_iter().map(|w| w / total).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureModelKind {
    FeatureMnl,
    FeatureMccm,
}

/// How a feature-MCCM draws its arrival distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalScheme {
    /// `lambda = softmax(Z beta)`.
    #[default]
    FromFeatures,
    /// `lambda = softmax` of i.i.d. standard normals, as in the feature-free generator.
    PlainRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureModelConfig {
    pub n: usize,
    pub d: usize,
    pub kind: FeatureModelKind,
    #[serde(default)]
    pub arrival: ArrivalScheme,
}

/// A feature-driven ground truth and the static product features it was built from.
#[derive(Debug, Clone)]
pub struct FeatureModel {
    pub config: FeatureModelConfig,
    pub beta: Vec<f64>,
    /// n x d row-major, feature-MCCM only.
    pub transition_weights: Option<Vec<f64>>,
    pub features: FeatureTable,
    /// The induced classical model over the product universe.
    pub model: ClassicalModel,
}

pub fn gen_feature_models(config: &FeatureModelConfig, rng: &mut ChoiceRng) -> Result<FeatureModel> {
    let FeatureModelConfig { n, d, kind, arrival } = *config;
    if n == 0 || d == 0 {
        return Err(Error::Config("feature model needs n, d >= 1".into()));
    }
    let z: Vec<f64> = (0..n * d).map(|_| normal(rng)).collect();
    let features = FeatureTable::new(n, d, z)?;
    let beta: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let utilities: Vec<f64> = (0..n).map(|i| dot(features.row(i), &beta)).collect();
    match kind {
        FeatureModelKind::FeatureMnl => Ok(FeatureModel {
            config: *config,
            model: ClassicalModel::Mnl(MnlModel::new(utilities)?),
            beta,
            transition_weights: None,
            features,
        }),
        FeatureModelKind::FeatureMccm => {
            let a: Vec<f64> = (0..n * d).map(|_| normal(rng)).collect();
            let mut transition = Vec::with_capacity(n * n);
            for i in 0..n {
                let logits: Vec<f64> = (0..n).map(|j| dot(&a[j * d..(j + 1) * d], features.row(i))).collect();
                transition.extend(softmax(&logits));
            }
            let lambda = match arrival {
                ArrivalScheme::FromFeatures => softmax(&utilities),
                ArrivalScheme::PlainRandom => softmax(&(0..n).map(|_| normal(rng)).collect::<Vec<_>>()),
            };
            Ok(FeatureModel {
                config: *config,
                model: ClassicalModel::Mccm(MccmModel::new(lambda, transition)?),
                beta,
                transition_weights: Some(a),
                features,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AssortmentKind {
    /// Uniform size, then a uniform subset of that size.
    D1,
    /// Independent inclusion with probability one half.
    D2,
    /// One half of the products removed, D1 within the other half.
    D3,
    /// Size `n/3` or `n/3 + 1`, then a uniform subset.
    D4,
}

impl AssortmentKind {
    pub const ALL: [AssortmentKind; 4] = [Self::D1, Self::D2, Self::D3, Self::D4];

    pub fn label(&self) -> &'static str {
        match self {
            Self::D1 => "D-1",
            Self::D2 => "D-2",
            Self::D3 => "D-3",
            Self::D4 => "D-4",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssortmentDistribution {
    pub kind: AssortmentKind,
    pub n: usize,
    /// Product unioned into every assortment after sampling.
    #[serde(default)]
    pub no_purchase: Option<usize>,
}

fn uniform_subset(pool: &[usize], size: usize, rng: &mut ChoiceRng) -> Vec<usize> {
    rand::seq::index::sample(rng, pool.len(), size)
        .into_iter()
        .map(|k| pool[k])
        .collect()
}

fn d1_within(pool: &[usize], rng: &mut ChoiceRng) -> Vec<usize> {
    let size = rng.random_range(1..=pool.len());
    uniform_subset(pool, size, rng)
}

pub fn gen_assortments(dist: &AssortmentDistribution, m: usize, rng: &mut ChoiceRng) -> Result<Vec<Assortment>> {
    let n = dist.n;
    if n == 0 {
        return Err(Error::Config("assortment distribution over zero products".into()));
    }
    if dist.kind == AssortmentKind::D3 && n < 2 {
        return Err(Error::Config("D-3 needs at least two products".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let half = n / 2;
    let d4_size = (n / 3).max(1);
    (0..m)
        .map(|_| {
            let members = match dist.kind {
                AssortmentKind::D1 => d1_within(&all, rng),
                AssortmentKind::D2 => loop {
                    let picked: Vec<usize> = (0..n).filter(|_| rng.random::<bool>()).collect();
                    if !picked.is_empty() {
                        break picked;
                    }
                },
                AssortmentKind::D3 => {
                    let surviving = if rng.random::<bool>() { &all[half..] } else { &all[..half] };
                    d1_within(surviving, rng)
                }
                AssortmentKind::D4 => {
                    let size = (d4_size + rng.random_range(0..2)).min(n);
                    uniform_subset(&all, size, rng)
                }
            };
            let s = Assortment::new(members, n)?;
            match dist.no_purchase {
                Some(np) => s.with(np),
                None => Ok(s),
            }
        })
        .collect()
}

/// Draws one choice per assortment from `model`.
pub fn sample_dataset<M: ChoiceModel + ?Sized>(
    model: &M,
    assortments: &[Assortment],
    rng: &mut ChoiceRng,
) -> Result<ChoiceDataset> {
    let observations = assortments
        .iter()
        .map(|s| Ok(ChoiceObservation::new(model.sample_choice(s, rng)?, s.clone())))
        .collect::<Result<Vec<_>>>()?;
    Ok(ChoiceDataset::new(ProductUniverse::new(model.n(), None)?, observations))
}

/// Samples from a feature model and attaches its static feature table.
pub fn sample_feature_dataset(
    model: &FeatureModel,
    assortments: &[Assortment],
    rng: &mut ChoiceRng,
) -> Result<ChoiceDataset> {
    let mut ds = sample_dataset(&model.model, assortments, rng)?;
    ds.product_features = Some(model.features.clone());
    Ok(ds)
}

/// Folds every product outside `keep` into `sink`.
///
/// The result is indexed by position in `keep`: arrival mass of removed products is
/// added to the sink, removed transition columns are added to the sink column and
/// removed rows are dropped.
pub fn shrink_mccm(model: &MccmModel, keep: &[usize], sink: usize) -> Result<MccmModel> {
    let n = model.n();
    let mut kept = vec![false; n];
    for &k in keep {
        if k >= n || kept[k] {
            return Err(Error::Config(format!("keep set entry {k} duplicated or out of range")));
        }
        kept[k] = true;
    }
    let sink_pos = keep
        .iter()
        .position(|&k| k == sink)
        .ok_or_else(|| Error::Config(format!("sink {sink} is not among the kept products")))?;
    let removed: Vec<usize> = (0..n).filter(|&i| !kept[i]).collect();

    let mut arrival: Vec<f64> = keep.iter().map(|&k| model.arrival()[k]).collect();
    arrival[sink_pos] += removed.iter().map(|&r| model.arrival()[r]).sum::<f64>();

    let k = keep.len();
    let mut transition = Vec::with_capacity(k * k);
    for &i in keep {
        let row = model.row(i);
        let mut new_row: Vec<f64> = keep.iter().map(|&j| row[j]).collect();
        new_row[sink_pos] += removed.iter().map(|&r| row[r]).sum::<f64>();
        transition.extend(new_row);
    }
    MccmModel::new(arrival, transition)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(gen_mnl(20, &mut seeded(4)).unwrap(), gen_mnl(20, &mut seeded(4)).unwrap());
        let cfg = MccmGenConfig { n: 20, sigma: 2.5, c_num: 4 };
        assert_eq!(
            gen_mccm_clustered(&cfg, &mut seeded(4)).unwrap(),
            gen_mccm_clustered(&cfg, &mut seeded(4)).unwrap()
        );
        assert_eq!(gen_np(20, 10, &mut seeded(4)).unwrap(), gen_np(20, 10, &mut seeded(4)).unwrap());
    }

    #[test]
    fn mnl_utilities_are_centered() {
        let m = gen_mnl(10_000, &mut seeded(11)).unwrap();
        let mean = m.utilities.iter().sum::<f64>() / 10_000.0;
        assert!(mean.abs() < 3.0 / 100.0, "mean {mean}");
    }

    #[test]
    fn clustered_config_validation() {
        assert!(MccmGenConfig { n: 20, sigma: 2.5, c_num: 3 }.validate().is_err());
        assert!(MccmGenConfig { n: 20, sigma: 0.0, c_num: 4 }.validate().is_err());
        assert!(MccmGenConfig { n: 50, sigma: 4.0, c_num: 10 }.validate().is_ok());
    }

    #[test]
    fn clustered_rows_concentrate_within_blocks() {
        // Monte-Carlo check of the 2-sigma mean shift: average per-entry mass inside
        // the diagonal block exceeds the average per-entry mass outside it.
        let cfg = MccmGenConfig { n: 20, sigma: 2.5, c_num: 4 };
        let (mut within, mut across) = (0.0, 0.0);
        for seed in 0..100 {
            let m = gen_mccm_clustered(&cfg, &mut seeded(seed)).unwrap();
            for i in 0..20 {
                for j in 0..20 {
                    if i / 5 == j / 5 {
                        within += m.rho(i, j) / 5.0;
                    } else {
                        across += m.rho(i, j) / 15.0;
                    }
                }
            }
        }
        assert!(within > across, "within {within} across {across}");
    }

    #[test]
    fn plain_mccm_entries_positive_and_normalized() {
        let m = gen_mccm_plain(30, &mut seeded(2)).unwrap();
        assert!(m.arrival().iter().chain(m.transition()).all(|&v| v > 0.0));
        for i in 0..30 {
            assert!((m.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn np_orderings_are_permutations() {
        for (n, k) in [(20, 10), (50, 20)] {
            let m = gen_np(n, k, &mut seeded(1)).unwrap();
            assert_eq!(m.permutations().len(), k);
            for p in m.permutations() {
                let mut s = p.clone();
                s.sort_unstable();
                assert_eq!(s, (0..n).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn feature_mnl_with_zero_beta_is_uniform() {
        let cfg = FeatureModelConfig { n: 6, d: 3, kind: FeatureModelKind::FeatureMnl, arrival: ArrivalScheme::FromFeatures };
        let mut fm = gen_feature_models(&cfg, &mut seeded(3)).unwrap();
        fm.beta = vec![0.0; 3];
        let u: Vec<f64> = (0..6).map(|i| fm.features.row(i).iter().zip(&fm.beta).map(|(a, b)| a * b).sum()).collect();
        let m = MnlModel::new(u).unwrap();
        let s = Assortment::new(vec![0, 2, 5], 6).unwrap();
        for &i in s.members() {
            assert!((m.probs(&s).unwrap().get(i) - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn feature_models_shapes() {
        let cfg = FeatureModelConfig { n: 50, d: 5, kind: FeatureModelKind::FeatureMccm, arrival: ArrivalScheme::FromFeatures };
        let fm = gen_feature_models(&cfg, &mut seeded(8)).unwrap();
        assert_eq!(fm.features.rows(), 50);
        assert_eq!(fm.features.dim(), 5);
        assert_eq!(fm.transition_weights.as_ref().unwrap().len(), 250);
        assert!(matches!(fm.model, ClassicalModel::Mccm(_)));
        let plain = FeatureModelConfig { arrival: ArrivalScheme::PlainRandom, ..cfg };
        let fp = gen_feature_models(&plain, &mut seeded(8)).unwrap();
        assert_eq!(fp.features, fm.features);
    }

    fn dist(kind: AssortmentKind, n: usize) -> AssortmentDistribution {
        AssortmentDistribution { kind, n, no_purchase: None }
    }

    #[test]
    fn d2_inclusion_rate_is_one_half() {
        let draws = gen_assortments(&dist(AssortmentKind::D2, 30), 100_000, &mut seeded(5)).unwrap();
        let mut counts = [0usize; 30];
        for s in &draws {
            for &i in s.members() {
                counts[i] += 1;
            }
        }
        for c in counts {
            let rate = c as f64 / 100_000.0;
            assert!((rate - 0.5).abs() < 0.01, "rate {rate}");
        }
    }

    #[test]
    fn d3_stays_within_one_half() {
        for s in gen_assortments(&dist(AssortmentKind::D3, 30), 5_000, &mut seeded(6)).unwrap() {
            let m = s.members();
            assert!(m.iter().all(|&i| i < 15) || m.iter().all(|&i| i >= 15));
        }
    }

    #[test]
    fn d4_sizes() {
        for s in gen_assortments(&dist(AssortmentKind::D4, 30), 5_000, &mut seeded(6)).unwrap() {
            assert!(s.len() == 10 || s.len() == 11);
        }
        // n not divisible by 3 falls back to floor(n/3).
        for s in gen_assortments(&dist(AssortmentKind::D4, 31), 500, &mut seeded(6)).unwrap() {
            assert!(s.len() == 10 || s.len() == 11);
        }
    }

    #[test]
    fn d1_covers_every_size() {
        let draws = gen_assortments(&dist(AssortmentKind::D1, 30), 100_000, &mut seeded(7)).unwrap();
        let mut seen = [false; 31];
        for s in &draws {
            seen[s.len()] = true;
        }
        assert!(seen[1..].iter().all(|&b| b));
    }

    #[test]
    fn no_purchase_always_unioned() {
        let d = AssortmentDistribution { kind: AssortmentKind::D4, n: 26, no_purchase: Some(0) };
        for s in gen_assortments(&d, 1000, &mut seeded(1)).unwrap() {
            assert!(s.contains(0));
        }
    }

    #[test]
    fn deterministic_np_dataset_follows_preference_list() {
        let m = NpModel::new(vec![vec![4, 2, 0, 1, 3]], vec![1.0]).unwrap();
        let assortments = gen_assortments(&dist(AssortmentKind::D1, 5), 500, &mut seeded(2)).unwrap();
        let ds = sample_dataset(&m, &assortments, &mut seeded(3)).unwrap();
        for o in &ds.observations {
            let top = *[4, 2, 0, 1, 3].iter().find(|&&i| o.assortment.contains(i)).unwrap();
            assert_eq!(o.choice, top);
        }
    }

    #[test]
    fn sampled_datasets_are_reproducible() {
        let m = gen_mccm_plain(8, &mut seeded(1)).unwrap();
        let a = gen_assortments(&dist(AssortmentKind::D1, 8), 300, &mut seeded(2)).unwrap();
        let x = sample_dataset(&m, &a, &mut seeded(3)).unwrap();
        let y = sample_dataset(&m, &a, &mut seeded(3)).unwrap();
        assert_eq!(x, y);
        assert!(x.validate().is_empty());
    }

    #[test]
    fn shrink_conserves_mass() {
        let m = gen_mccm_plain(26, &mut seeded(9)).unwrap();
        let keep: Vec<usize> = (0..21).collect();
        let s = shrink_mccm(&m, &keep, 0).unwrap();
        assert_eq!(s.n(), 21);
        assert!((s.arrival().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let extra: f64 = (21..26).map(|i| m.arrival()[i]).sum();
        assert!((s.arrival()[0] - (m.arrival()[0] + extra)).abs() < 1e-15);
        for i in 0..21 {
            assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shrink_with_nothing_removed_is_identity() {
        let m = gen_mccm_plain(6, &mut seeded(9)).unwrap();
        let keep: Vec<usize> = (0..6).collect();
        assert_eq!(shrink_mccm(&m, &keep, 0).unwrap(), m);
    }

    #[test]
    fn shrink_rejects_bad_keep_sets() {
        let m = gen_mccm_plain(6, &mut seeded(9)).unwrap();
        assert!(shrink_mccm(&m, &[0, 1, 1], 0).is_err());
        assert!(shrink_mccm(&m, &[0, 1, 2], 4).is_err());
        assert!(shrink_mccm(&m, &[0, 7], 0).is_err());
    }
}
