//! Classical choice models: multinomial logit, Markov chain and nonparametric
//! ranking models, with exact choice probabilities and samplers.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Assortment, ChoiceObservation, ProbVector, PROB_TOLERANCE};
use crate::error::{Error, Result};
use crate::linalg::Lu;
use crate::rng::ChoiceRng;

/// Steps after which an MCCM sample path is declared non-absorbing.
pub const PATH_STEP_CAP: usize = 1_000_000;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Anything that assigns a choice distribution to every assortment.
pub trait ChoiceModel {
    fn n(&self) -> usize;

    fn probs(&self, assortment: &Assortment) -> Result<ProbVector>;

    /// Draws one choice from the model's distribution under `assortment`.
    fn sample_choice(&self, assortment: &Assortment, rng: &mut ChoiceRng) -> Result<usize> {
        let p = self.probs(assortment)?;
        Ok(sample_from(&p, assortment, rng))
    }
}

/// Inverse-CDF draw over the assortment members.
pub fn sample_from(p: &ProbVector, assortment: &Assortment, rng: &mut ChoiceRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let members = assortment.members();
    for &i in members {
        acc += p.get(i);
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver of mass above the cumulative total.
    *members
        .iter()
        .rev()
        .find(|&&i| p.get(i) > 0.0)
        .unwrap_or(&members[members.len() - 1])
}

fn check_assortment(n: usize, assortment: &Assortment) -> Result<()> {
    if assortment.n() != n {
        return Err(Error::Dimension(format!(
            "assortment over {} products given to a model over {n}",
            assortment.n()
        )));
    }
    Ok(())
}

fn check_distribution(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidModel(format!("{what} has a negative or non-finite entry")));
    }
    let total: f64 = values.iter().sum();
    if (total - 1.0).abs() > PROB_TOLERANCE {
        return Err(Error::InvalidModel(format!("{what} sums to {total}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MnlModel {
    pub utilities: Vec<f64>,
}

impl MnlModel {
    pub fn new(utilities: Vec<f64>) -> Result<Self> {
        if utilities.is_empty() || utilities.iter().any(|u| !u.is_finite()) {
            return Err(Error::InvalidModel("utilities must be finite and non-empty".into()));
        }
        Ok(Self { utilities })
    }

    pub fn uniform(n: usize) -> Self {
        Self { utilities: vec![0.0; n] }
    }
}

/// Softmax of `utilities` over the assortment members; zero elsewhere.
pub fn masked_softmax(utilities: &[f64], assortment: &Assortment) -> Vec<f64> {
    let members = assortment.members();
    let max = members
        .iter()
        .map(|&i| utilities[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0; utilities.len()];
    let mut total = 0.0;
    for &i in members {
        let e = (utilities[i] - max).exp();
        out[i] = e;
        total += e;
    }
    for &i in members {
        out[i] /= total;
    }
    out
}

impl ChoiceModel for MnlModel {
    fn n(&self) -> usize {
        self.utilities.len()
    }

    fn probs(&self, assortment: &Assortment) -> Result<ProbVector> {
        check_assortment(self.n(), assortment)?;
        Ok(ProbVector::new_unchecked(masked_softmax(&self.utilities, assortment)))
    }
}

/// Markov chain choice model: arrival distribution and row-stochastic transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct MccmModel {
    arrival: Vec<f64>,
    /// Row-major n x n.
    transition: Vec<f64>,
}

impl MccmModel {
    pub fn new(arrival: Vec<f64>, transition: Vec<f64>) -> Result<Self> {
        let n = arrival.len();
        if n == 0 {
            return Err(Error::InvalidModel("MCCM needs at least one product".into()));
        }
        if transition.len() != n * n {
            return Err(Error::Dimension(format!(
                "transition matrix has {} entries for {n} products",
                transition.len()
            )));
        }
        check_distribution(&arrival, "arrival vector")?;
        for i in 0..n {
            check_distribution(&transition[i * n..(i + 1) * n], &format!("transition row {i}"))?;
        }
        Ok(Self { arrival, transition })
    }

    pub fn arrival(&self) -> &[f64] {
        &self.arrival
    }

    pub fn transition(&self) -> &[f64] {
        &self.transition
    }

    pub fn rho(&self, i: usize, j: usize) -> f64 {
        self.transition[i * self.arrival.len() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.arrival.len();
        &self.transition[i * n..(i + 1) * n]
    }

    /// Factors the absorbing system of `assortment`.
    pub fn absorption(&self, assortment: &Assortment) -> Result<Absorption> {
        check_assortment(self.n(), assortment)?;
        let transient = assortment.complement();
        let t = transient.len();
        let mut m = vec![0.0; t * t];
        for (a, &j) in transient.iter().enumerate() {
            for (b, &k) in transient.iter().enumerate() {
                m[a * t + b] = if a == b { 1.0 } else { 0.0 } - self.rho(j, k);
            }
        }
        let lu = if t > 0 { Some(Lu::factor(m, t)?) } else { None };
        let lambda_t: Vec<f64> = transient.iter().map(|&j| self.arrival[j]).collect();
        let visits = lu.as_ref().map_or_else(Vec::new, |lu| lu.solve_transpose(&lambda_t));
        Ok(Absorption { transient, lu, visits })
    }
}

/// Absorbing-chain quantities for one assortment.
#[derive(Debug, Clone)]
pub struct Absorption {
    /// Products outside the assortment, in increasing order.
    pub transient: Vec<usize>,
    lu: Option<Lu>,
    /// Expected visits to each transient state before absorption: `lambda_T^T (I - Q)^{-1}`.
    pub visits: Vec<f64>,
}

impl Absorption {
    /// Probability of absorption at `target` (an offered product) from each transient state.
    pub fn absorb_into(&self, model: &MccmModel, target: usize) -> Vec<f64> {
        match &self.lu {
            Some(lu) => {
                let r: Vec<f64> = self.transient.iter().map(|&j| model.rho(j, target)).collect();
                lu.solve(&r)
            }
            None => Vec::new(),
        }
    }
}

impl ChoiceModel for MccmModel {
    fn n(&self) -> usize {
        self.arrival.len()
    }

    fn probs(&self, assortment: &Assortment) -> Result<ProbVector> {
        let abs = self.absorption(assortment)?;
        let n = self.n();
        let mut p = vec![0.0; n];
        for &i in assortment.members() {
            p[i] = self.arrival[i];
        }
        for (a, &j) in abs.transient.iter().enumerate() {
            let v = abs.visits[a];
            if v == 0.0 {
                continue;
            }
            let row = self.row(j);
            for &i in assortment.members() {
                p[i] += v * row[i];
            }
        }
        Ok(ProbVector::new_unchecked(p))
    }

    fn sample_choice(&self, assortment: &Assortment, rng: &mut ChoiceRng) -> Result<usize> {
        self.sample_path(assortment, rng).map(|(choice, _)| choice)
    }
}

fn draw_categorical(weights: &[f64], rng: &mut ChoiceRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}

impl MccmModel {
    /// Simulates the chain until it first hits the assortment.
    /// Returns the absorbing product and the number of transitions taken.
    pub fn sample_path(&self, assortment: &Assortment, rng: &mut ChoiceRng) -> Result<(usize, usize)> {
        check_assortment(self.n(), assortment)?;
        let mut state = draw_categorical(&self.arrival, rng);
        let mut steps = 0;
        while !assortment.contains(state) {
            if steps == PATH_STEP_CAP {
                return Err(Error::StepCapExceeded(PATH_STEP_CAP));
            }
            state = draw_categorical(self.row(state), rng);
            steps += 1;
        }
        Ok((state, steps))
    }
}

/// Nonparametric ranking model: a weighted list of preference orderings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NpModel {
    permutations: Vec<Vec<usize>>,
    weights: Vec<f64>,
}

impl NpModel {
    pub fn new(permutations: Vec<Vec<usize>>, weights: Vec<f64>) -> Result<Self> {
        if permutations.is_empty() || permutations.len() != weights.len() {
            return Err(Error::InvalidModel("need one weight per permutation".into()));
        }
        let n = permutations[0].len();
        for p in &permutations {
            let mut sorted = p.clone();
            sorted.sort_unstable();
            if sorted != (0..n).collect::<Vec<_>>() {
                return Err(Error::InvalidModel(format!("{p:?} is not a permutation of 0..{n}")));
            }
        }
        check_distribution(&weights, "permutation weights")?;
        Ok(Self { permutations, weights })
    }

    pub fn permutations(&self) -> &[Vec<usize>] {
        &self.permutations
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

impl ChoiceModel for NpModel {
    fn n(&self) -> usize {
        self.permutations[0].len()
    }

    fn probs(&self, assortment: &Assortment) -> Result<ProbVector> {
        check_assortment(self.n(), assortment)?;
        let offered = assortment.to_bits();
        let mut p = vec![0.0; self.n()];
        for (perm, &w) in self.permutations.iter().zip(&self.weights) {
            if w <= 0.0 {
                continue;
            }
            if let Some(&top) = perm.iter().find(|&&i| offered[i] > 0.5) {
                p[top] += w;
            }
        }
        Ok(ProbVector::new_unchecked(p))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClassicalModel {
    Mnl(MnlModel),
    Mccm(MccmModel),
    Np(NpModel),
}

impl ChoiceModel for ClassicalModel {
    fn n(&self) -> usize {
        match self {
            Self::Mnl(m) => m.n(),
            Self::Mccm(m) => m.n(),
            Self::Np(m) => m.n(),
        }
    }

    fn probs(&self, assortment: &Assortment) -> Result<ProbVector> {
        match self {
            Self::Mnl(m) => m.probs(assortment),
            Self::Mccm(m) => m.probs(assortment),
            Self::Np(m) => m.probs(assortment),
        }
    }

    fn sample_choice(&self, assortment: &Assortment, rng: &mut ChoiceRng) -> Result<usize> {
        match self {
            Self::Mnl(m) => m.sample_choice(assortment, rng),
            Self::Mccm(m) => m.sample_choice(assortment, rng),
            Self::Np(m) => m.sample_choice(assortment, rng),
        }
    }
}

impl ClassicalModel {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Mnl(_) => "mnl",
            Self::Mccm(_) => "mccm",
            Self::Np(_) => "np",
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        file.into_model()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(w, &ModelFile::from(self))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ModelFile = serde_json::from_reader(BufReader::new(File::open(path)?))
            .map_err(|e| Error::Corrupt { path: path.to_path_buf(), reason: e.to_string() })?;
        file.into_model()
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    #[serde(flatten)]
    params: ModelParams,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ModelParams {
    Mnl { utilities: Vec<f64> },
    Mccm { arrival: Vec<f64>, transition: Vec<Vec<f64>> },
    Np { permutations: Vec<Vec<usize>>, weights: Vec<f64> },
}

impl From<&ClassicalModel> for ModelFile {
    fn from(model: &ClassicalModel) -> Self {
        let params = match model {
            ClassicalModel::Mnl(m) => ModelParams::Mnl { utilities: m.utilities.clone() },
            ClassicalModel::Mccm(m) => ModelParams::Mccm {
                arrival: m.arrival.clone(),
                transition: (0..m.n()).map(|i| m.row(i).to_vec()).collect(),
            },
            ClassicalModel::Np(m) => ModelParams::Np {
                permutations: m.permutations.clone(),
                weights: m.weights.clone(),
            },
        };
        Self { format_version: MODEL_FORMAT_VERSION, params }
    }
}

impl ModelFile {
    fn into_model(self) -> Result<ClassicalModel> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::FormatVersion { found: self.format_version, expected: MODEL_FORMAT_VERSION });
        }
        Ok(match self.params {
            ModelParams::Mnl { utilities } => ClassicalModel::Mnl(MnlModel::new(utilities)?),
            ModelParams::Mccm { arrival, transition } => {
                ClassicalModel::Mccm(MccmModel::new(arrival, transition.concat())?)
            }
            ModelParams::Np { permutations, weights } => ClassicalModel::Np(NpModel::new(permutations, weights)?),
        })
    }
}

/// Mean negative log-likelihood of `observations` under `model`.
pub fn oracle_ce<M: ChoiceModel + ?Sized>(model: &M, observations: &[ChoiceObservation]) -> Result<f64> {
    if observations.is_empty() {
        return Err(Error::InvalidDataset("no observations to score".into()));
    }
    let mut total = 0.0;
    for (k, obs) in observations.iter().enumerate() {
        let p = model.probs(&obs.assortment)?.get(obs.choice);
        if !(p > 0.0) {
            return Err(Error::ZeroProbability { index: k });
        }
        total -= p.ln();
    }
    Ok(total / observations.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn s(members: &[usize], n: usize) -> Assortment {
        Assortment::new(members.to_vec(), n).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    pub(crate) fn three_product_mccm() -> MccmModel {
        MccmModel::new(
            vec![0.2, 0.5, 0.3],
            vec![0.2, 0.3, 0.5, 0.4, 0.1, 0.5, 0.3, 0.3, 0.4],
        )
        .unwrap()
    }

    #[test]
    fn mnl_closed_form() {
        let m = MnlModel::new(vec![2f64.ln(), 0.0, 0.0]).unwrap();
        close(m.probs(&s(&[0, 1], 3)).unwrap().values(), &[2.0 / 3.0, 1.0 / 3.0, 0.0], 1e-15);
        let eq = MnlModel::uniform(5);
        close(eq.probs(&s(&[0, 2, 4], 5)).unwrap().values(), &[1. / 3., 0., 1. / 3., 0., 1. / 3.], 1e-15);
        let far = MnlModel::new(vec![0.0, 0.0, 5.0]).unwrap();
        close(far.probs(&s(&[0, 1], 3)).unwrap().values(), &[0.5, 0.5, 0.0], 1e-15);
    }

    #[test]
    fn mnl_large_utilities_stable() {
        let m = MnlModel::new(vec![1000.0, 999.0]).unwrap();
        let p = m.probs(&Assortment::full(2)).unwrap();
        assert!(p.values().iter().all(|v| v.is_finite()));
        assert!((p.get(0) - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn mccm_full_assortment_is_arrival() {
        let m = three_product_mccm();
        assert_eq!(m.probs(&Assortment::full(3)).unwrap().values(), m.arrival());
    }

    #[test]
    fn mccm_three_product_instance() {
        let m = three_product_mccm();
        let p = m.probs(&s(&[0, 2], 3)).unwrap();
        let want = [0.2 + 0.5 * (0.4 / 0.9), 0.0, 0.3 + 0.5 * (0.5 / 0.9)];
        close(p.values(), &want, 1e-14);
        p.check(&s(&[0, 2], 3)).unwrap();
    }

    #[test]
    fn mccm_singular_system_errors() {
        // Product 1 loops on itself forever.
        let m = MccmModel::new(vec![0.5, 0.5], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(m.probs(&s(&[0], 2)), Err(Error::Unreachable)));
    }

    #[test]
    fn mccm_identity_path_hits_step_cap() {
        let m = MccmModel::new(vec![0.0, 1.0], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let err = m.sample_path(&s(&[0], 2), &mut seeded(1)).unwrap_err();
        assert!(matches!(err, Error::StepCapExceeded(PATH_STEP_CAP)));
    }

    #[test]
    fn mccm_full_assortment_path_has_length_zero() {
        let m = three_product_mccm();
        let mut rng = seeded(3);
        for _ in 0..100 {
            assert_eq!(m.sample_path(&Assortment::full(3), &mut rng).unwrap().1, 0);
        }
    }

    #[test]
    fn mccm_rejects_bad_rows() {
        assert!(MccmModel::new(vec![0.5, 0.5], vec![0.5, 0.4, 0.0, 1.0]).is_err());
        assert!(MccmModel::new(vec![0.5, 0.6], vec![1.0, 0.0, 0.0, 1.0]).is_err());
        assert!(MccmModel::new(vec![1.0], vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn np_deterministic_and_mixture() {
        let one = NpModel::new(vec![vec![0, 1, 2]], vec![1.0]).unwrap();
        close(one.probs(&s(&[1, 2], 3)).unwrap().values(), &[0.0, 1.0, 0.0], 0.0);
        let two = NpModel::new(vec![vec![0, 1, 2], vec![2, 1, 0]], vec![0.7, 0.3]).unwrap();
        close(two.probs(&s(&[1, 2], 3)).unwrap().values(), &[0.0, 0.7, 0.3], 1e-15);
    }

    #[test]
    fn np_rejects_non_permutation() {
        assert!(NpModel::new(vec![vec![0, 0, 2]], vec![1.0]).is_err());
        assert!(NpModel::new(vec![vec![0, 1], vec![1, 0]], vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn degenerate_np_sampling_is_deterministic() {
        let m = NpModel::new(vec![vec![3, 1, 0, 2]], vec![1.0]).unwrap();
        let mut rng = seeded(9);
        for _ in 0..50 {
            assert_eq!(m.sample_choice(&s(&[0, 1, 2], 4), &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn seeded_sampling_repeats() {
        let m = ClassicalModel::Mnl(MnlModel::new(vec![0.3, -1.0, 2.0, 0.0]).unwrap());
        let a = Assortment::full(4);
        let draw = |seed| {
            let mut rng = seeded(seed);
            (0..100).map(|_| m.sample_choice(&a, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn oracle_ce_cases() {
        let uniform = MnlModel::uniform(12);
        let obs: Vec<_> = (0..12).map(|i| ChoiceObservation::new(i, Assortment::full(12))).collect();
        assert!((oracle_ce(&uniform, &obs).unwrap() - 12f64.ln()).abs() < 1e-12);

        let sure = NpModel::new(vec![vec![1, 0, 2]], vec![1.0]).unwrap();
        let obs = vec![ChoiceObservation::new(1, Assortment::full(3))];
        assert_eq!(oracle_ce(&sure, &obs).unwrap(), 0.0);

        let obs = vec![ChoiceObservation::new(0, Assortment::full(3))];
        assert!(matches!(oracle_ce(&sure, &obs), Err(Error::ZeroProbability { index: 0 })));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let models = [
            ClassicalModel::Mnl(MnlModel::new(vec![0.1, -1.0 / 3.0, 1e-17, 5e300]).unwrap()),
            ClassicalModel::Mccm(three_product_mccm()),
            ClassicalModel::Np(NpModel::new(vec![vec![0, 1, 2], vec![2, 1, 0]], vec![0.7, 0.3]).unwrap()),
        ];
        for m in models {
            let text = m.to_json().unwrap();
            assert!(text.contains("\"format_version\": 1"));
            assert_eq!(ClassicalModel::from_json(&text).unwrap(), m);
        }
        let bad = r#"{"format_version": 2, "kind": "mnl", "utilities": [0.0]}"#;
        assert!(matches!(ClassicalModel::from_json(bad), Err(Error::FormatVersion { found: 2, .. })));
    }

    fn softmax_rows(raw: &[f64], n: usize) -> Vec<f64> {
        raw.chunks(n)
            .flat_map(|row| {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let t: f64 = e.iter().sum();
                e.into_iter().map(move |v| v / t)
            })
            .collect()
    }

    fn arb_assortment(n: usize) -> impl Strategy<Value = Assortment> {
        proptest::collection::vec(any::<bool>(), n).prop_filter_map("non-empty", move |bits| {
            let members: Vec<usize> = (0..n).filter(|&i| bits[i]).collect();
            Assortment::new(members, n).ok()
        })
    }

    proptest! {
        #[test]
        fn engines_return_valid_prob_vectors(
            raw in proptest::collection::vec(-3.0f64..3.0, 8 * 9),
            seed in any::<u64>(),
            s in arb_assortment(8),
        ) {
            let n = 8;
            let mnl = MnlModel::new(raw[..n].to_vec()).unwrap();
            let mccm = MccmModel::new(softmax_rows(&raw[..n], n), softmax_rows(&raw[n..], n)).unwrap();
            let np = crate::datagen::gen_np(n, 4, &mut seeded(seed)).unwrap();
            for p in [mnl.probs(&s).unwrap(), mccm.probs(&s).unwrap(), np.probs(&s).unwrap()] {
                p.check(&s).unwrap();
            }
        }

        #[test]
        fn mnl_independence_of_irrelevant_alternatives(
            u in proptest::collection::vec(-4.0f64..4.0, 6),
            extra in arb_assortment(6),
        ) {
            let m = MnlModel::new(u).unwrap();
            let small = Assortment::new(vec![0, 1], 6).unwrap();
            let big = extra.with(0).unwrap().with(1).unwrap();
            let ps = m.probs(&small).unwrap();
            let pb = m.probs(&big).unwrap();
            let r1 = ps.get(0) / ps.get(1);
            let r2 = pb.get(0) / pb.get(1);
            prop_assert!((r1 - r2).abs() <= 1e-9 * r1.abs().max(1.0));
        }
    }
}
