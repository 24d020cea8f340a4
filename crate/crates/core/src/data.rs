//! Products, assortments, choice observations and datasets.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Normalization tolerance for probability vectors.
pub const PROB_TOLERANCE: f64 = 1e-9;

/// File name of the dataset sidecar holding the universe and product features.
pub const PRODUCTS_FILE: &str = "products.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductUniverse {
    n: usize,
    no_purchase: Option<usize>,
}

impl ProductUniverse {
    pub fn new(n: usize, no_purchase: Option<usize>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidDataset("universe must contain at least one product".into()));
        }
        if let Some(idx) = no_purchase {
            if idx >= n {
                return Err(Error::InvalidDataset(format!(
                    "no-purchase index {idx} outside universe of {n} products"
                )));
            }
        }
        Ok(Self { n, no_purchase })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn no_purchase(&self) -> Option<usize> {
        self.no_purchase
    }
}

/// A non-empty set of offered products, stored sorted.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Assortment {
    members: Vec<usize>,
    n: usize,
}

impl Assortment {
    pub fn new(mut members: Vec<usize>, n: usize) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidAssortment("assortment is empty".into()));
        }
        members.sort_unstable();
        if let Some(&last) = members.last() {
            if last >= n {
                return Err(Error::InvalidAssortment(format!(
                    "product {last} outside universe of {n} products"
                )));
            }
        }
        if members.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidAssortment("duplicate product index".into()));
        }
        Ok(Self { members, n })
    }

    /// The whole universe `{0, .., n-1}`.
    pub fn full(n: usize) -> Self {
        assert!(n > 0, "universe must be non-empty");
        Self { members: (0..n).collect(), n }
    }

    /// Decodes a binary indicator vector (entries > 0.5 count as offered).
    pub fn from_bits(bits: &[f64]) -> Result<Self> {
        let members = bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b > 0.5)
            .map(|(i, _)| i)
            .collect();
        Self::new(members, bits.len())
    }

    pub fn to_bits(&self) -> Vec<f64> {
        let mut bits = vec![0.0; self.n];
        for &i in &self.members {
            bits[i] = 1.0;
        }
        bits
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, product: usize) -> bool {
        self.members.binary_search(&product).is_ok()
    }

    /// Products of the universe that are not offered.
    pub fn complement(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n - self.members.len());
        let mut next = self.members.iter().peekable();
        for i in 0..self.n {
            if next.peek() == Some(&&i) {
                next.next();
            } else {
                out.push(i);
            }
        }
        out
    }

    /// Returns the assortment with `product` added.
    pub fn with(&self, product: usize) -> Result<Self> {
        if self.contains(product) {
            return Ok(self.clone());
        }
        let mut members = self.members.clone();
        members.push(product);
        Self::new(members, self.n)
    }
}

/// Row-major table of per-product feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    rows: usize,
    dim: usize,
    values: Vec<f64>,
}

impl FeatureTable {
    pub fn new(rows: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * dim {
            return Err(Error::Dimension(format!(
                "feature table {rows}x{dim} given {} values",
                values.len()
            )));
        }
        Ok(Self { rows, dim, values })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self { rows, dim, values: vec![0.0; rows * dim] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceObservation {
    pub choice: usize,
    pub assortment: Assortment,
    pub customer_features: Option<Vec<f64>>,
    /// Per-observation product features (n x d), overriding the dataset's static table.
    pub product_features: Option<FeatureTable>,
}

impl ChoiceObservation {
    pub fn new(choice: usize, assortment: Assortment) -> Self {
        Self { choice, assortment, customer_features: None, product_features: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceDataset {
    pub universe: ProductUniverse,
    pub observations: Vec<ChoiceObservation>,
    /// Static product features shared by every observation.
    pub product_features: Option<FeatureTable>,
    /// Whether every assortment is required to contain the no-purchase product.
    pub no_purchase_always_offered: bool,
}

/// One violated dataset invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub observation: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.observation {
            Some(k) => write!(f, "observation {k}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

impl ChoiceDataset {
    pub fn new(universe: ProductUniverse, observations: Vec<ChoiceObservation>) -> Self {
        Self { universe, observations, product_features: None, no_purchase_always_offered: false }
    }

    pub fn n(&self) -> usize {
        self.universe.n()
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Customer feature length, taken from the first observation carrying one.
    pub fn customer_dim(&self) -> Option<usize> {
        self.observations
            .iter()
            .find_map(|o| o.customer_features.as_ref().map(Vec::len))
    }

    /// Product feature length (static table first, then dynamic overrides).
    pub fn product_dim(&self) -> Option<usize> {
        self.product_features.as_ref().map(FeatureTable::dim).or_else(|| {
            self.observations
                .iter()
                .find_map(|o| o.product_features.as_ref().map(FeatureTable::dim))
        })
    }

    /// Product features that apply to observation `k`.
    pub fn features_for(&self, k: usize) -> Option<&FeatureTable> {
        self.observations[k]
            .product_features
            .as_ref()
            .or(self.product_features.as_ref())
    }

    /// New dataset sharing this one's universe and static features.
    pub fn with_observations(&self, observations: Vec<ChoiceObservation>) -> Self {
        Self {
            universe: self.universe,
            observations,
            product_features: self.product_features.clone(),
            no_purchase_always_offered: self.no_purchase_always_offered,
        }
    }

    /// Checks every dataset invariant; returns one entry per violation.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let n = self.n();
        let mut push = |k: Option<usize>, message: String| out.push(Violation { observation: k, message });

        if let Some(table) = &self.product_features {
            if table.rows() != n {
                push(None, format!("static feature table has {} rows for {n} products", table.rows()));
            }
        }
        let customer_dim = self.customer_dim();
        let product_dim = self.product_dim();
        for (k, obs) in self.observations.iter().enumerate() {
            let s = &obs.assortment;
            if s.n() != n {
                push(Some(k), format!("assortment universe {} differs from dataset universe {n}", s.n()));
            }
            if !s.contains(obs.choice) {
                push(Some(k), format!("choice {} not in assortment", obs.choice));
            }
            if self.no_purchase_always_offered {
                if let Some(np) = self.universe.no_purchase() {
                    if !s.contains(np) {
                        push(Some(k), format!("no-purchase product {np} not offered"));
                    }
                }
            }
            match (&obs.customer_features, customer_dim) {
                (Some(g), Some(d)) if g.len() != d => {
                    push(Some(k), format!("customer feature length {} differs from {d}", g.len()));
                }
                (None, Some(_)) => push(Some(k), "customer features missing".into()),
                _ => {}
            }
            if let Some(table) = &obs.product_features {
                if table.rows() != n {
                    push(Some(k), format!("product feature table has {} rows for {n} products", table.rows()));
                }
                if Some(table.dim()) != product_dim {
                    push(Some(k), format!("product feature length {} inconsistent", table.dim()));
                }
            } else if product_dim.is_some() && self.product_features.is_none() {
                push(Some(k), "product features missing".into());
            }
        }
        out
    }

    /// Seeded partition into disjoint train/validation/test sets.
    pub fn split(&self, sizes: (usize, usize, usize), seed: u64) -> Result<(Self, Self, Self)> {
        let (train, val, test) = sizes;
        let requested = train + val + test;
        if requested > self.len() {
            return Err(Error::SplitOverflow { requested, available: self.len() });
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng::seeded(seed));
        let take = |range: std::ops::Range<usize>| {
            self.with_observations(order[range].iter().map(|&k| self.observations[k].clone()).collect())
        };
        Ok((take(0..train), take(train..train + val), take(train + val..requested)))
    }

    /// Writes `path` (JSON lines) and the `products.json` sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(File::create(path)?);
        for obs in &self.observations {
            serde_json::to_writer(&mut w, &ObservationRecord::from(obs))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        let sidecar = ProductsRecord::from(self);
        let file = File::create(sidecar_path(path))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &sidecar)?;
        Ok(())
    }

    /// Reads a JSON-lines dataset together with its `products.json` sidecar.
    pub fn load(path: &Path) -> Result<Self> {
        let sidecar_file = sidecar_path(path);
        let products: ProductsRecord = serde_json::from_reader(BufReader::new(
            File::open(&sidecar_file).map_err(|e| Error::Corrupt {
                path: sidecar_file.clone(),
                reason: e.to_string(),
            })?,
        ))
        .map_err(|e| Error::Corrupt { path: sidecar_file.clone(), reason: e.to_string() })?;
        let universe = ProductUniverse::new(products.n, products.no_purchase_index)?;
        let product_features = match products.features {
            Some(map) => Some(features_from_map(products.n, &map)?),
            None => None,
        };

        let reader = BufReader::new(File::open(path)?);
        let mut observations = Vec::new();
        for (line_no, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let corrupt = |reason: String| Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("line {}: {reason}", line_no + 1),
            };
            let rec: ObservationRecord = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
            let assortment = Assortment::new(rec.assortment, products.n).map_err(|e| corrupt(e.to_string()))?;
            let product_features = match rec.product_features {
                Some(rows) => {
                    let dim = rows.first().map_or(0, Vec::len);
                    if rows.iter().any(|r| r.len() != dim) {
                        return Err(corrupt("ragged product feature rows".into()));
                    }
                    Some(FeatureTable::new(rows.len(), dim, rows.concat())?)
                }
                None => None,
            };
            observations.push(ChoiceObservation {
                choice: rec.choice,
                assortment,
                customer_features: rec.customer_features,
                product_features,
            });
        }
        Ok(Self {
            universe,
            observations,
            product_features,
            no_purchase_always_offered: products.no_purchase_always_offered,
        })
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.parent().unwrap_or_else(|| Path::new("")).join(PRODUCTS_FILE)
}

fn features_from_map(n: usize, map: &BTreeMap<String, Vec<f64>>) -> Result<FeatureTable> {
    let dim = map.values().next().map_or(0, Vec::len);
    let mut table = FeatureTable::zeros(n, dim);
    for (key, row) in map {
        let idx: usize = key
            .parse()
            .map_err(|_| Error::InvalidDataset(format!("feature key {key:?} is not a product index")))?;
        if idx >= n || row.len() != dim {
            return Err(Error::InvalidDataset(format!("bad feature row for product {key}")));
        }
        table.row_mut(idx).copy_from_slice(row);
    }
    Ok(table)
}

#[derive(Serialize, Deserialize)]
struct ObservationRecord {
    choice: usize,
    assortment: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    customer_features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    product_features: Option<Vec<Vec<f64>>>,
}

impl From<&ChoiceObservation> for ObservationRecord {
    fn from(obs: &ChoiceObservation) -> Self {
        Self {
            choice: obs.choice,
            assortment: obs.assortment.members().to_vec(),
            customer_features: obs.customer_features.clone(),
            product_features: obs
                .product_features
                .as_ref()
                .map(|t| (0..t.rows()).map(|i| t.row(i).to_vec()).collect()),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ProductsRecord {
    n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    no_purchase_index: Option<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    no_purchase_always_offered: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<BTreeMap<String, Vec<f64>>>,
}

impl From<&ChoiceDataset> for ProductsRecord {
    fn from(ds: &ChoiceDataset) -> Self {
        Self {
            n: ds.n(),
            no_purchase_index: ds.universe.no_purchase(),
            no_purchase_always_offered: ds.no_purchase_always_offered,
            features: ds.product_features.as_ref().map(|t| {
                (0..t.rows()).map(|i| (i.to_string(), t.row(i).to_vec())).collect()
            }),
        }
    }
}

/// A choice distribution over the universe, zero off the conditioning assortment.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Wraps `values` after checking nonnegativity, normalization and the gate.
    pub fn new(values: Vec<f64>, assortment: &Assortment) -> Result<Self> {
        let pv = Self(values);
        pv.check(assortment)?;
        Ok(pv)
    }

    pub(crate) fn new_unchecked(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn check(&self, assortment: &Assortment) -> Result<()> {
        if self.0.len() != assortment.n() {
            return Err(Error::Dimension(format!(
                "probability vector of length {} for universe {}",
                self.0.len(),
                assortment.n()
            )));
        }
        let mut total = 0.0;
        for (i, &p) in self.0.iter().enumerate() {
            if !(p >= 0.0) {
                return Err(Error::InvalidModel(format!("probability {p} at product {i}")));
            }
            if p != 0.0 && !assortment.contains(i) {
                return Err(Error::InvalidModel(format!("mass {p} on unoffered product {i}")));
            }
            total += p;
        }
        if (total - 1.0).abs() > PROB_TOLERANCE {
            return Err(Error::InvalidModel(format!("probabilities sum to {total}")));
        }
        Ok(())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}
