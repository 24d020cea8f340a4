//! Experiment configuration: pipeline layout, ground-truth generators, methods and
//! training settings. Built-in configurations are compiled in from `configs/`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use choicelab::datagen::{ArrivalScheme, AssortmentKind};
use choicelab::estimators::ChangeMeasure;
use choicelab::neural::{Architecture, EncoderSpec, GasnSpec, RasnSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const PIPELINES: [&str; 5] = ["table1", "table2", "table6", "warmstart", "realdata"];

const BUILTIN: [(&str, &str); 5] = [
    ("table1", include_str!("../configs/table1.json")),
    ("table2", include_str!("../configs/table2.json")),
    ("table6", include_str!("../configs/table6.json")),
    ("warmstart", include_str!("../configs/warmstart.json")),
    ("realdata", include_str!("../configs/realdata.json")),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub trials: usize,
    pub train: TrainSettings,
    pub pipeline: PipelineConfig,
}

/// Training settings shared by every neural method; the seed comes from the cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
}

impl TrainSettings {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            patience: self.patience,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PipelineConfig {
    Table1(GridConfig),
    Table2(GridConfig),
    Custom(GridConfig),
    Table6(OodConfig),
    Warmstart(WarmstartConfig),
    Realdata(RealdataConfig),
}

impl PipelineConfig {
    pub fn id(&self) -> &'static str {
        match self {
            Self::Table1(_) => "table1",
            Self::Table2(_) => "table2",
            Self::Custom(_) => "custom",
            Self::Table6(_) => "table6",
            Self::Warmstart(_) => "warmstart",
            Self::Realdata(_) => "realdata",
        }
    }
}

/// Ground-truth columns crossed with method rows and training sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub sizes: Vec<usize>,
    pub validation: usize,
    pub test: usize,
    #[serde(default = "default_assortments")]
    pub assortments: AssortmentKind,
    pub truths: Vec<TruthSpec>,
    pub methods: Vec<Method>,
}

fn default_assortments() -> AssortmentKind {
    AssortmentKind::D1
}

/// One model trained on each assortment distribution and tested on all of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodConfig {
    pub truth: TruthSpec,
    pub train_size: usize,
    pub validation: usize,
    pub test: usize,
    pub kinds: Vec<AssortmentKind>,
    /// Adds a row trained on equal shares of every training distribution.
    pub mix: bool,
    pub method: Method,
}

/// Shrunk and augmented product universes for the cold/warm start comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmstartConfig {
    /// Products of the augmented universe, no-purchase (index 0) included.
    pub products: usize,
    /// Products of the shrunk universe, no-purchase included; indices `0..kept`.
    pub kept: usize,
    pub samples: usize,
    pub pretrain_size: usize,
    pub validation: usize,
    pub sizes: Vec<usize>,
    pub methods: Vec<Method>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealdataConfig {
    pub source: RealSource,
    /// Train, validation and test sizes.
    pub split: [usize; 3],
    pub standardize: bool,
    pub ace_bins: usize,
    pub methods: Vec<Method>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RealSource {
    Swissmetro { path: Option<PathBuf> },
    Expedia { path: Option<PathBuf> },
    Hotel { path: Option<PathBuf>, hotel_id: String, rare_threshold: usize },
}

impl RealSource {
    pub fn path(&self) -> Option<&Path> {
        match self {
            Self::Swissmetro { path } | Self::Expedia { path } | Self::Hotel { path, .. } => path.as_deref(),
        }
    }

    pub fn set_path(&mut self, new: PathBuf) {
        match self {
            Self::Swissmetro { path } | Self::Expedia { path } | Self::Hotel { path, .. } => *path = Some(new),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Swissmetro { .. } => "SwissMetro",
            Self::Expedia { .. } => "Expedia",
            Self::Hotel { .. } => "Hotel",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSpec {
    pub label: String,
    pub model: Generator,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Generator {
    Mnl { n: usize },
    Mccm { n: usize, sigma: f64, c_num: usize },
    MccmPlain { n: usize },
    Np { n: usize, n_perm: usize },
    FeatureMnl { n: usize, d: usize },
    FeatureMccm { n: usize, d: usize, #[serde(default)] arrival: ArrivalScheme },
}

impl Generator {
    pub fn n(&self) -> usize {
        match *self {
            Self::Mnl { n }
            | Self::Mccm { n, .. }
            | Self::MccmPlain { n }
            | Self::Np { n, .. }
            | Self::FeatureMnl { n, .. }
            | Self::FeatureMccm { n, .. } => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Method {
    pub label: String,
    /// Restricts the method to these truth columns; empty means all.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub columns: Vec<String>,
    /// Restricts the method to these training sizes; empty means all.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sizes: Vec<usize>,
    pub model: MethodSpec,
}

impl Method {
    pub fn applies(&self, column: &str, size: usize) -> bool {
        (self.columns.is_empty() || self.columns.iter().any(|c| c == column))
            && (self.sizes.is_empty() || self.sizes.contains(&size))
    }
}

/// A layer width, either absolute or a multiple of the product count (`"n"`, `"2n"`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Width {
    Fixed(usize),
    Relative(String),
}

impl Width {
    pub fn resolve(&self, n: usize) -> Result<usize> {
        match self {
            Self::Fixed(w) => Ok(*w),
            Self::Relative(text) => {
                let factor = text.strip_suffix('n').with_context(|| format!("width {text:?} is neither a number nor a multiple of n"))?;
                let factor: usize = if factor.is_empty() { 1 } else { factor.parse().with_context(|| format!("bad width {text:?}"))? };
                Ok(factor * n)
            }
        }
    }
}

fn resolve_all(widths: &[Width], n: usize) -> Result<Vec<usize>> {
    widths.iter().map(|w| w.resolve(n)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderLayers {
    /// Product encoder widths; the last is the latent dimension.
    pub product: Vec<usize>,
    /// Customer encoder widths, ending in the same latent dimension.
    pub customer: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodSpec {
    MnlMle,
    MnlFMle,
    MccmEm {
        #[serde(default = "default_em_tolerance")]
        tolerance: f64,
        #[serde(default = "default_em_iterations")]
        max_iterations: usize,
        #[serde(default)]
        change: ChangeMeasure,
    },
    Gasn { hidden: Vec<Width> },
    Rasn { blocks: usize, #[serde(default)] block_hidden: Option<Width> },
    GasnF {
        hidden: Vec<Width>,
        encoder: EncoderLayers,
        #[serde(default = "default_true")]
        masked_input: bool,
    },
    RasnF { blocks: usize, #[serde(default)] block_hidden: Option<Width>, encoder: EncoderLayers },
    /// Customer network hidden widths; the `n * d` output layer is appended.
    TasteNet { hidden: Vec<Width> },
    DeepMnl { hidden: Vec<Width> },
}

fn default_em_tolerance() -> f64 {
    1e-4
}

fn default_em_iterations() -> usize {
    500
}

fn default_true() -> bool {
    true
}

impl MethodSpec {
    pub fn is_neural(&self) -> bool {
        !matches!(self, Self::MnlMle | Self::MnlFMle | Self::MccmEm { .. })
    }

    /// Network for `n` products with the given feature lengths (`None` when absent).
    pub fn architecture(&self, n: usize, product_dim: Option<usize>, customer_dim: Option<usize>) -> Result<Architecture> {
        let need_products = || product_dim.context("method needs product features but the dataset has none");
        let encoder = |layers: &EncoderLayers| -> Result<EncoderSpec> {
            Ok(EncoderSpec {
                product_dim: need_products()?,
                customer_dim,
                latent_dim: *layers.product.last().context("empty product encoder")?,
                product_layers: layers.product.clone(),
                customer_layers: layers.customer.clone(),
            })
        };
        let arch = match self {
            Self::MnlMle | Self::MnlFMle | Self::MccmEm { .. } => bail!("not a neural method"),
            Self::Gasn { hidden } => Architecture::Gasn(GasnSpec { n, hidden: resolve_all(hidden, n)? }),
            Self::Rasn { blocks, block_hidden } => Architecture::Rasn(RasnSpec {
                n,
                blocks: *blocks,
                block_hidden: block_hidden.as_ref().map(|w| w.resolve(n)).transpose()?,
            }),
            Self::GasnF { hidden, encoder: layers, masked_input } => Architecture::GasnF {
                assortment_net: GasnSpec { n, hidden: resolve_all(hidden, n)? },
                encoder: encoder(layers)?,
                masked_input: *masked_input,
            },
            Self::RasnF { blocks, block_hidden, encoder: layers } => Architecture::RasnF {
                assortment_net: RasnSpec {
                    n,
                    blocks: *blocks,
                    block_hidden: block_hidden.as_ref().map(|w| w.resolve(n)).transpose()?,
                },
                encoder: encoder(layers)?,
            },
            Self::TasteNet { hidden } => {
                let d = need_products()?;
                let mut widths = resolve_all(hidden, n)?;
                widths.push(n * d);
                Architecture::TasteNet {
                    n,
                    product_dim: d,
                    customer_dim: customer_dim.context("TasteNet needs customer features")?,
                    widths,
                }
            }
            Self::DeepMnl { hidden } => Architecture::DeepMnl {
                n,
                product_dim: need_products()?,
                customer_dim,
                widths: resolve_all(hidden, n)?,
            },
        };
        arch.validate()?;
        Ok(arch)
    }
}

impl ExperimentConfig {
    pub fn builtin(id: &str) -> Result<Self> {
        let (_, text) = BUILTIN
            .iter()
            .find(|(name, _)| *name == id)
            .with_context(|| format!("unknown pipeline {id:?} (known: {})", PIPELINES.join(", ")))?;
        Self::parse(text, &format!("built-in {id} config"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses and validates; serde errors carry the line and column of the offending field.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).with_context(|| format!("invalid config {origin}"))?;
        config.validate().with_context(|| format!("invalid config {origin}"))?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            bail!("trials must be at least 1");
        }
        self.train.with_seed(0).validate()?;
        let check_methods = |methods: &[Method]| -> Result<()> {
            if methods.is_empty() {
                bail!("no methods configured");
            }
            for (k, m) in methods.iter().enumerate() {
                if methods[..k].iter().any(|o| o.label == m.label) {
                    bail!("duplicate method label {:?}", m.label);
                }
            }
            Ok(())
        };
        match &self.pipeline {
            PipelineConfig::Table1(grid) | PipelineConfig::Table2(grid) | PipelineConfig::Custom(grid) => {
                if grid.sizes.is_empty() || grid.truths.is_empty() {
                    bail!("grid needs at least one size and one truth");
                }
                if grid.sizes.contains(&0) || grid.validation == 0 || grid.test == 0 {
                    bail!("sample sizes must be positive");
                }
                check_methods(&grid.methods)?;
                for m in &grid.methods {
                    for c in &m.columns {
                        if !grid.truths.iter().any(|t| &t.label == c) {
                            bail!("method {:?} refers to unknown column {c:?}", m.label);
                        }
                    }
                }
            }
            PipelineConfig::Table6(ood) => {
                if ood.kinds.is_empty() || ood.train_size == 0 || ood.validation == 0 || ood.test == 0 {
                    bail!("out-of-domain study needs distributions and positive sizes");
                }
                if ood.mix && ood.train_size < ood.kinds.len() {
                    bail!("mixed training set smaller than the number of distributions");
                }
            }
            PipelineConfig::Warmstart(w) => {
                if w.kept < 2 || w.kept > w.products {
                    bail!("kept products must lie in 2..={}", w.products);
                }
                let largest = w.sizes.iter().copied().max().unwrap_or(0).max(w.pretrain_size);
                if largest + w.validation > w.samples {
                    bail!("{} samples cannot hold {largest} training plus {} validation", w.samples, w.validation);
                }
                check_methods(&w.methods)?;
                if w.methods.iter().any(|m| !m.model.is_neural()) {
                    bail!("warm start applies to neural methods only");
                }
            }
            PipelineConfig::Realdata(r) => {
                if r.ace_bins == 0 || r.split[0] == 0 || r.split[2] == 0 {
                    bail!("real-data split and bins must be positive");
                }
                check_methods(&r.methods)?;
            }
        }
        Ok(())
    }

    /// Methods named in the configuration, in order.
    pub fn methods(&self) -> Vec<&Method> {
        match &self.pipeline {
            PipelineConfig::Table1(g) | PipelineConfig::Table2(g) | PipelineConfig::Custom(g) => g.methods.iter().collect(),
            PipelineConfig::Table6(o) => vec![&o.method],
            PipelineConfig::Warmstart(w) => w.methods.iter().collect(),
            PipelineConfig::Realdata(r) => r.methods.iter().collect(),
        }
    }

    pub fn method(&self, label: &str) -> Result<&Method> {
        let methods = self.methods();
        methods.iter().copied().find(|m| m.label == label).with_context(|| {
            let known: Vec<&str> = methods.iter().map(|m| m.label.as_str()).collect();
            format!("no method {label:?} in config (known: {})", known.join(", "))
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
