//! Assortment networks (gated and residual, with optional feature encoders), the TasteNet
//! and DeepMNL baselines, mini-batch training, warm-start transplant and persistence.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Batch, GraphBuilder, Init, InputKind, LayerGraph, NodeId, Tensor, Workspace};
use crate::data::{ChoiceDataset, ProbVector};
use crate::error::{Error, Result};
use crate::rng::{seeded, ChoiceRng};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Samples per forward pass when evaluating whole datasets.
const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GasnSpec {
    pub n: usize,
    /// Hidden widths; empty means a single affine map `n -> n`.
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RasnSpec {
    pub n: usize,
    pub blocks: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_hidden: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub product_dim: usize,
    /// `None` when customers carry no features; the encoder then sees the constant 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub customer_dim: Option<usize>,
    pub latent_dim: usize,
    /// Layer widths of the shared product encoder, ending in `latent_dim`.
    pub product_layers: Vec<usize>,
    /// Layer widths of the customer encoder, ending in `latent_dim`.
    pub customer_layers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Gasn(GasnSpec),
    Rasn(RasnSpec),
    GasnF {
        assortment_net: GasnSpec,
        encoder: EncoderSpec,
        /// Feed `u ⊙ S` when true, the bare utilities otherwise.
        #[serde(default = "default_true")]
        masked_input: bool,
    },
    RasnF { assortment_net: RasnSpec, encoder: EncoderSpec },
    TasteNet {
        n: usize,
        product_dim: usize,
        customer_dim: usize,
        /// Customer network widths, ending in `n * product_dim`.
        widths: Vec<usize>,
    },
    DeepMnl {
        n: usize,
        product_dim: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        customer_dim: Option<usize>,
        /// Hidden widths; a final scalar output layer is appended.
        widths: Vec<usize>,
    },
}

fn default_true() -> bool {
    true
}

fn positive(widths: &[usize], what: &str) -> Result<()> {
    if widths.contains(&0) {
        return Err(Error::Config(format!("{what} widths must be positive")));
    }
    Ok(())
}

impl EncoderSpec {
    fn validate(&self) -> Result<()> {
        positive(&self.product_layers, "product encoder")?;
        positive(&self.customer_layers, "customer encoder")?;
        for (name, layers) in [("product", &self.product_layers), ("customer", &self.customer_layers)] {
            if layers.last() != Some(&self.latent_dim) {
                return Err(Error::Config(format!("{name} encoder must end in width {}", self.latent_dim)));
            }
        }
        if self.product_dim == 0 || self.customer_dim == Some(0) {
            return Err(Error::Config("feature lengths must be positive".into()));
        }
        Ok(())
    }
}

/// Where the customer-feature input comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CustomerInput {
    None,
    /// A single constant 1.
    Constant,
    Features(usize),
}

impl Architecture {
    pub fn n(&self) -> usize {
        match self {
            Self::Gasn(s) => s.n,
            Self::Rasn(s) => s.n,
            Self::GasnF { assortment_net, .. } => assortment_net.n,
            Self::RasnF { assortment_net, .. } => assortment_net.n,
            Self::TasteNet { n, .. } | Self::DeepMnl { n, .. } => *n,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Gasn(_) => "GAsN",
            Self::Rasn(_) => "RAsN",
            Self::GasnF { .. } => "GAsN(f)",
            Self::RasnF { .. } => "RAsN(f)",
            Self::TasteNet { .. } => "TasteNet",
            Self::DeepMnl { .. } => "DeepMNL",
        }
    }

    pub fn product_dim(&self) -> Option<usize> {
        match self {
            Self::Gasn(_) | Self::Rasn(_) => None,
            Self::GasnF { encoder, .. } | Self::RasnF { encoder, .. } => Some(encoder.product_dim),
            Self::TasteNet { product_dim, .. } | Self::DeepMnl { product_dim, .. } => Some(*product_dim),
        }
    }

    pub fn customer_input(&self) -> CustomerInput {
        let from = |d: Option<usize>| d.map_or(CustomerInput::Constant, CustomerInput::Features);
        match self {
            Self::Gasn(_) | Self::Rasn(_) => CustomerInput::None,
            Self::GasnF { encoder, .. } | Self::RasnF { encoder, .. } => from(encoder.customer_dim),
            Self::TasteNet { customer_dim, .. } => CustomerInput::Features(*customer_dim),
            Self::DeepMnl { customer_dim, .. } => customer_dim.map_or(CustomerInput::None, CustomerInput::Features),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n() == 0 {
            return Err(Error::Config("architecture needs at least one product".into()));
        }
        match self {
            Self::Gasn(s) => positive(&s.hidden, "hidden"),
            Self::Rasn(s) | Self::RasnF { assortment_net: s, .. } if s.blocks == 0 => {
                Err(Error::Config("residual nets need at least one block".into()))
            }
            Self::Rasn(s) => positive(s.block_hidden.as_slice(), "block"),
            Self::GasnF { assortment_net, encoder, .. } => {
                positive(&assortment_net.hidden, "hidden")?;
                encoder.validate()
            }
            Self::RasnF { assortment_net, encoder } => {
                positive(assortment_net.block_hidden.as_slice(), "block")?;
                encoder.validate()
            }
            Self::TasteNet { n, product_dim, customer_dim, widths } => {
                positive(widths, "customer net")?;
                if widths.last() != Some(&(n * product_dim)) || *customer_dim == 0 {
                    return Err(Error::Config(format!("TasteNet customer net must end in width {}", n * product_dim)));
                }
                Ok(())
            }
            Self::DeepMnl { product_dim, widths, .. } => {
                positive(widths, "hidden")?;
                if *product_dim == 0 {
                    return Err(Error::Config("DeepMNL needs product features".into()));
                }
                Ok(())
            }
        }
    }

    /// Builds the network graph with fresh parameters.
    pub fn build(&self, init: Init<'_>) -> Result<LayerGraph> {
        self.validate()?;
        let n = self.n();
        let mut g = GraphBuilder::new(init);
        let s = g.input(InputKind::Assortment, 1, n);
        let logits = match self {
            Self::Gasn(spec) => gasn_stack(&mut g, s, spec),
            Self::Rasn(spec) => rasn_stack(&mut g, s, spec),
            Self::GasnF { assortment_net, encoder, masked_input } => {
                let u = latent_utilities(&mut g, encoder, n);
                let x = if *masked_input { g.mul(u, s) } else { u };
                gasn_stack(&mut g, x, assortment_net)
            }
            Self::RasnF { assortment_net, encoder } => {
                let u = latent_utilities(&mut g, encoder, n);
                let x = g.concat(u, s);
                rasn_stack(&mut g, x, assortment_net)
            }
            Self::TasteNet { product_dim, customer_dim, widths, .. } => {
                let f = g.input(InputKind::ProductFeatures, n, *product_dim);
                let c = g.input(InputKind::CustomerFeatures, 1, *customer_dim);
                let alpha = g.affine_stack(c, widths, false, "taste");
                let alpha = g.reshape(alpha, n, *product_dim);
                let u = g.inner_product(f, alpha);
                g.reshape(u, 1, n)
            }
            Self::DeepMnl { product_dim, customer_dim, widths, .. } => {
                let f = g.input(InputKind::ProductFeatures, n, *product_dim);
                let x = match customer_dim {
                    Some(d) => {
                        let c = g.input(InputKind::CustomerFeatures, 1, *d);
                        g.concat(c, f)
                    }
                    None => f,
                };
                let mut all = widths.clone();
                all.push(1);
                let u = g.affine_stack(x, &all, false, "utility");
                g.reshape(u, 1, n)
            }
        };
        Ok(g.finish(logits, s))
    }
}

fn gasn_stack(g: &mut GraphBuilder<'_>, x: NodeId, spec: &GasnSpec) -> NodeId {
    let mut widths = spec.hidden.clone();
    widths.push(spec.n);
    g.affine_stack(x, &widths, false, "gasn")
}

fn rasn_stack(g: &mut GraphBuilder<'_>, mut x: NodeId, spec: &RasnSpec) -> NodeId {
    let width = g.shape(x).1;
    for b in 0..spec.blocks {
        let name = format!("block.{b}");
        let mut widths: Vec<usize> = spec.block_hidden.into_iter().collect();
        widths.push(width);
        let f = g.affine_stack(x, &widths, true, &name);
        x = g.add(x, f);
    }
    g.affine(x, spec.n, true, "out")
}

/// `u_i = <enc_p(f_i), enc_c(g)>`, marked as "latent".
fn latent_utilities(g: &mut GraphBuilder<'_>, spec: &EncoderSpec, n: usize) -> NodeId {
    let f = g.input(InputKind::ProductFeatures, n, spec.product_dim);
    let c = g.input(InputKind::CustomerFeatures, 1, spec.customer_dim.unwrap_or(1));
    let pe = g.affine_stack(f, &spec.product_layers, false, "product_encoder");
    let ce = g.affine_stack(c, &spec.customer_layers, false, "customer_encoder");
    let u = g.inner_product(pe, ce);
    let u = g.reshape(u, 1, n);
    g.mark("latent", u);
    u
}

/// Mini-batch training settings. Defaults come from configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 || self.patience == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("training settings must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_ce: f64,
    pub val_ce: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were restored.
    pub best_epoch: usize,
    pub best_val_ce: f64,
}

impl TrainHistory {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for record in &self.epochs {
            w.serialize(record)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A network together with the architecture that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralModel {
    architecture: Architecture,
    graph: LayerGraph,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    architecture: Architecture,
    params: Vec<Tensor>,
}

impl NeuralModel {
    pub fn new(architecture: Architecture, rng: &mut ChoiceRng) -> Result<Self> {
        let graph = architecture.build(Init::Glorot(rng))?;
        Ok(Self { architecture, graph })
    }

    /// Every parameter zero; mostly useful for tests.
    pub fn zeros(architecture: Architecture) -> Result<Self> {
        let graph = architecture.build(Init::Zeros)?;
        Ok(Self { architecture, graph })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn graph(&self) -> &LayerGraph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut LayerGraph {
        &mut self.graph
    }

    pub fn n(&self) -> usize {
        self.architecture.n()
    }

    /// Checks that `dataset` provides every input the network reads.
    pub fn check_dataset(&self, dataset: &ChoiceDataset) -> Result<()> {
        if dataset.n() != self.n() {
            return Err(Error::Dimension(format!("model has {} products, dataset {}", self.n(), dataset.n())));
        }
        if let Some(d) = self.architecture.product_dim() {
            match dataset.product_dim() {
                Some(got) if got == d => {}
                Some(got) => return Err(Error::Dimension(format!("product features have length {got}, model expects {d}"))),
                None => return Err(Error::MissingFeatures("model needs product features".into())),
            }
        }
        if let CustomerInput::Features(d) = self.architecture.customer_input() {
            match dataset.customer_dim() {
                Some(got) if got == d => {}
                Some(got) => return Err(Error::Dimension(format!("customer features have length {got}, model expects {d}"))),
                None => return Err(Error::MissingFeatures("model needs customer features".into())),
            }
        }
        Ok(())
    }

    /// Fills `batch` with observations `indices` of `dataset`.
    pub fn fill_batch(&self, dataset: &ChoiceDataset, indices: &[usize], batch: &mut Batch) -> Result<()> {
        batch.clear();
        batch.size = indices.len();
        let product_dim = self.architecture.product_dim();
        let customer = self.architecture.customer_input();
        for &k in indices {
            let obs = &dataset.observations[k];
            batch.assortment.extend(obs.assortment.to_bits());
            batch.choices.push(obs.choice);
            if product_dim.is_some() {
                let table = dataset
                    .features_for(k)
                    .ok_or_else(|| Error::MissingFeatures(format!("observation {k} has no product features")))?;
                batch.product_features.extend_from_slice(table.values());
            }
            match customer {
                CustomerInput::None => {}
                CustomerInput::Constant => batch.customer_features.push(1.0),
                CustomerInput::Features(_) => {
                    let g = obs
                        .customer_features
                        .as_ref()
                        .ok_or_else(|| Error::MissingFeatures(format!("observation {k} has no customer features")))?;
                    batch.customer_features.extend_from_slice(g);
                }
            }
        }
        Ok(())
    }

    pub fn predict(&self, dataset: &ChoiceDataset) -> Result<Vec<ProbVector>> {
        self.check_dataset(dataset)?;
        let mut out = Vec::with_capacity(dataset.len());
        let (mut batch, mut ws) = (Batch::default(), Workspace::default());
        let all: Vec<usize> = (0..dataset.len()).collect();
        for chunk in all.chunks(EVAL_CHUNK) {
            self.fill_batch(dataset, chunk, &mut batch)?;
            out.extend(self.graph.predict(&batch, &mut ws)?);
        }
        Ok(out)
    }

    /// Mean cross-entropy on `dataset`.
    pub fn cross_entropy(&self, dataset: &ChoiceDataset) -> Result<f64> {
        self.check_dataset(dataset)?;
        let (mut batch, mut ws) = (Batch::default(), Workspace::default());
        let all: Vec<usize> = (0..dataset.len()).collect();
        let mut total = 0.0;
        for chunk in all.chunks(EVAL_CHUNK) {
            self.fill_batch(dataset, chunk, &mut batch)?;
            self.graph.forward(&batch, &mut ws)?;
            total += self.graph.loss(&batch, &ws) * chunk.len() as f64;
        }
        Ok(total / dataset.len() as f64)
    }

    /// Latent utilities (encoder output) and pre-gate logits for the given observations.
    pub fn utilities(&self, dataset: &ChoiceDataset, indices: &[usize]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let latent = self
            .graph
            .mark("latent")
            .ok_or_else(|| Error::Incompatible(format!("{} exposes no latent utilities", self.architecture.label())))?;
        let logits = self.graph.mark("logits").expect("every graph marks its logits");
        self.check_dataset(dataset)?;
        let n = self.n();
        let (mut batch, mut ws) = (Batch::default(), Workspace::default());
        self.fill_batch(dataset, indices, &mut batch)?;
        self.graph.forward(&batch, &mut ws)?;
        Ok((0..indices.len())
            .map(|s| {
                (ws.values(latent)[s * n..(s + 1) * n].to_vec(), ws.values(logits)[s * n..(s + 1) * n].to_vec())
            })
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            architecture: self.architecture.clone(),
            params: self.graph.params().to_vec(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt { path: path.to_path_buf(), reason };
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| corrupt(e.to_string()))?;
        let version = value.get("format_version").and_then(serde_json::Value::as_u64);
        match version {
            Some(v) if v == u64::from(MODEL_FORMAT_VERSION) => {}
            Some(v) => return Err(Error::FormatVersion { found: v as u32, expected: MODEL_FORMAT_VERSION }),
            None => return Err(corrupt("missing format_version".into())),
        }
        let file: ModelFile = serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))?;
        let mut model = Self::zeros(file.architecture)?;
        let params = model.graph.params_mut();
        if params.len() != file.params.len() {
            return Err(corrupt(format!("{} tensors stored, architecture has {}", file.params.len(), params.len())));
        }
        for (dst, src) in params.iter_mut().zip(file.params) {
            if (dst.name.as_str(), dst.rows, dst.cols) != (src.name.as_str(), src.rows, src.cols)
                || src.values.len() != src.rows * src.cols
            {
                return Err(corrupt(format!("tensor {} has the wrong shape", src.name)));
            }
            *dst = src;
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text, path)
    }
}

/// Trains `model` in place and returns the per-epoch history. The parameters with the
/// lowest validation cross-entropy are restored at the end.
pub fn train(model: &mut NeuralModel, train: &ChoiceDataset, val: &ChoiceDataset, config: &TrainConfig) -> Result<TrainHistory> {
    config.validate()?;
    model.check_dataset(train)?;
    model.check_dataset(val)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidDataset("training and validation sets must be non-empty".into()));
    }
    let mut rng = seeded(config.seed);
    let mut adam = Adam::new(AdamConfig::with_learning_rate(config.learning_rate), model.graph.params());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let (mut batch, mut ws) = (Batch::default(), Workspace::default());
    let mut grads = model.graph.zero_gradients();
    let mut history = TrainHistory { best_val_ce: f64::INFINITY, ..TrainHistory::default() };
    let mut best_params: Vec<Tensor> = model.graph.params().to_vec();
    let start = Instant::now();
    let non_finite = |epoch| Error::NonFiniteLoss { epoch, learning_rate: config.learning_rate };

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            model.fill_batch(train, chunk, &mut batch)?;
            match model.graph.forward(&batch, &mut ws) {
                Err(Error::NonFinite(_)) => return Err(non_finite(epoch)),
                other => other?,
            }
            let loss = model.graph.loss(&batch, &ws);
            if !loss.is_finite() {
                return Err(non_finite(epoch));
            }
            total += loss * chunk.len() as f64;
            grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
            model.graph.backward(&batch, &mut ws, &mut grads)?;
            adam.update(model.graph.params_mut(), &grads);
        }
        let val_ce = match model.cross_entropy(val) {
            Err(Error::NonFinite(_)) => return Err(non_finite(epoch)),
            other => other?,
        };
        if !val_ce.is_finite() {
            return Err(non_finite(epoch));
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_ce: total / train.len() as f64,
            val_ce,
            wall_ms: start.elapsed().as_millis() as u64,
        });
        log::debug!("epoch {epoch}: train {:.4} val {val_ce:.4}", total / train.len() as f64);
        if val_ce < history.best_val_ce {
            history.best_val_ce = val_ce;
            history.best_epoch = epoch;
            best_params.clone_from_slice(model.graph.params());
        } else if epoch - history.best_epoch >= config.patience {
            break;
        }
    }
    model.graph.params_mut().clone_from_slice(&best_params);
    Ok(history)
}

/// Copies every parameter of `old` into the leading rows and columns of the matching
/// tensor of `new`; the remaining entries keep their values.
pub fn warm_start_transplant(old: &NeuralModel, new: &mut NeuralModel) -> Result<()> {
    let (src, dst) = (old.graph.params(), new.graph.params_mut());
    if std::mem::discriminant(&old.architecture) != std::mem::discriminant(&new.architecture) || src.len() != dst.len() {
        return Err(Error::Incompatible(format!(
            "{} with {} tensors vs {} with {} tensors",
            old.architecture.label(),
            src.len(),
            new.architecture.label(),
            dst.len()
        )));
    }
    for (s, d) in src.iter().zip(dst.iter()) {
        if s.name != d.name || s.rows > d.rows || s.cols > d.cols {
            return Err(Error::Incompatible(format!(
                "tensor {} ({}x{}) does not embed into {} ({}x{})",
                s.name, s.rows, s.cols, d.name, d.rows, d.cols
            )));
        }
    }
    for (s, d) in src.iter().zip(dst.iter_mut()) {
        for r in 0..s.rows {
            for c in 0..s.cols {
                d.set(r, c, s.get(r, c));
            }
        }
    }
    Ok(())
}
