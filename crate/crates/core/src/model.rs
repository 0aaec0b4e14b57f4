//! The two emphasis heads over frozen token embeddings, and checkpoints.
//!
//! * BiLSTM: `x -> BiLSTM(hidden_units) -> Linear(2 x 2*hidden_units) -> softmax`
//! * Dense: `x -> tanh(Linear(dense_units x d)) -> Linear(2 x dense_units) -> softmax`,
//!   applied to each token independently
//!
//! Either head may be preceded by a trainable `d x d` adapter on the frozen
//! embeddings.
//!
//! Checkpoints use the `CKP1` layout: magic `CKP1`, `u32` little-endian
//! header length, a UTF-8 `key=value` header (config, `best_epoch`,
//! `dev_match_average`, `source_tag` and one `tensor=<name> <shape>` line per
//! parameter in manifest order), then every tensor as little-endian `f64`
//! in that order.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, ArrayViewD};

use crate::corpus::LabelDistribution;
use crate::embedding_io::{EmbeddingFile, InstanceEmbeddings};
use crate::error::{Error, Result};
use crate::evaluation::Prediction;
use crate::kv;
use crate::nn::{
    bilstm_backward, bilstm_encode, kl_grad_logits, kl_loss, softmax2, BiLstmCache, Linear, LstmParams,
    OptimizerKind, ParamMut, Parameterized,
};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    BiLstm,
    Dense,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::BiLstm => "bilstm",
            HeadKind::Dense => "dense",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bilstm" => Ok(HeadKind::BiLstm),
            "dense" => Ok(HeadKind::Dense),
            other => Err(Error::Config(format!("unknown head `{other}` (expected bilstm|dense)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub head: HeadKind,
    pub hidden_units: usize,
    pub dense_units: usize,
    pub input_dim: usize,
    pub lr: f64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adapter: bool,
    /// Optional global gradient-norm clip applied before each update.
    pub max_grad_norm: Option<f64>,
}

impl ModelConfig {
    pub const DEFAULT_HIDDEN_UNITS: usize = 128;
    pub const DEFAULT_DENSE_UNITS: usize = 256;
    pub const DEFAULT_EPOCHS: usize = 20;
    pub const DEFAULT_BATCH_SIZE: usize = 32;
    pub const DEFAULT_LR: f64 = 3e-4;
    /// The learning-rate range swept by default in grids.
    pub const DEFAULT_LR_GRID: [f64; 3] = [2e-5, 1e-4, 3e-4];

    pub fn new(head: HeadKind, input_dim: usize) -> Self {
        Self {
            head,
            hidden_units: Self::DEFAULT_HIDDEN_UNITS,
            dense_units: Self::DEFAULT_DENSE_UNITS,
            input_dim,
            lr: Self::DEFAULT_LR,
            momentum: 0.0,
            optimizer: OptimizerKind::Sgd,
            epochs: Self::DEFAULT_EPOCHS,
            batch_size: Self::DEFAULT_BATCH_SIZE,
            seed: 0,
            adapter: false,
            max_grad_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_units", self.hidden_units),
            ("dense_units", self.dense_units),
            ("input_dim", self.input_dim),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::Config(format!("max_grad_norm must be positive, got {n}")));
            }
        }
        Ok(())
    }

    /// The config as ordered `key=value` pairs.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("head", self.head.to_string()),
            ("hidden_units", self.hidden_units.to_string()),
            ("dense_units", self.dense_units.to_string()),
            ("input_dim", self.input_dim.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("optimizer", self.optimizer.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("adapter", self.adapter.to_string()),
            (
                "max_grad_norm",
                self.max_grad_norm.map_or_else(|| "none".to_string(), |n| n.to_string()),
            ),
        ]
    }

    /// Sets one field from its `key=value` form. Returns `Ok(false)` for
    /// keys that are not config fields.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
        }
        match key {
            "head" => self.head = value.parse()?,
            "hidden_units" => self.hidden_units = num(key, value)?,
            "dense_units" => self.dense_units = num(key, value)?,
            "input_dim" => self.input_dim = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "adapter" => self.adapter = num(key, value)?,
            "max_grad_norm" => {
                self.max_grad_norm = match value {
                    "none" | "" => None,
                    v => Some(num(key, v)?),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    BiLstm {
        fwd: LstmParams,
        bwd: LstmParams,
        out: Linear,
    },
    Dense {
        hidden: Linear,
        out: Linear,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmphasisModel {
    config: ModelConfig,
    adapter: Option<Linear>,
    head: Head,
}

/// Everything [`EmphasisModel::backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    adapted: Option<Array2<f64>>,
    head: HeadCache,
    preds: Vec<LabelDistribution>,
}

impl ForwardCache {
    pub fn predictions(&self) -> &[LabelDistribution] {
        &self.preds
    }
}

#[derive(Debug, Clone)]
enum HeadCache {
    BiLstm { encoder: BiLstmCache, states: Array2<f64> },
    Dense { activations: Array2<f64> },
}

/// Builds a freshly initialized model. Each weight matrix is drawn from the
/// sub-stream `derive_seed(cfg.seed, k)` where `k` is its manifest position.
pub fn build_model(cfg: &ModelConfig) -> Result<EmphasisModel> {
    cfg.validate()?;
    let d = cfg.input_dim;
    let mut k = 0u64;
    let mut next_seed = || {
        let s = derive_seed(cfg.seed, k);
        k += 1;
        s
    };
    let adapter = if cfg.adapter {
        let layer = Linear::init(d, d, next_seed())?;
        next_seed();
        Some(layer)
    } else {
        None
    };
    let head = match cfg.head {
        HeadKind::BiLstm => {
            let h = cfg.hidden_units;
            let fwd = LstmParams::init(d, h, next_seed(), next_seed())?;
            next_seed();
            let bwd = LstmParams::init(d, h, next_seed(), next_seed())?;
            next_seed();
            let out = Linear::init(2, 2 * h, next_seed())?;
            Head::BiLstm { fwd, bwd, out }
        }
        HeadKind::Dense => {
            let hidden = Linear::init(cfg.dense_units, d, next_seed())?;
            next_seed();
            let out = Linear::init(2, cfg.dense_units, next_seed())?;
            Head::Dense { hidden, out }
        }
    };
    Ok(EmphasisModel {
        config: cfg.clone(),
        adapter,
        head,
    })
}

fn to_distributions(logits: &Array2<f64>) -> Result<Vec<LabelDistribution>> {
    logits
        .outer_iter()
        .map(|row| softmax2([row[0], row[1]]))
        .collect()
}

impl EmphasisModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn adapter(&self) -> Option<&Linear> {
        self.adapter.as_ref()
    }

    /// Per-token label distributions for one instance (`n x input_dim`).
    pub fn forward(&self, xs: ArrayView2<f64>) -> Result<Vec<LabelDistribution>> {
        Ok(self.forward_cached(xs)?.preds)
    }

    pub fn forward_cached(&self, xs: ArrayView2<f64>) -> Result<ForwardCache> {
        if xs.ncols() != self.config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_dim,
                found: xs.ncols(),
            });
        }
        if xs.nrows() == 0 {
            return Err(Error::Shape("forward: empty sequence".into()));
        }
        let adapted = match &self.adapter {
            Some(layer) => Some(layer.forward_rows(xs)?),
            None => None,
        };
        let x = adapted.as_ref().map_or(xs, |a| a.view());
        let (logits, head) = match &self.head {
            Head::BiLstm { fwd, bwd, out } => {
                let (states, encoder) = bilstm_encode(x, fwd, bwd)?;
                let logits = out.forward_rows(states.states.view())?;
                (
                    logits,
                    HeadCache::BiLstm {
                        encoder,
                        states: states.states,
                    },
                )
            }
            Head::Dense { hidden, out } => {
                let activations = hidden.forward_rows(x)?.mapv(f64::tanh);
                let logits = out.forward_rows(activations.view())?;
                (logits, HeadCache::Dense { activations })
            }
        };
        let preds = to_distributions(&logits)?;
        Ok(ForwardCache {
            input: xs.to_owned(),
            adapted,
            head,
            preds,
        })
    }

    /// Accumulates parameter gradients given the loss gradient with respect
    /// to the logits (`n x 2`).
    pub fn backward(&mut self, cache: &ForwardCache, d_logits: ArrayView2<f64>) -> Result<()> {
        if d_logits.dim() != (cache.preds.len(), 2) {
            return Err(Error::Shape(format!(
                "backward: logit gradient {:?} for {} tokens",
                d_logits.dim(),
                cache.preds.len()
            )));
        }
        let head_input = cache.adapted.as_ref().unwrap_or(&cache.input);
        let d_x = match (&mut self.head, &cache.head) {
            (Head::BiLstm { fwd, bwd, out }, HeadCache::BiLstm { encoder, states }) => {
                let d_states = out.backward_rows(states.view(), d_logits);
                bilstm_backward(encoder, d_states.view(), fwd, bwd)
            }
            (Head::Dense { hidden, out }, HeadCache::Dense { activations }) => {
                let mut d_act = out.backward_rows(activations.view(), d_logits);
                d_act.zip_mut_with(activations, |g, &a| *g *= 1.0 - a * a);
                hidden.backward_rows(head_input.view(), d_act.view())
            }
            _ => return Err(Error::invalid("forward cache belongs to a different head")),
        };
        if let Some(adapter) = &mut self.adapter {
            adapter.backward_rows(cache.input.view(), d_x.view());
        }
        Ok(())
    }

    /// Mean per-token KL divergence between `targets` and the model output.
    ///
    /// With `grad_scale = Some(s)`, also accumulates `s` times the gradient of
    /// that mean into the parameters.
    pub fn loss(
        &mut self,
        xs: ArrayView2<f64>,
        targets: &[LabelDistribution],
        grad_scale: Option<f64>,
    ) -> Result<f64> {
        if targets.len() != xs.nrows() {
            return Err(Error::Shape(format!(
                "{} targets for {} tokens",
                targets.len(),
                xs.nrows()
            )));
        }
        let cache = self.forward_cached(xs)?;
        let n = targets.len() as f64;
        let loss = targets
            .iter()
            .zip(&cache.preds)
            .map(|(t, p)| kl_loss(t, p))
            .sum::<f64>()
            / n;
        if let Some(scale) = grad_scale {
            let mut d_logits = Array2::zeros((targets.len(), 2));
            for (mut row, (t, p)) in d_logits.outer_iter_mut().zip(targets.iter().zip(&cache.preds)) {
                let g = kl_grad_logits(t, p);
                row[0] = g[0] * scale / n;
                row[1] = g[1] * scale / n;
            }
            self.backward(&cache, d_logits.view())?;
        }
        Ok(loss)
    }

    /// Predicted emphasis probability `p(I)` for each token of one instance.
    pub fn predict(&self, emb: &InstanceEmbeddings) -> Result<Prediction> {
        let preds = self.forward(emb.to_f64().view())?;
        Ok(Prediction::new(preds.iter().map(|d| d.p_i).collect()))
    }

    pub fn predict_file(&self, ef: &EmbeddingFile) -> Result<Vec<Prediction>> {
        if ef.dim() != self.config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_dim,
                found: ef.dim(),
            });
        }
        ef.instances().iter().map(|e| self.predict(e)).collect()
    }

    /// Names and shapes of all parameters in manifest order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.params()
            .into_iter()
            .map(|(name, v)| (name, v.shape().to_vec()))
            .collect()
    }
}

impl Parameterized for EmphasisModel {
    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        use crate::nn::param_prefixed as prefixed;
        let mut all = Vec::new();
        if let Some(adapter) = &mut self.adapter {
            all.extend(prefixed("adapter", adapter.params_mut()));
        }
        match &mut self.head {
            Head::BiLstm { fwd, bwd, out } => {
                all.extend(prefixed("fwd", fwd.params_mut()));
                all.extend(prefixed("bwd", bwd.params_mut()));
                all.extend(prefixed("out", out.params_mut()));
            }
            Head::Dense { hidden, out } => {
                all.extend(prefixed("hidden", hidden.params_mut()));
                all.extend(prefixed("out", out.params_mut()));
            }
        }
        all
    }

    fn params(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        use crate::nn::param_prefixed_ref as prefixed;
        let mut all = Vec::new();
        if let Some(adapter) = &self.adapter {
            all.extend(prefixed("adapter", adapter.params()));
        }
        match &self.head {
            Head::BiLstm { fwd, bwd, out } => {
                all.extend(prefixed("fwd", fwd.params()));
                all.extend(prefixed("bwd", bwd.params()));
                all.extend(prefixed("out", out.params()));
            }
            Head::Dense { hidden, out } => {
                all.extend(prefixed("hidden", hidden.params()));
                all.extend(prefixed("out", out.params()));
            }
        }
        all
    }
}

/// A trained model plus the metadata of the epoch that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: EmphasisModel,
    /// 1-based epoch the parameters were taken from.
    pub best_epoch: usize,
    pub dev_match_average: f64,
    pub source_tag: String,
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKP1";
const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "CKP1";

fn format_err(message: impl Into<String>) -> Error {
    Error::Format {
        format: FORMAT,
        message: message.into(),
    }
}

fn shape_string(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

pub fn save_checkpoint<W: Write>(ckpt: &Checkpoint, mut sink: W) -> Result<()> {
    if ckpt.source_tag.contains(['\n', '\r']) {
        return Err(Error::invalid("source tag must be a single line"));
    }
    let mut header = format!("version={CHECKPOINT_VERSION}\n");
    for (key, value) in ckpt.model.config.to_kv() {
        header.push_str(&format!("{key}={value}\n"));
    }
    header.push_str(&format!("best_epoch={}\n", ckpt.best_epoch));
    header.push_str(&format!("dev_match_average={}\n", ckpt.dev_match_average));
    header.push_str(&format!("source_tag={}\n", ckpt.source_tag));
    let params = ckpt.model.params();
    for (name, value) in &params {
        header.push_str(&format!("tensor={name} {}\n", shape_string(value.shape())));
    }
    let header_len = u32::try_from(header.len()).map_err(|_| Error::invalid("checkpoint header too long"))?;

    let mut bytes = Vec::with_capacity(8 + header.len() + ckpt.model.param_count() * 8);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&header_len.to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for (_, value) in &params {
        for v in value.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    sink.write_all(&bytes)?;
    sink.flush()?;
    Ok(())
}

pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    save_checkpoint(ckpt, &mut bytes)?;
    Ok(bytes)
}

pub fn load_checkpoint<R: Read>(mut source: R) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let truncated = |context: &str| Error::Truncated {
        format: FORMAT,
        context: context.to_string(),
    };
    if bytes.len() < 4 {
        return Err(truncated("magic"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(format_err(format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes.len() < 8 {
        return Err(truncated("header length"));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let header_end = 8usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| truncated("header"))?;
    let header =
        std::str::from_utf8(&bytes[8..header_end]).map_err(|_| format_err("header is not UTF-8"))?;

    let mut config = ModelConfig::new(HeadKind::BiLstm, 1);
    let mut version = None;
    let mut best_epoch = None;
    let mut dev_match_average = None;
    let mut source_tag = None;
    let mut tensors: Vec<(String, String)> = Vec::new();
    for entry in kv::parse(header)? {
        match entry.key.as_str() {
            "version" => version = Some(entry.parse_value::<u32>()?),
            "best_epoch" => best_epoch = Some(entry.parse_value::<usize>()?),
            "dev_match_average" => dev_match_average = Some(entry.parse_value::<f64>()?),
            "source_tag" => source_tag = Some(entry.value.clone()),
            "tensor" => {
                let (name, shape) = entry
                    .value
                    .split_once(' ')
                    .ok_or_else(|| format_err(format!("bad tensor line `{}`", entry.value)))?;
                tensors.push((name.to_string(), shape.to_string()));
            }
            key => {
                if !config.apply(key, &entry.value)? {
                    return Err(format_err(format!("unknown header key `{key}`")));
                }
            }
        }
    }
    match version {
        Some(CHECKPOINT_VERSION) => {}
        Some(v) => return Err(format_err(format!("unsupported version {v}"))),
        None => return Err(format_err("missing version")),
    }
    let best_epoch = best_epoch.ok_or_else(|| format_err("missing best_epoch"))?;
    let dev_match_average = dev_match_average.ok_or_else(|| format_err("missing dev_match_average"))?;
    let source_tag = source_tag.ok_or_else(|| format_err("missing source_tag"))?;

    let mut model = build_model(&config)?;
    let manifest = model.manifest();
    if manifest.len() != tensors.len() {
        return Err(Error::Shape(format!(
            "checkpoint lists {} tensors, config implies {}",
            tensors.len(),
            manifest.len()
        )));
    }
    for ((name, shape), (found_name, found_shape)) in manifest.iter().zip(&tensors) {
        if name != found_name || shape_string(shape) != *found_shape {
            return Err(Error::Shape(format!(
                "checkpoint tensor `{found_name}` {found_shape} disagrees with config (`{name}` {})",
                shape_string(shape)
            )));
        }
    }

    let payload = &bytes[header_end..];
    let expected = model.param_count() * 8;
    if payload.len() < expected {
        return Err(truncated("tensor payload"));
    }
    if payload.len() > expected {
        return Err(format_err("trailing bytes after tensor payload"));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for mut p in model.params_mut() {
        for slot in p.value.iter_mut() {
            *slot = values.next().expect("payload length checked");
        }
        if p.value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("checkpoint tensor `{}`", p.name)));
        }
    }
    Ok(Checkpoint {
        model,
        best_epoch,
        dev_match_average,
        source_tag,
    })
}
