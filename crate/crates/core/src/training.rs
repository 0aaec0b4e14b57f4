//! Mini-batched training with per-epoch dev evaluation and best-epoch
//! selection.
//!
//! A batch's loss is the mean over its instances of each instance's mean
//! per-token KL, padded positions excluded. Instance order is reshuffled
//! every epoch from `derive_seed(seed, epoch)`.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3};

use crate::corpus::{target_distribution, Corpus, LabelDistribution};
use crate::embedding_io::{validate_alignment, EmbeddingFile};
use crate::error::{Error, Result};
use crate::evaluation::{match_report, MatchReport};
use crate::model::{build_model, Checkpoint, EmphasisModel, ModelConfig};
use crate::nn::{clip_grad_norm, Optimizer, Parameterized};
use crate::rng::{derive_seed, SplitMix64};

/// Up to `batch_size` instances padded with zero rows to the longest one.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `B x T x d`.
    pub embeddings: Array3<f64>,
    /// `B x T`, true on real tokens.
    pub mask: Array2<bool>,
    /// Per instance, one target per real token.
    pub targets: Vec<Vec<LabelDistribution>>,
    pub lengths: Vec<usize>,
    /// Position of each batch row in the source corpus.
    pub instance_indices: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn padded_len(&self) -> usize {
        self.embeddings.dim().1
    }

    /// Builds a batch from corpus positions, in the given order.
    pub fn from_indices(corpus: &Corpus, ef: &EmbeddingFile, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let lengths: Vec<usize> = indices.iter().map(|&k| corpus.instances()[k].len()).collect();
        let t = lengths.iter().copied().max().unwrap_or(0);
        let mut embeddings = Array3::zeros((indices.len(), t, ef.dim()));
        let mut mask = Array2::from_elem((indices.len(), t), false);
        let mut targets = Vec::with_capacity(indices.len());
        for (row, &k) in indices.iter().enumerate() {
            let inst = &corpus.instances()[k];
            let emb = &ef.instances()[k];
            if emb.n_tokens() != inst.len() {
                return Err(Error::Alignment(format!(
                    "instance `{}`: {} embedding rows for {} tokens",
                    inst.id(),
                    emb.n_tokens(),
                    inst.len()
                )));
            }
            let n = inst.len();
            embeddings
                .slice_mut(s![row, ..n, ..])
                .assign(&emb.vectors().mapv(f64::from));
            mask.slice_mut(s![row, ..n]).fill(true);
            targets.push(target_distribution(inst));
        }
        Ok(Batch {
            embeddings,
            mask,
            targets,
            lengths,
            instance_indices: indices.to_vec(),
        })
    }

    /// Appends `extra` zero pad positions to every row.
    pub fn with_extra_padding(&self, extra: usize) -> Batch {
        let (b, t, d) = self.embeddings.dim();
        let mut embeddings = Array3::zeros((b, t + extra, d));
        embeddings.slice_mut(s![.., ..t, ..]).assign(&self.embeddings);
        let mut mask = Array2::from_elem((b, t + extra), false);
        mask.slice_mut(s![.., ..t]).assign(&self.mask);
        Batch {
            embeddings,
            mask,
            ..self.clone()
        }
    }
}

pub fn make_batches(
    corpus: &Corpus,
    ef: &EmbeddingFile,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    validate_alignment(corpus, ef)?;
    let order = SplitMix64::new(derive_seed(seed, epoch as u64)).permutation(corpus.len());
    order
        .chunks(batch_size)
        .map(|chunk| Batch::from_indices(corpus, ef, chunk))
        .collect()
}

/// Masked batch loss. With `backprop`, accumulates its gradient into the
/// model.
pub fn batch_loss(model: &mut EmphasisModel, batch: &Batch, backprop: bool) -> Result<f64> {
    let b = batch.size();
    let scale = backprop.then_some(1.0 / b as f64);
    let mut total = 0.0;
    for row in 0..b {
        let n = batch.mask.row(row).iter().filter(|&&m| m).count();
        let xs = batch.embeddings.slice(s![row, ..n, ..]);
        total += model.loss(xs, &batch.targets[row], scale)?;
    }
    Ok(total / b as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean over training instances of the per-instance loss.
    pub train_loss: f64,
    pub dev: MatchReport,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.dev.m_scores;
        write!(
            f,
            "epoch={} loss={} m1={} m2={} m3={} m4={} average={}",
            self.epoch, self.train_loss, m[0], m[1], m[2], m[3], self.dev.average
        )
    }
}

impl FromStr for EpochRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        for part in line.split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("history field `{part}` lacks `=`")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| -> Result<f64> {
            fields
                .get(k)
                .ok_or_else(|| Error::invalid(format!("history record missing `{k}`")))?
                .parse::<f64>()
                .map_err(|e| Error::invalid(format!("history field `{k}`: {e}")))
        };
        let epoch = fields
            .get("epoch")
            .ok_or_else(|| Error::invalid("history record missing `epoch`"))?
            .parse::<usize>()
            .map_err(|e| Error::invalid(format!("history field `epoch`: {e}")))?;
        let dev = MatchReport::from_scores([get("m1")?, get("m2")?, get("m3")?, get("m4")?]);
        Ok(EpochRecord {
            epoch,
            train_loss: get("loss")?,
            dev,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Record with the highest dev average, earliest on ties.
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records
            .iter()
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.dev.average >= r.dev.average => Some(b),
                _ => Some(r),
            })
    }

    pub fn to_text(&self) -> String {
        self.records.iter().map(|r| format!("{r}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        Ok(TrainHistory { records })
    }
}

impl fmt::Display for TrainHistory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

pub type DataSplit<'a> = (&'a Corpus, &'a EmbeddingFile);

fn check_split(name: &str, (corpus, ef): DataSplit<'_>, dim: usize) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::invalid(format!("{name} corpus is empty")));
    }
    if ef.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: ef.dim(),
        });
    }
    validate_alignment(corpus, ef)
}

pub fn train(cfg: &ModelConfig, train: DataSplit<'_>, dev: DataSplit<'_>) -> Result<(Checkpoint, TrainHistory)> {
    train_with_progress(cfg, train, dev, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_progress(
    cfg: &ModelConfig,
    train: DataSplit<'_>,
    dev: DataSplit<'_>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Checkpoint, TrainHistory)> {
    cfg.validate()?;
    check_split("train", train, cfg.input_dim)?;
    check_split("dev", dev, cfg.input_dim)?;
    let (train_corpus, train_ef) = train;
    let (dev_corpus, dev_ef) = dev;

    let mut model = build_model(cfg)?;
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.lr, cfg.momentum)?;
    let mut history = TrainHistory::default();
    let mut best: Option<(EmphasisModel, EpochRecord)> = None;

    for epoch in 1..=cfg.epochs {
        let batches = make_batches(train_corpus, train_ef, cfg.batch_size, cfg.seed, epoch)?;
        let mut loss_sum = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let at = |e: Error| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("{msg} at epoch {epoch}, batch {}", b + 1)),
                other => other,
            };
            model.zero_grad();
            let loss = batch_loss(&mut model, batch, true).map_err(at)?;
            if !loss.is_finite() {
                return Err(at(Error::NonFinite(format!("loss {loss}"))));
            }
            if let Some(max) = cfg.max_grad_norm {
                clip_grad_norm(&mut model.params_mut(), max);
            }
            optimizer.step(&mut model).map_err(at)?;
            loss_sum += loss * batch.size() as f64;
        }
        let preds = model.predict_file(dev_ef).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("{msg} evaluating dev after epoch {epoch}")),
            other => other,
        })?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_corpus.len() as f64,
            dev: match_report(dev_corpus, &preds)?,
        };
        on_epoch(&record);
        history.records.push(record);
        if best.as_ref().is_none_or(|(_, r)| record.dev.average > r.dev.average) {
            best = Some((model.clone(), record));
        }
    }

    let (model, record) = best.expect("at least one epoch");
    let ckpt = Checkpoint {
        model,
        best_epoch: record.epoch,
        dev_match_average: record.dev.average,
        source_tag: train_ef.source_tag().to_string(),
    };
    Ok((ckpt, history))
}
