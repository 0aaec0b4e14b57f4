//! Python bindings: corpora, embedding files, models, training and the
//! evaluation/analysis functions. Scores cross the boundary as plain lists.

use std::fs;

use emphasis::corpus::{parse_corpus, target_distribution, write_corpus};
use emphasis::embedding_io::{read_emb, validate_alignment, write_emb};
use emphasis::ensemble::{combine_predictions, ensemble_weights, EnsembleMode};
use emphasis::evaluation::{length_counts, length_report, match_report, pos_report, random_baseline};
use emphasis::model::{build_model, checkpoint_to_bytes, load_checkpoint};
use emphasis::nn::{kl_loss as nn_kl_loss, softmax2 as nn_softmax2};
use emphasis::synthetic::{random_corpus, random_model_grad_check, separable_corpus};
use emphasis::training::train_with_progress;
use emphasis::{
    Checkpoint as CoreCheckpoint, Corpus as CoreCorpus, EmbeddingFile, EmphasisModel, Error, HeadKind,
    InstanceEmbeddings, LabelDistribution, MatchReport, ModelConfig as CoreConfig, Prediction,
};
use pyo3::exceptions::{PyFloatingPointError, PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        e if e.is_numeric() => PyFloatingPointError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for emphasis::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn io<T>(r: std::io::Result<T>) -> PyResult<T> {
    r.map_err(|e| PyIOError::new_err(e.to_string()))
}

fn report_dict<'py>(py: Python<'py>, r: &MatchReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (m, s) in r.m_scores.iter().enumerate() {
        d.set_item(format!("m{}", m + 1), s)?;
    }
    d.set_item("average", r.average)?;
    Ok(d)
}

fn predictions(scores: Vec<Vec<f64>>) -> Vec<Prediction> {
    scores.into_iter().map(Prediction::new).collect()
}

fn scores(preds: Vec<Prediction>) -> Vec<Vec<f64>> {
    preds.into_iter().map(|p| p.scores().to_vec()).collect()
}

/// An annotated corpus in the normalized TSV format.
#[pyclass(module = "emphasis_py", skip_from_py_object)]
#[derive(Clone)]
struct Corpus {
    inner: CoreCorpus,
}

#[pymethods]
impl Corpus {
    #[staticmethod]
    #[pyo3(signature = (text, split_name = "corpus"))]
    fn parse(text: &str, split_name: &str) -> PyResult<Self> {
        Ok(Corpus { inner: parse_corpus(text.as_bytes(), split_name).py()? })
    }

    #[staticmethod]
    #[pyo3(signature = (path, split_name = None))]
    fn read(path: &str, split_name: Option<&str>) -> PyResult<Self> {
        let bytes = io(fs::read(path))?;
        let name = split_name.unwrap_or(path);
        Ok(Corpus { inner: parse_corpus(bytes.as_slice(), name).py()? })
    }

    fn to_tsv(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        write_corpus(&self.inner, &mut buf).py()?;
        String::from_utf8(buf).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn write(&self, path: &str) -> PyResult<()> {
        io(fs::write(path, self.to_tsv()?))
    }

    #[getter]
    fn split_name(&self) -> &str {
        self.inner.split_name()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn token_count(&self) -> usize {
        self.inner.token_count()
    }

    fn ids(&self) -> Vec<String> {
        self.inner.iter().map(|i| i.id().to_string()).collect()
    }

    /// Token texts of instance `i`.
    fn tokens(&self, i: usize) -> PyResult<Vec<String>> {
        Ok(self.instance(i)?.tokens().iter().map(|t| t.text.clone()).collect())
    }

    fn pos_tags(&self, i: usize) -> PyResult<Vec<Option<String>>> {
        Ok(self.instance(i)?.tokens().iter().map(|t| t.pos.clone()).collect())
    }

    /// Target emphasis probabilities (count / annotators) of instance `i`.
    fn targets(&self, i: usize) -> PyResult<Vec<f64>> {
        Ok(target_distribution(self.instance(i)?).iter().map(|d| d.p_i).collect())
    }

    /// Instance counts in the short, medium and long buckets.
    fn length_counts(&self) -> [usize; 3] {
        length_counts(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!("Corpus({:?}, {} instances)", self.inner.split_name(), self.inner.len())
    }
}

impl Corpus {
    fn instance(&self, i: usize) -> PyResult<&emphasis::AnnotatedInstance> {
        self.inner
            .instances()
            .get(i)
            .ok_or_else(|| PyIndexError::new_err(format!("instance {i} out of range")))
    }
}

/// Frozen per-token vectors in the EMB1 format.
#[pyclass(module = "emphasis_py", skip_from_py_object)]
#[derive(Clone)]
struct Embeddings {
    inner: EmbeddingFile,
}

#[pymethods]
impl Embeddings {
    #[new]
    #[pyo3(signature = (instances, source_tag = "python"))]
    fn new(instances: Vec<Vec<Vec<f32>>>, source_tag: &str) -> PyResult<Self> {
        let rows = instances
            .iter()
            .map(|rows| InstanceEmbeddings::from_rows(rows))
            .collect::<emphasis::Result<Vec<_>>>()
            .py()?;
        let dim = rows.first().map_or(0, InstanceEmbeddings::dim);
        Ok(Embeddings { inner: EmbeddingFile::new(dim, source_tag, rows).py()? })
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        let bytes = io(fs::read(path))?;
        Ok(Embeddings { inner: read_emb(bytes.as_slice()).py()? })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Embeddings { inner: read_emb(data).py()? })
    }

    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        let mut buf = Vec::new();
        write_emb(&self.inner, &mut buf).py()?;
        Ok(buf)
    }

    fn write(&self, path: &str) -> PyResult<()> {
        io(fs::write(path, self.to_bytes()?))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn source_tag(&self) -> &str {
        self.inner.source_tag()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn instance(&self, i: usize) -> PyResult<Vec<Vec<f32>>> {
        let e = self
            .inner
            .instances()
            .get(i)
            .ok_or_else(|| PyIndexError::new_err(format!("instance {i} out of range")))?;
        Ok(e.vectors().rows().into_iter().map(|r| r.to_vec()).collect())
    }

    /// Raises if the file does not line up with `corpus` token for token.
    fn check_alignment(&self, corpus: &Corpus) -> PyResult<()> {
        validate_alignment(&corpus.inner, &self.inner).py()
    }

    fn __repr__(&self) -> String {
        format!("Embeddings({:?}, dim={}, {} instances)", self.inner.source_tag(), self.inner.dim(), self.inner.len())
    }
}

/// Hyperparameters; keyword arguments use the same keys as config files.
#[pyclass(module = "emphasis_py", skip_from_py_object)]
#[derive(Clone)]
struct ModelConfig {
    inner: CoreConfig,
}

#[pymethods]
impl ModelConfig {
    #[new]
    #[pyo3(signature = (head, input_dim, **options))]
    fn new(head: &str, input_dim: usize, options: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let head: HeadKind = head.parse().py()?;
        let mut cfg = ModelConfig { inner: CoreConfig::new(head, input_dim) };
        if let Some(options) = options {
            for (k, v) in options.iter() {
                cfg.set(&k.extract::<String>()?, &v)?;
            }
        }
        cfg.inner.validate().py()?;
        Ok(cfg)
    }

    /// Set one option, e.g. `cfg.set("lr", 0.01)`.
    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        let text = match value.extract::<bool>() {
            Ok(b) => b.to_string(),
            Err(_) => value.str()?.to_string(),
        };
        if !self.inner.apply(key, &text).py()? {
            return Err(PyValueError::new_err(format!("unknown config key `{key}`")));
        }
        Ok(())
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for (k, v) in self.inner.to_kv() {
            d.set_item(k, v)?;
        }
        Ok(d)
    }

    fn __repr__(&self) -> String {
        let pairs: Vec<String> = self.inner.to_kv().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("ModelConfig({})", pairs.join(", "))
    }
}

/// A BiLSTM or dense emphasis head.
#[pyclass(module = "emphasis_py", skip_from_py_object)]
#[derive(Clone)]
struct Model {
    inner: EmphasisModel,
}

#[pymethods]
impl Model {
    /// A freshly initialized model (seeded by `config`).
    #[new]
    fn new(config: &ModelConfig) -> PyResult<Self> {
        Ok(Model { inner: build_model(&config.inner).py()? })
    }

    #[getter]
    fn config(&self) -> ModelConfig {
        ModelConfig { inner: self.inner.config().clone() }
    }

    /// Emphasis probabilities for one sequence of token vectors.
    fn forward(&self, vectors: Vec<Vec<f32>>) -> PyResult<Vec<f64>> {
        let emb = InstanceEmbeddings::from_rows(&vectors).py()?;
        Ok(self.inner.predict(&emb).py()?.scores().to_vec())
    }

    /// Mean KL loss of one sequence against target emphasis probabilities.
    fn loss(&self, vectors: Vec<Vec<f32>>, targets: Vec<f64>) -> PyResult<f64> {
        let emb = InstanceEmbeddings::from_rows(&vectors).py()?;
        let preds = self.inner.forward(emb.to_f64().view()).py()?;
        if preds.len() != targets.len() {
            return Err(PyValueError::new_err(format!("{} tokens but {} targets", preds.len(), targets.len())));
        }
        let total: f64 = targets
            .iter()
            .zip(&preds)
            .map(|(&t, q)| Ok(nn_kl_loss(&LabelDistribution::new(t, 1.0 - t)?, q)))
            .sum::<emphasis::Result<f64>>()
            .py()?;
        Ok(total / preds.len() as f64)
    }

    fn predict(&self, embeddings: &Embeddings) -> PyResult<Vec<Vec<f64>>> {
        Ok(scores(self.inner.predict_file(&embeddings.inner).py()?))
    }

    fn parameter_count(&self) -> usize {
        self.inner.manifest().iter().map(|(_, shape)| shape.iter().product::<usize>()).sum()
    }
}

/// A trained model with its best epoch and dev score.
#[pyclass(module = "emphasis_py", skip_from_py_object)]
#[derive(Clone)]
struct Checkpoint {
    inner: CoreCheckpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let bytes = io(fs::read(path))?;
        Ok(Checkpoint { inner: load_checkpoint(bytes.as_slice()).py()? })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Checkpoint { inner: load_checkpoint(data).py()? })
    }

    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        checkpoint_to_bytes(&self.inner).py()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        io(fs::write(path, self.to_bytes()?))
    }

    #[getter]
    fn model(&self) -> Model {
        Model { inner: self.inner.model.clone() }
    }

    #[getter]
    fn best_epoch(&self) -> usize {
        self.inner.best_epoch
    }

    #[getter]
    fn dev_match_average(&self) -> f64 {
        self.inner.dev_match_average
    }

    #[getter]
    fn source_tag(&self) -> &str {
        &self.inner.source_tag
    }

    fn predict(&self, embeddings: &Embeddings) -> PyResult<Vec<Vec<f64>>> {
        Ok(scores(self.inner.model.predict_file(&embeddings.inner).py()?))
    }
}

/// Train and return `(checkpoint, history)`; history has one dict per epoch.
#[pyfunction]
fn train<'py>(
    py: Python<'py>,
    config: &ModelConfig,
    train_corpus: &Corpus,
    train_embeddings: &Embeddings,
    dev_corpus: &Corpus,
    dev_embeddings: &Embeddings,
) -> PyResult<(Checkpoint, Vec<Bound<'py, PyDict>>)> {
    let (ckpt, history) = py
        .detach(|| {
            train_with_progress(
                &config.inner,
                (&train_corpus.inner, &train_embeddings.inner),
                (&dev_corpus.inner, &dev_embeddings.inner),
                |_| {},
            )
        })
        .py()?;
    let records = history
        .records
        .iter()
        .map(|r| {
            let d = report_dict(py, &r.dev)?;
            d.set_item("epoch", r.epoch)?;
            d.set_item("train_loss", r.train_loss)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((Checkpoint { inner: ckpt }, records))
}

/// Match-m scores (m1..m4 and their average) of per-token scores.
#[pyfunction(name = "match_report")]
fn py_match_report<'py>(py: Python<'py>, corpus: &Corpus, scores: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
    report_dict(py, &match_report(&corpus.inner, &predictions(scores)).py()?)
}

#[pyfunction(name = "random_baseline")]
#[pyo3(signature = (corpus, seed = 0, trials = 100))]
fn py_random_baseline<'py>(py: Python<'py>, corpus: &Corpus, seed: u64, trials: usize) -> PyResult<Bound<'py, PyDict>> {
    report_dict(py, &random_baseline(&corpus.inner, seed, trials).py()?)
}

/// Rows of `(tag, count, human mean, model mean or None)`.
#[pyfunction(name = "pos_report")]
#[pyo3(signature = (corpus, scores = None))]
fn py_pos_report(
    corpus: &Corpus,
    scores: Option<Vec<Vec<f64>>>,
) -> PyResult<Vec<(String, usize, f64, Option<f64>)>> {
    let preds = scores.map(predictions);
    let report = pos_report(&corpus.inner, preds.as_deref()).py()?;
    Ok(report.rows.into_iter().map(|r| (r.tag, r.count, r.human, r.model)).collect())
}

/// Rows of `(bucket, count, mean match average or None)`.
#[pyfunction(name = "length_report")]
fn py_length_report(corpus: &Corpus, scores: Vec<Vec<f64>>) -> PyResult<Vec<(String, usize, Option<f64>)>> {
    let report = length_report(&corpus.inner, &predictions(scores)).py()?;
    Ok(report.rows.iter().map(|r| (r.bucket.to_string(), r.count, r.mean_average)).collect())
}

/// Member weights for mode "average" or "weighted".
#[pyfunction(name = "ensemble_weights")]
fn py_ensemble_weights(mode: &str, dev_scores: Vec<f64>) -> PyResult<Vec<f64>> {
    let mode: EnsembleMode = mode.parse().py()?;
    ensemble_weights(mode, &dev_scores).py()
}

/// Weighted per-token combination of member scores.
#[pyfunction]
fn combine(members: Vec<Vec<Vec<f64>>>, weights: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    let members: Vec<Vec<Prediction>> = members.into_iter().map(predictions).collect();
    Ok(scores(combine_predictions(&members, &weights).py()?))
}

/// `(p_I, p_O)` from the two label logits.
#[pyfunction]
fn softmax2(logit_i: f64, logit_o: f64) -> PyResult<(f64, f64)> {
    let d = nn_softmax2([logit_i, logit_o]).py()?;
    Ok((d.p_i, d.p_o))
}

/// KL(target || prediction) over {I, O}, given both emphasis probabilities.
#[pyfunction]
fn kl_loss(target: f64, prediction: f64) -> PyResult<f64> {
    let t = LabelDistribution::new(target, 1.0 - target).py()?;
    let p = LabelDistribution::new(prediction, 1.0 - prediction).py()?;
    Ok(nn_kl_loss(&t, &p))
}

/// Largest relative error between analytic and central-difference
/// gradients of a random model on a random sequence.
#[pyfunction]
#[pyo3(signature = (head = "bilstm", dim = 8, hidden = 4, tokens = 5, seed = 0, adapter = false, eps = 1e-4))]
fn grad_check(head: &str, dim: usize, hidden: usize, tokens: usize, seed: u64, adapter: bool, eps: f64) -> PyResult<f64> {
    let mut cfg = CoreConfig::new(head.parse().py()?, dim);
    cfg.hidden_units = hidden;
    cfg.dense_units = hidden;
    cfg.adapter = adapter;
    cfg.seed = seed;
    let report = random_model_grad_check(&cfg, tokens, eps).py()?;
    Ok(report.max_rel_error)
}

/// A seeded synthetic `(Corpus, Embeddings)` pair; kind is "separable" or "random".
#[pyfunction]
#[pyo3(signature = (kind = "separable", seed = 0, instances = 50, dim = 8))]
fn synthetic(kind: &str, seed: u64, instances: usize, dim: usize) -> PyResult<(Corpus, Embeddings)> {
    let (c, e) = match kind {
        "separable" => separable_corpus(seed, instances, dim),
        "random" => random_corpus(seed, instances, 12, 9, dim),
        other => return Err(PyValueError::new_err(format!("unknown kind `{other}`"))),
    }
    .py()?;
    Ok((Corpus { inner: c }, Embeddings { inner: e }))
}

#[pymodule]
fn emphasis_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Corpus>()?;
    m.add_class::<Embeddings>()?;
    m.add_class::<ModelConfig>()?;
    m.add_class::<Model>()?;
    m.add_class::<Checkpoint>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(py_match_report, m)?)?;
    m.add_function(wrap_pyfunction!(py_random_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(py_pos_report, m)?)?;
    m.add_function(wrap_pyfunction!(py_length_report, m)?)?;
    m.add_function(wrap_pyfunction!(py_ensemble_weights, m)?)?;
    m.add_function(wrap_pyfunction!(combine, m)?)?;
    m.add_function(wrap_pyfunction!(softmax2, m)?)?;
    m.add_function(wrap_pyfunction!(kl_loss, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic, m)?)?;
    Ok(())
}
