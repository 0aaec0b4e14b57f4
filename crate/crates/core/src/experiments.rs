//! Experiment grids: architecture × embedding sweeps and the shuffled-training
//! study.
//!
//! A grid spec is `key=value` text:
//!
//! ```text
//! output_dir=runs
//! heads=bilstm,dense
//! lrs=2e-5,1e-4,3e-4
//! seeds=0
//! embedding=bert,train_bert.emb,dev_bert.emb
//! embedding=xlnet,train_xlnet.emb,dev_xlnet.emb
//! shuffle_seed=7
//! epochs=20
//! ```
//!
//! Any model config key other than `head`, `input_dim`, `lr` and `seed`
//! overrides the defaults for every cell. Paths are relative to the spec.
//!
//! Every trained model is saved as
//! `<output_dir>/<embedding>__<head>__lr<lr>__<run>.ckp1`; reruns load
//! existing checkpoints instead of training, so an interrupted grid resumes
//! where it stopped and a finished one reproduces its table.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::corpus::{shuffle_instance, Corpus};
use crate::embedding_io::{read_emb, validate_alignment, EmbeddingFile};
use crate::error::{Error, Result};
use crate::evaluation::{match_report, random_baseline, MatchReport};
use crate::kv;
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, HeadKind, ModelConfig};
use crate::rng::derive_seed;
use crate::training::train as train_model;

const RESERVED_KEYS: [&str; 4] = ["head", "input_dim", "lr", "seed"];

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSource {
    pub name: String,
    pub train: PathBuf,
    pub dev: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub output_dir: PathBuf,
    pub heads: Vec<HeadKind>,
    pub lrs: Vec<f64>,
    pub seeds: Vec<u64>,
    pub embeddings: Vec<EmbeddingSource>,
    pub shuffle_seed: u64,
    pub baseline_trials: usize,
    /// Config overrides in file order.
    pub overrides: Vec<(String, String)>,
}

impl GridSpec {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut spec = GridSpec {
            output_dir: base_dir.join("runs"),
            heads: vec![HeadKind::BiLstm, HeadKind::Dense],
            lrs: ModelConfig::DEFAULT_LR_GRID.to_vec(),
            seeds: vec![0],
            embeddings: Vec::new(),
            shuffle_seed: 0,
            baseline_trials: 100,
            overrides: Vec::new(),
        };
        let mut probe = ModelConfig::new(HeadKind::BiLstm, 1);
        for entry in kv::parse(text)? {
            match entry.key.as_str() {
                "output_dir" => spec.output_dir = base_dir.join(&entry.value),
                "heads" => spec.heads = kv::parse_list(&entry)?,
                "lrs" => spec.lrs = kv::parse_list(&entry)?,
                "seeds" => spec.seeds = kv::parse_list(&entry)?,
                "shuffle_seed" => spec.shuffle_seed = entry.parse_value()?,
                "baseline_trials" => spec.baseline_trials = entry.parse_value()?,
                "embedding" => {
                    let parts: Vec<&str> = entry.value.split(',').map(str::trim).collect();
                    let [name, train, dev] = parts.as_slice() else {
                        return Err(Error::parse(entry.line, "embedding needs `name,train_emb,dev_emb`"));
                    };
                    if name.is_empty() || name.contains(['/', '\\']) {
                        return Err(Error::parse(entry.line, format!("bad embedding name `{name}`")));
                    }
                    spec.embeddings.push(EmbeddingSource {
                        name: name.to_string(),
                        train: base_dir.join(train),
                        dev: base_dir.join(dev),
                    });
                }
                key if RESERVED_KEYS.contains(&key) => {
                    return Err(Error::parse(entry.line, format!("`{key}` is set by the grid itself")));
                }
                key => {
                    let known = probe
                        .apply(key, &entry.value)
                        .map_err(|e| Error::parse(entry.line, e.to_string()))?;
                    if !known {
                        return Err(Error::parse(entry.line, format!("unknown key `{key}`")));
                    }
                    spec.overrides.push((key.to_string(), entry.value.clone()));
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.embeddings.is_empty() {
            return Err(Error::Config("grid lists no embeddings".into()));
        }
        for (what, empty) in [
            ("heads", self.heads.is_empty()),
            ("lrs", self.lrs.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ] {
            if empty {
                return Err(Error::Config(format!("grid `{what}` is empty")));
            }
        }
        if self.baseline_trials == 0 {
            return Err(Error::Config("baseline_trials must be positive".into()));
        }
        for &lr in &self.lrs {
            self.config(self.heads[0], 1, lr, 0)?;
        }
        let mut names: Vec<&str> = self.embeddings.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("embedding names must be unique".into()));
        }
        Ok(())
    }

    pub fn config(&self, head: HeadKind, input_dim: usize, lr: f64, seed: u64) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::new(head, input_dim);
        for (k, v) in &self.overrides {
            cfg.apply(k, v)?;
        }
        cfg.lr = lr;
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Outcome of one (embedding, head) cell with its best learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub best_lr: f64,
    /// Mean dev report over seeds (or runs) at `best_lr`.
    pub report: MatchReport,
    /// Mean dev report for every candidate lr, in spec order.
    pub per_lr: Vec<(f64, MatchReport)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub embedding: String,
    pub head: HeadKind,
    pub outcome: std::result::Result<CellResult, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
    /// Extra labelled rows printed under the cells (the random baseline).
    pub reference_rows: Vec<(String, MatchReport)>,
    /// Free-form `key=value` metadata printed as comments.
    pub metadata: Vec<(String, String)>,
}

impl GridReport {
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.metadata {
            out.push_str(&format!("{k}={v}\n"));
        }
        for row in &self.rows {
            let key = format!("{}.{}", row.embedding, row.head);
            match &row.outcome {
                Ok(cell) => {
                    out.push_str(&format!("{key}.lr={}\n", cell.best_lr));
                    for line in cell.report.to_kv().lines() {
                        out.push_str(&format!("{key}.{line}\n"));
                    }
                }
                Err(e) => out.push_str(&format!("{key}.error={e}\n")),
            }
        }
        for (label, r) in &self.reference_rows {
            for line in r.to_kv().lines() {
                out.push_str(&format!("{}.{line}\n", label.to_lowercase()));
            }
        }
        out
    }
}

impl fmt::Display for GridReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.metadata {
            writeln!(f, "# {k}: {v}")?;
        }
        writeln!(f, "{:<16} {:<7} {:>9} {}", "Embedding", "Head", "LR", MatchReport::HEADER)?;
        for row in &self.rows {
            match &row.outcome {
                Ok(cell) => writeln!(
                    f,
                    "{:<16} {:<7} {:>9} {}",
                    row.embedding,
                    row.head.to_string(),
                    format!("{:e}", cell.best_lr),
                    cell.report.row()
                )?,
                Err(e) => writeln!(f, "{:<16} {:<7} FAILED: {e}", row.embedding, row.head.to_string())?,
            }
        }
        for (label, r) in &self.reference_rows {
            writeln!(f, "{:<16} {:<7} {:>9} {}", label, "-", "-", r.row())?;
        }
        Ok(())
    }
}

fn load_emb(path: &Path) -> Result<EmbeddingFile> {
    let file = File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    read_emb(BufReader::new(file))
}

/// Writes through a temporary file so a crash never leaves a checkpoint
/// that a resumed run would trust.
fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(bytes)?;
        w.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

type Transform = Box<dyn Fn(&Corpus, &EmbeddingFile) -> Result<(Corpus, EmbeddingFile)>>;

struct Job {
    label: String,
    seed: u64,
    /// Applied to the training data before training; `None` trains on it as is.
    transform: Option<Transform>,
}

struct Cell {
    stem: String,
    head: HeadKind,
    jobs: Vec<Job>,
}

fn run_cell(
    spec: &GridSpec,
    cell: &Cell,
    train: (&Corpus, &EmbeddingFile),
    dev: (&Corpus, &EmbeddingFile),
    log: &mut dyn FnMut(&str),
) -> Result<CellResult> {
    let mut per_lr = Vec::with_capacity(spec.lrs.len());
    for &lr in &spec.lrs {
        let mut reports = Vec::with_capacity(cell.jobs.len());
        for job in &cell.jobs {
            let path = spec.output_dir.join(format!("{}__lr{lr}__{}.ckp1", cell.stem, job.label));
            let ckpt = if path.exists() {
                log(&format!("reuse {}", path.display()));
                load_checkpoint(BufReader::new(File::open(&path)?))?
            } else {
                log(&format!("train {}", path.display()));
                let cfg = spec.config(cell.head, train.1.dim(), lr, job.seed)?;
                let (ckpt, history) = match &job.transform {
                    None => train_model(&cfg, train, dev)?,
                    Some(transform) => {
                        let (corpus, ef) = transform(train.0, train.1)?;
                        train_model(&cfg, (&corpus, &ef), dev)?
                    }
                };
                write_atomically(&path.with_extension("history"), history.to_text().as_bytes())?;
                write_atomically(&path, &crate::model::checkpoint_to_bytes(&ckpt)?)?;
                ckpt
            };
            reports.push(evaluate_checkpoint(&ckpt, dev)?);
        }
        per_lr.push((lr, MatchReport::mean(&reports).expect("jobs are non-empty")));
    }
    let (best_lr, report) = per_lr
        .iter()
        .fold(None, |best: Option<(f64, MatchReport)>, &(lr, r)| match best {
            Some(b) if b.1.average >= r.average => Some(b),
            _ => Some((lr, r)),
        })
        .expect("lrs are non-empty");
    Ok(CellResult {
        best_lr,
        report,
        per_lr,
    })
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, (corpus, ef): (&Corpus, &EmbeddingFile)) -> Result<MatchReport> {
    validate_alignment(corpus, ef)?;
    match_report(corpus, &ckpt.model.predict_file(ef)?)
}

fn run_cells(
    spec: &GridSpec,
    train: &Corpus,
    dev: &Corpus,
    make_cell: impl Fn(&EmbeddingSource, &EmbeddingFile, HeadKind) -> Cell,
    train_embs: &[Option<EmbeddingFile>],
    dev_embs: &[std::result::Result<EmbeddingFile, String>],
    log: &mut dyn FnMut(&str),
) -> Vec<GridRow> {
    let mut rows = Vec::new();
    for (k, source) in spec.embeddings.iter().enumerate() {
        for &head in &spec.heads {
            let outcome = match (&train_embs[k], &dev_embs[k]) {
                (_, Err(e)) => Err(e.clone()),
                (None, _) => Err("training embeddings unavailable".to_string()),
                (Some(train_ef), Ok(dev_ef)) => {
                    let cell = make_cell(source, train_ef, head);
                    run_cell(spec, &cell, (train, train_ef), (dev, dev_ef), log).map_err(|e| e.to_string())
                }
            };
            if let Err(e) = &outcome {
                log(&format!("cell {}/{head} failed: {e}", source.name));
            }
            rows.push(GridRow {
                embedding: source.name.clone(),
                head,
                outcome,
            });
        }
    }
    rows
}

/// Loads each embedding pair, turning per-embedding failures into per-cell
/// errors.
fn load_sources(
    spec: &GridSpec,
    train: &Corpus,
    dev: &Corpus,
) -> (Vec<Option<EmbeddingFile>>, Vec<std::result::Result<EmbeddingFile, String>>, Vec<String>) {
    let mut trains = Vec::new();
    let mut devs = Vec::new();
    let mut errors = Vec::new();
    for source in &spec.embeddings {
        let loaded = (|| -> Result<(EmbeddingFile, EmbeddingFile)> {
            let t = load_emb(&source.train)?;
            validate_alignment(train, &t)?;
            let d = load_emb(&source.dev)?;
            validate_alignment(dev, &d)?;
            if t.dim() != d.dim() {
                return Err(Error::DimensionMismatch {
                    expected: t.dim(),
                    found: d.dim(),
                });
            }
            Ok((t, d))
        })();
        match loaded {
            Ok((t, d)) => {
                trains.push(Some(t));
                devs.push(Ok(d));
                errors.push(String::new());
            }
            Err(e) => {
                trains.push(None);
                devs.push(Err(e.to_string()));
                errors.push(e.to_string());
            }
        }
    }
    (trains, devs, errors)
}

pub fn run_grid(spec: &GridSpec, train: &Corpus, dev: &Corpus) -> Result<GridReport> {
    run_grid_with_log(spec, train, dev, &mut |_| {})
}

pub fn run_grid_with_log(
    spec: &GridSpec,
    train: &Corpus,
    dev: &Corpus,
    log: &mut dyn FnMut(&str),
) -> Result<GridReport> {
    spec.validate()?;
    fs::create_dir_all(&spec.output_dir)?;
    let (train_embs, dev_embs, _) = load_sources(spec, train, dev);
    let make = |source: &EmbeddingSource, _: &EmbeddingFile, head: HeadKind| Cell {
        stem: format!("{}__{head}", source.name),
        head,
        jobs: spec
            .seeds
            .iter()
            .map(|&seed| Job {
                label: format!("seed{seed}"),
                seed,
                transform: None,
            })
            .collect(),
    };
    let rows = run_cells(spec, train, dev, make, &train_embs, &dev_embs, log);
    let report = GridReport {
        rows,
        reference_rows: Vec::new(),
        metadata: Vec::new(),
    };
    write_atomically(&spec.output_dir.join("grid_table.txt"), report.to_string().as_bytes())?;
    Ok(report)
}

/// How shuffled training data was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShuffleMode {
    /// Cached embedding rows permuted together with the tokens.
    PermutedRows,
    /// Embeddings exported from already shuffled text (source tag carries
    /// `+shuffled:<seed>`); only the corpus side is shuffled here.
    Reembedded(u64),
}

impl fmt::Display for ShuffleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::PermutedRows => f.write_str("permuted-rows"),
            Self::Reembedded(seed) => write!(f, "reembedded:{seed}"),
        }
    }
}

pub fn shuffle_mode(ef: &EmbeddingFile) -> Result<ShuffleMode> {
    match ef.source_tag().split_once("+shuffled:") {
        None => Ok(ShuffleMode::PermutedRows),
        Some((_, seed)) => seed
            .parse()
            .map(ShuffleMode::Reembedded)
            .map_err(|_| Error::invalid(format!("bad shuffle seed in source tag `{}`", ef.source_tag()))),
    }
}

/// Seed used to shuffle instance `index` in run `run`.
pub fn shuffle_seed_for(base: u64, run: u64, index: usize) -> u64 {
    derive_seed(derive_seed(base, run), index as u64)
}

/// Shuffles every instance with `seed_of(i)`, permuting embedding rows too
/// unless `permute_rows` is false.
pub fn shuffle_training_data(
    corpus: &Corpus,
    ef: &EmbeddingFile,
    seed_of: impl Fn(usize) -> u64,
    permute_rows: bool,
) -> Result<(Corpus, EmbeddingFile)> {
    validate_alignment(corpus, ef)?;
    let mut instances = Vec::with_capacity(corpus.len());
    let mut embs = Vec::with_capacity(corpus.len());
    for (i, (inst, emb)) in corpus.iter().zip(ef.instances()).enumerate() {
        let (shuffled, perm) = shuffle_instance(inst, seed_of(i));
        instances.push(shuffled);
        embs.push(if permute_rows { emb.permute_rows(&perm)? } else { emb.clone() });
    }
    Ok((
        Corpus::new(instances, format!("{}-shuffled", corpus.split_name()))?,
        EmbeddingFile::new(ef.dim(), ef.source_tag(), embs)?,
    ))
}

/// Trains `runs` models per cell on shuffled training data and evaluates
/// them on the unshuffled dev set, with a random-baseline reference row.
///
/// Run `r` shuffles instance `i` with [`shuffle_seed_for`]`(shuffle_seed, r, i)`
/// and trains with seed `derive_seed(seeds[0], r)`.
pub fn run_shuffle_study(spec: &GridSpec, train: &Corpus, dev: &Corpus, runs: usize) -> Result<GridReport> {
    run_shuffle_study_with_log(spec, train, dev, runs, &mut |_| {})
}

pub fn run_shuffle_study_with_log(
    spec: &GridSpec,
    train: &Corpus,
    dev: &Corpus,
    runs: usize,
    log: &mut dyn FnMut(&str),
) -> Result<GridReport> {
    spec.validate()?;
    if runs == 0 {
        return Err(Error::Config("runs must be positive".into()));
    }
    fs::create_dir_all(&spec.output_dir)?;
    let (train_embs, dev_embs, _) = load_sources(spec, train, dev);
    let mut modes = Vec::new();
    for (source, ef) in spec.embeddings.iter().zip(&train_embs) {
        if let Some(ef) = ef {
            modes.push((source.name.clone(), shuffle_mode(ef)?));
        }
    }
    let base_seed = spec.seeds[0];
    let shuffle_seed = spec.shuffle_seed;
    let make = |source: &EmbeddingSource, train_ef: &EmbeddingFile, head: HeadKind| {
        let mode = shuffle_mode(train_ef).unwrap_or(ShuffleMode::PermutedRows);
        Cell {
            stem: format!("{}__{head}", source.name),
            head,
            jobs: (0..runs as u64)
                .map(|r| {
                    let (label, transform): (String, Transform) = match mode {
                        ShuffleMode::PermutedRows => (
                            format!("shuffle{shuffle_seed}-run{r}"),
                            Box::new(move |c, ef| {
                                shuffle_training_data(c, ef, |i| shuffle_seed_for(shuffle_seed, r, i), true)
                            }),
                        ),
                        ShuffleMode::Reembedded(seed) => (
                            format!("reembedded{seed}-run{r}"),
                            Box::new(move |c, ef| shuffle_training_data(c, ef, |i| derive_seed(seed, i as u64), false)),
                        ),
                    };
                    Job {
                        label,
                        seed: derive_seed(base_seed, r),
                        transform: Some(transform),
                    }
                })
                .collect(),
        }
    };
    let rows = run_cells(spec, train, dev, make, &train_embs, &dev_embs, log);
    let baseline = random_baseline(dev, spec.shuffle_seed, spec.baseline_trials)?;
    let mut metadata = vec![("runs".to_string(), runs.to_string())];
    for (name, mode) in modes {
        metadata.push((format!("{name}.shuffle_mode"), mode.to_string()));
    }
    let report = GridReport {
        rows,
        reference_rows: vec![("Random".to_string(), baseline)],
        metadata,
    };
    write_atomically(&spec.output_dir.join("shuffle_table.txt"), report.to_string().as_bytes())?;
    Ok(report)
}

/// Saves a checkpoint to `path` (used by the CLI and tests).
pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    save_checkpoint(ckpt, &mut w)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_spec() {
        let text = "output_dir=out\nheads=dense\nlrs=0.1,0.01\nseeds=3,4\nembedding=a,t.emb,d.emb\nepochs=2\nhidden_units=4\n";
        let spec = GridSpec::parse(text, Path::new("/x")).unwrap();
        assert_eq!(spec.output_dir, PathBuf::from("/x/out"));
        assert_eq!(spec.heads, [HeadKind::Dense]);
        assert_eq!(spec.lrs, [0.1, 0.01]);
        assert_eq!(spec.seeds, [3, 4]);
        assert_eq!(spec.embeddings[0].train, PathBuf::from("/x/t.emb"));
        let cfg = spec.config(HeadKind::Dense, 8, 0.1, 3).unwrap();
        assert_eq!((cfg.epochs, cfg.hidden_units, cfg.lr, cfg.seed), (2, 4, 0.1, 3));
    }

    #[test]
    fn rejects_bad_specs() {
        let base = Path::new(".");
        assert!(GridSpec::parse("heads=dense\n", base).is_err());
        assert!(GridSpec::parse("embedding=a,t.emb,d.emb\nlr=0.1\n", base).is_err());
        assert!(GridSpec::parse("embedding=a,t.emb,d.emb\nbogus=1\n", base).is_err());
        assert!(GridSpec::parse("embedding=a,t.emb\n", base).is_err());
        assert!(GridSpec::parse("embedding=a,t.emb,d.emb\nembedding=a,u.emb,e.emb\n", base).is_err());
        assert!(GridSpec::parse("embedding=a,t.emb,d.emb\nepochs=0\n", base).is_err());
    }

    #[test]
    fn shuffle_modes() {
        let ef = EmbeddingFile::new(2, "bert-base-uncased+shuffled:9", vec![]).unwrap();
        assert_eq!(shuffle_mode(&ef).unwrap(), ShuffleMode::Reembedded(9));
        let ef = EmbeddingFile::new(2, "bert-base-uncased", vec![]).unwrap();
        assert_eq!(shuffle_mode(&ef).unwrap(), ShuffleMode::PermutedRows);
    }
}
