//! `emphasis`: train, evaluate and analyze emphasis selection models from the
//! command line.
//!
//! Exit status: 0 success, 1 usage error, 2 data or validation error,
//! 3 numeric failure.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use emphasis::corpus::parse_corpus;
use emphasis::embedding_io::{read_emb, validate_alignment, write_emb};
use emphasis::ensemble::{ensemble_predict, EnsembleSpecFile};
use emphasis::evaluation::{length_counts, length_report, match_report, pos_report, random_baseline, MatchReport};
use emphasis::experiments::{run_grid_with_log, run_shuffle_study_with_log, write_checkpoint, GridReport, GridSpec};
use emphasis::kv;
use emphasis::model::load_checkpoint;
use emphasis::synthetic::{random_corpus, random_model_grad_check, separable_corpus};
use emphasis::training::train_with_progress;
use emphasis::{Checkpoint, Corpus, EmbeddingFile, Error, HeadKind, ModelConfig, Prediction};

#[derive(Parser)]
#[command(name = "emphasis", version, about = "Emphasis selection with label distribution learning")]
struct Cli {
    /// Output style for reports.
    #[arg(long, value_enum, global = true, default_value_t = Format::Table)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Kv,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and keep its best epoch on the dev set.
    Train(TrainArgs),
    /// Print per-token emphasis scores: id, index, token, score.
    Predict(PredictArgs),
    /// Match-m scores of a checkpoint on a corpus.
    Evaluate(PredictArgs),
    /// Combine several checkpoints and score the result.
    Ensemble(EnsembleArgs),
    /// Train every (embedding, head) cell of a grid spec.
    Grid(GridArgs),
    #[command(subcommand)]
    Analyze(Analysis),
    /// Compare analytic and finite-difference gradients on a random model.
    Gradcheck(GradcheckArgs),
    /// Describe an embedding file, optionally checking it against a corpus.
    EmbInfo(EmbInfoArgs),
    /// Write a seeded synthetic corpus and matching embeddings.
    Synth(SynthArgs),
}

#[derive(Subcommand)]
enum Analysis {
    /// Mean human (and model) emphasis per POS tag.
    Pos(PosArgs),
    /// Match average per sentence-length bucket.
    Length(PredictArgs),
    /// Train on shuffled sentences and compare with the random baseline.
    Shuffle(ShuffleArgs),
    /// Match scores of uniformly random rankings.
    Baseline(BaselineArgs),
}

#[derive(Args)]
struct ModelFlags {
    /// key=value model config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    head: Option<HeadKind>,
    #[arg(long)]
    hidden_units: Option<usize>,
    #[arg(long)]
    dense_units: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// sgd or adam.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Seed for initialization and batch order.
    #[arg(long)]
    seed: Option<u64>,
    /// Trainable linear adapter on the frozen embeddings.
    #[arg(long)]
    adapter: Option<bool>,
    #[arg(long)]
    max_grad_norm: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train_corpus: PathBuf,
    #[arg(long)]
    train_emb: PathBuf,
    #[arg(long)]
    dev_corpus: PathBuf,
    #[arg(long)]
    dev_emb: PathBuf,
    /// Where to write the best checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch history file.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    #[arg(long)]
    verbose: bool,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    emb: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Spec file with `mode=` and `member=checkpoint,embeddings[,dev_score]` lines.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Also write per-token ensemble scores here.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    train_corpus: PathBuf,
    #[arg(long)]
    dev_corpus: PathBuf,
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct ShuffleArgs {
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, default_value_t = 5)]
    runs: usize,
}

#[derive(Args)]
struct PosArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// With --ckpt, adds the model's mean score per tag.
    #[arg(long, requires = "ckpt")]
    emb: Option<PathBuf>,
    #[arg(long, requires = "emb")]
    ckpt: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "bilstm")]
    head: HeadKind,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    /// Hidden size of either head.
    #[arg(long, default_value_t = 4)]
    hidden: usize,
    #[arg(long, default_value_t = 5)]
    tokens: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    adapter: bool,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
}

#[derive(Args)]
struct EmbInfoArgs {
    #[arg(long)]
    emb: PathBuf,
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    /// Emphasis exactly on tokens whose first coordinate is positive.
    Separable,
    Random,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value_t = SynthKind::Separable)]
    kind: SynthKind,
    #[arg(long, default_value_t = 50)]
    instances: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_corpus: PathBuf,
    #[arg(long)]
    out_emb: PathBuf,
}

/// Failure with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_numeric() { 3 } else { 2 },
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn with_path<T>(path: &Path, r: emphasis::Result<T>) -> CliResult<T> {
    r.map_err(|e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    })
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::from(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn load_corpus(path: &Path) -> CliResult<Corpus> {
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("corpus");
    with_path(path, parse_corpus(open(path)?, name))
}

fn load_emb(path: &Path) -> CliResult<EmbeddingFile> {
    with_path(path, read_emb(open(path)?))
}

fn load_ckpt(path: &Path) -> CliResult<Checkpoint> {
    with_path(path, load_checkpoint(open(path)?))
}

fn aligned(corpus: &Corpus, ef: &EmbeddingFile, emb_path: &Path) -> CliResult {
    with_path(emb_path, validate_alignment(corpus, ef))
}

fn print_report(format: Format, report: &MatchReport) {
    match format {
        Format::Table => print!("{report}"),
        Format::Kv => print!("{}", report.to_kv()),
    }
}

fn print_grid(format: Format, report: &GridReport) {
    match format {
        Format::Table => print!("{report}"),
        Format::Kv => print!("{}", report.to_kv()),
    }
}

/// Defaults, then the config file, then explicit flags.
fn model_config(flags: &ModelFlags, input_dim: usize) -> CliResult<ModelConfig> {
    let mut cfg = ModelConfig::new(HeadKind::BiLstm, input_dim);
    if let Some(path) = &flags.config {
        let text = fs::read_to_string(path).map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        for entry in with_path(path, kv::parse(&text))? {
            if entry.key == "input_dim" {
                continue;
            }
            let known = with_path(path, cfg.apply(&entry.key, &entry.value))?;
            if !known {
                return Err(Failure {
                    code: 2,
                    message: format!("{}: line {}: unknown key `{}`", path.display(), entry.line, entry.key),
                });
            }
        }
    }
    let set = |cfg: &mut ModelConfig, key: &str, value: Option<String>| -> CliResult {
        if let Some(v) = value {
            cfg.apply(key, &v)?;
        }
        Ok(())
    };
    set(&mut cfg, "head", flags.head.map(|h| h.to_string()))?;
    set(&mut cfg, "hidden_units", flags.hidden_units.map(|v| v.to_string()))?;
    set(&mut cfg, "dense_units", flags.dense_units.map(|v| v.to_string()))?;
    set(&mut cfg, "lr", flags.lr.map(|v| v.to_string()))?;
    set(&mut cfg, "momentum", flags.momentum.map(|v| v.to_string()))?;
    set(&mut cfg, "optimizer", flags.optimizer.clone())?;
    set(&mut cfg, "epochs", flags.epochs.map(|v| v.to_string()))?;
    set(&mut cfg, "batch_size", flags.batch_size.map(|v| v.to_string()))?;
    set(&mut cfg, "seed", flags.seed.map(|v| v.to_string()))?;
    set(&mut cfg, "adapter", flags.adapter.map(|v| v.to_string()))?;
    set(&mut cfg, "max_grad_norm", flags.max_grad_norm.map(|v| v.to_string()))?;
    cfg.input_dim = input_dim;
    cfg.validate()?;
    Ok(cfg)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult {
    fs::write(path, bytes).map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
}

fn train(args: &TrainArgs, format: Format) -> CliResult {
    let train_c = load_corpus(&args.train_corpus)?;
    let train_ef = load_emb(&args.train_emb)?;
    aligned(&train_c, &train_ef, &args.train_emb)?;
    let dev_c = load_corpus(&args.dev_corpus)?;
    let dev_ef = load_emb(&args.dev_emb)?;
    aligned(&dev_c, &dev_ef, &args.dev_emb)?;
    let cfg = model_config(&args.model, train_ef.dim())?;
    let verbose = args.verbose;
    let (ckpt, history) = train_with_progress(&cfg, (&train_c, &train_ef), (&dev_c, &dev_ef), |r| {
        if verbose {
            eprintln!("{r}");
        }
    })?;
    write_checkpoint(&args.out, &ckpt)?;
    if let Some(path) = &args.history {
        write_bytes(path, history.to_text().as_bytes())?;
    }
    let best = history.records[ckpt.best_epoch - 1];
    match format {
        Format::Table => {
            println!("best epoch {} of {}", ckpt.best_epoch, history.records.len());
            print!("{}", best.dev);
        }
        Format::Kv => {
            println!("best_epoch={}", ckpt.best_epoch);
            print!("{}", best.dev.to_kv());
        }
    }
    Ok(())
}

fn predictions(args: &PredictArgs) -> CliResult<(Corpus, Vec<Prediction>)> {
    let corpus = load_corpus(&args.corpus)?;
    let ef = load_emb(&args.emb)?;
    aligned(&corpus, &ef, &args.emb)?;
    let ckpt = load_ckpt(&args.ckpt)?;
    let preds = ckpt.model.predict_file(&ef)?;
    Ok((corpus, preds))
}

fn write_scores(out: &mut impl Write, corpus: &Corpus, preds: &[Prediction]) -> io::Result<()> {
    for (inst, pred) in corpus.iter().zip(preds) {
        for (tok, score) in inst.tokens().iter().zip(pred.scores()) {
            writeln!(out, "{}\t{}\t{}\t{score}", inst.id(), tok.index, tok.text)?;
        }
    }
    Ok(())
}

fn predict(args: &PredictArgs) -> CliResult {
    let (corpus, preds) = predictions(args)?;
    let mut out = BufWriter::new(io::stdout().lock());
    write_scores(&mut out, &corpus, &preds)?;
    out.flush()?;
    Ok(())
}

fn evaluate(args: &PredictArgs, format: Format) -> CliResult {
    let (corpus, preds) = predictions(args)?;
    print_report(format, &match_report(&corpus, &preds)?);
    Ok(())
}

fn ensemble(args: &EnsembleArgs, format: Format) -> CliResult {
    let corpus = load_corpus(&args.corpus)?;
    let spec = with_path(&args.spec, EnsembleSpecFile::read(&args.spec))?.load()?;
    let preds = ensemble_predict(&spec, &corpus)?;
    if let Some(path) = &args.predictions {
        let mut out = BufWriter::new(File::create(path)?);
        write_scores(&mut out, &corpus, &preds)?;
        out.flush()?;
    }
    if format == Format::Table {
        println!("{} ensemble of {} models", spec.mode, spec.members.len());
    }
    print_report(format, &match_report(&corpus, &preds)?);
    Ok(())
}

fn logger(verbose: bool) -> impl FnMut(&str) {
    move |line: &str| {
        if verbose {
            eprintln!("{line}");
        }
    }
}

fn grid(args: &GridArgs, format: Format) -> CliResult {
    let spec = with_path(&args.spec, GridSpec::read(&args.spec))?;
    let train_c = load_corpus(&args.train_corpus)?;
    let dev_c = load_corpus(&args.dev_corpus)?;
    let report = run_grid_with_log(&spec, &train_c, &dev_c, &mut logger(args.verbose))?;
    print_grid(format, &report);
    Ok(())
}

fn shuffle(args: &ShuffleArgs, format: Format) -> CliResult {
    let spec = with_path(&args.grid.spec, GridSpec::read(&args.grid.spec))?;
    let train_c = load_corpus(&args.grid.train_corpus)?;
    let dev_c = load_corpus(&args.grid.dev_corpus)?;
    let report = run_shuffle_study_with_log(&spec, &train_c, &dev_c, args.runs, &mut logger(args.grid.verbose))?;
    print_grid(format, &report);
    Ok(())
}

fn pos(args: &PosArgs, format: Format) -> CliResult {
    let corpus = load_corpus(&args.corpus)?;
    let preds = match (&args.emb, &args.ckpt) {
        (Some(emb), Some(ckpt)) => {
            let ef = load_emb(emb)?;
            aligned(&corpus, &ef, emb)?;
            Some(load_ckpt(ckpt)?.model.predict_file(&ef)?)
        }
        _ => None,
    };
    let report = pos_report(&corpus, preds.as_deref())?;
    match format {
        Format::Table => print!("{report}"),
        Format::Kv => print!("{}", report.to_kv()),
    }
    Ok(())
}

fn length(args: &PredictArgs, format: Format) -> CliResult {
    let (corpus, preds) = predictions(args)?;
    let report = length_report(&corpus, &preds)?;
    debug_assert_eq!(report.rows.map(|r| r.count), length_counts(&corpus));
    match format {
        Format::Table => print!("{report}"),
        Format::Kv => print!("{}", report.to_kv()),
    }
    Ok(())
}

fn baseline(args: &BaselineArgs, format: Format) -> CliResult {
    let corpus = load_corpus(&args.corpus)?;
    let report = random_baseline(&corpus, args.seed, args.trials)?;
    match format {
        Format::Table => {
            println!("{:<8} {}", "", MatchReport::HEADER);
            println!("{:<8} {}", "Random", report.row());
        }
        Format::Kv => print!("{}", report.to_kv()),
    }
    Ok(())
}

fn gradcheck(args: &GradcheckArgs, format: Format) -> CliResult {
    let mut cfg = ModelConfig::new(args.head, args.dim);
    cfg.hidden_units = args.hidden;
    cfg.dense_units = args.hidden;
    cfg.adapter = args.adapter;
    cfg.seed = args.seed;
    let report = random_model_grad_check(&cfg, args.tokens, args.eps)?;
    let worst = report
        .worst
        .as_ref()
        .map_or_else(|| "-".to_string(), |(name, i)| format!("{name}[{i}]"));
    match format {
        Format::Table => {
            println!("coordinates     {}", report.coordinates);
            println!("max rel. error  {:e}", report.max_rel_error);
            println!("worst           {worst}");
        }
        Format::Kv => {
            println!("coordinates={}", report.coordinates);
            println!("max_rel_error={}", report.max_rel_error);
            println!("worst={worst}");
        }
    }
    if report.max_rel_error < args.threshold {
        Ok(())
    } else {
        Err(Failure {
            code: 3,
            message: format!(
                "max relative error {:e} is not below {:e}",
                report.max_rel_error, args.threshold
            ),
        })
    }
}

fn emb_info(args: &EmbInfoArgs, format: Format) -> CliResult {
    let ef = load_emb(&args.emb)?;
    if let Some(path) = &args.corpus {
        let corpus = load_corpus(path)?;
        aligned(&corpus, &ef, &args.emb)?;
    }
    let fields = [
        ("source_tag", ef.source_tag().to_string()),
        ("dim", ef.dim().to_string()),
        ("instances", ef.len().to_string()),
        ("tokens", ef.token_count().to_string()),
    ];
    for (k, v) in fields {
        match format {
            Format::Table => println!("{k:<12} {v}"),
            Format::Kv => println!("{k}={v}"),
        }
    }
    if args.corpus.is_some() && format == Format::Table {
        println!("aligned with corpus");
    }
    Ok(())
}

fn synth(args: &SynthArgs) -> CliResult {
    let (corpus, ef) = match args.kind {
        SynthKind::Separable => separable_corpus(args.seed, args.instances, args.dim)?,
        SynthKind::Random => random_corpus(args.seed, args.instances, 12, 9, args.dim)?,
    };
    let mut text = Vec::new();
    emphasis::corpus::write_corpus(&corpus, &mut text)?;
    write_bytes(&args.out_corpus, &text)?;
    let mut bytes = Vec::new();
    write_emb(&ef, &mut bytes)?;
    write_bytes(&args.out_emb, &bytes)?;
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    let f = cli.format;
    match &cli.command {
        Command::Train(a) => train(a, f),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a, f),
        Command::Ensemble(a) => ensemble(a, f),
        Command::Grid(a) => grid(a, f),
        Command::Analyze(Analysis::Pos(a)) => pos(a, f),
        Command::Analyze(Analysis::Length(a)) => length(a, f),
        Command::Analyze(Analysis::Shuffle(a)) => shuffle(a, f),
        Command::Analyze(Analysis::Baseline(a)) => baseline(a, f),
        Command::Gradcheck(a) => gradcheck(a, f),
        Command::EmbInfo(a) => emb_info(a, f),
        Command::Synth(a) => synth(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
