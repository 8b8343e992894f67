use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use comer::belief::{compute_frequencies, BeliefState};
use comer::data::{check_accumulation, corpus_stats, gen_synthetic, load_corpus, CorpusFormat, DataError, SynthSpec};
use comer::embeddings::{
    load_embedding_file_with_context, tokenize, EmbeddingError, EmbeddingSource, EmbeddingTable,
};
use comer::evalbench::{
    benchmark_inference, evaluate, itm, metrics, BenchConfig, EvalError, ItcClass, ItmInputs, MULTIWOZ_STATS,
    WOZ2_STATS,
};
use comer::hiergen::{AttentionRecord, StateFeed, Tracker, TurnInput};
use comer::model::{
    AttentionOrder, DropoutPlacement, MaxLengths, Model, ModelConfig, ModelError, OutputMode,
};
use comer::training::{
    dataset_loss, file_sha256, open_checkpoint, save_checkpoint, train, Checkpoint, CheckpointError, EmbeddingSpec,
    EpochMetrics, OpenedCheckpoint, OptimizerKind, TrainConfig, TrainError,
};

#[derive(Debug, Error)]
enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("checksum error: {0}")]
    Checksum(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Checksum(_) => 5,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EmbeddingError> for CliError {
    fn from(e: EmbeddingError) -> Self {
        match e {
            EmbeddingError::Checksum { .. } => CliError::Checksum(e.to_string()),
            EmbeddingError::ZeroDim => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::MaxLen => CliError::Config(e.to_string()),
            ModelError::Embedding(e) => e.into(),
            ModelError::UnknownToken(_) | ModelError::Belief(_) => CliError::Data(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(e) => e.into(),
            EvalError::Embedding(e) => e.into(),
            EvalError::Inflation { .. } => CliError::Config(e.to_string()),
            EvalError::Empty | EvalError::ZeroDenominator(_) => CliError::Data(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(e) => e.into(),
            TrainError::Eval(e) => e.into(),
            TrainError::NonFiniteGradient(_) | TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            TrainError::EmptyDataset => CliError::Data(e.to_string()),
            TrainError::Config(_) => CliError::Config(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Checksum { .. } => CliError::Checksum(e.to_string()),
            CheckpointError::Model(e) => e.into(),
            CheckpointError::Embedding(e) => e.into(),
            CheckpointError::Io(_) | CheckpointError::Format(_) => CliError::Data(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "comer", version, about = "Hierarchical dialogue state tracker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its best checkpoint and per-epoch metrics.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Track one dialogue and print its per-turn belief states.
    Predict(PredictArgs),
    /// Measure per-turn latency while inflating the slot inventory.
    Bench(BenchArgs),
    /// Write a synthetic corpus in canonical format.
    Synth(SynthArgs),
    /// Print corpus ontology statistics.
    Stats(StatsArgs),
    /// Inference time multipliers between two datasets.
    Itm(ItmArgs),
    /// Check an embedding file's structure and checksum.
    ValidateEmbeddings(ValidateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum EmbeddingKind {
    Pseudo,
    File,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Woz,
    Multiwoz,
    Canonical,
}

impl From<FormatArg> for CorpusFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Woz => CorpusFormat::Woz,
            FormatArg::Multiwoz => CorpusFormat::Multiwoz,
            FormatArg::Canonical => CorpusFormat::Canonical,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FeedArg {
    Gold,
    Predicted,
}

impl From<FeedArg> for StateFeed {
    fn from(f: FeedArg) -> Self {
        match f {
            FeedArg::Gold => StateFeed::Gold,
            FeedArg::Predicted => StateFeed::Predicted,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Flat JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[arg(long, value_enum)]
    embeddings: Option<EmbeddingKind>,
    #[arg(long)]
    embedding_file: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output path of the best checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output path of the per-epoch metrics JSON.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Embedding file for checkpoints trained on one; defaults to the path
    /// recorded in the checkpoint.
    #[arg(long)]
    embedding_file: Option<PathBuf>,
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "canonical")]
    format: FormatArg,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    ck: CheckpointArgs,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, value_enum, default_value = "predicted")]
    state_feed: FeedArg,
    /// Score the gold labels against themselves.
    #[arg(long)]
    oracle: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    ck: CheckpointArgs,
    /// Dialogue JSON (`{"turns": [{"system": ..., "user": ...}]}`); `-` reads stdin.
    #[arg(long)]
    dialogue: PathBuf,
    /// Write per-step attention records as JSON lines.
    #[arg(long)]
    attention: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    ck: CheckpointArgs,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Registered slot counts, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "3,35")]
    inflation: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Write per-turn latencies as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 2)]
    domains: usize,
    #[arg(long, default_value_t = 3)]
    slots: usize,
    #[arg(long, default_value_t = 6)]
    values: usize,
    #[arg(long, default_value_t = 64)]
    dialogues: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ItmArgs {
    /// Reference corpus; the small-ontology constants when absent.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Target corpus; the large-ontology constants when absent.
    #[arg(long)]
    to: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "canonical")]
    format: FormatArg,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    file: PathBuf,
}

/// Flat-key training configuration. Relative paths resolve against the
/// configuration file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    corpus: Option<PathBuf>,
    valid_corpus: Option<PathBuf>,
    format: CorpusFormat,
    embeddings: EmbeddingKind,
    embedding_file: Option<PathBuf>,
    embedding_seed: u64,
    d_m: usize,
    d_e: usize,
    dropout: f64,
    attention_order: AttentionOrder,
    dropout_placement: DropoutPlacement,
    block_grad: bool,
    output_mode: OutputMode,
    max_domains: usize,
    max_slots: usize,
    max_values: usize,
    lr: f64,
    clip: f64,
    optimizer: OptimizerKind,
    batch_size: usize,
    epochs: usize,
    seed: u64,
    checkpoint: PathBuf,
    metrics: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        RunConfig {
            corpus: None,
            valid_corpus: None,
            format: CorpusFormat::Canonical,
            embeddings: EmbeddingKind::Pseudo,
            embedding_file: None,
            embedding_seed: 0,
            d_m: m.d_m,
            d_e: m.d_e,
            dropout: m.dropout,
            attention_order: m.attention_order,
            dropout_placement: m.dropout_placement,
            block_grad: m.block_grad,
            output_mode: m.output_mode,
            max_domains: m.max_len.domains,
            max_slots: m.max_len.slots,
            max_values: m.max_len.values,
            lr: t.lr,
            clip: t.clip,
            optimizer: t.optimizer,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            checkpoint: PathBuf::from("comer.ckpt"),
            metrics: PathBuf::from("metrics.json"),
        }
    }
}

impl RunConfig {
    fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut cfg.corpus, &mut cfg.valid_corpus, &mut cfg.embedding_file].into_iter().flatten() {
            rebase(p);
        }
        rebase(&mut cfg.checkpoint);
        rebase(&mut cfg.metrics);
        Ok(cfg)
    }

    fn model_config(&self, d_e: usize) -> ModelConfig {
        ModelConfig {
            d_m: self.d_m,
            d_e,
            dropout: self.dropout,
            attention_order: self.attention_order,
            dropout_placement: self.dropout_placement,
            block_grad: self.block_grad,
            output_mode: self.output_mode,
            max_len: MaxLengths {
                domains: self.max_domains,
                slots: self.max_slots,
                values: self.max_values,
            },
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            clip: self.clip,
            optimizer: self.optimizer,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
        }
    }
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    config: &'a RunConfig,
    best_epoch: usize,
    best_metric: Option<f64>,
    epochs: &'a [EpochMetrics],
}

fn sha256_file(path: &Path) -> CliResult<String> {
    file_sha256(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))
}

fn load_embeddings(path: &Path) -> CliResult<EmbeddingTable> {
    load_embedding_file_with_context(path)
        .map(|f| f.table)
        .map_err(|e| match e {
            EmbeddingError::Io(io) => CliError::Data(format!("cannot read {}: {io}", path.display())),
            other => CliError::from(other),
        })
}

fn write_output(path: &Path, contents: &[u8]) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("output serializes")
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(c) = args.corpus {
        cfg.corpus = Some(c);
    }
    if let Some(f) = args.format {
        cfg.format = f.into();
    }
    if let Some(e) = args.embeddings {
        cfg.embeddings = e;
    }
    if let Some(p) = args.embedding_file {
        cfg.embedding_file = Some(p);
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.epochs {
        cfg.epochs = n;
    }
    if let Some(p) = args.checkpoint {
        cfg.checkpoint = p;
    }
    if let Some(p) = args.metrics {
        cfg.metrics = p;
    }
    let train_cfg = cfg.train_config();
    train_cfg.validate()?;

    let (source, spec) = match cfg.embeddings {
        EmbeddingKind::Pseudo => (
            EmbeddingSource::Pseudo {
                dim: cfg.d_e,
                seed: cfg.embedding_seed,
            },
            EmbeddingSpec::Pseudo {
                dim: cfg.d_e,
                seed: cfg.embedding_seed,
            },
        ),
        EmbeddingKind::File => {
            let path = cfg
                .embedding_file
                .clone()
                .ok_or_else(|| CliError::Config("embeddings = file needs embedding_file".into()))?;
            let table = load_embeddings(&path)?;
            let spec = EmbeddingSpec::File {
                path: path.display().to_string(),
                sha256: sha256_file(&path)?,
            };
            (EmbeddingSource::File(table), spec)
        }
    };
    let model_cfg = cfg.model_config(source.dim());
    model_cfg.validate()?;

    let corpus_path = cfg
        .corpus
        .clone()
        .ok_or_else(|| CliError::Config("no corpus given".into()))?;
    let train_set = load_corpus(&corpus_path, cfg.format)?;
    let valid_set = match &cfg.valid_corpus {
        Some(p) => load_corpus(p, cfg.format)?,
        None => train_set.clone(),
    };
    let mut vocabulary = train_set.vocabulary();
    vocabulary.merge(&valid_set.vocabulary());
    let table = vocabulary.build_table(&source)?;
    let freq = compute_frequencies(train_set.labels());

    let model = Model::new(model_cfg, cfg.seed)?;
    let initial = EpochMetrics {
        epoch: 0,
        loss: dataset_loss(&model, &table, &freq, &train_set)?,
        valid: Some(evaluate(&Tracker::new(&model, &table, &freq), &valid_set, StateFeed::Predicted)?.0),
    };
    let outcome = train(model, &train_cfg, &train_set, &valid_set, &table, &freq, |m, _| {
        if let Some(v) = m.valid {
            eprintln!(
                "epoch {:4} loss {:10.4} jd {:.4} jds {:.4} jg {:.4}",
                m.epoch, m.loss, v.jd, v.jds, v.jg
            );
        }
        true
    })?;

    let checkpoint = Checkpoint {
        model: outcome.best,
        seed: cfg.seed,
        epoch: outcome.best_epoch,
        metric: outcome.best_metric,
        vocabulary,
        embeddings: spec,
        frequencies: freq,
    };
    save_checkpoint(&cfg.checkpoint, &checkpoint)
        .map_err(|e| CliError::Internal(format!("cannot write {}: {e}", cfg.checkpoint.display())))?;
    let mut history = vec![initial];
    history.extend(outcome.history);
    let report = MetricsFile {
        config: &cfg,
        best_epoch: outcome.best_epoch,
        best_metric: outcome.best_metric,
        epochs: &history,
    };
    let text = serde_json::to_string_pretty(&report).expect("metrics serialize");
    write_output(&cfg.metrics, text.as_bytes())?;
    if args.json {
        println!(
            "{}",
            serde_json::json!({
                "checkpoint": cfg.checkpoint,
                "metrics": cfg.metrics,
                "best_epoch": outcome.best_epoch,
                "best_metric": outcome.best_metric,
            })
        );
    } else {
        println!(
            "best epoch {} (jg {}) written to {}",
            outcome.best_epoch,
            outcome.best_metric.map_or("n/a".into(), |m| format!("{m:.4}")),
            cfg.checkpoint.display()
        );
    }
    Ok(())
}

fn load(args: &CheckpointArgs) -> CliResult<OpenedCheckpoint> {
    open_checkpoint(&args.checkpoint, args.embedding_file.as_deref()).map_err(|e| match e {
        CheckpointError::Io(io) => CliError::Data(format!("cannot read {}: {io}", args.checkpoint.display())),
        other => other.into(),
    })
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let loaded = load(&args.ck)?;
    let corpus = load_corpus(&args.corpus.corpus, args.corpus.format.into())?;
    let report = if args.oracle {
        let golds: Vec<BeliefState> = corpus.labels().cloned().collect();
        metrics(&golds, &golds)?
    } else {
        let tracker = Tracker::new(&loaded.checkpoint.model, &loaded.table, &loaded.checkpoint.frequencies);
        evaluate(&tracker, &corpus, args.state_feed.into())?.0
    };
    println!("{}", to_json(&report));
    Ok(())
}

/// Utterance text or pre-tokenized words.
#[derive(Deserialize)]
#[serde(untagged)]
enum Utterance {
    Text(String),
    Tokens(Vec<String>),
}

impl Utterance {
    fn tokens(&self) -> Vec<String> {
        match self {
            Utterance::Text(s) => tokenize(s),
            Utterance::Tokens(t) => t.iter().flat_map(|w| tokenize(w)).collect(),
        }
    }
}

#[derive(Deserialize)]
struct InputTurn {
    #[serde(default)]
    system: Option<Utterance>,
    #[serde(default)]
    user: Option<Utterance>,
}

#[derive(Deserialize)]
struct InputDialogue {
    #[serde(default)]
    id: Option<String>,
    turns: Vec<InputTurn>,
}

#[derive(Serialize)]
struct PredictedTurn<'a> {
    turn: usize,
    belief: &'a BeliefState,
    flat: String,
}

#[derive(Serialize)]
struct TurnAttention<'a> {
    turn: usize,
    #[serde(flatten)]
    record: &'a AttentionRecord,
}

fn cmd_predict(args: PredictArgs) -> CliResult<()> {
    let loaded = load(&args.ck)?;
    let mut text = String::new();
    let name = args.dialogue.display().to_string();
    let read = if name == "-" {
        std::io::stdin().read_to_string(&mut text).map(|_| ())
    } else {
        std::fs::read_to_string(&args.dialogue).map(|t| text = t)
    };
    read.map_err(|e| CliError::Data(format!("cannot read {name}: {e}")))?;
    let dialogue: InputDialogue =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("invalid dialogue in {name}: {e}")))?;
    let _ = dialogue.id;

    let tracker = Tracker::new(&loaded.checkpoint.model, &loaded.table, &loaded.checkpoint.frequencies);
    let mut attention = match &args.attention {
        Some(p) => Some(BufWriter::new(std::fs::File::create(p).map_err(|e| {
            CliError::Internal(format!("cannot write {}: {e}", p.display()))
        })?)),
        None => None,
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut previous = BeliefState::new();
    for (t, turn) in dialogue.turns.iter().enumerate() {
        let inp = TurnInput {
            system: turn.system.as_ref().map(Utterance::tokens).unwrap_or_default(),
            user: turn.user.as_ref().map(Utterance::tokens).unwrap_or_default(),
            previous,
        };
        let pred = tracker.predict_turn(&inp)?;
        let row = PredictedTurn {
            turn: t,
            belief: &pred.state,
            flat: pred.state.to_string(),
        };
        writeln!(out, "{}", to_json(&row)).map_err(|e| CliError::Internal(e.to_string()))?;
        if let Some(w) = attention.as_mut() {
            for record in &pred.attention {
                writeln!(w, "{}", to_json(&TurnAttention { turn: t, record }))
                    .map_err(|e| CliError::Internal(e.to_string()))?;
            }
        }
        previous = pred.state;
    }
    if let Some(mut w) = attention {
        w.flush().map_err(|e| CliError::Internal(e.to_string()))?;
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> CliResult<()> {
    if args.repeats == 0 || args.inflation.is_empty() {
        return Err(CliError::Config("need at least one repeat and one inflation level".into()));
    }
    let loaded = load(&args.ck)?;
    let corpus = load_corpus(&args.corpus.corpus, args.corpus.format.into())?;
    let mut vocab = loaded.checkpoint.vocabulary.clone();
    vocab.merge(&corpus.vocabulary());
    let cfg = BenchConfig {
        inflation: args.inflation,
        repeats: args.repeats,
    };
    let report = benchmark_inference(
        &loaded.checkpoint.model,
        &vocab,
        &loaded.source,
        &loaded.checkpoint.frequencies,
        &corpus,
        &cfg,
    )?;
    if let Some(p) = &args.csv {
        write_output(p, report.to_csv().as_bytes())?;
    }
    if args.json {
        println!("{}", to_json(&report));
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> CliResult<()> {
    let spec = SynthSpec {
        domains: args.domains,
        slots: args.slots,
        values: args.values,
    };
    let corpus = gen_synthetic(spec, args.dialogues, args.seed);
    let text = corpus.to_json();
    match &args.out {
        Some(p) => write_output(p, text.as_bytes()),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_stats(args: StatsArgs) -> CliResult<()> {
    let corpus = load_corpus(&args.corpus.corpus, args.corpus.format.into())?;
    let stats = corpus_stats(&corpus)?;
    let violations = check_accumulation(&corpus).len();
    if args.json {
        println!(
            "{}",
            serde_json::json!({ "stats": stats, "accumulation_violations": violations })
        );
    } else {
        println!("dialogues              {}", stats.dialogues);
        println!("turns                  {}", stats.turns);
        println!("turns per dialogue     {:.2}", stats.t);
        println!("user tokens per turn   {:.2}", stats.s);
        println!("slots (nested)         {}", stats.n_nested);
        println!("slots (combined)       {}", stats.n_combined);
        println!("values                 {}", stats.m);
        println!("accumulation breaks    {violations}");
    }
    Ok(())
}

fn itm_inputs(path: Option<&Path>, format: CorpusFormat, fallback: ItmInputs) -> CliResult<ItmInputs> {
    match path {
        Some(p) => Ok(ItmInputs::from(&corpus_stats(&load_corpus(p, format)?)?)),
        None => Ok(fallback),
    }
}

fn cmd_itm(args: ItmArgs) -> CliResult<()> {
    let format = args.format.into();
    let d1 = itm_inputs(args.from.as_deref(), format, WOZ2_STATS)?;
    let d2 = itm_inputs(args.to.as_deref(), format, MULTIWOZ_STATS)?;
    let classes = [ItcClass::Constant, ItcClass::Linear, ItcClass::Product];
    let mut rows = Vec::with_capacity(classes.len());
    for itc in classes {
        rows.push((itc, itm(&d1, &d2, itc)?));
    }
    if args.json {
        let rows: Vec<_> = rows
            .iter()
            .map(|(itc, k)| serde_json::json!({ "itc": itc, "itm": k }))
            .collect();
        println!("{}", serde_json::json!({ "from": d1, "to": d2, "rows": rows }));
    } else {
        for (itc, k) in rows {
            let name = serde_json::to_value(itc).expect("itc serializes");
            println!("{:>4} {:>14.4}", name.as_str().unwrap_or(""), k);
        }
    }
    Ok(())
}

fn cmd_validate(args: ValidateArgs) -> CliResult<()> {
    let file = load_embedding_file_with_context(&args.file).map_err(|e| match e {
        EmbeddingError::Io(io) => CliError::Data(format!("cannot read {}: {io}", args.file.display())),
        other => other.into(),
    })?;
    println!(
        "{}",
        serde_json::json!({
            "dim": file.table.dim(),
            "vocab": file.table.vocab_len(),
            "units": file.table.unit_len(),
            "contextual": file.contextual.len(),
            "sha256": sha256_file(&args.file)?,
        })
    );
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Itm(a) => cmd_itm(a),
        Command::ValidateEmbeddings(a) => cmd_validate(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("comer: {e}");
            ExitCode::from(e.code())
        }
    }
}
