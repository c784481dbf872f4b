//! `wordlm`: train, evaluate, generate with and analyze word-pooled models.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 1 for
//! runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

use wordlm::cost::{reconcile, reconcile_table, CostModelParams, CostReport, Preset};
use wordlm::evaluation::EvalReport;
use wordlm::experiment::{evaluate_model, load_run, run_experiment, validation_data, write_json, ExperimentConfig, MetricSet};
use wordlm::generation::{generate_flat_words, generate_hierarchical, DepthModel, GenAudit, GenMode};
use wordlm::model::Arch;
use wordlm::tokenizer::{Scheme, Tokenizer};
use wordlm::Error;

/// Environment variable naming the root directory for new runs.
const OUT_ENV: &str = "WORDLM_OUT";

#[derive(Parser)]
#[command(name = "wordlm", version, about = "Word-pooled language models and their baselines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory.
    Train(Box<TrainArgs>),
    /// Score a checkpoint on its validation split.
    Evaluate(EvaluateArgs),
    /// Greedy generation from a checkpoint.
    Generate(GenerateArgs),
    /// Analytic training and generation cost tables.
    Analyze(AnalyzeArgs),
    /// Show token ids for a string.
    Tokenize(TokenizeArgs),
}

/// Every flag overrides the same-named field of the config file.
#[derive(Args)]
struct TrainArgs {
    /// Flat JSON config; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory to create. Defaults to a fresh directory under $WORDLM_OUT (or ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    tokenizer: Option<String>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    worddec_layers: Option<usize>,
    #[arg(long)]
    n_cls: Option<usize>,
    #[arg(long)]
    max_word_len: Option<usize>,
    #[arg(long)]
    block_chars: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    valid_ratio: Option<f64>,
    #[arg(long)]
    subword_vocab_size: Option<usize>,
    /// Disable data parallelism.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus to split for validation; defaults to the training corpus.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Expected tokenizer scheme; a mismatch with the checkpoint is an error.
    #[arg(long)]
    tokenizer: Option<String>,
    #[arg(long, default_value = "word,char,rare,num")]
    metrics: String,
    /// Directory for evaluation.json and evaluation.txt; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "")]
    prompt: String,
    #[arg(long, default_value_t = 20)]
    max_words: usize,
    /// Run the word predictor and word decoder on separate threads.
    #[arg(long)]
    pipelined: bool,
    #[arg(long)]
    tokenizer: Option<String>,
    /// Write forward-pass counts as JSON to this path.
    #[arg(long)]
    audit: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Characters-per-word preset: en, fr or ru.
    #[arg(long, default_value = "en")]
    preset: String,
    #[arg(long = "T", default_value_t = 192.0)]
    t: f64,
    #[arg(long, default_value_t = 8.0)]
    layers: f64,
    #[arg(long, default_value_t = 512.0)]
    dim: f64,
    /// Characters per subword token.
    #[arg(long, default_value_t = 2.8)]
    s: f64,
    /// Activation memory budget.
    #[arg(long, default_value_t = 1e9)]
    m: f64,
    /// Corpus size in characters.
    #[arg(long, default_value_t = 1e9)]
    n_corpus: f64,
    #[arg(long, default_value_t = 4)]
    n_cls: usize,
    /// Also write the report as JSON to this path.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Generation audit files (from `generate --audit`) to reconcile against the formulas.
    #[arg(long, num_args = 1..)]
    audit: Vec<PathBuf>,
}

#[derive(Args)]
struct TokenizeArgs {
    #[arg(long, default_value = "byte")]
    tokenizer: String,
    /// Take the trained vocabulary from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Take the trained vocabulary from a saved tokenizer directory.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Print token strings instead of ids.
    #[arg(long)]
    strings: bool,
    text: String,
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::UnknownScheme(_) | Error::SchemeMismatch { .. } => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(*a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Tokenize(a) => cmd_tokenize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T, Failure> {
    s.parse().map_err(Failure::from)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let cfg = resolve_config(&a)?;
    if !cfg.corpus.exists() {
        return Err(Failure::usage(format!("corpus not found: {}", cfg.corpus.display())));
    }
    cfg.validate()?;
    let out = match a.out {
        Some(p) => p,
        None => fresh_run_dir(&cfg),
    };
    if out.exists() {
        return Err(Failure::usage(format!("output directory already exists: {}", out.display())));
    }
    eprintln!("run directory: {}", out.display());
    let outcome = run_experiment(&cfg, Some(&out))?;
    for m in &outcome.metrics {
        eprintln!(
            "epoch {:>3}  step {:>7}  loss {:.4}  word {:.2}%  char {:.2}%",
            m.epoch,
            m.step,
            m.train_loss,
            m.val_word_acc,
            m.val_char_acc
        );
    }
    print!("{}", EvalReport::table(std::slice::from_ref(&outcome.report)));
    Ok(())
}

/// Merges defaults, the config file and the flags, in increasing precedence.
fn resolve_config(a: &TrainArgs) -> Result<ExperimentConfig, Failure> {
    let mut merged = Map::new();
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        match serde_json::from_str::<Value>(&text) {
            Ok(Value::Object(m)) => merged = m,
            Ok(_) => return Err(Failure::usage(format!("config {} is not a JSON object", path.display()))),
            Err(e) => return Err(Failure::usage(format!("config {}: {e}", path.display()))),
        }
    }
    let mut set = |key: &str, v: Option<Value>| {
        if let Some(v) = v {
            merged.insert(key.to_string(), v);
        }
    };
    set("corpus", a.corpus.as_ref().map(|p| Value::from(p.to_string_lossy().into_owned())));
    set("tokenizer", a.tokenizer.clone().map(Value::from));
    set("arch", a.arch.clone().map(Value::from));
    set("preset", a.preset.clone().map(Value::from));
    set("layers", a.layers.map(Value::from));
    set("dim", a.dim.map(Value::from));
    set("heads", a.heads.map(Value::from));
    set("encoder_layers", a.encoder_layers.map(Value::from));
    set("worddec_layers", a.worddec_layers.map(Value::from));
    set("n_cls", a.n_cls.map(Value::from));
    set("max_word_len", a.max_word_len.map(Value::from));
    set("block_chars", a.block_chars.map(Value::from));
    set("lr", a.lr.map(Value::from));
    set("batch_size", a.batch_size.map(Value::from));
    set("epochs", a.epochs.map(Value::from));
    set("weight_decay", a.weight_decay.map(Value::from));
    set("clip_norm", a.clip_norm.map(Value::from));
    set("max_steps", a.max_steps.map(Value::from));
    set("seed", a.seed.map(Value::from));
    set("valid_ratio", a.valid_ratio.map(Value::from));
    set("subword_vocab_size", a.subword_vocab_size.map(Value::from));
    set("sequential", a.sequential.then_some(Value::Bool(true)));
    // Normalise enum names so `--arch hier` and friends work like the file form.
    if let Some(Value::String(s)) = merged.get("arch") {
        let arch: Arch = parse(s)?;
        merged.insert("arch".into(), serde_json::to_value(arch).map_err(|e| Failure::usage(e.to_string()))?);
    }
    if let Some(Value::String(s)) = merged.get("tokenizer") {
        let scheme: Scheme = parse(s)?;
        merged.insert("tokenizer".into(), Value::from(scheme.as_str()));
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| Failure::usage(format!("invalid configuration: {e}")))
}

fn fresh_run_dir(cfg: &ExperimentConfig) -> PathBuf {
    let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    let stem = format!("{}-seed{}", cfg.label(), cfg.seed);
    (0..)
        .map(|i| if i == 0 { root.join(&stem) } else { root.join(format!("{stem}-{i}")) })
        .find(|p| !p.exists())
        .expect("unbounded search")
}

fn scheme_flag(flag: &Option<String>) -> Result<Option<Scheme>, Failure> {
    flag.as_deref().map(parse).transpose()
}

fn require_file(path: &Path, what: &str) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::usage(format!("{what} not found: {}", path.display())))
    }
}

fn cmd_evaluate(a: EvaluateArgs) -> CmdResult {
    require_file(&a.checkpoint, "checkpoint")?;
    let metrics: MetricSet = parse(&a.metrics)?;
    let run = load_run(&a.checkpoint, scheme_flag(&a.tokenizer)?)?;
    if let Some(c) = &a.corpus {
        require_file(c, "corpus")?;
    } else if !run.config.corpus.exists() {
        return Err(Failure::usage(format!(
            "training corpus not found: {} (pass --corpus)",
            run.config.corpus.display()
        )));
    }
    let (valid, rare, frequent) = validation_data(&run.config, a.corpus.as_deref())?;
    let report = evaluate_model(&run.model, &run.tokenizer, &run.config.label(), &valid, &rare, &frequent, metrics, &run.config)?;
    let out = match a.out {
        Some(o) => o,
        None => default_eval_dir(&a.checkpoint),
    };
    std::fs::create_dir_all(&out).map_err(|e| Failure::from(Error::io(&out, e)))?;
    write_json(&out.join("evaluation.json"), &report)?;
    let table = EvalReport::table(std::slice::from_ref(&report));
    let txt = out.join("evaluation.txt");
    std::fs::write(&txt, &table).map_err(|e| Failure::from(Error::io(&txt, e)))?;
    print!("{table}");
    Ok(())
}

/// `run/checkpoints/x.ckpt` reports into `run/`.
fn default_eval_dir(checkpoint: &Path) -> PathBuf {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    match dir.file_name() {
        Some(n) if n == "checkpoints" => dir.parent().unwrap_or(Path::new(".")).to_path_buf(),
        _ => dir.to_path_buf(),
    }
}

fn cmd_generate(a: GenerateArgs) -> CmdResult {
    require_file(&a.checkpoint, "checkpoint")?;
    let run = load_run(&a.checkpoint, scheme_flag(&a.tokenizer)?)?;
    let g = match run.model.config().arch {
        Arch::Flat => {
            if a.pipelined {
                return Err(Failure::usage("--pipelined needs a hierarchical checkpoint"));
            }
            generate_flat_words(&run.model, &run.tokenizer, &a.prompt, a.max_words)?
        }
        Arch::Hierarchical => {
            let mode = if a.pipelined { GenMode::Pipelined } else { GenMode::Sequential };
            generate_hierarchical(&run.model, &run.tokenizer, &a.prompt, a.max_words, mode)?
        }
    };
    println!("{}", g.text);
    if let Some(path) = &a.audit {
        write_json(path, &g.audit)?;
    }
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs) -> CmdResult {
    let preset: Preset = parse(&a.preset)?;
    let p = CostModelParams {
        m: a.m,
        layers: a.layers,
        dim: a.dim,
        t: a.t,
        n_corpus: a.n_corpus,
        s: a.s,
        ..CostModelParams::default()
    }
    .with_preset(preset);
    let report = CostReport::new(p, a.n_cls)?;
    print!("{}", report.table());
    if !a.audit.is_empty() {
        let mut audits = Vec::new();
        for path in &a.audit {
            require_file(path, "audit file")?;
            let text = std::fs::read_to_string(path).map_err(|e| Failure::from(Error::io(path, e)))?;
            let audit: GenAudit = serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            audits.push((path.display().to_string(), audit));
        }
        let depth = DepthModel::quarter(a.layers.round() as usize);
        println!();
        print!("{}", reconcile_table(&reconcile(&audits, &depth, &p)));
    }
    if let Some(path) = &a.json {
        write_json(path, &report)?;
    }
    Ok(())
}

fn cmd_tokenize(a: TokenizeArgs) -> CmdResult {
    let scheme: Scheme = parse(&a.tokenizer)?;
    let tok = if let Some(ckpt) = &a.checkpoint {
        require_file(ckpt, "checkpoint")?;
        load_run(ckpt, Some(scheme))?.tokenizer
    } else if let Some(dir) = &a.vocab {
        let t = Tokenizer::load(dir)?;
        if t.scheme() != scheme {
            return Err(Error::SchemeMismatch {
                checkpoint: t.scheme().to_string(),
                requested: scheme.to_string(),
            }
            .into());
        }
        t
    } else if scheme == Scheme::Byte {
        Tokenizer::Byte
    } else {
        return Err(Failure::usage(format!(
            "the {scheme} tokenizer is trained; pass --checkpoint or --vocab"
        )));
    };
    let ids = tok.encode(&a.text).ids;
    let out = if a.strings {
        Value::from(ids.iter().map(|&i| tok.token_text(i)).collect::<Vec<_>>())
    } else {
        Value::from(ids)
    };
    println!("{out}");
    Ok(())
}
