//! Reproducible experiment runs: corpus, split, tokenizer, model, training
//! and the final report, all driven by one flat configuration.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{compute_stats, read_documents, split_documents, stratify_by_frequency, Document, Split};
use crate::error::{Error, Result};
use crate::evaluation::{extract_number_examples, number_estimation, score_split, stratified_accuracy, EvalReport};
use crate::exec::Exec;
use crate::model::{Arch, Checkpoint, Model, ModelConfig};
use crate::tokenizer::{context_budget, Scheme, Tokenizer, TokenizerOptions};
use crate::training::{make_sequences, tokenize_docs, train, MetricsRecord, RunDir, Sequence, TrainConfig, Trainer, ValMetrics};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalePreset {
    /// Small enough for a laptop CPU: 4 layers, width 128, 5 epochs.
    #[default]
    Desk,
    /// 8 layers, width 512, 100 epochs at batch size 2.
    Paper,
}

impl FromStr for ScalePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(ScalePreset::Desk),
            "paper" => Ok(ScalePreset::Paper),
            other => Err(Error::config(format!("unknown preset `{other}` (expected desk or paper)"))),
        }
    }
}

/// Flat experiment description. Unset optional fields come from the preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: PathBuf,
    pub tokenizer: Scheme,
    pub arch: Arch,
    pub preset: ScalePreset,
    pub layers: Option<usize>,
    pub dim: Option<usize>,
    pub heads: Option<usize>,
    pub encoder_layers: usize,
    pub worddec_layers: usize,
    pub n_cls: usize,
    pub max_word_len: usize,
    /// Context size in characters; token budgets follow from it.
    pub block_chars: usize,
    pub packed: bool,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub eval_every: usize,
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub valid_ratio: f64,
    pub subword_vocab_size: usize,
    pub word_vocab_max: usize,
    /// Training-frequency thresholds of the rare (`<`) and frequent (`>`)
    /// strata.
    pub rare_max: u64,
    pub freq_min: u64,
    /// Minimum characters before a number for it to be scored.
    pub number_context: usize,
    pub max_number_examples: usize,
    /// Disables data parallelism.
    pub sequential: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: PathBuf::new(),
            tokenizer: Scheme::Char,
            arch: Arch::Flat,
            preset: ScalePreset::Desk,
            layers: None,
            dim: None,
            heads: None,
            encoder_layers: 2,
            worddec_layers: 2,
            n_cls: 4,
            max_word_len: 24,
            block_chars: 192,
            packed: true,
            lr: None,
            batch_size: None,
            epochs: None,
            weight_decay: 0.1,
            clip_norm: None,
            eval_every: 1,
            max_steps: None,
            seed: 0,
            valid_ratio: 0.1,
            subword_vocab_size: 2048,
            word_vocab_max: 50_000,
            rare_max: 10,
            freq_min: 45,
            number_context: 192,
            max_number_examples: 200,
            sequential: false,
        }
    }
}

impl ExperimentConfig {
    pub fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let (lr, batch, epochs) = match self.preset {
            ScalePreset::Desk => (1e-3, 2, 5),
            ScalePreset::Paper => (1e-4, 2, 100),
        };
        TrainConfig {
            lr: self.lr.unwrap_or(lr),
            batch_size: self.batch_size.unwrap_or(batch),
            block_chars: self.block_chars,
            epochs: self.epochs.unwrap_or(epochs),
            weight_decay: self.weight_decay,
            seed: self.seed,
            eval_every: self.eval_every,
            clip_norm: self.clip_norm,
            ..TrainConfig::default()
        }
    }

    /// Model configuration for a tokenizer of `vocab_size` and a flat token
    /// budget of `context_tokens`.
    pub fn model_config(&self, vocab_size: usize, context_tokens: usize) -> ModelConfig {
        let base = match self.arch {
            Arch::Flat => ModelConfig::flat(self.tokenizer, vocab_size, self.block_chars, context_tokens),
            Arch::Hierarchical => ModelConfig {
                encoder_layers: self.encoder_layers,
                worddec_layers: self.worddec_layers,
                n_cls: self.n_cls,
                ..ModelConfig::hierarchical(self.tokenizer, vocab_size, self.block_chars)
            },
        };
        let base = match self.preset {
            ScalePreset::Desk => base,
            ScalePreset::Paper => base.at_paper_scale(),
        };
        ModelConfig {
            base_layers: self.layers.unwrap_or(base.base_layers),
            dim: self.dim.unwrap_or(base.dim),
            heads: self.heads.unwrap_or(base.heads),
            max_word_len: self.max_word_len,
            packed: self.packed,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpus.as_os_str().is_empty() {
            return Err(Error::config("no corpus path given"));
        }
        if self.arch == Arch::Hierarchical && !self.tokenizer.is_base_unit() {
            return Err(Error::config(format!(
                "hierarchical models need the byte or char tokenizer, not {}",
                self.tokenizer
            )));
        }
        if self.rare_max >= self.freq_min {
            return Err(Error::config("rare_max must be below freq_min"));
        }
        self.train_config().validate()?;
        self.model_config(300, self.block_chars).validate()
    }

    /// Short run label such as `char-flat` or `char-hier-k4`.
    pub fn label(&self) -> String {
        match self.arch {
            Arch::Flat => format!("{}-flat", self.tokenizer),
            Arch::Hierarchical => format!("{}-hier-k{}", self.tokenizer, self.n_cls),
        }
    }
}

/// Which metrics a report contains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetricSet {
    pub word: bool,
    pub char: bool,
    pub rare: bool,
    pub num: bool,
}

impl MetricSet {
    pub const ALL: MetricSet = MetricSet {
        word: true,
        char: true,
        rare: true,
        num: true,
    };
}

impl FromStr for MetricSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut m = MetricSet {
            word: false,
            char: false,
            rare: false,
            num: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "word" => m.word = true,
                "char" => m.char = true,
                "rare" => m.rare = true,
                "num" => m.num = true,
                other => return Err(Error::config(format!("unknown metric `{other}` (expected word, char, rare, num)"))),
            }
        }
        Ok(m)
    }
}

impl fmt::Display for MetricSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.word, "word"), (self.char, "char"), (self.rare, "rare"), (self.num, "num")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        f.write_str(&names.join(","))
    }
}

/// Everything derived from the corpus before training starts.
pub struct Prepared {
    pub split: Split,
    pub tokenizer: Tokenizer,
    pub chars_per_token: f64,
    pub model_config: ModelConfig,
    pub train_seqs: Vec<Sequence>,
    pub rare: BTreeSet<String>,
    pub frequent: BTreeSet<String>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let docs = read_documents(&cfg.corpus)?;
    prepare_docs(cfg, &docs)
}

pub fn prepare_docs(cfg: &ExperimentConfig, docs: &[Document]) -> Result<Prepared> {
    let split = split_documents(docs, cfg.valid_ratio, cfg.seed)?;
    let opts = TokenizerOptions {
        subword_vocab_size: cfg.subword_vocab_size,
        word_vocab_max: cfg.word_vocab_max,
    };
    let tokenizer = Tokenizer::train(cfg.tokenizer, &split.train, opts)?;
    let chars_per_token = tokenizer.chars_per_token(&split.train)?;
    let context_tokens = match cfg.arch {
        Arch::Flat => context_budget(cfg.tokenizer, chars_per_token, cfg.block_chars)?,
        Arch::Hierarchical => cfg.block_chars,
    };
    let model_config = cfg.model_config(tokenizer.vocab_size(), context_tokens);
    model_config.validate()?;
    let stream = tokenize_docs(&split.train, &tokenizer, cfg.arch, cfg.max_word_len, cfg.exec());
    let train_seqs = make_sequences(&stream, context_tokens)?;
    let stats = compute_stats(&split.train)?;
    let (rare, frequent) = stratify_by_frequency(&stats.word_freq, cfg.rare_max, cfg.freq_min)?;
    Ok(Prepared {
        split,
        tokenizer,
        chars_per_token,
        model_config,
        train_seqs,
        rare,
        frequent,
    })
}

/// Scores `model` on `valid` with the requested metrics.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    model: &Model<f32>,
    tok: &Tokenizer,
    label: &str,
    valid: &[Document],
    rare: &BTreeSet<String>,
    frequent: &BTreeSet<String>,
    metrics: MetricSet,
    cfg: &ExperimentConfig,
) -> Result<EvalReport> {
    let exec = cfg.exec();
    let mut report = EvalReport {
        model: label.to_string(),
        ..EvalReport::default()
    };
    if metrics.word || metrics.char || metrics.rare {
        let scores = score_split(model, tok, valid, exec)?;
        report.words = scores.records.len();
        if metrics.word {
            report.word_acc = scores.word_acc();
        }
        if metrics.char {
            report.char_acc = scores.char_acc();
        }
        if metrics.rare {
            let s = stratified_accuracy(&scores.records, rare, frequent);
            report.rare_acc = s.rare_acc;
            report.freq_acc = s.freq_acc;
            report.rare_words = s.rare_count;
            report.frequent_words = s.freq_count;
        }
    }
    if metrics.num {
        let mut examples = extract_number_examples(valid, cfg.number_context);
        examples.truncate(cfg.max_number_examples);
        report.number_examples = examples.len();
        let s = number_estimation(model, tok, &examples, exec)?;
        report.num_pct = s.num_pct;
        report.eacc = s.eacc;
        report.mdape = s.mdape;
    }
    Ok(report)
}

/// Result of [`run_experiment`].
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub report: EvalReport,
    pub metrics: Vec<MetricsRecord>,
    pub num_params: usize,
    pub steps: u64,
    pub model: Model<f32>,
    pub tokenizer: Tokenizer,
}

/// Trains and evaluates one configuration. When `out` is given, the run
/// directory is created (it must not already exist) and receives
/// `config.json`, `checkpoints/last.ckpt`, `metrics.jsonl`, `report.json`
/// and `report.txt`.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentOutcome> {
    let prep = prepare(cfg)?;
    run_prepared(cfg, prep, out)
}

pub fn run_prepared(cfg: &ExperimentConfig, prep: Prepared, out: Option<&Path>) -> Result<ExperimentOutcome> {
    let run_dir = match out {
        Some(dir) => Some(create_run_dir(dir, cfg)?),
        None => None,
    };
    let exec = cfg.exec();
    let model = Model::new(prep.model_config.clone(), cfg.seed)?;
    let num_params = model.num_params();
    let mut trainer = Trainer::new(model, cfg.train_config(), exec)?;
    let meta = serde_json::json!({
        "experiment": cfg,
        "tokenizer": prep.tokenizer.to_json(),
        "chars_per_token": prep.chars_per_token,
    });
    let tok = &prep.tokenizer;
    let valid = &prep.split.valid;
    let evaluate = |m: &Model<f32>| -> Result<ValMetrics> {
        let s = score_split(m, tok, valid, exec)?;
        Ok(ValMetrics {
            val_word_acc: s.word_acc().unwrap_or(0.0),
            val_char_acc: s.char_acc().unwrap_or(0.0),
        })
    };
    let metrics = match cfg.max_steps {
        None => train(&mut trainer, &prep.train_seqs, run_dir.as_ref(), meta.clone(), evaluate)?,
        Some(max) => {
            trainer.run(&prep.train_seqs, Some(max), |_, _, _| Ok(()))?;
            if let Some(dir) = &run_dir {
                let per_epoch = trainer.steps_per_epoch(&prep.train_seqs);
                trainer.checkpoint(per_epoch, meta.clone()).save(&dir.last_checkpoint())?;
            }
            Vec::new()
        }
    };
    let report = evaluate_model(
        trainer.model(),
        tok,
        &cfg.label(),
        valid,
        &prep.rare,
        &prep.frequent,
        MetricSet::ALL,
        cfg,
    )?;
    if let Some(dir) = &run_dir {
        write_json(&dir.root.join("report.json"), &report)?;
        let txt = dir.root.join("report.txt");
        std::fs::write(&txt, EvalReport::table(std::slice::from_ref(&report))).map_err(|e| Error::io(&txt, e))?;
    }
    Ok(ExperimentOutcome {
        report,
        metrics,
        num_params,
        steps: trainer.step(),
        model: trainer.model().clone(),
        tokenizer: prep.tokenizer,
    })
}

fn create_run_dir(dir: &Path, cfg: &ExperimentConfig) -> Result<RunDir> {
    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    // create_dir fails if the directory exists, so two runs never share one
    std::fs::create_dir(dir).map_err(|e| Error::io(dir, e))?;
    let run = RunDir::create(dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    Ok(run)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

/// A trained model together with everything needed to use it.
pub struct LoadedRun {
    pub model: Model<f32>,
    pub tokenizer: Tokenizer,
    pub config: ExperimentConfig,
}

/// Loads a checkpoint written by [`run_experiment`]. When `scheme` is
/// given it must match the checkpoint.
pub fn load_run(checkpoint: &Path, scheme: Option<Scheme>) -> Result<LoadedRun> {
    let ckpt = Checkpoint::load(checkpoint)?;
    if let Some(s) = scheme {
        if s != ckpt.config.scheme {
            return Err(Error::SchemeMismatch {
                checkpoint: ckpt.config.scheme.to_string(),
                requested: s.to_string(),
            });
        }
    }
    let tok_json = ckpt
        .meta
        .get("tokenizer")
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no tokenizer".into()))?;
    let tokenizer = Tokenizer::from_json(tok_json)?;
    let config: ExperimentConfig = match ckpt.meta.get("experiment") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => ExperimentConfig::default(),
    };
    Ok(LoadedRun {
        model: ckpt.model()?,
        tokenizer,
        config,
    })
}

/// Rebuilds the validation split and strata of a loaded run, optionally
/// from a different corpus file.
pub fn validation_data(cfg: &ExperimentConfig, corpus: Option<&Path>) -> Result<(Vec<Document>, BTreeSet<String>, BTreeSet<String>)> {
    let path = corpus.unwrap_or(&cfg.corpus);
    let docs = read_documents(path)?;
    let split = split_documents(&docs, cfg.valid_ratio, cfg.seed)?;
    let stats = compute_stats(&split.train)?;
    let (rare, frequent) = stratify_by_frequency(&stats.word_freq, cfg.rare_max, cfg.freq_min)?;
    Ok((split.valid, rare, frequent))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve() {
        let desk = ExperimentConfig::default();
        let m = desk.model_config(100, 192);
        assert_eq!((m.base_layers, m.dim), (4, 128));
        assert_eq!(desk.train_config().epochs, 5);
        let paper = ExperimentConfig {
            preset: ScalePreset::Paper,
            arch: Arch::Hierarchical,
            ..ExperimentConfig::default()
        };
        let m = paper.model_config(100, 192);
        assert_eq!((m.base_layers, m.dim, m.n_cls, m.block_chars), (8, 512, 4, 192));
        let t = paper.train_config();
        assert_eq!((t.lr, t.batch_size, t.epochs), (1e-4, 2, 100));
        let over = ExperimentConfig {
            layers: Some(2),
            lr: Some(0.5),
            ..paper
        };
        assert_eq!(over.model_config(100, 192).base_layers, 2);
        assert_eq!(over.train_config().lr, 0.5);
    }

    #[test]
    fn metric_sets_parse() {
        let m: MetricSet = "word,num".parse().unwrap();
        assert!(m.word && m.num && !m.char && !m.rare);
        assert_eq!(m.to_string(), "word,num");
        assert!("word,bogus".parse::<MetricSet>().is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let r: std::result::Result<ExperimentConfig, _> = serde_json::from_str(r#"{"corpus": "x", "lrr": 1}"#);
        assert!(r.is_err());
        let c: ExperimentConfig = serde_json::from_str(r#"{"corpus": "x", "tokenizer": "byte"}"#).unwrap();
        assert_eq!(c.tokenizer, Scheme::Byte);
    }

    #[test]
    fn hierarchical_subwords_are_rejected() {
        let c = ExperimentConfig {
            corpus: "x".into(),
            arch: Arch::Hierarchical,
            tokenizer: Scheme::Subword,
            ..ExperimentConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
