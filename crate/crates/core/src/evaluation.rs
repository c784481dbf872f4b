//! Next-word, character, stratified and number-estimation metrics.
//!
//! Word accuracy asks whether greedy decoding from the gold context reproduces
//! the next word exactly. For base-unit and whole-word schemes that holds iff
//! every unit of the word and the terminator that follows it are the argmax
//! under teacher forcing, so one forward pass per block scores every word in
//! it. Subword models can reach the right string through a different
//! segmentation; when the first wrong token is still a prefix of the gold
//! word, the word is decoded greedily to settle it.
//!
//! Validation text is laid out exactly as in training: flat streams are cut
//! into blocks of the context budget and hierarchical streams are packed into
//! blocks of whole words, so every word is conditioned on the gold text since
//! the start of its block. Words that straddle a block edge are not scored.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{clean_text, document_words, segment_words, Document};
use crate::error::Result;
use crate::exec::{self, Exec};
use crate::generation::{argmax, generate_hierarchical, GenMode};
use crate::model::{split_long_word, Arch, Model, ModelConfig};
use crate::nn::Tensor;
use crate::tokenizer::{is_special, Scheme, Tokenizer, BOS, EOW, UNK};

/// What the metrics need from a model.
pub trait Predictor: Sync {
    fn config(&self) -> &ModelConfig;
    /// Flat models: logits `[len, V]` for `inputs`, row `t` predicting the
    /// token after `inputs[..=t]`.
    fn flat_logits(&self, inputs: &[u32]) -> Result<Tensor<f32>>;
    /// Hierarchical models: teacher-forced logits per word, `[len + 1, V]`
    /// with the last row predicting the terminator.
    fn word_logits(&self, words: &[&[u32]]) -> Result<Vec<Tensor<f32>>>;
}

impl Predictor for Model<f32> {
    fn config(&self) -> &ModelConfig {
        Model::config(self)
    }

    fn flat_logits(&self, inputs: &[u32]) -> Result<Tensor<f32>> {
        self.flat_forward(inputs)
    }

    fn word_logits(&self, words: &[&[u32]]) -> Result<Vec<Tensor<f32>>> {
        Model::word_logits(self, words)
    }
}

/// Outcome for one scored validation word.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordRecord {
    pub word: String,
    pub correct: bool,
}

/// Teacher-forced scores of a validation split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitScores {
    pub records: Vec<WordRecord>,
    /// Characters credited to correct next-unit predictions.
    pub char_hits: usize,
    /// Characters over all predicted positions.
    pub char_total: usize,
}

impl SplitScores {
    pub fn word_acc(&self) -> Option<f64> {
        accuracy(&self.records)
    }

    pub fn char_acc(&self) -> Option<f64> {
        percent(self.char_hits, self.char_total)
    }

    fn absorb(&mut self, other: SplitScores) {
        self.records.extend(other.records);
        self.char_hits += other.char_hits;
        self.char_total += other.char_total;
    }
}

fn percent(hits: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| 100.0 * hits as f64 / total as f64)
}

/// Percentage of correct records, `None` when there are none.
pub fn accuracy(records: &[WordRecord]) -> Option<f64> {
    percent(records.iter().filter(|r| r.correct).count(), records.len())
}

/// Scores every position of `docs` under teacher forcing.
pub fn score_split<P: Predictor>(model: &P, tok: &Tokenizer, docs: &[Document], exec: Exec) -> Result<SplitScores> {
    match model.config().arch {
        Arch::Flat => score_flat(model, tok, docs, exec),
        Arch::Hierarchical => score_hier(model, tok, docs, exec),
    }
}

/// Next-word accuracy and the per-word records behind it.
pub fn word_prediction_accuracy<P: Predictor>(
    model: &P,
    tok: &Tokenizer,
    docs: &[Document],
    exec: Exec,
) -> Result<(Option<f64>, Vec<WordRecord>)> {
    let s = score_split(model, tok, docs, exec)?;
    Ok((s.word_acc(), s.records))
}

/// Credit-weighted next-unit accuracy: a correct token earns as many
/// characters as it spans.
pub fn char_accuracy<P: Predictor>(model: &P, tok: &Tokenizer, docs: &[Document], exec: Exec) -> Result<Option<f64>> {
    Ok(score_split(model, tok, docs, exec)?.char_acc())
}

struct FlatStream {
    ids: Vec<u32>,
    /// Word text with its token span `[start, end)`.
    words: Vec<(String, usize, usize)>,
}

fn flat_stream(tok: &Tokenizer, docs: &[Document]) -> FlatStream {
    let sep = tok.separator();
    let mut s = FlatStream {
        ids: Vec::new(),
        words: Vec::new(),
    };
    for doc in docs {
        for w in document_words(doc).words {
            if !s.ids.is_empty() {
                s.ids.extend(sep);
            }
            let start = s.ids.len();
            s.ids.extend(tok.encode_word(&w));
            s.words.push((w, start, s.ids.len()));
        }
    }
    s
}

fn score_flat<P: Predictor>(model: &P, tok: &Tokenizer, docs: &[Document], exec: Exec) -> Result<SplitScores> {
    let budget = model.config().context_tokens;
    let stream = flat_stream(tok, docs);
    let sep = tok.separator();
    let offsets: Vec<usize> = (0..stream.ids.len()).step_by(budget).collect();
    let parts = exec::try_map(exec, &offsets, |&o| -> Result<SplitScores> {
        let end = (o + budget).min(stream.ids.len());
        let block = &stream.ids[o..end];
        let mut inputs = Vec::with_capacity(block.len());
        inputs.push(BOS);
        inputs.extend_from_slice(&block[..block.len() - 1]);
        let logits = model.flat_logits(&inputs)?;
        let pred: Vec<u32> = (0..block.len()).map(|i| argmax(logits.row(i))).collect();

        let mut out = SplitScores::default();
        for (&g, &p) in block.iter().zip(&pred) {
            let credit = tok.credit(g);
            out.char_total += credit;
            if p == g && g != UNK {
                out.char_hits += credit;
            }
        }
        let first = stream.words.partition_point(|w| w.1 < o);
        for (word, s, e) in &stream.words[first..] {
            // the terminator must be predicted inside this block too
            let last = if sep.is_some() { *e } else { e - 1 };
            if last >= end {
                break;
            }
            let correct = flat_word_correct(model, tok, &stream.ids[o..], &pred[s - o..=last - o], s - o, e - o, word)?;
            out.records.push(WordRecord {
                word: word.clone(),
                correct,
            });
        }
        Ok(out)
    })?;
    let mut total = SplitScores::default();
    for p in parts {
        total.absorb(p);
    }
    Ok(total)
}

/// `pred` holds the argmax at each unit of the word and, when the scheme has
/// a separator, at the terminator slot. `ctx` is the gold stream from the
/// block start and `[s, e)` the word span inside it.
fn flat_word_correct<P: Predictor>(
    model: &P,
    tok: &Tokenizer,
    ctx: &[u32],
    pred: &[u32],
    s: usize,
    e: usize,
    word: &str,
) -> Result<bool> {
    let gold = &ctx[s..e];
    if gold.contains(&UNK) {
        return Ok(false);
    }
    let Some(j) = gold.iter().zip(pred).position(|(g, p)| g != p) else {
        return Ok(match tok.separator() {
            Some(sep) => pred[gold.len()] == sep,
            None => true,
        });
    };
    if tok.scheme() != Scheme::Subword || is_special(pred[j]) {
        return Ok(false);
    }
    let mut decoded = tok.decode(&gold[..j]);
    decoded.push_str(&tok.token_text(pred[j]));
    if !word.starts_with(&decoded) {
        return Ok(false);
    }
    let mut ids = ctx[..s + j].to_vec();
    ids.push(pred[j]);
    greedy_subword(model, tok, ids, decoded, word)
}

/// Continues a subword word greedily until the separator and reports whether
/// the decoded text equals `word`. Every step adds at least one character, so
/// the loop ends once the text stops being a prefix of `word`.
fn greedy_subword<P: Predictor>(model: &P, tok: &Tokenizer, mut ids: Vec<u32>, mut decoded: String, word: &str) -> Result<bool> {
    let budget = model.config().context_tokens;
    let sep = tok.separator();
    loop {
        if !word.starts_with(&decoded) {
            return Ok(false);
        }
        let start = ids.len().saturating_sub(budget - 1);
        let mut inputs = vec![BOS];
        inputs.extend_from_slice(&ids[start..]);
        let logits = model.flat_logits(&inputs)?;
        let next = argmax(logits.row(logits.rows() - 1));
        if Some(next) == sep {
            return Ok(decoded == word);
        }
        if is_special(next) {
            return Ok(false);
        }
        decoded.push_str(&tok.token_text(next));
        ids.push(next);
    }
}

fn hier_words(tok: &Tokenizer, docs: &[Document], max_word_len: usize) -> Vec<Vec<u32>> {
    docs.iter()
        .flat_map(|d| document_words(d).words)
        .flat_map(|w| split_long_word(&tok.encode_word(&w), max_word_len))
        .collect()
}

/// Greedy packing of whole words into blocks of `budget` units, one boundary
/// per word included. The trailing partial block is kept.
fn pack_words(words: &[Vec<u32>], budget: usize) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let (mut start, mut used) = (0, 0);
    for (i, w) in words.iter().enumerate() {
        let cost = w.len() + 1;
        if used + cost > budget && i > start {
            out.push(start..i);
            start = i;
            used = 0;
        }
        used += cost;
    }
    if start < words.len() {
        out.push(start..words.len());
    }
    out
}

fn score_hier<P: Predictor>(model: &P, tok: &Tokenizer, docs: &[Document], exec: Exec) -> Result<SplitScores> {
    let c = model.config();
    let words = hier_words(tok, docs, c.max_word_len);
    let blocks = pack_words(&words, c.block_chars);
    let parts = exec::try_map(exec, &blocks, |r| -> Result<SplitScores> {
        let ws: Vec<&[u32]> = words[r.clone()].iter().map(Vec::as_slice).collect();
        let logits = model.word_logits(&ws)?;
        let mut out = SplitScores::default();
        for (w, l) in ws.iter().zip(&logits) {
            let pred: Vec<u32> = (0..l.rows()).map(|i| argmax(l.row(i))).collect();
            let units_ok = w.iter().zip(&pred).all(|(g, p)| g == p && *g != UNK);
            out.char_hits += w.iter().zip(&pred).filter(|(g, p)| g == p && **g != UNK).count();
            out.char_hits += usize::from(pred[w.len()] == EOW);
            out.char_total += w.len() + 1;
            // generation stops at any non-UNK special, and never asks for a
            // terminator once a word reaches the length cap
            let t = pred[w.len()];
            let term_ok = w.len() == c.max_word_len || t == EOW || (is_special(t) && t != UNK);
            out.records.push(WordRecord {
                word: tok.decode(w),
                correct: units_ok && term_ok,
            });
        }
        Ok(out)
    })?;
    let mut total = SplitScores::default();
    for p in parts {
        total.absorb(p);
    }
    Ok(total)
}

/// Accuracy restricted to rare and to frequent gold words.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Strata {
    pub rare_acc: Option<f64>,
    pub freq_acc: Option<f64>,
    pub rare_count: usize,
    pub freq_count: usize,
}

/// Splits `records` by stratum membership of the gold word; an empty
/// stratum is reported as `None` rather than zero.
pub fn stratified_accuracy(records: &[WordRecord], rare: &BTreeSet<String>, frequent: &BTreeSet<String>) -> Strata {
    let (mut rh, mut rn, mut fh, mut fn_) = (0, 0, 0, 0);
    for r in records {
        if rare.contains(&r.word) {
            rn += 1;
            rh += usize::from(r.correct);
        } else if frequent.contains(&r.word) {
            fn_ += 1;
            fh += usize::from(r.correct);
        }
    }
    Strata {
        rare_acc: percent(rh, rn),
        freq_acc: percent(fh, fn_),
        rare_count: rn,
        freq_count: fn_,
    }
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^[+-]?(?:(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d*)?|\.\d+)$").expect("valid number pattern")
    })
}

/// Parses a decimal number: optional sign, digits with optional thousands
/// commas, optional fractional part.
pub fn parse_number(text: &str) -> Option<f64> {
    let text = text.trim();
    if !number_re().is_match(text) {
        return None;
    }
    text.replace(',', "").parse().ok()
}

/// An evaluation point: the text before a number and the number itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumberExample {
    pub context: String,
    pub gold: f64,
}

/// Every word of `docs` that parses as a number and has at least
/// `min_context_chars` characters of cleaned text before it in its document.
pub fn extract_number_examples(docs: &[Document], min_context_chars: usize) -> Vec<NumberExample> {
    let mut out = Vec::new();
    for doc in docs {
        let cleaned = clean_text(&doc.text);
        let words = segment_words(&cleaned);
        for (w, &(s, _)) in words.words.iter().zip(&words.boundaries) {
            let Some(gold) = parse_number(w) else { continue };
            let context = cleaned[..s].trim_end();
            if context.chars().count() >= min_context_chars {
                out.push(NumberExample {
                    context: context.to_string(),
                    gold,
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NumberScores {
    pub examples: usize,
    /// Predictions that parsed as numbers.
    pub parsed: usize,
    /// Parsed predictions with a nonzero gold value (the EAcc/MdAPE pool).
    pub scored: usize,
    pub num_pct: Option<f64>,
    pub eacc: Option<f64>,
    pub mdape: Option<f64>,
}

fn exponent(x: f64) -> i32 {
    x.abs().log10().floor() as i32
}

/// Median of `values`, averaging the middle pair for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Aggregates `(parsed prediction, gold)` pairs.
pub fn score_numbers(pairs: &[(Option<f64>, f64)]) -> NumberScores {
    let parsed = pairs.iter().filter(|p| p.0.is_some()).count();
    let pool: Vec<(f64, f64)> = pairs
        .iter()
        .filter_map(|&(p, g)| p.map(|p| (p, g)))
        .filter(|&(_, g)| g != 0.0)
        .collect();
    let hits = pool.iter().filter(|&&(p, g)| p != 0.0 && exponent(p) == exponent(g)).count();
    let apes: Vec<f64> = pool.iter().map(|&(p, g)| 100.0 * (p - g).abs() / g.abs()).collect();
    NumberScores {
        examples: pairs.len(),
        parsed,
        scored: pool.len(),
        num_pct: percent(parsed, pairs.len()),
        eacc: percent(hits, pool.len()),
        mdape: median(&apes),
    }
}

/// Greedy prediction of the word that follows `context`.
pub fn predict_next_word(model: &Model<f32>, tok: &Tokenizer, context: &str) -> Result<String> {
    let c = model.config();
    if c.arch == Arch::Hierarchical {
        return Ok(generate_hierarchical(model, tok, context, 1, GenMode::Sequential)?.text);
    }
    let words = segment_words(&clean_text(context));
    let sep = tok.separator();
    let mut ids = if words.is_empty() { Vec::new() } else { tok.encode(&words.joined()).ids };
    if !ids.is_empty() {
        ids.extend(sep);
    }
    let start_len = ids.len();
    let max_steps = if sep.is_some() { 4 * c.max_word_len } else { 1 };
    for _ in 0..max_steps {
        let start = ids.len().saturating_sub(c.context_tokens - 1);
        let mut inputs = vec![BOS];
        inputs.extend_from_slice(&ids[start..]);
        let logits = model.flat_forward(&inputs)?;
        let next = argmax(logits.row(logits.rows() - 1));
        if Some(next) == sep || (is_special(next) && next != UNK) {
            break;
        }
        ids.push(next);
    }
    Ok(tok.decode(&ids[start_len..]))
}

/// Predicts the word at each example's number position and scores it.
pub fn number_estimation(model: &Model<f32>, tok: &Tokenizer, examples: &[NumberExample], exec: Exec) -> Result<NumberScores> {
    let pairs = exec::try_map(exec, examples, |ex| -> Result<(Option<f64>, f64)> {
        let word = predict_next_word(model, tok, &ex.context)?;
        Ok((parse_number(&word), ex.gold))
    })?;
    Ok(score_numbers(&pairs))
}

/// Metrics of one model on one validation split. Absent fields were not
/// requested or had nothing to average over.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub word_acc: Option<f64>,
    pub char_acc: Option<f64>,
    pub rare_acc: Option<f64>,
    pub freq_acc: Option<f64>,
    pub num_pct: Option<f64>,
    pub eacc: Option<f64>,
    pub mdape: Option<f64>,
    pub words: usize,
    pub rare_words: usize,
    pub frequent_words: usize,
    pub number_examples: usize,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

impl EvalReport {
    /// Aligned text table with one row per report.
    pub fn table(reports: &[EvalReport]) -> String {
        let head = ["model", "Acc%", "Char%", "Rare%", "Freq%", "%Num", "EAcc%", "MdAPE", "words"];
        let rows: Vec<[String; 9]> = reports
            .iter()
            .map(|r| {
                [
                    r.model.clone(),
                    cell(r.word_acc),
                    cell(r.char_acc),
                    cell(r.rare_acc),
                    cell(r.freq_acc),
                    cell(r.num_pct),
                    cell(r.eacc),
                    cell(r.mdape),
                    r.words.to_string(),
                ]
            })
            .collect();
        let mut widths: Vec<usize> = head.iter().map(|h| h.len()).collect();
        for row in &rows {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cells: Vec<&str>| {
            for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
                if i == 0 {
                    let _ = write!(out, "{c:<w$}");
                } else {
                    let _ = write!(out, "  {c:>w$}");
                }
            }
            out.push('\n');
        };
        line(&mut out, head.to_vec());
        for row in &rows {
            line(&mut out, row.iter().map(String::as_str).collect());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn number_grammar() {
        assert_eq!(parse_number("3,500"), Some(3500.0));
        assert_eq!(parse_number("-12.5"), Some(-12.5));
        assert_eq!(parse_number(".5"), Some(0.5));
        assert_eq!(parse_number("7."), Some(7.0));
        assert_eq!(parse_number("1,00"), None);
        assert_eq!(parse_number("approximately"), None);
        assert_eq!(parse_number("12a"), None);
        assert_eq!(parse_number(""), None);
    }

    #[test]
    fn number_arithmetic() {
        let s = score_numbers(&[(Some(2100.0), 3500.0)]);
        assert_eq!(s.eacc, Some(100.0));
        assert!((s.mdape.unwrap() - 40.0).abs() < 1e-12);
        let s = score_numbers(&[(None, 5.0), (Some(3.0), 0.0)]);
        assert_eq!(s.num_pct, Some(50.0));
        assert_eq!((s.scored, s.eacc, s.mdape), (0, None, None));
        assert_eq!(median(&[50.0, 10.0]), Some(30.0));
    }

    #[test]
    fn packing_keeps_the_tail() {
        let words = vec![vec![5; 3], vec![5; 2], vec![5; 4], vec![5]];
        assert_eq!(pack_words(&words, 7), vec![0..2, 2..4]);
        assert_eq!(pack_words(&words, 4), vec![0..1, 1..2, 2..3, 3..4]);
    }

    #[test]
    fn table_aligns_columns() {
        let r = EvalReport {
            model: "char".into(),
            word_acc: Some(12.5),
            ..EvalReport::default()
        };
        let t = EvalReport::table(&[r]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].len(), lines[1].len());
        assert!(lines[1].contains("12.50"));
    }
}
