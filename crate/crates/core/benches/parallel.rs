//! Sequential versus data-parallel execution of the two hot loops: batch
//! gradients during training and teacher-forced scoring of a validation split.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use wordlm::corpus::Document;
use wordlm::evaluation::score_split;
use wordlm::model::{Arch, Model, ModelConfig};
use wordlm::tokenizer::{Scheme, Tokenizer, TokenizerOptions};
use wordlm::training::{batch_of, make_sequences, tokenize_docs};
use wordlm::Exec;

const TEXT: &str = "the quick brown fox jumps over the lazy dog while 42 cats watch from the old stone wall . ";

fn setup(arch: Arch) -> (Model<f32>, Tokenizer, Vec<Document>) {
    let docs: Vec<Document> = (0..8).map(|i| Document::new(format!("d{i}"), TEXT.repeat(6)).unwrap()).collect();
    let tok = Tokenizer::train(Scheme::Char, &docs, TokenizerOptions::default()).unwrap();
    let base = match arch {
        Arch::Flat => ModelConfig::flat(Scheme::Char, tok.vocab_size(), 96, 96),
        Arch::Hierarchical => ModelConfig::hierarchical(Scheme::Char, tok.vocab_size(), 96),
    };
    let cfg = ModelConfig {
        base_layers: 2,
        dim: 64,
        heads: 4,
        max_word_len: 12,
        ..base
    };
    (Model::new(cfg, 0).unwrap(), tok, docs)
}

fn gradients(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for arch in [Arch::Flat, Arch::Hierarchical] {
        let (model, tok, docs) = setup(arch);
        let cfg = model.config().clone();
        let stream = tokenize_docs(&docs, &tok, arch, cfg.max_word_len, Exec::Sequential);
        let seqs = make_sequences(&stream, 96).unwrap();
        let batch = batch_of(seqs.iter().take(8), cfg.n_cls, cfg.max_word_len).unwrap();
        for exec in [Exec::Sequential, Exec::Parallel] {
            group.bench_with_input(BenchmarkId::new(format!("{arch}"), format!("{exec:?}")), &exec, |b, &exec| {
                b.iter(|| model.batch_gradients(&batch, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn scoring(c: &mut Criterion) {
    let mut group = c.benchmark_group("score_split");
    group.sample_size(10);
    for arch in [Arch::Flat, Arch::Hierarchical] {
        let (model, tok, docs) = setup(arch);
        for exec in [Exec::Sequential, Exec::Parallel] {
            group.bench_with_input(BenchmarkId::new(format!("{arch}"), format!("{exec:?}")), &exec, |b, &exec| {
                b.iter(|| score_split(&model, &tok, &docs, exec).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, gradients, scoring);
criterion_main!(benches);
