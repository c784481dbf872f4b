use wordlm::corpus::Document;
use wordlm::generation::{generate_flat, generate_hierarchical, step_count_audit, DepthModel, GenMode};
use wordlm::model::{Arch, Model, ModelConfig};
use wordlm::tokenizer::{Scheme, Tokenizer, TokenizerOptions, EOW};
use wordlm::training::{make_sequences, tokenize_docs, TrainConfig, Trainer};
use wordlm::Exec;

fn char_tok(text: &str) -> Tokenizer {
    let docs = [Document::new("d", text).unwrap()];
    Tokenizer::train(Scheme::Char, &docs, TokenizerOptions::default()).unwrap()
}

fn small(cfg: ModelConfig) -> ModelConfig {
    ModelConfig {
        base_layers: 2,
        dim: 32,
        heads: 2,
        encoder_layers: if cfg.arch == Arch::Hierarchical { 1 } else { 0 },
        worddec_layers: if cfg.arch == Arch::Hierarchical { 1 } else { 0 },
        n_cls: if cfg.arch == Arch::Hierarchical { 2 } else { 1 },
        max_word_len: 8,
        ..cfg
    }
}

/// Trains `cfg` on `text` with a high learning rate until it memorizes it.
fn overfit(cfg: ModelConfig, tok: &Tokenizer, text: &str, budget: usize, steps: u64) -> Model {
    let docs = [Document::new("d", text).unwrap()];
    let stream = tokenize_docs(&docs, tok, cfg.arch, cfg.max_word_len, Exec::Sequential);
    let seqs = make_sequences(&stream, budget).unwrap();
    let train = TrainConfig {
        lr: 3e-3,
        batch_size: 4,
        block_chars: cfg.block_chars,
        epochs: 100_000,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(Model::new(cfg, 1).unwrap(), train, Exec::Parallel).unwrap();
    t.run(&seqs, Some(steps), |_, _, _| Ok(())).unwrap();
    t.model().clone()
}

#[test]
fn flat_overfit_continues_the_pattern() {
    let text = "abc".repeat(200);
    let tok = char_tok(&text);
    let cfg = small(ModelConfig::flat(Scheme::Char, tok.vocab_size(), 12, 12));
    let model = overfit(cfg, &tok, &text, 12, 300);
    let g = generate_flat(&model, &tok, "abc", 8).unwrap();
    assert_eq!(g.text, "abcabcab");
    assert_eq!(step_count_audit(&g).flat_passes, 8);
}

#[test]
fn flat_is_deterministic_and_zero_length_is_empty() {
    let tok = char_tok("some text here");
    let model = Model::<f32>::new(small(ModelConfig::flat(Scheme::Char, tok.vocab_size(), 8, 8)), 3).unwrap();
    let a = generate_flat(&model, &tok, "some text", 20).unwrap();
    let b = generate_flat(&model, &tok, "some text", 20).unwrap();
    assert_eq!(a, b);
    // the window slides well past the budget of 8 tokens
    assert_eq!(a.ids.len(), 20);
    let empty = generate_flat(&model, &tok, "some text", 0).unwrap();
    assert_eq!(empty.text, "");
    assert_eq!(empty.audit.flat_passes, 0);
}

#[test]
fn hierarchical_overfit_and_audit() {
    let text = "the cat sat ".repeat(60);
    let tok = char_tok(&text);
    let cfg = small(ModelConfig::hierarchical(Scheme::Char, tok.vocab_size(), 24));
    let model = overfit(cfg, &tok, &text, 24, 300);
    for mode in [GenMode::Sequential, GenMode::Pipelined] {
        let g = generate_hierarchical(&model, &tok, "the", 4, mode).unwrap();
        assert_eq!(g.text, "cat sat the cat", "{mode:?}");
        let a = step_count_audit(&g);
        assert_eq!(a.core_passes, 4);
        assert_eq!(a.decoder_token_steps, 12);
        assert_eq!(a.decoder_passes, vec![4; 4]);
        // prompt word plus every generated word but the last
        assert_eq!(a.encoder_passes, 4);
    }
}

#[test]
fn two_five_char_words_audit() {
    let text = "hello world ".repeat(60);
    let tok = char_tok(&text);
    let cfg = small(ModelConfig::hierarchical(Scheme::Char, tok.vocab_size(), 24));
    let model = overfit(cfg, &tok, &text, 24, 300);
    let g = generate_hierarchical(&model, &tok, "", 2, GenMode::Sequential).unwrap();
    assert_eq!(g.text, "hello world");
    let a = step_count_audit(&g);
    assert_eq!(a.core_passes, 2);
    assert_eq!(a.decoder_token_steps, 10);
    assert_eq!(a.total_decoder_passes(), 12);
    assert_eq!(g.ids.iter().filter(|&&i| i == EOW).count(), 2);
    let depth = DepthModel::of(&model);
    assert_eq!(depth.depth(a), 2 * (1 + 2) + 12);
}

#[test]
fn pipelined_matches_sequential_on_random_models() {
    let tok = char_tok("a quick brown fox jumps over the lazy dog");
    let prompts = ["", "the", "a quick brown", "over the lazy dog again and again"];
    for seed in 0..8u64 {
        let cfg = ModelConfig {
            max_word_len: 6,
            ..small(ModelConfig::hierarchical(Scheme::Char, tok.vocab_size(), 32))
        };
        let model = Model::<f32>::new(cfg, seed).unwrap();
        let prompt = prompts[seed as usize % prompts.len()];
        let seq = generate_hierarchical(&model, &tok, prompt, 6, GenMode::Sequential).unwrap();
        let pip = generate_hierarchical(&model, &tok, prompt, 6, GenMode::Pipelined).unwrap();
        assert_eq!(seq.text, pip.text);
        assert_eq!(seq.ids, pip.ids);
        let (s, p) = (&seq.audit, &pip.audit);
        assert_eq!((s.core_passes, s.encoder_passes, &s.decoder_passes), (p.core_passes, p.encoder_passes, &p.decoder_passes));
        assert_eq!(s.core_passes, 6);
        assert_eq!(s.decoder_token_steps, s.word_lens.iter().sum::<usize>());
        for (&passes, &len) in s.decoder_passes.iter().zip(&s.word_lens) {
            assert!(passes == len + 1 || (len == 6 && passes == 6));
        }
    }
}

#[test]
fn scheme_and_arch_mismatch_are_rejected() {
    let tok = char_tok("abc def");
    let flat = Model::<f32>::new(small(ModelConfig::flat(Scheme::Char, tok.vocab_size(), 8, 8)), 0).unwrap();
    assert!(generate_hierarchical(&flat, &tok, "abc", 1, GenMode::Sequential).is_err());
    assert!(generate_flat(&flat, &Tokenizer::Byte, "abc", 1).is_err());
}

#[test]
fn flat_generation_by_words() {
    let text = "the cat sat ".repeat(60);
    let tok = char_tok(&text);
    // a context of two full cycles keeps the window from sliding
    let cfg = small(ModelConfig::flat(Scheme::Char, tok.vocab_size(), 24, 24));
    let model = overfit(cfg, &tok, &text, 24, 300);
    let g = wordlm::generation::generate_flat_words(&model, &tok, "the", 3).unwrap();
    // the first separator closes no new word
    assert_eq!(g.text, " cat sat the");
    assert_eq!(g.audit.flat_passes, 13);
}
