use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wordlm::model::{
    build_encoder_mask, count_params, Arch, Batch, Checkpoint, FlatBatch, Model, ModelConfig, SegmentedBatch,
};
use wordlm::nn::{grad_check_params, Tensor};
use wordlm::tokenizer::Scheme;
use wordlm::{Error, Exec};

fn tiny_flat() -> ModelConfig {
    ModelConfig {
        base_layers: 2,
        dim: 16,
        heads: 2,
        ..ModelConfig::flat(Scheme::Char, 12, 16, 16)
    }
}

fn tiny_hier(packed: bool) -> ModelConfig {
    ModelConfig {
        base_layers: 2,
        dim: 16,
        heads: 2,
        encoder_layers: 1,
        worddec_layers: 1,
        n_cls: 2,
        max_word_len: 5,
        packed,
        ..ModelConfig::hierarchical(Scheme::Char, 12, 24)
    }
}

fn words(spec: &[&[u32]]) -> Vec<Vec<u32>> {
    spec.iter().map(|w| w.to_vec()).collect()
}

fn hier_batch() -> Batch {
    let seqs = vec![
        words(&[&[5, 6, 7], &[8], &[9, 10, 11, 5, 6], &[7, 7]]),
        words(&[&[11, 10], &[9, 8, 7, 6]]),
    ];
    Batch::Hier(SegmentedBatch::new(&seqs, 2, 5).unwrap())
}

fn flat_batch() -> Batch {
    Batch::Flat(FlatBatch::from_blocks(&[
        vec![5, 6, 7, 8, 9, 10, 11, 5, 6, 7],
        vec![11, 10, 9, 8, 7, 6, 5, 5, 6, 9],
    ]))
}

#[test]
fn paper_scale_parameter_counts() {
    let byte = ModelConfig::flat(Scheme::Byte, 261, 192, 192).at_paper_scale();
    let subword = ModelConfig::flat(Scheme::Subword, 50257, 192, 68).at_paper_scale();
    let ebyte = ModelConfig::hierarchical(Scheme::Byte, 261, 192).at_paper_scale();
    for (cfg, paper) in [(byte, 25.7e6), (subword, 76.8e6), (ebyte, 38.7e6)] {
        let n = count_params(&cfg) as f64;
        assert!((n / paper - 1.0).abs() <= 0.10, "{n} vs {paper}");
    }
}

#[test]
fn count_matches_checkpoint_tensors() {
    for cfg in [tiny_flat(), tiny_hier(false)] {
        let m = Model::<f32>::new(cfg.clone(), 1).unwrap();
        let ckpt = Checkpoint::from_bytes(&Checkpoint::from_model(&m).to_bytes().unwrap()).unwrap();
        assert_eq!(ckpt.param_count(), count_params(&cfg));
        assert_eq!(ckpt.params, m.params());
    }
}

#[test]
fn checkpoint_integrity_checks() {
    let m = Model::<f32>::new(tiny_flat(), 1).unwrap();
    let bytes = Checkpoint::from_model(&m).to_bytes().unwrap();
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]), Err(Error::Checkpoint(_))));
    assert!(Checkpoint::from_bytes(&bytes[..6]).is_err());
    let mut extra = bytes.clone();
    extra.extend_from_slice(&[0; 4]);
    assert!(Checkpoint::from_bytes(&extra).is_err());
}

// Model-level checks use eps = 1e-3 (the extrapolated difference is
// accurate to O(eps^4)); smaller steps amplify round-off on tiny gradients.
#[test]
fn flat_grad_check() {
    let m = Model::<f64>::new(tiny_flat(), 2).unwrap();
    let batch = flat_batch();
    let err = grad_check_params(m.params(), 1e-3, Some(12), 5, |g| m.loss_graph(g, &batch)).unwrap();
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn hierarchical_grad_check_end_to_end() {
    for packed in [false, true] {
        let m = Model::<f64>::new(tiny_hier(packed), 3).unwrap();
        let batch = hier_batch();
        let err = grad_check_params(m.params(), 1e-3, Some(12), 6, |g| m.loss_graph(g, &batch)).unwrap();
        assert!(err < 1e-4, "packed={packed}: max rel err {err}");
    }
}

#[test]
fn packed_and_padded_losses_agree() {
    let padded = Model::<f32>::new(tiny_hier(false), 4).unwrap();
    let packed = Model::<f32>::from_params(tiny_hier(true), padded.params().to_vec()).unwrap();
    let batch = hier_batch();
    let a = padded.batch_loss(&batch, Exec::Sequential).unwrap();
    let b = packed.batch_loss(&batch, Exec::Sequential).unwrap();
    assert!((a - b).abs() <= 1e-6 * a.abs(), "{a} vs {b}");
    let p64 = padded.cast::<f64>();
    let k64 = packed.cast::<f64>();
    let (a, b) = (p64.batch_loss(&batch, Exec::Sequential).unwrap(), k64.batch_loss(&batch, Exec::Sequential).unwrap());
    assert!((a - b).abs() <= 1e-12 * a.abs(), "{a} vs {b}");
}

#[test]
fn gradients_do_not_depend_on_exec_mode() {
    for (cfg, batch) in [(tiny_flat(), flat_batch()), (tiny_hier(false), hier_batch())] {
        let m = Model::<f32>::new(cfg, 5).unwrap();
        let (l1, g1) = m.batch_gradients(&batch, Exec::Sequential).unwrap();
        let (l2, g2) = m.batch_gradients(&batch, Exec::Parallel).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
    }
}

#[test]
fn flat_forward_is_causal_and_budgeted() {
    let m = Model::<f32>::new(tiny_flat(), 6).unwrap();
    let ids: Vec<u32> = vec![5, 6, 7, 8, 9, 10, 11, 5];
    let base = m.flat_forward(&ids).unwrap();
    assert_eq!(base.shape(), &[8, 12]);
    for k in 0..ids.len() {
        let mut alt = ids.clone();
        alt[k] = if alt[k] == 11 { 10 } else { 11 };
        let out = m.flat_forward(&alt).unwrap();
        assert_eq!(&base.data()[..k * 12], &out.data()[..k * 12], "leak before {k}");
        assert_ne!(&base.data()[k * 12..(k + 1) * 12], &out.data()[k * 12..(k + 1) * 12]);
    }
    assert_eq!(m.flat_forward(&[5]).unwrap().shape(), &[1, 12]);
    assert!(matches!(m.flat_forward(&[5; 17]), Err(Error::OverBudget { len: 17, budget: 16 })));
}

#[test]
fn encoder_words_are_independent() {
    let m = Model::<f32>::new(tiny_hier(false), 7).unwrap();
    let seq = words(&[&[5, 6], &[7, 8, 9], &[10]]);
    let base = m.encode_words(&SegmentedBatch::new(std::slice::from_ref(&seq), 2, 5).unwrap()).unwrap();
    assert_eq!(base.shape(), &[1, 3, 2, 16]);
    let mut edited = seq.clone();
    edited[1] = vec![11, 11];
    let out = m.encode_words(&SegmentedBatch::new(&[edited], 2, 5).unwrap()).unwrap();
    let w = 2 * 16;
    assert_eq!(&base.data()[..w], &out.data()[..w]);
    assert_eq!(&base.data()[2 * w..], &out.data()[2 * w..]);
    assert_ne!(&base.data()[w..2 * w], &out.data()[w..2 * w]);
    // permuting words permutes outputs
    let perm = vec![seq[2].clone(), seq[0].clone(), seq[1].clone()];
    let p = m.encode_words(&SegmentedBatch::new(&[perm], 2, 5).unwrap()).unwrap();
    assert_eq!(&p.data()[w..2 * w], &base.data()[..w]);
    assert_eq!(&p.data()[..w], &base.data()[2 * w..]);
}

#[test]
fn encode_words_shape_contract() {
    let cfg = ModelConfig {
        dim: 64,
        heads: 4,
        ..tiny_hier(false)
    };
    let cfg = ModelConfig { n_cls: 4, ..cfg };
    let m = Model::<f32>::new(cfg, 8).unwrap();
    let seqs = vec![words(&[&[5], &[6], &[7], &[8], &[9]]), words(&[&[5, 6]])];
    let out = m.encode_words(&SegmentedBatch::new(&seqs, 4, 5).unwrap()).unwrap();
    assert_eq!(out.shape(), &[2, 5, 4, 64]);
}

#[test]
fn word_level_decoder_is_causal() {
    let m = Model::<f64>::new(tiny_hier(false), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let reps = Tensor::from_fn(&[5, 2, 16], |_| rng.gen_range(-1.0..1.0));
    let base = m.word_lm_step(&reps).unwrap();
    assert_eq!(base.shape(), reps.shape());
    let mut alt = reps.clone();
    for v in &mut alt.data_mut()[3 * 32..4 * 32] {
        *v += 0.5;
    }
    let out = m.word_lm_step(&alt).unwrap();
    // word 3's input only feeds predictions of words 4 and later
    let diff: f64 = base.data()[..4 * 32].iter().zip(&out.data()[..4 * 32]).map(|(a, b)| (a - b).abs()).sum();
    assert_eq!(diff, 0.0);
    assert_ne!(&base.data()[4 * 32..], &out.data()[4 * 32..]);
    // one word: prediction comes from the learned start group alone
    let one = Tensor::from_fn(&[1, 2, 16], |i| i as f64);
    let other = Tensor::from_fn(&[1, 2, 16], |i| -(i as f64));
    assert_eq!(m.word_lm_step(&one).unwrap(), m.word_lm_step(&other).unwrap());
}

#[test]
fn word_decoder_is_isolated_per_word() {
    let m = Model::<f32>::new(tiny_hier(false), 10).unwrap();
    let a = words(&[&[5, 6, 7], &[8, 9], &[10, 11]]);
    let mut b = a.clone();
    b[2] = vec![5, 5, 5, 5];
    let la = m.word_logits(&a.iter().map(Vec::as_slice).collect::<Vec<_>>()).unwrap();
    let lb = m.word_logits(&b.iter().map(Vec::as_slice).collect::<Vec<_>>()).unwrap();
    assert_eq!(la[0], lb[0]);
    assert_eq!(la[1], lb[1]);
    assert_eq!(la[0].shape(), &[4, 12]);
    // decode_word agrees with teacher forcing
    let cls = Tensor::from_fn(&[2, 16], |i| (i as f32 * 0.37).sin());
    let full = m.decode_word(&cls, &[5, 6]).unwrap();
    assert_eq!(full.len(), 12);
}

#[test]
fn flat_and_hier_batches_are_checked() {
    let m = Model::<f32>::new(tiny_flat(), 11).unwrap();
    assert!(m.batch_loss(&hier_batch(), Exec::Sequential).is_err());
    assert_eq!(m.config().arch, Arch::Flat);
}

fn brute_force_allowed(lens: &[usize], n_cls: usize) -> usize {
    let mut owner = Vec::new();
    for (i, &l) in lens.iter().enumerate() {
        owner.extend(std::iter::repeat_n(i, l + n_cls));
    }
    let mut n = 0;
    for a in &owner {
        for b in &owner {
            n += usize::from(a == b);
        }
    }
    n
}

proptest! {
    #[test]
    fn encoder_mask_counts(lens in proptest::collection::vec(1usize..8, 1..6), n_cls in 1usize..5) {
        let m = build_encoder_mask(&lens, n_cls).unwrap();
        prop_assert_eq!(m.count_allowed(), brute_force_allowed(&lens, n_cls));
        let expected: usize = lens.iter().map(|l| (l + n_cls) * (l + n_cls)).sum();
        prop_assert_eq!(m.count_allowed(), expected);
    }

    #[test]
    fn segmented_batches_validate(seqs in proptest::collection::vec(
        proptest::collection::vec(proptest::collection::vec(5u32..20, 0..6), 1..5), 1..4)) {
        let b = SegmentedBatch::new(&seqs, 3, 5).unwrap();
        prop_assert!(b.validate().is_ok());
        for (i, s) in seqs.iter().enumerate() {
            prop_assert_eq!(b.words(i), s.iter().map(Vec::as_slice).collect::<Vec<_>>());
        }
    }
}
