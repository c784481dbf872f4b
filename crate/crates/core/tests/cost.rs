use proptest::prelude::*;
use wordlm::cost::{
    attention_density, e2e_discrepancy_note, generation_speed, intra_word_entries, optimal_batch, reconcile,
    training_speedup, training_steps, CostModelParams, CostReport, DensityMode, Kind, Preset,
};
use wordlm::generation::{DepthModel, GenAudit, GenMode};
use wordlm::model::{build_encoder_mask, Arch};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

#[test]
fn batch_sizes() {
    let p = CostModelParams::default();
    let base = optimal_batch(Kind::Base, &p);
    assert!(close(base, 1e9 / (8.0 * 512.0 * 192.0 * 192.0), 1e-12));
    assert!((base - 6.62).abs() < 0.005);
    let sub = optimal_batch(Kind::Subword, &p);
    assert!(close(sub, base * 2.8 * 2.8, 1e-12));
    assert!((sub - 51.9).abs() < 0.05);
    // c/2 + T/c^2 = 2.75 + 192/30.25
    let denom: f64 = 2.75 + 192.0 / 30.25;
    assert!((denom - 9.097).abs() < 1e-3);
    assert!(close(optimal_batch(Kind::E2e, &p), 1e9 / (8.0 * 512.0 * 192.0 * denom), 1e-12));
}

#[test]
fn speedups() {
    let p = CostModelParams::default();
    assert!(close(training_speedup(Kind::Subword, &p), 7.84, 1e-12));
    assert_eq!(format!("{:.1}", training_speedup(Kind::Subword, &p)), "7.8");
    let e2e = training_speedup(Kind::E2e, &p);
    assert!((e2e - 21.1).abs() < 0.05, "{e2e}");
    let note = e2e_discrepancy_note(&p);
    assert!(note.contains("21.1") && note.contains("6.8"));
    let report = CostReport::new(p, 4).unwrap();
    assert!(report.training.iter().any(|r| r.note.as_deref() == Some(note.as_str())));
    assert!(report.table().contains("6.8"));
}

#[test]
fn generation_speeds() {
    let p = CostModelParams::default();
    assert_eq!(generation_speed(Kind::Base, &p), 1.0);
    assert_eq!(generation_speed(Kind::Subword, &p), 2.8);
    assert_eq!(generation_speed(Kind::E2e, &p), 4.0);
    let slow = CostModelParams { latency: 2.0, ..p };
    assert_eq!(generation_speed(Kind::E2e, &slow), 2.0);
}

#[test]
fn presets_propagate() {
    let base = CostModelParams::default();
    let mut seen = Vec::new();
    for preset in Preset::ALL {
        let p = base.with_preset(preset);
        assert_eq!(p.c, preset.chars_per_word());
        let sp = training_speedup(Kind::E2e, &p);
        let want = 192.0 / (p.c / 2.0 + 192.0 / (p.c * p.c));
        assert!(close(sp, want, 1e-12));
        let report = CostReport::new(p, 4).unwrap();
        assert_eq!(report.params.c, p.c);
        seen.push(sp);
    }
    assert_eq!(seen.len(), 3);
    assert!(seen[0] != seen[1] && seen[1] != seen[2]);
}

#[test]
fn large_c_limit() {
    // T/(c/2 + T/c^2) tends to 2T/c and keeps falling
    let mut prev = f64::INFINITY;
    for c in [1e3, 1e4, 1e5, 1e6] {
        let p = CostModelParams { c, ..CostModelParams::default() };
        let sp = training_speedup(Kind::E2e, &p);
        assert!(close(sp, 2.0 * 192.0 / c, 1e-2));
        assert!(sp < prev && sp > 0.0);
        prev = sp;
    }
}

#[test]
fn density_examples() {
    let d = attention_density(4.0, 4.0, 0, DensityMode::FlatCausal).unwrap();
    assert_eq!(d.cross_fraction, 0.0);
    let d = attention_density(192.0, 5.5, 0, DensityMode::FlatCausal).unwrap();
    assert_eq!(d.total, 18528.0);
    assert!((d.intra - 624.0).abs() < 1e-9);
    assert!((d.cross_fraction - 0.966).abs() < 5e-4);
    let d = attention_density(192.0, 5.5, 4, DensityMode::IntraWord).unwrap();
    assert!((d.intra / d.total - 0.085).abs() < 1e-3);
    assert!((d.cross_fraction - 0.915).abs() < 1e-3);
}

#[test]
fn reconcile_rows() {
    let p = CostModelParams::default();
    let flat = GenAudit { arch: Some(Arch::Flat), flat_passes: 10, ..GenAudit::default() };
    let hier = GenAudit {
        arch: Some(Arch::Hierarchical),
        mode: GenMode::Pipelined,
        core_passes: 2,
        decoder_passes: vec![6, 6],
        word_lens: vec![5, 5],
        decoder_token_steps: 10,
        ..GenAudit::default()
    };
    let rows = reconcile(&[("flat".into(), flat), ("hier".into(), hier)], &DepthModel::quarter(8), &p);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].measured_speedup, 1.0);
    assert_eq!(rows[0].deviation, 0.0);
    assert_eq!(rows[1].analytic_speedup, 4.0);
    // 12 units at 8 layers against a fill of 10 plus max(20, 24)
    assert!(close(rows[1].measured_speedup, 96.0 / 34.0, 1e-12));
}

proptest! {
    #[test]
    fn subword_speedup_is_s_squared(s in 1.0f64..20.0) {
        let p = CostModelParams { s, ..CostModelParams::default() };
        prop_assert!(close(training_speedup(Kind::Subword, &p), s * s, 1e-12));
    }

    #[test]
    fn steps_batch_context_recover_corpus(
        m in 1e6f64..1e12, n in 1e6f64..1e12, t in 8.0f64..4096.0, c in 1.5f64..12.0, s in 1.0f64..6.0,
    ) {
        let p = CostModelParams { m, n_corpus: n, t, c, s, ..CostModelParams::default() };
        for kind in Kind::ALL {
            let x = training_steps(kind, &p);
            prop_assert!(close(x * optimal_batch(kind, &p) * t, n, 1e-9));
        }
    }

    #[test]
    fn e2e_speedup_grows_with_context(c in 1.5f64..12.0, t in 8.0f64..2048.0, dt in 1.0f64..512.0) {
        let a = CostModelParams { c, t, ..CostModelParams::default() };
        let b = CostModelParams { t: t + dt, ..a };
        prop_assert!(training_speedup(Kind::E2e, &b) > training_speedup(Kind::E2e, &a));
    }

    #[test]
    fn intra_count_matches_mask_popcount(lens in prop::collection::vec(1usize..9, 1..12), n_cls in 0usize..5) {
        let mask = build_encoder_mask(&lens, n_cls).unwrap();
        prop_assert_eq!(intra_word_entries(&lens, n_cls), mask.count_allowed());
    }

    #[test]
    fn density_matches_uniform_words(c in 1usize..9, words in 1usize..30, n_cls in 0usize..5) {
        let d = attention_density((c * words) as f64, c as f64, n_cls, DensityMode::IntraWord).unwrap();
        prop_assert!(close(d.intra, intra_word_entries(&vec![c; words], n_cls) as f64, 1e-9));
    }
}
