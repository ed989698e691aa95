use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};

use fastslow_core::aggregation::aggregate_adaptive;
use fastslow_core::config::{DroppingConfig, ModelConfig, Placement, PplScope, Selection};
use fastslow_core::dropping::{percentile_threshold, retained_count, select_for_layer};
use fastslow_core::flops::flops_estimate;
use fastslow_core::loss::streaming_lm_loss;
use fastslow_core::metrics::{lm_ppl, score_logits, time_diff};
use fastslow_core::model::determine;
use fastslow_core::sequence::{Slot, Supervision, SupervisionKind};
use fastslow_core::tensor::{Tape, Tensor};
use fastslow_core::vocab;

fn seeded_cases(cases: u32) -> Config {
    Config { cases, rng_seed: RngSeed::Fixed(0x5EED), ..Config::default() }
}

/// Whole visual groups of 10, 9 or 3 tokens interleaved with text.
fn slots() -> impl Strategy<Value = Vec<Slot>> {
    prop::collection::vec(prop_oneof![Just(10u32), Just(9), Just(3), Just(0)], 1..12).prop_map(|items| {
        let mut out = Vec::new();
        let mut group = 0;
        for size in items {
            if size == 0 {
                out.push(Slot::Token(vocab::FRAME_SEP));
            } else {
                out.extend((0..size).map(|_| Slot::Visual { group, size }));
                group += 1;
            }
        }
        out
    })
}

fn selection() -> impl Strategy<Value = Selection> {
    prop_oneof![Just(Selection::PerFrame), Just(Selection::GlobalPercentile), Just(Selection::Random)]
}

fn placement() -> impl Strategy<Value = Placement> {
    prop_oneof![
        Just(Placement::Interleaved),
        Just(Placement::All),
        Just(Placement::Deep),
        Just(Placement::InterleavedAndDeep),
        Just(Placement::None)
    ]
}

proptest! {
    #![proptest_config(seeded_cases(1000))]

    #[test]
    fn softmax_slices_sum_to_one(
        rows in 1usize..6,
        cols in 1usize..6,
        axis in 0usize..2,
        data in prop::collection::vec(-60.0f64..60.0, 36),
    ) {
        let t = Tensor::new(vec![rows, cols], data[..rows * cols].to_vec()).unwrap();
        let s = t.softmax(axis).unwrap();
        let (outer, inner) = if axis == 1 { (rows, cols) } else { (cols, rows) };
        for o in 0..outer {
            let sum: f64 = (0..inner)
                .map(|i| if axis == 1 { s.data()[o * cols + i] } else { s.data()[i * cols + o] })
                .sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12, "slice {o} sums to {sum}");
        }
    }

    #[test]
    fn text_is_never_dropped(
        slots in slots(),
        beta in 0.0f64..0.95,
        sel in selection(),
        seed in any::<u64>(),
        raw in prop::collection::vec(-5.0f64..5.0, 120),
    ) {
        let weights: Vec<f64> = (0..slots.len()).map(|i| raw[i % raw.len()]).collect();
        let cfg = DroppingConfig { beta, selection: sel, ..DroppingConfig::default() };
        let rec = select_for_layer(&slots, &weights, &cfg, 1, seed).unwrap();
        for (s, &kept) in slots.iter().zip(&rec.retained) {
            if !s.is_visual() {
                prop_assert!(kept);
            }
        }
    }
}

proptest! {
    #![proptest_config(seeded_cases(256))]

    #[test]
    fn per_frame_budget_is_exact(
        slots in slots(),
        beta in 0.0f64..0.95,
        random in any::<bool>(),
        raw in prop::collection::vec(-5.0f64..5.0, 120),
    ) {
        let weights: Vec<f64> = (0..slots.len()).map(|i| raw[i % raw.len()]).collect();
        let selection = if random { Selection::Random } else { Selection::PerFrame };
        let cfg = DroppingConfig { beta, selection, ..DroppingConfig::default() };
        let rec = select_for_layer(&slots, &weights, &cfg, 2, 9).unwrap();
        let mut kept = std::collections::BTreeMap::<u32, (usize, usize)>::new();
        for (s, &k) in slots.iter().zip(&rec.retained) {
            if let Slot::Visual { group, size } = *s {
                let e = kept.entry(group).or_insert((0, size as usize));
                e.0 += k as usize;
            }
        }
        for (group, (k, size)) in kept {
            prop_assert_eq!(k, retained_count(size, beta), "group {}", group);
        }
        if beta == 0.0 {
            prop_assert!(rec.retained.iter().all(|&r| r));
        }
    }

    #[test]
    fn percentile_is_bounded_and_monotone(
        w in prop::collection::vec(-10.0f64..10.0, 1..40),
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let pl = percentile_threshold(&w, lo).unwrap();
        let ph = percentile_threshold(&w, hi).unwrap();
        let min = w.iter().copied().fold(f64::INFINITY, f64::min);
        let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min <= pl && ph <= max);
        prop_assert!(pl <= ph);
    }

    #[test]
    fn flops_never_increase_with_beta(
        slots in slots(),
        policy in placement(),
        a in 0.0f64..0.95,
        b in 0.0f64..0.95,
    ) {
        let model = ModelConfig::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let est = |beta: f64| {
            let d = DroppingConfig { policy, beta, ..DroppingConfig::default() };
            flops_estimate(&model, &d, &slots).unwrap().total
        };
        let (f_lo, f_hi) = (est(lo), est(hi));
        prop_assert!(f_hi <= f_lo);
        let visual = slots.iter().filter(|s| s.is_visual()).count();
        let routed_something = policy != Placement::None && visual > 0;
        if routed_something && retained_count(10, hi) < retained_count(10, lo) && slots.iter().any(|s| matches!(s, Slot::Visual { size: 10, .. })) {
            prop_assert!(f_hi < f_lo);
        }
    }

    #[test]
    fn adaptive_fusion_is_convex(
        xs in prop::collection::vec(-100.0f64..100.0, 30),
        ys in prop::collection::vec(-100.0f64..100.0, 30),
        w0 in prop::collection::vec(0.0f64..=1.0, 10),
    ) {
        let mut tape = Tape::inference();
        let x = tape.input(Tensor::new(vec![10, 3], xs.clone()).unwrap());
        let y = tape.input(Tensor::new(vec![10, 3], ys.clone()).unwrap());
        let w: Vec<f64> = w0.iter().flat_map(|&a| [a, 1.0 - a]).collect();
        let w = tape.input(Tensor::new(vec![10, 2], w).unwrap());
        let out = aggregate_adaptive(&mut tape, x, y, w).unwrap();
        for ((a, b), z) in xs.iter().zip(&ys).zip(tape.value(out).data()) {
            let slack = f64::EPSILON * a.abs().max(b.abs());
            prop_assert!(*z >= a.min(*b) - slack && *z <= a.max(*b) + slack);
        }
    }

    #[test]
    fn determination_ignores_monotone_maps(
        silence in -64i32..64,
        respond in -64i32..64,
        scale in 1i32..8,
        shift in -16i32..16,
    ) {
        let base = [silence as f64 / 8.0, respond as f64 / 8.0, 0.25];
        let d = determine(&base, None).respond;
        // all three maps are exact on eighths of small integers
        let affine = base.map(|x| scale as f64 * x + shift as f64);
        let cube = base.map(|x| x * x * x);
        prop_assert_eq!(determine(&affine, None).respond, d);
        prop_assert_eq!(determine(&cube, None).respond, d);
    }

    #[test]
    fn time_diff_ignores_translation(
        expected in prop::collection::vec(0u32..160, 0..6),
        actual in prop::collection::vec(0u32..160, 0..6),
        shift in -800i32..800,
    ) {
        // eighths of a second keep every sum exact
        let e: Vec<f64> = expected.iter().map(|&v| v as f64 / 8.0).collect();
        let a: Vec<f64> = actual.iter().map(|&v| v as f64 / 8.0).collect();
        let c = shift as f64 / 8.0;
        let base = time_diff(&e, &a, 20.0, None);
        let moved = time_diff(
            &e.iter().map(|x| x + c).collect::<Vec<_>>(),
            &a.iter().map(|x| x + c).collect::<Vec<_>>(),
            20.0 + c,
            None,
        );
        prop_assert_eq!(base, moved);
        prop_assert!(base.mean >= 0.0);
    }

    #[test]
    fn perplexity_matches_the_loss(
        data in prop::collection::vec(-6.0f64..6.0, 8 * 12),
        marks in prop::collection::vec(0u8..4, 8),
        targets in prop::collection::vec(0u32..12, 8),
    ) {
        let n = 8;
        let v = 12;
        let logits = Tensor::new(vec![n, v], data).unwrap();
        let sup: Vec<Supervision> = marks
            .iter()
            .zip(&targets)
            .enumerate()
            .filter_map(|(pos, (&m, &t))| match m {
                0 => None,
                1 => Some(Supervision { pos, target: t % 2, kind: SupervisionKind::Streaming, corrupted: false }),
                _ => Some(Supervision { pos, target: t, kind: SupervisionKind::Lm, corrupted: false }),
            })
            .collect();
        prop_assume!(!sup.is_empty());
        let rows: Vec<usize> = (0..n).collect();
        let mut tape = Tape::inference();
        let l = tape.input(logits.clone());
        let terms = streaming_lm_loss(&mut tape, l, &rows, &sup, n, 1.0).unwrap();
        let loss = tape.value(terms.total).item().unwrap();
        let scores = score_logits(&logits, &rows, &sup, None).unwrap();
        let ppl = lm_ppl(&scores, PplScope::All, true).unwrap();
        let from_loss = (loss * n as f64 / sup.len() as f64).exp();
        prop_assert!((ppl - from_loss).abs() <= 1e-9 * ppl, "{} vs {}", ppl, from_loss);
        prop_assert!(ppl >= 1.0);
    }
}
