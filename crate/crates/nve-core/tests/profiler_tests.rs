use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use nve_core::model::{build_toy_model, inject_outlier, ModelSpec, SlotKind};
use nve_core::profiler::{
    assign_precisions, cache_get_or_profile, load_profile, minmax_normalize, profile,
    profile_with_stats, serialize_profile, spearman_scores, split_half_overlap, top_k_indices,
    topk_overlap_scores, Assignment, CalibrationSet, ScorerId, DEFAULT_EPSILON, DEFAULT_TAU,
};

/// 16-layer normalized score vector used across routing examples.
const SCORES_16: [f64; 16] = [
    0.30, 0.699, 0.00, 0.07, 0.12, 0.08, 0.09, 0.03, 0.07, 0.27, 0.19, 0.24, 0.32, 0.38, 0.475,
    1.00,
];

fn small_spec(seed: u64) -> ModelSpec {
    ModelSpec {
        num_layers: 8,
        hidden_dim: 32,
        ffn_dim: 64,
        num_heads: 4,
        vocab_size: 64,
        seed,
    }
}

fn small_calib(seed: u64) -> CalibrationSet {
    CalibrationSet::synthetic(4, 8, 64, seed)
}

#[test]
fn reference_vector_assignment_counts() {
    let at = |tau: f64| {
        assign_precisions(&SCORES_16, tau, false)
            .iter()
            .filter(|a| **a == Assignment::W4A16)
            .count()
    };
    assert_eq!(at(0.7), 1);
    let a = assign_precisions(&SCORES_16, 0.7, false);
    assert_eq!(a[15], Assignment::W4A16);
    assert_eq!(at(0.0), 16);
    assert_eq!(at(2.0), 0);
}

#[test]
fn normalization_pins_extremes() {
    let (n, degenerate) = minmax_normalize(&[3.0, 1.0, 2.0], 1e-9);
    assert!(!degenerate);
    assert_eq!(n, vec![1.0, 0.0, 0.5]);
}

proptest! {
    #[test]
    fn degenerate_constant_scores(c in -1e6f64..1e6, eps in 1e-12f64..1.0, n in 1usize..20) {
        let scores = vec![c; n];
        let (normalized, degenerate) = minmax_normalize(&scores, eps);
        prop_assert!(degenerate);
        prop_assert!(normalized.iter().all(|&x| x == 0.0));
        // Degenerate profiles route everything W4A8 even at tau = 0.
        let a = assign_precisions(&normalized, 0.0, degenerate);
        prop_assert!(a.iter().all(|x| *x == Assignment::W4A8));
    }

    #[test]
    fn normalization_affine_invariant(
        xs in prop::collection::vec(-100.0f64..100.0, 2..12),
        scale in 0.5f64..10.0,
        shift in -50.0f64..50.0,
    ) {
        let spread = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - xs.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        let (a, da) = minmax_normalize(&xs, 1e-9);
        let ys: Vec<f64> = xs.iter().map(|x| scale * x + shift).collect();
        let (b, db) = minmax_normalize(&ys, 1e-9);
        prop_assert!(!da && !db);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    /// Raising tau never converts W4A8 to W4A16.
    #[test]
    fn assignment_monotone_in_tau(
        scores in prop::collection::vec(0.0f64..1.0, 1..20),
        t1 in 0.0f64..2.0,
        t2 in 0.0f64..2.0,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a_lo = assign_precisions(&scores, lo, false);
        let a_hi = assign_precisions(&scores, hi, false);
        for (l, h) in a_lo.iter().zip(&a_hi) {
            if *h == Assignment::W4A16 {
                prop_assert_eq!(*l, Assignment::W4A16);
            }
        }
    }
}

#[test]
fn streaming_holds_one_layer_buffer() {
    let model = build_toy_model(&small_spec(11)).unwrap();
    let (_, stats) = profile_with_stats(
        &model,
        &small_calib(1),
        ScorerId::Combined,
        DEFAULT_TAU,
        DEFAULT_EPSILON,
    )
    .unwrap();
    assert_eq!(stats.max_resident_layer_buffers, 1);
}

#[test]
fn ffn_outlier_dominates_top1() {
    let base = build_toy_model(&small_spec(21)).unwrap();
    let model = inject_outlier(&base, 5, SlotKind::Down, 5.0).unwrap();
    let p = profile(
        &model,
        &small_calib(2),
        ScorerId::Combined,
        DEFAULT_TAU,
        DEFAULT_EPSILON,
    )
    .unwrap();
    assert_eq!(top_k_indices(&p.raw_scores, 1), vec![5]);
    let overlap = split_half_overlap(&model, &small_calib(2), ScorerId::Combined, 1).unwrap();
    assert_eq!(overlap, 1.0);
}

#[test]
fn scorers_differ_but_share_schema() {
    let base = build_toy_model(&small_spec(31)).unwrap();
    let model = inject_outlier(&base, 2, SlotKind::Down, 5.0).unwrap();
    let calib = small_calib(3);
    let combined = profile(&model, &calib, ScorerId::Combined, DEFAULT_TAU, DEFAULT_EPSILON).unwrap();
    let input_l2 = profile(&model, &calib, ScorerId::InputL2, DEFAULT_TAU, DEFAULT_EPSILON).unwrap();
    assert_ne!(combined.raw_scores, input_l2.raw_scores);
    assert_eq!(combined.num_layers(), input_l2.num_layers());
    assert_eq!(combined.architecture_key, input_l2.architecture_key);
}

#[test]
fn profile_serialization_is_canonical_fixpoint() {
    let model = build_toy_model(&small_spec(41)).unwrap();
    let p = profile(
        &model,
        &small_calib(4),
        ScorerId::Combined,
        DEFAULT_TAU,
        DEFAULT_EPSILON,
    )
    .unwrap();
    let bytes = serialize_profile(&p).unwrap();
    let reloaded = load_profile(&bytes).unwrap();
    assert_eq!(serialize_profile(&reloaded).unwrap(), bytes);
    // Same inputs, fresh pass: byte-identical.
    let again = profile(
        &model,
        &small_calib(4),
        ScorerId::Combined,
        DEFAULT_TAU,
        DEFAULT_EPSILON,
    )
    .unwrap();
    assert_eq!(serialize_profile(&again).unwrap(), bytes);
}

#[test]
fn cache_miss_then_hit_and_corruption_recovery() {
    let dir = tempfile::tempdir().unwrap();
    let model = build_toy_model(&small_spec(51)).unwrap();
    let calib = small_calib(5);
    let first = cache_get_or_profile(
        dir.path(),
        &model,
        &calib,
        ScorerId::Combined,
        DEFAULT_TAU,
        DEFAULT_EPSILON,
    )
    .unwrap();
    assert!(!first.cache_hit);
    let second = cache_get_or_profile(
        dir.path(),
        &model,
        &calib,
        ScorerId::Combined,
        DEFAULT_TAU,
        DEFAULT_EPSILON,
    )
    .unwrap();
    assert!(second.cache_hit);
    assert_eq!(second.on_device.as_nanos(), 0);
    assert_eq!(second.profile, first.profile);

    // Truncate the cached entry; next call must recover with a warning.
    let path = dir.path().join(format!("{}.json", model.architecture_key()));
    std::fs::write(&path, b"{not json").unwrap();
    let third = cache_get_or_profile(
        dir.path(),
        &model,
        &calib,
        ScorerId::Combined,
        DEFAULT_TAU,
        DEFAULT_EPSILON,
    )
    .unwrap();
    assert!(!third.cache_hit);
    assert!(third.warning.is_some());
    assert_eq!(third.profile, first.profile);
}

#[test]
fn spearman_hand_example() {
    // Σd² = 2 over n = 4: 1 - 6*2/(4*15) = 0.8.
    let r = spearman_scores(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
    assert_abs_diff_eq!(r, 0.8, epsilon = 1e-12);
    assert_abs_diff_eq!(
        spearman_scores(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(),
        -1.0,
        epsilon = 1e-12
    );
}

/// Independent check: for distinct values Spearman equals the classic
/// 1 - 6Σd²/(n(n²-1)) form; top-k equals a threshold count.
#[test]
fn rank_statistics_match_brute_force() {
    use itertools::Itertools;
    for perm in (0..5u32).permutations(5) {
        let a: Vec<f64> = (0..5).map(|i| i as f64).collect();
        let b: Vec<f64> = perm.iter().map(|&x| x as f64).collect();
        let n = 5.0f64;
        let d2: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| {
                let rx = x; // values are their own ranks - 1
                let ry = y;
                (rx - ry) * (rx - ry)
            })
            .sum();
        let classic = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
        assert_abs_diff_eq!(spearman_scores(&a, &b).unwrap(), classic, epsilon = 1e-12);

        for k in 1..=5usize {
            let got = top_k_indices(&b, k);
            // Brute force: the k indices whose values beat the (n-k)th value.
            let mut sorted = b.clone();
            sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
            let cut = sorted[k - 1];
            let expect: Vec<usize> = (0..5).filter(|&i| b[i] >= cut).collect();
            let mut got_sorted = got.clone();
            got_sorted.sort_unstable();
            assert_eq!(got_sorted, expect);
            assert_eq!(topk_overlap_scores(&b, &b, k).unwrap(), 1.0);
        }
    }
}

#[test]
fn overlap_rejects_bad_k() {
    assert!(topk_overlap_scores(&[1.0, 2.0], &[1.0, 2.0], 0).is_err());
    assert!(topk_overlap_scores(&[1.0, 2.0], &[1.0, 2.0], 3).is_err());
    assert!(topk_overlap_scores(&[1.0], &[1.0, 2.0], 1).is_err());
}

#[test]
fn empty_calibration_rejected() {
    let model = build_toy_model(&small_spec(61)).unwrap();
    let empty = CalibrationSet { prompts: vec![] };
    assert!(profile(&model, &empty, ScorerId::Combined, DEFAULT_TAU, DEFAULT_EPSILON).is_err());
}
