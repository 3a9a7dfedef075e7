use std::cell::Cell;

use super::reference::{brute_force_eer, brute_force_min_dcf};
use super::*;
use crate::plda::train_plda;
use crate::synth::{generate_corpus, make_trials, CorpusConfig};
use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn set(targets: &[f64], nontargets: &[f64]) -> ScoredTrialSet {
    let entries = targets
        .iter()
        .map(|&s| (s, true))
        .chain(nontargets.iter().map(|&s| (s, false)))
        .collect();
    ScoredTrialSet::new(entries, "test").unwrap()
}

/// Up to 200 trials; scores are sometimes drawn from a small grid to force ties.
fn random_set(seed: u64) -> ScoredTrialSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=200);
    let coarse = rng.random_bool(0.3);
    let shift = rng.random_range(0.0..2.0);
    let mut entries: Vec<(f64, bool)> = (0..n)
        .map(|_| {
            let target = rng.random_bool(0.4);
            let mut s: f64 = rng.random_range(-3.0..3.0) + if target { shift } else { 0.0 };
            if coarse {
                s = (s * 2.0).round() / 2.0;
            }
            (s, target)
        })
        .collect();
    entries[0].1 = true;
    entries[1].1 = false;
    ScoredTrialSet::new(entries, "random").unwrap()
}

#[test]
fn separable_scores_have_zero_eer() {
    assert_eq!(compute_eer(&set(&[0.9, 0.8], &[0.3, 0.1])), 0.0);
}

#[test]
fn interleaved_scores_have_half_eer() {
    assert_eq!(compute_eer(&set(&[0.9, 0.2], &[0.8, 0.1])), 0.5);
}

#[test]
fn constant_scores() {
    let s = set(&[1.0, 1.0], &[1.0, 1.0, 1.0]);
    assert_eq!(compute_eer(&s), 0.5);
    assert_eq!(compute_min_dcf(&s, &DcfParams::default()).unwrap(), 1.0);
}

#[test]
fn separable_scores_have_zero_min_dcf() {
    let s = set(&[0.9, 0.8], &[0.3, 0.1]);
    assert_eq!(compute_min_dcf(&s, &DcfParams::default()).unwrap(), 0.0);
}

#[test]
fn constant_scores_accept_all_costs_nine_point_nine() {
    let s = set(&[1.0], &[1.0]);
    let p = DcfParams::default();
    assert!((dcf_at_threshold(&s, &p, 1.0).unwrap() - 9.9).abs() < 1e-12);
    assert_eq!(dcf_at_threshold(&s, &p, f64::INFINITY).unwrap(), 1.0);
}

#[test]
fn scored_set_invariants() {
    assert!(ScoredTrialSet::new(vec![(1.0, true)], "x").is_err());
    assert!(ScoredTrialSet::new(vec![(1.0, false)], "x").is_err());
    assert!(ScoredTrialSet::new(vec![(f64::NAN, true), (0.0, false)], "x").is_err());
    assert!(ScoredTrialSet::new(vec![(f64::INFINITY, true), (0.0, false)], "x").is_err());
}

#[test]
fn dcf_params_are_validated() {
    let s = set(&[1.0], &[0.0]);
    for bad in [
        DcfParams { c_miss: 0.0, ..DcfParams::default() },
        DcfParams { c_fa: -1.0, ..DcfParams::default() },
        DcfParams { p_target: 1.0, ..DcfParams::default() },
        DcfParams { p_target: 0.0, ..DcfParams::default() },
    ] {
        assert!(matches!(compute_min_dcf(&s, &bad), Err(Error::InvalidConfig(_))));
    }
}

#[test]
fn metrics_match_brute_force_sweep() {
    let params = DcfParams::default();
    for seed in 0..100 {
        let s = random_set(seed);
        assert_eq!(compute_eer(&s), brute_force_eer(&s), "seed {seed}");
        assert_eq!(compute_min_dcf(&s, &params).unwrap(), brute_force_min_dcf(&s, &params), "seed {seed}");
    }
}

#[test]
fn min_dcf_never_exceeds_cost_at_eer_threshold() {
    let params = DcfParams::default();
    for seed in 100..200 {
        let s = random_set(seed);
        let (_, threshold) = eer_with_threshold(&s);
        assert!(compute_min_dcf(&s, &params).unwrap() <= dcf_at_threshold(&s, &params, threshold).unwrap());
    }
}

#[test]
fn det_curve_shape() {
    let s = set(&[0.9, 0.7, 0.7], &[0.7, 0.2, 0.1]);
    let det = det_points(&s);
    assert_eq!(det.len(), 5);
    assert_eq!((det[0].p_fa, det[0].p_miss), (1.0, 0.0));
    let last = det.last().unwrap();
    assert_eq!((last.p_fa, last.p_miss), (0.0, 1.0));
    assert!(last.threshold.is_infinite());
}

#[test]
fn separable_det_passes_through_origin() {
    let det = det_points(&set(&[0.9, 0.8], &[0.3, 0.1]));
    assert!(det.iter().any(|p| p.p_fa == 0.0 && p.p_miss == 0.0));
}

#[test]
fn fusion_weights_are_renormalized() {
    assert_eq!(FusionWeights::default().normalized().unwrap(), (0.7, 0.3));
    assert!(FusionWeights { base: 0.0, other: 0.0 }.normalized().is_err());
    assert!(FusionWeights { base: -1.0, other: 2.0 }.normalized().is_err());
}

#[test]
fn fusion_with_zero_other_weight_keeps_base_ranking() {
    let base = random_set(7);
    let other = ScoredTrialSet::new(
        base.entries().iter().enumerate().map(|(i, e)| ((i as f64).sin(), e.1)).collect(),
        "other",
    )
    .unwrap();
    let fused = fuse_scores(&base, &other, FusionWeights { base: 1.0, other: 0.0 }, FusionNorm::ZScore).unwrap();
    assert_eq!(compute_eer(&fused), compute_eer(&base));
    let mut order_base: Vec<usize> = (0..base.len()).collect();
    order_base.sort_by(|&i, &j| base.entries()[i].0.total_cmp(&base.entries()[j].0).then(i.cmp(&j)));
    let mut order_fused: Vec<usize> = (0..base.len()).collect();
    order_fused.sort_by(|&i, &j| fused.entries()[i].0.total_cmp(&fused.entries()[j].0).then(i.cmp(&j)));
    assert_eq!(order_base, order_fused);
}

#[test]
fn fusing_duplicates_keeps_eer() {
    for seed in 0..20 {
        let s = random_set(seed);
        for norm in [FusionNorm::ZScore, FusionNorm::Raw] {
            let fused = fuse_scores(&s, &s, FusionWeights::default(), norm).unwrap();
            assert_eq!(compute_eer(&fused), compute_eer(&s));
        }
    }
}

#[test]
fn zscore_fusion_of_constant_system_only_centres_it() {
    let base = set(&[2.0, 4.0], &[0.0, 2.0]);
    let flat = set(&[5.0, 5.0], &[5.0, 5.0]);
    let fused = fuse_scores(&base, &flat, FusionWeights { base: 1.0, other: 1.0 }, FusionNorm::ZScore).unwrap();
    let expected: Vec<f64> = [0.0, 2.0 / 2f64.sqrt(), -2.0 / 2f64.sqrt(), 0.0].iter().map(|z| 0.5 * z).collect();
    for (got, want) in fused.scores().zip(expected) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn raw_fusion_is_a_plain_weighted_sum() {
    let a = set(&[1.0], &[0.0]);
    let b = set(&[10.0], &[20.0]);
    let fused = fuse_scores(&a, &b, FusionWeights::default(), FusionNorm::Raw).unwrap();
    let scores: Vec<f64> = fused.scores().collect();
    assert_eq!(scores, vec![0.7 * 1.0 + 0.3 * 10.0, 0.3 * 20.0]);
}

#[test]
fn misaligned_fusion_is_rejected() {
    let a = set(&[1.0], &[0.0]);
    let b = set(&[1.0, 2.0], &[0.0]);
    assert!(fuse_scores(&a, &b, FusionWeights::default(), FusionNorm::ZScore).is_err());
    let flipped = ScoredTrialSet::new(vec![(0.0, false), (1.0, true)], "flipped").unwrap();
    assert!(fuse_scores(&a, &flipped, FusionWeights::default(), FusionNorm::ZScore).is_err());
}

#[test]
fn mode_strings_round_trip() {
    for m in [EvalMode::Baseline, EvalMode::LongShort, EvalMode::ShortShort] {
        assert_eq!(m.to_string().parse::<EvalMode>().unwrap(), m);
    }
    assert!("both".parse::<EvalMode>().is_err());
}

struct Counting<'a> {
    calls: &'a Cell<usize>,
}

impl VectorTransform<f64> for Counting<'_> {
    fn transform(&self, x: &IVector<f64>) -> Result<IVector<f64>> {
        self.calls.set(self.calls.get() + 1);
        Ok(x.clone())
    }
}

fn small_setup() -> (Corpus<f64>, PldaModel<f64>) {
    let config = CorpusConfig {
        dim: 12,
        latent_dim: 3,
        num_speakers: 30,
        longs_per_speaker: 3,
        segments_per_long: 3,
        bias_rank: 2,
        eval_fraction: 0.3,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus::<f64>(&config).unwrap();
    let longs = corpus.training_longs();
    let vectors: Vec<_> = longs.iter().map(|l| l.vector.clone()).collect();
    let labels: Vec<_> = longs.iter().map(|l| l.speaker).collect();
    let plda = train_plda(&vectors, &labels, 3, 10, 0).unwrap();
    (corpus, plda)
}

#[test]
fn transform_call_counts_follow_mode() {
    let (corpus, plda) = small_setup();
    let params = DcfParams::default();
    let calls = Cell::new(0);
    let counting = Counting { calls: &calls };

    let ss = make_trials(&corpus, TrialMode::ShortShort, 20, 40, 1).unwrap();
    let transformed = evaluate_condition(&corpus, &ss, &plda, Some(&counting), EvalMode::ShortShort, &params).unwrap();
    assert_eq!(calls.get(), 2 * ss.entries.len());

    calls.set(0);
    let ls = make_trials(&corpus, TrialMode::LongShort, 20, 40, 1).unwrap();
    evaluate_condition(&corpus, &ls, &plda, Some(&counting), EvalMode::LongShort, &params).unwrap();
    assert_eq!(calls.get(), ls.entries.len());

    calls.set(0);
    let baseline = evaluate_condition(&corpus, &ss, &plda, Some(&counting), EvalMode::Baseline, &params).unwrap();
    assert_eq!(calls.get(), 0);
    // An identity transform reproduces the baseline scores.
    assert_eq!(baseline.scores.entries(), transformed.scores.entries());
    assert_eq!(baseline.eer, transformed.eer);
}

#[test]
fn baseline_separates_speakers() {
    let (corpus, plda) = small_setup();
    let trials = make_trials(&corpus, TrialMode::LongShort, 50, 200, 3).unwrap();
    let m = evaluate_condition(&corpus, &trials, &plda, None, EvalMode::Baseline, &DcfParams::default()).unwrap();
    assert!(m.eer < 0.3, "eer {}", m.eer);
    assert_eq!(m.scores.len(), 250);
    assert!(m.min_dcf <= 1.0);
}

#[test]
fn transformed_modes_need_a_transform_and_matching_trials() {
    let (corpus, plda) = small_setup();
    let params = DcfParams::default();
    let ss = make_trials(&corpus, TrialMode::ShortShort, 5, 5, 1).unwrap();
    assert!(matches!(
        evaluate_condition(&corpus, &ss, &plda, None, EvalMode::ShortShort, &params),
        Err(Error::InvalidConfig(_))
    ));
    let calls = Cell::new(0);
    let counting = Counting { calls: &calls };
    assert!(evaluate_condition(&corpus, &ss, &plda, Some(&counting), EvalMode::LongShort, &params).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_rank_statistics(seed in 0u64..100_000) {
        let s = random_set(seed);
        // exp(x/4) + 7 is strictly increasing and keeps these scores distinct.
        let warped = ScoredTrialSet::new(
            s.entries().iter().map(|&(v, t)| ((v / 4.0).exp() + 7.0, t)).collect(),
            "warped",
        ).unwrap();
        prop_assert_eq!(compute_eer(&s), compute_eer(&warped));
        let p = DcfParams::default();
        prop_assert_eq!(compute_min_dcf(&s, &p).unwrap(), compute_min_dcf(&warped, &p).unwrap());
    }

    #[test]
    fn det_curve_is_monotone(seed in 0u64..100_000) {
        let s = random_set(seed);
        let det = det_points(&s);
        let distinct = {
            let mut v: Vec<f64> = s.scores().collect();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v.len()
        };
        prop_assert_eq!(det.len(), distinct + 1);
        prop_assert_eq!((det[0].p_fa, det[0].p_miss), (1.0, 0.0));
        for w in det.windows(2) {
            prop_assert!(w[1].p_fa <= w[0].p_fa && w[1].p_miss >= w[0].p_miss);
        }
    }

    #[test]
    fn eer_bounds(seed in 0u64..100_000) {
        let s = random_set(seed);
        let e = compute_eer(&s);
        prop_assert!((0.0..=1.0).contains(&e));
    }

    #[test]
    fn dominant_targets_keep_eer_below_half(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nt = rng.random_range(1..50);
        let nn = rng.random_range(1..50);
        let targets: Vec<f64> = (0..nt).map(|_| rng.random_range(1.0..3.0)).collect();
        let nontargets: Vec<f64> = (0..nn).map(|_| rng.random_range(0.0..1.5)).collect();
        prop_assert!(compute_eer(&set(&targets, &nontargets)) <= 0.5);
    }
}
