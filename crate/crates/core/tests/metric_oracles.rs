//! Evaluation metrics against independent brute-force oracles.

use proptest::prelude::*;
use tac_core::autodiff::Tensor;
use tac_core::codebook::{CodeBook, DistanceMetric};
use tac_core::metrics::*;
use tac_core::model::{ScoredPrediction, Strategy};
use tac_core::rng::SplitMix64;

/// Scores drawn either from a continuum or from a coarse grid, so that
/// roughly half of the sets contain ties.
fn random_score_set(rng: &mut SplitMix64, max_len: usize) -> ScoreSet {
    let n = 2 + rng.below(max_len - 1);
    let coarse = rng.below(2) == 0;
    let mut scores: Vec<f64> = (0..n)
        .map(|_| if coarse { rng.below(5) as f64 } else { rng.uniform(-3.0, 3.0) })
        .collect();
    let mut positives: Vec<bool> = (0..n).map(|_| rng.below(3) == 0).collect();
    positives[0] = true;
    positives[1] = false;
    scores.swap(0, n - 1);
    ScoreSet::new(scores, positives).unwrap()
}

fn pair_counting_auroc(s: &ScoreSet) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &p) in s.positives().iter().enumerate() {
        if !p {
            continue;
        }
        for (j, &q) in s.positives().iter().enumerate() {
            if q {
                continue;
            }
            pairs += 1.0;
            if s.scores()[i] > s.scores()[j] {
                wins += 1.0;
            } else if s.scores()[i] == s.scores()[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// ROC by brute force: `+inf` first, then every distinct score descending,
/// counting `score >= t` as a positive call.
fn brute_force_roc(s: &ScoreSet) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut thresholds: Vec<f64> = s.scores().to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    thresholds.insert(0, f64::INFINITY);
    let p = s.num_positive() as f64;
    let n = s.num_negative() as f64;
    let (mut fpr, mut tpr) = (Vec::new(), Vec::new());
    for &t in &thresholds {
        let called = |want: bool| {
            s.scores()
                .iter()
                .zip(s.positives())
                .filter(|(&x, &y)| y == want && x >= t)
                .count() as f64
        };
        tpr.push(called(true) / p);
        fpr.push(called(false) / n);
    }
    (fpr, tpr, thresholds)
}

/// The detection-rate procedure step by step: ROC, `fnr = 1 - tpr`,
/// first index of the smallest `|fnr - fpr|`, `tpr` there.
fn reference_detection_rate(s: &ScoreSet) -> (f64, f64) {
    let (fpr, tpr, _) = brute_force_roc(s);
    let fnr: Vec<f64> = tpr.iter().map(|t| 1.0 - t).collect();
    let gaps: Vec<f64> = fnr.iter().zip(&fpr).map(|(a, b)| (a - b).abs()).collect();
    let mut t = 0;
    for (i, g) in gaps.iter().enumerate() {
        if *g < gaps[t] {
            t = i;
        }
    }
    let (lo, hi) = (fnr[t].min(fpr[t]), fnr[t].max(fpr[t]));
    (tpr[t], (lo + hi) * 0.5)
}

#[test]
fn auroc_and_detection_rate_match_oracles_on_1000_sets() {
    let mut rng = SplitMix64::stream(7, "metric-oracles");
    for case in 0..1000 {
        let s = random_score_set(&mut rng, 50);
        let a = auroc(&s).unwrap();
        assert!((a - pair_counting_auroc(&s)).abs() <= 1e-12, "case {case}");
        let (rate, e) = reference_detection_rate(&s);
        assert_eq!(detection_rate_at_eer(&s).unwrap(), rate, "case {case}");
        assert_eq!(eer(&s).unwrap(), e, "case {case}");
    }
}

#[test]
fn roc_matches_brute_force_thresholds() {
    let mut rng = SplitMix64::stream(8, "metric-oracles");
    for _ in 0..200 {
        let s = random_score_set(&mut rng, 20);
        let roc = roc_curve(&s).unwrap();
        let (fpr, tpr, thresholds) = brute_force_roc(&s);
        assert_eq!(roc.fpr, fpr);
        assert_eq!(roc.tpr, tpr);
        assert_eq!(roc.thresholds, thresholds);
    }
}

#[test]
fn mirrored_separable_sets() {
    let s = ScoreSet::new(vec![3.0, 2.5, 1.0, 0.5, 0.0], vec![true, true, false, false, false]).unwrap();
    let mirror = ScoreSet::new(
        s.scores().iter().map(|x| -x).collect(),
        s.positives().iter().map(|p| !p).collect(),
    )
    .unwrap();
    assert_eq!(detection_rate_at_eer(&s).unwrap(), 1.0);
    assert_eq!(detection_rate_at_eer(&mirror).unwrap(), 1.0);
    let anti = ScoreSet::new(s.scores().iter().map(|x| -x).collect(), s.positives().to_vec()).unwrap();
    assert_eq!(detection_rate_at_eer(&anti).unwrap(), 0.0);
}

fn random_predictions(rng: &mut SplitMix64, min_len: usize, max_len: usize) -> Vec<ScoredPrediction> {
    let n = min_len + rng.below(max_len - min_len + 1);
    let coarse = rng.below(2) == 0;
    (0..n)
        .map(|i| {
            let correct = rng.below(3) != 0;
            ScoredPrediction {
                sample_id: i,
                label: Some(0),
                strategy: Strategy::tac(DistanceMetric::L1),
                predicted: usize::from(!correct),
                confidence: if coarse { -(rng.below(6) as f64) } else { -rng.uniform(0.0, 5.0) },
            }
        })
        .collect()
}

/// Exhaustive grid: every candidate threshold, value by direct counting,
/// the first maximum in ascending threshold order wins.
fn grid_best_threshold(preds: &[ScoredPrediction], omega: f64) -> f64 {
    let mut grid: Vec<f64> = preds.iter().map(|p| p.confidence).collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid.insert(0, f64::NEG_INFINITY);
    grid.push(f64::INFINITY);
    let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for t in grid {
        let kept: Vec<&ScoredPrediction> = preds.iter().filter(|p| p.confidence >= t).collect();
        let nc = kept.iter().filter(|p| p.correct() == Some(true)).count() as f64;
        let ni = kept.len() as f64 - nc;
        let v = (nc - omega * ni) / preds.len() as f64;
        if v > best.1 {
            best = (t, v);
        }
    }
    best.0
}

#[test]
fn voc_thresholds_match_exhaustive_grid_on_100_sets() {
    let mut rng = SplitMix64::stream(9, "metric-oracles");
    let omegas = default_omega_grid(6, 0.1, 10.0);
    for case in 0..100 {
        let preds = random_predictions(&mut rng, 5, 40);
        let seed = case as u64;
        let result = voc_curve(&preds, &omegas, 5, seed).unwrap();
        let folds = fold_assignment(preds.len(), 5, seed).unwrap();
        for sel in &result.selections {
            let train: Vec<ScoredPrediction> = folds
                .iter()
                .enumerate()
                .filter(|(f, _)| *f != sel.fold)
                .flat_map(|(_, idx)| idx.iter().map(|&i| preds[i].clone()))
                .collect();
            assert_eq!(sel.threshold, grid_best_threshold(&train, sel.omega), "case {case} fold {}", sel.fold);
        }
    }
}

#[test]
fn value_at_zero_cost_is_accuracy() {
    let mut rng = SplitMix64::stream(10, "metric-oracles");
    for _ in 0..100 {
        let preds = random_predictions(&mut rng, 1, 40);
        let acc = preds.iter().filter(|p| p.correct() == Some(true)).count() as f64 / preds.len() as f64;
        let v = value(&preds, f64::NEG_INFINITY, 0.0).unwrap();
        assert_eq!(v.value, acc);
        assert_eq!(v.rejected, 0);
        let best = best_threshold(&preds, 0.0).unwrap();
        assert_eq!(best.threshold, f64::NEG_INFINITY);
        assert_eq!(best.value, acc);
    }
}

#[test]
fn voc_selection_is_optimistic_on_average() {
    // Confidence carries no information about correctness here, so any gap
    // between the selection and held-out values is selection bias.
    let omegas = default_omega_grid(5, 0.5, 5.0);
    let (mut train, mut test) = (0.0, 0.0);
    for rep in 0..60 {
        let mut rng = SplitMix64::stream(rep, "null-scores");
        let preds = random_predictions(&mut rng, 40, 40);
        let r = voc_curve(&preds, &omegas, 5, rep).unwrap();
        train += r.mean.get("train").unwrap().iter().sum::<f64>();
        test += r.mean.get("test").unwrap().iter().sum::<f64>();
    }
    assert!(train >= test, "train {train} < test {test}");
}

#[test]
fn accuracy_rejection_hand_case() {
    let mk = |id, confidence, correct: bool| ScoredPrediction {
        sample_id: id,
        label: Some(1),
        strategy: Strategy::Msp,
        predicted: if correct { 1 } else { 0 },
        confidence,
    };
    let preds = vec![mk(0, 0.9, true), mk(1, 0.2, false), mk(2, 0.7, false), mk(3, 0.4, true)];
    let fractions = [0.25, 0.5, 0.75, 1.0];
    let (curve, area) = accuracy_rejection_curve(&preds, &fractions).unwrap();
    let acc = curve.get("accuracy").unwrap();
    assert_eq!(acc, &[1.0, 0.5, 2.0 / 3.0, 0.5]);
    let manual = ((0.25 * (1.0 + 0.5) / 2.0) + (0.25 * (0.5 + 2.0 / 3.0) / 2.0) + (0.25 * (2.0 / 3.0 + 0.5) / 2.0)) / 0.75;
    assert!((area - manual).abs() < 1e-15);
}

#[test]
fn class_averages_and_heatmap_match_direct_formulas() {
    let mut rng = SplitMix64::stream(11, "metric-oracles");
    let (n, k, l) = (30, 3, 8);
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let profiles = Tensor::from_fn(&[n, l], |_| rng.uniform(0.0, 1.0));
    let avg = class_average_profiles(&profiles, &labels, k).unwrap();
    for c in 0..k {
        for j in 0..l {
            let members: Vec<f64> = (0..n).filter(|&i| labels[i] == c).map(|i| profiles.row(i)[j]).collect();
            let mean = members.iter().sum::<f64>() / members.len() as f64;
            assert!((avg.row(c)[j] - mean).abs() < 1e-12);
        }
    }
    let book = CodeBook::generate(k, l, 3).unwrap();
    let h = code_match_heatmap(&avg, &book).unwrap();
    for i in 0..k {
        for j in 0..k {
            let c = book.code_f64(j);
            let dot: f64 = avg.row(i).iter().zip(&c).map(|(a, b)| a * b).sum();
            let na = avg.row(i).iter().map(|a| a * a).sum::<f64>().sqrt();
            let nc = c.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!((h.row(i)[j] - (1.0 - dot / (na * nc))).abs() < 1e-12);
        }
    }
}

fn preds_strategy() -> impl proptest::strategy::Strategy<Value = Vec<(f64, bool)>> {
    prop::collection::vec((-5.0f64..5.0, any::<bool>()), 1..40)
}

fn to_preds(raw: &[(f64, bool)], f: impl Fn(f64) -> f64) -> Vec<ScoredPrediction> {
    raw.iter()
        .enumerate()
        .map(|(i, &(c, ok))| ScoredPrediction {
            sample_id: i,
            label: Some(0),
            strategy: Strategy::Mls,
            predicted: usize::from(!ok),
            confidence: f(c),
        })
        .collect()
}

proptest! {
    #[test]
    fn auroc_invariant_under_increasing_transforms(raw in preds_strategy()) {
        let scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
        let pos: Vec<bool> = raw.iter().map(|r| r.1).collect();
        prop_assume!(pos.iter().any(|&p| p) && pos.iter().any(|&p| !p));
        let a = auroc(&ScoreSet::new(scores.clone(), pos.clone()).unwrap()).unwrap();
        let b = auroc(&ScoreSet::new(scores.iter().map(|x| x.exp() * 3.0 + 1.0).collect(), pos).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn accuracy_rejection_invariant_under_increasing_transforms(raw in preds_strategy()) {
        let fractions = default_fraction_grid(10);
        let (a, area_a) = accuracy_rejection_curve(&to_preds(&raw, |c| c), &fractions).unwrap();
        let (b, area_b) = accuracy_rejection_curve(&to_preds(&raw, |c| (c / 2.0).tanh()), &fractions).unwrap();
        prop_assert_eq!(a.get("accuracy"), b.get("accuracy"));
        prop_assert_eq!(area_a, area_b);
        prop_assert!((area_a - trapezoid_area(&fractions, a.get("accuracy").unwrap())).abs() < 1e-15);
    }

    #[test]
    fn value_nonincreasing_in_cost(raw in preds_strategy(), t in -5.0f64..5.0, w in 0.0f64..5.0, dw in 0.0f64..5.0) {
        let preds = to_preds(&raw, |c| c);
        let lo = value(&preds, t, w).unwrap();
        let hi = value(&preds, t, w + dw).unwrap();
        prop_assert!(hi.value <= lo.value);
        prop_assert_eq!(lo.correct + lo.incorrect + lo.rejected, lo.total);
    }
}
