//! Evaluation: ROC and AUROC, detection rate at the equal-error threshold,
//! value and VOC curves, accuracy-rejection curves, class-average profiles
//! and code-match heatmaps.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::codebook::CodeBook;
use crate::data::fmt_real;
use crate::error::{Error, Result};
use crate::model::ScoredPrediction;
use crate::rng::SplitMix64;

/// Scored records for a binary detection task; higher score means "more
/// likely positive".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    scores: Vec<f64>,
    positives: Vec<bool>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, positives: Vec<bool>) -> Result<Self> {
        if scores.len() != positives.len() {
            return Err(Error::dim(format!("{} scores for {} labels", scores.len(), positives.len())));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::Numeric("NaN detection score".into()));
        }
        Ok(Self { scores, positives })
    }

    /// Error detection: positives are wrong predictions, scored by negated confidence.
    pub fn errors(preds: &[ScoredPrediction]) -> Result<Self> {
        let positives = preds
            .iter()
            .map(|p| {
                p.correct()
                    .map(|c| !c)
                    .ok_or_else(|| Error::Input(format!("sample {} has no label", p.sample_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(preds.iter().map(|p| -p.confidence).collect(), positives)
    }

    /// Out-of-distribution detection: positives are the `ood` samples, scored
    /// by negated confidence.
    pub fn ood(in_dist: &[f64], ood: &[f64]) -> Result<Self> {
        let scores = in_dist.iter().chain(ood).map(|c| -c).collect();
        let positives = std::iter::repeat_n(false, in_dist.len())
            .chain(std::iter::repeat_n(true, ood.len()))
            .collect();
        Self::new(scores, positives)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn positives(&self) -> &[bool] {
        &self.positives
    }

    pub fn num_positive(&self) -> usize {
        self.positives.iter().filter(|&&p| p).count()
    }

    pub fn num_negative(&self) -> usize {
        self.len() - self.num_positive()
    }

    fn check_two_classes(&self) -> Result<()> {
        if self.num_positive() == 0 || self.num_negative() == 0 {
            return Err(Error::Degenerate(format!(
                "ROC needs both classes, got {} positives and {} negatives",
                self.num_positive(),
                self.num_negative()
            )));
        }
        Ok(())
    }
}

/// ROC points, starting at `(0, 0)` with threshold `+inf`, then one point
/// per distinct score in descending order. A record counts as predicted
/// positive at threshold `t` when its score is `>= t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Roc {
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub thresholds: Vec<f64>,
}

pub fn roc_curve(s: &ScoreSet) -> Result<Roc> {
    s.check_two_classes()?;
    let (p, n) = (s.num_positive() as f64, s.num_negative() as f64);
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[b].total_cmp(&s.scores[a]));
    let mut roc = Roc {
        fpr: vec![0.0],
        tpr: vec![0.0],
        thresholds: vec![f64::INFINITY],
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = s.scores[order[i]];
        while i < order.len() && s.scores[order[i]] == t {
            if s.positives[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        roc.fpr.push(fp as f64 / n);
        roc.tpr.push(tp as f64 / p);
        roc.thresholds.push(t);
    }
    Ok(roc)
}

/// Trapezoidal area under the ROC curve.
pub fn auroc(s: &ScoreSet) -> Result<f64> {
    let roc = roc_curve(s)?;
    Ok(roc
        .fpr
        .windows(2)
        .zip(roc.tpr.windows(2))
        .map(|(f, t)| (f[1] - f[0]) * (t[1] + t[0]) / 2.0)
        .sum())
}

fn eer_index(roc: &Roc) -> usize {
    let mut best = 0;
    let mut best_gap = f64::INFINITY;
    for i in 0..roc.fpr.len() {
        let gap = ((1.0 - roc.tpr[i]) - roc.fpr[i]).abs();
        if gap < best_gap {
            best_gap = gap;
            best = i;
        }
    }
    best
}

/// True-positive rate at the first ROC point minimizing `|fnr - fpr|`.
pub fn detection_rate_at_eer(s: &ScoreSet) -> Result<f64> {
    let roc = roc_curve(s)?;
    Ok(roc.tpr[eer_index(&roc)])
}

/// Midpoint of the false-negative and false-positive rates at the same point.
pub fn eer(s: &ScoreSet) -> Result<f64> {
    let roc = roc_curve(s)?;
    let t = eer_index(&roc);
    let (fnr, fpr) = (1.0 - roc.tpr[t], roc.fpr[t]);
    Ok((fnr.min(fpr) + fnr.max(fpr)) * 0.5)
}

/// Counts and value of a rejecting classifier at one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValuePoint {
    pub omega: f64,
    pub threshold: f64,
    pub value: f64,
    pub correct: usize,
    pub incorrect: usize,
    pub rejected: usize,
    pub total: usize,
}

fn value_of(correct: usize, incorrect: usize, total: usize, omega: f64) -> f64 {
    (correct as f64 - omega * incorrect as f64) / total as f64
}

fn flags(preds: &[ScoredPrediction]) -> Result<Vec<(f64, bool)>> {
    preds
        .iter()
        .map(|p| {
            p.correct()
                .map(|c| (p.confidence, c))
                .ok_or_else(|| Error::Input(format!("sample {} has no label", p.sample_id)))
        })
        .collect()
}

/// Rejects samples with confidence below `threshold` and scores the rest:
/// `V = (N_c - omega * N_i) / N`.
pub fn value(preds: &[ScoredPrediction], threshold: f64, omega: f64) -> Result<ValuePoint> {
    if !(omega >= 0.0) {
        return Err(Error::Input(format!("error cost must be >= 0, got {omega}")));
    }
    if preds.is_empty() {
        return Err(Error::Input("value of an empty prediction set".into()));
    }
    let f = flags(preds)?;
    let kept = f.iter().filter(|(c, _)| !(*c < threshold));
    let (mut correct, mut incorrect) = (0, 0);
    for (_, ok) in kept {
        if *ok {
            correct += 1;
        } else {
            incorrect += 1;
        }
    }
    let total = preds.len();
    Ok(ValuePoint {
        omega,
        threshold,
        value: value_of(correct, incorrect, total, omega),
        correct,
        incorrect,
        rejected: total - correct - incorrect,
        total,
    })
}

/// Candidate thresholds: `-inf`, every distinct confidence ascending, `+inf`.
pub fn threshold_candidates(preds: &[ScoredPrediction]) -> Vec<f64> {
    let mut c: Vec<f64> = preds.iter().map(|p| p.confidence).collect();
    c.sort_by(f64::total_cmp);
    c.dedup();
    let mut out = Vec::with_capacity(c.len() + 2);
    out.push(f64::NEG_INFINITY);
    out.extend(c.into_iter().filter(|x| x.is_finite()));
    out.push(f64::INFINITY);
    out
}

/// Threshold maximizing the value; ties go to the smallest threshold.
pub fn best_threshold(preds: &[ScoredPrediction], omega: f64) -> Result<ValuePoint> {
    if preds.is_empty() {
        return Err(Error::Input("threshold selection on an empty set".into()));
    }
    if !(omega >= 0.0) {
        return Err(Error::Input(format!("error cost must be >= 0, got {omega}")));
    }
    let mut f = flags(preds)?;
    f.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total = f.len();
    let mut correct = f.iter().filter(|x| x.1).count();
    let mut incorrect = total - correct;
    let mut best = ValuePoint {
        omega,
        threshold: f64::NEG_INFINITY,
        value: value_of(correct, incorrect, total, omega),
        correct,
        incorrect,
        rejected: 0,
        total,
    };
    // Samples with confidence below the current candidate are rejected.
    let mut i = 0;
    for t in threshold_candidates(preds).into_iter().skip(1) {
        while i < total && f[i].0 < t {
            if f[i].1 {
                correct -= 1;
            } else {
                incorrect -= 1;
            }
            i += 1;
        }
        let v = value_of(correct, incorrect, total, omega);
        if v > best.value {
            best = ValuePoint {
                omega,
                threshold: t,
                value: v,
                correct,
                incorrect,
                rejected: i,
                total,
            };
        }
    }
    Ok(best)
}

/// `(x, y...)` series sharing one x axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    pub name: String,
    pub x_name: String,
    pub x: Vec<f64>,
    pub series: Vec<(String, Vec<f64>)>,
    /// Fold index, or a tag such as `mean` / `all`.
    pub fold: String,
    pub seed: Option<u64>,
}

impl CurveSet {
    pub fn new(name: &str, x_name: &str, x: Vec<f64>, fold: &str, seed: Option<u64>) -> Result<Self> {
        if x.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Input(format!("curve {name}: x values must be strictly increasing")));
        }
        Ok(Self {
            name: name.into(),
            x_name: x_name.into(),
            x,
            series: Vec::new(),
            fold: fold.into(),
            seed,
        })
    }

    pub fn push(&mut self, name: impl Into<String>, y: Vec<f64>) -> Result<()> {
        if y.len() != self.x.len() {
            return Err(Error::dim(format!("series of {} values on {} x points", y.len(), self.x.len())));
        }
        self.series.push((name.into(), y));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.series.iter().find(|(n, _)| n == name).map(|(_, y)| y.as_slice())
    }

    pub fn header(&self) -> String {
        let mut h = self.x_name.clone();
        for (n, _) in &self.series {
            write!(h, ",{n}").unwrap();
        }
        h.push_str(",fold,seed");
        h
    }

    fn write_rows(&self, out: &mut String) {
        for (i, x) in self.x.iter().enumerate() {
            out.push_str(&fmt_real(*x));
            for (_, y) in &self.series {
                write!(out, ",{}", fmt_real(y[i])).unwrap();
            }
            let seed = self.seed.map(|s| s.to_string()).unwrap_or_default();
            writeln!(out, ",{},{seed}", self.fold).unwrap();
        }
    }
}

/// Writes curves with identical columns into one CSV, in the given order.
/// Columns: x, one per series, `fold`, `seed`.
pub fn curves_to_csv(curves: &[CurveSet]) -> Result<String> {
    let first = curves.first().ok_or_else(|| Error::Input("no curves to write".into()))?;
    let header = first.header();
    let mut out = format!("{header}\n");
    for c in curves {
        if c.header() != header {
            return Err(Error::Input(format!("curve columns differ: {} vs {header}", c.header())));
        }
        c.write_rows(&mut out);
    }
    Ok(out)
}

/// Per-fold threshold selection of a VOC analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSelection {
    pub fold: usize,
    pub omega: f64,
    pub threshold: f64,
    pub train: ValuePoint,
    pub test: ValuePoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocResult {
    /// Train/test values averaged over folds.
    pub mean: CurveSet,
    pub per_fold: Vec<CurveSet>,
    pub selections: Vec<FoldSelection>,
}

/// Seeded shuffle, then contiguous chunks; the first `n % k` folds get one extra sample.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || n < k {
        return Err(Error::Degenerate(format!("cannot split {n} samples into {k} folds")));
    }
    let perm = SplitMix64::stream(seed, "folds").permutation(n);
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(perm[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

/// Value-operating-characteristic analysis with k-fold threshold selection.
/// For every fold and cost, the threshold is chosen on the other folds
/// ("train") and evaluated on the fold itself ("test").
pub fn voc_curve(preds: &[ScoredPrediction], omegas: &[f64], k: usize, seed: u64) -> Result<VocResult> {
    if omegas.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Input("error costs must be >= 0".into()));
    }
    flags(preds)?;
    let folds = fold_assignment(preds.len(), k, seed)?;
    let mut per_fold = Vec::with_capacity(k);
    let mut selections = Vec::with_capacity(k * omegas.len());
    let mut mean_train = vec![0.0; omegas.len()];
    let mut mean_test = vec![0.0; omegas.len()];
    for (f, test_idx) in folds.iter().enumerate() {
        let test: Vec<ScoredPrediction> = test_idx.iter().map(|&i| preds[i].clone()).collect();
        let train: Vec<ScoredPrediction> = folds
            .iter()
            .enumerate()
            .filter(|(g, _)| *g != f)
            .flat_map(|(_, idx)| idx.iter().map(|&i| preds[i].clone()))
            .collect();
        let mut tr = Vec::with_capacity(omegas.len());
        let mut te = Vec::with_capacity(omegas.len());
        for (j, &omega) in omegas.iter().enumerate() {
            let chosen = best_threshold(&train, omega)?;
            let held = value(&test, chosen.threshold, omega)?;
            tr.push(chosen.value);
            te.push(held.value);
            mean_train[j] += chosen.value / k as f64;
            mean_test[j] += held.value / k as f64;
            selections.push(FoldSelection {
                fold: f,
                omega,
                threshold: chosen.threshold,
                train: chosen,
                test: held,
            });
        }
        let mut c = CurveSet::new("voc", "omega", omegas.to_vec(), &f.to_string(), Some(seed))?;
        c.push("train", tr)?;
        c.push("test", te)?;
        per_fold.push(c);
    }
    let mut mean = CurveSet::new("voc", "omega", omegas.to_vec(), "mean", Some(seed))?;
    mean.push("train", mean_train)?;
    mean.push("test", mean_test)?;
    Ok(VocResult {
        mean,
        per_fold,
        selections,
    })
}

/// `{0}` followed by `n` log-spaced costs from `lo` to `hi`.
pub fn default_omega_grid(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut grid = vec![0.0];
    if n == 1 {
        grid.push(lo);
    } else {
        let (a, b) = (lo.log10(), hi.log10());
        grid.extend((0..n).map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64)));
    }
    grid
}

/// Number of samples kept at fraction `f` of `n`: `ceil(f * n)`, at least
/// 1. Products within 1e-9 of an integer count as that integer.
pub fn kept_count(f: f64, n: usize) -> usize {
    let x = f * n as f64;
    let r = x.round();
    let k = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (k as usize).clamp(1, n)
}

/// Accuracy on the most confident `ceil(f * N)` samples for every fraction
/// `f`, and the trapezoidal area over the fraction range divided by its
/// width (1 for a classifier that is always right).
pub fn accuracy_rejection_curve(preds: &[ScoredPrediction], fractions: &[f64]) -> Result<(CurveSet, f64)> {
    if preds.is_empty() {
        return Err(Error::Input("accuracy-rejection curve of an empty set".into()));
    }
    if fractions.is_empty() || fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(Error::Input("fractions must lie in (0, 1]".into()));
    }
    let f = flags(preds)?;
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        f[b].0
            .total_cmp(&f[a].0)
            .then(preds[a].sample_id.cmp(&preds[b].sample_id))
    });
    let mut prefix = Vec::with_capacity(order.len() + 1);
    prefix.push(0usize);
    for &i in &order {
        prefix.push(prefix.last().unwrap() + usize::from(f[i].1));
    }
    let acc: Vec<f64> = fractions
        .iter()
        .map(|&fr| {
            let k = kept_count(fr, preds.len());
            prefix[k] as f64 / k as f64
        })
        .collect();
    let mut curve = CurveSet::new("accuracy-rejection", "fraction", fractions.to_vec(), "all", None)?;
    let area = trapezoid_area(fractions, &acc);
    curve.push("accuracy", acc)?;
    Ok((curve, area))
}

/// Trapezoidal area normalized by the x span; a single point returns its y.
pub fn trapezoid_area(x: &[f64], y: &[f64]) -> f64 {
    if x.len() == 1 {
        return y[0];
    }
    let raw: f64 = x
        .windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| (xs[1] - xs[0]) * (ys[0] + ys[1]) / 2.0)
        .sum();
    raw / (x[x.len() - 1] - x[0])
}

/// Evenly spaced fractions `1/n, 2/n, ..., 1`.
pub fn default_fraction_grid(n: usize) -> Vec<f64> {
    (1..=n).map(|i| i as f64 / n as f64).collect()
}

/// Per-class mean of profile rows `[N, L]`, giving `[K, L]`.
pub fn class_average_profiles(profiles: &Tensor, labels: &[usize], num_classes: usize) -> Result<Tensor> {
    let [n, l] = profiles.shape()[..] else {
        return Err(Error::dim("profiles must be [N, L]"));
    };
    if labels.len() != n {
        return Err(Error::dim(format!("{} labels for {n} profiles", labels.len())));
    }
    let mut sums = vec![0.0; num_classes * l];
    let mut counts = vec![0usize; num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::Input(format!("label {y} outside [0, {num_classes})")));
        }
        counts[y] += 1;
        sums[y * l..(y + 1) * l]
            .iter_mut()
            .zip(profiles.row(i))
            .for_each(|(s, v)| *s += v);
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Degenerate(format!("class {empty} has no samples")));
    }
    Tensor::new(
        vec![num_classes, l],
        sums.iter().enumerate().map(|(i, s)| s / counts[i / l] as f64).collect(),
    )
}

/// `H[i][j] = 1 - cos(avg_i, code_j)`.
pub fn code_match_heatmap(avg: &Tensor, book: &CodeBook) -> Result<Tensor> {
    let [k, l] = avg.shape()[..] else {
        return Err(Error::dim("average profiles must be [K, L]"));
    };
    if l != book.code_length() {
        return Err(Error::dim(format!("profiles of length {l} vs codes of length {}", book.code_length())));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut out = Vec::with_capacity(k * book.num_classes());
    for i in 0..k {
        let a = avg.row(i);
        let na = norm(a);
        if na == 0.0 {
            return Err(Error::Degenerate(format!("average profile {i} is zero")));
        }
        for j in 0..book.num_classes() {
            let c = book.code_f64(j);
            let nc = norm(&c);
            if nc == 0.0 {
                return Err(Error::Degenerate(format!("code {j} is all zeros")));
            }
            let dot: f64 = a.iter().zip(&c).map(|(x, y)| x * y).sum();
            out.push(1.0 - dot / (na * nc));
        }
    }
    Tensor::new(vec![k, book.num_classes()], out)
}
