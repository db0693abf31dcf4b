//! Training objectives and Mixup with codes.
//!
//! - `l_bin`: mean per-coordinate binary cross-entropy between `sigmoid(A)`
//!   and the target code, evaluated as `softplus(A) - t*A`.
//! - `l_ce`: cross-entropy of the categorical distribution
//!   `softmax(-D(A, C_k) / tau)` over classes.
//! - combined: `alpha * l_bin + beta * l_ce`.

use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ReduceMode, Tensor, Var};
use crate::codebook::{CodeBook, DistanceMetric};
use crate::error::{Error, Result};
use crate::profile::ProfileTransform;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub metric: DistanceMetric,
    /// Beta(c, c) concentration for Mixup; 0 disables it.
    pub mixup: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 10.0,
            tau: 1.0,
            metric: DistanceMetric::L1,
            mixup: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return Err(Error::Input(format!(
                "loss weights alpha={} beta={} must be nonnegative with a positive sum",
                self.alpha, self.beta
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Input(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.mixup >= 0.0) {
            return Err(Error::Input(format!("mixup concentration must be >= 0, got {}", self.mixup)));
        }
        if self.beta > 0.0 && !self.metric.is_differentiable() {
            return Err(Error::UnsupportedMetric(self.metric.to_string()));
        }
        Ok(())
    }
}

/// Per-sample class weights `[N×K]` and target codes `[N×L]`.
///
/// Hard labels give one-hot weights and the class codes; Mixup gives the
/// interpolated versions of both.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub weights: Tensor,
    pub codes: Tensor,
}

impl Targets {
    pub fn from_labels(labels: &[usize], book: &CodeBook) -> Result<Self> {
        let k = book.num_classes();
        let l = book.code_length();
        if labels.is_empty() {
            return Err(Error::Input("empty label batch".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Input(format!("label {bad} outside [0, {k})")));
        }
        let weights = Tensor::from_fn(&[labels.len(), k], |i| (labels[i / k] == i % k) as u8 as f64);
        let codes = Tensor::from_fn(&[labels.len(), l], |i| book.code(labels[i / l])[i % l] as f64);
        Ok(Self { weights, codes })
    }

    pub fn len(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Tensor> {
    Tensor::new(
        vec![labels.len(), num_classes],
        labels
            .iter()
            .flat_map(|&y| (0..num_classes).map(move |k| (k == y) as u8 as f64))
            .collect(),
    )
}

/// Binary cross-entropy of raw profiles `[N×L]` against targets in [0, 1].
pub fn l_bin(g: &mut Graph, profiles: Var, targets: &Tensor) -> Result<Var> {
    if g.shape(profiles) != targets.shape() {
        return Err(Error::dim(format!(
            "profiles {:?} vs targets {:?}",
            g.shape(profiles),
            targets.shape()
        )));
    }
    let sp = g.softplus(profiles);
    let t = g.constant(targets.clone());
    let ta = g.mul(t, profiles)?;
    let per = g.sub(sp, ta)?;
    Ok(g.mean_all(per))
}

/// `[N×K]` distances between points `[N×L]` and codes `[K×L]`.
pub fn distance_matrix(g: &mut Graph, points: Var, codes: &Tensor, metric: DistanceMetric) -> Result<Var> {
    let [n, l] = g.shape(points)[..] else {
        return Err(Error::dim("distance_matrix expects [N, L] points"));
    };
    let [k, cl] = codes.shape()[..] else {
        return Err(Error::dim("distance_matrix expects [K, L] codes"));
    };
    if l != cl {
        return Err(Error::dim(format!("profile length {l} vs code length {cl}")));
    }
    match metric {
        DistanceMetric::L1 | DistanceMetric::L2 => {
            let p = g.reshape(points, &[n, 1, l])?;
            let c = g.constant(codes.reshape(&[1, k, l])?);
            let diff = g.sub(p, c)?;
            if metric == DistanceMetric::L1 {
                let a = g.abs(diff);
                g.reduce(a, &[2], ReduceMode::Sum)
            } else {
                let sq = g.square(diff);
                let s = g.reduce(sq, &[2], ReduceMode::Sum)?;
                Ok(g.sqrt(s))
            }
        }
        DistanceMetric::Cosine => {
            let code_norms: Vec<f64> = (0..k)
                .map(|r| codes.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            let point_zero = (0..n).any(|r| g.value(points).row(r).iter().all(|&v| v == 0.0));
            if point_zero || code_norms.contains(&0.0) {
                return Err(Error::Degenerate("cosine distance of a zero vector".into()));
            }
            let ct = g.constant(codes.transpose()?);
            let dots = g.matmul(points, ct)?;
            let sq = g.square(points);
            let pn = g.reduce(sq, &[1], ReduceMode::Sum)?;
            let pn = g.sqrt(pn);
            let pn = g.reshape(pn, &[n, 1])?;
            let cn = g.constant(Tensor::new(vec![1, k], code_norms)?);
            let denom = g.mul(pn, cn)?;
            let cos = g.div(dots, denom)?;
            let neg = g.neg(cos);
            Ok(g.add_scalar(neg, 1.0))
        }
        other => Err(Error::UnsupportedMetric(other.to_string())),
    }
}

/// `-(1/N) Σ_i Σ_k w_ik log softmax(-D_i / tau)_k` from a distance matrix.
pub fn ce_from_distances(g: &mut Graph, distances: Var, weights: &Tensor, tau: f64) -> Result<Var> {
    if g.shape(distances) != weights.shape() {
        return Err(Error::dim(format!(
            "distances {:?} vs class weights {:?}",
            g.shape(distances),
            weights.shape()
        )));
    }
    let n = weights.shape()[0] as f64;
    let logits = g.scale(distances, -1.0 / tau);
    let lsm = g.log_softmax(logits, 1)?;
    let w = g.constant(weights.clone());
    let picked = g.mul(lsm, w)?;
    let total = g.sum_all(picked);
    Ok(g.scale(total, -1.0 / n))
}

/// Distance-softmax cross-entropy. `points` are profiles already mapped
/// into code space (see [`ProfileTransform`]).
pub fn l_ce(g: &mut Graph, points: Var, book: &CodeBook, weights: &Tensor, config: &LossConfig) -> Result<Var> {
    if !config.metric.is_differentiable() {
        return Err(Error::UnsupportedMetric(config.metric.to_string()));
    }
    let codes = codebook_tensor(book);
    let d = distance_matrix(g, points, &codes, config.metric)?;
    ce_from_distances(g, d, weights, config.tau)
}

pub fn codebook_tensor(book: &CodeBook) -> Tensor {
    Tensor::new(
        vec![book.num_classes(), book.code_length()],
        book.bits().iter().map(|&b| b as f64).collect(),
    )
    .expect("codebook has positive extents")
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub bin: Var,
    pub ce: Var,
}

/// `alpha * l_bin(A, codes) + beta * l_ce(transform(A), weights)`.
pub fn combined_loss(
    g: &mut Graph,
    profiles: Var,
    book: &CodeBook,
    targets: &Targets,
    config: &LossConfig,
    transform: ProfileTransform,
) -> Result<LossParts> {
    config.validate()?;
    let bin = l_bin(g, profiles, &targets.codes)?;
    let points = transform.apply(g, profiles);
    let ce = l_ce(g, points, book, &targets.weights, config)?;
    let a = g.scale(bin, config.alpha);
    let b = g.scale(ce, config.beta);
    let total = g.add(a, b)?;
    Ok(LossParts { total, bin, ce })
}

// ------------------------------------------------------------------ mixup

#[derive(Debug, Clone, PartialEq)]
pub struct MixupBatch {
    pub inputs: Tensor,
    pub labels: Tensor,
    pub codes: Tensor,
    pub factors: Vec<f64>,
    pub permutation: Vec<usize>,
}

impl MixupBatch {
    pub fn targets(&self) -> Targets {
        Targets {
            weights: self.labels.clone(),
            codes: self.codes.clone(),
        }
    }
}

fn mix_rows(x: &Tensor, perm: &[usize], factors: &[f64]) -> Result<Tensor> {
    let partner = x.select_rows(perm)?;
    let w = x.len() / x.shape()[0];
    Ok(Tensor::from_fn(x.shape(), |i| {
        let t = factors[i / w];
        t * x.data()[i] + (1.0 - t) * partner.data()[i]
    }))
}

/// Row `i` becomes `t_i * row_i + (1 - t_i) * row_{perm[i]}` in all three tensors.
pub fn mixup_with(
    inputs: &Tensor,
    labels: &Tensor,
    codes: &Tensor,
    permutation: &[usize],
    factors: &[f64],
) -> Result<MixupBatch> {
    let n = inputs.shape()[0];
    if labels.shape()[0] != n || codes.shape()[0] != n || permutation.len() != n || factors.len() != n {
        return Err(Error::dim("mixup operands disagree on batch size"));
    }
    Ok(MixupBatch {
        inputs: mix_rows(inputs, permutation, factors)?,
        labels: mix_rows(labels, permutation, factors)?,
        codes: mix_rows(codes, permutation, factors)?,
        factors: factors.to_vec(),
        permutation: permutation.to_vec(),
    })
}

/// Draws a permutation, then one Beta(c, c) factor per pair.
pub fn mixup_batch(
    inputs: &Tensor,
    labels: &Tensor,
    codes: &Tensor,
    concentration: f64,
    rng: &mut SplitMix64,
) -> Result<MixupBatch> {
    let n = inputs.shape()[0];
    if n < 2 {
        return Err(Error::Degenerate(format!("mixup needs at least 2 samples, got {n}")));
    }
    let permutation = rng.permutation(n);
    let factors = beta_draws(concentration, n, rng)?;
    mixup_with(inputs, labels, codes, &permutation, &factors)
}

pub fn beta_draws(concentration: f64, n: usize, rng: &mut SplitMix64) -> Result<Vec<f64>> {
    let beta = Beta::new(concentration, concentration)
        .map_err(|e| Error::Input(format!("invalid mixup concentration {concentration}: {e}")))?;
    Ok((0..n).map(|_| beta.sample(rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, sigmoid};

    fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut r = SplitMix64::new(seed);
        Tensor::from_fn(shape, |_| r.uniform(lo, hi))
    }

    fn value(f: impl FnOnce(&mut Graph) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g).unwrap();
        g.value(v).item()
    }

    #[test]
    fn l_bin_limits() {
        let book = CodeBook::generate(3, 8, 1).unwrap();
        let t = Targets::from_labels(&[0, 2], &book).unwrap();
        let a = t.codes.map(|c| if c == 1.0 { 20.0 } else { -20.0 });
        let v = value(|g| {
            let p = g.constant(a);
            l_bin(g, p, &t.codes)
        });
        assert!((0.0..1e-8).contains(&v));
        let v = value(|g| {
            let p = g.constant(Tensor::zeros(&[2, 8]));
            l_bin(g, p, &t.codes)
        });
        assert_eq!(v, std::f64::consts::LN_2);
    }

    #[test]
    fn l_bin_matches_naive_formula() {
        let a = random(&[4, 6], 3, -4.0, 4.0);
        let t = random(&[4, 6], 4, 0.0, 1.0);
        let v = value(|g| {
            let p = g.constant(a.clone());
            l_bin(g, p, &t)
        });
        let naive: f64 = a
            .data()
            .iter()
            .zip(t.data())
            .map(|(&x, &c)| -(c * sigmoid(x).ln() + (1.0 - c) * (1.0 - sigmoid(x)).ln()))
            .sum::<f64>()
            / 24.0;
        assert!((v - naive).abs() < 1e-10);
    }

    #[test]
    fn l_ce_uniform_and_limit() {
        let w = one_hot(&[1, 0], 4).unwrap();
        let v = value(|g| {
            let d = g.constant(Tensor::full(&[2, 4], 3.7));
            ce_from_distances(g, d, &w, 1.0)
        });
        assert!((v - 4f64.ln()).abs() < 1e-15);
        let far = Tensor::from_fn(&[2, 4], |i| if i == 1 || i == 4 { 0.0 } else { 1e6 });
        let v = value(|g| {
            let d = g.constant(far);
            ce_from_distances(g, d, &w, 1.0)
        });
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn l_ce_matches_naive_softmax() {
        let book = CodeBook::generate(5, 10, 9).unwrap();
        let a = random(&[6, 10], 10, 0.0, 1.0);
        let labels = [0, 4, 2, 2, 1, 3];
        let cfg = LossConfig::default();
        let w = one_hot(&labels, 5).unwrap();
        let v = value(|g| {
            let p = g.constant(a.clone());
            l_ce(g, p, &book, &w, &cfg)
        });
        let mut naive = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let d: Vec<f64> = (0..5)
                .map(|k| crate::codebook::distance(a.row(i), &book.code_f64(k), DistanceMetric::L1).unwrap())
                .collect();
            let z: f64 = d.iter().map(|x| (-x).exp()).sum();
            naive -= ((-d[y]).exp() / z).ln();
        }
        naive /= 6.0;
        assert!((v - naive).abs() < 1e-10);
    }

    #[test]
    fn l_ce_rejects_non_differentiable_metrics() {
        let book = CodeBook::generate(3, 4, 0).unwrap();
        let w = one_hot(&[0], 3).unwrap();
        for m in [DistanceMetric::L0, DistanceMetric::Linf] {
            let cfg = LossConfig { metric: m, ..LossConfig::default() };
            let mut g = Graph::new();
            let p = g.constant(Tensor::ones(&[1, 4]));
            assert!(matches!(l_ce(&mut g, p, &book, &w, &cfg), Err(Error::UnsupportedMetric(_))));
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn l_ce_decreases_with_correct_distance() {
        let w = one_hot(&[0], 3).unwrap();
        let mut last = f64::INFINITY;
        for d0 in [5.0, 3.0, 1.0, 0.5, 0.0] {
            let v = value(|g| {
                let d = g.constant(Tensor::new(vec![1, 3], vec![d0, 2.0, 4.0]).unwrap());
                ce_from_distances(g, d, &w, 1.0)
            });
            assert!(v < last && v >= 0.0);
            last = v;
        }
    }

    #[test]
    fn combined_is_weighted_sum() {
        let book = CodeBook::generate(4, 12, 2).unwrap();
        let a = random(&[5, 12], 7, -2.0, 2.0);
        let t = Targets::from_labels(&[0, 1, 2, 3, 1], &book).unwrap();
        for (alpha, beta) in [(1.0, 10.0), (0.0, 2.0), (3.0, 0.0)] {
            let cfg = LossConfig { alpha, beta, ..LossConfig::default() };
            let mut g = Graph::new();
            let p = g.constant(a.clone());
            let parts = combined_loss(&mut g, p, &book, &t, &cfg, ProfileTransform::Sigmoid).unwrap();
            let (tot, b, c) = (g.value(parts.total).item(), g.value(parts.bin).item(), g.value(parts.ce).item());
            assert!((tot - (alpha * b + beta * c)).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_minimum() {
        // sigmoid(A) = code (in the limit) minimizes both components
        let book = CodeBook::generate(4, 16, 5).unwrap();
        let labels = [0, 1, 2, 3];
        let t = Targets::from_labels(&labels, &book).unwrap();
        let a = t.codes.map(|c| if c == 1.0 { 40.0 } else { -40.0 });
        let cfg = LossConfig { tau: 0.05, ..LossConfig::default() };
        let mut g = Graph::new();
        let p = g.constant(a);
        let parts = combined_loss(&mut g, p, &book, &t, &cfg, ProfileTransform::Sigmoid).unwrap();
        assert!(g.value(parts.bin).item() < 1e-15);
        assert!(g.value(parts.ce).item() < 1e-8);
    }

    #[test]
    fn gradients_for_all_trainable_metrics() {
        let book = CodeBook::generate(4, 6, 3).unwrap();
        let labels = [1, 3, 0];
        for metric in [DistanceMetric::L1, DistanceMetric::L2, DistanceMetric::Cosine] {
            for transform in [ProfileTransform::Sigmoid, ProfileTransform::Raw] {
                let cfg = LossConfig { metric, ..LossConfig::default() };
                // keep raw points away from L1 kinks at 0 and 1
                let a = random(&[3, 6], 21, 0.1, 0.9).map(|x| if transform == ProfileTransform::Raw { x } else { 4.0 * x - 2.0 });
                let t = Targets::from_labels(&labels, &book).unwrap();
                let r = gradcheck(
                    |g, v| Ok(combined_loss(g, v, &book, &t, &cfg, transform)?.total),
                    &a,
                    1e-5,
                    1e-4,
                )
                .unwrap();
                assert!(r.passed(), "{metric:?} {transform:?}: {}", r.max_rel_error);
            }
        }
    }

    #[test]
    fn mixup_endpoints_and_errors() {
        let x = random(&[4, 3], 1, -1.0, 1.0);
        let y = one_hot(&[0, 1, 2, 1], 3).unwrap();
        let c = random(&[4, 5], 2, 0.0, 1.0);
        let perm = [2, 0, 3, 1];
        let m = mixup_with(&x, &y, &c, &perm, &[1.0; 4]).unwrap();
        assert_eq!((m.inputs, m.labels, m.codes), (x.clone(), y.clone(), c.clone()));
        let m = mixup_with(&x, &y, &c, &perm, &[0.0; 4]).unwrap();
        assert_eq!(m.inputs, x.select_rows(&perm).unwrap());
        assert_eq!(m.codes, c.select_rows(&perm).unwrap());

        let one = random(&[1, 3], 1, 0.0, 1.0);
        let mut rng = SplitMix64::new(0);
        assert!(matches!(
            mixup_batch(&one, &one_hot(&[0], 2).unwrap(), &one, 0.2, &mut rng),
            Err(Error::Degenerate(_))
        ));
        assert!(mixup_batch(&x, &y, &c, 0.0, &mut rng).is_err());
    }

    #[test]
    fn mixup_replay() {
        let x = random(&[6, 2, 2], 3, -1.0, 1.0);
        let y = one_hot(&[0, 1, 2, 0, 1, 2], 3).unwrap();
        let c = random(&[6, 8], 4, 0.0, 1.0);
        let m = mixup_batch(&x, &y, &c, 0.2, &mut SplitMix64::new(42)).unwrap();

        // replay the same draws by hand
        let mut rng = SplitMix64::new(42);
        let perm = rng.permutation(6);
        let beta = Beta::new(0.2, 0.2).unwrap();
        let ts: Vec<f64> = (0..6).map(|_| beta.sample(&mut rng)).collect();
        assert_eq!(m.permutation, perm);
        assert_eq!(m.factors, ts);
        for i in 0..6 {
            for j in 0..4 {
                let e = ts[i] * x.data()[i * 4 + j] + (1.0 - ts[i]) * x.data()[perm[i] * 4 + j];
                assert_eq!(m.inputs.data()[i * 4 + j], e);
            }
            for j in 0..8 {
                let e = ts[i] * c.data()[i * 8 + j] + (1.0 - ts[i]) * c.data()[perm[i] * 8 + j];
                assert_eq!(m.codes.data()[i * 8 + j], e);
            }
            let s: f64 = m.labels.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn large_concentration_centers_factors() {
        let draws = beta_draws(1e6, 10_000, &mut SplitMix64::new(8)).unwrap();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.5).abs() < 0.01);
    }

    #[test]
    fn mixup_weighted_ce_is_convex_combination() {
        let book = CodeBook::generate(3, 6, 0).unwrap();
        let a = random(&[2, 6], 5, 0.0, 1.0);
        let cfg = LossConfig::default();
        let ce = |w: &Tensor| {
            value(|g| {
                let p = g.constant(a.clone());
                l_ce(g, p, &book, w, &cfg)
            })
        };
        let wa = one_hot(&[0, 1], 3).unwrap();
        let wb = one_hot(&[2, 2], 3).unwrap();
        let t = 0.3;
        let mixed = wa.zip_map(&wb, |x, y| t * x + (1.0 - t) * y);
        assert!((ce(&mixed) - (t * ce(&wa) + (1.0 - t) * ce(&wb))).abs() < 1e-12);
    }
}
