use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use rand_distr::{Distribution, StandardNormal};

/// Isotropic Gaussian classes around well-separated centers.
///
/// Centers are `separation * q_k` where `q_1..q_K` come from Gram-Schmidt
/// on Gaussian draws (unit random directions once `K > dim`). The last
/// `far_classes` classes sit `far_scale` times further from the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub separation: f64,
    pub noise: f64,
    pub seed: u64,
    #[serde(default)]
    pub far_classes: usize,
    #[serde(default = "default_far_scale")]
    pub far_scale: f64,
}

fn default_far_scale() -> f64 {
    3.0
}

impl BlobSpec {
    pub fn new(num_classes: usize, dim: usize, per_class: usize, separation: f64, noise: f64, seed: u64) -> Self {
        Self {
            num_classes,
            dim,
            per_class,
            separation,
            noise,
            seed,
            far_classes: 0,
            far_scale: default_far_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.dim == 0 {
            return Err(Error::Input("blobs need at least 2 classes and 1 dimension".into()));
        }
        if !(self.separation > 0.0) || !(self.noise > 0.0) {
            return Err(Error::Input("blob separation and noise must be positive".into()));
        }
        if self.far_classes >= self.num_classes || !(self.far_scale > 0.0) {
            return Err(Error::Input("far classes must leave at least one regular class".into()));
        }
        Ok(())
    }
}

pub fn blob_centers(spec: &BlobSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let mut rng = SplitMix64::stream(spec.seed, "blob-centers");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
    for _ in 0..spec.num_classes {
        let raw: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut v = raw.clone();
        if basis.len() < spec.dim {
            for q in &basis {
                let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
            }
        } else {
            v = raw;
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        basis.push(v.into_iter().map(|a| a / norm).collect());
    }
    let first_far = spec.num_classes - spec.far_classes;
    Ok(basis
        .into_iter()
        .enumerate()
        .map(|(k, q)| {
            let s = spec.separation * if k >= first_far { spec.far_scale } else { 1.0 };
            q.into_iter().map(|a| a * s).collect()
        })
        .collect())
}

/// `per_class` samples of every class, class-major order.
pub fn synth_blobs(spec: &BlobSpec) -> Result<Dataset> {
    let centers = blob_centers(spec)?;
    let mut rng = SplitMix64::stream(spec.seed, "blob-samples");
    let mut inputs = Vec::with_capacity(spec.num_classes * spec.per_class * spec.dim);
    let mut labels = Vec::with_capacity(spec.num_classes * spec.per_class);
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            for &m in c {
                let z: f64 = StandardNormal.sample(&mut rng);
                inputs.push(m + spec.noise * z);
            }
            labels.push(k);
        }
    }
    Dataset::new(inputs, vec![spec.dim], labels, spec.num_classes, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let s = BlobSpec::new(4, 20, 10, 6.0, 1.0, 0);
        assert_eq!(synth_blobs(&s).unwrap(), synth_blobs(&s).unwrap());
    }

    #[test]
    fn vanishing_noise_collapses_to_centers() {
        let s = BlobSpec::new(3, 5, 4, 2.0, 1e-300, 9);
        let ds = synth_blobs(&s).unwrap();
        let centers = blob_centers(&s).unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.sample(i), centers[ds.labels()[i]].as_slice());
        }
    }

    #[test]
    fn centers_are_orthogonal_and_scaled() {
        let s = BlobSpec::new(4, 20, 1, 6.0, 1.0, 3);
        let c = blob_centers(&s).unwrap();
        for i in 0..4 {
            let n: f64 = c[i].iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!((n - 6.0).abs() < 1e-12);
            for j in 0..i {
                let dot: f64 = c[i].iter().zip(&c[j]).map(|(a, b)| a * b).sum();
                assert!(dot.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn well_separated_blobs_are_nearest_centroid_separable() {
        let s = BlobSpec::new(4, 20, 250, 10.0, 1.0, 0);
        let ds = synth_blobs(&s).unwrap();
        let centers = blob_centers(&s).unwrap();
        let correct = (0..ds.len())
            .filter(|&i| {
                let x = ds.sample(i);
                let best = (0..4)
                    .min_by(|&a, &b| {
                        let da: f64 = x.iter().zip(&centers[a]).map(|(p, q)| (p - q).powi(2)).sum();
                        let db: f64 = x.iter().zip(&centers[b]).map(|(p, q)| (p - q).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best == ds.labels()[i]
            })
            .count();
        assert_eq!(correct, ds.len());
    }

    #[test]
    fn invalid_specs() {
        assert!(synth_blobs(&BlobSpec::new(4, 2, 1, 0.0, 1.0, 0)).is_err());
        assert!(synth_blobs(&BlobSpec::new(4, 2, 1, 1.0, 0.0, 0)).is_err());
    }
}
