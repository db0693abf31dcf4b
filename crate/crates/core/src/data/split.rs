use std::collections::BTreeSet;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// The last this-many MNIST training images form the validation split.
pub const MNIST_VAL_COUNT: usize = 5_000;

pub fn mnist_train_val(ds: &Dataset) -> Result<(Dataset, Dataset)> {
    if ds.len() <= MNIST_VAL_COUNT {
        return Err(Error::Input(format!("{} training images, need more than {MNIST_VAL_COUNT}", ds.len())));
    }
    let cut = ds.len() - MNIST_VAL_COUNT;
    let train: Vec<usize> = (0..cut).collect();
    let val: Vec<usize> = (cut..ds.len()).collect();
    Ok((ds.subset(&train, Split::Train), ds.subset(&val, Split::Val)))
}

/// Seeded shuffle, then the last `test_count` samples become the second part.
pub fn train_test_split(ds: &Dataset, test_count: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if test_count >= ds.len() {
        return Err(Error::Input(format!("cannot hold out {test_count} of {} samples", ds.len())));
    }
    let perm = SplitMix64::stream(seed, "split").permutation(ds.len());
    let cut = ds.len() - test_count;
    Ok((ds.subset(&perm[..cut], Split::Train), ds.subset(&perm[cut..], Split::Test)))
}

/// Dense re-indexing of the classes that remain after a holdout.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LabelMap {
    /// `kept[new] = original`.
    pub kept: Vec<usize>,
    pub held_out: Vec<usize>,
}

impl LabelMap {
    pub fn new(num_classes: usize, holdout: &BTreeSet<usize>) -> Result<Self> {
        if let Some(&bad) = holdout.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Input(format!("holdout class {bad} outside [0, {num_classes})")));
        }
        let kept: Vec<usize> = (0..num_classes).filter(|c| !holdout.contains(c)).collect();
        if kept.len() < 2 {
            return Err(Error::Degenerate(format!(
                "holding out {} of {num_classes} classes leaves fewer than 2",
                holdout.len()
            )));
        }
        Ok(Self {
            kept,
            held_out: holdout.iter().copied().collect(),
        })
    }

    pub fn num_kept(&self) -> usize {
        self.kept.len()
    }

    pub fn to_new(&self, original: usize) -> Option<usize> {
        self.kept.iter().position(|&c| c == original)
    }

    pub fn to_original(&self, new: usize) -> usize {
        self.kept[new]
    }

    /// In-distribution part (re-indexed) and held-out part (original labels).
    pub fn partition(&self, ds: &Dataset, split: Split) -> Result<(Dataset, Dataset)> {
        let (mut ind, mut ood) = (Vec::new(), Vec::new());
        for (i, &y) in ds.labels().iter().enumerate() {
            if self.held_out.contains(&y) {
                ood.push(i);
            } else {
                ind.push(i);
            }
        }
        let in_dist = ds.subset(&ind, split);
        let labels = in_dist.labels().iter().map(|&y| self.to_new(y).expect("kept class")).collect();
        let in_dist = in_dist.with_labels(labels, self.num_kept())?;
        Ok((in_dist, ds.subset(&ood, Split::Ood)))
    }
}

#[derive(Debug, Clone)]
pub struct HoldoutSplit {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub ood: Dataset,
    pub map: LabelMap,
}

/// Removes `holdout` classes from the training data, carves a seeded
/// validation set of `val_count` samples out of what remains, and turns
/// the held-out classes of the test data into the OOD pool.
pub fn holdout_split(
    train: &Dataset,
    test: &Dataset,
    holdout: &BTreeSet<usize>,
    val_count: usize,
    seed: u64,
) -> Result<HoldoutSplit> {
    let map = LabelMap::new(train.num_classes(), holdout)?;
    let (train_in, _) = map.partition(train, Split::Train)?;
    let (test_in, ood) = map.partition(test, Split::Test)?;
    let (train, val) = if val_count == 0 {
        let empty = train_in.subset(&[], Split::Val);
        (train_in, empty)
    } else {
        let (t, mut v) = train_test_split(&train_in, val_count, seed)?;
        v.split = Split::Val;
        (t, v)
    };
    Ok(HoldoutSplit {
        train,
        val,
        test: test_in,
        ood,
        map,
    })
}

/// Index batches of one epoch; the shuffle key is `seed ^ epoch`. The last
/// batch may be short.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let perm = SplitMix64::stream(seed ^ epoch, "batches").permutation(n);
    perm.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(labels: Vec<usize>, k: usize) -> Dataset {
        let n = labels.len();
        Dataset::new((0..n).map(|i| i as f64).collect(), vec![1], labels, k, Split::Train).unwrap()
    }

    #[test]
    fn batches_partition() {
        let b = batches(10, 3, 5, 1);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, batches(10, 3, 5, 1));
        assert_ne!(b, batches(10, 3, 5, 2));
        assert_eq!(batches(4, 100, 0, 0).len(), 1);
    }

    #[test]
    fn empty_holdout_is_identity() {
        let d = ds(vec![0, 1, 2, 1, 0], 3);
        let s = holdout_split(&d, &d, &BTreeSet::new(), 0, 0).unwrap();
        assert_eq!(s.train.labels(), d.labels());
        assert!(s.ood.is_empty());
        assert_eq!(s.map.kept, vec![0, 1, 2]);
    }

    #[test]
    fn mnist_style_holdout() {
        // digits 8 and 9 (the last two of ten classes)
        let d = ds((0..40).map(|i| i % 10).collect(), 10);
        let hold: BTreeSet<usize> = [8, 9].into();
        let s = holdout_split(&d, &d, &hold, 4, 1).unwrap();
        assert_eq!(s.map.num_kept(), 8);
        assert!(s.ood.labels().iter().all(|y| hold.contains(y)));
        assert_eq!(s.ood.len(), 8);
        assert_eq!(s.train.len() + s.val.len(), 32);
        assert!(s.train.labels().iter().chain(s.val.labels()).all(|&y| y < 8));
        // round trip through the mapping recovers the original labels
        let (test_in, _) = s.map.partition(&d, Split::Test).unwrap();
        let originals: Vec<usize> = d.labels().iter().copied().filter(|y| !hold.contains(y)).collect();
        let back: Vec<usize> = test_in.labels().iter().map(|&y| s.map.to_original(y)).collect();
        assert_eq!(back, originals);
    }

    #[test]
    fn holdout_everything_fails() {
        let d = ds(vec![0, 1], 2);
        assert!(matches!(
            holdout_split(&d, &d, &[0].into(), 0, 0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn splits_are_disjoint() {
        let d = ds((0..50).map(|i| i % 5).collect(), 5);
        let (a, b) = train_test_split(&d, 10, 3).unwrap();
        let mut ids: Vec<u64> = a.inputs().iter().chain(b.inputs()).map(|x| *x as u64).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 50);
    }
}
