//! Statistical properties of random Bernoulli codebooks.

use std::collections::BTreeSet;

use proptest::prelude::*;
use tac_core::codebook::{hamming, pairwise_stats, CodeBook};

#[test]
fn mean_hamming_distance_near_half_length() {
    let (k, l) = (10, 48);
    let mut means = Vec::new();
    for seed in 0..100 {
        let book = CodeBook::generate(k, l, seed).unwrap();
        let rows: BTreeSet<&[u8]> = (0..k).map(|i| book.code(i)).collect();
        assert_eq!(rows.len(), k, "seed {seed} repeats a code");
        let stats = pairwise_stats(&book);
        assert!(stats.mean >= 22.0 && stats.mean <= 26.0, "seed {seed}: mean {}", stats.mean);
        means.push(stats.mean);
    }
    // Averaged over books the mean pairwise distance concentrates on L/2.
    let grand = means.iter().sum::<f64>() / means.len() as f64;
    assert!((grand - 24.0).abs() < 0.5, "grand mean {grand}");
}

#[test]
fn bit_frequency_is_fair() {
    let ones: usize = (0..200)
        .map(|seed| CodeBook::generate(10, 64, seed).unwrap().bits().iter().map(|&b| b as usize).sum::<usize>())
        .sum();
    let total = 200.0 * 640.0;
    // Binomial standard deviation is sqrt(total) / 2, about 179 bits.
    assert!((ones as f64 - total / 2.0).abs() < 5.0 * total.sqrt() / 2.0, "{ones} ones of {total}");
}

proptest! {
    #[test]
    fn rows_distinct_and_stats_consistent(k in 2usize..12, l in 4usize..40, seed in any::<u64>()) {
        let book = CodeBook::generate(k, l, seed).unwrap();
        let stats = pairwise_stats(&book);
        let mut dists = Vec::new();
        for i in 0..k {
            for j in i + 1..k {
                dists.push(hamming(book.code(i), book.code(j)));
            }
        }
        prop_assert_eq!(stats.min, *dists.iter().min().unwrap());
        prop_assert_eq!(stats.max, *dists.iter().max().unwrap());
        prop_assert!(stats.min >= 1);
        let mean = dists.iter().sum::<usize>() as f64 / dists.len() as f64;
        prop_assert!((stats.mean - mean).abs() < 1e-12);
        prop_assert_eq!(CodeBook::generate(k, l, seed).unwrap(), book.clone());
        prop_assert_eq!(CodeBook::from_json(&book.to_json()).unwrap(), book);
    }
}
