//! Stratified fold assignment, mini-batch construction, and feature-space
//! augmentation.

use std::collections::BTreeMap;

use super::{ClassId, DataError, Dataset, DomainId};
use crate::numerics::{Mat, RngStream};

/// A mini-batch of feature rows with aligned label and domain vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Mat,
    pub labels: Vec<ClassId>,
    pub domains: Vec<DomainId>,
}

impl Batch {
    pub fn from_indices(ds: &Dataset, indices: &[usize]) -> Batch {
        assert!(!indices.is_empty(), "batch must be non-empty");
        let mut features = Mat::zeros(indices.len(), ds.feature_dim());
        let mut labels = Vec::with_capacity(indices.len());
        let mut domains = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            let s = &ds.samples()[i];
            features.row_mut(row).copy_from_slice(&s.features);
            labels.push(s.class);
            domains.push(s.domain);
        }
        Batch { features, labels, domains }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Assignment of every sample index to one of `k` folds, stratified so the
/// per-(domain, class) counts of any two folds differ by at most one.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of: Vec<usize>,
}

impl FoldAssignment {
    pub fn fold_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    /// Everything outside `fold`.
    pub fn complement_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Stratified k-fold split.
///
/// Within each (domain, class) stratum the samples are shuffled and dealt
/// cyclically; a running fold cursor carries across strata so global fold
/// sizes also stay within one of each other.
pub fn stratified_kfold(ds: &Dataset, k: usize, seed: u64) -> Result<FoldAssignment, DataError> {
    assert!(k >= 2, "k must be at least 2");
    if ds.len() < k {
        return Err(DataError::TooFewSamples { have: ds.len(), need: k });
    }
    let mut strata: BTreeMap<(DomainId, ClassId), Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.samples().iter().enumerate() {
        strata.entry((s.domain, s.class)).or_default().push(i);
    }
    let mut rng = RngStream::new(seed);
    let mut fold_of = vec![0usize; ds.len()];
    let mut cursor = 0usize;
    for (_, indices) in strata.iter_mut() {
        rng.shuffle(indices);
        for &i in indices.iter() {
            fold_of[i] = cursor % k;
            cursor += 1;
        }
    }
    Ok(FoldAssignment { k, fold_of })
}

/// Batch construction mode for one training epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Seeded shuffle of all samples cut into consecutive batches; the last
    /// batch may be short. One epoch visits every sample exactly once.
    Standard,
    /// Round-robin over populated classes, drawing uniformly with
    /// replacement within each class. Epoch length is ceil(len / batch).
    ClassBalanced,
}

pub fn make_batches(
    ds: &Dataset,
    batch_size: usize,
    mode: SampleMode,
    seed: u64,
) -> Result<Vec<Batch>, DataError> {
    assert!(batch_size >= 1, "batch_size must be positive");
    if ds.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let mut rng = RngStream::new(seed);
    match mode {
        SampleMode::Standard => {
            let mut order: Vec<usize> = (0..ds.len()).collect();
            rng.shuffle(&mut order);
            Ok(order.chunks(batch_size).map(|chunk| Batch::from_indices(ds, chunk)).collect())
        }
        SampleMode::ClassBalanced => {
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
            for (i, s) in ds.samples().iter().enumerate() {
                by_class[s.class].push(i);
            }
            let populated: Vec<usize> =
                (0..ds.num_classes()).filter(|&c| !by_class[c].is_empty()).collect();
            if populated.is_empty() {
                return Err(DataError::EmptyDataset);
            }
            let num_batches = ds.len().div_ceil(batch_size);
            let mut batches = Vec::with_capacity(num_batches);
            let mut round_robin = 0usize;
            for _ in 0..num_batches {
                let mut picks = Vec::with_capacity(batch_size);
                for _ in 0..batch_size {
                    let class = populated[round_robin % populated.len()];
                    round_robin += 1;
                    let pool = &by_class[class];
                    picks.push(pool[rng.next_below(pool.len())]);
                }
                batches.push(Batch::from_indices(ds, &picks));
            }
            Ok(batches)
        }
    }
}

/// Gaussian jitter plus isotropic scaling in feature space.
///
/// Each row is mapped to `s * (x + jitter_sigma * eps)` with `s` uniform in
/// `[lo, hi]` per row and `eps` standard normal per coordinate (skipped
/// entirely when `jitter_sigma` is zero). Labels and domains pass through
/// untouched.
pub fn augment_features(batch: &Batch, jitter_sigma: f64, scale: (f64, f64), seed: u64) -> Batch {
    let (lo, hi) = scale;
    assert!(jitter_sigma >= 0.0, "jitter_sigma must be non-negative");
    assert!(0.0 < lo && lo <= hi, "scale range must satisfy 0 < lo <= hi");
    let mut rng = RngStream::new(seed);
    let mut features = batch.features.clone();
    for r in 0..features.rows() {
        let s = rng.next_range(lo, hi);
        let row = features.row_mut(r);
        if jitter_sigma > 0.0 {
            for v in row.iter_mut() {
                *v = s * (*v + jitter_sigma * rng.next_normal());
            }
        } else {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
    }
    Batch { features, labels: batch.labels.clone(), domains: batch.domains.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;

    fn toy_dataset(counts: &[(usize, usize, usize)]) -> Dataset {
        // (domain, class, n)
        let mut samples = Vec::new();
        for &(d, c, n) in counts {
            for i in 0..n {
                samples.push(Sample { domain: d, class: c, features: vec![i as f64, d as f64] });
            }
        }
        Dataset::from_samples(samples).unwrap()
    }

    #[test]
    fn kfold_exact_proportional_allocation() {
        let ds = toy_dataset(&[(0, 0, 80), (0, 1, 20)]);
        let fa = stratified_kfold(&ds, 5, 3).unwrap();
        for fold in 0..5 {
            let idx = fa.fold_indices(fold);
            let a = idx.iter().filter(|&&i| ds.samples()[i].class == 0).count();
            let b = idx.len() - a;
            assert_eq!(a, 16);
            assert_eq!(b, 4);
        }
    }

    #[test]
    fn kfold_pigeonhole_on_small_stratum() {
        let ds = toy_dataset(&[(0, 0, 7), (0, 1, 13)]);
        let fa = stratified_kfold(&ds, 5, 1).unwrap();
        for fold in 0..5 {
            let n = fa
                .fold_indices(fold)
                .iter()
                .filter(|&&i| ds.samples()[i].class == 0)
                .count();
            assert!((1..=2).contains(&n), "fold {fold} got {n} of the 7-sample stratum");
        }
    }

    #[test]
    fn kfold_seeds_change_permutation_not_counts() {
        let ds = toy_dataset(&[(0, 0, 23), (1, 0, 17), (1, 1, 11)]);
        let a = stratified_kfold(&ds, 4, 1).unwrap();
        let b = stratified_kfold(&ds, 4, 2).unwrap();
        assert_ne!(a.fold_of, b.fold_of);
        for fold in 0..4 {
            for d in 0..2 {
                for c in 0..2 {
                    let count = |fa: &FoldAssignment| {
                        fa.fold_indices(fold)
                            .iter()
                            .filter(|&&i| {
                                ds.samples()[i].domain == d && ds.samples()[i].class == c
                            })
                            .count()
                    };
                    assert_eq!(count(&a), count(&b));
                }
            }
        }
    }

    #[test]
    fn kfold_rejects_more_folds_than_samples() {
        let ds = toy_dataset(&[(0, 0, 3)]);
        let err = stratified_kfold(&ds, 5, 0).unwrap_err();
        assert!(matches!(err, DataError::TooFewSamples { have: 3, need: 5 }));
    }

    #[test]
    fn kfold_folds_partition_all_indices() {
        let ds = toy_dataset(&[(0, 0, 19), (0, 1, 6), (1, 2, 9)]);
        let fa = stratified_kfold(&ds, 3, 9).unwrap();
        let mut seen = vec![false; ds.len()];
        for fold in 0..3 {
            for i in fa.fold_indices(fold) {
                assert!(!seen[i], "index {i} in two folds");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        assert!(fa.fold_sizes().iter().all(|&s| s > 0));
    }

    #[test]
    fn standard_batches_partition_the_dataset() {
        let ds = toy_dataset(&[(0, 0, 6), (0, 1, 4)]);
        let batches = make_batches(&ds, 4, SampleMode::Standard, 5).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        // multiset of rows equals the dataset
        let mut seen: Vec<Vec<u64>> = Vec::new();
        for b in &batches {
            for r in 0..b.len() {
                seen.push(b.features.row(r).iter().map(|v| v.to_bits()).collect());
            }
        }
        seen.sort();
        let mut expect: Vec<Vec<u64>> = ds
            .samples()
            .iter()
            .map(|s| s.features.iter().map(|v| v.to_bits()).collect())
            .collect();
        expect.sort();
        assert_eq!(seen, expect);
    }

    #[test]
    fn class_balanced_batches_are_exactly_balanced() {
        let ds = toy_dataset(&[(0, 0, 30), (0, 1, 4), (0, 2, 2)]);
        let batches = make_batches(&ds, 12, SampleMode::ClassBalanced, 8).unwrap();
        assert_eq!(batches.len(), 3);
        for b in &batches {
            for c in 0..3 {
                assert_eq!(b.labels.iter().filter(|&&l| l == c).count(), 4);
            }
        }
    }

    #[test]
    fn class_balanced_equalizes_a_99_to_1_split() {
        let ds = toy_dataset(&[(0, 0, 99), (0, 1, 1)]);
        let batches = make_batches(&ds, 10, SampleMode::ClassBalanced, 4).unwrap();
        let total: usize = batches.iter().map(|b| b.len()).sum();
        let minority: usize =
            batches.iter().map(|b| b.labels.iter().filter(|&&l| l == 1).count()).sum();
        let freq = minority as f64 / total as f64;
        assert!((freq - 0.5).abs() <= 0.05, "minority frequency {freq}");
    }

    #[test]
    fn augment_identity_configuration() {
        let ds = toy_dataset(&[(0, 0, 3), (1, 1, 2)]);
        let batch = Batch::from_indices(&ds, &[0, 1, 2, 3, 4]);
        let out = augment_features(&batch, 0.0, (1.0, 1.0), 3);
        assert_eq!(out, batch);
    }

    #[test]
    fn augment_preserves_labels_and_domains() {
        let ds = toy_dataset(&[(0, 0, 3), (1, 1, 2)]);
        let batch = Batch::from_indices(&ds, &[0, 1, 2, 3, 4]);
        let out = augment_features(&batch, 0.3, (0.5, 2.0), 3);
        assert_eq!(out.labels, batch.labels);
        assert_eq!(out.domains, batch.domains);
        assert_ne!(out.features, batch.features);
    }

    #[test]
    fn augment_jitter_moment_check() {
        // fixed scale so the per-coordinate std of repeated augmentations of
        // one vector is exactly jitter_sigma
        let ds = toy_dataset(&[(0, 0, 1)]);
        let one = Batch::from_indices(&ds, &[0]);
        let reps = 10_000;
        let mut values = Vec::with_capacity(reps);
        for i in 0..reps {
            let out = augment_features(&one, 0.1, (1.0, 1.0), 1000 + i as u64);
            values.push(out.features.at(0, 0));
        }
        let mean = values.iter().sum::<f64>() / reps as f64;
        let var =
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (reps as f64 - 1.0);
        let std = var.sqrt();
        assert!((std - 0.1).abs() <= 0.005, "std {std}");
    }
}
