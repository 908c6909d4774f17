//! Batch samplers. Training batches are identity-balanced: P classes with K
//! instances each, so triplet mining and anchor pulls always see several
//! samples per class. Epochs are deterministic functions of (seed, epoch).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PKSpec {
    /// Classes per batch.
    pub p: usize,
    /// Instances per class.
    pub k: usize,
    pub seed: u64,
}

impl PKSpec {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }
}

/// One epoch of PK batches as index lists into `dataset.samples`. The epoch
/// is `ceil(C / P)` batches walking a seeded class permutation cyclically, so
/// every class appears at least once. Classes with at least K samples are
/// drawn without replacement; smaller classes contribute every sample and are
/// completed by replacement.
pub fn pk_epoch(dataset: &Dataset, spec: &PKSpec, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if spec.p < 2 || spec.k < 2 {
        return Err(Error::Config(format!(
            "PK sampling needs p >= 2 and k >= 2, got p={} k={}",
            spec.p, spec.k
        )));
    }
    let c = dataset.num_classes;
    if c < spec.p {
        return Err(Error::Config(format!(
            "batch wants {} distinct classes but the dataset has {c}",
            spec.p
        )));
    }
    let by_class = dataset.class_indices();
    if let Some(empty) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("class {empty} has no samples")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(epoch as u64);

    let mut perm: Vec<usize> = (0..c).collect();
    for i in (1..c).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }

    let num_batches = c.div_ceil(spec.p);
    let mut batches = Vec::with_capacity(num_batches);
    for b in 0..num_batches {
        let mut batch = Vec::with_capacity(spec.batch_size());
        for slot in 0..spec.p {
            let class = perm[(b * spec.p + slot) % c];
            let pool = &by_class[class];
            if pool.len() >= spec.k {
                // Partial Fisher-Yates: the first k slots are the draw.
                let mut idx = pool.clone();
                for i in 0..spec.k {
                    let j = rng.random_range(i..idx.len());
                    idx.swap(i, j);
                }
                batch.extend_from_slice(&idx[..spec.k]);
            } else {
                batch.extend_from_slice(pool);
                for _ in pool.len()..spec.k {
                    batch.push(pool[rng.random_range(0..pool.len())]);
                }
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Plain shuffled epoch: a seeded permutation of all indices chunked into
/// `batch_size` pieces; the final batch may be short.
pub fn shuffled_epoch(
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let n = dataset.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, LabeledSample, SplitTag, SyntheticSpec};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn toy_dataset(num_classes: usize, per_class: usize) -> Dataset {
        generate_synthetic(&SyntheticSpec {
            num_classes,
            input_dim: 3,
            per_class,
            cluster_spread: 1.0,
            center_spread: 2.0,
            noise_dims: 1,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn pk_epoch_shape_is_exact() {
        let d = toy_dataset(4, 4);
        let spec = PKSpec { p: 2, k: 2, seed: 0 };
        let batches = pk_epoch(&d, &spec, 0).unwrap();
        assert_eq!(batches.len(), 2, "ceil(4/2) batches");
        for batch in &batches {
            assert_eq!(batch.len(), 4);
            let classes: BTreeSet<usize> = batch.iter().map(|&i| d.samples[i].y).collect();
            assert_eq!(classes.len(), 2, "two distinct classes per batch");
            for &cls in &classes {
                let count = batch.iter().filter(|&&i| d.samples[i].y == cls).count();
                assert_eq!(count, 2, "two instances per class");
            }
        }
    }

    #[test]
    fn every_class_appears_each_epoch() {
        let d = toy_dataset(7, 5);
        let spec = PKSpec { p: 3, k: 2, seed: 1 };
        let batches = pk_epoch(&d, &spec, 3).unwrap();
        assert_eq!(batches.len(), 3, "ceil(7/3)");
        let seen: BTreeSet<usize> = batches
            .iter()
            .flatten()
            .map(|&i| d.samples[i].y)
            .collect();
        assert_eq!(seen, (0..7).collect());
    }

    #[test]
    fn thin_class_is_completed_by_replacement() {
        let mut d = toy_dataset(2, 4);
        // Cut class 0 down to a single sample.
        let keep = d
            .samples
            .iter()
            .position(|s| s.y == 0)
            .expect("class 0 exists");
        let kept = d.samples[keep].clone();
        d.samples.retain(|s| s.y != 0);
        d.samples.insert(0, kept);
        let spec = PKSpec { p: 2, k: 3, seed: 2 };
        let batches = pk_epoch(&d, &spec, 0).unwrap();
        for batch in &batches {
            let class0: Vec<usize> = batch
                .iter()
                .copied()
                .filter(|&i| d.samples[i].y == 0)
                .collect();
            assert_eq!(class0, vec![0, 0, 0], "the single sample repeats k times");
        }
    }

    #[test]
    fn rich_classes_are_drawn_without_replacement() {
        let d = toy_dataset(4, 6);
        let spec = PKSpec { p: 2, k: 4, seed: 3 };
        for batch in pk_epoch(&d, &spec, 0).unwrap() {
            let unique: BTreeSet<usize> = batch.iter().copied().collect();
            assert_eq!(unique.len(), batch.len(), "no repeats when k <= class size");
        }
    }

    #[test]
    fn pk_is_deterministic_per_epoch() {
        let d = toy_dataset(5, 4);
        let spec = PKSpec { p: 2, k: 2, seed: 9 };
        assert_eq!(pk_epoch(&d, &spec, 4).unwrap(), pk_epoch(&d, &spec, 4).unwrap());
        assert_ne!(
            pk_epoch(&d, &spec, 4).unwrap(),
            pk_epoch(&d, &spec, 5).unwrap(),
            "different epochs should reshuffle"
        );
    }

    #[test]
    fn pk_rejects_bad_specs() {
        let d = toy_dataset(3, 4);
        assert!(pk_epoch(&d, &PKSpec { p: 1, k: 2, seed: 0 }, 0).is_err());
        assert!(pk_epoch(&d, &PKSpec { p: 2, k: 1, seed: 0 }, 0).is_err());
        assert!(pk_epoch(&d, &PKSpec { p: 4, k: 2, seed: 0 }, 0).is_err(), "p > C");
    }

    #[test]
    fn pk_rejects_empty_class() {
        let d = Dataset {
            samples: vec![LabeledSample {
                x: vec![0.0],
                y: 0,
                group: None,
            }],
            num_classes: 2,
            input_dim: 1,
            split_tag: SplitTag::Train,
        };
        let err = pk_epoch(&d, &PKSpec { p: 2, k: 2, seed: 0 }, 0).unwrap_err();
        assert!(err.to_string().contains("class 1"), "{err}");
    }

    #[test]
    fn shuffled_epoch_partitions_the_dataset() {
        let d = toy_dataset(3, 5);
        let batches = shuffled_epoch(&d, 4, 7, 2).unwrap();
        assert_eq!(batches.len(), 4, "ceil(15/4)");
        assert_eq!(batches.last().unwrap().len(), 3, "short tail batch");
        let mut all: Vec<usize> = batches.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..15).collect::<Vec<_>>());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn pk_batches_are_always_balanced(
            c in 2usize..8,
            per_class in 2usize..6,
            p in 2usize..5,
            k in 2usize..5,
            seed in 0u64..500,
            epoch in 0usize..4,
        ) {
            prop_assume!(p <= c);
            let d = toy_dataset(c, per_class);
            let spec = PKSpec { p, k, seed };
            let batches = pk_epoch(&d, &spec, epoch).unwrap();
            prop_assert_eq!(batches.len(), c.div_ceil(p));
            let mut seen = BTreeSet::new();
            for batch in &batches {
                prop_assert_eq!(batch.len(), p * k);
                let mut counts = std::collections::BTreeMap::new();
                for &i in batch {
                    *counts.entry(d.samples[i].y).or_insert(0usize) += 1;
                    seen.insert(d.samples[i].y);
                }
                prop_assert_eq!(counts.len(), p);
                for (_, n) in counts {
                    prop_assert_eq!(n, k);
                }
            }
            prop_assert_eq!(seen.len(), c, "all classes covered");
        }
    }
}
