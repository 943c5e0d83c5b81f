//! Task sampling strategies over the unlabeled pool.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    LeastConfidence,
    Margin,
    Entropy,
    Random { seed: u64 },
}

/// Shannon entropy in bits, with `0 · log 0 = 0`.
pub fn entropy_bits(confidences: &BTreeMap<String, f64>) -> f64 {
    confidences
        .values()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.log2())
        .sum()
}

fn max_confidence(c: &BTreeMap<String, f64>) -> f64 {
    c.values().copied().fold(0.0, f64::max)
}

fn margin(c: &BTreeMap<String, f64>) -> f64 {
    let mut v: Vec<f64> = c.values().copied().collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v.first().copied().unwrap_or(0.0) - v.get(1).copied().unwrap_or(0.0)
}

/// Picks up to `batch_size` image ids from the pool. Uncertainty strategies rank
/// by the given key and break ties by image id; `Random` shuffles the id-sorted
/// pool with its seed. Images without confidences count as maximally uncertain.
pub fn sample_next(
    strategy: SamplingStrategy,
    pool: &[(String, BTreeMap<String, f64>)],
    batch_size: usize,
) -> Result<Vec<String>> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let mut seen = BTreeSet::new();
    let mut items: Vec<(&String, f64)> = Vec::with_capacity(pool.len());
    for (id, conf) in pool {
        if !seen.insert(id) {
            continue;
        }
        let key = match strategy {
            SamplingStrategy::LeastConfidence => max_confidence(conf),
            SamplingStrategy::Margin => margin(conf),
            // descending entropy == ascending negative entropy
            SamplingStrategy::Entropy => {
                if conf.is_empty() {
                    f64::NEG_INFINITY
                } else {
                    -entropy_bits(conf)
                }
            }
            SamplingStrategy::Random { .. } => 0.0,
        };
        items.push((id, key));
    }
    items.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    if let SamplingStrategy::Random { seed } = strategy {
        items.sort_by(|a, b| a.0.cmp(b.0));
        items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(items
        .into_iter()
        .take(batch_size)
        .map(|(id, _)| id.clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn binary(id: &str, p: f64) -> (String, BTreeMap<String, f64>) {
        (id.to_string(), [("x".to_string(), p), ("y".to_string(), 1.0 - p)].into_iter().collect())
    }

    #[test]
    fn least_confidence_ordering() {
        let pool = vec![binary("a", 0.9), binary("b", 0.55), binary("c", 0.7)];
        assert_eq!(sample_next(SamplingStrategy::LeastConfidence, &pool, 2).unwrap(), vec!["b", "c"]);
    }

    #[test]
    fn entropy_prefers_even_split() {
        let pool = vec![binary("sure", 0.9), binary("coin", 0.5)];
        let even = entropy_bits(&pool[1].1);
        let skew = entropy_bits(&pool[0].1);
        assert!((even - 1.0).abs() < 1e-12);
        assert!((skew - 0.468_995_593_589_281_2).abs() < 1e-12);
        assert_eq!(sample_next(SamplingStrategy::Entropy, &pool, 1).unwrap(), vec!["coin"]);
    }

    #[test]
    fn margin_and_ties() {
        let pool = vec![binary("d", 0.6), binary("b", 0.4), binary("a", 0.8), binary("c", 0.6)];
        // margins: d .2, b .2, a .6, c .2 -> tie among b, c, d broken by id
        assert_eq!(sample_next(SamplingStrategy::Margin, &pool, 3).unwrap(), vec!["b", "c", "d"]);
    }

    #[test]
    fn random_is_seeded() {
        let pool: Vec<_> = (0..30).map(|i| binary(&format!("i{i:02}"), 0.5)).collect();
        let a = sample_next(SamplingStrategy::Random { seed: 42 }, &pool, 10).unwrap();
        let mut reversed = pool.clone();
        reversed.reverse();
        let b = sample_next(SamplingStrategy::Random { seed: 42 }, &reversed, 10).unwrap();
        assert_eq!(a, b);
        let c = sample_next(SamplingStrategy::Random { seed: 43 }, &pool, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_pool() {
        assert_eq!(sample_next(SamplingStrategy::Entropy, &[], 3).unwrap_err().code(), "EmptyPool");
    }

    fn strategy() -> impl Strategy<Value = SamplingStrategy> {
        prop_oneof![
            Just(SamplingStrategy::LeastConfidence),
            Just(SamplingStrategy::Margin),
            Just(SamplingStrategy::Entropy),
            any::<u64>().prop_map(|seed| SamplingStrategy::Random { seed }),
        ]
    }

    proptest! {
        #[test]
        fn output_is_a_distinct_subset(s in strategy(), probs in proptest::collection::vec(0.0f64..1.0, 1..40), batch in 1usize..50) {
            let pool: Vec<_> = probs.iter().enumerate().map(|(i, p)| binary(&format!("img{i}"), *p)).collect();
            let out = sample_next(s, &pool, batch).unwrap();
            prop_assert_eq!(out.len(), batch.min(pool.len()));
            let distinct: BTreeSet<_> = out.iter().collect();
            prop_assert_eq!(distinct.len(), out.len());
            for id in &out {
                prop_assert!(pool.iter().any(|(p, _)| p == id));
            }
        }
    }
}
