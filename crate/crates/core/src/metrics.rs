//! AUC and request-grouped GAUC.

use crate::error::{arg_err, Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub score: f64,
    pub label: bool,
    pub request_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: f64,
    pub gauc: f64,
    pub n_requests: usize,
    pub n_skipped: usize,
}

/// Probability that a random positive outranks a random negative, ties
/// counted as one half. Computed from mid-ranks in `O(N log N)`.
pub fn auc(items: &[Scored]) -> Result<f64> {
    if let Some(bad) = items.iter().find(|s| !s.score.is_finite()) {
        return arg_err(format!(
            "non-finite score {} in request {}",
            bad.score, bad.request_id
        ));
    }
    let pos = items.iter().filter(|s| s.label).count();
    let neg = items.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auc needs both classes, got {pos} positives and {neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[a].score.total_cmp(&items[b].score));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && items[order[j + 1]].score == items[order[i]].score {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| items[k].label).count();
        rank_sum += mid * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Unweighted mean of per-request AUC over requests with both classes.
/// Returns `(gauc, valid, skipped)`.
pub fn gauc(items: &[Scored]) -> Result<(f64, usize, usize)> {
    let mut groups: BTreeMap<u64, Vec<Scored>> = BTreeMap::new();
    for s in items {
        groups.entry(s.request_id).or_default().push(*s);
    }
    let (mut total, mut valid, mut skipped) = (0.0, 0, 0);
    for group in groups.values() {
        match auc(group) {
            Ok(a) => {
                total += a;
                valid += 1;
            }
            Err(Error::UndefinedMetric(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if valid == 0 {
        return Err(Error::UndefinedMetric(format!(
            "no request has both classes ({skipped} skipped)"
        )));
    }
    Ok((total / valid as f64, valid, skipped))
}

pub fn report(items: &[Scored]) -> Result<MetricReport> {
    let a = auc(items)?;
    let (g, valid, skipped) = gauc(items)?;
    Ok(MetricReport {
        auc: a,
        gauc: g,
        n_requests: valid + skipped,
        n_skipped: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn set(pos: &[f64], neg: &[f64]) -> Vec<Scored> {
        let mk = |score: f64, label| Scored {
            score,
            label,
            request_id: 0,
        };
        pos.iter()
            .map(|&s| mk(s, true))
            .chain(neg.iter().map(|&s| mk(s, false)))
            .collect()
    }

    fn brute_auc(items: &[Scored]) -> f64 {
        let (mut hits, mut pairs) = (0.0, 0.0);
        for p in items.iter().filter(|s| s.label) {
            for n in items.iter().filter(|s| !s.label) {
                pairs += 1.0;
                if p.score > n.score {
                    hits += 1.0;
                } else if p.score == n.score {
                    hits += 0.5;
                }
            }
        }
        hits / pairs
    }

    /// Scores drawn from a coarse grid so that ties occur.
    fn random_set(rng: &mut Rng, n: usize, requests: u64) -> Vec<Scored> {
        (0..n)
            .map(|_| Scored {
                score: (rng.uniform() * 20.0).floor() / 20.0,
                label: rng.bernoulli(0.4),
                request_id: rng.below(requests as usize) as u64,
            })
            .collect()
    }

    #[test]
    fn ordered_pairs() {
        assert_eq!(auc(&set(&[0.9, 0.8], &[0.3])).unwrap(), 1.0);
        assert_eq!(auc(&set(&[0.6], &[0.4, 0.7])).unwrap(), 0.5);
        assert_eq!(auc(&set(&[0.5], &[0.5])).unwrap(), 0.5);
    }

    #[test]
    fn single_class_undefined() {
        assert!(matches!(
            auc(&set(&[0.1, 0.2], &[])),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(
            auc(&set(&[], &[0.1])),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(auc(&set(&[f64::NAN], &[0.1])).is_err());
    }

    #[test]
    fn rank_sum_equals_pair_count() {
        let mut rng = Rng::new(1);
        for _ in 0..20 {
            let items = random_set(&mut rng, 200, 1);
            assert_eq!(auc(&items).unwrap(), brute_auc(&items));
        }
    }

    #[test]
    fn gauc_hand_cases() {
        let mut items = set(&[0.9], &[0.1]);
        let mut second = set(&[0.5], &[0.5]);
        second.iter_mut().for_each(|s| s.request_id = 1);
        items.extend(second);
        assert_eq!(gauc(&items).unwrap(), (0.75, 2, 0));

        let mut items = set(&[0.9, 0.8], &[]);
        let mut valid = set(&[0.9], &[0.1]);
        valid.iter_mut().for_each(|s| s.request_id = 7);
        items.extend(valid);
        assert_eq!(gauc(&items).unwrap(), (1.0, 1, 1));
        assert!(matches!(
            gauc(&set(&[0.3], &[])),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn gauc_matches_per_request_loop() {
        let mut rng = Rng::new(2);
        let items = random_set(&mut rng, 600, 50);
        let (g, valid, skipped) = gauc(&items).unwrap();
        let (mut total, mut count) = (0.0, 0);
        for r in 0..50u64 {
            let group: Vec<Scored> = items
                .iter()
                .copied()
                .filter(|s| s.request_id == r)
                .collect();
            let p = group.iter().filter(|s| s.label).count();
            if p > 0 && p < group.len() {
                total += brute_auc(&group);
                count += 1;
            }
        }
        assert_eq!(valid, count);
        assert_eq!(
            valid + skipped,
            items
                .iter()
                .map(|s| s.request_id)
                .collect::<std::collections::BTreeSet<_>>()
                .len()
        );
        assert!((g - total / count as f64).abs() < 1e-15);
    }

    #[test]
    fn report_json_fields() {
        let r = report(&set(&[0.9], &[0.1])).unwrap();
        let v = serde_json::to_value(r).unwrap();
        for k in ["auc", "gauc", "n_requests", "n_skipped"] {
            assert!(v.get(k).is_some());
        }
    }

    proptest! {
        #[test]
        fn monotone_transforms_preserve_auc(seed in 0u64..5000, a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let mut rng = Rng::new(seed);
            let items = random_set(&mut rng, 60, 4);
            prop_assume!(items.iter().any(|s| s.label) && items.iter().any(|s| !s.label));
            let base = auc(&items).unwrap();
            let map = |f: &dyn Fn(f64) -> f64| items.iter().map(|s| Scored { score: f(s.score), ..*s }).collect::<Vec<_>>();
            prop_assert_eq!(auc(&map(&|x| x.exp())).unwrap(), base);
            prop_assert_eq!(auc(&map(&|x| a * x + b)).unwrap(), base);
        }

        #[test]
        fn flipping_labels_complements(seed in 0u64..5000) {
            let mut rng = Rng::new(seed);
            let items: Vec<Scored> = (0..40).map(|i| Scored {
                score: rng.uniform() + i as f64 * 1e-9,
                label: rng.bernoulli(0.5),
                request_id: 0,
            }).collect();
            prop_assume!(items.iter().any(|s| s.label) && items.iter().any(|s| !s.label));
            let flipped: Vec<Scored> = items.iter().map(|s| Scored { label: !s.label, ..*s }).collect();
            prop_assert!((auc(&items).unwrap() + auc(&flipped).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn single_request_gauc_is_auc(seed in 0u64..5000) {
            let mut rng = Rng::new(seed);
            let items = random_set(&mut rng, 30, 1);
            prop_assume!(items.iter().any(|s| s.label) && items.iter().any(|s| !s.label));
            prop_assert_eq!(gauc(&items).unwrap().0, auc(&items).unwrap());
        }
    }
}
