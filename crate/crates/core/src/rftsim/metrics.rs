//! Acc@k and MRR@k over ranked recommendation lists.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// 1-based position of the first occurrence of `gt`.
pub fn rank<T: PartialEq>(list: &[T], gt: &T) -> Option<usize> {
    list.iter().position(|x| x == gt).map(|i| i + 1)
}

/// Fraction of cases whose ground truth sits in the top `k`.
pub fn acc_at_k<T: PartialEq>(lists: &[Vec<T>], gts: &[T], k: usize) -> f64 {
    assert_eq!(lists.len(), gts.len(), "one ground truth per list");
    if lists.is_empty() {
        return 0.0;
    }
    let hits = lists
        .iter()
        .zip(gts)
        .filter(|(l, g)| rank(l, g).is_some_and(|r| r <= k))
        .count();
    hits as f64 / lists.len() as f64
}

/// Mean reciprocal rank, counting ranks beyond `k` (or absent) as 0.
pub fn mrr<T: PartialEq>(lists: &[Vec<T>], gts: &[T], k: usize) -> f64 {
    assert_eq!(lists.len(), gts.len(), "one ground truth per list");
    if lists.is_empty() {
        return 0.0;
    }
    let total: f64 = lists
        .iter()
        .zip(gts)
        .filter_map(|(l, g)| rank(l, g).filter(|&r| r <= k))
        .map(|r| 1.0 / r as f64)
        .sum();
    total / lists.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc_at: BTreeMap<usize, f64>,
    pub mrr: f64,
    /// Cutoff used for `mrr`.
    pub mrr_k: usize,
    pub m: usize,
}

impl EvalReport {
    pub fn acc(&self, k: usize) -> f64 {
        self.acc_at.get(&k).copied().unwrap_or(f64::NAN)
    }
}

pub fn evaluate<T: PartialEq>(lists: &[Vec<T>], gts: &[T], ks: &[usize], mrr_k: usize) -> EvalReport {
    EvalReport {
        acc_at: ks.iter().map(|&k| (k, acc_at_k(lists, gts, k))).collect(),
        mrr: mrr(lists, gts, mrr_k),
        mrr_k,
        m: lists.len(),
    }
}

/// MRR@k of a policy that ranks `n` items in uniformly random order:
/// `H_k / n`.
pub fn uniform_mrr(n: usize, k: usize) -> f64 {
    (1..=k.min(n)).map(|r| 1.0 / r as f64).sum::<f64>() / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_first_and_all_absent() {
        let lists = vec![vec![1, 2, 3], vec![4, 5, 6]];
        assert_eq!(acc_at_k(&lists, &[1, 4], 1), 1.0);
        assert_eq!(mrr(&lists, &[1, 4], 10), 1.0);
        for k in [1, 5, 10] {
            assert_eq!(acc_at_k(&lists, &[9, 9], k), 0.0);
        }
    }

    #[test]
    fn ten_case_fixture_by_hand() {
        // Ranks: 1, 3, absent, 2, 6, 1, 10, absent, 5, 4.
        let gts: Vec<u32> = (0..10).collect();
        let ranks = [Some(1), Some(3), None, Some(2), Some(6), Some(1), Some(10), None, Some(5), Some(4)];
        let lists: Vec<Vec<u32>> = ranks
            .iter()
            .zip(&gts)
            .map(|(r, &g)| {
                let mut l: Vec<u32> = (100..110).collect();
                if let Some(r) = r {
                    l[r - 1] = g;
                }
                l
            })
            .collect();
        assert_eq!(acc_at_k(&lists, &gts, 1), 0.2);
        assert_eq!(acc_at_k(&lists, &gts, 5), 0.6);
        assert_eq!(acc_at_k(&lists, &gts, 10), 0.8);
        let hand = (1.0 + 1.0 / 3.0 + 0.5 + 1.0 / 6.0 + 1.0 + 0.1 + 0.2 + 0.25) / 10.0;
        assert!((mrr(&lists, &gts, 10) - hand).abs() < 1e-15);
        assert!((mrr(&lists, &gts, 5) - (1.0 + 1.0 / 3.0 + 0.5 + 1.0 + 0.2 + 0.25) / 10.0).abs() < 1e-15);
    }

    #[test]
    fn mixed_ranks_example() {
        let lists = vec![vec!["a", "b"], vec!["x", "b"], vec!["x", "y"]];
        assert_eq!(mrr(&lists, &["a", "b", "c"], 10), 0.5);
    }

    #[test]
    fn uniform_baseline_matches_permutation_average() {
        // Exact average over all placements of the truth in a 50-item order.
        let brute: f64 = (1..=50).map(|r| if r <= 10 { 1.0 / r as f64 } else { 0.0 }).sum::<f64>() / 50.0;
        assert!((uniform_mrr(50, 10) - brute).abs() < 1e-15);
        assert!((uniform_mrr(50, 10) - 0.058_579_365).abs() < 1e-8);
    }
}
