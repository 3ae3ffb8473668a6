use crate::error::{Error, Result};

/// One-to-one assignment of ground truths (rows) to predictions (columns).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchResult {
    /// `(prediction, ground truth)` sorted by ground-truth index.
    pub pairs: Vec<(usize, usize)>,
    /// Predictions without a ground truth, ascending.
    pub unmatched: Vec<usize>,
}

impl MatchResult {
    pub fn total_cost(&self, cost: &[f64], n: usize) -> f64 {
        self.pairs.iter().map(|&(p, g)| cost[g * n + p]).sum()
    }
}

/// Minimum-cost assignment of every row of a row-major `m × n` cost matrix to a distinct
/// column (Kuhn–Munkres with potentials, O(m²n)). Requires `m ≤ n`.
pub fn hungarian_match(cost: &[f64], m: usize, n: usize) -> Result<MatchResult> {
    if cost.len() != m * n {
        return Err(Error::dim("hungarian_match", &[cost.len()], &[m, n]));
    }
    if m > n {
        return Err(Error::Contract(format!(
            "{m} ground-truth boxes exceed {n} predictions; raise the query count"
        )));
    }
    if let Some(i) = cost.iter().position(|c| !c.is_finite()) {
        return Err(Error::Numeric(format!("matching cost at ({}, {}) is {}", i / n, i % n, cost[i])));
    }
    // 1-based potentials; column 0 is the virtual start.
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=m {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=n).filter(|&j| owner[j] != 0).map(|j| (j - 1, owner[j] - 1)).collect();
    pairs.sort_by_key(|&(_, g)| g);
    let mut matched = vec![false; n];
    for &(p, _) in &pairs {
        matched[p] = true;
    }
    let unmatched = (0..n).filter(|&p| !matched[p]).collect();
    Ok(MatchResult { pairs, unmatched })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn small_examples() {
        let r = hungarian_match(&[5.0], 1, 1).unwrap();
        assert_eq!(r.pairs, vec![(0, 0)]);
        assert_eq!(r.total_cost(&[5.0], 1), 5.0);

        let c = [1.0, 2.0, 3.0, 1.0];
        let r = hungarian_match(&c, 2, 2).unwrap();
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(r.total_cost(&c, 2), 2.0);

        let r = hungarian_match(&[], 0, 3).unwrap();
        assert!(r.pairs.is_empty());
        assert_eq!(r.unmatched, vec![0, 1, 2]);

        assert!(matches!(hungarian_match(&[1.0, 2.0], 2, 1), Err(Error::Contract(_))));
        assert!(matches!(hungarian_match(&[f64::NAN], 1, 1), Err(Error::Numeric(_))));
    }

    /// Minimum over all injective row → column maps.
    fn brute_force(cost: &[f64], m: usize, n: usize) -> f64 {
        fn rec(row: usize, m: usize, n: usize, cost: &[f64], used: &mut [bool], acc: f64, best: &mut f64) {
            if row == m {
                *best = best.min(acc);
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    rec(row + 1, m, n, cost, used, acc + cost[row * n + j], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(0, m, n, cost, &mut vec![false; n], 0.0, &mut best);
        best
    }

    #[test]
    fn equals_brute_force_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..1000 {
            let m = rng.random_range(1..=7);
            let n = rng.random_range(m..=8);
            let cost: Vec<f64> = (0..m * n).map(|_| rng.random_range(-5.0..10.0)).collect();
            let r = hungarian_match(&cost, m, n).unwrap();
            assert_eq!(r.pairs.len(), m);
            assert!((r.total_cost(&cost, n) - brute_force(&cost, m, n)).abs() < 1e-9);
        }
    }

    #[test]
    fn row_permutation_relabels_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (m, n) = (4, 6);
        let cost: Vec<f64> = (0..m * n).map(|_| rng.random::<f64>()).collect();
        let perm = [2, 0, 3, 1];
        let permuted: Vec<f64> = perm.iter().flat_map(|&g| cost[g * n..(g + 1) * n].to_vec()).collect();
        let a = hungarian_match(&cost, m, n).unwrap();
        let b = hungarian_match(&permuted, m, n).unwrap();
        for (new_g, &old_g) in perm.iter().enumerate() {
            let pa = a.pairs.iter().find(|p| p.1 == old_g).unwrap().0;
            let pb = b.pairs.iter().find(|p| p.1 == new_g).unwrap().0;
            assert_eq!(pa, pb);
        }
    }

    proptest::proptest! {
        #[test]
        fn optimal_for_any_costs(m in 0usize..6, extra in 0usize..3, seed in proptest::num::u64::ANY) {
            let n = (m + extra).max(1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cost: Vec<f64> = (0..m * n).map(|_| rng.random_range(-1e3..1e3)).collect();
            let r = hungarian_match(&cost, m, n).unwrap();
            proptest::prop_assert_eq!(r.pairs.len(), m);
            let mut preds: Vec<usize> = r.pairs.iter().map(|p| p.0).collect();
            preds.sort_unstable();
            preds.dedup();
            proptest::prop_assert_eq!(preds.len(), m);
            let best = brute_force(&cost, m, n);
            proptest::prop_assert!((r.total_cost(&cost, n) - best).abs() < 1e-7);
        }
    }
}
