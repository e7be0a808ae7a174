use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::MaskSpec;

/// Attended-pair counts for full causal attention and for the Focus mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCost {
    pub full_pairs: u64,
    pub focus_pairs: u64,
    pub same_group_pairs: u64,
    pub cross_local_pairs: u64,
    pub ratio: f64,
}

/// Token counts per distinct membership bitset.
fn membership_histogram(spec: &MaskSpec) -> BTreeMap<u64, u64> {
    let a = spec.assignment();
    let mut hist = BTreeMap::new();
    for i in 0..spec.len() {
        *hist.entry(a.member_bits(i)).or_insert(0) += 1;
    }
    hist
}

/// Causal pairs (diagonal included) whose memberships intersect, counted from
/// the membership histogram in O(M²) for M distinct membership sets.
fn shared_pairs(spec: &MaskSpec) -> u64 {
    let hist: Vec<(u64, u64)> = membership_histogram(spec).into_iter().collect();
    let mut total = 0;
    for (x, &(mx, cx)) in hist.iter().enumerate() {
        total += cx * (cx + 1) / 2;
        for &(my, cy) in &hist[x + 1..] {
            if mx & my != 0 {
                total += cx * cy;
            }
        }
    }
    total
}

/// `(local pairs sharing a group, local pairs sharing none)`, diagonal
/// excluded, in O(T·w).
fn local_split(spec: &MaskSpec) -> (u64, u64) {
    let a = spec.assignment();
    let w = spec.window();
    let (mut shared, mut cross) = (0, 0);
    for i in 0..spec.len() {
        for j in i.saturating_sub(w)..i {
            if a.shares_group(i, j) {
                shared += 1;
            } else {
                cross += 1;
            }
        }
    }
    (shared, cross)
}

pub fn full_pairs(t: usize) -> u64 {
    let t = t as u64;
    t * (t + 1) / 2
}

/// Exact pair counts without materialising the mask.
pub fn pair_cost(spec: &MaskSpec) -> PairCost {
    let same = shared_pairs(spec);
    let (_, cross) = local_split(spec);
    let full = full_pairs(spec.len());
    let focus = same + cross;
    PairCost {
        full_pairs: full,
        focus_pairs: focus,
        same_group_pairs: same,
        cross_local_pairs: cross,
        ratio: full as f64 / focus as f64,
    }
}

/// Brute-force O(T²) count of attended pairs.
pub fn count_mask_pairs(spec: &MaskSpec) -> u64 {
    (0..spec.len())
        .into_par_iter()
        .map(|i| (0..=i).filter(|&j| spec.attends(i, j)).count() as u64)
        .sum()
}

/// Balanced-assignment estimate: `Σ n_g(n_g+1)/2` same-group pairs plus the
/// window pairs that fall across groups, taken as a `1 − 1/K` share of the
/// `T·w − w(w+1)/2` off-diagonal local pairs.
pub fn closed_form_pairs(group_sizes: &[usize], t: usize, window: usize) -> f64 {
    let k = group_sizes.len() as f64;
    let same: f64 = group_sizes.iter().map(|&n| (n as f64) * (n as f64 + 1.0) / 2.0).sum();
    let w = window.min(t.saturating_sub(1)) as f64;
    let local = t as f64 * w - w * (w + 1.0) / 2.0;
    same + local * (1.0 - 1.0 / k)
}

/// How many pairs beyond the window survive the group filter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistantRetention {
    pub distant_pairs: u64,
    pub retained: u64,
    pub fraction: f64,
}

pub fn distant_retention(spec: &MaskSpec) -> DistantRetention {
    let t = spec.len();
    let (local_shared, cross) = local_split(spec);
    let local_total = local_shared + cross + t as u64;
    let distant = full_pairs(t) - local_total;
    let retained = shared_pairs(spec) - local_shared - t as u64;
    DistantRetention {
        distant_pairs: distant,
        retained,
        fraction: if distant == 0 { 1.0 } else { retained as f64 / distant as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::super::{build_mask, decomposition_pairs};
    use super::*;
    use crate::grouping::HardAssignment;
    use crate::tensor::rng::SeedStream;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    fn random_spec(seed: u64, t: usize, groups: usize, k: usize, w: usize) -> MaskSpec {
        let mut rng = SeedStream::new(seed).stream(0);
        let rows = (0..t)
            .map(|_| {
                let mut g: Vec<usize> = (0..groups).collect();
                g.shuffle(&mut rng);
                g.truncate(k);
                g
            })
            .collect();
        MaskSpec::new(w, HardAssignment::from_topk(rows, groups).unwrap()).unwrap()
    }

    #[test]
    fn pair_cost_matches_enumeration() {
        for (seed, t, groups, k, w) in [(1, 30, 3, 1, 2), (2, 50, 4, 2, 5), (3, 64, 8, 3, 1), (4, 20, 2, 2, 40)] {
            let spec = random_spec(seed, t, groups, k, w);
            let c = pair_cost(&spec);
            let sets = decomposition_pairs(&spec);
            assert_eq!(c.same_group_pairs, sets.same_group.len() as u64);
            assert_eq!(c.cross_local_pairs, sets.cross_local.len() as u64);
            assert_eq!(c.focus_pairs, build_mask(&spec).count() as u64);
            assert_eq!(c.focus_pairs, count_mask_pairs(&spec));
            assert_eq!(c.full_pairs, (t * (t + 1) / 2) as u64);
        }
    }

    #[test]
    fn full_membership_ratio_is_one() {
        let spec = random_spec(5, 100, 4, 4, 3);
        assert_eq!(pair_cost(&spec).ratio, 1.0);
    }

    #[test]
    fn long_context_balanced_ratio() {
        let (t, k, w) = (65_536, 8, 128);
        let primary: Vec<usize> = (0..t).map(|i| i % k).collect();
        let spec = MaskSpec::new(w, HardAssignment::from_primary(&primary, k).unwrap()).unwrap();
        let c = pair_cost(&spec);
        let predicted = closed_form_pairs(&[t / k; 8], t, w);
        assert!((c.focus_pairs as f64 / predicted - 1.0).abs() < 0.05);
        assert!((c.ratio - 7.79).abs() < 0.05, "ratio {}", c.ratio);
    }

    #[test]
    fn random_top_two_of_four_keeps_five_sixths() {
        let spec = random_spec(6, 1024, 4, 2, 16);
        let r = distant_retention(&spec);
        // P(two random 2-subsets of 4 intersect) = 1 − 1/6.
        assert!((r.fraction - 5.0 / 6.0).abs() < 0.02, "fraction {}", r.fraction);
        let brute = (0..1024usize)
            .flat_map(|i| (0..i.saturating_sub(16)).map(move |j| (i, j)))
            .filter(|&(i, j)| spec.assignment().shares_group(i, j))
            .count() as u64;
        assert_eq!(r.retained, brute);
    }

    #[test]
    fn retention_without_distant_pairs() {
        let spec = random_spec(7, 10, 4, 1, 20);
        let r = distant_retention(&spec);
        assert_eq!((r.distant_pairs, r.retained, r.fraction), (0, 0, 1.0));
    }

    proptest! {
        #[test]
        fn counting_agrees_with_brute_force(seed in any::<u64>(), t in 1usize..60, groups in 2usize..6, w in 1usize..10) {
            let k = 1 + (seed as usize % groups);
            let spec = random_spec(seed, t, groups, k, w);
            let c = pair_cost(&spec);
            prop_assert_eq!(c.focus_pairs, count_mask_pairs(&spec));
            prop_assert!(c.ratio >= 1.0);
            let r = distant_retention(&spec);
            prop_assert_eq!(r.distant_pairs + c.focus_pairs - r.retained, c.full_pairs);
        }
    }
}
