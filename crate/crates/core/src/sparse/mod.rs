//! Hard-mask inference path.
//!
//! Under hard top-k memberships a query `i` attends key `j` iff
//! `j ≤ i` and (the two tokens share a group, or `i − j ≤ w`). The attended
//! pairs split into two disjoint sets:
//!
//! - **A**: causal pairs that share a group,
//! - **B**: causal pairs inside the window that share no group.
//!
//! A is computed per group on group-sorted segments, B by a windowed pass,
//! and the two partial softmaxes are combined with their logsumexp values.
//! Because the sets are disjoint the combination is exact.

mod cost;
mod exec;

pub use cost::{
    closed_form_pairs, count_mask_pairs, distant_retention, full_pairs, pair_cost, DistantRetention, PairCost,
};
pub use exec::{
    focus_sparse_attention, focus_sparse_attention_with, group_pass, local_pass, masked_reference,
    merge, primary_fast_path, ExecOptions, ExecTrace, GroupPermutation, PartialAttention,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::HardAssignment;
use crate::tensor::{Mask, Matrix, Real};

/// Window plus hard assignment: everything needed to derive the mask.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    window: usize,
    assignment: HardAssignment,
}

impl MaskSpec {
    pub fn new(window: usize, assignment: HardAssignment) -> Result<Self> {
        if window == 0 {
            return Err(Error::invalid("w", "window must be at least 1"));
        }
        Ok(Self { window, assignment })
    }

    pub fn len(&self) -> usize {
        self.assignment.tokens()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn k(&self) -> usize {
        self.assignment.k()
    }

    pub fn groups(&self) -> usize {
        self.assignment.groups()
    }

    pub fn assignment(&self) -> &HardAssignment {
        &self.assignment
    }

    /// Whether query `i` attends key `j` under the top-k mask.
    #[inline]
    pub fn attends(&self, i: usize, j: usize) -> bool {
        j <= i && (i - j <= self.window || self.assignment.shares_group(i, j))
    }

    /// The same spec with every token reduced to its primary group.
    pub fn primary_only(&self) -> MaskSpec {
        let primary = self.assignment.primaries();
        MaskSpec {
            window: self.window,
            assignment: HardAssignment::from_primary(&primary, self.groups())
                .expect("primaries are valid groups"),
        }
    }
}

/// `M(i,j) = [j ≤ i] ∧ ([memberships intersect] ∨ [i − j ≤ w])`.
pub fn build_mask(spec: &MaskSpec) -> Mask {
    let t = spec.len();
    Mask::from_fn(t, t, |i, j| spec.attends(i, j))
}

/// The two disjoint pair sets, each sorted row-major.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSets {
    pub same_group: Vec<(usize, usize)>,
    pub cross_local: Vec<(usize, usize)>,
}

/// Single-membership split into same-group causal pairs and cross-group
/// local pairs.
pub fn split_pairs(spec: &MaskSpec) -> Result<PairSets> {
    if spec.k() != 1 {
        return Err(Error::invalid(
            "k",
            format!("split_pairs needs single-group memberships (k = 1), got k = {}; use decomposition_pairs", spec.k()),
        ));
    }
    Ok(decomposition_pairs(spec))
}

/// Generalised split: pairs sharing any group, and local pairs sharing none.
/// Coincides with [`split_pairs`] when `k = 1`.
pub fn decomposition_pairs(spec: &MaskSpec) -> PairSets {
    let a = spec.assignment();
    let mut sets = PairSets::default();
    for i in 0..spec.len() {
        for j in 0..=i {
            if a.shares_group(i, j) {
                sets.same_group.push((i, j));
            } else if i - j <= spec.window() {
                sets.cross_local.push((i, j));
            }
        }
    }
    sets
}

/// Pairs where the primary-only mask and the top-k mask disagree.
pub fn primary_mask_mismatch(spec: &MaskSpec) -> usize {
    let primary = spec.primary_only();
    let t = spec.len();
    (0..t)
        .map(|i| (0..=i).filter(|&j| spec.attends(i, j) != primary.attends(i, j)).count())
        .sum()
}

/// Cosine similarity of corresponding rows.
pub fn row_cosines(a: &Matrix, b: &Matrix) -> Vec<Real> {
    assert_eq!(a.shape(), b.shape(), "row_cosines shape mismatch");
    (0..a.rows())
        .map(|i| {
            let (x, y) = (a.row(i), b.row(i));
            let nx = crate::tensor::dot(x, x).sqrt();
            let ny = crate::tensor::dot(y, y).sqrt();
            if nx == 0.0 && ny == 0.0 {
                1.0
            } else if nx == 0.0 || ny == 0.0 {
                0.0
            } else {
                crate::tensor::dot(x, y) / (nx * ny)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn spec(primary: &[usize], groups: usize, w: usize) -> MaskSpec {
        MaskSpec::new(w, HardAssignment::from_primary(primary, groups).unwrap()).unwrap()
    }

    /// Literal enumeration of the mask equation.
    fn enumerate_mask(primary: &[usize], w: usize) -> BTreeSet<(usize, usize)> {
        let mut out = BTreeSet::new();
        for i in 0..primary.len() {
            for j in 0..primary.len() {
                let causal = j <= i;
                let same = primary[i] == primary[j];
                let local = causal && i - j <= w;
                if causal && (same || local) {
                    out.insert((i, j));
                }
            }
        }
        out
    }

    #[test]
    fn window_zero_is_rejected() {
        let a = HardAssignment::from_primary(&[0, 1], 2).unwrap();
        assert!(MaskSpec::new(0, a).is_err());
    }

    #[test]
    fn mask_full_cases() {
        let topk: Vec<Vec<usize>> = (0..10).map(|i| vec![i % 3, (i + 1) % 3, (i + 2) % 3]).collect();
        let full_k = MaskSpec::new(1, HardAssignment::from_topk(topk, 3).unwrap()).unwrap();
        assert_eq!(build_mask(&full_k), Mask::causal(10));

        let wide = spec(&[0, 1, 2, 0, 1, 2], 3, 6);
        assert_eq!(build_mask(&wide), Mask::causal(6));
    }

    #[test]
    fn mask_hand_case() {
        let m = build_mask(&spec(&[0, 0, 1, 1], 2, 1));
        let got: BTreeSet<_> = m.pairs().into_iter().collect();
        let expect: BTreeSet<_> = [(0, 0), (1, 0), (1, 1), (2, 1), (2, 2), (3, 2), (3, 3)].into_iter().collect();
        assert_eq!(got, expect);
        assert_eq!(got, enumerate_mask(&[0, 0, 1, 1], 1));
    }

    #[test]
    fn split_cases() {
        let one = split_pairs(&spec(&[0; 5], 2, 1)).unwrap();
        assert!(one.cross_local.is_empty());
        assert_eq!(one.same_group, Mask::causal(5).pairs());

        let s = split_pairs(&spec(&[0, 0, 1, 1], 2, 1)).unwrap();
        assert_eq!(s.same_group, vec![(0, 0), (1, 0), (1, 1), (2, 2), (3, 2), (3, 3)]);
        assert_eq!(s.cross_local, vec![(2, 1)]);

        let alt: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let s = split_pairs(&spec(&alt, 2, 1)).unwrap();
        assert_eq!(s.cross_local, (1..8).map(|i| (i, i - 1)).collect::<Vec<_>>());
        let parity: Vec<_> = (0..8usize)
            .flat_map(|i| (0..=i).filter(move |j| (i - j) % 2 == 0).map(move |j| (i, j)))
            .collect();
        assert_eq!(s.same_group, parity);
    }

    #[test]
    fn split_rejects_multi_membership() {
        let a = HardAssignment::from_topk(vec![vec![0, 1], vec![1, 0]], 2).unwrap();
        assert!(split_pairs(&MaskSpec::new(1, a).unwrap()).is_err());
    }

    #[test]
    fn primary_mismatch_counts() {
        // Tokens 0 and 3 share group 2 only through their second membership.
        let a = HardAssignment::from_topk(vec![vec![0, 2], vec![1, 0], vec![1, 0], vec![3, 2]], 4).unwrap();
        let s = MaskSpec::new(1, a).unwrap();
        assert_eq!(primary_mask_mismatch(&s), 2);
        assert_eq!(primary_mask_mismatch(&s.primary_only()), 0);
    }
}
