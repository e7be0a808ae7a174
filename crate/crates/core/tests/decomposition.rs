use std::collections::BTreeSet;

use focus_core::attention::AttentionInputs;
use focus_core::grouping::HardAssignment;
use focus_core::sparse::{
    build_mask, count_mask_pairs, decomposition_pairs, focus_sparse_attention, focus_sparse_attention_with, group_pass,
    masked_reference, pair_cost, row_cosines, ExecOptions, GroupPermutation, MaskSpec,
};
use focus_core::tensor::rng::{normal_matrix, SeedStream};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn case(seed: u64, t: usize, groups: usize, k: usize, w: usize) -> (AttentionInputs, MaskSpec) {
    let s = SeedStream::new(seed);
    let mut rng = s.stream(9);
    let mut all: Vec<usize> = (0..groups).collect();
    let rows = (0..t)
        .map(|_| {
            all.shuffle(&mut rng);
            all[..k].to_vec()
        })
        .collect();
    let spec = MaskSpec::new(w, HardAssignment::from_topk(rows, groups).unwrap()).unwrap();
    // Large-magnitude logits stress the logsumexp merge.
    let q = normal_matrix(&mut s.stream(0), t, 6, 3.0);
    let kk = normal_matrix(&mut s.stream(1), t, 6, 3.0);
    let v = normal_matrix(&mut s.stream(2), t, 5, 1.0);
    (AttentionInputs::new(q, kk, v, w).unwrap(), spec)
}

#[test]
fn long_sequence_with_wide_window() {
    let (inp, spec) = case(1, 700, 8, 2, 128);
    let out = focus_sparse_attention(&inp, &spec).unwrap();
    let reference = masked_reference(&inp, &build_mask(&spec)).unwrap();
    assert!(out.max_abs_diff(&reference) < 1e-10);
    assert!(row_cosines(&out, &reference).iter().all(|&c| c >= 1.0 - 1e-12));
}

#[test]
fn group_pass_covers_every_query() {
    let (inp, spec) = case(2, 90, 4, 1, 3);
    let partial = group_pass(&inp, &GroupPermutation::from_spec(&spec)).unwrap();
    assert!(partial.covered.iter().all(|&c| c));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn two_pass_equals_masked_reference(
        seed in any::<u64>(),
        t in 1usize..96,
        groups in 2usize..9,
        k_raw in 1usize..9,
        w in 1usize..40,
    ) {
        let k = 1 + (k_raw - 1) % groups;
        let (inp, spec) = case(seed, t, groups, k, w);
        let opts = ExecOptions { trace: true, ..Default::default() };
        let (out, trace) = focus_sparse_attention_with(&inp, &spec, &opts).unwrap();
        let reference = masked_reference(&inp, &build_mask(&spec)).unwrap();
        prop_assert!(out.max_abs_diff(&reference) < 1e-10);

        let a: BTreeSet<_> = trace.group_pairs.iter().copied().collect();
        let b: BTreeSet<_> = trace.local_pairs.iter().copied().collect();
        prop_assert_eq!(a.len(), trace.group_pairs.len());
        prop_assert!(a.is_disjoint(&b));
        let expected = decomposition_pairs(&spec);
        prop_assert_eq!(a, expected.same_group.into_iter().collect::<BTreeSet<_>>());
        prop_assert_eq!(b, expected.cross_local.into_iter().collect::<BTreeSet<_>>());
        let c = pair_cost(&spec);
        prop_assert_eq!(c.focus_pairs as usize, trace.group_pairs.len() + trace.local_pairs.len());
        prop_assert_eq!(c.focus_pairs, count_mask_pairs(&spec));
    }
}
