//! Assignment health metrics and group inspection.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use pathfinding::prelude::{kuhn_munkres, Matrix as CostMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::{affinity, argmax, HardAssignment, SoftAssignment};
use crate::tensor::Real;

/// Largest number of groups for which relabelings are enumerated exhaustively.
pub const EXHAUSTIVE_RELABEL_MAX: usize = 8;

fn primary_counts(primary: &[usize], groups: usize) -> Vec<usize> {
    let mut counts = vec![0; groups];
    for &g in primary {
        counts[g] += 1;
    }
    counts
}

/// Fraction of tokens whose argmax lands in the most popular group.
pub fn dominance(g: &SoftAssignment) -> Real {
    if g.tokens() == 0 {
        return 0.0;
    }
    let counts = primary_counts(&g.primary(), g.groups());
    *counts.iter().max().unwrap() as Real / g.tokens() as Real
}

/// Per-group share of the total assignment mass.
pub fn balance(g: &SoftAssignment) -> Vec<Real> {
    let cols = g.col_sums();
    let total: Real = cols.iter().sum();
    if total == 0.0 {
        return vec![1.0 / g.groups() as Real; g.groups()];
    }
    cols.iter().map(|c| c / total).collect()
}

/// `min / max` of the per-group mass; 1 is perfectly balanced.
pub fn balance_minmax(g: &SoftAssignment) -> Real {
    let b = balance(g);
    let max = b.iter().copied().fold(0.0, Real::max);
    let min = b.iter().copied().fold(Real::INFINITY, Real::min);
    if max == 0.0 {
        1.0
    } else {
        min / max
    }
}

/// Mean over tokens of the largest row weight.
pub fn confidence(g: &SoftAssignment) -> Real {
    if g.tokens() == 0 {
        return 0.0;
    }
    let total: Real = (0..g.tokens()).map(|i| g.row(i)[argmax(g.row(i))]).sum();
    total / g.tokens() as Real
}

/// `confusion[a][b]` counts tokens with primary `a` before and `b` after.
fn confusion(prev: &[usize], curr: &[usize], groups: usize) -> Vec<Vec<usize>> {
    let mut c = vec![vec![0; groups]; groups];
    for (&a, &b) in prev.iter().zip(curr) {
        c[a][b] += 1;
    }
    c
}

/// Heap's algorithm over all bijections; returns the best total.
fn best_matching_exhaustive(c: &[Vec<usize>]) -> usize {
    let k = c.len();
    let mut perm: Vec<usize> = (0..k).collect();
    let score = |p: &[usize]| (0..k).map(|a| c[a][p[a]]).sum::<usize>();
    let mut best = score(&perm);
    let mut stack = vec![0usize; k];
    let mut i = 1;
    while i < k {
        if stack[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(stack[i], i);
            }
            best = best.max(score(&perm));
            stack[i] += 1;
            i = 1;
        } else {
            stack[i] = 0;
            i += 1;
        }
    }
    best
}

fn best_matching_hungarian(c: &[Vec<usize>]) -> usize {
    let k = c.len();
    let weights = CostMatrix::from_fn(k, k, |(a, b)| c[a][b] as i64);
    kuhn_munkres(&weights).0 as usize
}

/// Primary-group agreement between two snapshots after the best bijective
/// relabeling of group ids.
pub fn stability(prev: &HardAssignment, curr: &HardAssignment) -> Result<Real> {
    if prev.tokens() != curr.tokens() {
        return Err(Error::invalid(
            "curr",
            format!("snapshots differ in length: {} vs {}", prev.tokens(), curr.tokens()),
        ));
    }
    if prev.tokens() == 0 {
        return Ok(1.0);
    }
    let groups = prev.groups().max(curr.groups());
    let c = confusion(&prev.primaries(), &curr.primaries(), groups);
    let agree = if groups <= EXHAUSTIVE_RELABEL_MAX {
        best_matching_exhaustive(&c)
    } else {
        best_matching_hungarian(&c)
    };
    Ok(agree as Real / prev.tokens() as Real)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCount {
    pub token: usize,
    pub count: u64,
}

/// Per-group token frequencies and, when a category map is supplied, the
/// dominant category and its share of the group's occurrences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupContents {
    pub top_tokens: Vec<Vec<TokenCount>>,
    pub category: Option<Vec<Option<String>>>,
    pub purity: Option<Vec<Option<Real>>>,
}

/// Label applied to tokens absent from the category map.
pub const UNCATEGORISED: &str = "other";

/// Counts each corpus occurrence under its primary group. Token lists are
/// ranked by count, ties by token id.
pub fn group_contents(
    tokens: &[usize],
    assignment: &HardAssignment,
    categories: Option<&BTreeMap<usize, String>>,
) -> Result<GroupContents> {
    if tokens.len() != assignment.tokens() {
        return Err(Error::invalid(
            "tokens",
            format!("{} tokens but {} assignments", tokens.len(), assignment.tokens()),
        ));
    }
    let groups = assignment.groups();
    let mut counts: Vec<BTreeMap<usize, u64>> = vec![BTreeMap::new(); groups];
    for (i, &tok) in tokens.iter().enumerate() {
        *counts[assignment.primary(i)].entry(tok).or_insert(0) += 1;
    }
    let top_tokens = counts
        .iter()
        .map(|m| {
            let mut v: Vec<TokenCount> = m.iter().map(|(&token, &count)| TokenCount { token, count }).collect();
            v.sort_by(|a, b| b.count.cmp(&a.count).then(a.token.cmp(&b.token)));
            v
        })
        .collect::<Vec<_>>();

    let Some(map) = categories else {
        return Ok(GroupContents { top_tokens, category: None, purity: None });
    };
    let mut category = Vec::with_capacity(groups);
    let mut purity = Vec::with_capacity(groups);
    for list in &top_tokens {
        let mut per_cat: BTreeMap<&str, u64> = BTreeMap::new();
        let mut total = 0;
        for tc in list {
            let name = map.get(&tc.token).map_or(UNCATEGORISED, String::as_str);
            *per_cat.entry(name).or_insert(0) += tc.count;
            total += tc.count;
        }
        // BTreeMap order makes ties resolve alphabetically.
        match per_cat.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) {
            Some((name, &n)) => {
                category.push(Some(name.to_string()));
                purity.push(Some(n as Real / total as Real));
            }
            None => {
                category.push(None);
                purity.push(None);
            }
        }
    }
    Ok(GroupContents { top_tokens, category: Some(category), purity: Some(purity) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongRangePair {
    pub i: usize,
    pub j: usize,
    pub distance: usize,
    pub affinity: Real,
}

/// Causal pairs farther apart than `window` whose group affinity reaches
/// `threshold`, farthest first. `positions[i]` is row `i`'s position in the
/// source text and must be strictly increasing.
pub fn long_range_pairs(
    g: &SoftAssignment,
    positions: &[usize],
    window: usize,
    threshold: Real,
) -> Result<Vec<LongRangePair>> {
    if positions.len() != g.tokens() {
        return Err(Error::invalid("positions", format!("expected {} positions, got {}", g.tokens(), positions.len())));
    }
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("positions", "positions must be strictly increasing"));
    }
    let mut out = Vec::new();
    for i in 0..g.tokens() {
        for j in 0..i {
            let distance = positions[i] - positions[j];
            if distance <= window {
                continue;
            }
            let a = affinity(g, i, j);
            if a >= threshold {
                out.push(LongRangePair { i, j, distance, affinity: a });
            }
        }
    }
    out.sort_by(|a, b| b.distance.cmp(&a.distance).then(a.i.cmp(&b.i)).then(a.j.cmp(&b.j)));
    Ok(out)
}

/// Snapshot of one layer's routing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub groups: usize,
    pub tokens: usize,
    pub dominance: Real,
    pub balance: Vec<Real>,
    /// Agreement with the previous snapshot, when one was given.
    pub stability: Option<Real>,
    pub confidence: Real,
    pub group_share: Vec<Real>,
    pub contents: GroupContents,
}

impl GroupReport {
    pub fn build(
        g: &SoftAssignment,
        tokens: &[usize],
        previous: Option<&HardAssignment>,
        categories: Option<&BTreeMap<usize, String>>,
    ) -> Result<Self> {
        let hard = crate::grouping::harden(g, 1)?;
        let stability = previous.map(|p| stability(p, &hard)).transpose()?;
        let counts = primary_counts(&hard.primaries(), g.groups());
        let n = g.tokens().max(1) as Real;
        Ok(Self {
            groups: g.groups(),
            tokens: g.tokens(),
            dominance: dominance(g),
            balance: balance(g),
            stability,
            confidence: confidence(g),
            group_share: counts.iter().map(|&c| c as Real / n).collect(),
            contents: group_contents(tokens, &hard, categories)?,
        })
    }

    /// Plain-text table: one line per group with its token share, dominant
    /// category and most frequent tokens.
    pub fn render_table(&self, top: usize, decode: impl Fn(usize) -> String) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "dominance {:.3}  confidence {:.3}  stability {}",
            self.dominance,
            self.confidence,
            self.stability.map_or("-".to_string(), |x| format!("{x:.3}"))
        );
        let _ = writeln!(s, "{:<6} {:>7}  {:<18} top tokens", "group", "share", "category");
        for g in 0..self.groups {
            let cat = match (&self.contents.category, &self.contents.purity) {
                (Some(c), Some(p)) => match (&c[g], p[g]) {
                    (Some(name), Some(pur)) => format!("{name} ({:.0}%)", 100.0 * pur),
                    _ => "-".to_string(),
                },
                _ => "-".to_string(),
            };
            let toks: Vec<String> = self.contents.top_tokens[g]
                .iter()
                .take(top)
                .map(|tc| format!("{} ({})", decode(tc.token), tc.count))
                .collect();
            let _ = writeln!(s, "{:<6} {:>6.1}%  {:<18} {}", g, 100.0 * self.group_share[g], cat, toks.join(", "));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng::SeedStream;
    use crate::tensor::Matrix;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn one_hot(primary: &[usize], groups: usize) -> SoftAssignment {
        SoftAssignment::new(Matrix::from_fn(primary.len(), groups, |i, j| (primary[i] == j) as u8 as Real)).unwrap()
    }

    fn hard(primary: &[usize], groups: usize) -> HardAssignment {
        HardAssignment::from_primary(primary, groups).unwrap()
    }

    fn random_labels(seed: u64, t: usize, groups: usize) -> Vec<usize> {
        let mut rng = SeedStream::new(seed).stream(0);
        (0..t).map(|_| rng.random_range(0..groups)).collect()
    }

    /// Tries every relabeling directly on the label sequences.
    fn brute_stability(prev: &[usize], curr: &[usize], groups: usize) -> Real {
        fn perms(k: usize) -> Vec<Vec<usize>> {
            if k == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for p in perms(k - 1) {
                for pos in 0..k {
                    let mut q = p.clone();
                    q.insert(pos, k - 1);
                    out.push(q);
                }
            }
            out
        }
        perms(groups)
            .iter()
            .map(|p| prev.iter().zip(curr).filter(|(&a, &b)| p[a] == b).count())
            .max()
            .unwrap() as Real
            / prev.len() as Real
    }

    #[test]
    fn dominance_cases() {
        assert_eq!(dominance(&one_hot(&[0; 10], 4)), 1.0);
        let balanced: Vec<usize> = (0..64).map(|i| i % 8).collect();
        assert_eq!(dominance(&one_hot(&balanced, 8)), 0.125);
        let ties = SoftAssignment::new(Matrix::filled(5, 3, 1.0 / 3.0)).unwrap();
        assert_eq!(dominance(&ties), 1.0);
    }

    #[test]
    fn balance_and_confidence_cases() {
        let balanced: Vec<usize> = (0..12).map(|i| i % 4).collect();
        assert_eq!(balance(&one_hot(&balanced, 4)), vec![0.25; 4]);
        assert_eq!(balance_minmax(&one_hot(&balanced, 4)), 1.0);
        assert_eq!(confidence(&one_hot(&balanced, 4)), 1.0);
        let uniform = SoftAssignment::new(Matrix::filled(7, 8, 0.125)).unwrap();
        assert_eq!(confidence(&uniform), 0.125);

        let mut rng = SeedStream::new(1).stream(0);
        let w = Matrix::from_fn(20, 5, |_, _| rng.random::<Real>());
        let g = SoftAssignment::new(w.clone()).unwrap();
        let direct: Real = w.to_rows().iter().map(|r| r.iter().cloned().fold(0.0, Real::max)).sum::<Real>() / 20.0;
        assert!((confidence(&g) - direct).abs() < 1e-15);
        assert!((balance(&g).iter().sum::<Real>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stability_cases() {
        let a = random_labels(2, 200, 5);
        assert_eq!(stability(&hard(&a, 5), &hard(&a, 5)).unwrap(), 1.0);
        let relabel = [3, 0, 4, 1, 2];
        let b: Vec<usize> = a.iter().map(|&g| relabel[g]).collect();
        assert_eq!(stability(&hard(&a, 5), &hard(&b, 5)).unwrap(), 1.0);
        assert!(stability(&hard(&a, 5), &hard(&a[..10], 5)).is_err());
    }

    #[test]
    fn stability_of_independent_labelings() {
        // Matching noise: each confusion cell is about T/16 with sd ≈ sqrt(T/16),
        // and the best of 24 bijections lands a few sd above T/4.
        let mut vals = Vec::new();
        for seed in 0..5 {
            let a = random_labels(10 + seed, 10_000, 4);
            let b = random_labels(100 + seed, 10_000, 4);
            let s = stability(&hard(&a, 4), &hard(&b, 4)).unwrap();
            assert_eq!(s, brute_stability(&a, &b, 4));
            vals.push(s);
        }
        let mean = vals.iter().sum::<Real>() / vals.len() as Real;
        assert!(mean > 0.25 && mean < 0.27, "mean {mean}");
    }

    #[test]
    fn hungarian_agrees_with_exhaustive() {
        for seed in 0..20 {
            let groups = 2 + (seed as usize % 7);
            let a = random_labels(seed, 300, groups);
            let mut b = random_labels(seed + 1000, 300, groups);
            b[..150].copy_from_slice(&a[..150]);
            let c = confusion(&a, &b, groups);
            assert_eq!(best_matching_exhaustive(&c), best_matching_hungarian(&c));
        }
        let a = random_labels(7, 500, 12);
        let mut order: Vec<usize> = (0..12).collect();
        order.shuffle(&mut SeedStream::new(7).stream(1));
        let b: Vec<usize> = a.iter().map(|&g| order[g]).collect();
        assert_eq!(stability(&hard(&a, 12), &hard(&b, 12)).unwrap(), 1.0);
    }

    #[test]
    fn contents_cases() {
        let rep = group_contents(&[7; 9], &hard(&[1; 9], 3), None).unwrap();
        assert_eq!(rep.top_tokens[1], vec![TokenCount { token: 7, count: 9 }]);
        assert!(rep.top_tokens[0].is_empty());

        // Two classes routed by construction: even tokens to group 0.
        let tokens: Vec<usize> = (0..40).map(|i| i % 6).collect();
        let primary: Vec<usize> = tokens.iter().map(|t| t % 2).collect();
        let cats: BTreeMap<usize, String> =
            (0..6).map(|t| (t, if t % 2 == 0 { "even" } else { "odd" }.to_string())).collect();
        let rep = group_contents(&tokens, &hard(&primary, 3), Some(&cats)).unwrap();
        assert_eq!(rep.purity.as_ref().unwrap()[..2], [Some(1.0), Some(1.0)]);
        assert_eq!(rep.purity.as_ref().unwrap()[2], None);
        assert_eq!(rep.category.as_ref().unwrap()[0].as_deref(), Some("even"));
        let total: u64 = rep.top_tokens.iter().flatten().map(|t| t.count).sum();
        assert_eq!(total, 40);
    }

    #[test]
    fn long_range_cases() {
        let g = one_hot(&[2, 0, 2], 3);
        let pairs = long_range_pairs(&g, &[0, 10, 500], 128, 0.5).unwrap();
        assert_eq!(pairs, vec![LongRangePair { i: 2, j: 0, distance: 500, affinity: 1.0 }]);
        let g = one_hot(&[0, 1, 2], 3);
        assert!(long_range_pairs(&g, &[0, 300, 600], 128, 0.5).unwrap().is_empty());
        assert!(long_range_pairs(&g, &[0, 0, 600], 128, 0.5).is_err());
    }

    #[test]
    fn long_range_matches_scan() {
        let mut rng = SeedStream::new(3).stream(0);
        let w = Matrix::from_fn(40, 4, |_, _| rng.random::<Real>());
        let w = Matrix::from_fn(40, 4, |i, j| w.get(i, j) / w.row(i).iter().sum::<Real>());
        let g = SoftAssignment::new(w).unwrap();
        let pos: Vec<usize> = (0..40).map(|i| 3 * i).collect();
        let got = long_range_pairs(&g, &pos, 20, 0.3).unwrap();
        let mut expect = Vec::new();
        for i in 0..40 {
            for j in 0..40 {
                let a: Real = (0..4).map(|c| g.row(i)[c] * g.row(j)[c]).sum();
                if j < i && 3 * (i - j) > 20 && a >= 0.3 {
                    expect.push((i, j));
                }
            }
        }
        let mut got_pairs: Vec<_> = got.iter().map(|p| (p.i, p.j)).collect();
        got_pairs.sort();
        assert_eq!(got_pairs, expect);
        assert!(got.windows(2).all(|w| w[0].distance >= w[1].distance));
    }

    #[test]
    fn report_renders() {
        let primary: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let tokens: Vec<usize> = primary.iter().map(|g| 97 + g).collect();
        let rep = GroupReport::build(&one_hot(&primary, 3), &tokens, Some(&hard(&primary, 3)), None).unwrap();
        assert_eq!(rep.stability, Some(1.0));
        let table = rep.render_table(3, |t| format!("{:?}", t as u8 as char));
        assert!(table.contains("'a' (4)"));
        assert_eq!(table.lines().count(), 5);
    }

    proptest! {
        #[test]
        fn stability_is_relabel_invariant(seed in any::<u64>(), groups in 2usize..7) {
            let a = random_labels(seed, 60, groups);
            let b = random_labels(seed ^ 1, 60, groups);
            let mut p: Vec<usize> = (0..groups).collect();
            p.shuffle(&mut SeedStream::new(seed).stream(2));
            let b2: Vec<usize> = b.iter().map(|&g| p[g]).collect();
            let s1 = stability(&hard(&a, groups), &hard(&b, groups)).unwrap();
            let s2 = stability(&hard(&a, groups), &hard(&b2, groups)).unwrap();
            let s3 = stability(&hard(&b2, groups), &hard(&a, groups)).unwrap();
            prop_assert_eq!(s1, s2);
            prop_assert_eq!(s1, s3);
        }

        #[test]
        fn dominance_bounds(seed in any::<u64>(), groups in 2usize..9) {
            let mut rng = SeedStream::new(seed).stream(0);
            let g = SoftAssignment::new(Matrix::from_fn(30, groups, |_, _| rng.random::<Real>())).unwrap();
            let d = dominance(&g);
            prop_assert!(d >= 1.0 / groups as Real - 1e-12 && d <= 1.0);
            prop_assert!((balance(&g).iter().sum::<Real>() - 1.0).abs() < 1e-9);
        }
    }
}
