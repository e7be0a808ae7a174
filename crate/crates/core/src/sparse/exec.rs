use rayon::prelude::*;

use super::MaskSpec;
use crate::attention::AttentionInputs;
use crate::error::{Error, Result};
use crate::tensor::{dot, Mask, Matrix, Real};

/// Output of one attention pass over a subset of pairs: the normalised
/// output rows, the per-query logsumexp of the logits the pass saw, and
/// whether the query saw any key at all.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialAttention {
    pub output: Matrix,
    pub lse: Vec<Real>,
    pub covered: Vec<bool>,
}

impl PartialAttention {
    /// All rows uncovered: zero output, `-∞` logsumexp.
    pub fn uncovered(t: usize, dv: usize) -> Self {
        Self {
            output: Matrix::zeros(t, dv),
            lse: vec![Real::NEG_INFINITY; t],
            covered: vec![false; t],
        }
    }

    pub fn len(&self) -> usize {
        self.lse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lse.is_empty()
    }

    /// Folds one more partial result for query `i` into this one.
    fn absorb(&mut self, i: usize, out: &[Real], lse: Real) {
        if !self.covered[i] {
            self.output.row_mut(i).copy_from_slice(out);
            self.lse[i] = lse;
            self.covered[i] = true;
            return;
        }
        let (la, lb) = (self.lse[i], lse);
        let m = la.max(lb);
        let (wa, wb) = ((la - m).exp(), (lb - m).exp());
        let z = wa + wb;
        for (o, &b) in self.output.row_mut(i).iter_mut().zip(out) {
            *o = (wa * *o + wb * b) / z;
        }
        self.lse[i] = m + z.ln();
    }

    /// Exact softmax union of two partials over disjoint key sets.
    pub fn combine(&self, other: &PartialAttention) -> Result<PartialAttention> {
        if self.output.shape() != other.output.shape() {
            return Err(Error::Shape {
                op: "PartialAttention::combine",
                lhs: self.output.shape(),
                rhs: other.output.shape(),
            });
        }
        let mut out = self.clone();
        for i in 0..other.len() {
            if other.covered[i] {
                out.absorb(i, other.output.row(i), other.lse[i]);
            }
        }
        Ok(out)
    }
}

/// Tokens stably sorted by primary group, with per-group segment offsets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupPermutation {
    order: Vec<usize>,
    boundaries: Vec<usize>,
}

impl GroupPermutation {
    pub fn from_primary(primary: &[usize], groups: usize) -> Result<Self> {
        if let Some(&bad) = primary.iter().find(|&&g| g >= groups) {
            return Err(Error::invalid("primary", format!("group {bad} >= K={groups}")));
        }
        let mut order: Vec<usize> = (0..primary.len()).collect();
        order.sort_by_key(|&i| primary[i]);
        let mut boundaries = vec![0usize; groups + 1];
        for &g in primary {
            boundaries[g + 1] += 1;
        }
        for g in 0..groups {
            boundaries[g + 1] += boundaries[g];
        }
        Ok(Self { order, boundaries })
    }

    pub fn from_spec(spec: &MaskSpec) -> Self {
        Self::from_primary(&spec.assignment().primaries(), spec.groups()).expect("valid assignment")
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// `K + 1` offsets; group `g` occupies `order[boundaries[g]..boundaries[g+1]]`.
    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn groups(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn segment(&self, g: usize) -> &[usize] {
        &self.order[self.boundaries[g]..self.boundaries[g + 1]]
    }

    /// `inverse()[order[p]] == p`.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.order.len()];
        for (p, &i) in self.order.iter().enumerate() {
            inv[i] = p;
        }
        inv
    }
}

/// Execution knobs for [`focus_sparse_attention_with`].
#[derive(Clone, Copy, Debug, Default)]
pub struct ExecOptions {
    /// Run group segments on the rayon pool; results are bit-identical to
    /// the sequential order.
    pub parallel: bool,
    /// Deliberately broken decomposition that lets the local pass also take
    /// same-group pairs, so they are counted twice. Exists only so the
    /// verification harness can show it detects overlap.
    pub double_count_local: bool,
    /// Record the pairs each pass attended.
    pub trace: bool,
}

/// Pairs actually attended by each pass, in original positions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExecTrace {
    pub group_pairs: Vec<(usize, usize)>,
    pub local_pairs: Vec<(usize, usize)>,
}

/// Softmax attention of query `q` over rows `keys` of `k`/`v`.
/// Returns the logsumexp, or `None` when `keys` is empty.
#[allow(clippy::too_many_arguments)]
fn attend_keys(
    q: &[Real],
    k: &Matrix,
    v: &Matrix,
    scale: Real,
    keys: &[usize],
    logits: &mut Vec<Real>,
    out: &mut [Real],
) -> Option<Real> {
    if keys.is_empty() {
        return None;
    }
    logits.clear();
    logits.extend(keys.iter().map(|&j| dot(q, k.row(j)) * scale));
    let m = logits.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let mut z = 0.0;
    out.iter_mut().for_each(|o| *o = 0.0);
    for (l, &j) in logits.iter_mut().zip(keys) {
        let w = (*l - m).exp();
        z += w;
        for (o, &x) in out.iter_mut().zip(v.row(j)) {
            *o += w * x;
        }
    }
    out.iter_mut().for_each(|o| *o /= z);
    Some(m + z.ln())
}

fn attend_row(inp: &AttentionInputs, i: usize, keys: &[usize], logits: &mut Vec<Real>, out: &mut [Real]) -> Option<Real> {
    attend_keys(inp.q.row(i), &inp.k, &inp.v, inp.scale(), keys, logits, out)
}

/// Rows produced by attending within one segment: `(query, output, lse)`.
type SegmentRows = Vec<(usize, Vec<Real>, Real)>;

/// Attention inside one segment. `members` are original positions in
/// increasing order; query `members[p]` may use keys `members[..=p]`
/// admitted by `admit`. Keys and values are first gathered into contiguous
/// segment-local buffers.
fn segment_pass(
    inp: &AttentionInputs,
    members: &[usize],
    admit: impl Fn(usize, usize) -> bool,
    trace: Option<&mut Vec<(usize, usize)>>,
) -> SegmentRows {
    let dv = inp.value_dim();
    let seg_k = inp.k.gather_rows(members);
    let seg_v = inp.v.gather_rows(members);
    let scale = inp.scale();
    let mut rows = Vec::with_capacity(members.len());
    let mut keys = Vec::with_capacity(members.len());
    let mut logits = Vec::with_capacity(members.len());
    let mut sink = trace;
    for (p, &i) in members.iter().enumerate() {
        keys.clear();
        keys.extend((0..=p).filter(|&c| admit(i, members[c])));
        if let Some(s) = sink.as_deref_mut() {
            s.extend(keys.iter().map(|&c| (i, members[c])));
        }
        let mut out = vec![0.0; dv];
        if let Some(lse) = attend_keys(inp.q.row(i), &seg_k, &seg_v, scale, &keys, &mut logits, &mut out) {
            rows.push((i, out, lse));
        }
    }
    rows
}

fn run_segments(
    inp: &AttentionInputs,
    segments: Vec<(usize, Vec<usize>)>,
    admit: impl Fn(usize, usize, usize) -> bool + Sync,
    opts: &ExecOptions,
    trace: Option<&mut Vec<(usize, usize)>>,
) -> PartialAttention {
    let run = |(g, members): &(usize, Vec<usize>)| {
        let mut local = opts.trace.then(Vec::new);
        let rows = segment_pass(inp, members, |i, j| admit(*g, i, j), local.as_mut());
        (rows, local)
    };
    let results: Vec<(SegmentRows, Option<Vec<(usize, usize)>>)> = if opts.parallel {
        segments.par_iter().map(run).collect()
    } else {
        segments.iter().map(run).collect()
    };
    let mut partial = PartialAttention::uncovered(inp.len(), inp.value_dim());
    let mut sink = trace;
    for (rows, pairs) in results {
        for (i, out, lse) in rows {
            partial.absorb(i, &out, lse);
        }
        if let (Some(s), Some(p)) = (sink.as_deref_mut(), pairs) {
            s.extend(p);
        }
    }
    partial
}

/// Same-group causal pass for single memberships: causal attention inside
/// each segment of `perm`, scattered back to original positions.
pub fn group_pass(inp: &AttentionInputs, perm: &GroupPermutation) -> Result<PartialAttention> {
    if perm.order().len() != inp.len() {
        return Err(Error::Shape {
            op: "group_pass",
            lhs: (inp.len(), inp.head_dim()),
            rhs: (perm.order().len(), perm.groups()),
        });
    }
    Ok(group_pass_with(inp, perm, &ExecOptions::default(), None))
}

fn group_pass_with(
    inp: &AttentionInputs,
    perm: &GroupPermutation,
    opts: &ExecOptions,
    trace: Option<&mut Vec<(usize, usize)>>,
) -> PartialAttention {
    let segments = (0..perm.groups()).map(|g| (g, perm.segment(g).to_vec())).collect();
    run_segments(inp, segments, |_, _, _| true, opts, trace)
}

/// Same-group pass for top-k ≥ 2. Every token joins the segment of each of
/// its groups; inside segment `g` a pair is taken only if `g` is the lowest
/// group the two tokens share, so each shared pair is attended exactly once.
fn multi_group_pass(
    inp: &AttentionInputs,
    spec: &MaskSpec,
    opts: &ExecOptions,
    trace: Option<&mut Vec<(usize, usize)>>,
) -> PartialAttention {
    let a = spec.assignment();
    let segments = (0..spec.groups())
        .map(|g| (g, (0..spec.len()).filter(|&i| a.contains(i, g)).collect()))
        .collect();
    let admit = |g: usize, i: usize, j: usize| {
        let shared = a.member_bits(i) & a.member_bits(j);
        shared.trailing_zeros() as usize == g
    };
    run_segments(inp, segments, admit, opts, trace)
}

/// Cross-group local pass: for each query, keys in `[i − w, i]` that share
/// no group with it. Queries with no such key stay uncovered.
pub fn local_pass(inp: &AttentionInputs, spec: &MaskSpec) -> Result<PartialAttention> {
    check_spec(inp, spec)?;
    Ok(local_pass_with(inp, spec, &ExecOptions::default(), None))
}

fn local_pass_with(
    inp: &AttentionInputs,
    spec: &MaskSpec,
    opts: &ExecOptions,
    trace: Option<&mut Vec<(usize, usize)>>,
) -> PartialAttention {
    let a = spec.assignment();
    let w = spec.window();
    let mut partial = PartialAttention::uncovered(inp.len(), inp.value_dim());
    let mut keys = Vec::with_capacity(w + 1);
    let mut logits = Vec::with_capacity(w + 1);
    let mut out = vec![0.0; inp.value_dim()];
    let mut sink = trace;
    for i in 0..spec.len() {
        keys.clear();
        keys.extend((i.saturating_sub(w)..=i).filter(|&j| opts.double_count_local || !a.shares_group(i, j)));
        if let Some(s) = sink.as_deref_mut() {
            s.extend(keys.iter().map(|&j| (i, j)));
        }
        if let Some(lse) = attend_row(inp, i, &keys, &mut logits, &mut out) {
            partial.absorb(i, &out, lse);
        }
    }
    partial
}

/// Exact combination of two partials over disjoint key sets:
/// `o = (e^{ℓa}·oa + e^{ℓb}·ob) / (e^{ℓa} + e^{ℓb})`, max-shifted.
pub fn merge(a: &PartialAttention, b: &PartialAttention) -> Result<Matrix> {
    let combined = a.combine(b)?;
    if let Some(row) = combined.covered.iter().position(|&c| !c) {
        return Err(Error::Uncovered { row });
    }
    Ok(combined.output)
}

fn check_spec(inp: &AttentionInputs, spec: &MaskSpec) -> Result<()> {
    if spec.len() != inp.len() {
        return Err(Error::Shape {
            op: "MaskSpec",
            lhs: (inp.len(), inp.head_dim()),
            rhs: (spec.len(), spec.k()),
        });
    }
    Ok(())
}

/// Sparse attention under `spec`'s top-k mask via the disjoint two-pass
/// decomposition. Equal to `masked_reference(inp, &build_mask(spec))` up to
/// rounding.
pub fn focus_sparse_attention(inp: &AttentionInputs, spec: &MaskSpec) -> Result<Matrix> {
    focus_sparse_attention_with(inp, spec, &ExecOptions::default()).map(|(o, _)| o)
}

pub fn focus_sparse_attention_with(
    inp: &AttentionInputs,
    spec: &MaskSpec,
    opts: &ExecOptions,
) -> Result<(Matrix, ExecTrace)> {
    check_spec(inp, spec)?;
    let mut trace = ExecTrace::default();
    let group = if spec.k() == 1 {
        let perm = GroupPermutation::from_spec(spec);
        group_pass_with(inp, &perm, opts, opts.trace.then_some(&mut trace.group_pairs))
    } else {
        multi_group_pass(inp, spec, opts, opts.trace.then_some(&mut trace.group_pairs))
    };
    let local = local_pass_with(inp, spec, opts, opts.trace.then_some(&mut trace.local_pairs));
    Ok((merge(&group, &local)?, trace))
}

/// Two-pass execution on primary groups only, ignoring secondary
/// memberships. Matches the top-k mask only when `k = 1`.
pub fn primary_fast_path(inp: &AttentionInputs, spec: &MaskSpec) -> Result<Matrix> {
    focus_sparse_attention(inp, &spec.primary_only())
}

/// Dense O(T²) attention with masked logits excluded; the ground truth for
/// every exactness check.
pub fn masked_reference(inp: &AttentionInputs, mask: &Mask) -> Result<Matrix> {
    let t = inp.len();
    if mask.shape() != (t, t) {
        return Err(Error::Shape {
            op: "masked_reference",
            lhs: (t, t),
            rhs: mask.shape(),
        });
    }
    let mut out = Matrix::zeros(t, inp.value_dim());
    let mut keys = Vec::with_capacity(t);
    let mut logits = Vec::with_capacity(t);
    for i in 0..t {
        keys.clear();
        keys.extend((0..t).filter(|&j| mask.get(i, j)));
        if attend_row(inp, i, &keys, &mut logits, out.row_mut(i)).is_none() {
            return Err(Error::EmptyMaskRow { row: i });
        }
    }
    Ok(out)
}
