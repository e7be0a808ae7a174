//! Training-time attention: plain causal attention and the soft
//! group-gated variant.
//!
//! For a query `i` and key `j ≤ i` the gated logit is
//!
//! ```text
//! s_ij = (q_i·k_j / √d_h) · (local(i,j) ? 1 : σ(λ · (g_i·g_j − a₀)))
//! ```
//!
//! where `local(i,j)` holds for `0 ≤ i − j ≤ w`. All `T²/2` causal pairs
//! are evaluated.

use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grouping::{CentroidBank, SoftAssignment};
use crate::tensor::{dot, sigmoid, softmax_in_place, Mask, Matrix, Real};

/// Per-head attention inputs; attention is always causal.
#[derive(Clone, Debug)]
pub struct AttentionInputs {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub window: usize,
}

impl AttentionInputs {
    pub fn new(q: Matrix, k: Matrix, v: Matrix, window: usize) -> Result<Self> {
        if q.shape() != k.shape() {
            return Err(Error::Shape {
                op: "AttentionInputs(q, k)",
                lhs: q.shape(),
                rhs: k.shape(),
            });
        }
        if v.rows() != q.rows() {
            return Err(Error::Shape {
                op: "AttentionInputs(q, v)",
                lhs: q.shape(),
                rhs: v.shape(),
            });
        }
        if q.rows() == 0 {
            return Err(Error::invalid("T", "sequence must have at least one token"));
        }
        if window == 0 {
            return Err(Error::invalid("w", "window must be at least 1"));
        }
        q.check_finite("AttentionInputs::q")?;
        k.check_finite("AttentionInputs::k")?;
        v.check_finite("AttentionInputs::v")?;
        Ok(Self { q, k, v, window })
    }

    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.q.rows() == 0
    }

    pub fn head_dim(&self) -> usize {
        self.q.cols()
    }

    pub fn value_dim(&self) -> usize {
        self.v.cols()
    }

    pub fn scale(&self) -> Real {
        1.0 / (self.head_dim() as Real).sqrt()
    }
}

/// `j ≤ i` and `i − j ≤ w`.
#[inline]
pub fn is_local(i: usize, j: usize, window: usize) -> bool {
    j <= i && i - j <= window
}

/// `σ(λ · (affinity − a₀))`.
#[inline]
pub fn gate_value(affinity: Real, sharpness: Real, offset: Real) -> Real {
    sigmoid(sharpness * (affinity - offset))
}

fn attend_rows(inp: &AttentionInputs, logits: impl Fn(usize, usize) -> Real) -> Matrix {
    let t = inp.len();
    let mut out = Matrix::zeros(t, inp.value_dim());
    let mut weights = Vec::with_capacity(t);
    for i in 0..t {
        weights.clear();
        weights.extend((0..=i).map(|j| logits(i, j)));
        softmax_in_place(&mut weights, 1.0);
        let row = out.row_mut(i);
        for (j, &p) in weights.iter().enumerate() {
            for (o, &v) in row.iter_mut().zip(inp.v.row(j)) {
                *o += p * v;
            }
        }
    }
    out
}

/// Causal softmax attention, `softmax(QKᵀ/√d_h)V` over `j ≤ i`.
pub fn full_attention(inp: &AttentionInputs) -> Matrix {
    let scale = inp.scale();
    attend_rows(inp, |i, j| dot(inp.q.row(i), inp.k.row(j)) * scale)
}

/// Pre-softmax gated logits for all causal pairs (entries above the
/// diagonal are zero and unused).
pub fn gated_scores(inp: &AttentionInputs, g: &SoftAssignment, bank: &CentroidBank) -> Result<Matrix> {
    if g.tokens() != inp.len() {
        return Err(Error::Shape {
            op: "gated_scores",
            lhs: (inp.len(), inp.head_dim()),
            rhs: (g.tokens(), g.groups()),
        });
    }
    let scale = inp.scale();
    let t = inp.len();
    Ok(Matrix::from_fn(t, t, |i, j| {
        if j > i {
            return 0.0;
        }
        let base = dot(inp.q.row(i), inp.k.row(j)) * scale;
        if is_local(i, j, inp.window) {
            base
        } else {
            let a = dot(g.row(i), g.row(j));
            base * gate_value(a, bank.gate_sharpness, bank.gate_offset)
        }
    }))
}

/// Causal attention over the gated logits of [`gated_scores`].
pub fn gated_attention_soft(
    inp: &AttentionInputs,
    g: &SoftAssignment,
    bank: &CentroidBank,
) -> Result<Matrix> {
    let s = gated_scores(inp, g, bank)?;
    Ok(attend_rows(inp, |i, j| s.get(i, j)))
}

/// Gate multipliers for a whole sequence on the tape: 1 on local pairs,
/// `σ(λ(g_i·g_j − a₀))` elsewhere. Shared by every head of a layer.
pub fn gate_graph(
    tape: &mut Tape,
    g: Var,
    window: usize,
    sharpness: Real,
    offset: Real,
) -> Result<Var> {
    let t = tape.value(g).rows();
    let local = Rc::new(Mask::from_fn(t, t, |i, j| is_local(i, j, window) || j > i));
    let aff = tape.matmul_t(g, g)?;
    let shifted = tape.add_scalar(aff, -offset);
    let sharp = tape.scale(shifted, sharpness);
    let gate = tape.sigmoid(sharp);
    tape.fill(gate, local, 1.0)
}

/// One head of gated causal attention on the tape. `gate` comes from
/// [`gate_graph`]; pass `None` for plain causal attention.
pub fn attention_graph(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    gate: Option<Var>,
    causal: &Rc<Mask>,
) -> Result<Var> {
    let dh = tape.value(q).cols();
    let raw = tape.matmul_t(q, k)?;
    let scaled = tape.scale(raw, 1.0 / (dh as Real).sqrt());
    let logits = match gate {
        Some(gv) => tape.mul(scaled, gv)?,
        None => scaled,
    };
    let p = tape.masked_softmax(logits, Some(causal.clone()), 1.0)?;
    tape.matmul(p, v)
}
