//! Centroid routing.
//!
//! Hidden states are projected into a small routing space, scored against
//! `K` centroids and normalised into a per-token group distribution, either
//! by alternating Sinkhorn normalisation (balanced) or a plain row softmax
//! (the collapse-prone baseline). [`harden`] turns a soft assignment into
//! top-k memberships for the sparse inference path.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::dump::{read_tensor, write_tensor};
use crate::tensor::{Matrix, Real};

/// Entries of the Sinkhorn kernel are floored here to keep every column and
/// row sum strictly positive.
pub const SINKHORN_FLOOR: Real = 1e-30;

/// Default routing hyperparameters.
pub mod defaults {
    use crate::tensor::Real;

    pub const GROUPS: usize = 8;
    pub const ROUTING_DIM: usize = 16;
    pub const TAU: Real = 0.1;
    pub const SINKHORN_ITERS: usize = 10;
    pub const WINDOW: usize = 128;
    pub const GATE_SHARPNESS: Real = 10.0;
    pub const GATE_OFFSET: Real = 0.5;
}

/// Per-layer routing parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidBank {
    /// `K × d_g`
    pub centroids: Matrix,
    /// `d × d_g`
    pub projection: Matrix,
    pub tau: Real,
    pub gate_sharpness: Real,
    pub gate_offset: Real,
    pub sinkhorn_iters: usize,
}

/// JSON sidecar stored next to a bank's tensor dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankSidecar {
    #[serde(rename = "K")]
    pub groups: usize,
    pub d_g: usize,
    pub d: usize,
    pub tau: Real,
    pub lambda: Real,
    pub a0: Real,
    #[serde(rename = "N")]
    pub sinkhorn_iters: usize,
}

impl CentroidBank {
    pub fn new(
        centroids: Matrix,
        projection: Matrix,
        tau: Real,
        gate_sharpness: Real,
        gate_offset: Real,
        sinkhorn_iters: usize,
    ) -> Result<Self> {
        let bank = Self {
            centroids,
            projection,
            tau,
            gate_sharpness,
            gate_offset,
            sinkhorn_iters,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        let (k, dg) = self.centroids.shape();
        let (d, dg2) = self.projection.shape();
        if k < 2 {
            return Err(Error::invalid("K", format!("need at least 2 groups, got {k}")));
        }
        if dg != dg2 {
            return Err(Error::Shape {
                op: "CentroidBank",
                lhs: self.centroids.shape(),
                rhs: self.projection.shape(),
            });
        }
        if dg == 0 || dg > d {
            return Err(Error::invalid("d_g", format!("need 1 <= d_g <= d, got d_g={dg}, d={d}")));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("tau", format!("must be > 0, got {}", self.tau)));
        }
        if !(self.gate_sharpness > 0.0) {
            return Err(Error::invalid(
                "lambda",
                format!("must be > 0, got {}", self.gate_sharpness),
            ));
        }
        if !self.gate_offset.is_finite() {
            return Err(Error::invalid("a0", "must be finite"));
        }
        self.centroids.check_finite("CentroidBank::centroids")?;
        self.projection.check_finite("CentroidBank::projection")?;
        Ok(())
    }

    pub fn groups(&self) -> usize {
        self.centroids.rows()
    }

    pub fn routing_dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn model_dim(&self) -> usize {
        self.projection.rows()
    }

    /// `K·d_g + d·d_g`.
    pub fn param_count(&self) -> usize {
        routing_param_count(self.groups(), self.routing_dim(), self.model_dim())
    }

    pub fn sidecar(&self) -> BankSidecar {
        BankSidecar {
            groups: self.groups(),
            d_g: self.routing_dim(),
            d: self.model_dim(),
            tau: self.tau,
            lambda: self.gate_sharpness,
            a0: self.gate_offset,
            sinkhorn_iters: self.sinkhorn_iters,
        }
    }

    /// Writes `<stem>.ftns` (centroids then projection) and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(stem.with_extension("ftns"))?);
        write_tensor(&mut w, &self.centroids)?;
        write_tensor(&mut w, &self.projection)?;
        let side = File::create(stem.with_extension("json"))?;
        serde_json::to_writer_pretty(side, &self.sidecar())?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let side: BankSidecar =
            serde_json::from_reader(BufReader::new(File::open(stem.with_extension("json"))?))?;
        let mut r = BufReader::new(File::open(stem.with_extension("ftns"))?);
        let centroids = read_tensor(&mut r)?;
        let projection = read_tensor(&mut r)?;
        if centroids.shape() != (side.groups, side.d_g) {
            return Err(Error::Checkpoint {
                field: "centroids".into(),
                reason: format!("shape {:?} disagrees with sidecar K={}, d_g={}", centroids.shape(), side.groups, side.d_g),
            });
        }
        if projection.shape() != (side.d, side.d_g) {
            return Err(Error::Checkpoint {
                field: "projection".into(),
                reason: format!("shape {:?} disagrees with sidecar d={}, d_g={}", projection.shape(), side.d, side.d_g),
            });
        }
        Self::new(centroids, projection, side.tau, side.lambda, side.a0, side.sinkhorn_iters)
    }
}

pub fn routing_param_count(groups: usize, routing_dim: usize, model_dim: usize) -> usize {
    groups * routing_dim + model_dim * routing_dim
}

/// `T × K` matrix of nonnegative per-token group weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftAssignment {
    weights: Matrix,
}

impl SoftAssignment {
    /// Wraps a weight matrix; entries must be finite and nonnegative.
    pub fn new(weights: Matrix) -> Result<Self> {
        weights.check_finite("SoftAssignment")?;
        if weights.data().iter().any(|&x| x < 0.0) {
            return Err(Error::invalid("G", "assignment weights must be nonnegative"));
        }
        if weights.cols() < 2 {
            return Err(Error::invalid("G", "need at least 2 groups"));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn into_weights(self) -> Matrix {
        self.weights
    }

    pub fn tokens(&self) -> usize {
        self.weights.rows()
    }

    pub fn groups(&self) -> usize {
        self.weights.cols()
    }

    pub fn row(&self, i: usize) -> &[Real] {
        self.weights.row(i)
    }

    pub fn row_sums(&self) -> Vec<Real> {
        self.weights.row_sums()
    }

    pub fn col_sums(&self) -> Vec<Real> {
        self.weights.col_sums()
    }

    /// Largest relative deviation of a column sum from the balanced `T/K`.
    pub fn max_column_deviation(&self) -> Real {
        column_deviation(&self.weights)
    }

    /// Argmax per token, ties to the lower group index.
    pub fn primary(&self) -> Vec<usize> {
        (0..self.tokens()).map(|i| argmax(self.row(i))).collect()
    }
}

pub(crate) fn column_deviation(w: &Matrix) -> Real {
    let target = w.rows() as Real / w.cols() as Real;
    w.col_sums()
        .iter()
        .map(|&c| (c / target - 1.0).abs())
        .fold(0.0, Real::max)
}

pub(crate) fn argmax(row: &[Real]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// `S = (H·W_g)·Cᵀ`, un-normalised and un-tempered.
pub fn route_scores(hidden: &Matrix, bank: &CentroidBank) -> Result<Matrix> {
    if hidden.cols() != bank.model_dim() {
        return Err(Error::Shape {
            op: "route_scores",
            lhs: hidden.shape(),
            rhs: bank.projection.shape(),
        });
    }
    hidden.check_finite("route_scores")?;
    hidden.matmul(&bank.projection)?.matmul_t(&bank.centroids)
}

fn check_tau(tau: Real) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("tau", format!("must be > 0, got {tau}")))
    }
}

/// Alternating Sinkhorn normalisation of `exp(S/τ)`.
///
/// Each of the `iters` rounds divides by column sums (over tokens) and then
/// by row sums (over groups), so the result always ends row-normalised.
/// The global max of `S/τ` is subtracted before exponentiating.
pub fn sinkhorn_normalize(scores: &Matrix, tau: Real, iters: usize) -> Result<SoftAssignment> {
    check_tau(tau)?;
    if iters == 0 {
        return Err(Error::invalid("N", "need at least one Sinkhorn iteration"));
    }
    scores.check_finite("sinkhorn_normalize")?;
    let inv = 1.0 / tau;
    let m = scores.max() * inv;
    let mut q = scores.map(|s| (s * inv - m).exp().max(SINKHORN_FLOOR));
    let (t, k) = q.shape();
    for _ in 0..iters {
        let cols = q.col_sums();
        for i in 0..t {
            for (j, v) in q.row_mut(i).iter_mut().enumerate() {
                *v = (*v / cols[j]).max(SINKHORN_FLOOR);
            }
        }
        for i in 0..t {
            let row = q.row_mut(i);
            let s = row.iter().fold(0.0, |acc, &x| acc + x);
            row.iter_mut().for_each(|v| *v = (*v / s).max(SINKHORN_FLOOR));
        }
    }
    debug_assert_eq!(q.cols(), k);
    SoftAssignment::new(q)
}

/// Differentiable twin of [`sinkhorn_normalize`]; the N rounds are unrolled
/// onto the tape.
pub fn sinkhorn_graph(tape: &mut Tape, scores: Var, tau: Real, iters: usize) -> Result<Var> {
    check_tau(tau)?;
    if iters == 0 {
        return Err(Error::invalid("N", "need at least one Sinkhorn iteration"));
    }
    // The shift cancels in the first column normalisation, so it is a
    // constant with respect to the gradient.
    let inv = 1.0 / tau;
    let shift = -(tape.value(scores).max() * inv);
    let scaled = tape.scale(scores, inv);
    let shifted = tape.add_scalar(scaled, shift);
    let e = tape.exp(shifted);
    let mut q = tape.clamp_min(e, SINKHORN_FLOOR);
    for _ in 0..iters {
        let c = tape.normalize_cols(q);
        q = tape.clamp_min(c, SINKHORN_FLOOR);
        let r = tape.normalize_rows(q);
        q = tape.clamp_min(r, SINKHORN_FLOOR);
    }
    Ok(q)
}

/// Row softmax of `S/τ` with no column constraint.
pub fn softmax_normalize(scores: &Matrix, tau: Real) -> Result<SoftAssignment> {
    check_tau(tau)?;
    scores.check_finite("softmax_normalize")?;
    SoftAssignment::new(scores.row_softmax(1.0 / tau))
}

/// Differentiable twin of [`softmax_normalize`].
pub fn softmax_graph(tape: &mut Tape, scores: Var, tau: Real) -> Result<Var> {
    check_tau(tau)?;
    tape.masked_softmax(scores, None, 1.0 / tau)
}

/// Per-token top-k group memberships.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardAssignment {
    groups: usize,
    k: usize,
    /// Row-major `T × k`, each row in descending weight order.
    topk: Vec<usize>,
}

impl HardAssignment {
    /// `topk[i]` lists token `i`'s groups, best first.
    pub fn from_topk(topk: Vec<Vec<usize>>, groups: usize) -> Result<Self> {
        let k = topk.first().map_or(1, Vec::len);
        if groups > 64 {
            return Err(Error::invalid("K", "at most 64 groups are supported"));
        }
        if k == 0 || k > groups {
            return Err(Error::invalid("k", format!("need 1 <= k <= K={groups}, got {k}")));
        }
        let mut flat = Vec::with_capacity(topk.len() * k);
        for (i, row) in topk.iter().enumerate() {
            if row.len() != k {
                return Err(Error::invalid("topk", format!("token {i} has {} groups, expected {k}", row.len())));
            }
            for (a, &g) in row.iter().enumerate() {
                if g >= groups {
                    return Err(Error::invalid("topk", format!("token {i}: group {g} >= K={groups}")));
                }
                if row[..a].contains(&g) {
                    return Err(Error::invalid("topk", format!("token {i}: group {g} repeated")));
                }
            }
            flat.extend_from_slice(row);
        }
        Ok(Self {
            groups,
            k,
            topk: flat,
        })
    }

    /// Single-membership assignment from primary group ids.
    pub fn from_primary(primary: &[usize], groups: usize) -> Result<Self> {
        Self::from_topk(primary.iter().map(|&g| vec![g]).collect(), groups)
    }

    pub fn tokens(&self) -> usize {
        self.topk.len() / self.k
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn topk(&self, i: usize) -> &[usize] {
        &self.topk[i * self.k..(i + 1) * self.k]
    }

    pub fn primary(&self, i: usize) -> usize {
        self.topk[i * self.k]
    }

    pub fn primaries(&self) -> Vec<usize> {
        (0..self.tokens()).map(|i| self.primary(i)).collect()
    }

    /// Membership of token `i` as a bit set over groups.
    pub fn member_bits(&self, i: usize) -> u64 {
        self.topk(i).iter().fold(0u64, |acc, &g| acc | (1u64 << g))
    }

    pub fn contains(&self, i: usize, group: usize) -> bool {
        self.topk(i).contains(&group)
    }

    pub fn shares_group(&self, i: usize, j: usize) -> bool {
        self.member_bits(i) & self.member_bits(j) != 0
    }
}

/// Top-k groups per token by weight; ties go to the lower group index, and
/// the primary group is the first entry.
pub fn harden(g: &SoftAssignment, k: usize) -> Result<HardAssignment> {
    let groups = g.groups();
    if k == 0 || k > groups {
        return Err(Error::invalid("k", format!("need 1 <= k <= K={groups}, got {k}")));
    }
    if groups > 64 {
        return Err(Error::invalid("K", "at most 64 groups are supported"));
    }
    let topk = (0..g.tokens())
        .map(|i| {
            let row = g.row(i);
            let mut idx: Vec<usize> = (0..groups).collect();
            // Stable sort keeps lower indices first among equal weights.
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
            idx.truncate(k);
            idx
        })
        .collect();
    HardAssignment::from_topk(topk, groups)
}

/// `g_iᵀ g_j`.
pub fn affinity(g: &SoftAssignment, i: usize, j: usize) -> Real {
    crate::tensor::dot(g.row(i), g.row(j))
}
