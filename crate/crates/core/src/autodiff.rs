//! Reverse-mode differentiation over a tape of matrix ops.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order; [`Tape::backward`] walks it once, back to front.
//! Only the op kinds needed by the routing and toy-model paths are provided.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, softmax_in_place, Mask, Matrix, Real};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    ClampMin(Var, Real),
    NormalizeRows(Var),
    NormalizeCols(Var),
    /// Row softmax of `scale · x` restricted to `mask`; masked entries are 0.
    MaskedSoftmax(Var, Real),
    /// Replaces entries selected by `mask` with a constant.
    Fill(Var, Rc<Mask>),
    Gather(Var, Rc<Vec<usize>>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    RmsNorm(Var, Real),
    CrossEntropy(Var, Rc<Vec<usize>>),
    Sum(Var),
    ColSums(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` for nodes that do not depend on a leaf.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Const,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Same value as `v`, with no gradient flowing back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(value, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: Real) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: Real) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.push(value, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(Real::exp);
        self.push(value, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(Real::ln);
        self.push(value, Op::Log(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(Real::tanh);
        self.push(value, Op::Tanh(a), &[a])
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: Real) -> Var {
        let value = self.value(a).map(|x| x.max(floor));
        self.push(value, Op::ClampMin(a, floor), &[a])
    }

    /// Divides every row by its sum.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let sums = x.row_sums();
        let value = Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) / sums[i]);
        self.push(value, Op::NormalizeRows(a), &[a])
    }

    /// Divides every column by its sum.
    pub fn normalize_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let sums = x.col_sums();
        let value = Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) / sums[j]);
        self.push(value, Op::NormalizeCols(a), &[a])
    }

    /// Row softmax of `scale · x`, optionally restricted to `mask`. Every
    /// row must keep at least one entry.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<Rc<Mask>>, scale: Real) -> Result<Var> {
        let x = self.value(a);
        let mut value = x.clone();
        if let Some(m) = &mask {
            if m.shape() != x.shape() {
                return Err(Error::Shape {
                    op: "masked_softmax",
                    lhs: x.shape(),
                    rhs: m.shape(),
                });
            }
        }
        for i in 0..x.rows() {
            match &mask {
                None => softmax_in_place(value.row_mut(i), scale),
                Some(m) => {
                    let keep: Vec<usize> = (0..x.cols()).filter(|&j| m.get(i, j)).collect();
                    if keep.is_empty() {
                        return Err(Error::EmptyMaskRow { row: i });
                    }
                    let mut buf: Vec<Real> = keep.iter().map(|&j| x.get(i, j)).collect();
                    softmax_in_place(&mut buf, scale);
                    let row = value.row_mut(i);
                    row.iter_mut().for_each(|v| *v = 0.0);
                    for (&j, p) in keep.iter().zip(buf) {
                        row[j] = p;
                    }
                }
            }
        }
        Ok(self.push(value, Op::MaskedSoftmax(a, scale), &[a]))
    }

    /// Entries where `mask` is set become `fill`; the rest pass through.
    pub fn fill(&mut self, a: Var, mask: Rc<Mask>, fill: Real) -> Result<Var> {
        let x = self.value(a);
        if mask.shape() != x.shape() {
            return Err(Error::Shape {
                op: "fill",
                lhs: x.shape(),
                rhs: mask.shape(),
            });
        }
        let value = Matrix::from_fn(x.rows(), x.cols(), |i, j| {
            if mask.get(i, j) {
                fill
            } else {
                x.get(i, j)
            }
        });
        Ok(self.push(value, Op::Fill(a, mask), &[a]))
    }

    /// Row lookup: output row `r` is `table[ids[r]]`.
    pub fn gather(&mut self, table: Var, ids: Rc<Vec<usize>>) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::invalid("ids", format!("row {bad} out of range for {} rows", t.rows())));
        }
        let value = t.gather_rows(&ids);
        Ok(self.push(value, Op::Gather(table, ids), &[table]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_cols(start, len);
        self.push(value, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_cols(&mats)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// `x / sqrt(mean(x²) + eps)` per row.
    pub fn rms_norm(&mut self, a: Var, eps: Real) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for i in 0..x.rows() {
            let r = rms(x.row(i), eps);
            value.row_mut(i).iter_mut().for_each(|v| *v /= r);
        }
        self.push(value, Op::RmsNorm(a, eps), &[a])
    }

    /// Mean next-token cross-entropy; row `r` of `logits` scores `targets[r]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Rc<Vec<usize>>) -> Result<Var> {
        let z = self.value(logits);
        if targets.len() != z.rows() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: z.shape(),
                rhs: (targets.len(), 1),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= z.cols()) {
            return Err(Error::invalid("targets", format!("class {bad} out of range")));
        }
        let lse = z.logsumexp_rows(None);
        let total = targets
            .iter()
            .enumerate()
            .fold(0.0, |acc, (r, &t)| acc + (lse[r] - z.get(r, t)));
        let value = Matrix::scalar(total / z.rows() as Real);
        Ok(self.push(value, Op::CrossEntropy(logits, targets), &[logits]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    /// `1 × cols` row of column sums.
    pub fn col_sums(&mut self, a: Var) -> Var {
        let sums = self.value(a).col_sums();
        let value = Matrix::new(1, sums.len(), sums).expect("shape");
        self.push(value, Op::ColSums(a), &[a])
    }

    /// Accumulates d`root`/d`node` for every node that depends on a leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.shape() != (1, 1) {
            return Err(Error::NonScalarRoot {
                rows: root_value.rows(),
                cols: root_value.cols(),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            for p in parents(&node.op) {
                if p.0 >= idx {
                    return Err(Error::Cycle {
                        node: idx,
                        parent: p.0,
                    });
                }
            }
            self.propagate(idx, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, dy: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut acc = |v: Var, g: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;

        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    acc(*a, dy.matmul_t(val(*b))?);
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, val(*a).t_matmul(dy)?);
                }
            }
            Op::MatMulT(a, b) => {
                if self.nodes[a.0].needs_grad {
                    acc(*a, dy.matmul(val(*b))?);
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, dy.t_matmul(val(*a))?);
                }
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::Mul(a, b) => {
                acc(*a, dy.hadamard(val(*b))?);
                acc(*b, dy.hadamard(val(*a))?);
            }
            Op::Scale(a, s) => acc(*a, dy.scale(*s)),
            Op::AddScalar(a) => acc(*a, dy.clone()),
            Op::Exp(a) => acc(*a, dy.hadamard(y)?),
            Op::Log(a) => acc(*a, dy.zip_with(val(*a), "log'", |g, x| g / x)?),
            Op::Sigmoid(a) => acc(*a, dy.zip_with(y, "sigmoid'", |g, s| g * s * (1.0 - s))?),
            Op::Tanh(a) => acc(*a, dy.zip_with(y, "tanh'", |g, t| g * (1.0 - t * t))?),
            Op::ClampMin(a, floor) => {
                let f = *floor;
                acc(*a, dy.zip_with(val(*a), "clamp'", |g, x| if x > f { g } else { 0.0 })?)
            }
            Op::NormalizeRows(a) => {
                let x = val(*a);
                let sums = x.row_sums();
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let inner = crate::tensor::dot(dy.row(i), y.row(i));
                    for j in 0..x.cols() {
                        dx.set(i, j, (dy.get(i, j) - inner) / sums[i]);
                    }
                }
                acc(*a, dx);
            }
            Op::NormalizeCols(a) => {
                let x = val(*a);
                let sums = x.col_sums();
                let mut inner = vec![0.0; x.cols()];
                for i in 0..x.rows() {
                    for j in 0..x.cols() {
                        inner[j] += dy.get(i, j) * y.get(i, j);
                    }
                }
                let dx = Matrix::from_fn(x.rows(), x.cols(), |i, j| (dy.get(i, j) - inner[j]) / sums[j]);
                acc(*a, dx);
            }
            Op::MaskedSoftmax(a, scale) => {
                // Masked entries have y = 0, so they receive no gradient.
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let inner = crate::tensor::dot(dy.row(i), y.row(i));
                    for j in 0..y.cols() {
                        dx.set(i, j, scale * y.get(i, j) * (dy.get(i, j) - inner));
                    }
                }
                acc(*a, dx);
            }
            Op::Fill(a, mask) => {
                let dx = Matrix::from_fn(dy.rows(), dy.cols(), |i, j| {
                    if mask.get(i, j) {
                        0.0
                    } else {
                        dy.get(i, j)
                    }
                });
                acc(*a, dx);
            }
            Op::Gather(table, ids) => {
                let t = val(*table);
                let mut dt = Matrix::zeros(t.rows(), t.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (d, &g) in dt.row_mut(id).iter_mut().zip(dy.row(r)) {
                        *d += g;
                    }
                }
                acc(*table, dt);
            }
            Op::SliceCols(a, start) => {
                let x = val(*a);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    dx.row_mut(i)[*start..*start + dy.cols()].copy_from_slice(dy.row(i));
                }
                acc(*a, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    acc(*p, dy.slice_cols(offset, w));
                    offset += w;
                }
            }
            Op::RmsNorm(a, eps) => {
                let x = val(*a);
                let n = x.cols() as Real;
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let r = rms(x.row(i), *eps);
                    let inner = crate::tensor::dot(dy.row(i), y.row(i)) / n;
                    for j in 0..x.cols() {
                        dx.set(i, j, (dy.get(i, j) - y.get(i, j) * inner) / r);
                    }
                }
                acc(*a, dx);
            }
            Op::CrossEntropy(logits, targets) => {
                let z = val(*logits);
                let g = dy.item() / z.rows() as Real;
                let mut dz = z.row_softmax(1.0);
                for (r, &t) in targets.iter().enumerate() {
                    let v = dz.get(r, t);
                    dz.set(r, t, v - 1.0);
                }
                acc(*logits, dz.scale(g));
            }
            Op::Sum(a) => {
                let x = val(*a);
                acc(*a, Matrix::filled(x.rows(), x.cols(), dy.item()));
            }
            Op::ColSums(a) => {
                let x = val(*a);
                acc(*a, Matrix::from_fn(x.rows(), x.cols(), |_, j| dy.get(0, j)));
            }
        }
        Ok(())
    }
}

fn rms(row: &[Real], eps: Real) -> Real {
    let ms = row.iter().fold(0.0, |acc, &v| acc + v * v) / row.len() as Real;
    (ms + eps).sqrt()
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Const => vec![],
        Op::MatMul(a, b) | Op::MatMulT(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Sigmoid(a)
        | Op::Tanh(a)
        | Op::ClampMin(a, _)
        | Op::NormalizeRows(a)
        | Op::NormalizeCols(a)
        | Op::MaskedSoftmax(a, _)
        | Op::Fill(a, _)
        | Op::Gather(a, _)
        | Op::SliceCols(a, _)
        | Op::RmsNorm(a, _)
        | Op::CrossEntropy(a, _)
        | Op::Sum(a)
        | Op::ColSums(a) => vec![*a],
        Op::ConcatCols(parts) => parts.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng::{normal_matrix, SeedStream};

    /// Central differences of `f` around `x`, entry by entry.
    fn finite_diff(x: &Matrix, f: &dyn Fn(&Matrix) -> Real) -> Matrix {
        let h = 1e-6;
        let mut g = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            for j in 0..x.cols() {
                let mut xp = x.clone();
                xp.set(i, j, x.get(i, j) + h);
                let mut xm = x.clone();
                xm.set(i, j, x.get(i, j) - h);
                g.set(i, j, (f(&xp) - f(&xm)) / (2.0 * h));
            }
        }
        g
    }

    fn assert_close(analytic: &Matrix, numeric: &Matrix, tol: Real) {
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let denom = a.abs().max(n.abs()).max(1e-8);
            assert!((a - n).abs() / denom < tol || (a - n).abs() < 1e-10, "{a} vs {n}");
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::from_fn(3, 2, |i, j| (i * 2 + j) as Real));
        let s = tape.sum(a);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &Matrix::filled(3, 2, 1.0));
    }

    #[test]
    fn product_gradients_match_identities() {
        let streams = SeedStream::new(3);
        let a0 = normal_matrix(&mut streams.stream(0), 3, 4, 1.0);
        let b0 = normal_matrix(&mut streams.stream(1), 4, 2, 1.0);
        let mut tape = Tape::new();
        let a = tape.leaf(a0.clone());
        let b = tape.leaf(b0.clone());
        let ab = tape.matmul(a, b).unwrap();
        let s = tape.sum(ab);
        let g = tape.backward(s).unwrap();
        // d sum(AB)/dA = 1 Bᵀ, d/dB = Aᵀ 1.
        let ones = Matrix::filled(3, 2, 1.0);
        assert!(g.get(a).unwrap().max_abs_diff(&ones.matmul_t(&b0).unwrap()) < 1e-12);
        assert!(g.get(b).unwrap().max_abs_diff(&a0.t_matmul(&ones).unwrap()) < 1e-12);
        let fd = finite_diff(&a0, &|x| x.matmul(&b0).unwrap().sum());
        assert!(g.get(a).unwrap().max_abs_diff(&fd) < 1e-8);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::zeros(2, 2));
        assert!(matches!(tape.backward(a), Err(Error::NonScalarRoot { .. })));
    }

    #[test]
    fn constants_and_detach_block_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::filled(2, 2, 1.5));
        let d = tape.detach(a);
        let m = tape.mul(a, d).unwrap();
        let s = tape.sum(m);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &Matrix::filled(2, 2, 1.5));
        assert!(g.get(d).is_none());
    }

    /// Every op kind, composed, against central differences.
    #[test]
    fn composite_graph_matches_finite_differences() {
        let streams = SeedStream::new(5);
        let x0 = normal_matrix(&mut streams.stream(0), 4, 3, 0.7);
        let w0 = normal_matrix(&mut streams.stream(1), 3, 4, 0.7);
        let causal = Rc::new(Mask::causal(4));
        let diag = Rc::new(Mask::identity(4));
        let ids = Rc::new(vec![2usize, 0, 1, 2]);
        let targets = Rc::new(vec![0usize, 3, 1, 2]);

        let build = |tape: &mut Tape, x: Var, w: Var| -> Var {
            let xn = tape.rms_norm(x, 1e-6);
            let h = tape.matmul(xn, w).unwrap();
            let t = tape.tanh(h);
            let e = tape.exp(t);
            let c = tape.clamp_min(e, 0.5);
            let nc = tape.normalize_cols(c);
            let nr = tape.normalize_rows(nc);
            let aff = tape.matmul_t(nr, nr).unwrap();
            let sh = tape.add_scalar(aff, -0.3);
            let sc = tape.scale(sh, 4.0);
            let sg = tape.sigmoid(sc);
            let gate = tape.fill(sg, diag.clone(), 1.0).unwrap();
            let mixed = tape.mul(gate, aff).unwrap();
            let p = tape.masked_softmax(mixed, Some(causal.clone()), 2.0).unwrap();
            let o = tape.matmul(p, h).unwrap();
            let left = tape.slice_cols(o, 0, 2);
            let right = tape.slice_cols(o, 2, 2);
            let cat = tape.concat_cols(&[right, left]).unwrap();
            let g = tape.gather(cat, ids.clone()).unwrap();
            let lg = tape.log(nr);
            let ent = tape.mul(nr, lg).unwrap();
            let es = tape.sum(ent);
            let cs = tape.col_sums(g);
            let css = tape.sum(cs);
            let ce = tape.cross_entropy(g, targets.clone()).unwrap();
            let a1 = tape.add(ce, es).unwrap();
            let s2 = tape.scale(css, 0.1);
            tape.add(a1, s2).unwrap()
        };

        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let w = tape.leaf(w0.clone());
        let root = build(&mut tape, x, w);
        let grads = tape.backward(root).unwrap();

        let eval = |xv: &Matrix, wv: &Matrix| {
            let mut t = Tape::new();
            let x = t.leaf(xv.clone());
            let w = t.leaf(wv.clone());
            let r = build(&mut t, x, w);
            t.value(r).item()
        };
        let fd_x = finite_diff(&x0, &|m| eval(m, &w0));
        let fd_w = finite_diff(&w0, &|m| eval(&x0, m));
        assert_close(grads.get(x).unwrap(), &fd_x, 1e-5);
        assert_close(grads.get(w).unwrap(), &fd_w, 1e-5);
    }
}
