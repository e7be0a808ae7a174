//! Python bindings for the sparse attention core.
//!
//! Matrices cross the boundary as lists of rows (`list[list[float]]`).

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use focus_core::attention::{full_attention as dense_attention, gate_value, AttentionInputs};
use focus_core::diagnostics;
use focus_core::grouping::{self, HardAssignment, SoftAssignment};
use focus_core::sparse;
use focus_core::Matrix;

type Rows = Vec<Vec<f64>>;

fn err(e: focus_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &Rows) -> PyResult<Matrix> {
    Matrix::from_rows(rows).map_err(err)
}

fn soft(weights: &Rows) -> PyResult<SoftAssignment> {
    SoftAssignment::new(matrix(weights)?).map_err(err)
}

fn inputs(q: &Rows, k: &Rows, v: &Rows, window: usize) -> PyResult<AttentionInputs> {
    AttentionInputs::new(matrix(q)?, matrix(k)?, matrix(v)?, window).map_err(err)
}

/// Hard top-k group memberships plus a local window.
#[pyclass(name = "MaskSpec", frozen)]
pub struct PyMaskSpec {
    inner: sparse::MaskSpec,
}

#[pymethods]
impl PyMaskSpec {
    #[new]
    fn new(window: usize, topk: Vec<Vec<usize>>, groups: usize) -> PyResult<Self> {
        let a = HardAssignment::from_topk(topk, groups).map_err(err)?;
        Ok(Self { inner: sparse::MaskSpec::new(window, a).map_err(err)? })
    }

    /// Membership from the top-`k` entries of each row of a soft assignment.
    #[staticmethod]
    fn from_weights(weights: Rows, k: usize, window: usize) -> PyResult<Self> {
        let a = grouping::harden(&soft(&weights)?, k).map_err(err)?;
        Ok(Self { inner: sparse::MaskSpec::new(window, a).map_err(err)? })
    }

    #[getter]
    fn window(&self) -> usize {
        self.inner.window()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn groups(&self) -> usize {
        self.inner.groups()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn attends(&self, i: usize, j: usize) -> bool {
        self.inner.attends(i, j)
    }

    fn mask(&self) -> Vec<Vec<bool>> {
        let m = sparse::build_mask(&self.inner);
        (0..m.rows()).map(|i| (0..m.cols()).map(|j| m.get(i, j)).collect()).collect()
    }

    fn pair_cost(&self) -> PyPairCost {
        sparse::pair_cost(&self.inner).into()
    }

    fn __repr__(&self) -> String {
        format!("MaskSpec(T={}, K={}, k={}, w={})", self.inner.len(), self.groups(), self.k(), self.window())
    }
}

#[pyclass(name = "PairCost", frozen, get_all)]
pub struct PyPairCost {
    full_pairs: u64,
    focus_pairs: u64,
    same_group_pairs: u64,
    cross_local_pairs: u64,
    ratio: f64,
}

impl From<sparse::PairCost> for PyPairCost {
    fn from(c: sparse::PairCost) -> Self {
        Self {
            full_pairs: c.full_pairs,
            focus_pairs: c.focus_pairs,
            same_group_pairs: c.same_group_pairs,
            cross_local_pairs: c.cross_local_pairs,
            ratio: c.ratio,
        }
    }
}

#[pymethods]
impl PyPairCost {
    fn __repr__(&self) -> String {
        format!("PairCost(full={}, focus={}, ratio={:.3})", self.full_pairs, self.focus_pairs, self.ratio)
    }
}

#[pyfunction]
#[pyo3(signature = (scores, tau = 0.1, iters = 3))]
fn sinkhorn(scores: Rows, tau: f64, iters: usize) -> PyResult<Rows> {
    Ok(grouping::sinkhorn_normalize(&matrix(&scores)?, tau, iters).map_err(err)?.weights().to_rows())
}

#[pyfunction]
#[pyo3(signature = (scores, tau = 0.1))]
fn softmax_assign(scores: Rows, tau: f64) -> PyResult<Rows> {
    Ok(grouping::softmax_normalize(&matrix(&scores)?, tau).map_err(err)?.weights().to_rows())
}

#[pyfunction]
#[pyo3(signature = (affinity, sharpness = 10.0, offset = 0.5))]
fn gate(affinity: f64, sharpness: f64, offset: f64) -> f64 {
    gate_value(affinity, sharpness, offset)
}

/// Sparse attention through the disjoint two-pass decomposition.
#[pyfunction]
fn focus_attention(q: Rows, k: Rows, v: Rows, spec: &PyMaskSpec) -> PyResult<Rows> {
    let inp = inputs(&q, &k, &v, spec.inner.window())?;
    Ok(sparse::focus_sparse_attention(&inp, &spec.inner).map_err(err)?.to_rows())
}

/// Dense attention restricted to the hard mask of `spec`.
#[pyfunction]
fn masked_reference(q: Rows, k: Rows, v: Rows, spec: &PyMaskSpec) -> PyResult<Rows> {
    let inp = inputs(&q, &k, &v, spec.inner.window())?;
    Ok(sparse::masked_reference(&inp, &sparse::build_mask(&spec.inner)).map_err(err)?.to_rows())
}

#[pyfunction]
fn full_attention(q: Rows, k: Rows, v: Rows) -> PyResult<Rows> {
    Ok(dense_attention(&inputs(&q, &k, &v, 1)?).to_rows())
}

#[pyfunction]
fn closed_form_pairs(group_sizes: Vec<usize>, t: usize, window: usize) -> f64 {
    sparse::closed_form_pairs(&group_sizes, t, window)
}

#[pyfunction]
fn dominance(weights: Rows) -> PyResult<f64> {
    Ok(diagnostics::dominance(&soft(&weights)?))
}

#[pyfunction]
fn balance(weights: Rows) -> PyResult<Vec<f64>> {
    Ok(diagnostics::balance(&soft(&weights)?))
}

/// Primary-group agreement under the best relabeling.
#[pyfunction]
fn stability(prev: Vec<usize>, curr: Vec<usize>, groups: usize) -> PyResult<f64> {
    let a = HardAssignment::from_primary(&prev, groups).map_err(err)?;
    let b = HardAssignment::from_primary(&curr, groups).map_err(err)?;
    diagnostics::stability(&a, &b).map_err(err)
}

#[pymodule]
fn focus_attn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMaskSpec>()?;
    m.add_class::<PyPairCost>()?;
    m.add_function(wrap_pyfunction!(sinkhorn, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_assign, m)?)?;
    m.add_function(wrap_pyfunction!(gate, m)?)?;
    m.add_function(wrap_pyfunction!(focus_attention, m)?)?;
    m.add_function(wrap_pyfunction!(masked_reference, m)?)?;
    m.add_function(wrap_pyfunction!(full_attention, m)?)?;
    m.add_function(wrap_pyfunction!(closed_form_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(dominance, m)?)?;
    m.add_function(wrap_pyfunction!(balance, m)?)?;
    m.add_function(wrap_pyfunction!(stability, m)?)?;
    Ok(())
}
