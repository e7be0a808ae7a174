use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::config::{Normalization, ToyModelConfig};
use crate::attention::{attention_graph, gate_graph};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grouping::{sinkhorn_graph, softmax_graph, CentroidBank};
use crate::tensor::rng::{normal_matrix, SeedStream};
use crate::tensor::{Mask, Matrix, Real};

const RMS_EPS: Real = 1e-6;

/// One named weight matrix. `routing` marks the parameters added by the
/// routing layer (centroids and projection); everything else is the base
/// model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub routing: bool,
}

/// Parameter indices for one transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerIndex {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub w1: usize,
    pub w2: usize,
    pub projection: usize,
    pub centroids: usize,
}

/// Pre-norm byte-level transformer with a routing gate in every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub config: ToyModelConfig,
    pub params: Vec<Param>,
    layers: Vec<LayerIndex>,
    tok_emb: usize,
    pos_emb: usize,
    w_out: usize,
}

/// Whether attention runs through the group gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoutingMode {
    /// Plain causal attention; routing parameters are unused.
    Bypass,
    Gated,
}

/// Tape handles produced by one forward pass over a single sequence.
#[derive(Clone, Debug)]
pub struct SequenceGraph {
    pub loss: Var,
    /// Per-layer `T × K` assignment; empty in bypass mode.
    pub assignments: Vec<Var>,
    /// Per-layer `T × d_g` routed vectors `h·W_g`.
    pub routed: Vec<Var>,
}

impl ToyModel {
    /// Routing scores start near `N(0, 0.1²)`, where the Sinkhorn iterations
    /// reach tight column balance.
    pub fn new(config: ToyModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let s = SeedStream::new(seed).split(0x30DE1);
        let mut stream = 0u64;
        let mut params = Vec::new();
        let mut add = |name: String, rows: usize, cols: usize, std: Real, routing: bool| {
            let value = normal_matrix(&mut s.stream(stream), rows, cols, std);
            stream += 1;
            params.push(Param { name, value, routing });
            params.len() - 1
        };
        let d = config.d;
        let inv_d = 1.0 / (d as Real).sqrt();
        let tok_emb = add("tok_emb".into(), config.vocab, d, 1.0, false);
        let pos_emb = add("pos_emb".into(), config.context, d, 0.1, false);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            layers.push(LayerIndex {
                wq: add(format!("layer{l}.wq"), d, d, inv_d, false),
                wk: add(format!("layer{l}.wk"), d, d, inv_d, false),
                wv: add(format!("layer{l}.wv"), d, d, inv_d, false),
                wo: add(format!("layer{l}.wo"), d, d, 0.5 * inv_d, false),
                w1: add(format!("layer{l}.w1"), d, config.ffn_dim, inv_d, false),
                w2: add(format!("layer{l}.w2"), config.ffn_dim, d, 0.5 / (config.ffn_dim as Real).sqrt(), false),
                projection: add(format!("layer{l}.projection"), d, config.d_g, inv_d, true),
                centroids: add(format!("layer{l}.centroids"), config.groups, config.d_g, 0.1 / (config.d_g as Real).sqrt(), true),
            });
        }
        let w_out = add("w_out".into(), d, config.vocab, 0.02, false);
        Ok(Self { config, params, layers, tok_emb, pos_emb, w_out })
    }

    /// Rebuilds a model around loaded parameters, checking names and shapes.
    pub fn from_params(config: ToyModelConfig, params: Vec<Param>) -> Result<Self> {
        let template = Self::new(config, 0)?;
        if params.len() != template.params.len() {
            return Err(Error::Checkpoint {
                field: "params".into(),
                reason: format!("expected {} tensors, found {}", template.params.len(), params.len()),
            });
        }
        for (i, (p, t)) in params.iter().zip(&template.params).enumerate() {
            if p.name != t.name {
                return Err(Error::Checkpoint {
                    field: format!("params[{i}].name"),
                    reason: format!("expected {:?}, found {:?}", t.name, p.name),
                });
            }
            if p.value.shape() != t.value.shape() {
                return Err(Error::Checkpoint {
                    field: format!("params[{i}].shape"),
                    reason: format!("{} should be {:?}, found {:?}", p.name, t.value.shape(), p.value.shape()),
                });
            }
            if p.routing != t.routing {
                return Err(Error::Checkpoint {
                    field: format!("params[{i}].routing"),
                    reason: format!("{} routing flag should be {}", p.name, t.routing),
                });
            }
            if !p.value.is_finite() {
                return Err(Error::Checkpoint { field: format!("params[{i}].value"), reason: "non-finite entries".into() });
            }
        }
        Ok(Self { params, ..template })
    }

    pub fn layers(&self) -> &[LayerIndex] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn routing_param_count(&self) -> usize {
        self.params.iter().filter(|p| p.routing).map(|p| p.value.len()).sum()
    }

    /// The routing parameters of layer `l` as a standalone bank.
    pub fn bank(&self, l: usize) -> Result<CentroidBank> {
        let li = self.layers[l];
        let c = &self.config;
        CentroidBank::new(
            self.params[li.centroids].value.clone(),
            self.params[li.projection].value.clone(),
            c.tau,
            c.lambda,
            c.a0,
            c.sinkhorn_iters,
        )
    }

    /// Places every parameter on the tape, as a leaf when `trainable` says so
    /// and as a constant otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(usize, &Param) -> bool) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| if trainable(i, p) { tape.leaf(p.value.clone()) } else { tape.constant(p.value.clone()) })
            .collect()
    }

    fn normalise(&self, tape: &mut Tape, scores: Var) -> Result<Var> {
        let c = &self.config;
        match c.normalization {
            Normalization::Sinkhorn => sinkhorn_graph(tape, scores, c.tau, c.sinkhorn_iters),
            Normalization::SoftmaxWithBalanceLoss => softmax_graph(tape, scores, c.tau),
        }
    }

    /// Next-token loss on one window: `ids[..T]` are inputs and `ids[1..]`
    /// the targets, so `ids.len()` is at most `T + 1`.
    pub fn forward_sequence(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        ids: &[usize],
        mode: RoutingMode,
        stop_grad_inputs: bool,
    ) -> Result<SequenceGraph> {
        let c = &self.config;
        if ids.len() < 2 || ids.len() > c.context + 1 {
            return Err(Error::invalid("ids", format!("window of {} bytes, need 2..={}", ids.len(), c.context + 1)));
        }
        let t = ids.len() - 1;
        let inputs = Rc::new(ids[..t].to_vec());
        let targets = Rc::new(ids[1..].to_vec());
        let causal = Rc::new(Mask::causal(t));

        let emb = tape.gather(vars[self.tok_emb], inputs)?;
        let positions = tape.gather(vars[self.pos_emb], Rc::new((0..t).collect()))?;
        let mut x = tape.add(emb, positions)?;
        let mut assignments = Vec::new();
        let mut routed = Vec::new();
        let dh = c.head_dim();

        for li in &self.layers {
            let h = tape.rms_norm(x, RMS_EPS);
            let gate = match mode {
                RoutingMode::Bypass => None,
                RoutingMode::Gated => {
                    let src = if stop_grad_inputs { tape.detach(h) } else { h };
                    let r = tape.matmul(src, vars[li.projection])?;
                    let scores = tape.matmul_t(r, vars[li.centroids])?;
                    let g = self.normalise(tape, scores)?;
                    assignments.push(g);
                    routed.push(r);
                    Some(gate_graph(tape, g, c.w, c.lambda, c.a0)?)
                }
            };
            let q = tape.matmul(h, vars[li.wq])?;
            let k = tape.matmul(h, vars[li.wk])?;
            let v = tape.matmul(h, vars[li.wv])?;
            let mut heads = Vec::with_capacity(c.heads);
            for head in 0..c.heads {
                let qh = tape.slice_cols(q, head * dh, dh);
                let kh = tape.slice_cols(k, head * dh, dh);
                let vh = tape.slice_cols(v, head * dh, dh);
                heads.push(attention_graph(tape, qh, kh, vh, gate, &causal)?);
            }
            let cat = tape.concat_cols(&heads)?;
            let attn = tape.matmul(cat, vars[li.wo])?;
            x = tape.add(x, attn)?;

            let h2 = tape.rms_norm(x, RMS_EPS);
            let up = tape.matmul(h2, vars[li.w1])?;
            let act = tape.tanh(up);
            let down = tape.matmul(act, vars[li.w2])?;
            x = tape.add(x, down)?;
        }
        let hf = tape.rms_norm(x, RMS_EPS);
        let logits = tape.matmul(hf, vars[self.w_out])?;
        let loss = tape.cross_entropy(logits, targets)?;
        Ok(SequenceGraph { loss, assignments, routed })
    }

    /// Mean next-token loss over `batch` with no gradient bookkeeping.
    pub fn lm_loss(&self, batch: &[Vec<usize>], mode: RoutingMode) -> Result<Real> {
        let mut total = 0.0;
        for ids in batch {
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, |_, _| false);
            let out = self.forward_sequence(&mut tape, &vars, ids, mode, false)?;
            total += tape.value(out.loss).item();
        }
        Ok(total / batch.len() as Real)
    }

    /// Gated-mode assignments for each window: `result[layer][window]`.
    pub fn assignments(&self, batch: &[Vec<usize>]) -> Result<Vec<Vec<Matrix>>> {
        let mut out = vec![Vec::with_capacity(batch.len()); self.layers.len()];
        for ids in batch {
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, |_, _| false);
            let g = self.forward_sequence(&mut tape, &vars, ids, RoutingMode::Gated, false)?;
            for (l, &a) in g.assignments.iter().enumerate() {
                out[l].push(tape.value(a).clone());
            }
        }
        Ok(out)
    }

    /// Gated-mode routed vectors `h·W_g` stacked over the batch, per layer.
    pub fn routed_vectors(&self, batch: &[Vec<usize>]) -> Result<Vec<Matrix>> {
        let mut rows: Vec<Vec<Vec<Real>>> = vec![Vec::new(); self.layers.len()];
        for ids in batch {
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, |_, _| false);
            let g = self.forward_sequence(&mut tape, &vars, ids, RoutingMode::Gated, false)?;
            for (l, &r) in g.routed.iter().enumerate() {
                rows[l].extend(tape.value(r).to_rows());
            }
        }
        rows.into_iter().map(|r| Matrix::from_rows(&r)).collect()
    }
}
