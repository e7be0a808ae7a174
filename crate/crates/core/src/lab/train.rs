use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{LabConfig, Normalization, TrainConfig};
use super::corpus::{fixed_windows, generate, sample_windows, Corpus};
use super::model::{RoutingMode, ToyModel};
use super::optim::Adam;
use crate::autodiff::{Tape, Var};
use crate::diagnostics::{balance_minmax, dominance, stability};
use crate::error::{Error, Result};
use crate::grouping::{column_deviation, harden, HardAssignment, SoftAssignment, SINKHORN_FLOOR};
use crate::tensor::rng::SeedStream;
use crate::tensor::{dot, Matrix, Real};

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Base-model training with routing bypassed.
    Pretrain,
    /// Only routing parameters update; the base model is frozen.
    CentroidOnly,
    /// Every parameter updates.
    FullFt,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::CentroidOnly => "centroid_only",
            Phase::FullFt => "full_ft",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Phase::Pretrain => 1,
            Phase::CentroidOnly => 2,
            Phase::FullFt => 3,
        }
    }

    fn mode(self) -> RoutingMode {
        match self {
            Phase::Pretrain => RoutingMode::Bypass,
            _ => RoutingMode::Gated,
        }
    }
}

/// Coefficients of the auxiliary loss used with softmax routing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceWeights {
    pub balance: Real,
    pub entropy: Real,
}

/// `w·K·Σ_g (mass_g/T − 1/K)² − w_H · mean row entropy`.
pub fn balance_loss(g: &SoftAssignment, w: BalanceWeights) -> Real {
    let t = g.tokens() as Real;
    let k = g.groups() as Real;
    let dev: Real = g.col_sums().iter().map(|&m| (m / t - 1.0 / k).powi(2)).sum();
    let plogp: Real = g.weights().data().iter().map(|&p| p * p.max(SINKHORN_FLOOR).ln()).sum();
    w.balance * k * dev + w.entropy * plogp / t
}

/// Tape version of [`balance_loss`].
pub fn balance_loss_graph(tape: &mut Tape, g: Var, w: BalanceWeights) -> Result<Var> {
    let (t, k) = tape.value(g).shape();
    let mass = tape.col_sums(g);
    let share = tape.scale(mass, 1.0 / t as Real);
    let d = tape.add_scalar(share, -1.0 / k as Real);
    let sq = tape.mul(d, d)?;
    let dev = tape.sum(sq);
    let bal = tape.scale(dev, w.balance * k as Real);
    let floored = tape.clamp_min(g, SINKHORN_FLOOR);
    let logs = tape.log(floored);
    let pl = tape.mul(g, logs)?;
    let total = tape.sum(pl);
    let ent = tape.scale(total, w.entropy / t as Real);
    tape.add(bal, ent)
}

fn sq_dist(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means with k-means++ seeding. Clusters that empty out keep
/// their previous center.
pub fn kmeans(points: &Matrix, k: usize, iters: usize, rng: &mut impl Rng) -> Result<Matrix> {
    let n = points.rows();
    if k == 0 || n < k {
        return Err(Error::invalid("k", format!("need 1 <= k <= {n} points, got {k}")));
    }
    let mut centers: Vec<Vec<Real>> = vec![points.row(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<Real> = (0..n).map(|i| sq_dist(points.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: Real = d2.iter().sum();
        let next = if total <= 0.0 {
            centers.len() % n
        } else {
            let mut u = rng.random::<Real>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        };
        centers.push(points.row(next).to_vec());
        let c = centers.last().unwrap();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), c));
        }
    }
    let dim = points.cols();
    let nearest = |p: &[Real], centers: &[Vec<Real>]| {
        let mut best = 0;
        let mut bd = Real::INFINITY;
        for (c, center) in centers.iter().enumerate() {
            let d = sq_dist(p, center);
            if d < bd {
                bd = d;
                best = c;
            }
        }
        best
    };
    for _ in 0..iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = nearest(points.row(i), &centers);
            counts[c] += 1;
            for (s, &x) in sums[c].iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as Real).collect();
            }
        }
    }
    Matrix::from_rows(&centers)
}

/// Which collapse pathways a phase leaves open.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pathways {
    /// Centroids receive the LM gradient.
    pub centroid_drift: bool,
    /// Hidden states feeding the router are trained by the routing gradient.
    pub representational_bypass: bool,
    /// The routing projection is trainable.
    pub projection_bypass: bool,
    /// Column balance is enforced by the normaliser itself.
    pub structural_balance: bool,
}

pub fn pathways(phase: Phase, norm: Normalization, cfg: &TrainConfig) -> Pathways {
    let gated = phase != Phase::Pretrain;
    Pathways {
        centroid_drift: gated && !cfg.ema_centroids,
        representational_bypass: phase == Phase::FullFt && !cfg.stop_grad_inputs,
        projection_bypass: gated,
        structural_balance: gated && norm == Normalization::Sinkhorn,
    }
}

/// One evaluation on the fixed held-out windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub step: usize,
    pub phase: Phase,
    /// Held-out next-token loss.
    pub loss: Real,
    /// Largest per-layer dominance.
    pub dominance: Real,
    /// Smallest per-layer agreement with the previous evaluation.
    pub stability: Option<Real>,
    /// Smallest per-layer `min/max` group mass.
    pub balance_minmax: Real,
    /// Largest relative column-sum deviation from `T/K` over every training
    /// window and layer since the previous evaluation.
    pub train_column_deviation: Real,
    pub eval_column_deviation: Real,
}

/// Model, optimiser moments and metric history.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: ToyModel,
    pub optimizer: Adam,
    pub step: usize,
    pub history: Vec<MetricPoint>,
    last_eval: Option<Vec<HardAssignment>>,
    pending_deviation: Real,
}

impl TrainState {
    pub fn new(model: ToyModel) -> Self {
        let optimizer = Adam::new(model.params.iter().map(|p| p.value.shape()));
        Self { model, optimizer, step: 0, history: Vec::new(), last_eval: None, pending_deviation: 0.0 }
    }
}

/// Training text plus the fixed evaluation windows.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Vec<u8>,
    pub eval_windows: Vec<Vec<usize>>,
}

impl TrainData {
    pub fn from_corpus(corpus: &Corpus, context: usize, eval_sequences: usize) -> Result<Self> {
        let eval_windows = fixed_windows(&corpus.eval, context + 1, eval_sequences);
        if eval_windows.is_empty() || corpus.train.len() <= context + 1 {
            return Err(Error::Config { field: "corpus".into(), reason: "corpus shorter than one window".into() });
        }
        Ok(Self { train: corpus.train.clone(), eval_windows })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: Phase,
    pub steps: usize,
    pub pathways: Pathways,
    /// Mean training loss over the last (up to) 50 steps.
    pub final_train_loss: Option<Real>,
}

fn lr(phase: Phase, cfg: &TrainConfig) -> Real {
    match phase {
        Phase::Pretrain => cfg.lr_pretrain,
        Phase::CentroidOnly => cfg.lr_centroid,
        Phase::FullFt => cfg.lr_full,
    }
}

fn evaluate(state: &mut TrainState, data: &TrainData, phase: Phase) -> Result<MetricPoint> {
    let model = &state.model;
    let layers = model.layers().len();
    let mut per_layer: Vec<Vec<Vec<Real>>> = vec![Vec::new(); layers];
    let mut loss = 0.0;
    let mut eval_dev: Real = 0.0;
    for ids in &data.eval_windows {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, |_, _| false);
        let out = model.forward_sequence(&mut tape, &vars, ids, RoutingMode::Gated, false)?;
        loss += tape.value(out.loss).item();
        for (l, &g) in out.assignments.iter().enumerate() {
            let gv = tape.value(g);
            eval_dev = eval_dev.max(column_deviation(gv));
            per_layer[l].extend(gv.to_rows());
        }
    }
    loss /= data.eval_windows.len() as Real;
    let mut dom: Real = 0.0;
    let mut bal = Real::INFINITY;
    let mut hard = Vec::with_capacity(layers);
    for rows in per_layer {
        let g = SoftAssignment::new(Matrix::from_rows(&rows)?)?;
        dom = dom.max(dominance(&g));
        bal = bal.min(balance_minmax(&g));
        hard.push(harden(&g, 1)?);
    }
    let stab = match &state.last_eval {
        Some(prev) => {
            let mut s = Real::INFINITY;
            for (p, c) in prev.iter().zip(&hard) {
                s = s.min(stability(p, c)?);
            }
            Some(s)
        }
        None => None,
    };
    state.last_eval = Some(hard);
    let point = MetricPoint {
        step: state.step,
        phase,
        loss,
        dominance: dom,
        stability: stab,
        balance_minmax: bal,
        train_column_deviation: state.pending_deviation,
        eval_column_deviation: eval_dev,
    };
    state.pending_deviation = 0.0;
    Ok(point)
}

fn recluster(state: &mut TrainState, data: &TrainData, rng: &mut impl Rng) -> Result<()> {
    let routed = state.model.routed_vectors(&data.eval_windows)?;
    let k = state.model.config.groups;
    for (l, points) in routed.iter().enumerate() {
        let ci = state.model.layers()[l].centroids;
        let old = &state.model.params[ci].value;
        let old_norm: Real = (0..k).map(|g| dot(old.row(g), old.row(g)).sqrt()).sum::<Real>() / k as Real;
        let mut c = kmeans(points, k, 20, rng)?;
        // Keep the score scale so the normaliser's regime is unchanged.
        for g in 0..k {
            let n = dot(c.row(g), c.row(g)).sqrt();
            if n > 0.0 {
                c.row_mut(g).iter_mut().for_each(|x| *x *= old_norm / n);
            }
        }
        state.model.params[ci].value = c;
    }
    Ok(())
}

/// Moves each centroid toward the mean routed vector of its tokens.
fn ema_update(model: &mut ToyModel, assignments: &[Vec<Matrix>], routed: &[Vec<Matrix>], decay: Real) {
    let k = model.config.groups;
    for l in 0..model.layers().len() {
        let dg = model.config.d_g;
        let mut sums = vec![vec![0.0; dg]; k];
        let mut counts = vec![0usize; k];
        for (g, r) in assignments[l].iter().zip(&routed[l]) {
            for i in 0..g.rows() {
                let p = crate::grouping::argmax(g.row(i));
                counts[p] += 1;
                for (s, &x) in sums[p].iter_mut().zip(r.row(i)) {
                    *s += x;
                }
            }
        }
        let ci = model.layers()[l].centroids;
        let c = &mut model.params[ci].value;
        for g in 0..k {
            if counts[g] == 0 {
                continue;
            }
            for (x, s) in c.row_mut(g).iter_mut().zip(&sums[g]) {
                *x = decay * *x + (1.0 - decay) * s / counts[g] as Real;
            }
        }
    }
}

/// Runs `steps` optimiser steps of `phase`. Gated phases evaluate every
/// `eval_every` steps (and once up front if nothing is logged yet); each
/// step's batch depends only on `(seed, phase, global step)`.
pub fn train_phase(
    state: &mut TrainState,
    phase: Phase,
    steps: usize,
    data: &TrainData,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<PhaseSummary> {
    cfg.validate()?;
    let norm = state.model.config.normalization;
    let ways = pathways(phase, norm, cfg);
    let gated = phase != Phase::Pretrain;
    if gated && state.history.is_empty() && steps > 0 {
        let p = evaluate(state, data, phase)?;
        state.history.push(p);
    }
    let centroid_slots: Vec<usize> = state.model.layers().iter().map(|l| l.centroids).collect();
    let trainable: Vec<bool> = state
        .model
        .params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let frozen_centroid = cfg.ema_centroids && centroid_slots.contains(&i);
            match phase {
                Phase::Pretrain => !p.routing,
                Phase::CentroidOnly => p.routing && !frozen_centroid,
                Phase::FullFt => !frozen_centroid,
            }
        })
        .collect();
    let weights = BalanceWeights { balance: cfg.effective_balance_weight(), entropy: cfg.entropy_weight };
    let streams = SeedStream::new(seed).split(0x7A1 + phase.stream());
    let window_len = state.model.config.context + 1;
    let mut recent = Vec::with_capacity(steps);

    for _ in 0..steps {
        let mut rng = streams.stream(state.step as u64);
        let batch = sample_windows(&data.train, window_len, cfg.batch, &mut rng);
        let model = &state.model;
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, |i, _| trainable[i]);
        let mut seq_losses = Vec::with_capacity(batch.len());
        let mut lm_total = 0.0;
        let mut assigns = vec![Vec::new(); model.layers().len()];
        let mut routed = vec![Vec::new(); model.layers().len()];
        for ids in &batch {
            let out = model.forward_sequence(&mut tape, &vars, ids, phase.mode(), cfg.stop_grad_inputs)?;
            lm_total += tape.value(out.loss).item();
            let mut loss = out.loss;
            for (l, &g) in out.assignments.iter().enumerate() {
                let gv = tape.value(g);
                state.pending_deviation = state.pending_deviation.max(column_deviation(gv));
                if cfg.ema_centroids {
                    assigns[l].push(gv.clone());
                    routed[l].push(tape.value(out.routed[l]).clone());
                }
                if norm == Normalization::SoftmaxWithBalanceLoss {
                    let aux = balance_loss_graph(&mut tape, g, weights)?;
                    loss = tape.add(loss, aux)?;
                }
            }
            seq_losses.push(loss);
        }
        let mut total = seq_losses[0];
        for &l in &seq_losses[1..] {
            total = tape.add(total, l)?;
        }
        let total = tape.scale(total, 1.0 / batch.len() as Real);
        let value = tape.value(total).item();
        if !value.is_finite() {
            return Err(Error::Diverged { step: state.step, loss: value as f64 });
        }
        recent.push(lm_total / batch.len() as Real);
        let mut grads = tape.backward(total)?;
        let lr = lr(phase, cfg);
        for (i, &v) in vars.iter().enumerate() {
            if !trainable[i] {
                continue;
            }
            if let Some(g) = grads.take(v) {
                if !g.is_finite() {
                    return Err(Error::Diverged { step: state.step, loss: value as f64 });
                }
                state.optimizer.step(i, &mut state.model.params[i].value, &g, lr);
            }
        }
        if gated && cfg.ema_centroids {
            ema_update(&mut state.model, &assigns, &routed, cfg.ema_decay);
        }
        state.step += 1;
        if gated && cfg.recluster_every > 0 && state.step % cfg.recluster_every == 0 {
            let mut krng = streams.split(0x4B).stream(state.step as u64);
            recluster(state, data, &mut krng)?;
        }
        if gated && state.step % cfg.eval_every == 0 {
            let p = evaluate(state, data, phase)?;
            state.history.push(p);
        }
    }
    let tail = &recent[recent.len().saturating_sub(50)..];
    Ok(PhaseSummary {
        phase,
        steps,
        pathways: ways,
        final_train_loss: (!tail.is_empty()).then(|| tail.iter().sum::<Real>() / tail.len() as Real),
    })
}

/// Writes `step,loss,dominance,stability,balance_minmax` rows.
pub fn write_metrics_csv<W: Write>(history: &[MetricPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "loss", "dominance", "stability", "balance_minmax"]).map_err(csv_err)?;
    for p in history {
        w.write_record([
            p.step.to_string(),
            p.loss.to_string(),
            p.dominance.to_string(),
            p.stability.map_or(String::new(), |s| s.to_string()),
            p.balance_minmax.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// One arm of the collapse grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub normalization: Normalization,
    pub phase: Phase,
    pub phases: Vec<PhaseSummary>,
    /// Metrics from the start of routing training through this arm's last
    /// phase; the full fine-tuning arm therefore includes the centroid phase.
    pub history: Vec<MetricPoint>,
    pub final_dominance: Real,
    pub final_stability: Option<Real>,
    pub final_loss: Real,
    pub max_train_column_deviation: Real,
}

impl RunReport {
    fn new(norm: Normalization, phase: Phase, phases: Vec<PhaseSummary>, history: Vec<MetricPoint>) -> Self {
        let last = history.last().expect("gated phases always log");
        Self {
            normalization: norm,
            phase,
            final_dominance: last.dominance,
            final_stability: last.stability,
            final_loss: last.loss,
            max_train_column_deviation: history.iter().map(|p| p.train_column_deviation).fold(0.0, Real::max),
            phases,
            history,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictRow {
    pub normalization: Normalization,
    pub phase: Phase,
    pub dominance: Real,
    pub stability: Option<Real>,
    pub verdict: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format_version: u32,
    pub config: LabConfig,
    pub pretrain: PhaseSummary,
    pub runs: Vec<RunReport>,
    pub verdict: Vec<VerdictRow>,
}

fn verdict(dominance: Real, groups: usize) -> &'static str {
    let k = groups as Real;
    if dominance <= 1.6 / k {
        "balanced"
    } else if dominance >= 0.9 {
        "collapsed"
    } else {
        "skewed"
    }
}

impl ExperimentReport {
    pub fn render_table(&self) -> String {
        let mut s = format!("{:<28} {:<14} {:>10} {:>10}  verdict\n", "normalization", "phase", "dominance", "stability");
        for r in &self.verdict {
            s.push_str(&format!(
                "{:<28} {:<14} {:>9.1}% {:>10}  {}\n",
                r.normalization.name(),
                r.phase.name(),
                100.0 * r.dominance,
                r.stability.map_or("-".to_string(), |x| format!("{x:.3}")),
                r.verdict
            ));
        }
        s
    }

    pub fn run(&self, norm: Normalization, phase: Phase) -> Option<&RunReport> {
        self.runs.iter().find(|r| r.normalization == norm && r.phase == phase)
    }
}

/// Trains the shared base model with routing bypassed.
pub fn pretrain(cfg: &LabConfig, data: &TrainData) -> Result<(ToyModel, PhaseSummary)> {
    let model = ToyModel::new(cfg.model.clone(), cfg.seed)?;
    let mut state = TrainState::new(model);
    let summary = train_phase(&mut state, Phase::Pretrain, cfg.train.pretrain_steps, data, &cfg.train, cfg.seed)?;
    Ok((state.model, summary))
}

pub fn prepare_data(cfg: &LabConfig) -> Result<TrainData> {
    cfg.validate()?;
    let corpus = generate(&cfg.corpus, cfg.seed);
    TrainData::from_corpus(&corpus, cfg.model.context, cfg.train.eval_sequences)
}

/// Output of [`train_pipeline`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub phases: Vec<PhaseSummary>,
}

/// Pretrain, then centroid-only, then full fine-tuning, under the configured
/// normalisation.
pub fn train_pipeline(cfg: &LabConfig) -> Result<TrainOutcome> {
    let data = prepare_data(cfg)?;
    let (base, pre) = pretrain(cfg, &data)?;
    let mut state = TrainState::new(base);
    let c = train_phase(&mut state, Phase::CentroidOnly, cfg.train.centroid_steps, &data, &cfg.train, cfg.seed)?;
    let f = train_phase(&mut state, Phase::FullFt, cfg.train.full_steps, &data, &cfg.train, cfg.seed)?;
    Ok(TrainOutcome { state, phases: vec![pre, c, f] })
}

/// The 2×2 grid {Sinkhorn, softmax} × {centroid-only, full fine-tuning}
/// from one shared base model, seed and corpus.
pub fn collapse_experiment(cfg: &LabConfig) -> Result<ExperimentReport> {
    let data = prepare_data(cfg)?;
    let (base, pre) = pretrain(cfg, &data)?;
    let mut runs = Vec::new();
    for norm in [Normalization::Sinkhorn, Normalization::SoftmaxWithBalanceLoss] {
        let mut model = base.clone();
        model.config.normalization = norm;
        let mut state = TrainState::new(model);
        let c = train_phase(&mut state, Phase::CentroidOnly, cfg.train.centroid_steps, &data, &cfg.train, cfg.seed)?;
        runs.push(RunReport::new(norm, Phase::CentroidOnly, vec![c.clone()], state.history.clone()));
        let f = train_phase(&mut state, Phase::FullFt, cfg.train.full_steps, &data, &cfg.train, cfg.seed)?;
        runs.push(RunReport::new(norm, Phase::FullFt, vec![c, f], state.history.clone()));
    }
    let verdict = runs
        .iter()
        .map(|r| VerdictRow {
            normalization: r.normalization,
            phase: r.phase,
            dominance: r.final_dominance,
            stability: r.final_stability,
            verdict: verdict(r.final_dominance, cfg.model.groups).to_string(),
        })
        .collect();
    Ok(ExperimentReport { format_version: REPORT_FORMAT_VERSION, config: cfg.clone(), pretrain: pre, runs, verdict })
}
