//! Pair-count cost table plus optional CPU wall-clock of the dense reference
//! and the two-pass path. Timings are kept out of the main report so the
//! report stays reproducible.

use std::time::Instant;

use focus_core::attention::{full_attention, AttentionInputs};
use focus_core::grouping::HardAssignment;
use focus_core::sparse::{
    build_mask, closed_form_pairs, distant_retention, focus_sparse_attention_with, masked_reference, pair_cost,
    ExecOptions, GroupPermutation, MaskSpec,
};
use focus_core::tensor::rng::{normal_matrix, SeedStream};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::report::FORMAT_VERSION;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub seed: u64,
    #[serde(rename = "T")]
    pub seq_lens: Vec<usize>,
    #[serde(rename = "K")]
    pub groups: usize,
    pub topk: usize,
    pub window: usize,
    pub head_dim: usize,
    /// Measure wall-clock at all.
    pub timing: bool,
    /// Largest T timed; the dense reference is O(T²).
    pub max_timed_t: usize,
    pub repeats: usize,
    /// Run group segments on the rayon pool.
    pub parallel: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seq_lens: vec![1024, 2048, 4096, 8192, 16384, 32768, 65536],
            groups: 8,
            topk: 1,
            window: 128,
            head_dim: 16,
            timing: true,
            max_timed_t: 8192,
            repeats: 1,
            parallel: false,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.seq_lens.is_empty() || self.seq_lens.contains(&0) {
            return Err(CliError::Usage("config field `T` must list positive lengths".into()));
        }
        if !(1..=64).contains(&self.groups) {
            return Err(CliError::Usage(format!("config field `K`: {} groups, need 1..=64", self.groups)));
        }
        if self.topk == 0 || self.topk > self.groups {
            return Err(CliError::Usage(format!("config field `topk`: {} not in 1..={}", self.topk, self.groups)));
        }
        if self.window == 0 || self.head_dim == 0 || self.repeats == 0 {
            return Err(CliError::Usage("config fields `window`, `head_dim`, `repeats` must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "K")]
    pub groups: usize,
    pub k: usize,
    pub w: usize,
    pub full_pairs: u64,
    pub focus_pairs: u64,
    pub same_group_pairs: u64,
    pub cross_local_pairs: u64,
    pub pair_ratio: f64,
    /// Balanced-assignment estimate; only defined for `k = 1`.
    pub closed_form_pairs: Option<f64>,
    pub closed_form_ratio: Option<f64>,
    pub distant_retained: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub format_version: u32,
    pub config: BenchConfig,
    pub rows: Vec<CostRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    #[serde(rename = "T")]
    pub t: usize,
    /// Dense causal attention over every `j ≤ i`.
    pub full_ms: f64,
    /// Dense pass that scans the materialised mask and skips masked keys.
    pub reference_ms: f64,
    pub focus_ms: f64,
    pub speedup_vs_full: f64,
    pub speedup_vs_reference: f64,
    pub sort_ms: f64,
    /// Share of the two-pass time spent building the group permutation.
    pub sort_fraction: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub format_version: u32,
    pub config: BenchConfig,
    pub threads: usize,
    pub rows: Vec<TimingRow>,
}

/// Exactly balanced primaries (sizes differ by at most one) in random order,
/// plus `k − 1` further random groups per token.
pub fn balanced_assignment(t: usize, groups: usize, k: usize, seed: u64) -> CliResult<HardAssignment> {
    let mut rng = SeedStream::new(seed).stream(t as u64);
    let mut primary: Vec<usize> = (0..t).map(|i| i % groups).collect();
    primary.shuffle(&mut rng);
    let rows = primary
        .into_iter()
        .map(|p| {
            let mut rest: Vec<usize> = (0..groups).filter(|&g| g != p).collect();
            rest.shuffle(&mut rng);
            std::iter::once(p).chain(rest.into_iter().take(k - 1)).collect()
        })
        .collect();
    Ok(HardAssignment::from_topk(rows, groups)?)
}

fn cost_row(cfg: &BenchConfig, spec: &MaskSpec) -> CostRow {
    let t = spec.len();
    let c = pair_cost(spec);
    let (closed, closed_ratio) = if cfg.topk == 1 {
        let mut sizes = vec![0; cfg.groups];
        for p in spec.assignment().primaries() {
            sizes[p] += 1;
        }
        let f = closed_form_pairs(&sizes, t, cfg.window);
        (Some(f), Some(c.full_pairs as f64 / f))
    } else {
        (None, None)
    };
    CostRow {
        t,
        groups: cfg.groups,
        k: cfg.topk,
        w: cfg.window,
        full_pairs: c.full_pairs,
        focus_pairs: c.focus_pairs,
        same_group_pairs: c.same_group_pairs,
        cross_local_pairs: c.cross_local_pairs,
        pair_ratio: c.ratio,
        closed_form_pairs: closed,
        closed_form_ratio: closed_ratio,
        distant_retained: distant_retention(spec).fraction,
    }
}

fn spec_for(cfg: &BenchConfig, t: usize) -> CliResult<MaskSpec> {
    Ok(MaskSpec::new(cfg.window, balanced_assignment(t, cfg.groups, cfg.topk, cfg.seed)?)?)
}

pub fn run_bench(cfg: &BenchConfig) -> CliResult<BenchReport> {
    cfg.validate()?;
    let rows = cfg.seq_lens.iter().map(|&t| spec_for(cfg, t).map(|s| cost_row(cfg, &s))).collect::<CliResult<_>>()?;
    Ok(BenchReport { format_version: FORMAT_VERSION, config: cfg.clone(), rows })
}

fn best_ms<T>(repeats: usize, mut f: impl FnMut() -> CliResult<T>) -> CliResult<(f64, T)> {
    let mut best = f64::INFINITY;
    let mut last = None;
    for _ in 0..repeats {
        let start = Instant::now();
        let out = f()?;
        best = best.min(start.elapsed().as_secs_f64() * 1e3);
        last = Some(out);
    }
    Ok((best, last.expect("repeats >= 1")))
}

pub fn run_timings(cfg: &BenchConfig) -> CliResult<TimingReport> {
    cfg.validate()?;
    let opts = ExecOptions { parallel: cfg.parallel, ..Default::default() };
    let mut rows = Vec::new();
    for &t in cfg.seq_lens.iter().filter(|&&t| t <= cfg.max_timed_t) {
        let spec = spec_for(cfg, t)?;
        let mut rng = SeedStream::new(cfg.seed).split(1).stream(t as u64);
        let q = normal_matrix(&mut rng, t, cfg.head_dim, 1.0);
        let k = normal_matrix(&mut rng, t, cfg.head_dim, 1.0);
        let v = normal_matrix(&mut rng, t, cfg.head_dim, 1.0);
        let inp = AttentionInputs::new(q, k, v, cfg.window)?;
        let mask = build_mask(&spec);
        let (full_ms, _) = best_ms(cfg.repeats, || Ok(full_attention(&inp)))?;
        let (reference_ms, reference) = best_ms(cfg.repeats, || Ok(masked_reference(&inp, &mask)?))?;
        let (focus_ms, (out, _)) = best_ms(cfg.repeats, || Ok(focus_sparse_attention_with(&inp, &spec, &opts)?))?;
        let (sort_ms, _) = best_ms(cfg.repeats, || Ok(GroupPermutation::from_spec(&spec)))?;
        rows.push(TimingRow {
            t,
            full_ms,
            reference_ms,
            focus_ms,
            speedup_vs_full: full_ms / focus_ms,
            speedup_vs_reference: reference_ms / focus_ms,
            sort_ms,
            sort_fraction: sort_ms / focus_ms,
            max_abs_err: out.max_abs_diff(&reference),
        });
    }
    let threads = if cfg.parallel { rayon::current_num_threads() } else { 1 };
    Ok(TimingReport { format_version: FORMAT_VERSION, config: cfg.clone(), threads, rows })
}
