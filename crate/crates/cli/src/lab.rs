//! Thin wrappers over the training lab and the group diagnostics.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use focus_core::diagnostics::{long_range_pairs, GroupReport, LongRangePair};
use focus_core::grouping::SoftAssignment;
use focus_core::lab::corpus::{byte_categories, decode_byte, fixed_windows};
use focus_core::lab::{
    collapse_experiment, load_checkpoint, save_checkpoint, train_pipeline, write_metrics_csv, ExperimentReport,
    LabConfig, MetricPoint, Normalization, Phase, PhaseSummary, ToyModelConfig,
};
use focus_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::report::{output_path, write_csv, write_json, Format, FORMAT_VERSION};

/// Column sums of a Sinkhorn run must stay within this share of `T/K`.
pub const SINKHORN_COLUMN_TOL: f64 = 0.02;
pub const SINKHORN_COLUMN_BALANCE: &str = "sinkhorn_column_balance";

/// Values given on the command line that replace config entries.
#[derive(Clone, Debug, Default)]
pub struct LabOverrides {
    pub seed: Option<u64>,
    pub groups: Option<usize>,
    pub window: Option<usize>,
    pub tau: Option<f64>,
    pub sinkhorn_iters: Option<usize>,
    pub normalization: Option<Normalization>,
    pub pretrain_steps: Option<usize>,
    pub centroid_steps: Option<usize>,
    pub full_steps: Option<usize>,
}

impl LabOverrides {
    pub fn apply(&self, cfg: &mut LabConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        let m = &mut cfg.model;
        if let Some(k) = self.groups {
            m.groups = k;
        }
        if let Some(w) = self.window {
            m.w = w;
        }
        if let Some(t) = self.tau {
            m.tau = t;
        }
        if let Some(n) = self.sinkhorn_iters {
            m.sinkhorn_iters = n;
        }
        if let Some(n) = self.normalization {
            m.normalization = n;
        }
        let t = &mut cfg.train;
        if let Some(s) = self.pretrain_steps {
            t.pretrain_steps = s;
        }
        if let Some(s) = self.centroid_steps {
            t.centroid_steps = s;
        }
        if let Some(s) = self.full_steps {
            t.full_steps = s;
        }
    }
}

/// Loads `path` (or the defaults), applies overrides and validates.
pub fn resolve_lab_config(path: Option<&Path>, overrides: &LabOverrides) -> CliResult<LabConfig> {
    let mut cfg = match path {
        Some(p) => crate::report::read_config(p)?,
        None => LabConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantCheck {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub ok: bool,
}

fn column_check(history: &[MetricPoint]) -> InvariantCheck {
    let value = history.iter().map(|p| p.train_column_deviation).fold(0.0, f64::max);
    InvariantCheck {
        name: SINKHORN_COLUMN_BALANCE.into(),
        value,
        bound: SINKHORN_COLUMN_TOL,
        ok: value <= SINKHORN_COLUMN_TOL,
    }
}

fn failures(checks: &[InvariantCheck]) -> CliResult<()> {
    let bad: Vec<String> = checks.iter().filter(|c| !c.ok).map(|c| c.name.clone()).collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CliError::Invariant(bad))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub format_version: u32,
    pub config: LabConfig,
    pub phases: Vec<PhaseSummary>,
    pub final_step: usize,
    pub history: Vec<MetricPoint>,
    pub invariants: Vec<InvariantCheck>,
}

/// Flat metric row for CSV reports.
#[derive(Clone, Debug, Serialize)]
struct MetricRow<'a> {
    step: usize,
    phase: &'a str,
    loss: f64,
    dominance: f64,
    stability: Option<f64>,
    balance_minmax: f64,
    train_column_deviation: f64,
    eval_column_deviation: f64,
}

fn metric_rows(history: &[MetricPoint]) -> Vec<MetricRow<'_>> {
    history
        .iter()
        .map(|p| MetricRow {
            step: p.step,
            phase: p.phase.name(),
            loss: p.loss,
            dominance: p.dominance,
            stability: p.stability,
            balance_minmax: p.balance_minmax,
            train_column_deviation: p.train_column_deviation,
            eval_column_deviation: p.eval_column_deviation,
        })
        .collect()
}

fn write_metrics(path: &Path, history: &[MetricPoint]) -> CliResult<()> {
    let f = fs::File::create(path)?;
    write_metrics_csv(history, std::io::BufWriter::new(f))?;
    Ok(())
}

/// Writes `checkpoint/`, `metrics.csv` and the train report. Invariant
/// failures are reported after every output is on disk.
pub fn cmd_train(cfg: &LabConfig, out: &Path, format: Format) -> CliResult<TrainReport> {
    let outcome = train_pipeline(cfg)?;
    let state = &outcome.state;
    save_checkpoint(&state.model, state.step, &out.join("checkpoint"))?;
    write_metrics(&out.join("metrics.csv"), &state.history)?;
    let invariants = match cfg.model.normalization {
        Normalization::Sinkhorn => vec![column_check(&state.history)],
        Normalization::SoftmaxWithBalanceLoss => Vec::new(),
    };
    let report = TrainReport {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        phases: outcome.phases.clone(),
        final_step: state.step,
        history: state.history.clone(),
        invariants,
    };
    match format {
        Format::Json => write_json(&output_path(out, "train_report", format), &report)?,
        Format::Csv => write_csv(&output_path(out, "train_report", format), &metric_rows(&report.history))?,
    }
    failures(&report.invariants)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseOutput {
    #[serde(flatten)]
    pub experiment: ExperimentReport,
    pub invariants: Vec<InvariantCheck>,
}

#[derive(Clone, Debug, Serialize)]
struct VerdictCsvRow<'a> {
    normalization: &'a str,
    phase: &'a str,
    dominance: f64,
    stability: Option<f64>,
    verdict: &'a str,
}

pub fn cmd_collapse(cfg: &LabConfig, out: &Path, format: Format) -> CliResult<CollapseOutput> {
    let experiment = collapse_experiment(cfg)?;
    for r in &experiment.runs {
        let name = format!("metrics_{}_{}.csv", r.normalization.name(), r.phase.name());
        write_metrics(&out.join(name), &r.history)?;
    }
    fs::write(out.join("collapse_table.txt"), experiment.render_table())?;
    let invariants = experiment
        .runs
        .iter()
        .filter(|r| r.normalization == Normalization::Sinkhorn && r.phase == Phase::FullFt)
        .map(|r| column_check(&r.history))
        .collect();
    let report = CollapseOutput { experiment, invariants };
    match format {
        Format::Json => write_json(&output_path(out, "collapse_report", format), &report)?,
        Format::Csv => {
            let rows: Vec<VerdictCsvRow> = report
                .experiment
                .verdict
                .iter()
                .map(|v| VerdictCsvRow {
                    normalization: v.normalization.name(),
                    phase: v.phase.name(),
                    dominance: v.dominance,
                    stability: v.stability,
                    verdict: &v.verdict,
                })
                .collect();
            write_csv(&output_path(out, "collapse_report", format), &rows)?;
        }
    }
    failures(&report.invariants)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InspectConfig {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    /// Number of non-overlapping windows read from the start of the corpus.
    pub windows: usize,
    /// Tokens listed per group.
    pub top: usize,
    /// Affinity above which far-apart pairs are listed.
    pub long_range_threshold: f64,
    pub long_range_max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGroups {
    pub layer: usize,
    pub report: GroupReport,
    /// Farthest high-affinity pairs in the first window.
    pub long_range: Vec<LongRangePair>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InspectReport {
    pub format_version: u32,
    pub config: InspectConfig,
    pub model: ToyModelConfig,
    pub checkpoint_step: usize,
    pub layers: Vec<LayerGroups>,
}

impl InspectReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for l in &self.layers {
            s.push_str(&format!("layer {}\n", l.layer));
            s.push_str(&l.report.render_table(self.config.top, decode_byte));
        }
        s
    }
}

#[derive(Clone, Debug, Serialize)]
struct GroupCsvRow {
    layer: usize,
    group: usize,
    share: f64,
    balance: f64,
    category: Option<String>,
    purity: Option<f64>,
    top_tokens: String,
}

fn stack_rows(parts: &[Matrix]) -> CliResult<Matrix> {
    let rows: Vec<Vec<f64>> = parts.iter().flat_map(|m| m.to_rows()).collect();
    Ok(Matrix::from_rows(&rows)?)
}

pub fn cmd_inspect(cfg: &InspectConfig, out: &Path, format: Format) -> CliResult<InspectReport> {
    if !cfg.corpus.is_file() {
        return Err(CliError::Usage(format!("corpus file {} does not exist", cfg.corpus.display())));
    }
    if cfg.windows == 0 {
        return Err(CliError::Usage("`--windows` must be positive".into()));
    }
    let text = fs::read(&cfg.corpus)?;
    let (model, step) = load_checkpoint(&cfg.checkpoint)?;
    let len = model.config.context + 1;
    let windows = fixed_windows(&text, len, cfg.windows);
    if windows.is_empty() {
        return Err(CliError::Usage(format!(
            "corpus {} has {} bytes, need at least {len}",
            cfg.corpus.display(),
            text.len()
        )));
    }
    let per_layer = model.assignments(&windows)?;
    // Assignments cover inputs `ids[..T]`.
    let tokens: Vec<usize> = windows.iter().flat_map(|w| w[..len - 1].iter().copied()).collect();
    let categories: BTreeMap<usize, String> = byte_categories();
    let mut layers = Vec::new();
    for (layer, parts) in per_layer.iter().enumerate() {
        let g = SoftAssignment::new(stack_rows(parts)?)?;
        let report = GroupReport::build(&g, &tokens, None, Some(&categories))?;
        let first = SoftAssignment::new(parts[0].clone())?;
        let positions: Vec<usize> = (0..first.tokens()).collect();
        let mut long_range = long_range_pairs(&first, &positions, model.config.w, cfg.long_range_threshold)?;
        long_range.truncate(cfg.long_range_max);
        layers.push(LayerGroups { layer, report, long_range });
    }
    let report = InspectReport {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        model: model.config.clone(),
        checkpoint_step: step,
        layers,
    };
    match format {
        Format::Json => write_json(&output_path(out, "group_report", format), &report)?,
        Format::Csv => {
            let mut rows = Vec::new();
            for l in &report.layers {
                let c = &l.report.contents;
                for g in 0..l.report.groups {
                    let top: Vec<String> = c.top_tokens[g]
                        .iter()
                        .take(cfg.top)
                        .map(|tc| format!("{}:{}", decode_byte(tc.token), tc.count))
                        .collect();
                    rows.push(GroupCsvRow {
                        layer: l.layer,
                        group: g,
                        share: l.report.group_share[g],
                        balance: l.report.balance[g],
                        category: c.category.as_ref().and_then(|v| v[g].clone()),
                        purity: c.purity.as_ref().and_then(|v| v[g]),
                        top_tokens: top.join(" "),
                    });
                }
            }
            write_csv(&output_path(out, "group_report", format), &rows)?;
        }
    }
    Ok(report)
}
