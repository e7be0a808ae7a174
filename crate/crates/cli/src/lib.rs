//! `focus-lab`: verification grids, cost tables, routing experiments and
//! group inspection, each writing machine-readable reports.
//!
//! Exit codes: 0 success, 1 invariant failure, 2 usage or config error.

pub mod bench;
pub mod error;
pub mod lab;
pub mod report;
pub mod verify;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use focus_core::lab::Normalization;

use crate::bench::BenchConfig;
use crate::error::{CliError, CliResult};
use crate::lab::{InspectConfig, LabOverrides};
use crate::report::{ensure_dir, output_path, read_config, write_csv, write_json, Format};
use crate::verify::{TopK, VerifyConfig};

#[derive(Debug, Parser)]
#[command(name = "focus-lab", version, about = "Group-gated sparse attention lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "focus-out")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct LabFlags {
    #[arg(long = "K")]
    pub groups: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub sinkhorn_iters: Option<usize>,
    #[arg(long)]
    pub pretrain_steps: Option<usize>,
    #[arg(long)]
    pub centroid_steps: Option<usize>,
    #[arg(long)]
    pub full_steps: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Exactness and disjoint-cover grid against the dense reference.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Restrict the grid to one group count.
        #[arg(long = "K")]
        groups: Option<usize>,
        /// Restrict the grid to one membership count (integer or `K`).
        #[arg(long)]
        topk: Option<String>,
        /// Restrict the grid to one window.
        #[arg(long)]
        window: Option<usize>,
        /// Inject the double-counting fault into the local pass.
        #[arg(long, value_parser = ["double-count"])]
        fault: Option<String>,
    },
    /// Pair-count table and CPU timings.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated sequence lengths.
        #[arg(long = "T", value_delimiter = ',')]
        seq_lens: Option<Vec<usize>>,
        #[arg(long = "K")]
        groups: Option<usize>,
        #[arg(long)]
        topk: Option<usize>,
        #[arg(long)]
        window: Option<usize>,
        /// Skip wall-clock measurement.
        #[arg(long)]
        no_timing: bool,
        /// Run group segments on the thread pool.
        #[arg(long)]
        parallel: bool,
    },
    /// Pretrain, centroid-only, then full fine-tuning under one normaliser.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        lab: LabFlags,
        #[arg(long, value_parser = parse_normalization)]
        normalization: Option<Normalization>,
    },
    /// Sinkhorn vs softmax collapse grid from a shared base model.
    Collapse {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        lab: LabFlags,
    },
    /// Group contents of a trained checkpoint over a text file.
    InspectGroups {
        #[arg(long, default_value = "focus-out")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 8)]
        windows: usize,
        #[arg(long, default_value_t = 8)]
        top: usize,
        #[arg(long, default_value_t = 0.9)]
        long_range_threshold: f64,
        #[arg(long, default_value_t = 20)]
        long_range_max: usize,
    },
}

fn parse_normalization(s: &str) -> Result<Normalization, String> {
    Normalization::parse(s).ok_or_else(|| format!("unknown normalization {s:?}; expected sinkhorn or softmax"))
}

fn lab_overrides(seed: Option<u64>, f: &LabFlags, normalization: Option<Normalization>) -> LabOverrides {
    LabOverrides {
        seed,
        groups: f.groups,
        window: f.window,
        tau: f.tau,
        sinkhorn_iters: f.sinkhorn_iters,
        normalization,
        pretrain_steps: f.pretrain_steps,
        centroid_steps: f.centroid_steps,
        full_steps: f.full_steps,
    }
}

fn load_or_default<T: Default + for<'de> serde::Deserialize<'de>>(path: Option<&Path>) -> CliResult<T> {
    path.map_or_else(|| Ok(T::default()), read_config)
}

/// Runs one subcommand and returns the line printed on success.
pub fn run(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Verify { common, groups, topk, window, fault } => {
            let mut cfg: VerifyConfig = load_or_default(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(k) = groups {
                cfg.groups = vec![k];
            }
            if let Some(k) = topk {
                cfg.topk = vec![TopK::try_from(k).map_err(CliError::Usage)?];
            }
            if let Some(w) = window {
                cfg.windows = vec![w];
            }
            cfg.validate()?;
            ensure_dir(&common.out)?;
            let report = verify::run_verify(&cfg, fault.is_some())?;
            let path = output_path(&common.out, "verify", common.format);
            match common.format {
                Format::Json => write_json(&path, &report)?,
                Format::Csv => write_csv(&path, &report.cases)?,
            }
            let s = &report.summary;
            if s.failed > 0 {
                return Err(CliError::Invariant(s.violations.clone()));
            }
            Ok(format!(
                "PASS verify: {} cases, worst max-abs {:.3e}, worst row cosine {:.12}",
                s.cases, s.worst_max_abs_err, s.worst_min_row_cosine
            ))
        }
        Command::Bench { common, seq_lens, groups, topk, window, no_timing, parallel } => {
            let mut cfg: BenchConfig = load_or_default(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(t) = seq_lens {
                cfg.seq_lens = t;
            }
            if let Some(k) = groups {
                cfg.groups = k;
            }
            if let Some(k) = topk {
                cfg.topk = k;
            }
            if let Some(w) = window {
                cfg.window = w;
            }
            cfg.timing &= !no_timing;
            cfg.parallel |= parallel;
            cfg.validate()?;
            ensure_dir(&common.out)?;
            let report = bench::run_bench(&cfg)?;
            let path = output_path(&common.out, "bench", common.format);
            match common.format {
                Format::Json => write_json(&path, &report)?,
                Format::Csv => write_csv(&path, &report.rows)?,
            }
            let mut line = format!("bench: {} rows", report.rows.len());
            if cfg.timing {
                let timings = bench::run_timings(&cfg)?;
                write_json(&common.out.join("bench_timings.json"), &timings)?;
                line.push_str(&format!(", {} timed", timings.rows.len()));
            }
            Ok(line)
        }
        Command::Train { common, lab, normalization } => {
            let cfg = lab::resolve_lab_config(common.config.as_deref(), &lab_overrides(common.seed, &lab, normalization))?;
            ensure_dir(&common.out)?;
            let r = lab::cmd_train(&cfg, &common.out, common.format)?;
            let last = r.history.last();
            Ok(format!(
                "train: {} steps, final eval loss {}, dominance {}",
                r.final_step,
                last.map_or("-".into(), |p| format!("{:.4}", p.loss)),
                last.map_or("-".into(), |p| format!("{:.3}", p.dominance)),
            ))
        }
        Command::Collapse { common, lab } => {
            let cfg = lab::resolve_lab_config(common.config.as_deref(), &lab_overrides(common.seed, &lab, None))?;
            ensure_dir(&common.out)?;
            let r = lab::cmd_collapse(&cfg, &common.out, common.format)?;
            Ok(r.experiment.render_table())
        }
        Command::InspectGroups { out, format, checkpoint, corpus, windows, top, long_range_threshold, long_range_max } => {
            let cfg = InspectConfig { checkpoint, corpus, windows, top, long_range_threshold, long_range_max };
            ensure_dir(&out)?;
            let r = lab::cmd_inspect(&cfg, &out, format)?;
            Ok(r.render())
        }
    }
}
