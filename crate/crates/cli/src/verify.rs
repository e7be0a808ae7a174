//! Exactness grid: the two-pass decomposition against the dense masked
//! reference on random inputs and random top-k memberships.

use std::collections::BTreeSet;
use std::fmt;

use focus_core::attention::AttentionInputs;
use focus_core::grouping::HardAssignment;
use focus_core::sparse::{
    build_mask, decomposition_pairs, focus_sparse_attention_with, masked_reference, row_cosines, ExecOptions, MaskSpec,
};
use focus_core::tensor::rng::{normal_matrix, SeedStream};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::report::FORMAT_VERSION;

pub const MAX_ABS_TOL: f64 = 1e-10;
pub const COSINE_TOL: f64 = 1e-9;

/// Memberships per token: a fixed count or every group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TopK {
    Fixed(usize),
    All,
}

impl TopK {
    pub fn resolve(self, groups: usize) -> usize {
        match self {
            TopK::Fixed(k) => k,
            TopK::All => groups,
        }
    }
}

impl TryFrom<String> for TopK {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        if s == "K" {
            return Ok(TopK::All);
        }
        match s.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(TopK::Fixed(k)),
            _ => Err(format!("topk entry {s:?} must be a positive integer or \"K\"")),
        }
    }
}

impl From<TopK> for String {
    fn from(k: TopK) -> String {
        k.to_string()
    }
}

impl fmt::Display for TopK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopK::Fixed(k) => write!(f, "{k}"),
            TopK::All => f.write_str("K"),
        }
    }
}

impl Serialize for TopK {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TopK {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        TopK::try_from(s).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub seed: u64,
    #[serde(rename = "T")]
    pub seq_lens: Vec<usize>,
    #[serde(rename = "K")]
    pub groups: Vec<usize>,
    pub windows: Vec<usize>,
    pub topk: Vec<TopK>,
    /// Random repetitions of every grid point.
    pub seeds: usize,
    pub head_dim: usize,
    pub value_dim: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seq_lens: vec![8, 16, 32, 64, 128, 256],
            groups: vec![2, 4, 8],
            windows: vec![1, 4, 16, 128],
            topk: vec![TopK::Fixed(1), TopK::Fixed(2), TopK::All],
            seeds: 10,
            head_dim: 8,
            value_dim: 8,
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> CliResult<()> {
        let nonempty = [("T", self.seq_lens.is_empty()), ("K", self.groups.is_empty()), ("windows", self.windows.is_empty()), ("topk", self.topk.is_empty())];
        if let Some((name, _)) = nonempty.iter().find(|(_, empty)| *empty) {
            return Err(CliError::Usage(format!("config field `{name}` must not be empty")));
        }
        if self.seq_lens.contains(&0) || self.windows.contains(&0) {
            return Err(CliError::Usage("config fields `T` and `windows` must be positive".into()));
        }
        if let Some(&k) = self.groups.iter().find(|&&k| !(1..=64).contains(&k)) {
            return Err(CliError::Usage(format!("config field `K`: {k} groups, need 1..=64")));
        }
        if self.seeds == 0 || self.head_dim == 0 || self.value_dim == 0 {
            return Err(CliError::Usage("config fields `seeds`, `head_dim`, `value_dim` must be positive".into()));
        }
        Ok(())
    }

    /// Grid points in report order, with `k` resolved and deduplicated per K.
    /// Requested `k` larger than K is clamped to K.
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &t in &self.seq_lens {
            for &groups in &self.groups {
                let ks: BTreeSet<usize> = self.topk.iter().map(|k| k.resolve(groups).min(groups)).collect();
                for &w in &self.windows {
                    for &k in &ks {
                        out.push(GridPoint { t, groups, k, w });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridPoint {
    pub t: usize,
    pub groups: usize,
    pub k: usize,
    pub w: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyCase {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "K")]
    pub groups: usize,
    pub k: usize,
    pub w: usize,
    pub seed_index: usize,
    pub max_abs_err: f64,
    pub min_row_cosine: f64,
    #[serde(rename = "pairs_A")]
    pub pairs_a: usize,
    #[serde(rename = "pairs_B")]
    pub pairs_b: usize,
    pub disjoint_ok: bool,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub cases: usize,
    pub passed: usize,
    pub failed: usize,
    pub worst_max_abs_err: f64,
    pub worst_min_row_cosine: f64,
    /// Names of the invariants that failed on at least one case.
    pub violations: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub format_version: u32,
    pub config: VerifyConfig,
    pub fault: bool,
    pub status: String,
    pub summary: VerifySummary,
    pub cases: Vec<VerifyCase>,
}

pub const EXACT_MAX_ABS: &str = "exactness_max_abs";
pub const EXACT_COSINE: &str = "exactness_row_cosine";
pub const DISJOINT_COVER: &str = "disjoint_cover";

fn random_memberships(rng: &mut impl rand::Rng, t: usize, groups: usize, k: usize) -> Vec<Vec<usize>> {
    let mut all: Vec<usize> = (0..groups).collect();
    (0..t)
        .map(|_| {
            all.shuffle(rng);
            all[..k].to_vec()
        })
        .collect()
}

/// `A` and `B` exactly partition the attended pairs and match the
/// brute-force decomposition, compared as sets.
fn disjoint_cover(spec: &MaskSpec, group_pairs: &[(usize, usize)], local_pairs: &[(usize, usize)]) -> bool {
    let a: BTreeSet<_> = group_pairs.iter().copied().collect();
    let b: BTreeSet<_> = local_pairs.iter().copied().collect();
    if a.len() != group_pairs.len() || b.len() != local_pairs.len() || !a.is_disjoint(&b) {
        return false;
    }
    let expected = decomposition_pairs(spec);
    let ea: BTreeSet<_> = expected.same_group.into_iter().collect();
    let eb: BTreeSet<_> = expected.cross_local.into_iter().collect();
    let attended: BTreeSet<_> = build_mask(spec).pairs().into_iter().collect();
    let union: BTreeSet<_> = a.union(&b).copied().collect();
    a == ea && b == eb && union == attended
}

pub fn run_case(cfg: &VerifyConfig, p: GridPoint, case_id: u64, seed_index: usize, fault: bool) -> CliResult<VerifyCase> {
    let mut rng = SeedStream::new(cfg.seed).split(seed_index as u64).stream(case_id);
    let memberships = random_memberships(&mut rng, p.t, p.groups, p.k);
    let spec = MaskSpec::new(p.w, HardAssignment::from_topk(memberships, p.groups)?)?;
    let q = normal_matrix(&mut rng, p.t, cfg.head_dim, 1.0);
    let k = normal_matrix(&mut rng, p.t, cfg.head_dim, 1.0);
    let v = normal_matrix(&mut rng, p.t, cfg.value_dim, 1.0);
    let inp = AttentionInputs::new(q, k, v, p.w)?;

    let opts = ExecOptions { parallel: false, double_count_local: fault, trace: true };
    let (out, trace) = focus_sparse_attention_with(&inp, &spec, &opts)?;
    let reference = masked_reference(&inp, &build_mask(&spec))?;
    let max_abs_err = out.max_abs_diff(&reference);
    let min_row_cosine = row_cosines(&out, &reference).into_iter().fold(f64::INFINITY, f64::min);
    let disjoint_ok = disjoint_cover(&spec, &trace.group_pairs, &trace.local_pairs);
    Ok(VerifyCase {
        t: p.t,
        groups: p.groups,
        k: p.k,
        w: p.w,
        seed_index,
        max_abs_err,
        min_row_cosine,
        pairs_a: trace.group_pairs.len(),
        pairs_b: trace.local_pairs.len(),
        disjoint_ok,
        pass: max_abs_err < MAX_ABS_TOL && min_row_cosine >= 1.0 - COSINE_TOL && disjoint_ok,
    })
}

/// Runs every grid point under every seed. The result depends only on
/// `(cfg, fault)`.
pub fn run_verify(cfg: &VerifyConfig, fault: bool) -> CliResult<VerifyReport> {
    cfg.validate()?;
    let points = cfg.points();
    let jobs: Vec<(usize, usize)> = (0..cfg.seeds).flat_map(|s| (0..points.len()).map(move |c| (s, c))).collect();
    let cases = jobs
        .par_iter()
        .map(|&(s, c)| run_case(cfg, points[c], c as u64, s, fault))
        .collect::<CliResult<Vec<_>>>()?;

    let mut violations = BTreeSet::new();
    for c in &cases {
        if c.max_abs_err.is_nan() || c.max_abs_err >= MAX_ABS_TOL {
            violations.insert(EXACT_MAX_ABS);
        }
        if c.min_row_cosine.is_nan() || c.min_row_cosine < 1.0 - COSINE_TOL {
            violations.insert(EXACT_COSINE);
        }
        if !c.disjoint_ok {
            violations.insert(DISJOINT_COVER);
        }
    }
    let passed = cases.iter().filter(|c| c.pass).count();
    let summary = VerifySummary {
        cases: cases.len(),
        passed,
        failed: cases.len() - passed,
        worst_max_abs_err: cases.iter().map(|c| c.max_abs_err).fold(0.0, f64::max),
        worst_min_row_cosine: cases.iter().map(|c| c.min_row_cosine).fold(1.0, f64::min),
        violations: violations.into_iter().map(String::from).collect(),
    };
    Ok(VerifyReport {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        fault,
        status: if summary.failed == 0 { "PASS" } else { "FAIL" }.to_string(),
        summary,
        cases,
    })
}
