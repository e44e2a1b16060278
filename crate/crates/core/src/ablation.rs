//! Experiment matrices: ablation flag sets × replay strategies × seeds, with
//! paired per-seed comparisons against a reference cell.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audit::median;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::report::{write_atomic, ProtocolReport};
use crate::sur::ReplayStrategy;
use crate::trainer::AblationFlags;

/// Named flag set. Without explicit flags the name must be a preset:
/// `full`, `wo_ida`, `wo_iso`, `wo_dr`, `wo_all`, `lower_bound`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationAxis {
    pub name: String,
    #[serde(default)]
    pub flags: Option<AblationFlags>,
}

pub fn preset(name: &str) -> Option<AblationFlags> {
    let f = AblationFlags::default();
    Some(match name {
        "full" => f,
        "wo_ida" => AblationFlags { disable_ida: true, ..f },
        "wo_iso" => AblationFlags { disable_iso: true, ..f },
        "wo_dr" => AblationFlags { disable_dr: true, ..f },
        "wo_all" => AblationFlags::without_all_components(),
        "lower_bound" => AblationFlags::lower_bound(),
        _ => return None,
    })
}

impl AblationAxis {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.to_string(),
            flags: None,
        }
    }

    pub fn resolve(&self) -> Result<AblationFlags> {
        match &self.flags {
            Some(f) => Ok(*f),
            None => preset(&self.name).ok_or_else(|| Error::Config {
                key: format!("ablations.{}", self.name),
                message: "not a preset name and no flags given".into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentMatrix {
    pub base: RunConfig,
    pub ablations: Vec<AblationAxis>,
    /// Empty means the base config's strategy only.
    pub strategies: Vec<ReplayStrategy>,
    pub seeds: Vec<u64>,
    /// Ablation name every other cell is compared against.
    pub reference: String,
}

impl Default for ExperimentMatrix {
    fn default() -> Self {
        Self {
            base: RunConfig::default(),
            ablations: vec![AblationAxis::named("full")],
            strategies: Vec::new(),
            seeds: vec![0],
            reference: "full".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub ablation: String,
    pub strategy: ReplayStrategy,
}

impl CellKey {
    pub fn dir_name(&self) -> String {
        format!("{}__{}", self.ablation, self.strategy.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub ablation: String,
    pub strategy: ReplayStrategy,
    pub seeds: usize,
    pub median_final_auc: f64,
    pub median_mean_forgetting: f64,
    /// Median of `cell − reference` final AUC over paired seeds.
    pub median_delta_auc: f64,
    /// Seeds where the cell beats / loses to / ties the reference.
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// Two-sided exact sign-test p-value over non-tied seeds.
    pub sign_test_p: f64,
}

impl ExperimentMatrix {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let key = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "<document>".into());
            Error::Config { key, message: msg }
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            key: "<file>".into(),
            message: format!("{}: {e}", path.display()),
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config {
                key: key.into(),
                message: message.into(),
            })
        };
        if self.ablations.is_empty() {
            return bad("ablations", "empty");
        }
        if self.seeds.is_empty() {
            return bad("seeds", "empty");
        }
        let mut names = std::collections::BTreeSet::new();
        for a in &self.ablations {
            a.resolve()?;
            if !names.insert(&a.name) {
                return bad("ablations", &format!("duplicate name {:?}", a.name));
            }
        }
        if !names.contains(&self.reference) {
            return bad("reference", "must name one of the ablations");
        }
        self.base.clone().resolved()?;
        Ok(())
    }

    fn strategies(&self) -> Vec<ReplayStrategy> {
        if self.strategies.is_empty() {
            vec![self.base.train.strategy]
        } else {
            self.strategies.clone()
        }
    }

    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for a in &self.ablations {
            for s in self.strategies() {
                out.push(CellKey {
                    ablation: a.name.clone(),
                    strategy: s,
                });
            }
        }
        out
    }

    pub fn cell_config(&self, key: &CellKey, seed: u64) -> Result<RunConfig> {
        let axis = self
            .ablations
            .iter()
            .find(|a| a.name == key.ablation)
            .ok_or_else(|| Error::State(format!("unknown cell {}", key.ablation)))?;
        let mut cfg = self.base.clone();
        cfg.train.ablation = axis.resolve()?;
        cfg.train.strategy = key.strategy;
        cfg.output = Default::default();
        cfg.with_seed(seed)
    }
}

pub fn cell_report_path(out: &Path, key: &CellKey, seed: u64) -> PathBuf {
    out.join("cells").join(key.dir_name()).join(format!("seed{seed}")).join("report.json")
}

/// Run (or reuse from disk) one cell for one seed.
pub fn run_cell(matrix: &ExperimentMatrix, key: &CellKey, seed: u64, out: &Path) -> Result<ProtocolReport> {
    let path = cell_report_path(out, key, seed);
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok(r) = ProtocolReport::from_json(&text) {
            if r.config == matrix.cell_config(key, seed)?.echo() {
                return Ok(r);
            }
        }
    }
    let cfg = matrix.cell_config(key, seed)?;
    let report = crate::run_protocol(&cfg)?;
    write_atomic(&path, report.to_json().as_bytes())?;
    Ok(report)
}

/// Exact two-sided binomial sign test with p = 1/2.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let k = wins.min(losses);
    let mut c = 1.0f64;
    let mut tail = 0.0;
    for i in 0..=k {
        if i > 0 {
            c = c * (n - i + 1) as f64 / i as f64;
        }
        tail += c;
    }
    (2.0 * tail / 2f64.powi(n as i32)).min(1.0)
}

/// Pure function of the cell reports.
pub fn summarize(
    matrix: &ExperimentMatrix,
    reports: &BTreeMap<(CellKey, u64), ProtocolReport>,
) -> Result<Vec<SummaryRow>> {
    // pairing: every cell of a seed consumed the same stream
    for &seed in &matrix.seeds {
        let digests: std::collections::BTreeSet<&str> = reports
            .iter()
            .filter(|((_, s), _)| *s == seed)
            .map(|(_, r)| r.stream_digest.as_str())
            .collect();
        if digests.len() > 1 {
            return Err(Error::State(format!("cells for seed {seed} saw different task streams")));
        }
    }
    let get = |k: &CellKey, s: u64| {
        reports
            .get(&(k.clone(), s))
            .ok_or_else(|| Error::State(format!("missing report for {} seed {s}", k.dir_name())))
    };
    let mut rows = Vec::new();
    for key in matrix.cells() {
        let reference = CellKey {
            ablation: matrix.reference.clone(),
            strategy: key.strategy,
        };
        let mut aucs = Vec::new();
        let mut frs = Vec::new();
        let mut deltas = Vec::new();
        for &seed in &matrix.seeds {
            let r = get(&key, seed)?;
            aucs.push(r.final_avg_auc);
            frs.push(r.mean_forgetting.unwrap_or(0.0));
            deltas.push(r.final_avg_auc - get(&reference, seed)?.final_avg_auc);
        }
        let wins = deltas.iter().filter(|&&d| d > 0.0).count();
        let losses = deltas.iter().filter(|&&d| d < 0.0).count();
        rows.push(SummaryRow {
            ablation: key.ablation.clone(),
            strategy: key.strategy,
            seeds: matrix.seeds.len(),
            median_final_auc: median(&aucs),
            median_mean_forgetting: median(&frs),
            median_delta_auc: median(&deltas),
            wins,
            losses,
            ties: deltas.len() - wins - losses,
            sign_test_p: sign_test_p(wins, losses),
        });
    }
    Ok(rows)
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from(
        "ablation,strategy,seeds,median_final_auc,median_mean_forgetting,median_delta_auc,wins,losses,ties,sign_test_p\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.ablation,
            r.strategy.name(),
            r.seeds,
            r.median_final_auc,
            r.median_mean_forgetting,
            r.median_delta_auc,
            r.wins,
            r.losses,
            r.ties,
            r.sign_test_p
        );
    }
    s
}

/// Run every cell (in parallel on the current rayon pool), persist each
/// report as it finishes, then write `summary.csv`.
pub fn run_matrix(matrix: &ExperimentMatrix, out: &Path) -> Result<Vec<SummaryRow>> {
    matrix.validate()?;
    let jobs: Vec<(CellKey, u64)> = matrix
        .cells()
        .into_iter()
        .flat_map(|k| matrix.seeds.iter().map(move |&s| (k.clone(), s)))
        .collect();
    let done: Vec<((CellKey, u64), ProtocolReport)> = jobs
        .into_par_iter()
        .map(|(k, s)| run_cell(matrix, &k, s, out).map(|r| ((k, s), r)))
        .collect::<Result<_>>()?;
    let reports: BTreeMap<_, _> = done.into_iter().collect();
    let rows = summarize(matrix, &reports)?;
    write_atomic(&out.join("summary.csv"), summary_csv(&rows).as_bytes())?;
    Ok(rows)
}
