//! Replay fidelity audit: MMD between each strategy's replay set and the
//! full domain it was drawn from, under the same frozen extractor.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::stack_inputs;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{mmd, MmdConfig};
use crate::sur::{build_replay_set, ReplayBuildOptions, ReplayStrategy};
use crate::taskgen::{generate_stream, Class};
use crate::trainer::{train_root, ProtocolRunner};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    pub strategies: Vec<ReplayStrategy>,
    pub seeds: Vec<u64>,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            strategies: ReplayStrategy::ALL.to_vec(),
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub strategy: ReplayStrategy,
    pub task: u32,
    pub domain: Class,
    pub seed: u64,
    pub mmd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub strategy: ReplayStrategy,
    pub rows: usize,
    pub median_mmd: f64,
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Train one seed's protocol and, after every task, build a replay set per
/// audited strategy from the same snapshot and head.
pub fn audit_seed(cfg: &RunConfig, strategies: &[ReplayStrategy], seed: u64) -> Result<Vec<AuditRow>> {
    let cfg = cfg.clone().with_seed(seed)?;
    let stream = generate_stream(&cfg.protocol)?;
    let mut runner = ProtocolRunner::new(stream, cfg.train.clone(), Default::default())?;
    let mut rows = Vec::new();
    let mut seen = 0;
    while runner.advance()? {
        let done = runner.state.tasks_done as usize;
        if done == seen {
            continue;
        }
        seen = done;
        let task = &runner.stream[done - 1];
        let frozen = runner.state.frozen.as_ref().ok_or_else(|| Error::State("no snapshot".into()))?;
        let head = runner.state.bank.newest()?;
        let full: Vec<_> = [Class::Real, Class::Fake]
            .iter()
            .map(|&c| frozen.forward(&stack_inputs(&task.train_domain(c))?))
            .collect::<Result<_>>()?;
        for &strategy in strategies {
            let opts = ReplayBuildOptions {
                n_r: cfg.train.n_r,
                strategy,
                stability_draws: cfg.train.stability_draws,
            };
            let rng = train_root(&cfg.train).split(&format!("audit/t{}/{}", task.task_id, strategy.name()));
            let set = build_replay_set(task, frozen, Some(head), &opts, &rng)?;
            for dom in &set.domains {
                let idx = usize::from(dom.label.class.is_fake());
                rows.push(AuditRow {
                    strategy,
                    task: task.task_id,
                    domain: dom.label.class,
                    seed,
                    mmd: mmd(&dom.cached_features(), &full[idx], &MmdConfig::default())?,
                });
            }
        }
    }
    Ok(rows)
}

pub fn run_audit(cfg: &RunConfig, audit: &AuditConfig) -> Result<(Vec<AuditRow>, Vec<AuditSummary>)> {
    if audit.strategies.is_empty() || audit.seeds.is_empty() {
        return Err(Error::Config {
            key: "audit".into(),
            message: "needs at least one strategy and one seed".into(),
        });
    }
    let per_seed: Vec<Vec<AuditRow>> = audit
        .seeds
        .par_iter()
        .map(|&s| audit_seed(cfg, &audit.strategies, s))
        .collect::<Result<_>>()?;
    let rows: Vec<AuditRow> = per_seed.into_iter().flatten().collect();
    Ok((rows.clone(), summarize(&rows, &audit.strategies)))
}

pub fn summarize(rows: &[AuditRow], strategies: &[ReplayStrategy]) -> Vec<AuditSummary> {
    strategies
        .iter()
        .map(|&s| {
            let v: Vec<f64> = rows.iter().filter(|r| r.strategy == s).map(|r| r.mmd).collect();
            AuditSummary {
                strategy: s,
                rows: v.len(),
                median_mmd: median(&v),
            }
        })
        .collect()
}

pub fn rows_csv(rows: &[AuditRow]) -> String {
    let mut s = String::from("strategy,task,domain,mmd,seed\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.strategy.name(), r.task, r.domain, r.mmd, r.seed);
    }
    s
}

pub fn summary_csv(summary: &[AuditSummary]) -> String {
    let mut s = String::from("strategy,rows,median_mmd\n");
    for r in summary {
        let _ = writeln!(s, "{},{},{}", r.strategy.name(), r.rows, r.median_mmd);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
