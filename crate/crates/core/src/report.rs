//! Protocol reports: JSON, long-format CSV and feature dumps.
//!
//! All floating-point values are rounded to six decimals when the report is
//! assembled, so both encodings carry the same numbers.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::forgetting_rate;
use crate::numerics::round6;
use crate::trainer::{FeatureDump, MmdRow, Progress, TraceRow};
use crate::losses::LossValues;
use crate::sur::ReplaySet;

pub const SCHEMA_VERSION: u32 = 1;
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingRow {
    pub task: u32,
    pub auc_first: f64,
    pub auc_last: f64,
    pub fr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementSummary {
    pub after_task: u32,
    pub silhouette: f64,
    pub head_angle: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub schema_version: u32,
    pub code_version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub stream_digest: String,
    /// Lower-triangular: row `i` holds tasks `1..=i+1` after task `i+1`.
    pub auc: Vec<Vec<f64>>,
    pub acc: Vec<Vec<f64>>,
    pub forgetting: Vec<ForgettingRow>,
    pub final_avg_auc: f64,
    /// Mean forgetting over every task but the last; absent for one task.
    pub mean_forgetting: Option<f64>,
    pub mmd_audit: Vec<MmdRow>,
    pub increments: Vec<IncrementSummary>,
    pub replay_digests: Vec<String>,
    pub loss_trace: Vec<TraceRow>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub feature_dumps: Option<Vec<FeatureDump>>,
}

fn r6(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| round6(x)).collect()
}

impl ProtocolReport {
    pub fn build(config: &RunConfig, stream_digest: &str, progress: &Progress, replay: &[ReplaySet]) -> Result<Self> {
        let auc: Vec<Vec<f64>> = progress.increments.iter().map(|r| r6(&r.auc)).collect();
        let acc: Vec<Vec<f64>> = progress.increments.iter().map(|r| r6(&r.acc)).collect();
        let mut forgetting = Vec::new();
        if let Some(last) = progress.increments.last() {
            for (j, &auc_last) in last.auc.iter().enumerate() {
                let auc_first = progress.increments[j].auc[j];
                forgetting.push(ForgettingRow {
                    task: j as u32 + 1,
                    auc_first: round6(auc_first),
                    auc_last: round6(auc_last),
                    fr: round6(forgetting_rate(auc_first, auc_last)?),
                });
            }
        }
        let final_avg_auc = progress
            .increments
            .last()
            .map(|r| r.auc.iter().sum::<f64>() / r.auc.len() as f64)
            .unwrap_or(f64::NAN);
        let mean_forgetting = if forgetting.len() >= 2 {
            let n = forgetting.len() - 1;
            let raw: f64 = (0..n)
                .map(|j| forgetting_rate(progress.increments[j].auc[j], progress.increments[n].auc[j]))
                .sum::<Result<f64>>()?;
            Some(round6(raw / n as f64))
        } else {
            None
        };
        let feature_dumps = config.output.dump_features.then(|| {
            progress
                .dumps
                .iter()
                .map(|d| FeatureDump {
                    after_task: d.after_task,
                    points: d
                        .points
                        .iter()
                        .map(|p| crate::trainer::FeaturePoint {
                            feature: r6(&p.feature),
                            ..p.clone()
                        })
                        .collect(),
                })
                .collect()
        });
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            code_version: CODE_VERSION.to_string(),
            seed: config.seed,
            config: config.echo(),
            stream_digest: stream_digest.to_string(),
            auc,
            acc,
            forgetting,
            final_avg_auc: round6(final_avg_auc),
            mean_forgetting,
            mmd_audit: progress
                .mmd
                .iter()
                .map(|m| MmdRow {
                    mmd: round6(m.mmd),
                    ..m.clone()
                })
                .collect(),
            increments: progress
                .increments
                .iter()
                .map(|r| IncrementSummary {
                    after_task: r.after_task,
                    silhouette: round6(r.silhouette),
                    head_angle: r.head_angle.map(round6),
                })
                .collect(),
            replay_digests: replay.iter().map(|r| r.digest()).collect(),
            loss_trace: progress
                .trace
                .iter()
                .map(|t| TraceRow {
                    task: t.task,
                    step: t.step,
                    values: LossValues {
                        l_iso: round6(t.values.l_iso),
                        l_dis: round6(t.values.l_dis),
                        l_det: round6(t.values.l_det),
                        l_overall: round6(t.values.l_overall),
                    },
                })
                .collect(),
            feature_dumps,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::VersionMismatch {
                found: r.schema_version,
                supported: SCHEMA_VERSION,
            });
        }
        Ok(r)
    }

    /// Every numeric field as `(table, row, col, key, value)`.
    pub fn long_rows(&self) -> Vec<(&'static str, String, String, String, f64)> {
        let mut out = Vec::new();
        let s = |x: u32| x.to_string();
        for (i, row) in self.auc.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                out.push(("auc", s(i as u32 + 1), s(j as u32 + 1), String::new(), v));
            }
        }
        for (i, row) in self.acc.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                out.push(("acc", s(i as u32 + 1), s(j as u32 + 1), String::new(), v));
            }
        }
        for f in &self.forgetting {
            for (k, v) in [("auc_first", f.auc_first), ("auc_last", f.auc_last), ("fr", f.fr)] {
                out.push(("forgetting", s(f.task), String::new(), k.to_string(), v));
            }
        }
        out.push(("summary", String::new(), String::new(), "final_avg_auc".into(), self.final_avg_auc));
        if let Some(m) = self.mean_forgetting {
            out.push(("summary", String::new(), String::new(), "mean_forgetting".into(), m));
        }
        for m in &self.mmd_audit {
            out.push(("mmd", s(m.task), m.domain.to_string(), m.strategy.name().to_string(), m.mmd));
        }
        for inc in &self.increments {
            out.push(("increment", s(inc.after_task), String::new(), "silhouette".into(), inc.silhouette));
            if let Some(a) = inc.head_angle {
                out.push(("increment", s(inc.after_task), String::new(), "head_angle".into(), a));
            }
        }
        for t in &self.loss_trace {
            let v = &t.values;
            for (k, x) in [("l_iso", v.l_iso), ("l_dis", v.l_dis), ("l_det", v.l_det), ("l_overall", v.l_overall)] {
                out.push(("trace", s(t.task), t.step.to_string(), k.to_string(), x));
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("table,row,col,key,value\n");
        for (table, row, col, key, v) in self.long_rows() {
            let _ = writeln!(s, "{table},{row},{col},{key},{v}");
        }
        s
    }

    /// `features_task{t}.csv` contents, one per dump.
    pub fn feature_csvs(&self) -> Vec<(String, String)> {
        let Some(dumps) = &self.feature_dumps else {
            return Vec::new();
        };
        dumps
            .iter()
            .map(|d| {
                let dim = d.points.first().map_or(0, |p| p.feature.len());
                let mut s = String::from("task,class,domain");
                for k in 0..dim {
                    let _ = write!(s, ",f{k}");
                }
                s.push('\n');
                for p in &d.points {
                    let _ = write!(s, "{},{},{}", p.task, p.class, p.domain);
                    for v in &p.feature {
                        let _ = write!(s, ",{v}");
                    }
                    s.push('\n');
                }
                (format!("features_task{}.csv", d.after_task), s)
            })
            .collect()
    }
}

/// Write via a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Write the report files selected by the config's output section.
/// Returns the paths written.
pub fn emit(report: &ProtocolReport, out_dir: &Path, json: bool, csv: bool) -> Result<Vec<std::path::PathBuf>> {
    let mut written = Vec::new();
    if json {
        let p = out_dir.join("report.json");
        write_atomic(&p, report.to_json().as_bytes())?;
        written.push(p);
    }
    if csv {
        let p = out_dir.join("report.csv");
        write_atomic(&p, report.to_csv().as_bytes())?;
        written.push(p);
    }
    for (name, body) in report.feature_csvs() {
        let p = out_dir.join(name);
        write_atomic(&p, body.as_bytes())?;
        written.push(p);
    }
    Ok(written)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub wall_clock_seconds: f64,
    pub seed: u64,
}

/// Parse a long-format CSV back into `(table,row,col,key) -> value`.
pub fn parse_long_csv(text: &str) -> Result<Vec<(String, String, String, String, f64)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::CorruptFile(format!("csv line {} has {} fields", n + 1, parts.len())));
        }
        let v: f64 = parts[4]
            .parse()
            .map_err(|_| Error::CorruptFile(format!("csv line {}: bad value {:?}", n + 1, parts[4])))?;
        out.push((parts[0].into(), parts[1].into(), parts[2].into(), parts[3].into(), v));
    }
    Ok(out)
}

