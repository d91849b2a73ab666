//! Report documents and their CSV / JSON-lines renderings.
//!
//! A report is split into a canonical body, which is a pure function of the
//! resolved spec and the binary version, and an envelope with wall-clock
//! details. Only the body is compared across runs.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentSpec;
use crate::engine::{Method, RoundRecord};
use crate::error::Result;
use crate::eval::{LooReport, MetricsReport};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalReport {
    pub command: String,
    pub version: String,
    /// Fully resolved experiment, defaults expanded.
    pub spec: ExperimentSpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub methods: Vec<MetricsReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loo: Vec<LooReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub generated_unix_ms: u128,
    pub duration_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub canonical: CanonicalReport,
    pub envelope: Envelope,
}

impl CanonicalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

fn num(v: f64) -> String {
    v.to_string()
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// One row per method: local and global accuracy and AUC.
pub fn write_table1<W: Write>(out: W, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "method",
        "local_accuracy",
        "local_auc",
        "global_accuracy",
        "global_auc",
    ])?;
    for r in reports {
        w.write_record([
            r.method.to_string(),
            num(r.mean_local_accuracy),
            opt(r.mean_local_auc),
            num(r.mean_global_accuracy),
            opt(r.mean_global_auc),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_tradeoff<W: Write>(out: W, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "method",
        "fine_tune_iters",
        "local_accuracy",
        "global_accuracy",
    ])?;
    for r in reports {
        for row in &r.tradeoff {
            w.write_record([
                r.method.to_string(),
                row.fine_tune_iters.to_string(),
                num(row.mean_local_accuracy),
                num(row.mean_global_accuracy),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One row per holdout plus a `mean` row, per method.
pub fn write_loo<W: Write>(out: W, reports: &[LooReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "method",
        "holdout",
        "unseen_accuracy",
        "unseen_auc",
        "global_model_accuracy",
        "global_model_auc",
    ])?;
    for r in reports {
        for row in &r.rows {
            w.write_record([
                r.method.to_string(),
                row.holdout.to_string(),
                num(row.unseen_accuracy),
                opt(row.unseen_auc),
                num(row.global_model_accuracy),
                opt(row.global_model_auc),
            ])?;
        }
        w.write_record([
            r.method.to_string(),
            "mean".to_string(),
            num(r.mean_unseen_accuracy),
            opt(r.mean_unseen_auc),
            num(r.mean_global_model_accuracy),
            opt(r.mean_global_model_auc),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sharpness<W: Write>(out: W, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "method",
        "client",
        "fine_tune_iters",
        "median_eigenvalue",
        "batches",
        "converged_batches",
    ])?;
    for r in reports {
        for c in r.sharpness.iter().flatten() {
            w.write_record([
                r.method.to_string(),
                c.client_id.to_string(),
                c.fine_tune_iters.to_string(),
                num(c.result.median_eigenvalue),
                c.result.per_batch_eigenvalues.len().to_string(),
                c.result
                    .converged_flags
                    .iter()
                    .filter(|&&f| f)
                    .count()
                    .to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TraceLine<'a> {
    method: Method,
    #[serde(flatten)]
    record: &'a RoundRecord,
}

/// Round records as line-delimited JSON, tagged with their method.
pub fn write_trace<W: Write>(mut out: W, traces: &[(Method, Vec<RoundRecord>)]) -> Result<()> {
    for (method, records) in traces {
        for record in records {
            serde_json::to_writer(
                &mut out,
                &TraceLine {
                    method: *method,
                    record,
                },
            )?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{ClientMetrics, LooRow, TradeoffRow};

    fn metrics() -> MetricsReport {
        let c = ClientMetrics {
            client_id: 0,
            local_accuracy: 0.75,
            local_auc: Some(0.8),
            global_accuracy: 0.5,
            global_auc: None,
        };
        MetricsReport {
            method: Method::FedSoup,
            seeds: vec![3],
            clients: vec![c],
            mean_local_accuracy: 0.75,
            mean_local_auc: Some(0.8),
            mean_global_accuracy: 0.5,
            mean_global_auc: None,
            soup_rounds: vec![vec![150, 151]],
            tradeoff: vec![TradeoffRow {
                fine_tune_iters: 0,
                mean_local_accuracy: 0.75,
                mean_global_accuracy: 0.5,
            }],
            sharpness: None,
        }
    }

    #[test]
    fn table1_layout() {
        let mut buf = Vec::new();
        write_table1(&mut buf, &[metrics()]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "method,local_accuracy,local_auc,global_accuracy,global_auc\nfedsoup,0.75,0.8,0.5,\n"
        );
    }

    #[test]
    fn floats_round_trip_through_csv() {
        let mut m = metrics();
        m.mean_local_accuracy = 0.1 + 0.2;
        let mut buf = Vec::new();
        write_table1(&mut buf, &[m.clone()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cell = text.lines().nth(1).unwrap().split(',').nth(1).unwrap();
        assert_eq!(cell.parse::<f64>().unwrap(), m.mean_local_accuracy);
    }

    #[test]
    fn loo_has_mean_row() {
        let row = |h| LooRow {
            holdout: h,
            unseen_accuracy: 0.5,
            unseen_auc: Some(0.5),
            global_model_accuracy: 0.5,
            global_model_auc: Some(0.5),
        };
        let rep = LooReport {
            method: Method::FedAvg,
            seed: 0,
            rows: (0..4).map(row).collect(),
            mean_unseen_accuracy: 0.5,
            mean_unseen_auc: Some(0.5),
            mean_global_model_accuracy: 0.5,
            mean_global_model_auc: Some(0.5),
        };
        let mut buf = Vec::new();
        write_loo(&mut buf, &[rep]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.lines().last().unwrap().starts_with("fedavg,mean,"));
    }

    #[test]
    fn trace_lines_are_tagged() {
        let rec = RoundRecord {
            round: 0,
            val_accuracy: vec![0.5],
            soup_sizes: vec![0],
            selections: vec![None],
            global_checksum: "00".into(),
        };
        let mut buf = Vec::new();
        write_trace(&mut buf, &[(Method::FedAvg, vec![rec.clone(), rec])]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(v["method"], "fedavg");
        assert_eq!(v["round"], 0);
    }
}
