//! Comparison summaries and plot-ready CSV emitters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::control::{ArmReport, Scenario};
use crate::error::{Error, Result};
use crate::model::Decision;
use crate::simnet::{MetricSample, ScenarioTrace};
use crate::telemetry::stats::{self, BoxStats};

pub type MetricFn = fn(&MetricSample) -> f64;

/// Reported metrics and how each is read from a sample.
pub const METRICS: [(&str, MetricFn); 3] = [
    ("throughput_mbps", |s| s.throughput_mbps),
    ("loss_rate", |s| s.loss_rate),
    ("rtt_ms", |s| s.rtt_ms),
];

/// The three arms run by a comparison, in output order.
pub const ARMS: [&str; 3] = ["static", "oracle", "policy"];

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSummary {
    pub scenario: Scenario,
    pub seed: u64,
    pub switch_interval_s: f64,
    pub arms: Vec<ArmReport>,
}

impl CompareSummary {
    pub fn arm(&self, name: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.arm == name)
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<csv output>", e)
}

/// `time_s,flow_id,chosen_cca,logit_cubic,logit_bbr,logit_pcc,latency_s`.
pub fn write_decisions_csv<W: Write>(out: W, decisions: &[Decision]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Parse { location: "decisions csv".into(), message: e.to_string() };
    w.write_record(["time_s", "flow_id", "chosen_cca", "logit_cubic", "logit_bbr", "logit_pcc", "latency_s"])
        .map_err(csv_err)?;
    for d in decisions {
        w.write_record([
            d.time_s.to_string(),
            d.flow_id.to_string(),
            d.chosen.name().to_string(),
            d.logits[0].to_string(),
            d.logits[1].to_string(),
            d.logits[2].to_string(),
            d.latency.as_secs_f64().to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err)
}

/// Per-flow values of one metric.
pub fn metric_values(trace: &ScenarioTrace, metric: fn(&MetricSample) -> f64) -> BTreeMap<usize, Vec<f64>> {
    trace.flows.iter().map(|f| (f.flow_id, f.samples.iter().map(metric).collect())).collect()
}

/// `value,cum_frac` rows of the empirical CDF.
pub fn write_cdf_csv<W: Write>(mut out: W, values: &[f64]) -> Result<()> {
    writeln!(out, "value,cum_frac").map_err(io_err)?;
    for (x, p) in stats::ecdf(values) {
        writeln!(out, "{x},{p}").map_err(io_err)?;
    }
    Ok(())
}

/// CDF rows for every arm, flow and metric:
/// `arm,flow_id,metric,value,cum_frac`.
pub fn write_cdf_table<W: Write>(mut out: W, traces: &[(&str, &ScenarioTrace)]) -> Result<()> {
    writeln!(out, "arm,flow_id,metric,value,cum_frac").map_err(io_err)?;
    for (arm, trace) in traces {
        for (name, f) in METRICS {
            for (flow, v) in metric_values(trace, f) {
                for (x, p) in stats::ecdf(&v) {
                    writeln!(out, "{arm},{flow},{name},{x},{p}").map_err(io_err)?;
                }
            }
        }
    }
    Ok(())
}

/// Five-number summaries: `arm,flow_id,metric,min,q1,median,q3,max`.
pub fn write_box_table<W: Write>(mut out: W, traces: &[(&str, &ScenarioTrace)]) -> Result<()> {
    writeln!(out, "arm,flow_id,metric,min,q1,median,q3,max").map_err(io_err)?;
    for (arm, trace) in traces {
        for (name, f) in METRICS {
            for (flow, v) in metric_values(trace, f) {
                if let Some(BoxStats { min, q1, median, q3, max }) = stats::box_stats(&v) {
                    writeln!(out, "{arm},{flow},{name},{min},{q1},{median},{q3},{max}").map_err(io_err)?;
                }
            }
        }
    }
    Ok(())
}

/// Fixed-width table of per-flow medians for each arm and metric, with the
/// settled Jain index and detector verdicts.
pub fn summary_table(summary: &CompareSummary, traces: &[(&str, &ScenarioTrace)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "scenario {} (seed {}, switch every {} s)", summary.scenario, summary.seed, summary.switch_interval_s);
    let _ = writeln!(s, "{:<8} {:<16} {:>12} {:>12}", "arm", "metric", "flow 0", "flow 1");
    for (arm, trace) in traces {
        for (name, f) in METRICS {
            let med: Vec<String> = metric_values(trace, f)
                .values()
                .map(|v| stats::median(v).map_or("-".into(), |m| format!("{m:.4}")))
                .collect();
            let _ = writeln!(
                s,
                "{:<8} {:<16} {:>12} {:>12}",
                arm,
                name,
                med.first().map_or("-", String::as_str),
                med.get(1).map_or("-", String::as_str)
            );
        }
    }
    for a in &summary.arms {
        let _ = writeln!(
            s,
            "{:<8} settled jain {:.3} after {} s; starved {:?}; incompatible {:?}",
            a.arm, a.settled.jain, a.settled.from_s, a.starved, a.incompatible
        );
    }
    s
}
