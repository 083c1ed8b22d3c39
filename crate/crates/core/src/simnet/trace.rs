use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{CcaId, MetricSample, SwitchEvent};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct TraceRow {
    time_s: f64,
    flow_id: usize,
    cca: String,
    throughput_mbps: f64,
    loss_rate: f64,
    rtt_ms: f64,
    sending_rate_mbps: f64,
}

#[derive(Serialize, Deserialize)]
struct EventRow {
    time_s: f64,
    flow_id: usize,
    from_cca: String,
    to_cca: String,
}

fn csv_err(e: csv::Error) -> Error {
    let location = e.position().map_or_else(|| "unknown position".to_string(), |p| format!("line {}", p.line()));
    Error::Parse { location, message: e.to_string() }
}

fn parse_cca(s: &str, line: u64) -> Result<CcaId> {
    s.parse().map_err(|_| Error::Parse { location: format!("line {line}"), message: format!("unknown CCA `{s}`") })
}

/// Writes `time_s,flow_id,cca,throughput_mbps,loss_rate,rtt_ms,sending_rate_mbps`.
pub fn write_trace_csv<W: Write>(out: W, rows: &[MetricSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(["time_s", "flow_id", "cca", "throughput_mbps", "loss_rate", "rtt_ms", "sending_rate_mbps"])
            .map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(TraceRow {
            time_s: r.time_s,
            flow_id: r.flow_id,
            cca: r.cca.name().to_string(),
            throughput_mbps: r.throughput_mbps,
            loss_rate: r.loss_rate,
            rtt_ms: r.rtt_ms,
            sending_rate_mbps: r.sending_rate_mbps,
        })
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<trace csv>", e))
}

pub fn read_trace_csv<R: Read>(input: R) -> Result<Vec<MetricSample>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_err)?.clone();
    let expected = ["time_s", "flow_id", "cca", "throughput_mbps", "loss_rate", "rtt_ms", "sending_rate_mbps"];
    if header.iter().ne(expected) {
        return Err(Error::Parse { location: "line 1".into(), message: format!("unexpected header {header:?}") });
    }
    let mut rows = Vec::new();
    for rec in r.deserialize::<TraceRow>() {
        let row = rec.map_err(csv_err)?;
        let line = rows.len() as u64 + 2;
        let s = MetricSample {
            time_s: row.time_s,
            flow_id: row.flow_id,
            cca: parse_cca(&row.cca, line)?,
            throughput_mbps: row.throughput_mbps,
            loss_rate: row.loss_rate,
            rtt_ms: row.rtt_ms,
            sending_rate_mbps: row.sending_rate_mbps,
        };
        let finite = s.metrics().iter().all(|v| v.is_finite()) && s.time_s.is_finite();
        if !finite || !(0.0..=1.0).contains(&s.loss_rate) {
            return Err(Error::Parse { location: format!("line {line}"), message: "metric out of range".into() });
        }
        rows.push(s);
    }
    Ok(rows)
}

/// Writes the `time_s,flow_id,from_cca,to_cca` sidecar.
pub fn write_events_csv<W: Write>(out: W, events: &[SwitchEvent]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if events.is_empty() {
        w.write_record(["time_s", "flow_id", "from_cca", "to_cca"]).map_err(csv_err)?;
    }
    for e in events {
        w.serialize(EventRow {
            time_s: e.time_s,
            flow_id: e.flow_id,
            from_cca: e.from_cca.name().to_string(),
            to_cca: e.to_cca.name().to_string(),
        })
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<events csv>", e))
}

pub fn read_events_csv<R: Read>(input: R) -> Result<Vec<SwitchEvent>> {
    let mut r = csv::Reader::from_reader(input);
    let mut events = Vec::new();
    for rec in r.deserialize::<EventRow>() {
        let row = rec.map_err(csv_err)?;
        let line = events.len() as u64 + 2;
        events.push(SwitchEvent {
            time_s: row.time_s,
            flow_id: row.flow_id,
            from_cca: parse_cca(&row.from_cca, line)?,
            to_cca: parse_cca(&row.to_cca, line)?,
        });
    }
    Ok(events)
}
