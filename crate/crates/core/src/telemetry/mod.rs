//! Rewards, returns, fairness detectors and the experience pool.

mod pool;
pub mod stats;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simnet::{CcaId, MetricSample, ScenarioTrace};

pub use pool::{collect_experience, ExperiencePool, Trajectory};

/// Detector thresholds and window length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub theta_fair: f64,
    pub theta_starve: f64,
    /// Window length in samples.
    pub window: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { theta_fair: 0.8, theta_starve: 0.1, window: 5 }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_fair > 0.0 && self.theta_fair <= 1.0) || !(self.theta_starve > 0.0) || self.window == 0 {
            return Err(Error::config("theta_fair in (0, 1], theta_starve > 0 and window ≥ 1 required"));
        }
        Ok(())
    }
}

/// `throughput / (rtt + 1) − loss` with throughput in Mbps and RTT in ms.
pub fn compute_reward(s: &MetricSample) -> f64 {
    reward(s.throughput_mbps, s.rtt_ms, s.loss_rate)
}

pub fn reward(throughput_mbps: f64, rtt_ms: f64, loss_rate: f64) -> f64 {
    throughput_mbps / (rtt_ms + 1.0) - loss_rate
}

/// Suffix sums `R_t = Σ_{i≥t} r_i`, accumulated from the end.
pub fn compute_returns(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc += r;
        *o = acc;
    }
    out
}

/// `(Σx)² / (n·Σx²)`.
pub fn jains_index(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Degenerate("Jain's index of no flows".into()));
    }
    if x.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Degenerate("Jain's index needs finite non-negative throughputs".into()));
    }
    let sum: f64 = x.iter().sum();
    if sum == 0.0 {
        return Err(Error::Degenerate("Jain's index undefined when every throughput is zero".into()));
    }
    let sq: f64 = x.iter().map(|v| v * v).sum();
    Ok(sum * sum / (x.len() as f64 * sq))
}

/// The most recent samples of one flow, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowWindow {
    pub flow_id: usize,
    capacity: usize,
    samples: VecDeque<MetricSample>,
}

impl FlowWindow {
    pub fn new(flow_id: usize, capacity: usize) -> Self {
        Self { flow_id, capacity: capacity.max(1), samples: VecDeque::with_capacity(capacity) }
    }

    /// Window over the last `w` samples of a series.
    pub fn from_tail(flow_id: usize, w: usize, samples: &[MetricSample]) -> Self {
        let mut win = Self::new(flow_id, w);
        for s in &samples[samples.len().saturating_sub(w)..] {
            win.push(*s);
        }
        win
    }

    pub fn push(&mut self, s: MetricSample) {
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back(s);
    }

    pub fn is_full(&self) -> bool {
        self.samples.len() == self.capacity
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> impl Iterator<Item = &MetricSample> {
        self.samples.iter()
    }

    pub fn mean_throughput(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s.throughput_mbps).sum::<f64>() / self.samples.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FairnessVerdict {
    /// Fewer than two flows with full windows.
    NotApplicable,
    Fair { jain: f64, shares: BTreeMap<usize, f64> },
    Unfair { jain: f64, shares: BTreeMap<usize, f64> },
}

impl FairnessVerdict {
    pub fn is_unfair(&self) -> bool {
        matches!(self, FairnessVerdict::Unfair { .. })
    }
}

/// Unfair iff the Jain index of window-mean throughputs is below
/// `theta_fair`. Only flows with full windows take part.
pub fn detect_unfairness(windows: &[FlowWindow], theta_fair: f64) -> FairnessVerdict {
    let full: Vec<&FlowWindow> = windows.iter().filter(|w| w.is_full()).collect();
    if full.len() < 2 {
        return FairnessVerdict::NotApplicable;
    }
    let means: Vec<f64> = full.iter().map(|w| w.mean_throughput()).collect();
    let Ok(jain) = jains_index(&means) else { return FairnessVerdict::NotApplicable };
    let total: f64 = means.iter().sum();
    let shares = full.iter().zip(&means).map(|(w, m)| (w.flow_id, m / total)).collect();
    if jain < theta_fair {
        FairnessVerdict::Unfair { jain, shares }
    } else {
        FairnessVerdict::Fair { jain, shares }
    }
}

/// Flows whose every windowed sample sits below `theta_starve` of the fair
/// share `capacity / n`, where `n` counts the flows with full windows.
pub fn detect_starvation(windows: &[FlowWindow], capacity_mbps: f64, theta_starve: f64) -> BTreeSet<usize> {
    let full: Vec<&FlowWindow> = windows.iter().filter(|w| w.is_full()).collect();
    if full.is_empty() {
        return BTreeSet::new();
    }
    let threshold = theta_starve * capacity_mbps / full.len() as f64;
    full.iter().filter(|w| w.samples().all(|s| s.throughput_mbps < threshold)).map(|w| w.flow_id).collect()
}

/// Samples of one flow keyed by sample index on the trace's time grid.
fn sample_grid(trace: &ScenarioTrace) -> Vec<BTreeMap<i64, MetricSample>> {
    let dt = trace.sample_interval_s;
    trace
        .flows
        .iter()
        .map(|f| f.samples.iter().map(|s| ((s.time_s / dt).round() as i64, *s)).collect())
        .collect()
}

/// Sliding windows over the trace. Calls `f(k, windows)` for every window
/// end index `k`, passing the windows of flows active across the whole
/// window.
pub fn for_each_window(trace: &ScenarioTrace, w: usize, mut f: impl FnMut(i64, &[FlowWindow])) {
    let grid = sample_grid(trace);
    let Some(last) = grid.iter().filter_map(|g| g.keys().next_back().copied()).max() else { return };
    let first = grid.iter().filter_map(|g| g.keys().next().copied()).min().unwrap_or(last);
    for k in first + w as i64 - 1..=last {
        let mut windows = Vec::new();
        for (fi, g) in grid.iter().enumerate() {
            let mut win = FlowWindow::new(trace.flows[fi].flow_id, w);
            for j in k + 1 - w as i64..=k {
                if let Some(s) = g.get(&j) {
                    win.push(*s);
                }
            }
            if win.is_full() {
                windows.push(win);
            }
        }
        f(k, &windows);
    }
}

/// Starvation over a whole trace: every flow flagged in at least one window.
pub fn starved_flows(trace: &ScenarioTrace, cfg: &DetectorConfig) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    for_each_window(trace, cfg.window, |_, windows| {
        out.extend(detect_starvation(windows, trace.link.capacity_mbps, cfg.theta_starve));
    });
    out
}

/// Unordered CCA pairs whose flows stay unfair (Jain < `theta_fair`) in
/// every window where the two coexist under those CCAs.
pub fn detect_incompatibility(trace: &ScenarioTrace, cfg: &DetectorConfig) -> BTreeSet<(CcaId, CcaId)> {
    let mut seen: BTreeMap<(CcaId, CcaId), bool> = BTreeMap::new();
    for_each_window(trace, cfg.window, |_, windows| {
        for (i, a) in windows.iter().enumerate() {
            for b in &windows[i + 1..] {
                let (Some(ca), Some(cb)) = (uniform_cca(a), uniform_cca(b)) else { continue };
                if ca == cb {
                    continue;
                }
                let key = if ca < cb { (ca, cb) } else { (cb, ca) };
                let unfair = jains_index(&[a.mean_throughput(), b.mean_throughput()]).is_ok_and(|j| j < cfg.theta_fair);
                let entry = seen.entry(key).or_insert(true);
                *entry &= unfair;
            }
        }
    });
    seen.into_iter().filter(|(_, always)| *always).map(|(k, _)| k).collect()
}

fn uniform_cca(w: &FlowWindow) -> Option<CcaId> {
    let mut it = w.samples().map(|s| s.cca);
    let first = it.next()?;
    it.all(|c| c == first).then_some(first)
}
