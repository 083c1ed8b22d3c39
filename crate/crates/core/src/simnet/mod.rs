//! Discrete-time fluid model of flows sharing one FIFO bottleneck.
//!
//! Byte counts are integers so that per-flow accounting closes exactly:
//! every byte a flow sends is delivered, dropped, or still queued.

mod cca;
mod trace;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cca::{pcc_utility, Bbr, BbrMode, CcaId, CcaParams, Controller, Cubic, Feedback, Pcc, PccMode};
pub use trace::{read_events_csv, read_trace_csv, write_events_csv, write_trace_csv};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkConfig {
    pub capacity_mbps: f64,
    pub buffer_packets: u32,
    pub base_rtt_ms: f64,
    pub packet_size_bytes: u32,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self { capacity_mbps: 100.0, buffer_packets: 50, base_rtt_ms: 10.0, packet_size_bytes: 1500 }
    }
}

impl LinkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.capacity_mbps > 0.0 && self.capacity_mbps.is_finite()) {
            return Err(Error::config(format!("capacity_mbps must be positive, got {}", self.capacity_mbps)));
        }
        if self.buffer_packets < 1 {
            return Err(Error::config("buffer_packets must be at least 1"));
        }
        if !(self.base_rtt_ms > 0.0 && self.base_rtt_ms.is_finite()) {
            return Err(Error::config(format!("base_rtt_ms must be positive, got {}", self.base_rtt_ms)));
        }
        if self.packet_size_bytes == 0 {
            return Err(Error::config("packet_size_bytes must be positive"));
        }
        Ok(())
    }

    pub fn buffer_bytes(&self) -> u64 {
        self.buffer_packets as u64 * self.packet_size_bytes as u64
    }

    pub fn bytes_per_second(&self) -> f64 {
        self.capacity_mbps * 1e6 / 8.0
    }

    /// Queueing delay in seconds for `queue_bytes` of backlog.
    pub fn queue_delay_s(&self, queue_bytes: u64) -> f64 {
        queue_bytes as f64 / self.bytes_per_second()
    }

    /// Seconds for a backlog growing at `excess_mbps` to fill the buffer.
    pub fn fill_time_s(&self, excess_mbps: f64) -> f64 {
        self.buffer_bytes() as f64 * 8.0 / (excess_mbps * 1e6)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduledSwitch {
    pub time_s: f64,
    pub cca: CcaId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub flow_id: usize,
    pub initial_cca: CcaId,
    #[serde(default)]
    pub start_time_s: f64,
    #[serde(default)]
    pub switch_schedule: Vec<ScheduledSwitch>,
}

impl FlowConfig {
    pub fn new(flow_id: usize, initial_cca: CcaId) -> Self {
        Self { flow_id, initial_cca, start_time_s: 0.0, switch_schedule: Vec::new() }
    }

    pub fn starting_at(mut self, t: f64) -> Self {
        self.start_time_s = t;
        self
    }

    pub fn switching(mut self, time_s: f64, cca: CcaId) -> Self {
        self.switch_schedule.push(ScheduledSwitch { time_s, cca });
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub dt_s: f64,
    pub sample_interval_s: f64,
    pub duration_s: f64,
    pub cca: CcaParams,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { dt_s: 0.01, sample_interval_s: 1.0, duration_s: 100.0, cca: CcaParams::default() }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt_s > 0.0) || !(self.duration_s > 0.0) || !(self.sample_interval_s > 0.0) {
            return Err(Error::config("dt_s, sample_interval_s and duration_s must be positive"));
        }
        let ratio = self.sample_interval_s / self.dt_s;
        if (ratio - ratio.round()).abs() > 1e-6 || ratio.round() < 1.0 {
            return Err(Error::config(format!(
                "dt_s {} does not divide sample_interval_s {}",
                self.dt_s, self.sample_interval_s
            )));
        }
        self.cca.validate()
    }

    fn steps_per_sample(&self) -> u64 {
        (self.sample_interval_s / self.dt_s).round() as u64
    }

    fn total_steps(&self) -> u64 {
        (self.duration_s / self.dt_s).round() as u64
    }

    /// First step boundary at or after `t`.
    fn boundary(&self, t: f64) -> u64 {
        (t / self.dt_s - 1e-9).ceil().max(0.0) as u64
    }
}

/// One flow's metrics over one sampling interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub time_s: f64,
    pub flow_id: usize,
    pub cca: CcaId,
    pub throughput_mbps: f64,
    pub loss_rate: f64,
    pub rtt_ms: f64,
    pub sending_rate_mbps: f64,
}

impl MetricSample {
    /// `[throughput, loss, rtt, sending]` in the encoder's metric order.
    pub fn metrics(&self) -> [f64; 4] {
        [self.throughput_mbps, self.loss_rate, self.rtt_ms, self.sending_rate_mbps]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchEvent {
    pub time_s: f64,
    pub flow_id: usize,
    pub from_cca: CcaId,
    pub to_cca: CcaId,
}

/// Link-level view of one sampling interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkSample {
    pub time_s: f64,
    pub delivered_mbps: f64,
    pub offered_mbps: f64,
    /// Smallest end-of-step queue seen in the interval.
    pub min_queue_bytes: u64,
}

/// Episode byte totals for one flow.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteAccount {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub queued: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowTrace {
    pub flow_id: usize,
    pub start_time_s: f64,
    pub samples: Vec<MetricSample>,
    pub bytes: ByteAccount,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTrace {
    pub link: LinkConfig,
    pub duration_s: f64,
    pub sample_interval_s: f64,
    pub flows: Vec<FlowTrace>,
    pub switch_events: Vec<SwitchEvent>,
    pub link_samples: Vec<LinkSample>,
}

impl ScenarioTrace {
    pub fn flow(&self, flow_id: usize) -> Option<&FlowTrace> {
        self.flows.iter().find(|f| f.flow_id == flow_id)
    }

    /// All samples ordered by time, then flow id.
    pub fn rows(&self) -> Vec<MetricSample> {
        let mut rows: Vec<MetricSample> = self.flows.iter().flat_map(|f| f.samples.iter().copied()).collect();
        rows.sort_by(|a, b| a.time_s.total_cmp(&b.time_s).then(a.flow_id.cmp(&b.flow_id)));
        rows
    }

    /// Rebuilds a trace from exported rows. Byte totals and link samples
    /// are not part of the CSV export and come back empty.
    pub fn from_rows(link: LinkConfig, rows: &[MetricSample], events: Vec<SwitchEvent>) -> Self {
        let mut flows: Vec<FlowTrace> = Vec::new();
        for r in rows {
            match flows.iter_mut().find(|f| f.flow_id == r.flow_id) {
                Some(f) => f.samples.push(*r),
                None => flows.push(FlowTrace {
                    flow_id: r.flow_id,
                    start_time_s: r.time_s,
                    samples: vec![*r],
                    bytes: ByteAccount::default(),
                }),
            }
        }
        flows.sort_by_key(|f| f.flow_id);
        let duration_s = rows.iter().map(|r| r.time_s).fold(0.0, f64::max);
        let sample_interval_s = flows
            .iter()
            .find(|f| f.samples.len() >= 2)
            .map(|f| f.samples[1].time_s - f.samples[0].time_s)
            .unwrap_or(1.0);
        Self { link, duration_s, sample_interval_s, flows, switch_events: events, link_samples: Vec::new() }
    }
}

#[derive(Clone, Debug, Default)]
struct Interval {
    sent: u64,
    delivered: u64,
    dropped: u64,
    rtt_sum: f64,
    steps: u32,
}

#[derive(Clone, Debug)]
struct FlowSim {
    cfg: FlowConfig,
    start_step: u64,
    /// Scheduled switches as (boundary step, cca), not yet applied.
    schedule: Vec<(u64, CcaId)>,
    pending: Option<CcaId>,
    controller: Option<Controller>,
    queue: u64,
    send_carry: f64,
    last_rtt: f64,
    interval: Interval,
    bytes: ByteAccount,
    samples: Vec<MetricSample>,
}

/// Stepwise simulator; clone it to explore alternative futures.
#[derive(Clone, Debug)]
pub struct Simulator {
    link: LinkConfig,
    cfg: SimConfig,
    rng: ChaCha8Rng,
    flows: Vec<FlowSim>,
    step: u64,
    service_carry: f64,
    link_interval: (u64, u64, u64),
    events: Vec<SwitchEvent>,
    link_samples: Vec<LinkSample>,
}

impl Simulator {
    pub fn new(link: LinkConfig, flows: Vec<FlowConfig>, cfg: SimConfig, seed: u64) -> Result<Self> {
        link.validate()?;
        cfg.validate()?;
        let mut sims = Vec::with_capacity(flows.len());
        for f in flows {
            if sims.iter().any(|s: &FlowSim| s.cfg.flow_id == f.flow_id) {
                return Err(Error::config(format!("flow id {} appears twice", f.flow_id)));
            }
            if !(f.start_time_s >= 0.0 && f.start_time_s < cfg.duration_s) {
                return Err(Error::config(format!(
                    "flow {} starts at {} s, outside the {} s episode",
                    f.flow_id, f.start_time_s, cfg.duration_s
                )));
            }
            let mut last = f.start_time_s;
            for s in &f.switch_schedule {
                if !(s.time_s > last) {
                    return Err(Error::config(format!(
                        "flow {}: switch times must be strictly increasing and after the flow starts",
                        f.flow_id
                    )));
                }
                last = s.time_s;
            }
            let schedule = f.switch_schedule.iter().map(|s| (cfg.boundary(s.time_s), s.cca)).collect();
            sims.push(FlowSim {
                start_step: cfg.boundary(f.start_time_s),
                schedule,
                pending: None,
                controller: None,
                queue: 0,
                send_carry: 0.0,
                last_rtt: link.base_rtt_ms / 1000.0,
                interval: Interval::default(),
                bytes: ByteAccount::default(),
                samples: Vec::new(),
                cfg: f,
            });
        }
        Ok(Self {
            link,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            flows: sims,
            step: 0,
            service_carry: 0.0,
            link_interval: (0, 0, u64::MAX),
            events: Vec::new(),
            link_samples: Vec::new(),
        })
    }

    pub fn link(&self) -> &LinkConfig {
        &self.link
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn now(&self) -> f64 {
        self.step as f64 * self.cfg.dt_s
    }

    /// Lengthens the episode to `duration_s` if that is later than the
    /// current end. Scheduled switches that fell beyond the old end may
    /// now fire.
    pub fn extend_duration(&mut self, duration_s: f64) {
        if duration_s > self.cfg.duration_s {
            self.cfg.duration_s = duration_s;
        }
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.cfg.total_steps()
    }

    pub fn flow_ids(&self) -> Vec<usize> {
        self.flows.iter().map(|f| f.cfg.flow_id).collect()
    }

    fn flow_index(&self, flow_id: usize) -> Result<usize> {
        self.flows
            .iter()
            .position(|f| f.cfg.flow_id == flow_id)
            .ok_or_else(|| Error::Lookup { kind: "flow", key: flow_id.to_string() })
    }

    pub fn is_active(&self, flow_id: usize) -> Result<bool> {
        Ok(self.flows[self.flow_index(flow_id)?].controller.is_some())
    }

    /// CCA in force (or about to start) for a flow.
    pub fn current_cca(&self, flow_id: usize) -> Result<CcaId> {
        let f = &self.flows[self.flow_index(flow_id)?];
        Ok(f.controller.as_ref().map_or(f.cfg.initial_cca, Controller::cca))
    }

    pub fn controller(&self, flow_id: usize) -> Result<Option<&Controller>> {
        Ok(self.flows[self.flow_index(flow_id)?].controller.as_ref())
    }

    pub fn samples(&self, flow_id: usize) -> Result<&[MetricSample]> {
        Ok(&self.flows[self.flow_index(flow_id)?].samples)
    }

    pub fn queue_bytes(&self) -> u64 {
        self.flows.iter().map(|f| f.queue).sum()
    }

    /// Requests a controller change, applied at the next step boundary.
    pub fn switch_cca(&mut self, flow_id: usize, cca: CcaId) -> Result<()> {
        let i = self.flow_index(flow_id)?;
        if self.is_finished() {
            return Ok(());
        }
        self.flows[i].pending = Some(cca);
        Ok(())
    }

    fn apply_switch(&mut self, i: usize, to: CcaId) {
        let now = self.now();
        let p = &self.cfg.cca;
        let f = &mut self.flows[i];
        let Some(ctrl) = &f.controller else {
            f.cfg.initial_cca = to;
            return;
        };
        let from = ctrl.cca();
        if from != to {
            let rate = ctrl.rate_mbps(f.last_rtt, p);
            let packet = self.link.packet_size_bytes as f64;
            f.controller = Some(Controller::handover(to, p, packet, rate, f.last_rtt, now, &mut self.rng));
        }
        self.events.push(SwitchEvent { time_s: now, flow_id: f.cfg.flow_id, from_cca: from, to_cca: to });
    }

    fn boundary_actions(&mut self) {
        for i in 0..self.flows.len() {
            if self.flows[i].controller.is_none() && self.flows[i].start_step == self.step {
                let f = &mut self.flows[i];
                let packet = self.link.packet_size_bytes as f64;
                f.controller = Some(Controller::fresh(f.cfg.initial_cca, &self.cfg.cca, packet, &mut self.rng));
            }
            while let Some(&(at, cca)) = self.flows[i].schedule.first() {
                if at > self.step {
                    break;
                }
                self.flows[i].schedule.remove(0);
                self.apply_switch(i, cca);
            }
            if let Some(cca) = self.flows[i].pending.take() {
                self.apply_switch(i, cca);
            }
        }
    }

    /// Advances one `dt`. Does nothing once the episode is over.
    pub fn step(&mut self) {
        if self.is_finished() {
            return;
        }
        self.boundary_actions();
        let dt = self.cfg.dt_s;
        let p = &self.cfg.cca;
        let n = self.flows.len();

        let mut arrivals = vec![0u64; n];
        for (i, f) in self.flows.iter_mut().enumerate() {
            if let Some(ctrl) = &f.controller {
                let want = ctrl.rate_mbps(f.last_rtt, p).max(0.0) * 1e6 / 8.0 * dt + f.send_carry;
                arrivals[i] = want.floor() as u64;
                f.send_carry = want - arrivals[i] as f64;
            }
        }
        let service_f = self.link.bytes_per_second() * dt + self.service_carry;
        let service = service_f.floor() as u64;
        self.service_carry = service_f - service as f64;

        let backlog: Vec<u64> = self.flows.iter().zip(&arrivals).map(|(f, a)| f.queue + a).collect();
        let total: u64 = backlog.iter().sum();
        let delivered = if total <= service { backlog.clone() } else { apportion(service, &backlog, &backlog) };
        let remaining: Vec<u64> = backlog.iter().zip(&delivered).map(|(b, d)| b - d).collect();
        let left: u64 = remaining.iter().sum();
        let buffer = self.link.buffer_bytes();
        let caps: Vec<u64> = arrivals.iter().zip(&remaining).map(|(a, r)| (*a).min(*r)).collect();
        let dropped = if left > buffer { apportion(left - buffer, &arrivals, &caps) } else { vec![0; n] };

        let queue: u64 = remaining.iter().zip(&dropped).map(|(r, d)| r - d).sum();
        let rtt = self.link.base_rtt_ms / 1000.0 + self.link.queue_delay_s(queue);
        self.step += 1;
        let now = self.now();

        for (i, f) in self.flows.iter_mut().enumerate() {
            f.queue = remaining[i] - dropped[i];
            let Some(ctrl) = &mut f.controller else { continue };
            f.bytes.sent += arrivals[i];
            f.bytes.delivered += delivered[i];
            f.bytes.dropped += dropped[i];
            f.bytes.queued = f.queue;
            f.interval.sent += arrivals[i];
            f.interval.delivered += delivered[i];
            f.interval.dropped += dropped[i];
            f.interval.rtt_sum += rtt;
            f.interval.steps += 1;
            f.last_rtt = rtt;
            let fb = Feedback {
                now,
                dt,
                sent_bytes: arrivals[i],
                delivered_bytes: delivered[i],
                dropped_bytes: dropped[i],
                rtt_s: rtt,
            };
            ctrl.on_step(&fb, p, &mut self.rng);
        }
        let li = &mut self.link_interval;
        li.0 += delivered.iter().sum::<u64>();
        li.1 += arrivals.iter().sum::<u64>();
        li.2 = li.2.min(queue);

        if self.step.is_multiple_of(self.cfg.steps_per_sample()) {
            self.emit_samples();
        }
    }

    fn emit_samples(&mut self) {
        let k = self.step / self.cfg.steps_per_sample();
        let interval = self.cfg.sample_interval_s;
        let time_s = k as f64 * interval;
        let to_mbps = |bytes: u64| bytes as f64 * 8e-6 / interval;
        for f in &mut self.flows {
            let iv = std::mem::take(&mut f.interval);
            let Some(ctrl) = &f.controller else { continue };
            if iv.steps == 0 {
                continue;
            }
            let loss_rate = if iv.sent > 0 { iv.dropped as f64 / iv.sent as f64 } else { 0.0 };
            f.samples.push(MetricSample {
                time_s,
                flow_id: f.cfg.flow_id,
                cca: ctrl.cca(),
                throughput_mbps: to_mbps(iv.delivered.min(iv.sent)),
                loss_rate,
                rtt_ms: iv.rtt_sum / iv.steps as f64 * 1000.0,
                sending_rate_mbps: to_mbps(iv.sent),
            });
        }
        let (delivered, offered, min_queue) = std::mem::replace(&mut self.link_interval, (0, 0, u64::MAX));
        self.link_samples.push(LinkSample {
            time_s,
            delivered_mbps: to_mbps(delivered),
            offered_mbps: to_mbps(offered),
            min_queue_bytes: min_queue,
        });
    }

    /// Steps until simulated time reaches `t` (or the episode ends).
    pub fn run_until(&mut self, t: f64) {
        let target = self.cfg.boundary(t).min(self.cfg.total_steps());
        while self.step < target {
            self.step();
        }
    }

    pub fn run_to_end(&mut self) {
        while !self.is_finished() {
            self.step();
        }
    }

    /// Snapshot of everything recorded so far.
    pub fn trace(&self) -> ScenarioTrace {
        ScenarioTrace {
            link: self.link.clone(),
            duration_s: self.cfg.duration_s,
            sample_interval_s: self.cfg.sample_interval_s,
            flows: self
                .flows
                .iter()
                .map(|f| FlowTrace {
                    flow_id: f.cfg.flow_id,
                    start_time_s: f.cfg.start_time_s,
                    samples: f.samples.clone(),
                    bytes: f.bytes,
                })
                .collect(),
            switch_events: self.events.clone(),
            link_samples: self.link_samples.clone(),
        }
    }

    pub fn finish(mut self) -> ScenarioTrace {
        self.run_to_end();
        self.trace()
    }
}

/// Runs a full episode with fixed per-flow schedules.
pub fn run_scenario(link: &LinkConfig, flows: &[FlowConfig], cfg: &SimConfig, seed: u64) -> Result<ScenarioTrace> {
    Ok(Simulator::new(link.clone(), flows.to_vec(), cfg.clone(), seed)?.finish())
}

/// Splits `total` in proportion to `weights` with largest-remainder
/// rounding, never giving entry `i` more than `caps[i]`. Requires
/// `total <= Σ caps`.
fn apportion(total: u64, weights: &[u64], caps: &[u64]) -> Vec<u64> {
    let n = weights.len();
    let mut out = vec![0u64; n];
    let mut rest = total;
    let mut open: Vec<usize> = (0..n).filter(|&i| caps[i] > 0).collect();
    while rest > 0 && !open.is_empty() {
        let wsum: u128 = open.iter().map(|&i| weights[i].max(1) as u128).sum();
        let mut rema: Vec<(u128, usize)> = Vec::with_capacity(open.len());
        let mut given = 0u64;
        for &i in &open {
            let w = weights[i].max(1) as u128;
            let exact = rest as u128 * w;
            let share = (exact / wsum) as u64;
            let share = share.min(caps[i] - out[i]);
            out[i] += share;
            given += share;
            rema.push((exact % wsum, i));
        }
        rest -= given;
        // hand out the rounding residue one byte at a time, largest remainder first
        rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in &rema {
            if rest == 0 {
                break;
            }
            if out[i] < caps[i] {
                out[i] += 1;
                rest -= 1;
            }
        }
        open.retain(|&i| out[i] < caps[i]);
    }
    debug_assert_eq!(rest, 0, "apportion called with total above capacity");
    out
}
