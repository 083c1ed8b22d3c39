//! Rate-producing congestion controllers driven by per-step link feedback.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CcaId {
    Cubic = 0,
    Bbr = 1,
    Pcc = 2,
}

impl CcaId {
    pub const ALL: [CcaId; 3] = [CcaId::Cubic, CcaId::Bbr, CcaId::Pcc];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<CcaId> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            CcaId::Cubic => "cubic",
            CcaId::Bbr => "bbr",
            CcaId::Pcc => "pcc",
        }
    }
}

impl fmt::Display for CcaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CcaId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "cubic" | "0" => Ok(CcaId::Cubic),
            "bbr" | "1" => Ok(CcaId::Bbr),
            "pcc" | "2" => Ok(CcaId::Pcc),
            _ => Err(Error::Lookup { kind: "CCA", key: s.to_string() }),
        }
    }
}

/// Tunable constants for the three controllers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CcaParams {
    pub cubic_c: f64,
    pub cubic_beta: f64,
    /// Initial window in packets for a fresh Cubic flow.
    pub cubic_init_cwnd: f64,
    pub bbr_pacing_gains: Vec<f64>,
    /// In-flight cap as a multiple of the estimated bandwidth-delay product.
    pub bbr_cwnd_gain: f64,
    pub bbr_bw_window_s: f64,
    pub bbr_rtt_window_s: f64,
    pub bbr_startup_gain: f64,
    /// Floor on the in-flight cap, in packets.
    pub bbr_min_cwnd_packets: f64,
    pub pcc_epsilon: f64,
    pub pcc_lambda: f64,
    /// Base rate change per probing decision, as a fraction of the rate.
    pub pcc_step: f64,
    pub pcc_max_amplifier: u32,
    /// Monitor-interval length in simulation steps.
    pub pcc_mi_steps: u32,
    pub initial_rate_mbps: f64,
}

impl Default for CcaParams {
    fn default() -> Self {
        Self {
            cubic_c: 0.4,
            cubic_beta: 0.7,
            cubic_init_cwnd: 10.0,
            bbr_pacing_gains: vec![1.25, 0.75, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
            bbr_cwnd_gain: 1.2,
            bbr_bw_window_s: 0.1,
            bbr_rtt_window_s: 10.0,
            bbr_startup_gain: 2.885,
            bbr_min_cwnd_packets: 4.0,
            pcc_epsilon: 0.05,
            pcc_lambda: 10.0,
            pcc_step: 0.01,
            pcc_max_amplifier: 4,
            pcc_mi_steps: 2,
            initial_rate_mbps: 1.0,
        }
    }
}

impl CcaParams {
    pub fn validate(&self) -> Result<(), Error> {
        let positive = [
            ("cubic_c", self.cubic_c),
            ("cubic_init_cwnd", self.cubic_init_cwnd),
            ("bbr_cwnd_gain", self.bbr_cwnd_gain),
            ("bbr_bw_window_s", self.bbr_bw_window_s),
            ("bbr_rtt_window_s", self.bbr_rtt_window_s),
            ("bbr_startup_gain", self.bbr_startup_gain),
            ("bbr_min_cwnd_packets", self.bbr_min_cwnd_packets),
            ("pcc_epsilon", self.pcc_epsilon),
            ("pcc_step", self.pcc_step),
            ("initial_rate_mbps", self.initial_rate_mbps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.cubic_beta > 0.0 && self.cubic_beta < 1.0) {
            return Err(Error::config(format!("cubic_beta must lie in (0, 1), got {}", self.cubic_beta)));
        }
        if self.bbr_pacing_gains.is_empty() || self.bbr_pacing_gains.iter().any(|g| !(*g > 0.0)) {
            return Err(Error::config("bbr_pacing_gains must be a non-empty list of positive gains"));
        }
        if self.pcc_lambda < 0.0 || self.pcc_mi_steps == 0 || self.pcc_max_amplifier == 0 {
            return Err(Error::config("pcc_lambda ≥ 0, pcc_mi_steps ≥ 1 and pcc_max_amplifier ≥ 1 required"));
        }
        Ok(())
    }
}

/// What a flow observed during one simulation step.
#[derive(Clone, Copy, Debug, Default)]
pub struct Feedback {
    pub now: f64,
    pub dt: f64,
    pub sent_bytes: u64,
    pub delivered_bytes: u64,
    pub dropped_bytes: u64,
    pub rtt_s: f64,
}

impl Feedback {
    fn delivered_mbps(&self) -> f64 {
        self.delivered_bytes as f64 * 8e-6 / self.dt
    }
}

/// Per-flow congestion controller; outputs a sending rate in Mbps.
#[derive(Clone, Debug)]
pub enum Controller {
    Cubic(Cubic),
    Bbr(Bbr),
    Pcc(Pcc),
}

impl Controller {
    pub fn fresh(cca: CcaId, p: &CcaParams, packet_bytes: f64, rng: &mut ChaCha8Rng) -> Self {
        match cca {
            CcaId::Cubic => Controller::Cubic(Cubic::fresh(p, packet_bytes)),
            CcaId::Bbr => Controller::Bbr(Bbr::fresh(p, packet_bytes, rng)),
            CcaId::Pcc => Controller::Pcc(Pcc::fresh(p)),
        }
    }

    /// A controller of kind `cca` continuing at `rate_mbps`.
    pub fn handover(
        cca: CcaId,
        p: &CcaParams,
        packet_bytes: f64,
        rate_mbps: f64,
        rtt_s: f64,
        now: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        match cca {
            CcaId::Cubic => Controller::Cubic(Cubic::continuing(p, packet_bytes, rate_mbps, rtt_s, now)),
            CcaId::Bbr => Controller::Bbr(Bbr::continuing(p, packet_bytes, rate_mbps, rtt_s, now, rng)),
            CcaId::Pcc => Controller::Pcc(Pcc::continuing(rate_mbps, p)),
        }
    }

    pub fn cca(&self) -> CcaId {
        match self {
            Controller::Cubic(_) => CcaId::Cubic,
            Controller::Bbr(_) => CcaId::Bbr,
            Controller::Pcc(_) => CcaId::Pcc,
        }
    }

    /// Rate to send at during the next step, given the latest RTT.
    pub fn rate_mbps(&self, rtt_s: f64, p: &CcaParams) -> f64 {
        match self {
            Controller::Cubic(c) => c.rate_mbps(rtt_s),
            Controller::Bbr(b) => b.rate_mbps(rtt_s, p),
            Controller::Pcc(c) => c.rate_mbps(p),
        }
    }

    pub fn on_step(&mut self, fb: &Feedback, p: &CcaParams, rng: &mut ChaCha8Rng) {
        match self {
            Controller::Cubic(c) => c.on_step(fb, p),
            Controller::Bbr(b) => b.on_step(fb, p),
            Controller::Pcc(c) => c.on_step(fb, p, rng),
        }
    }
}

/// Window-based loss-driven controller with cubic window growth.
#[derive(Clone, Debug)]
pub struct Cubic {
    packet_bits: f64,
    pub cwnd: f64,
    pub w_max: f64,
    epoch_start: f64,
    k: f64,
    slow_start: bool,
    last_reduction: f64,
    min_cwnd: f64,
    /// Dropped bytes not yet counted as a loss event.
    lost_bytes: u64,
}

impl Cubic {
    fn fresh(p: &CcaParams, packet_bytes: f64) -> Self {
        Self {
            packet_bits: packet_bytes * 8.0,
            cwnd: p.cubic_init_cwnd,
            w_max: p.cubic_init_cwnd,
            epoch_start: 0.0,
            k: 0.0,
            slow_start: true,
            last_reduction: f64::NEG_INFINITY,
            min_cwnd: 2.0,
            lost_bytes: 0,
        }
    }

    fn continuing(p: &CcaParams, packet_bytes: f64, rate_mbps: f64, rtt_s: f64, now: f64) -> Self {
        let mut c = Self::fresh(p, packet_bytes);
        c.cwnd = (rate_mbps * 1e6 * rtt_s / c.packet_bits).max(c.min_cwnd);
        c.w_max = c.cwnd;
        c.epoch_start = now;
        c.slow_start = false;
        c
    }

    pub fn rate_mbps(&self, rtt_s: f64) -> f64 {
        self.cwnd * self.packet_bits / rtt_s * 1e-6
    }

    /// Multiplicative decrease; the cubic epoch restarts from here.
    pub fn on_loss(&mut self, now: f64, p: &CcaParams) {
        self.w_max = self.cwnd;
        self.cwnd = (self.cwnd * p.cubic_beta).max(self.min_cwnd);
        self.k = (self.w_max * (1.0 - p.cubic_beta) / p.cubic_c).cbrt();
        self.epoch_start = now;
        self.slow_start = false;
        self.last_reduction = now;
    }

    fn on_step(&mut self, fb: &Feedback, p: &CcaParams) {
        // A loss event needs a whole packet's worth of dropped bytes, and
        // the window is cut at most once per round trip.
        self.lost_bytes += fb.dropped_bytes;
        let packet_bytes = (self.packet_bits / 8.0) as u64;
        if self.lost_bytes >= packet_bytes && fb.now - self.last_reduction >= fb.rtt_s {
            self.lost_bytes = 0;
            self.on_loss(fb.now, p);
            return;
        }
        if self.slow_start {
            self.cwnd += self.cwnd * fb.dt / fb.rtt_s;
            return;
        }
        let t = fb.now - self.epoch_start;
        let cubic = p.cubic_c * (t - self.k).powi(3) + self.w_max;
        let b = p.cubic_beta;
        let reno = self.w_max * b + 3.0 * (1.0 - b) / (1.0 + b) * t / fb.rtt_s;
        self.cwnd = cubic.max(reno).max(self.min_cwnd);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BbrMode {
    Startup,
    Drain,
    ProbeBw,
}

/// Model-based controller pacing at a windowed-max bandwidth estimate and
/// capping in-flight data at a multiple of the estimated BDP. Loss is not
/// a signal.
#[derive(Clone, Debug)]
pub struct Bbr {
    pub mode: BbrMode,
    bw_samples: VecDeque<(f64, f64)>,
    rtt_samples: VecDeque<(f64, f64)>,
    cycle_index: usize,
    cycle_start: f64,
    full_bw: f64,
    full_bw_rounds: u32,
    round_start: f64,
    drain_rounds: u32,
    fallback_bw: f64,
    packet_bits: f64,
}

impl Bbr {
    fn fresh(p: &CcaParams, packet_bytes: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            packet_bits: packet_bytes * 8.0,
            mode: BbrMode::Startup,
            bw_samples: VecDeque::new(),
            rtt_samples: VecDeque::new(),
            cycle_index: rng.random_range(0..p.bbr_pacing_gains.len()),
            cycle_start: 0.0,
            full_bw: 0.0,
            full_bw_rounds: 0,
            round_start: 0.0,
            drain_rounds: 0,
            fallback_bw: p.initial_rate_mbps,
        }
    }

    fn continuing(p: &CcaParams, packet_bytes: f64, rate_mbps: f64, rtt_s: f64, now: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut b = Self::fresh(p, packet_bytes, rng);
        b.mode = BbrMode::ProbeBw;
        // start in the cruise part of the cycle so the handover itself does not probe
        b.cycle_index = 2.min(p.bbr_pacing_gains.len() - 1);
        b.cycle_start = now;
        b.bw_samples.push_back((now, rate_mbps));
        b.rtt_samples.push_back((now, rtt_s));
        b.fallback_bw = rate_mbps;
        b
    }

    pub fn bandwidth(&self) -> f64 {
        if self.bw_samples.is_empty() {
            return self.fallback_bw;
        }
        self.bw_samples.iter().map(|s| s.1).fold(0.0, f64::max)
    }

    /// Windowed-min RTT; infinite before the first sample.
    pub fn min_rtt(&self) -> f64 {
        self.rtt_samples.iter().map(|s| s.1).fold(f64::INFINITY, f64::min)
    }

    pub fn pacing_gain(&self, p: &CcaParams) -> f64 {
        match self.mode {
            BbrMode::Startup => p.bbr_startup_gain,
            BbrMode::Drain => 1.0 / p.bbr_startup_gain,
            BbrMode::ProbeBw => p.bbr_pacing_gains[self.cycle_index],
        }
    }

    fn cwnd_gain(&self, p: &CcaParams) -> f64 {
        match self.mode {
            BbrMode::Startup => p.bbr_startup_gain.max(p.bbr_cwnd_gain),
            _ => p.bbr_cwnd_gain,
        }
    }

    pub fn rate_mbps(&self, rtt_s: f64, p: &CcaParams) -> f64 {
        let bw = self.bandwidth();
        let pacing = self.pacing_gain(p) * bw;
        let min_rtt = self.min_rtt();
        if !min_rtt.is_finite() {
            return pacing;
        }
        let floor = p.bbr_min_cwnd_packets * self.packet_bits * 1e-6;
        let cwnd = (self.cwnd_gain(p) * bw * min_rtt).max(floor);
        pacing.min(cwnd / rtt_s)
    }

    fn on_step(&mut self, fb: &Feedback, p: &CcaParams) {
        let now = fb.now;
        self.bw_samples.push_back((now, fb.delivered_mbps()));
        while self.bw_samples.front().is_some_and(|s| now - s.0 >= p.bbr_bw_window_s) {
            self.bw_samples.pop_front();
        }
        self.rtt_samples.push_back((now, fb.rtt_s));
        while self.rtt_samples.front().is_some_and(|s| now - s.0 >= p.bbr_rtt_window_s) {
            self.rtt_samples.pop_front();
        }
        let min_rtt = self.min_rtt();
        let round_over = now - self.round_start >= min_rtt;
        if round_over {
            self.round_start = now;
        }
        match self.mode {
            BbrMode::Startup if round_over => {
                let bw = self.bandwidth();
                if bw >= self.full_bw * 1.25 {
                    self.full_bw = bw;
                    self.full_bw_rounds = 0;
                } else {
                    self.full_bw_rounds += 1;
                }
                if self.full_bw_rounds >= 3 {
                    self.mode = BbrMode::Drain;
                }
            }
            BbrMode::Drain if round_over => {
                self.drain_rounds += 1;
                if fb.rtt_s <= 1.25 * min_rtt || self.drain_rounds >= 3 {
                    self.mode = BbrMode::ProbeBw;
                    self.cycle_start = now;
                }
            }
            BbrMode::ProbeBw if now - self.cycle_start >= min_rtt => {
                self.cycle_index = (self.cycle_index + 1) % p.bbr_pacing_gains.len();
                self.cycle_start = now;
            }
            _ => {}
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PccMode {
    /// Doubling the rate every monitor interval while utility improves.
    Starting,
    /// Paired experiments at r(1+ε) and r(1−ε).
    Probing,
}

#[derive(Clone, Copy, Debug, Default)]
struct Monitor {
    steps: u32,
    sent: u64,
    delivered: u64,
    dropped: u64,
    seconds: f64,
}

impl Monitor {
    fn add(&mut self, fb: &Feedback) {
        self.steps += 1;
        self.sent += fb.sent_bytes;
        self.delivered += fb.delivered_bytes;
        self.dropped += fb.dropped_bytes;
        self.seconds += fb.dt;
    }
}

/// `throughput·(1 − loss) − λ·loss·rate` over one monitor interval.
pub fn pcc_utility(throughput_mbps: f64, loss: f64, rate_mbps: f64, lambda: f64) -> f64 {
    throughput_mbps * (1.0 - loss) - lambda * loss * rate_mbps
}

/// Utility-gradient controller running paired rate micro-experiments.
#[derive(Clone, Debug)]
pub struct Pcc {
    pub mode: PccMode,
    pub rate: f64,
    monitor: Monitor,
    prev_utility: f64,
    /// Signs (+1/−1) of the trials in the current experiment, in order.
    trials: [f64; 2],
    trial: usize,
    utilities: [f64; 2],
    amplifier: u32,
    last_direction: f64,
}

impl Pcc {
    fn fresh(p: &CcaParams) -> Self {
        Self {
            mode: PccMode::Starting,
            rate: p.initial_rate_mbps,
            monitor: Monitor::default(),
            prev_utility: f64::NEG_INFINITY,
            trials: [1.0, -1.0],
            trial: 0,
            utilities: [0.0; 2],
            amplifier: 1,
            last_direction: 0.0,
        }
    }

    fn continuing(rate: f64, p: &CcaParams) -> Self {
        let mut c = Self::fresh(p);
        c.mode = PccMode::Probing;
        c.rate = rate.max(MIN_PCC_RATE);
        c
    }

    pub fn rate_mbps(&self, p: &CcaParams) -> f64 {
        match self.mode {
            PccMode::Starting => self.rate,
            PccMode::Probing => self.rate * (1.0 + self.trials[self.trial] * p.pcc_epsilon),
        }
    }

    fn on_step(&mut self, fb: &Feedback, p: &CcaParams, rng: &mut ChaCha8Rng) {
        self.monitor.add(fb);
        if self.monitor.steps < p.pcc_mi_steps {
            return;
        }
        let m = std::mem::take(&mut self.monitor);
        let rate = m.sent as f64 * 8e-6 / m.seconds;
        let thr = m.delivered as f64 * 8e-6 / m.seconds;
        let loss = if m.sent > 0 { m.dropped as f64 / m.sent as f64 } else { 0.0 };
        let u = pcc_utility(thr, loss, rate, p.pcc_lambda);
        match self.mode {
            PccMode::Starting => {
                if u > self.prev_utility {
                    self.prev_utility = u;
                    self.rate *= 2.0;
                } else {
                    self.rate = (self.rate / 2.0).max(MIN_PCC_RATE);
                    self.begin_experiment(rng);
                    self.mode = PccMode::Probing;
                }
            }
            PccMode::Probing => {
                self.utilities[self.trial] = u;
                self.trial += 1;
                if self.trial == 2 {
                    let up = if self.trials[0] > 0.0 { self.utilities[0] } else { self.utilities[1] };
                    let down = if self.trials[0] > 0.0 { self.utilities[1] } else { self.utilities[0] };
                    if up != down {
                        let dir = if up > down { 1.0 } else { -1.0 };
                        self.amplifier =
                            if dir == self.last_direction { (self.amplifier + 1).min(p.pcc_max_amplifier) } else { 1 };
                        self.last_direction = dir;
                        let change = p.pcc_step * self.amplifier as f64;
                        self.rate = (self.rate * (1.0 + dir * change)).max(MIN_PCC_RATE);
                    }
                    self.begin_experiment(rng);
                }
            }
        }
    }

    fn begin_experiment(&mut self, rng: &mut ChaCha8Rng) {
        self.trial = 0;
        self.trials = if rng.random_bool(0.5) { [1.0, -1.0] } else { [-1.0, 1.0] };
    }
}

const MIN_PCC_RATE: f64 = 0.1;
