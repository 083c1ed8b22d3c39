//! Evaluation scenarios, the look-ahead oracle and closed-loop switching.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Decision, TcpLlm, Window};
use crate::simnet::{CcaId, FlowConfig, LinkConfig, ScenarioTrace, SimConfig, Simulator};
use crate::telemetry::{
    collect_experience, compute_reward, ExperiencePool, detect_incompatibility, for_each_window, jains_index, starved_flows, stats, DetectorConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Cubic and BBR from the start.
    CubicBbr,
    /// PCC and BBR from the start.
    PccBbr,
    /// BBR alone, joined by PCC at 10 s.
    BbrPcc,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::CubicBbr, Scenario::PccBbr, Scenario::BbrPcc];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::CubicBbr => "cubic-bbr",
            Scenario::PccBbr => "pcc-bbr",
            Scenario::BbrPcc => "bbr-pcc",
        }
    }

    pub fn flows(self) -> Vec<FlowConfig> {
        match self {
            Scenario::CubicBbr => vec![FlowConfig::new(0, CcaId::Cubic), FlowConfig::new(1, CcaId::Bbr)],
            Scenario::PccBbr => vec![FlowConfig::new(0, CcaId::Pcc), FlowConfig::new(1, CcaId::Bbr)],
            Scenario::BbrPcc => vec![FlowConfig::new(0, CcaId::Bbr), FlowConfig::new(1, CcaId::Pcc).starting_at(10.0)],
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Lookup { kind: "scenario", key: s.to_string() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Look-ahead per candidate, in seconds.
    pub horizon_s: f64,
    /// Relative margin by which a candidate must beat the current CCA.
    pub hysteresis: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { horizon_s: 10.0, hysteresis: 0.1 }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon_s > 0.0) || !(0.0..1.0).contains(&self.hysteresis) {
            return Err(Error::config("oracle horizon must be positive and hysteresis in [0, 1)"));
        }
        Ok(())
    }
}

/// Cumulative reward of `flow_id` over the horizon for each candidate CCA,
/// with every other flow left as it is. Forks run past the episode end
/// when the horizon needs it, so late samples are judged on a full
/// horizon too. `None` when no sample would be recorded.
pub fn oracle_scores(sim: &Simulator, flow_id: usize, cfg: &OracleConfig) -> Result<Option<[f64; 3]>> {
    let current = sim.current_cca(flow_id)?;
    let done = sim.samples(flow_id)?.len();
    let until = sim.now() + cfg.horizon_s;
    let mut scores = [0.0; 3];
    let mut any = false;
    for cca in CcaId::ALL {
        let mut fork = sim.clone();
        fork.extend_duration(until);
        if cca != current {
            fork.switch_cca(flow_id, cca)?;
        }
        fork.run_until(until);
        let new = &fork.samples(flow_id)?[done..];
        any |= !new.is_empty();
        scores[cca.index()] = new.iter().map(compute_reward).sum();
    }
    Ok(any.then_some(scores))
}

/// Keeps the current CCA when its score is within the hysteresis margin of
/// the best; otherwise the lowest-index candidate within that margin.
pub fn oracle_choice(sim: &Simulator, flow_id: usize, cfg: &OracleConfig) -> Result<CcaId> {
    let current = sim.current_cca(flow_id)?;
    let Some(scores) = oracle_scores(sim, flow_id, cfg)? else { return Ok(current) };
    Ok(pick(&scores, current, cfg.hysteresis))
}

fn pick(scores: &[f64; 3], current: CcaId, hysteresis: f64) -> CcaId {
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let floor = top - hysteresis * top.abs();
    if scores[current.index()] >= floor {
        return current;
    }
    let first = scores.iter().position(|&s| s >= floor).expect("the best score clears its own floor");
    CcaId::from_index(first).expect("index below 3")
}

/// Chooses a CCA for one flow at a decision point.
pub trait Switcher {
    fn choose(&mut self, sim: &Simulator, flow_id: usize) -> Result<Decision>;
}

/// Never switches.
pub struct Static;

impl Switcher for Static {
    fn choose(&mut self, sim: &Simulator, flow_id: usize) -> Result<Decision> {
        let chosen = sim.current_cca(flow_id)?;
        Ok(decision(sim.now(), flow_id, chosen, [0.0; 3], Instant::now()))
    }
}

pub struct Oracle(pub OracleConfig);

impl Switcher for Oracle {
    fn choose(&mut self, sim: &Simulator, flow_id: usize) -> Result<Decision> {
        let start = Instant::now();
        let current = sim.current_cca(flow_id)?;
        let scores = oracle_scores(sim, flow_id, &self.0)?;
        let chosen = scores.map_or(current, |s| pick(&s, current, self.0.hysteresis));
        let logits = scores.map_or([0.0; 3], |s| s.map(|x| x as f32));
        Ok(decision(sim.now(), flow_id, chosen, logits, start))
    }
}

/// The trained model, deciding from the flow's last `K` samples.
pub struct PolicySwitcher<'a>(pub &'a TcpLlm);

impl Switcher for PolicySwitcher<'_> {
    fn choose(&mut self, sim: &Simulator, flow_id: usize) -> Result<Decision> {
        let cal = self.0.calibration.ok_or_else(|| Error::config("model has no input calibration"))?;
        let window = Window::from_samples(sim.samples(flow_id)?, self.0.config.context_steps, &cal);
        self.0.decide(flow_id, sim.now(), &window)
    }
}

fn decision(time_s: f64, flow_id: usize, chosen: CcaId, logits: [f32; 3], start: Instant) -> Decision {
    Decision { time_s, flow_id, chosen, logits, inference_steps: 1, latency: start.elapsed() }
}

/// Runs `sim` to the end, asking `switcher` for every active flow that has
/// at least one sample every `interval_s` seconds and applying changes.
pub fn run_closed_loop(mut sim: Simulator, interval_s: f64, switcher: &mut dyn Switcher) -> Result<(ScenarioTrace, Vec<Decision>)> {
    if !(interval_s > 0.0) {
        return Err(Error::config("switch interval must be positive"));
    }
    let mut decisions = Vec::new();
    let mut k = 1u64;
    loop {
        let t = k as f64 * interval_s;
        if t >= sim.config().duration_s - 1e-9 {
            break;
        }
        sim.run_until(t);
        let mut changes = Vec::new();
        for f in sim.flow_ids() {
            if !sim.is_active(f)? || sim.samples(f)?.is_empty() {
                continue;
            }
            let d = switcher.choose(&sim, f)?;
            if d.chosen != sim.current_cca(f)? {
                changes.push((f, d.chosen));
            }
            decisions.push(d);
        }
        for (f, c) in changes {
            sim.switch_cca(f, c)?;
        }
        k += 1;
    }
    Ok((sim.finish(), decisions))
}

/// Per-sample oracle recommendations for every flow, optionally switching
/// to them every `switch_interval_s`.
pub fn label_episode(
    mut sim: Simulator,
    oracle: &OracleConfig,
    switch_interval_s: Option<f64>,
) -> Result<(ScenarioTrace, BTreeMap<usize, Vec<CcaId>>)> {
    let dt = sim.config().sample_interval_s;
    let every = match switch_interval_s {
        Some(s) => {
            let n = (s / dt).round();
            if !(n >= 1.0) || (n * dt - s).abs() > 1e-9 {
                return Err(Error::config("switch interval must be a whole number of sampling intervals"));
            }
            Some(n as u64)
        }
        None => None,
    };
    let mut labels: BTreeMap<usize, Vec<CcaId>> = sim.flow_ids().into_iter().map(|f| (f, Vec::new())).collect();
    let mut k = 1u64;
    while !sim.is_finished() {
        sim.run_until(k as f64 * dt);
        let mut changes = Vec::new();
        for f in sim.flow_ids() {
            let have = sim.samples(f)?.len();
            let l = labels.get_mut(&f).expect("flow listed");
            if have > l.len() {
                let choice = oracle_choice(&sim, f, oracle)?;
                l.push(choice);
                if every.is_some_and(|e| k.is_multiple_of(e)) && choice != sim.current_cca(f)? {
                    changes.push((f, choice));
                }
            }
        }
        for (f, c) in changes {
            sim.switch_cca(f, c)?;
        }
        k += 1;
    }
    Ok((sim.finish(), labels))
}

/// Fairness summary of a trace over the part where every flow is settled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettledStats {
    /// Samples strictly after this time are included.
    pub from_s: f64,
    pub jain: f64,
    pub medians: BTreeMap<usize, f64>,
    pub means: BTreeMap<usize, f64>,
}

impl SettledStats {
    /// Largest over smallest per-flow median, minus one.
    pub fn median_spread(&self) -> f64 {
        let max = self.medians.values().copied().fold(f64::MIN, f64::max);
        let min = self.medians.values().copied().fold(f64::MAX, f64::min);
        if min > 0.0 { max / min - 1.0 } else { f64::INFINITY }
    }
}

/// Stats over samples after `from_s`.
pub fn settled_stats(trace: &ScenarioTrace, from_s: f64) -> Result<SettledStats> {
    let mut medians = BTreeMap::new();
    let mut means = BTreeMap::new();
    for f in &trace.flows {
        let thr: Vec<f64> = f.samples.iter().filter(|s| s.time_s > from_s).map(|s| s.throughput_mbps).collect();
        if let (Some(m), Some(a)) = (stats::median(&thr), stats::mean(&thr)) {
            medians.insert(f.flow_id, m);
            means.insert(f.flow_id, a);
        }
    }
    let jain = jains_index(&means.values().copied().collect::<Vec<_>>())?;
    Ok(SettledStats { from_s, jain, medians, means })
}

/// Time after which the trace is settled: the later of the last flow start
/// and the last CCA change, plus `settle_s`.
pub fn settle_time(trace: &ScenarioTrace, settle_s: f64) -> f64 {
    let start = trace.flows.iter().map(|f| f.start_time_s).fold(0.0, f64::max);
    let switched = trace
        .switch_events
        .iter()
        .filter(|e| e.from_cca != e.to_cca)
        .map(|e| e.time_s)
        .fold(0.0, f64::max);
    start.max(switched) + settle_s
}

/// Everything reported about one run of one scenario arm.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: String,
    pub scenario: Scenario,
    pub settled: SettledStats,
    /// `(time_s, Jain of window-mean throughputs)` for each full window.
    pub jain_series: Vec<(f64, f64)>,
    pub starved: BTreeSet<usize>,
    pub incompatible: BTreeSet<(CcaId, CcaId)>,
    pub medians: BTreeMap<usize, f64>,
    pub mean_loss: BTreeMap<usize, f64>,
    pub mean_rtt_ms: BTreeMap<usize, f64>,
    pub decisions: usize,
}

pub fn arm_report(
    arm: &str,
    scenario: Scenario,
    trace: &ScenarioTrace,
    decisions: usize,
    detectors: &DetectorConfig,
    settle_s: f64,
) -> Result<ArmReport> {
    let mut jain_series = Vec::new();
    for_each_window(trace, detectors.window, |k, windows| {
        if windows.len() >= 2 {
            let means: Vec<f64> = windows.iter().map(|w| w.mean_throughput()).collect();
            if let Ok(j) = jains_index(&means) {
                jain_series.push((k as f64 * trace.sample_interval_s, j));
            }
        }
    });
    let mut from = settle_time(trace, settle_s);
    if from >= trace.duration_s - detectors.window as f64 * trace.sample_interval_s {
        from = trace.flows.iter().map(|f| f.start_time_s).fold(0.0, f64::max);
    }
    let by_flow = |f: fn(&crate::simnet::MetricSample) -> f64| -> BTreeMap<usize, f64> {
        trace
            .flows
            .iter()
            .filter_map(|fl| {
                let v: Vec<f64> = fl.samples.iter().map(f).collect();
                stats::mean(&v).map(|m| (fl.flow_id, m))
            })
            .collect()
    };
    let medians = trace
        .flows
        .iter()
        .filter_map(|fl| {
            let v: Vec<f64> = fl.samples.iter().map(|s| s.throughput_mbps).collect();
            stats::median(&v).map(|m| (fl.flow_id, m))
        })
        .collect();
    Ok(ArmReport {
        arm: arm.to_string(),
        scenario,
        settled: settled_stats(trace, from)?,
        jain_series,
        starved: starved_flows(trace, detectors),
        incompatible: detect_incompatibility(trace, detectors),
        medians,
        mean_loss: by_flow(|s| s.loss_rate),
        mean_rtt_ms: by_flow(|s| s.rtt_ms),
        decisions,
    })
}

/// Episodes of an oracle-labeled experience pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    /// One round of episodes per seed.
    pub seeds: Vec<u64>,
    /// Every ordered pair of CCAs held fixed for the whole episode.
    pub static_pairs: bool,
    /// Every ordered pair as a starting point, with the oracle switching
    /// at `switch_interval_s`.
    pub oracle_pairs: bool,
    /// Every scenario with the oracle switching at `switch_interval_s`.
    pub oracle_scenarios: bool,
    pub switch_interval_s: f64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2],
            static_pairs: false,
            oracle_pairs: true,
            oracle_scenarios: true,
            switch_interval_s: 5.0,
        }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.switch_interval_s > 0.0) {
            return Err(Error::config("pool switch interval must be positive"));
        }
        Ok(())
    }

    pub fn episodes(&self) -> usize {
        let pairs = CcaId::ALL.len() * CcaId::ALL.len();
        let per = usize::from(self.static_pairs) * pairs
            + usize::from(self.oracle_pairs) * pairs
            + usize::from(self.oracle_scenarios) * Scenario::ALL.len();
        per * self.seeds.len()
    }
}

/// Runs every configured episode and labels each sample of each flow with
/// the oracle's choice. Sources are `static` and `oracle`; episode numbers
/// count up from zero in run order.
pub fn oracle_pool(link: &LinkConfig, sim_cfg: &SimConfig, cfg: &PoolConfig, oracle: &OracleConfig) -> Result<ExperiencePool> {
    oracle.validate()?;
    cfg.validate()?;
    if cfg.episodes() == 0 {
        return Err(Error::config("pool configuration yields no episodes"));
    }
    let mut pool = ExperiencePool::new();
    let mut episode = 0u64;
    for &seed in &cfg.seeds {
        let mut runs: Vec<(&str, Vec<FlowConfig>, Option<f64>)> = Vec::new();
        for (on, source, interval) in
            [(cfg.static_pairs, "static", None), (cfg.oracle_pairs, "oracle", Some(cfg.switch_interval_s))]
        {
            if !on {
                continue;
            }
            for a in CcaId::ALL {
                for b in CcaId::ALL {
                    runs.push((source, vec![FlowConfig::new(0, a), FlowConfig::new(1, b)], interval));
                }
            }
        }
        if cfg.oracle_scenarios {
            for s in Scenario::ALL {
                runs.push(("oracle", s.flows(), Some(cfg.switch_interval_s)));
            }
        }
        for (source, flows, interval) in runs {
            let sim = Simulator::new(link.clone(), flows, sim_cfg.clone(), seed)?;
            let (trace, labels) = label_episode(sim, oracle, interval)?;
            pool.extend(collect_experience(&trace, Some(&labels), source, episode)?)?;
            episode += 1;
        }
    }
    Ok(pool)
}

/// Simulator for a scenario with the given episode settings.
pub fn scenario_sim(scenario: Scenario, link: &LinkConfig, cfg: &SimConfig, seed: u64) -> Result<Simulator> {
    Simulator::new(link.clone(), scenario.flows(), cfg.clone(), seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hysteresis_prefers_current() {
        assert_eq!(pick(&[100.0, 95.0, 0.0], CcaId::Bbr, 0.1), CcaId::Bbr);
        assert_eq!(pick(&[100.0, 85.0, 0.0], CcaId::Bbr, 0.1), CcaId::Cubic);
        assert_eq!(pick(&[95.0, 10.0, 100.0], CcaId::Bbr, 0.1), CcaId::Cubic);
        assert_eq!(pick(&[85.0, 10.0, 100.0], CcaId::Bbr, 0.1), CcaId::Pcc);
        assert_eq!(pick(&[5.0, 5.0, 5.0], CcaId::Pcc, 0.0), CcaId::Pcc);
        assert_eq!(pick(&[7.0, 1.0, 7.0], CcaId::Bbr, 0.0), CcaId::Cubic);
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
        assert!("cubic-pcc".parse::<Scenario>().is_err());
    }
}
