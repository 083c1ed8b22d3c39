use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{compute_returns, reward};
use crate::error::{Error, Result};
use crate::simnet::{CcaId, ScenarioTrace};

/// Returns, states and actions of one flow over one episode.
///
/// States are `[throughput_mbps, loss_rate, rtt_ms, sending_rate_mbps]`.
/// Actions are the CCA in force at each sample. `labels`, when present,
/// holds the action a reference policy recommended at each sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub source: String,
    #[serde(default)]
    pub episode: u64,
    #[serde(default)]
    pub flow_id: usize,
    pub returns: Vec<f64>,
    pub states: Vec<[f64; 4]>,
    #[serde(with = "cca_indices")]
    pub actions: Vec<CcaId>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_cca_indices")]
    pub labels: Option<Vec<CcaId>>,
}

impl Trajectory {
    /// Builds a trajectory, computing rewards and returns from the states.
    pub fn from_states(
        source: impl Into<String>,
        episode: u64,
        flow_id: usize,
        states: Vec<[f64; 4]>,
        actions: Vec<CcaId>,
        labels: Option<Vec<CcaId>>,
    ) -> Result<Self> {
        let t = Self { source: source.into(), episode, flow_id, returns: Vec::new(), states, actions, labels };
        let returns = compute_returns(&t.rewards());
        let t = Self { returns, ..t };
        t.validate()?;
        Ok(t)
    }

    pub fn horizon(&self) -> usize {
        self.states.len()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.states.iter().map(|s| reward(s[0], s[2], s[1])).collect()
    }

    /// Per-step training targets: labels when present, else the actions taken.
    pub fn targets(&self) -> &[CcaId] {
        self.labels.as_deref().unwrap_or(&self.actions)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.states.len();
        if self.returns.len() != t || self.actions.len() != t || self.labels.as_ref().is_some_and(|l| l.len() != t) {
            return Err(Error::contract(format!(
                "trajectory lengths differ: {} states, {} returns, {} actions",
                t,
                self.returns.len(),
                self.actions.len()
            )));
        }
        if self.states.iter().flatten().chain(&self.returns).any(|v| !v.is_finite()) {
            return Err(Error::contract("trajectory holds non-finite values"));
        }
        Ok(())
    }
}

/// One trajectory per flow of `trace`. `labels` maps flow ids to
/// per-sample recommended CCAs.
pub fn collect_experience(
    trace: &ScenarioTrace,
    labels: Option<&BTreeMap<usize, Vec<CcaId>>>,
    source: &str,
    episode: u64,
) -> Result<Vec<Trajectory>> {
    trace
        .flows
        .iter()
        .map(|f| {
            let states = f.samples.iter().map(|s| s.metrics()).collect();
            let actions = f.samples.iter().map(|s| s.cca).collect();
            let flow_labels = match labels {
                Some(map) => Some(
                    map.get(&f.flow_id)
                        .ok_or_else(|| Error::contract(format!("no labels for flow {}", f.flow_id)))?
                        .clone(),
                ),
                None => None,
            };
            Trajectory::from_states(source, episode, f.flow_id, states, actions, flow_labels)
        })
        .collect()
}

/// Append-only trajectory store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperiencePool {
    trajectories: Vec<Trajectory>,
}

impl ExperiencePool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: Trajectory) -> Result<()> {
        t.validate()?;
        self.trajectories.push(t);
        Ok(())
    }

    pub fn extend(&mut self, ts: impl IntoIterator<Item = Trajectory>) -> Result<()> {
        ts.into_iter().try_for_each(|t| self.push(t))
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn counts_by_source(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for t in &self.trajectories {
            *out.entry(t.source.clone()).or_insert(0) += 1;
        }
        out
    }

    pub fn write_jsonl(&self, w: &mut impl Write) -> std::io::Result<()> {
        for t in &self.trajectories {
            serde_json::to_writer(&mut *w, t)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self> {
        let mut pool = Self::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::Parse { location: format!("line {}", i + 1), message: e.to_string() })?;
            if line.trim().is_empty() {
                continue;
            }
            let t: Trajectory = serde_json::from_str(&line)
                .map_err(|e| Error::Parse { location: format!("line {}", i + 1), message: e.to_string() })?;
            pool.push(t)
                .map_err(|e| Error::Parse { location: format!("line {}", i + 1), message: e.to_string() })?;
        }
        Ok(pool)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_jsonl(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(BufReader::new(f))
    }
}

mod cca_indices {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    use crate::simnet::CcaId;

    pub fn serialize<S: Serializer>(v: &[CcaId], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|c| c.index() as u8))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<CcaId>, D::Error> {
        Vec::<u8>::deserialize(d)?
            .into_iter()
            .map(|i| CcaId::from_index(i as usize).ok_or_else(|| D::Error::custom(format!("action {i} is not 0, 1 or 2"))))
            .collect()
    }
}

mod opt_cca_indices {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::simnet::CcaId;

    pub fn serialize<S: Serializer>(v: &Option<Vec<CcaId>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(v) => super::cca_indices::serialize(v, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<CcaId>>, D::Error> {
        #[derive(Deserialize)]
        struct Wrap(#[serde(with = "super::cca_indices")] Vec<CcaId>);
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}
