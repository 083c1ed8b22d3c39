//! Supervised and return-conditioned fine-tuning of the adapters, encoder,
//! embedders and head, plus checkpoints and closed-loop evaluation.

mod checkpoint;
mod tokenize;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{arm_report, run_closed_loop, scenario_sim, ArmReport, PolicySwitcher, Scenario};
use crate::error::{Error, Result};
use crate::model::{select_cca, Calibration, Decision, ModelConfig, Normalizer, Task, TcpLlm, Window, NUM_CCAS};
use crate::simnet::{CcaId, LinkConfig, ScenarioTrace, SimConfig};
use crate::telemetry::{stats, DetectorConfig, ExperiencePool, Trajectory};
use crate::tensor::{clip_global_norm, Adam, AdamConfig, Tape};

pub use checkpoint::{
    decode_weights, encode_weights, load_checkpoint, load_with_config, read_meta, save_checkpoint, sidecar_path,
    CheckpointMeta, FORMAT_VERSION, MAGIC,
};
pub use tokenize::{slot_layout, tokenize, tokenize_strided, window_at, Slot};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Sl,
    Rl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlTarget {
    /// Oracle CCA label of the window's last step.
    Classify,
    /// Normalized throughput of the step after the window.
    Regress,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub sl_target: SlTarget,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub clip_max_norm: f64,
    pub seed: u64,
    /// Fraction of episodes held out for testing.
    pub test_fraction: f64,
    /// Spacing between the end steps of consecutive training windows.
    pub window_stride: usize,
    /// Quantile of pool returns used as the target return when acting.
    pub target_return_quantile: f64,
    /// Write elapsed seconds into the report; zero otherwise, which makes
    /// reports byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Rl,
            sl_target: SlTarget::Classify,
            lr: 1e-3,
            epochs: 80,
            batch_size: 16,
            grad_accum_steps: 1,
            clip_max_norm: 1.0,
            seed: 0,
            test_fraction: 0.2,
            window_stride: 5,
            target_return_quantile: 0.9,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grad_accum_steps == 0 || self.batch_size == 0 || self.epochs == 0 || self.window_stride == 0 {
            return Err(Error::config("epochs, batch_size, grad_accum_steps and window_stride must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.clip_max_norm > 0.0) {
            return Err(Error::config("lr and clip_max_norm must be positive"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) || !(0.0..=1.0).contains(&self.target_return_quantile) {
            return Err(Error::config("test_fraction must lie in [0, 1) and target_return_quantile in [0, 1]"));
        }
        Ok(())
    }

    /// Model task implied by the mode.
    pub fn task(&self) -> Task {
        match (self.mode, self.sl_target) {
            (Mode::Rl, _) => Task::Rl,
            (Mode::Sl, SlTarget::Classify) => Task::SlClassify,
            (Mode::Sl, SlTarget::Regress) => Task::SlRegress,
        }
    }
}

/// One line of the training report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub wall_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub train_windows: usize,
    pub test_windows: usize,
    pub optimizer_steps: u64,
}

impl TrainReport {
    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().expect("at least one epoch")
    }

    pub fn write_jsonl(&self, w: &mut impl Write) -> std::io::Result<()> {
        for r in &self.epochs {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Share of one batch's loss under gradient accumulation.
pub fn accumulation_share(loss: f64, grad_accum_steps: usize) -> f64 {
    loss / grad_accum_steps as f64
}

/// Fraction of unmasked rows whose argmax matches the target; `None` when
/// every row is masked.
pub fn compute_accuracy(logits: &[f32], targets: &[Option<CcaId>]) -> Result<Option<f64>> {
    if logits.len() != targets.len() * NUM_CCAS {
        return Err(Error::Shape(format!("{} logits for {} targets", logits.len(), targets.len())));
    }
    let mut seen = 0usize;
    let mut hit = 0usize;
    for (row, t) in logits.chunks_exact(NUM_CCAS).zip(targets) {
        if let Some(t) = t {
            seen += 1;
            hit += usize::from(select_cca(row)? == *t);
        }
    }
    Ok((seen > 0).then(|| hit as f64 / seen as f64))
}

type EpisodeKey = (String, u64);

fn key(t: &Trajectory) -> EpisodeKey {
    (t.source.clone(), t.episode)
}

/// Seeded episode-level split; returns `(train, test)` episode keys.
pub fn split_episodes(keys: &BTreeSet<EpisodeKey>, test_fraction: f64, seed: u64) -> (BTreeSet<EpisodeKey>, BTreeSet<EpisodeKey>) {
    let mut all: Vec<EpisodeKey> = keys.iter().cloned().collect();
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = all.len();
    let mut n_test = (n as f64 * test_fraction).round() as usize;
    if test_fraction > 0.0 && n >= 2 {
        n_test = n_test.clamp(1, n - 1);
    }
    let test = all[..n_test].iter().cloned().collect();
    let train = all[n_test..].iter().cloned().collect();
    (train, test)
}

/// Scaling constants from training trajectories.
pub fn fit_calibration<'a>(trajs: impl IntoIterator<Item = &'a Trajectory> + Clone, quantile: f64) -> Result<Calibration> {
    let normalizer = Normalizer::fit(trajs.clone().into_iter().flat_map(|t| t.states.iter()))?;
    let returns: Vec<f64> = trajs.into_iter().flat_map(|t| t.returns.iter().copied()).collect();
    let max = returns.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    let target_return = stats::quantile(&returns, quantile).unwrap_or(0.0);
    Ok(Calibration { normalizer, return_scale: if max > 0.0 { max } else { 1.0 }, target_return })
}

/// One supervised example: the states up to and including step `t` of a
/// flow, and what to predict there.
#[derive(Clone, Debug, PartialEq)]
pub struct SlExample {
    pub source: String,
    pub episode: u64,
    /// Raw states, oldest first, at most `K` of them.
    pub states: Vec<[f64; 4]>,
    pub label: Option<CcaId>,
    /// Raw throughput of the next step.
    pub next_throughput: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SlDataset {
    pub examples: Vec<SlExample>,
}

impl SlDataset {
    /// Examples ending at every `stride`-th step of every trajectory,
    /// labeled by the trajectory's targets. Regression examples need a
    /// following step, so the last step of each trajectory is skipped.
    pub fn from_pool(pool: &ExperiencePool, k: usize, target: SlTarget, stride: usize) -> Result<Self> {
        if k == 0 || stride == 0 {
            return Err(Error::config("window length and stride must be positive"));
        }
        let mut examples = Vec::new();
        for traj in pool.trajectories() {
            let targets = traj.targets();
            let last = match target {
                SlTarget::Classify => traj.horizon(),
                SlTarget::Regress => traj.horizon().saturating_sub(1),
            };
            for t in (0..last).rev().step_by(stride).collect::<Vec<_>>().into_iter().rev() {
                examples.push(SlExample {
                    source: traj.source.clone(),
                    episode: traj.episode,
                    states: traj.states[(t + 1).saturating_sub(k)..=t].to_vec(),
                    label: (target == SlTarget::Classify).then(|| targets[t]),
                    next_throughput: (target == SlTarget::Regress).then(|| traj.states[t + 1][0]),
                });
            }
        }
        Ok(Self { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    fn window(&self, ex: &SlExample, k: usize, cal: &Calibration) -> Result<Window> {
        let valid = ex.states.len();
        if valid == 0 || valid > k {
            return Err(Error::Shape(format!("example holds {valid} states for K = {k}")));
        }
        if ex.label.is_none() && ex.next_throughput.is_none() {
            return Err(Error::contract("example has no label"));
        }
        let pad = k - valid;
        let mut states = vec![[0.0f32; 4]; k];
        for (j, s) in ex.states.iter().enumerate() {
            states[pad + j] = cal.normalizer.scale(s).map(|x| x as f32);
        }
        let mut targets = vec![None; k];
        targets[k - 1] = ex.label;
        Ok(Window {
            valid,
            returns: vec![0.0; k],
            states,
            actions: vec![None; k],
            targets,
            value_target: ex.next_throughput.map(|v| (v / cal.normalizer.capacity_mbps) as f32),
        })
    }
}

/// Trained model and its per-epoch history.
pub struct Trained {
    pub model: TcpLlm,
    pub report: TrainReport,
}

fn build_model(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<ModelConfig> {
    cfg.validate()?;
    let mut m = model_cfg.clone();
    m.task = cfg.task();
    m.validate()?;
    Ok(m)
}

/// Return-conditioned behavior cloning over tokenized trajectories.
pub fn train_rl(pool: &ExperiencePool, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Trained> {
    if cfg.mode != Mode::Rl {
        return Err(Error::config("train_rl needs mode = rl"));
    }
    let m = build_model(model_cfg, cfg)?;
    if pool.is_empty() {
        return Err(Error::config("experience pool is empty"));
    }
    let keys = pool.trajectories().iter().map(key).collect();
    let (train_keys, _) = split_episodes(&keys, cfg.test_fraction, cfg.seed);
    let (train, test): (Vec<&Trajectory>, Vec<&Trajectory>) =
        pool.trajectories().iter().partition(|t| train_keys.contains(&key(t)));
    let cal = fit_calibration(train.iter().copied(), cfg.target_return_quantile)?;
    let k = m.context_steps;
    let mut train_w = Vec::new();
    for t in &train {
        train_w.extend(tokenize_strided(t, k, &cal, cfg.window_stride)?);
    }
    let mut test_w = Vec::new();
    for t in &test {
        test_w.extend(tokenize_strided(t, k, &cal, cfg.window_stride)?);
    }
    let mut model = TcpLlm::new(m)?;
    model.calibration = Some(cal);
    let report = fit(&mut model, &train_w, &test_w, cfg)?;
    Ok(Trained { model, report })
}

/// Supervised training on state windows.
pub fn train_sl(dataset: &SlDataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Trained> {
    if cfg.mode != Mode::Sl {
        return Err(Error::config("train_sl needs mode = sl"));
    }
    let m = build_model(model_cfg, cfg)?;
    if dataset.is_empty() {
        return Err(Error::config("dataset is empty"));
    }
    let want_label = cfg.sl_target == SlTarget::Classify;
    if let Some(ex) = dataset.examples.iter().find(|e| e.label.is_some() != want_label || e.next_throughput.is_some() == want_label) {
        return Err(Error::Config(format!(
            "example from {} episode {} does not match the {:?} target",
            ex.source, ex.episode, cfg.sl_target
        )));
    }
    let keys = dataset.examples.iter().map(|e| (e.source.clone(), e.episode)).collect();
    let (train_keys, _) = split_episodes(&keys, cfg.test_fraction, cfg.seed);
    let (train, test): (Vec<&SlExample>, Vec<&SlExample>) =
        dataset.examples.iter().partition(|e| train_keys.contains(&(e.source.clone(), e.episode)));
    let normalizer = Normalizer::fit(train.iter().flat_map(|e| e.states.iter()))?;
    let cal = Calibration { normalizer, return_scale: 1.0, target_return: 0.0 };
    let k = m.context_steps;
    let train_w = train.iter().map(|e| dataset.window(e, k, &cal)).collect::<Result<Vec<_>>>()?;
    let test_w = test.iter().map(|e| dataset.window(e, k, &cal)).collect::<Result<Vec<_>>>()?;
    let mut model = TcpLlm::new(m)?;
    model.calibration = Some(cal);
    let report = fit(&mut model, &train_w, &test_w, cfg)?;
    Ok(Trained { model, report })
}

/// Loss and accuracy of one batch, or `None` when every target is masked.
fn batch_loss(model: &TcpLlm, tape: &mut Tape<f32>, windows: &[Window]) -> Result<Option<(crate::tensor::Var, Option<f64>)>> {
    let out = model.forward(tape, &model.store, windows)?;
    if let Some(value) = out.value {
        let targets = windows
            .iter()
            .map(|w| w.value_target.ok_or_else(|| Error::contract("regression window without a target")))
            .collect::<Result<Vec<f32>>>()?;
        let t = tape.constant(crate::tensor::Tensor::new([windows.len(), 1], targets)?);
        return Ok(Some((tape.mse(value, t)?, None)));
    }
    let targets: Vec<Option<CcaId>> = windows.iter().flat_map(|w| w.targets.iter().copied()).collect();
    let idx: Vec<Option<usize>> = targets.iter().map(|t| t.map(CcaId::index)).collect();
    if idx.iter().all(Option::is_none) {
        return Ok(None);
    }
    let acc = compute_accuracy(tape.value(out.logits).data(), &targets)?;
    Ok(Some((tape.cross_entropy_masked(out.logits, &idx)?, acc)))
}

/// Mean per-batch loss and accuracy without updating anything.
pub fn evaluate(model: &TcpLlm, windows: &[Window], batch_size: usize) -> Result<(Option<f64>, Option<f64>)> {
    let mut losses = Vec::new();
    let mut accs = Vec::new();
    for chunk in windows.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        if let Some((loss, acc)) = batch_loss(model, &mut tape, chunk)? {
            losses.push(tape.value(loss).data()[0] as f64);
            accs.extend(acc);
        }
    }
    Ok((stats::mean(&losses), stats::mean(&accs)))
}

/// Mini-batch Adam over `train`; each batch loss is divided by the
/// accumulation count, clipped by global norm and applied every
/// `grad_accum_steps` batches (and at the end of an epoch).
pub fn fit(model: &mut TcpLlm, train: &[Window], test: &[Window], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("no training windows"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut order: Vec<usize> = (0..train.len()).collect();
    let start = Instant::now();
    let mut records = Vec::with_capacity(cfg.epochs);
    model.store.zero_grad();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        let mut accs = Vec::new();
        let mut pending = 0usize;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (bi, idx) in batches.iter().enumerate() {
            let batch: Vec<Window> = idx.iter().map(|&i| train[i].clone()).collect();
            let mut tape = Tape::new();
            if let Some((loss, acc)) = batch_loss(model, &mut tape, &batch)? {
                losses.push(tape.value(loss).data()[0] as f64);
                accs.extend(acc);
                let share = tape.scale(loss, 1.0 / cfg.grad_accum_steps as f32);
                tape.backward(share, &mut model.store)?;
                pending += 1;
            }
            if pending > 0 && (pending == cfg.grad_accum_steps || bi + 1 == batches.len()) {
                clip_global_norm(&mut model.store, cfg.clip_max_norm as f32);
                adam.step(&mut model.store)?;
                model.store.zero_grad();
                pending = 0;
            }
        }
        let (test_loss, test_acc) = if test.is_empty() { (None, None) } else { evaluate(model, test, cfg.batch_size)? };
        let rec = EpochRecord {
            epoch,
            train_loss: stats::mean(&losses).ok_or_else(|| Error::Degenerate("every training target is masked".into()))?,
            test_loss,
            train_acc: stats::mean(&accs),
            test_acc,
            wall_s: if cfg.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 },
        };
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:?}, test loss {:?} acc {:?}",
            rec.train_loss,
            rec.train_acc,
            rec.test_loss,
            rec.test_acc
        );
        records.push(rec);
    }
    Ok(TrainReport { epochs: records, train_windows: train.len(), test_windows: test.len(), optimizer_steps: adam.steps_taken() })
}

/// Closed-loop run of a trained policy on one scenario.
pub struct PolicyEval {
    pub trace: ScenarioTrace,
    pub decisions: Vec<Decision>,
    pub report: ArmReport,
}

pub struct EvalSettings<'a> {
    pub link: &'a LinkConfig,
    pub sim: &'a SimConfig,
    pub seed: u64,
    pub switch_interval_s: f64,
    pub detectors: &'a DetectorConfig,
    pub settle_s: f64,
}

pub fn evaluate_policy(model: &TcpLlm, scenario: Scenario, s: &EvalSettings<'_>) -> Result<PolicyEval> {
    let sim = scenario_sim(scenario, s.link, s.sim, s.seed)?;
    let (trace, decisions) = run_closed_loop(sim, s.switch_interval_s, &mut PolicySwitcher(model))?;
    let report = arm_report("policy", scenario, &trace, decisions.len(), s.detectors, s.settle_s)?;
    Ok(PolicyEval { trace, decisions, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_counts_unmasked_rows() {
        let z = [9.0, 0.0, 0.0, 0.0, 9.0, 0.0, 0.0, 0.0, 9.0];
        let t = [Some(CcaId::Cubic), Some(CcaId::Bbr), Some(CcaId::Bbr)];
        assert_eq!(compute_accuracy(&z, &t).unwrap(), Some(2.0 / 3.0));
        let t = [Some(CcaId::Cubic), Some(CcaId::Bbr), Some(CcaId::Pcc)];
        assert_eq!(compute_accuracy(&z, &t).unwrap(), Some(1.0));
        assert_eq!(compute_accuracy(&z, &[None, None, None]).unwrap(), None);
        assert!(compute_accuracy(&z[..6], &t).is_err());
    }

    #[test]
    fn accumulation_divides() {
        assert!((accumulation_share(0.9, 3) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let keys: BTreeSet<EpisodeKey> = (0..10).map(|i| ("s".to_string(), i)).collect();
        let (a, b) = split_episodes(&keys, 0.2, 1);
        assert_eq!((a.len(), b.len()), (8, 2));
        assert!(a.is_disjoint(&b));
        assert_eq!(split_episodes(&keys, 0.2, 1), (a, b));
        let one: BTreeSet<EpisodeKey> = [("s".to_string(), 0)].into();
        assert_eq!(split_episodes(&one, 0.2, 1).1.len(), 0);
    }
}
