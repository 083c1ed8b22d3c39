//! The selection policy: integrated encoder, frozen transformer with
//! low-rank adapters, and a linear CCA head.
//!
//! A trajectory window of `K` timesteps is laid out as `K` groups of
//! `[R_t, s_t (one token per state token), a_t]`. The head reads the last
//! state token of each timestep, so the action in that timestep is never
//! visible to its own prediction. State-only models drop the return and
//! action tokens.

mod backbone;
mod encoder;
mod head;

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simnet::{CcaId, MetricSample};
use crate::telemetry::reward;
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

pub use backbone::{
    base_hash, effective_weight, lora_param_count, Backbone, BackboneConfig, LoraAdapter, ATTENTION_PROJECTIONS,
    PROJECTIONS,
};
pub use encoder::{Encoder, EncoderConfig, EncoderVariant, Normalizer, METRICS};
pub use head::{select_cca, Decision, Head, NUM_CCAS};

pub(crate) fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng) as f32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Return-conditioned action prediction over `[R, s, a]` windows.
    Rl,
    /// CCA label from a window of states.
    SlClassify,
    /// Next-step normalized throughput from a window of states.
    SlRegress,
}

impl Task {
    pub fn uses_trajectory_tokens(self) -> bool {
        self == Task::Rl
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub task: Task,
    pub encoder: EncoderConfig,
    pub backbone: BackboneConfig,
    pub lora_rank: usize,
    /// Projections adapted in every layer.
    pub lora_targets: Vec<String>,
    /// Timesteps per window (`K`).
    pub context_steps: usize,
    /// Seed for the base, adapter, encoder and head initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            task: Task::Rl,
            encoder: EncoderConfig::default(),
            backbone: BackboneConfig::default(),
            lora_rank: 4,
            lora_targets: ATTENTION_PROJECTIONS.iter().map(|s| s.to_string()).collect(),
            context_steps: 10,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.backbone.validate()?;
        if self.context_steps == 0 {
            return Err(Error::config("context_steps must be at least 1"));
        }
        let len = self.context_steps * self.tokens_per_step();
        if len > self.backbone.context_len {
            return Err(Error::Config(format!(
                "{} steps × {} tokens = {len} exceeds context_len {}",
                self.context_steps,
                self.tokens_per_step(),
                self.backbone.context_len
            )));
        }
        if self.encoder.variant == EncoderVariant::TemporalCnn && self.context_steps < self.encoder.kernel {
            return Err(Error::config("context_steps shorter than the CNN kernel"));
        }
        if let Some(t) = self.lora_targets.iter().find(|t| !PROJECTIONS.contains(&t.as_str())) {
            return Err(Error::Lookup { kind: "projection", key: t.clone() });
        }
        Ok(())
    }

    pub fn tokens_per_step(&self) -> usize {
        let s = self.encoder.tokens_per_state();
        if self.task.uses_trajectory_tokens() { s + 2 } else { s }
    }

    pub fn window_tokens(&self) -> usize {
        self.context_steps * self.tokens_per_step()
    }

    /// Offset of the readout token within a timestep's slots.
    fn readout_slot(&self) -> usize {
        let s = self.encoder.tokens_per_state();
        if self.task.uses_trajectory_tokens() { s } else { s - 1 }
    }
}

/// Constants fixed from training data and needed again at inference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub normalizer: Normalizer,
    /// Returns are divided by this before embedding.
    pub return_scale: f64,
    /// Unscaled return the policy is conditioned on when acting.
    pub target_return: f64,
}

/// `K` timesteps of one flow, right-aligned: the first `K − valid` steps
/// are padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub valid: usize,
    /// Scaled returns.
    pub returns: Vec<f32>,
    /// Normalized states.
    pub states: Vec<[f32; 4]>,
    pub actions: Vec<Option<CcaId>>,
    /// Per-step class targets; `None` is excluded from the loss.
    pub targets: Vec<Option<CcaId>>,
    /// Regression target for the last step.
    pub value_target: Option<f32>,
}

impl Window {
    pub fn steps(&self) -> usize {
        self.states.len()
    }

    /// Inference context from the last `k` samples of one flow. Action
    /// slots hold the CCA in force; returns count down from the target
    /// by the rewards observed inside the window.
    pub fn from_samples(samples: &[MetricSample], k: usize, cal: &Calibration) -> Self {
        let recent = &samples[samples.len().saturating_sub(k)..];
        let pad = k - recent.len();
        let mut w = Window {
            valid: recent.len(),
            returns: vec![0.0; k],
            states: vec![[0.0; 4]; k],
            actions: vec![None; k],
            targets: vec![None; k],
            value_target: None,
        };
        let mut to_go = cal.target_return;
        for (j, s) in recent.iter().enumerate() {
            w.returns[pad + j] = (to_go / cal.return_scale) as f32;
            w.states[pad + j] = cal.normalizer.scale(&s.metrics()).map(|x| x as f32);
            w.actions[pad + j] = Some(s.cca);
            to_go -= reward(s.throughput_mbps, s.rtt_ms, s.loss_rate);
        }
        w
    }
}

/// Output of a batched forward pass.
pub struct Forward {
    pub hidden: Var,
    /// `[batch·K, 3]`, one row per timestep.
    pub logits: Var,
    /// `[batch, 1]` regression outputs for regression models.
    pub value: Option<Var>,
}

pub struct TcpLlm {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub calibration: Option<Calibration>,
    encoder: Encoder,
    backbone: Backbone,
    head: Head,
    /// `embed.return.{w,b}` and `embed.action.w`, trajectory models only.
    embed: Option<(ParamId, ParamId, ParamId)>,
    base_hash: String,
    forwards: AtomicU64,
}

impl Clone for TcpLlm {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            store: self.store.clone(),
            calibration: self.calibration,
            encoder: self.encoder.clone(),
            backbone: self.backbone.clone(),
            head: self.head.clone(),
            embed: self.embed,
            base_hash: self.base_hash.clone(),
            forwards: AtomicU64::new(self.forwards.load(Ordering::Relaxed)),
        }
    }
}

impl TcpLlm {
    /// Seeded initialization: random base, frozen; adapters with zero `B`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let d = config.backbone.token_dim;
        let encoder = Encoder::new(config.encoder.clone(), d, &mut store, &mut rng)?;
        let embed = if config.task.uses_trajectory_tokens() {
            let rw = store.insert("embed.return.w", normal(&mut rng, &[1, d], 1.0).with_requires_grad(true))?;
            let rb = store.insert("embed.return.b", normal(&mut rng, &[d], 1.0).with_requires_grad(true))?;
            let aw = store.insert("embed.action.w", normal(&mut rng, &[NUM_CCAS, d], 1.0).with_requires_grad(true))?;
            Some((rw, rb, aw))
        } else {
            None
        };
        let mut backbone = Backbone::new(config.backbone.clone(), &mut store, &mut rng)?;
        let base_hash = backbone.freeze_base(&mut store);
        let targets: Vec<&str> = config.lora_targets.iter().map(String::as_str).collect();
        backbone.attach_all(&mut store, &targets, config.lora_rank, &mut rng)?;
        let head = Head::new(d, config.task == Task::SlRegress, &mut store, &mut rng)?;
        Ok(Self {
            config,
            store,
            calibration: None,
            encoder,
            backbone,
            head,
            embed,
            base_hash,
            forwards: AtomicU64::new(0),
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn backbone_mut(&mut self) -> &mut Backbone {
        &mut self.backbone
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    /// Hash recorded when the base was frozen.
    pub fn frozen_hash(&self) -> &str {
        &self.base_hash
    }

    /// Hash of the base weights as they are now.
    pub fn current_base_hash(&self) -> String {
        base_hash(&self.store)
    }

    /// Re-records the frozen hash after base weights were replaced
    /// wholesale, as when loading a checkpoint.
    pub(crate) fn rehash_base(&mut self) -> String {
        let h = base_hash(&self.store);
        self.backbone.set_frozen_hash(h.clone());
        self.base_hash = h.clone();
        h
    }

    pub fn forward_count(&self) -> u64 {
        self.forwards.load(Ordering::Relaxed)
    }

    /// Trainable parameter count split into adapters, encoder, head and
    /// embedders.
    pub fn trainable_breakdown(&self) -> [(&'static str, usize); 4] {
        let mut out = [("lora", 0), ("enc", 0), ("head", 0), ("embed", 0)];
        for (_, name, t) in self.store.iter().filter(|(_, _, t)| t.requires_grad()) {
            let group = name.split('.').next().unwrap_or("");
            if let Some(slot) = out.iter_mut().find(|(g, _)| *g == group) {
                slot.1 += t.len();
            }
        }
        out
    }

    /// Batched forward over windows of `K` steps in `store`'s precision.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, windows: &[Window]) -> Result<Forward> {
        let k = self.config.context_steps;
        let b = windows.len();
        if b == 0 {
            return Err(Error::shape("empty batch"));
        }
        if let Some(w) = windows.iter().find(|w| w.steps() != k || w.valid > k) {
            return Err(Error::Shape(format!("window of {} steps for a model with K = {k}", w.steps())));
        }
        let n = b * k;
        let states = Tensor::new([n, 4], windows.iter().flat_map(|w| w.states.iter().flatten()).map(|&x| T::lit(x as f64)).collect())?;
        let sv = tape.constant(states);
        let s_tokens = self.encoder.encode(tape, store, sv, b, k)?;
        let sp = self.config.encoder.tokens_per_state();
        let per = self.config.tokens_per_step();
        let len = k * per;

        // Concatenated rows are [R; S; A] for trajectory models and just S
        // otherwise; offsets locate each group.
        let (stacked, r_off, s_off, a_off) = match self.embed {
            Some((rw, rb, aw)) => {
                let rets =
                    Tensor::new([n, 1], windows.iter().flat_map(|w| &w.returns).map(|&x| T::lit(x as f64)).collect())?;
                let rv = tape.constant(rets);
                let w = tape.param(store, rw);
                let h = tape.matmul(rv, w)?;
                let bias = tape.param(store, rb);
                let r_tokens = tape.add_row(h, bias)?;
                let mut onehot = vec![T::zero(); n * NUM_CCAS];
                for (i, a) in windows.iter().flat_map(|w| &w.actions).enumerate() {
                    if let Some(a) = a {
                        onehot[i * NUM_CCAS + a.index()] = T::one();
                    }
                }
                let av = tape.constant(Tensor::new([n, NUM_CCAS], onehot)?);
                let w = tape.param(store, aw);
                let a_tokens = tape.matmul(av, w)?;
                let stacked = tape.concat_rows(&[r_tokens, s_tokens, a_tokens])?;
                (stacked, Some(0), n, Some(n + n * sp))
            }
            None => (s_tokens, None, 0, None),
        };

        let mut order = Vec::with_capacity(b * len);
        let mut readout = Vec::with_capacity(n);
        for (wi, w) in windows.iter().enumerate() {
            let pad = k - w.valid;
            for t in 0..k {
                let step = wi * k + t;
                let real = t >= pad;
                let mut slots = Vec::with_capacity(per);
                if let Some(r) = r_off {
                    slots.push(real.then_some(r + step));
                }
                for m in 0..sp {
                    slots.push(real.then_some(s_off + step * sp + m));
                }
                if let Some(a) = a_off {
                    slots.push(w.actions[t].filter(|_| real).map(|_| a + step));
                }
                order.extend(slots);
                readout.push(wi * len + t * per + self.config.readout_slot());
            }
        }
        let tokens = tape.gather_rows(stacked, &order)?;
        let hidden = self.backbone.forward(tape, store, tokens, b, len)?;
        let logits = self.head.logits(tape, store, hidden, &readout)?;
        let value = if self.head.has_regression() {
            let last: Vec<usize> = (0..b).map(|wi| readout[wi * k + k - 1]).collect();
            Some(self.head.regress(tape, store, hidden, &last)?)
        } else {
            None
        };
        Ok(Forward { hidden, logits, value })
    }

    /// One forward pass and one head evaluation on a single window,
    /// deciding from the latest timestep.
    pub fn decide(&self, flow_id: usize, time_s: f64, window: &Window) -> Result<Decision> {
        let start = Instant::now();
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &self.store, std::slice::from_ref(window))?;
        self.forwards.fetch_add(1, Ordering::Relaxed);
        let z = tape.value(out.logits).data();
        let last = &z[z.len() - NUM_CCAS..];
        let chosen = select_cca(last)?;
        Ok(Decision {
            time_s,
            flow_id,
            chosen,
            logits: [last[0], last[1], last[2]],
            inference_steps: 1,
            latency: start.elapsed(),
        })
    }
}
