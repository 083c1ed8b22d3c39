//! Per-metric projection of TCP states into tokens.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::normal;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Metric order on the state axis.
pub const METRICS: [&str; 4] = ["thrup", "loss", "rtt", "send"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderVariant {
    /// One affine map per metric, one token per metric per timestep.
    PerMetricFc,
    /// Causal 1-d convolution over time, one token per timestep.
    TemporalCnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    /// Convolution width in timesteps; only used by the CNN variant.
    pub kernel: usize,
    pub eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { variant: EncoderVariant::PerMetricFc, kernel: 3, eps: 1e-5 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || !(self.eps > 0.0) {
            return Err(Error::config("encoder kernel ≥ 1 and eps > 0 required"));
        }
        Ok(())
    }

    /// State tokens emitted per timestep.
    pub fn tokens_per_state(&self) -> usize {
        match self.variant {
            EncoderVariant::PerMetricFc => 4,
            EncoderVariant::TemporalCnn => 1,
        }
    }
}

/// Maps raw metrics to roughly unit scale: throughput and sending rate by
/// capacity, RTT by a reference RTT, loss unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub capacity_mbps: f64,
    pub rtt_ref_ms: f64,
}

impl Normalizer {
    pub fn new(capacity_mbps: Option<f64>, rtt_ref_ms: Option<f64>) -> Result<Self> {
        match (capacity_mbps, rtt_ref_ms) {
            (Some(c), Some(r)) if c > 0.0 && r > 0.0 => Ok(Self { capacity_mbps: c, rtt_ref_ms: r }),
            (Some(_), Some(_)) => Err(Error::config("scaling constants must be positive")),
            _ => Err(Error::config("input scaling constants missing")),
        }
    }

    /// Capacity from the largest throughput and RTT reference from the
    /// smallest RTT seen in `states`.
    pub fn fit<'a>(states: impl IntoIterator<Item = &'a [f64; 4]>) -> Result<Self> {
        let mut cap: Option<f64> = None;
        let mut rtt: Option<f64> = None;
        for s in states {
            cap = Some(cap.map_or(s[0], |c| c.max(s[0])));
            rtt = Some(rtt.map_or(s[2], |r| r.min(s[2])));
        }
        Self::new(cap, rtt)
    }

    pub fn scale(&self, s: &[f64; 4]) -> [f64; 4] {
        [s[0] / self.capacity_mbps, s[1], s[2] / self.rtt_ref_ms, s[3] / self.capacity_mbps]
    }

    pub fn unscale(&self, s: &[f64; 4]) -> [f64; 4] {
        [s[0] * self.capacity_mbps, s[1], s[2] * self.rtt_ref_ms, s[3] * self.capacity_mbps]
    }
}

#[derive(Clone, Debug)]
enum Weights {
    Fc([(ParamId, ParamId); 4]),
    Cnn(ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    token_dim: usize,
    weights: Weights,
}

impl Encoder {
    /// Registers `enc.fc_{metric}.{w,b}` or `enc.cnn.{w,b}`.
    pub fn new(config: EncoderConfig, token_dim: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let weights = match config.variant {
            EncoderVariant::PerMetricFc => {
                let mut ids = Vec::with_capacity(4);
                for m in METRICS {
                    let w = store.insert(format!("enc.fc_{m}.w"), normal(rng, &[1, token_dim], 1.0).with_requires_grad(true))?;
                    let b = store.insert(format!("enc.fc_{m}.b"), normal(rng, &[token_dim], 1.0).with_requires_grad(true))?;
                    ids.push((w, b));
                }
                Weights::Fc([ids[0], ids[1], ids[2], ids[3]])
            }
            EncoderVariant::TemporalCnn => {
                let fan_in = 4 * config.kernel;
                let std = 1.0 / (fan_in as f64).sqrt();
                let w = store.insert("enc.cnn.w", normal(rng, &[fan_in, token_dim], std).with_requires_grad(true))?;
                let b = store.insert("enc.cnn.b", normal(rng, &[token_dim], 1.0).with_requires_grad(true))?;
                Weights::Cnn(w, b)
            }
        };
        Ok(Self { config, token_dim, weights })
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    /// Encodes `x` of shape `[batch·seq, 4]`.
    ///
    /// The fc variant returns `[batch·seq·4, d]` with rows ordered
    /// (batch, time, metric); the CNN variant returns `[batch·seq, d]`.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        batch: usize,
        seq: usize,
    ) -> Result<Var> {
        match tape.shape(x) {
            [r, 4] if *r == batch * seq => {}
            s => return Err(Error::Shape(format!("encoder expects [{}, 4], got {s:?}", batch * seq))),
        }
        let n = batch * seq;
        let eps = T::lit(self.config.eps);
        match &self.weights {
            Weights::Fc(ids) => {
                let mut parts = Vec::with_capacity(4);
                for (m, (w, b)) in ids.iter().enumerate() {
                    let col = tape.slice_cols(x, m, 1)?;
                    let wv = tape.param(store, *w);
                    let h = tape.matmul(col, wv)?;
                    let bv = tape.param(store, *b);
                    parts.push(tape.add_row(h, bv)?);
                }
                let stacked = tape.concat_rows(&parts)?;
                let order: Vec<Option<usize>> = (0..n * 4).map(|r| Some((r % 4) * n + r / 4)).collect();
                let tokens = tape.gather_rows(stacked, &order)?;
                tape.layer_norm(tokens, eps)
            }
            Weights::Cnn(w, b) => {
                let cols = tape.im2col_causal(x, batch, seq, self.config.kernel)?;
                let wv = tape.param(store, *w);
                let h = tape.matmul(cols, wv)?;
                let bv = tape.param(store, *b);
                let h = tape.add_row(h, bv)?;
                tape.layer_norm(h, eps)
            }
        }
    }

    /// Tensor-level convenience: `[b, seq, 4]` → `[b, seq, 4, d]` (fc) or
    /// `[b, seq, d]` (CNN).
    pub fn encode_tensor(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let (b, seq) = match x.shape() {
            [b, s, 4] => (*b, *s),
            s => return Err(Error::Shape(format!("states must be [batch, seq, 4], got {s:?}"))),
        };
        let mut tape = Tape::new();
        let flat = tape.constant(x.clone().reshape([b * seq, 4])?);
        let out = self.encode(&mut tape, store, flat, b, seq)?;
        let shape = match self.weights {
            Weights::Fc(_) => vec![b, seq, 4, self.token_dim],
            Weights::Cnn(..) => vec![b, seq, self.token_dim],
        };
        tape.value(out).clone().reshape(shape)
    }
}
