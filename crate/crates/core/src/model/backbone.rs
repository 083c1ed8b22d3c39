//! Small causal transformer with frozen base weights and low-rank
//! adapters: `W = W₀ + A·B`.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::normal;
use crate::error::{Error, Result};
use crate::tensor::{matmul, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Projections that can carry an adapter, in layer order.
pub const PROJECTIONS: [&str; 6] = ["attn_q", "attn_k", "attn_v", "attn_o", "ff1", "ff2"];
/// Adapted by default.
pub const ATTENTION_PROJECTIONS: [&str; 4] = ["attn_q", "attn_k", "attn_v", "attn_o"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub layers: usize,
    pub heads: usize,
    pub token_dim: usize,
    /// Feed-forward width as a multiple of `token_dim`.
    pub ff_mult: usize,
    /// Maximum sequence length in tokens.
    pub context_len: usize,
    /// Standard deviation of the random base initialization.
    pub init_std: f64,
    pub eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { layers: 2, heads: 2, token_dim: 64, ff_mult: 4, context_len: 128, init_std: 0.02, eps: 1e-5 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.token_dim == 0 || self.ff_mult == 0 || self.context_len == 0 {
            return Err(Error::config("backbone dimensions must be positive"));
        }
        if !self.token_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("token_dim {} not divisible by {} heads", self.token_dim, self.heads)));
        }
        if !(self.init_std > 0.0) || !(self.eps > 0.0) {
            return Err(Error::config("init_std and eps must be positive"));
        }
        Ok(())
    }

    fn ff_dim(&self) -> usize {
        self.token_dim * self.ff_mult
    }
}

/// `W₀ + A·B` without touching `W₀`.
pub fn effective_weight(w0: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (d, k) = match w0.shape() {
        [d, k] => (*d, *k),
        s => return Err(Error::Shape(format!("base weight must be 2-d, got {s:?}"))),
    };
    let ok = matches!((a.shape(), b.shape()), ([da, r], [rb, kb]) if *da == d && r == rb && *kb == k);
    if !ok {
        return Err(Error::Shape(format!(
            "adapter shapes {:?} and {:?} do not fit a {d}×{k} weight (expected d={d}, r, k={k})",
            a.shape(),
            b.shape()
        )));
    }
    let ab = matmul(a, b)?;
    let data = w0.data().iter().zip(ab.data()).map(|(w, x)| w + x).collect();
    Tensor::new([d, k], data)
}

#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub target: String,
    pub rank: usize,
    pub a: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
struct Layer {
    ln1: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    proj: BTreeMap<&'static str, (ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    layers: Vec<Layer>,
    pos: ParamId,
    ln_f: (ParamId, ParamId),
    adapters: BTreeMap<String, LoraAdapter>,
    /// Inference-only copies of merged weights, keyed by target.
    merged: BTreeMap<String, Tensor>,
    frozen_hash: Option<String>,
}

impl Backbone {
    /// Registers randomly initialized base weights under `base.*`.
    pub fn new(config: BackboneConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.token_dim;
        let std = config.init_std;
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let ln = |name: &str, store: &mut ParamStore| -> Result<(ParamId, ParamId)> {
                let w = store.insert(format!("base.layer{i}.{name}.w"), Tensor::full([d], 1.0))?;
                let b = store.insert(format!("base.layer{i}.{name}.b"), Tensor::zeros([d]))?;
                Ok((w, b))
            };
            let ln1 = ln("ln1", store)?;
            let ln2 = ln("ln2", store)?;
            let mut proj = BTreeMap::new();
            for name in PROJECTIONS {
                let (fan_in, fan_out) = match name {
                    "ff1" => (d, config.ff_dim()),
                    "ff2" => (config.ff_dim(), d),
                    _ => (d, d),
                };
                let w = store.insert(format!("base.layer{i}.{name}.w"), normal(rng, &[fan_in, fan_out], std))?;
                let b = store.insert(format!("base.layer{i}.{name}.b"), Tensor::zeros([fan_out]))?;
                proj.insert(name, (w, b));
            }
            layers.push(Layer { ln1, ln2, proj });
        }
        let pos = store.insert("base.pos", normal(rng, &[config.context_len, d], std))?;
        let ln_f = (store.insert("base.ln_f.w", Tensor::full([d], 1.0))?, store.insert("base.ln_f.b", Tensor::zeros([d]))?);
        Ok(Self {
            config,
            layers,
            pos,
            ln_f,
            adapters: BTreeMap::new(),
            merged: BTreeMap::new(),
            frozen_hash: None,
        })
    }

    /// Excludes every `base.*` tensor from training and records its hash.
    /// Calling it again returns the recorded hash.
    pub fn freeze_base(&mut self, store: &mut ParamStore) -> String {
        if let Some(h) = &self.frozen_hash {
            return h.clone();
        }
        let ids: Vec<ParamId> = store.iter().filter(|(_, n, _)| n.starts_with("base.")).map(|(id, _, _)| id).collect();
        for id in ids {
            store.get_mut(id).set_requires_grad(false);
        }
        let h = base_hash(store);
        self.frozen_hash = Some(h.clone());
        h
    }

    pub fn frozen_hash(&self) -> Option<&str> {
        self.frozen_hash.as_deref()
    }

    /// Targets whose adapters were merged into inference-only weights.
    pub fn merged_targets(&self) -> impl Iterator<Item = &str> {
        self.merged.keys().map(String::as_str)
    }

    pub(crate) fn set_frozen_hash(&mut self, hash: String) {
        self.frozen_hash = Some(hash);
    }

    pub fn adapters(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.adapters.values()
    }

    /// Attaches a rank-`rank` adapter to `target` (`layer{i}.{projection}`).
    /// `A` is Gaussian with std 0.02 and `B` starts at zero.
    pub fn attach_lora(&mut self, store: &mut ParamStore, target: &str, rank: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        if self.adapters.contains_key(target) || self.merged.contains_key(target) {
            return Err(Error::contract(format!("adapter already attached to `{target}`")));
        }
        let id = store.id(&format!("base.{target}.w"))?;
        let w = store.get(id);
        if w.requires_grad() || self.frozen_hash.is_none() {
            return Err(Error::contract(format!("`base.{target}.w` must be frozen before attaching an adapter")));
        }
        let (d, k) = match w.shape() {
            [d, k] => (*d, *k),
            s => return Err(Error::Shape(format!("`base.{target}.w` is not a matrix: {s:?}"))),
        };
        if rank == 0 || rank > d.min(k) {
            return Err(Error::Config(format!("LoRA rank {rank} outside [1, {}]", d.min(k))));
        }
        let a = store.insert(format!("lora.{target}.A"), normal(rng, &[d, rank], 0.02).with_requires_grad(true))?;
        let b = store.insert(format!("lora.{target}.B"), Tensor::zeros([rank, k]).with_requires_grad(true))?;
        self.adapters.insert(target.to_string(), LoraAdapter { target: target.to_string(), rank, a, b });
        Ok(())
    }

    /// Attaches adapters to the given projections of every layer.
    pub fn attach_all(
        &mut self,
        store: &mut ParamStore,
        projections: &[&str],
        rank: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        for i in 0..self.layers.len() {
            for p in projections {
                self.attach_lora(store, &format!("layer{i}.{p}"), rank, rng)?;
            }
        }
        Ok(())
    }

    /// Writes `W₀ + A·B` into an inference-only copy and retires the
    /// adapter. `W₀` and the frozen hash are untouched.
    pub fn merge_lora(&mut self, store: &ParamStore, target: &str) -> Result<()> {
        let Some(ad) = self.adapters.remove(target) else {
            return Err(Error::contract(format!("no live adapter on `{target}`")));
        };
        let w0 = store.by_name(&format!("base.{target}.w"))?;
        let w = effective_weight(w0, store.get(ad.a), store.get(ad.b))?;
        self.merged.insert(target.to_string(), w);
        Ok(())
    }

    fn linear<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        layer: usize,
        name: &'static str,
    ) -> Result<Var> {
        let (w, b) = self.layers[layer].proj[name];
        let target = format!("layer{layer}.{name}");
        let wv = match self.merged.get(&target) {
            Some(m) => tape.constant(m.cast()),
            None => tape.param(store, w),
        };
        let mut h = tape.matmul(x, wv)?;
        if let Some(ad) = self.adapters.get(&target) {
            let a = tape.param(store, ad.a);
            let xa = tape.matmul(x, a)?;
            let b = tape.param(store, ad.b);
            let delta = tape.matmul(xa, b)?;
            h = tape.add(h, delta)?;
        }
        let bv = tape.param(store, b);
        tape.add_row(h, bv)
    }

    fn norm<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, ln: (ParamId, ParamId)) -> Result<Var> {
        let h = tape.layer_norm(x, T::lit(self.config.eps))?;
        let w = tape.param(store, ln.0);
        let h = tape.mul_row(h, w)?;
        let b = tape.param(store, ln.1);
        tape.add_row(h, b)
    }

    /// Causal forward over `x` of shape `[batch·len, d]`; adds positional
    /// embeddings and returns final-norm hidden states of the same shape.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        batch: usize,
        len: usize,
    ) -> Result<Var> {
        let d = self.config.token_dim;
        if len > self.config.context_len {
            return Err(Error::Shape(format!("sequence of {len} tokens exceeds context {}", self.config.context_len)));
        }
        match tape.shape(x) {
            [r, c] if *r == batch * len && *c == d => {}
            s => return Err(Error::Shape(format!("backbone expects [{}, {d}], got {s:?}", batch * len))),
        }
        let pos = tape.param(store, self.pos);
        let rows: Vec<Option<usize>> = (0..batch * len).map(|r| Some(r % len)).collect();
        let pos = tape.gather_rows(pos, &rows)?;
        let mut h = tape.add(x, pos)?;
        for (i, layer) in self.layers.iter().enumerate() {
            let a = self.norm(tape, store, h, layer.ln1)?;
            let q = self.linear(tape, store, a, i, "attn_q")?;
            let k = self.linear(tape, store, a, i, "attn_k")?;
            let v = self.linear(tape, store, a, i, "attn_v")?;
            let att = tape.causal_attention(q, k, v, batch, len, self.config.heads)?;
            let o = self.linear(tape, store, att, i, "attn_o")?;
            h = tape.add(h, o)?;
            let f = self.norm(tape, store, h, layer.ln2)?;
            let f = self.linear(tape, store, f, i, "ff1")?;
            let f = tape.gelu(f);
            let f = self.linear(tape, store, f, i, "ff2")?;
            h = tape.add(h, f)?;
        }
        self.norm(tape, store, h, self.ln_f)
    }

    /// Tensor-level forward of `[batch, len, d]`.
    pub fn forward_tensor(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let (b, l, d) = match x.shape() {
            [b, l, d] => (*b, *l, *d),
            s => return Err(Error::Shape(format!("tokens must be [batch, len, d], got {s:?}"))),
        };
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone().reshape([b * l, d])?);
        let h = self.forward(&mut tape, store, xv, b, l)?;
        tape.value(h).clone().reshape([b, l, d])
    }
}

/// SHA-256 over every `base.*` tensor: name, shape and little-endian data.
pub fn base_hash(store: &ParamStore) -> String {
    let mut h = Sha256::new();
    for (_, name, t) in store.iter().filter(|(_, n, _)| n.starts_with("base.")) {
        h.update((name.len() as u32).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.shape().len() as u32).to_le_bytes());
        for &s in t.shape() {
            h.update((s as u32).to_le_bytes());
        }
        for x in t.data() {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Trainable adapter parameters for a `d×k` weight at rank `r`.
pub fn lora_param_count(d: usize, k: usize, r: usize) -> usize {
    r * (d + k)
}
