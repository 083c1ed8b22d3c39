//! Linear map from a hidden state to one logit per CCA.

use std::time::Duration;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::normal;
use crate::error::{Error, Result};
use crate::simnet::CcaId;
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

pub const NUM_CCAS: usize = CcaId::ALL.len();

#[derive(Clone, Debug)]
pub struct Head {
    w: ParamId,
    b: ParamId,
    /// Scalar regression output, present only for regression models.
    reg: Option<(ParamId, ParamId)>,
}

impl Head {
    /// Registers `head.w` (`d×3`, std 0.02) and `head.b` (zeros), plus
    /// `head.reg.{w,b}` when `regression` is set. Regression models keep
    /// the class weights frozen since no loss reaches them.
    pub fn new(token_dim: usize, regression: bool, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let w = store.insert("head.w", normal(rng, &[token_dim, NUM_CCAS], 0.02).with_requires_grad(!regression))?;
        let b = store.insert("head.b", Tensor::zeros([NUM_CCAS]).with_requires_grad(!regression))?;
        let reg = if regression {
            let rw = store.insert("head.reg.w", normal(rng, &[token_dim, 1], 0.02).with_requires_grad(true))?;
            let rb = store.insert("head.reg.b", Tensor::zeros([1]).with_requires_grad(true))?;
            Some((rw, rb))
        } else {
            None
        };
        Ok(Self { w, b, reg })
    }

    pub fn has_regression(&self) -> bool {
        self.reg.is_some()
    }

    /// Logits `[rows.len(), 3]` from the hidden rows at `rows`.
    pub fn logits<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, hidden: Var, rows: &[usize]) -> Result<Var> {
        let idx: Vec<Option<usize>> = rows.iter().map(|&r| Some(r)).collect();
        let h = tape.gather_rows(hidden, &idx)?;
        let w = tape.param(store, self.w);
        let z = tape.matmul(h, w)?;
        let b = tape.param(store, self.b);
        tape.add_row(z, b)
    }

    /// Regression outputs `[rows.len(), 1]`.
    pub fn regress<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, hidden: Var, rows: &[usize]) -> Result<Var> {
        let Some((w, b)) = self.reg else {
            return Err(Error::contract("model has no regression head"));
        };
        let idx: Vec<Option<usize>> = rows.iter().map(|&r| Some(r)).collect();
        let h = tape.gather_rows(hidden, &idx)?;
        let wv = tape.param(store, w);
        let z = tape.matmul(h, wv)?;
        let bv = tape.param(store, b);
        tape.add_row(z, bv)
    }

    /// Logits `[batch, 3]` read from position `pos` of hidden states
    /// `[batch, len, d]`.
    pub fn predict_logits(&self, store: &ParamStore, hidden: &Tensor, pos: usize) -> Result<Tensor> {
        let (b, l, d) = match hidden.shape() {
            [b, l, d] => (*b, *l, *d),
            s => return Err(Error::Shape(format!("hidden states must be [batch, len, d], got {s:?}"))),
        };
        if pos >= l {
            return Err(Error::Shape(format!("readout position {pos} outside sequence of {l}")));
        }
        let mut tape = Tape::new();
        let h = tape.constant(hidden.clone().reshape([b * l, d])?);
        let rows: Vec<usize> = (0..b).map(|i| i * l + pos).collect();
        let z = self.logits(&mut tape, store, h, &rows)?;
        Ok(tape.value(z).clone())
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn select_cca(logits: &[f32]) -> Result<CcaId> {
    if logits.len() != NUM_CCAS {
        return Err(Error::Decision(format!("expected {NUM_CCAS} logits, got {}", logits.len())));
    }
    if let Some(i) = logits.iter().position(|x| x.is_nan()) {
        return Err(Error::Decision(format!("logit {i} is NaN")));
    }
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate().skip(1) {
        if x > logits[best] {
            best = i;
        }
    }
    Ok(CcaId::from_index(best).expect("index below NUM_CCAS"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub time_s: f64,
    pub flow_id: usize,
    pub chosen: CcaId,
    pub logits: [f32; NUM_CCAS],
    pub inference_steps: u32,
    pub latency: Duration,
}
