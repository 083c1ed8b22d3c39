//! Trajectory windows for the trajectory model.
//!
//! Each timestep occupies `[R_t, s_t…, a_t]`: one return token, one token
//! per state token of the encoder (four for the per-metric encoder, one
//! for the temporal CNN) and one action token. Windows shorter than `K`
//! are left-padded; pad slots are dropped from attention inputs (zero
//! rows) and from the loss.

use crate::error::{Error, Result};
use crate::model::{Calibration, Window};
use crate::telemetry::Trajectory;

/// Role of one token slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Pad,
    Return(usize),
    State(usize, usize),
    Action(usize),
}

/// Slot roles of a trajectory window, indexed by trajectory timestep.
/// `first` is the timestep of the window's first valid step.
pub fn slot_layout(window: &Window, state_tokens: usize, first: usize) -> Vec<Slot> {
    let k = window.steps();
    let pad = k - window.valid;
    let mut out = Vec::with_capacity(k * (state_tokens + 2));
    for j in 0..k {
        if j < pad {
            out.extend(std::iter::repeat_n(Slot::Pad, state_tokens + 2));
            continue;
        }
        let t = first + j - pad;
        out.push(Slot::Return(t));
        out.extend((0..state_tokens).map(|m| Slot::State(t, m)));
        out.push(Slot::Action(t));
    }
    out
}

/// Window of `k` steps ending at timestep `end` (inclusive).
pub fn window_at(traj: &Trajectory, end: usize, k: usize, cal: &Calibration) -> Window {
    let start = (end + 1).saturating_sub(k);
    let valid = end + 1 - start;
    let pad = k - valid;
    let targets = traj.targets();
    let mut w = Window {
        valid,
        returns: vec![0.0; k],
        states: vec![[0.0; 4]; k],
        actions: vec![None; k],
        targets: vec![None; k],
        value_target: None,
    };
    for (j, t) in (start..=end).enumerate() {
        w.returns[pad + j] = (traj.returns[t] / cal.return_scale) as f32;
        w.states[pad + j] = cal.normalizer.scale(&traj.states[t]).map(|x| x as f32);
        w.actions[pad + j] = Some(traj.actions[t]);
        w.targets[pad + j] = Some(targets[t]);
    }
    w
}

/// Sliding windows of the last `k` steps: `T − k + 1` windows when
/// `T ≥ k`, otherwise a single left-padded one.
pub fn tokenize(traj: &Trajectory, k: usize, cal: &Calibration) -> Result<Vec<Window>> {
    tokenize_strided(traj, k, cal, 1)
}

/// As [`tokenize`] but keeping every `stride`-th window, always including
/// the one that ends at the last timestep.
pub fn tokenize_strided(traj: &Trajectory, k: usize, cal: &Calibration, stride: usize) -> Result<Vec<Window>> {
    traj.validate()?;
    let t = traj.horizon();
    if t == 0 {
        return Err(Error::Degenerate("empty trajectory".into()));
    }
    if k == 0 || stride == 0 {
        return Err(Error::config("window length and stride must be positive"));
    }
    if t <= k {
        return Ok(vec![window_at(traj, t - 1, k, cal)]);
    }
    let mut ends: Vec<usize> = (k - 1..t).rev().step_by(stride).collect();
    ends.reverse();
    Ok(ends.into_iter().map(|e| window_at(traj, e, k, cal)).collect())
}
