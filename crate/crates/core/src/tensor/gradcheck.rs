//! Central finite-difference comparison against the tape's analytic
//! gradients, run in `f64`.

use super::{ParamStore, Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `(parameter name, relative error)` for every trainable tensor.
    pub per_tensor: Vec<(String, f64)>,
}

impl GradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_tensor.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Compares `d loss / d θ` from [`Tape::backward`] with central differences
/// of step `h` for every trainable tensor in `store`.
///
/// The error for a tensor is `‖g_tape − g_fd‖ / max(‖g_tape‖ + ‖g_fd‖, 1e-12)`,
/// which stays meaningful for entries whose true gradient is near zero.
pub fn check_gradients<F>(store: &mut ParamStore<f64>, h: f64, loss_fn: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    tape.backward(loss, store)?;

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, store)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut per_tensor = Vec::new();
    for id in store.trainable_ids() {
        let analytic = store.get(id).grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; store.get(id).len()]);
        let mut diff_sq = 0.0;
        let mut a_sq = 0.0;
        let mut n_sq = 0.0;
        for j in 0..analytic.len() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + h;
            let up = eval(store)?;
            store.get_mut(id).data_mut()[j] = orig - h;
            let down = eval(store)?;
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            diff_sq += (analytic[j] - numeric).powi(2);
            a_sq += analytic[j].powi(2);
            n_sq += numeric.powi(2);
        }
        let rel = diff_sq.sqrt() / (a_sq.sqrt() + n_sq.sqrt()).max(1e-12);
        per_tensor.push((store.name(id).to_string(), rel));
    }
    Ok(GradCheck { per_tensor })
}
