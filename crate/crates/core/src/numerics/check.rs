//! Gradient verification via central finite differences.
//!
//! These helpers only call the forward function; they share no code with
//! [`Tape::backward`](super::Tape::backward) and serve as its independent
//! oracle.

use super::param::{ParamId, ParamStore};
use super::tensor::Real;

/// Central difference (f(θ+h) − f(θ−h)) / 2h for one parameter entry.
/// Restores the entry exactly before returning.
pub fn central_difference<F: Fn(&ParamStore) -> Real>(
    store: &mut ParamStore,
    id: ParamId,
    index: usize,
    h: Real,
    forward: &F,
) -> Real {
    let original = store.get(id).value.values()[index];
    store.get_mut(id).value.values_mut()[index] = original + h;
    let plus = forward(store);
    store.get_mut(id).value.values_mut()[index] = original - h;
    let minus = forward(store);
    store.get_mut(id).value.values_mut()[index] = original;
    (plus - minus) / (2.0 * h)
}

/// |a − b| / max(|a|, |b|); zero when both sides vanish.
pub fn relative_error(a: Real, b: Real) -> Real {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
