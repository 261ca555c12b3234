//! Finite-difference gradient checking.
//!
//! The central-difference stencil is evaluated through plain forward passes
//! on fresh tapes, so it stays independent of the reverse-mode path it
//! validates.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::{Tape, TensorId};

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences at `point`, returning the max relative error
/// `|analytic - numeric| / max(1, |analytic|)` over all coordinates.
pub fn grad_check<F: Scalar>(
    f: &mut dyn FnMut(&mut Tape<F>, TensorId) -> Result<TensorId>,
    point: &Tensor<F>,
    h: f64,
) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::InvalidArgument("grad_check step h must be positive".into()));
    }

    // Analytic gradient via one recorded forward + backward.
    let mut tape = Tape::new();
    let x = tape.leaf_var(point.clone());
    let out = f(&mut tape, x)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::InvalidArgument(format!(
            "grad_check target must be scalar, got shape {:?}",
            tape.value(out).shape()
        )));
    }
    tape.backward(out)?;
    let analytic: Vec<f64> = tape
        .grad(x)
        .expect("input registered as differentiable leaf")
        .iter()
        .map(|v| v.as_f64())
        .collect();

    // Value-only evaluation for the stencil.
    let mut eval = |p: &Tensor<F>| -> Result<f64> {
        let mut t = Tape::new();
        let id = t.leaf(p.clone());
        let o = f(&mut t, id)?;
        let v = t.value(o).data()[0].as_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut max_rel = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = F::from_f64(orig.as_f64() + h);
        let plus = eval(&probe)?;
        probe.data_mut()[i] = F::from_f64(orig.as_f64() - h);
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / f64::max(1.0, analytic[i].abs());
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
