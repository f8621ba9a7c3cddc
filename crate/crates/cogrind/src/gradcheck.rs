//! Finite-difference verification of tape gradients.
//!
//! [`grad_check`] compares the analytic gradient of a scalar-valued tensor
//! function against central differences and reports the worst relative
//! error, `max_i |analytic_i − fd_i| / max(1, |analytic_i|)`. Every
//! differentiable path in the crate is validated through it; the model
//! tests drive whole loss functions through here with all but one
//! parameter frozen.

use crate::tape::{Tape, TensorId};
use crate::tensor::{Real, Tensor, TensorError};

/// A scalar-valued function built on a tape from a single checked input.
/// The closure must be pure: it is re-run many times on fresh tapes.
pub trait TapeFn: Fn(&mut Tape, TensorId) -> Result<TensorId, TensorError> {}
impl<F: Fn(&mut Tape, TensorId) -> Result<TensorId, TensorError>> TapeFn for F {}

/// Max relative error between analytic and central-difference gradients
/// over every component of `x`. The step for component `i` is
/// `eps * max(1, |x_i|)` so large and small magnitudes are probed at
/// comparable relative resolution.
pub fn grad_check<F: TapeFn>(x: &Tensor, eps: Real, f: F) -> Result<Real, TensorError> {
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(x, eps, &all, f)
}

/// [`grad_check`] restricted to selected components (used where `x` is
/// large and probing every entry would dominate test time).
pub fn grad_check_at<F: TapeFn>(x: &Tensor, eps: Real, components: &[usize], f: F) -> Result<Real, TensorError> {
    if eps <= 0.0 {
        return Err(TensorError::invalid("grad_check", format!("eps must be positive, got {eps}")));
    }
    let analytic = {
        let mut tape = Tape::new();
        let id = tape.leaf(x.clone())?;
        let root = f(&mut tape, id)?;
        if !tape.value(root).is_scalar() {
            return Err(TensorError::invalid(
                "grad_check",
                format!("f must be scalar-valued, got shape {:?}", tape.value(root).shape()),
            ));
        }
        tape.backward(root)?;
        // A missing grad means f ignored x entirely; the derivative is zero.
        tape.take_grad(id).unwrap_or_else(|| vec![0.0; x.numel()])
    };

    let eval = |probe: Tensor| -> Result<Real, TensorError> {
        let mut tape = Tape::new();
        let id = tape.constant(probe)?;
        let root = f(&mut tape, id)?;
        Ok(tape.value_scalar(root))
    };

    let mut worst: Real = 0.0;
    for &i in components {
        if i >= x.numel() {
            return Err(TensorError::invalid(
                "grad_check",
                format!("component {i} out of range for {} elements", x.numel()),
            ));
        }
        let step = eps * x.data()[i].abs().max(1.0);
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
