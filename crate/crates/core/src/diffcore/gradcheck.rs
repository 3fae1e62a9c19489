//! Central finite-difference gradient checker. Runs at 64-bit only;
//! finite differences are unreliable in f32.

use crate::error::Result;

use super::graph::{backward, Value};
use super::tensor::Tensor;

/// Compare the recorded gradient of `f` at `point` against central finite
/// differences. Returns the maximum over coordinates of
/// `|analytic - fd| / max(1, |analytic|)`.
///
/// `f` must be evaluable and differentiable on the whole stencil
/// `point +- eps * e_i`; callers are responsible for keeping the point away
/// from kinks of piecewise-linear operators.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Value<f64>) -> Result<Value<f64>>,
{
    assert!(eps > 0.0, "eps must be positive");
    let leaf = Value::parameter(point.clone());
    let loss = f(&leaf)?;
    backward(&loss)?;
    let analytic = leaf.grad().expect("loss did not reach the checked point");

    let mut max_err: f64 = 0.0;
    let n = point.len();
    for i in 0..n {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let fp = f(&Value::constant(plus))?.value().item();
        let fm = f(&Value::constant(minus))?.value().item();
        let fd = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - fd).abs() / f64::max(1.0, a.abs());
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
