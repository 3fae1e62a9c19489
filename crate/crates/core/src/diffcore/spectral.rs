//! Spectral weight normalization by power iteration.
//!
//! The weight is viewed as a matrix (out-features x rest). One persistent
//! left singular-vector estimate `u` is refined per training step; the
//! output is `w / sigma` where `sigma = u^T W v` and gradients flow through
//! the division with `u`, `v` held constant.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::{cast, Scalar};

use super::graph::Value;
use super::ops::{div_by_scalar, frobenius_inner};
use super::tensor::Tensor;

/// Persistent power-iteration state for one weight tensor.
pub struct SpectralNormState<T: Scalar> {
    /// Left singular-vector estimate, unit norm, length = out-features.
    pub u: Vec<T>,
    /// Power iterations per update (default 1).
    pub power_iters: usize,
}

impl<T: Scalar> SpectralNormState<T> {
    pub fn init(out_features: usize, rng: &mut SplitMix64) -> Self {
        let mut u: Vec<T> = (0..out_features).map(|_| cast(rng.uniform(-1.0, 1.0))).collect();
        normalize(&mut u).expect("random init cannot be the zero vector");
        SpectralNormState { u, power_iters: 1 }
    }
}

fn normalize<T: Scalar>(v: &mut [T]) -> Result<T> {
    let norm = v.iter().fold(T::zero(), |a, &x| a + x * x).sqrt();
    if norm <= T::from_f64(1e-30).unwrap() {
        return Err(Error::InvalidArgument("zero vector in power iteration".to_string()));
    }
    let inv = T::one() / norm;
    for x in v.iter_mut() {
        *x *= inv;
    }
    Ok(norm)
}

/// y = M v for row-major M (rows x cols).
fn matvec<T: Scalar>(m: &[T], rows: usize, cols: usize, v: &[T], out: &mut [T]) {
    for r in 0..rows {
        out[r] = m[r * cols..(r + 1) * cols]
            .iter()
            .zip(v)
            .fold(T::zero(), |a, (&x, &y)| a + x * y);
    }
}

/// y = M^T u for row-major M (rows x cols).
fn matvec_t<T: Scalar>(m: &[T], rows: usize, cols: usize, u: &[T], out: &mut [T]) {
    for o in out.iter_mut() {
        *o = T::zero();
    }
    for r in 0..rows {
        let ur = u[r];
        for (o, &x) in out.iter_mut().zip(&m[r * cols..(r + 1) * cols]) {
            *o += ur * x;
        }
    }
}

fn spectral_impl<T: Scalar>(
    weight: &Value<T>,
    state: &mut SpectralNormState<T>,
    update: bool,
) -> Result<Value<T>> {
    let shape = weight.shape();
    if shape.is_empty() {
        return Err(Error::InvalidArgument("spectral_normalize on scalar weight".to_string()));
    }
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    if state.u.len() != rows {
        return Err(Error::InvalidArgument(format!(
            "power-iteration state of length {} for {} out-features",
            state.u.len(),
            rows
        )));
    }
    let wv = weight.value();
    let wd = wv.data();
    if wd.iter().all(|&v| v == T::zero()) {
        return Err(Error::InvalidArgument(
            "spectral_normalize: weight matrix is zero".to_string(),
        ));
    }
    let mut v = vec![T::zero(); cols];
    if update {
        for _ in 0..state.power_iters.max(1) {
            matvec_t(wd, rows, cols, &state.u, &mut v);
            if normalize(&mut v).is_err() {
                // u landed in the null space; nudge it deterministically.
                let bump = T::one() / cast::<T>(rows as f64).sqrt();
                for x in state.u.iter_mut() {
                    *x += bump;
                }
                normalize(&mut state.u)?;
                matvec_t(wd, rows, cols, &state.u, &mut v);
                normalize(&mut v)?;
            }
            matvec(wd, rows, cols, &v, &mut state.u);
            normalize(&mut state.u)?;
        }
        // Final pairing for sigma = u^T W v with the refreshed u.
        matvec_t(wd, rows, cols, &state.u, &mut v);
        normalize(&mut v)?;
    } else {
        matvec_t(wd, rows, cols, &state.u, &mut v);
        normalize(&mut v)?;
    }
    drop(wv);

    // sigma as a graph scalar through the constant rank-1 probe u v^T.
    let mut probe = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let ur = state.u[r];
        for c in 0..cols {
            probe[r * cols + c] = ur * v[c];
        }
    }
    let sigma = frobenius_inner(weight, &Tensor::from_parts(vec![rows, cols], probe))?;
    if sigma.value().item() == T::zero() {
        return Err(Error::InvalidArgument(
            "spectral_normalize: singular-value estimate is zero".to_string(),
        ));
    }
    div_by_scalar(weight, &sigma)
}

/// Normalize and refine `state.u` with `state.power_iters` iterations.
pub fn spectral_normalize<T: Scalar>(
    weight: &Value<T>,
    state: &mut SpectralNormState<T>,
) -> Result<Value<T>> {
    spectral_impl(weight, state, true)
}

/// Normalize using the stored `u` without refining it; pure in the state.
pub fn spectral_normalize_frozen<T: Scalar>(
    weight: &Value<T>,
    state: &SpectralNormState<T>,
) -> Result<Value<T>> {
    let mut shadow = SpectralNormState { u: state.u.clone(), power_iters: state.power_iters };
    spectral_impl(weight, &mut shadow, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn top_singular_value(data: &[f64], rows: usize, cols: usize) -> f64 {
        let m = nalgebra::DMatrix::from_row_slice(rows, cols, data);
        m.svd(false, false).singular_values[0]
    }

    #[test]
    fn scaled_identity_normalizes_to_identity() {
        let w = Value::parameter(Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap());
        let mut state = SpectralNormState { u: vec![1.0, 0.0], power_iters: 50 };
        let out = spectral_normalize(&w, &mut state).unwrap();
        let od = out.detach();
        for (got, want) in od.data().iter().zip([1.0f64, 0.0, 0.0, 1.0]) {
            assert!((got - want).abs() < 1e-9);
        }
        assert!((top_singular_value(od.data(), 2, 2) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn unit_spectral_norm_weight_is_fixed_point() {
        // Singular values 1 and 0.3: already normalized.
        let w = Value::parameter(Tensor::new(vec![2, 2], vec![1.0f64, 0.0, 0.0, 0.3]).unwrap());
        let mut rng = SplitMix64::new(9);
        let mut state = SpectralNormState { u: SpectralNormState::init(2, &mut rng).u, power_iters: 50 };
        let out = spectral_normalize(&w, &mut state).unwrap();
        let od = out.detach();
        let wd = w.detach();
        for (&a, &b) in od.data().iter().zip(wd.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn rank_one_outer_product_normalizes_to_unit_sigma() {
        // a b^T with ||a||*||b|| = 5
        let a = [3.0, 4.0]; // norm 5
        let b = [0.6, 0.8]; // norm 1
        let data: Vec<f64> = a.iter().flat_map(|&ai| b.iter().map(move |&bi| ai * bi)).collect();
        let w = Value::parameter(Tensor::new(vec![2, 2], data).unwrap());
        let mut rng = SplitMix64::new(3);
        let mut state = SpectralNormState::init(2, &mut rng);
        state.power_iters = 50;
        let out = spectral_normalize(&w, &mut state).unwrap();
        let sv = top_singular_value(out.detach().data(), 2, 2);
        assert!((sv - 1.0).abs() < 1e-3, "top singular value {sv}");
    }

    #[test]
    fn u_stays_unit_norm() {
        let mut rng = SplitMix64::new(17);
        let mut w = Tensor::<f64>::zeros(&[4, 6]);
        w.fill_uniform(&mut rng, 1.0);
        let wv = Value::parameter(w);
        let mut state = SpectralNormState::init(4, &mut rng);
        for _ in 0..10 {
            spectral_normalize(&wv, &mut state).unwrap();
            let n: f64 = state.u.iter().map(|&x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_weight_is_checked() {
        let w = Value::parameter(Tensor::<f64>::zeros(&[2, 2]));
        let mut state = SpectralNormState { u: vec![1.0, 0.0], power_iters: 1 };
        assert!(spectral_normalize(&w, &mut state).is_err());
    }

    #[test]
    fn frozen_variant_does_not_mutate_state() {
        let mut rng = SplitMix64::new(21);
        let mut w = Tensor::<f64>::zeros(&[3, 5]);
        w.fill_uniform(&mut rng, 1.0);
        let wv = Value::parameter(w);
        let state = {
            let mut s = SpectralNormState::init(3, &mut rng);
            s.power_iters = 20;
            spectral_normalize(&wv, &mut s).unwrap();
            s
        };
        let before = state.u.clone();
        let y1 = spectral_normalize_frozen(&wv, &state).unwrap();
        let y2 = spectral_normalize_frozen(&wv, &state).unwrap();
        assert_eq!(state.u, before);
        assert_eq!(y1.detach().data(), y2.detach().data());
    }
}
