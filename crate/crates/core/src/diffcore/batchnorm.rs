//! Batch normalization over the channel axis of (B, C) or (B, C, H, W)
//! inputs, with three forward modes:
//!
//! * `Train`   — normalize by batch statistics, update running statistics.
//! * `Eval`    — normalize by running statistics; pure.
//! * `Capture` — normalize by running statistics but expose the batch
//!   mean/variance as differentiable graph values and record them, without
//!   touching the running statistics. This is the mode a frozen teacher
//!   runs in while synthetic images are scored against its statistics.
//!
//! Variance is the biased (population) estimate in every mode.

use std::cell::RefCell;

use crate::error::{shape_err, Error, Result};
use crate::scalar::{cast, Scalar};

use super::graph::Value;
use super::ops::finish;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
    Capture,
}

/// Differentiable batch statistics captured from one forward pass, paired
/// with the running statistics they are regularized towards.
pub struct BnCapture<T: Scalar> {
    pub batch_mean: Value<T>,
    pub batch_var: Value<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

/// Batch-norm layer state: affine parameters, running statistics, and the
/// most recently captured batch statistics.
pub struct BatchNorm<T: Scalar> {
    pub gamma: Value<T>,
    pub beta: Value<T>,
    pub running_mean: RefCell<Vec<T>>,
    pub running_var: RefCell<Vec<T>>,
    pub momentum: f64,
    pub eps: f64,
    /// (mean, var) recorded by the last Train or Capture forward.
    pub last_batch: RefCell<Option<(Vec<T>, Vec<T>)>>,
    features: usize,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(features: usize, momentum: f64, eps: f64, trainable: bool) -> Self {
        assert!(momentum > 0.0 && momentum <= 1.0, "momentum must be in (0, 1]");
        assert!(eps > 0.0, "eps must be positive");
        let gamma = Tensor::full(&[features], T::one());
        let beta = Tensor::zeros(&[features]);
        BatchNorm {
            gamma: if trainable { Value::parameter(gamma) } else { Value::constant(gamma) },
            beta: if trainable { Value::parameter(beta) } else { Value::constant(beta) },
            running_mean: RefCell::new(vec![T::zero(); features]),
            running_var: RefCell::new(vec![T::one(); features]),
            momentum,
            eps,
            last_batch: RefCell::new(None),
            features,
        }
    }

    pub fn features(&self) -> usize {
        self.features
    }

    /// Reset running statistics to (0, 1) and drop captured batch stats.
    pub fn reset_running(&self) {
        self.running_mean.borrow_mut().fill(T::zero());
        self.running_var.borrow_mut().fill(T::one());
        *self.last_batch.borrow_mut() = None;
    }

    pub fn forward(&self, x: &Value<T>, mode: BnMode) -> Result<Value<T>> {
        Ok(self.forward_captured(x, mode)?.0)
    }

    /// Forward pass; in `Capture` mode also returns the differentiable
    /// batch statistics.
    pub fn forward_captured(
        &self,
        x: &Value<T>,
        mode: BnMode,
    ) -> Result<(Value<T>, Option<BnCapture<T>>)> {
        let shape = x.shape();
        let (batch, channels, spatial) = match shape.len() {
            2 => (shape[0], shape[1], 1usize),
            4 => (shape[0], shape[1], shape[2] * shape[3]),
            _ => {
                return Err(shape_err(
                    "batchnorm",
                    format!("expected rank 2 or 4, got {:?}", shape),
                ))
            }
        };
        if channels != self.features {
            return Err(shape_err(
                "batchnorm",
                format!("{} channels vs {} features", channels, self.features),
            ));
        }
        if mode != BnMode::Eval && batch < 2 {
            return Err(Error::InvalidArgument(
                "batchnorm requires batch size >= 2 outside eval mode".to_string(),
            ));
        }
        let n = batch * spatial;
        let inv_n = T::one() / cast::<T>(n as f64);

        // Batch statistics (biased variance), needed in Train and Capture.
        let (batch_mean, batch_var) = if mode == BnMode::Eval {
            (Vec::new(), Vec::new())
        } else {
            let xv = x.value();
            let xd = xv.data();
            let mut mean = vec![T::zero(); channels];
            let mut var = vec![T::zero(); channels];
            for b in 0..batch {
                for c in 0..channels {
                    let s = &xd[(b * channels + c) * spatial..(b * channels + c + 1) * spatial];
                    mean[c] += s.iter().fold(T::zero(), |a, &v| a + v);
                }
            }
            for m in mean.iter_mut() {
                *m *= inv_n;
            }
            for b in 0..batch {
                for c in 0..channels {
                    let s = &xd[(b * channels + c) * spatial..(b * channels + c + 1) * spatial];
                    var[c] += s.iter().fold(T::zero(), |a, &v| {
                        let d = v - mean[c];
                        a + d * d
                    });
                }
            }
            for v in var.iter_mut() {
                *v *= inv_n;
            }
            (mean, var)
        };

        if mode != BnMode::Eval {
            *self.last_batch.borrow_mut() = Some((batch_mean.clone(), batch_var.clone()));
        }
        if mode == BnMode::Train {
            // running <- (1 - momentum) * running + momentum * batch
            let m: T = cast(self.momentum);
            let om = T::one() - m;
            let mut rm = self.running_mean.borrow_mut();
            let mut rv = self.running_var.borrow_mut();
            for c in 0..channels {
                rm[c] = om * rm[c] + m * batch_mean[c];
                rv[c] = om * rv[c] + m * batch_var[c];
            }
        }

        let eps: T = cast(self.eps);
        let (norm_mean, norm_var): (Vec<T>, Vec<T>) = if mode == BnMode::Train {
            (batch_mean.clone(), batch_var.clone())
        } else {
            (self.running_mean.borrow().clone(), self.running_var.borrow().clone())
        };
        let inv_std: Vec<T> = norm_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let out = {
            let xv = x.value();
            let xd = xv.data();
            let gv = self.gamma.value();
            let bv = self.beta.value();
            let mut out = vec![T::zero(); xd.len()];
            for b in 0..batch {
                for c in 0..channels {
                    let base = (b * channels + c) * spatial;
                    let (g, be) = (gv.data()[c], bv.data()[c]);
                    let (mu, is) = (norm_mean[c], inv_std[c]);
                    for s in 0..spatial {
                        out[base + s] = g * (xd[base + s] - mu) * is + be;
                    }
                }
            }
            Tensor::from_parts(shape.clone(), out)
        };

        let (xc, gc, bc) = (x.clone(), self.gamma.clone(), self.beta.clone());
        let parents = vec![x.clone(), self.gamma.clone(), self.beta.clone()];
        let out_val = if mode == BnMode::Train {
            // Normalization by batch statistics: gradient couples samples.
            let mu = norm_mean.clone();
            let istd = inv_std.clone();
            finish("batchnorm", out, parents, move |g| {
                let xv = xc.value();
                let xd = xv.data();
                let gammav = gc.value();
                let mut dgamma = vec![T::zero(); channels];
                let mut dbeta = vec![T::zero(); channels];
                let mut gsum = vec![T::zero(); channels];
                let mut gxhat = vec![T::zero(); channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let base = (b * channels + c) * spatial;
                        for s in 0..spatial {
                            let xhat = (xd[base + s] - mu[c]) * istd[c];
                            let gi = g[base + s];
                            gsum[c] += gi;
                            gxhat[c] += gi * xhat;
                        }
                    }
                }
                for c in 0..channels {
                    dgamma[c] = gxhat[c];
                    dbeta[c] = gsum[c];
                }
                if xc.requires_grad() {
                    let mut dx = vec![T::zero(); xd.len()];
                    for b in 0..batch {
                        for c in 0..channels {
                            let base = (b * channels + c) * spatial;
                            let coef = gammav.data()[c] * istd[c];
                            for s in 0..spatial {
                                let xhat = (xd[base + s] - mu[c]) * istd[c];
                                dx[base + s] = coef
                                    * (g[base + s] - inv_n * gsum[c] - xhat * inv_n * gxhat[c]);
                            }
                        }
                    }
                    drop(xv);
                    drop(gammav);
                    xc.accumulate_grad(&dx);
                } else {
                    drop(xv);
                    drop(gammav);
                }
                gc.accumulate_grad(&dgamma);
                bc.accumulate_grad(&dbeta);
            })?
        } else {
            // Normalization by constant running statistics: per-element affine.
            let mu = norm_mean.clone();
            let istd = inv_std.clone();
            finish("batchnorm", out, parents, move |g| {
                let xv = xc.value();
                let xd = xv.data();
                let gammav = gc.value();
                let mut dgamma = vec![T::zero(); channels];
                let mut dbeta = vec![T::zero(); channels];
                let mut dx = vec![T::zero(); xd.len()];
                for b in 0..batch {
                    for c in 0..channels {
                        let base = (b * channels + c) * spatial;
                        let coef = gammav.data()[c] * istd[c];
                        for s in 0..spatial {
                            let gi = g[base + s];
                            dx[base + s] = gi * coef;
                            dgamma[c] += gi * (xd[base + s] - mu[c]) * istd[c];
                            dbeta[c] += gi;
                        }
                    }
                }
                drop(xv);
                drop(gammav);
                xc.accumulate_grad(&dx);
                gc.accumulate_grad(&dgamma);
                bc.accumulate_grad(&dbeta);
            })?
        };

        let capture = if mode == BnMode::Capture {
            // Batch mean/var as graph nodes over x. For the variance,
            // d var_c / d x_i = 2 (x_i - mean_c) / n exactly, because the
            // mean-derivative term cancels against sum(x - mean) = 0.
            let xc = x.clone();
            let mean_node = finish(
                "bn_batch_mean",
                Tensor::from_parts(vec![channels], batch_mean.clone()),
                vec![x.clone()],
                {
                    let xc = xc.clone();
                    move |g| {
                        let mut dx = vec![T::zero(); batch * channels * spatial];
                        for b in 0..batch {
                            for c in 0..channels {
                                let base = (b * channels + c) * spatial;
                                let gv = g[c] * inv_n;
                                for s in 0..spatial {
                                    dx[base + s] = gv;
                                }
                            }
                        }
                        xc.accumulate_grad(&dx);
                    }
                },
            )?;
            let mu = batch_mean.clone();
            let var_node = finish(
                "bn_batch_var",
                Tensor::from_parts(vec![channels], batch_var.clone()),
                vec![x.clone()],
                move |g| {
                    let xv = xc.value();
                    let xd = xv.data();
                    let two = cast::<T>(2.0);
                    let mut dx = vec![T::zero(); xd.len()];
                    for b in 0..batch {
                        for c in 0..channels {
                            let base = (b * channels + c) * spatial;
                            let gv = g[c] * inv_n * two;
                            for s in 0..spatial {
                                dx[base + s] = gv * (xd[base + s] - mu[c]);
                            }
                        }
                    }
                    drop(xv);
                    xc.accumulate_grad(&dx);
                },
            )?;
            Some(BnCapture {
                batch_mean: mean_node,
                batch_var: var_node,
                running_mean: self.running_mean.borrow().clone(),
                running_var: self.running_var.borrow().clone(),
            })
        } else {
            None
        };

        Ok((out_val, capture))
    }
}
