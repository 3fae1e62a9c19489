//! First-order optimizers over graph parameters. Each optimizer owns its
//! slot state in the order of the parameter list it was built for; state is
//! exportable for exact resume.

use crate::diffcore::Value;
use crate::error::Result;
use crate::models::TensorSink;

fn grad_or_zero(p: &Value<f32>) -> Vec<f32> {
    match p.grad() {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; p.value().len()],
    }
}

/// SGD with classical momentum and coupled L2 weight decay.
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f32>>,
}

impl SgdMomentum {
    pub fn new(params: &[Value<f32>], momentum: f64, weight_decay: f64) -> Self {
        SgdMomentum {
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| vec![0.0; p.value().len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &[Value<f32>], lr: f64) {
        let (mom, wd, lr) = (self.momentum as f32, self.weight_decay as f32, lr as f32);
        for (p, v) in params.iter().zip(self.velocity.iter_mut()) {
            let g = grad_or_zero(p);
            p.update_data(|w| {
                for i in 0..w.len() {
                    let gi = g[i] + wd * w[i];
                    v[i] = mom * v[i] + gi;
                    w[i] -= lr * v[i];
                }
            });
        }
    }
}

/// Adam, optionally with decoupled weight decay (AdamW when > 0).
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decoupled_weight_decay: f64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &[Value<f32>], decoupled_weight_decay: f64) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decoupled_weight_decay,
            m: params.iter().map(|p| vec![0.0; p.value().len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value().len()]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &[Value<f32>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let eps = self.eps as f32;
        let lr = lr as f32;
        let wd = self.decoupled_weight_decay as f32;
        let bc1 = 1.0 - (self.beta1 as f32).powi(self.t as i32);
        let bc2 = 1.0 - (self.beta2 as f32).powi(self.t as i32);
        for ((p, m), v) in params.iter().zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            let g = grad_or_zero(p);
            p.update_data(|w| {
                for i in 0..w.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    if wd > 0.0 {
                        w[i] -= lr * wd * w[i];
                    }
                    w[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            });
        }
    }

    /// Zero the moment slots for a contiguous parameter range; used when a
    /// layer's parameters are redrawn in place.
    pub fn reset_slots(&mut self, range: std::ops::Range<usize>) {
        for i in range {
            self.m[i].fill(0.0);
            self.v[i].fill(0.0);
        }
    }

    pub fn export(&self, prefix: &str, out: &mut TensorSink) {
        out.push_u64(format!("{prefix}/t"), self.t);
        for (i, m) in self.m.iter().enumerate() {
            out.push_vec(format!("{prefix}/m{i}"), m);
        }
        for (i, v) in self.v.iter().enumerate() {
            out.push_vec(format!("{prefix}/v{i}"), v);
        }
    }

    pub fn import(&mut self, prefix: &str, src: &TensorSink) -> Result<()> {
        self.t = src.u64(&format!("{prefix}/t"))?;
        for (i, m) in self.m.iter_mut().enumerate() {
            src.load_vec(&format!("{prefix}/m{i}"), m)?;
        }
        for (i, v) in self.v.iter_mut().enumerate() {
            src.load_vec(&format!("{prefix}/v{i}"), v)?;
        }
        Ok(())
    }
}
