//! Loss terms for generator and student training: distillation KL,
//! teacher cross-entropy, adversarial divergence, batch-statistics
//! regularization, latent activation-map margin loss against a target mask,
//! and the embedding-diversity pair (inner-radius bounding for the student,
//! outer-radius margin for the generator).
//!
//! Reduction convention: every loss reduces by mean over batch and over
//! spatial/vector elements, except `bn_reg_loss`, which sums over layers
//! and channels.

use crate::diffcore::{ops, BnCapture, BnMode, Tensor, Value};
use crate::error::{shape_err, Error, Result};
use crate::models::{ClassEmbeddingTable, CnnForward, CnnModel};
use crate::scalar::{cast, Scalar};

/// Scaling factors and radii of the combined objectives.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub alpha_ce: f64,
    pub alpha_adv: f64,
    pub alpha_bn: f64,
    pub alpha_cam: f64,
    pub alpha_ed: f64,
    pub alpha_aed: f64,
    pub r_i: f64,
    pub r_o: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_ce: 0.5,
            alpha_adv: 1.3,
            alpha_bn: 10.0,
            alpha_cam: 0.1,
            alpha_ed: 10.0,
            alpha_aed: 5.0,
            r_i: 0.015,
            r_o: 0.03,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let alphas = [
            ("alpha_ce", self.alpha_ce),
            ("alpha_adv", self.alpha_adv),
            ("alpha_bn", self.alpha_bn),
            ("alpha_cam", self.alpha_cam),
            ("alpha_ed", self.alpha_ed),
            ("alpha_aed", self.alpha_aed),
        ];
        for (name, a) in alphas {
            if !(a >= 0.0) || !a.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be >= 0, got {a}")));
            }
        }
        if !(self.r_i > 0.0 && self.r_o > 0.0 && self.r_i < self.r_o) {
            return Err(Error::InvalidArgument(format!(
                "radii must satisfy 0 < r_i < r_o, got r_i={}, r_o={}",
                self.r_i, self.r_o
            )));
        }
        Ok(())
    }
}

// --------------------------------------------------------------- KL and CE

/// Mean over the batch of KL(softmax(teacher) || softmax(student)).
pub fn kd_kl_loss<T: Scalar>(
    teacher_logits: &Value<T>,
    student_logits: &Value<T>,
) -> Result<Value<T>> {
    let ts = teacher_logits.shape();
    if ts != student_logits.shape() || ts.len() != 2 {
        return Err(shape_err(
            "kd_kl_loss",
            format!("{:?} vs {:?}", ts, student_logits.shape()),
        ));
    }
    let batch = ts[0];
    let pt = ops::softmax_classes(teacher_logits)?;
    let lt = ops::log_softmax_classes(teacher_logits)?;
    let ls = ops::log_softmax_classes(student_logits)?;
    let diff = ops::sub(&lt, &ls)?;
    let contrib = ops::mul(&pt, &diff)?;
    ops::scale(&ops::sum_all(&contrib)?, 1.0 / batch as f64)
}

/// Mean cross-entropy of the logits' softmax against the given labels.
pub fn ce_loss<T: Scalar>(logits: &Value<T>, labels: &[u32]) -> Result<Value<T>> {
    let ls = ops::log_softmax_classes(logits)?;
    let picked = ops::gather_class(&ls, labels)?;
    ops::neg(&ops::mean_all(&picked)?)
}

/// Adversarial term of the generator objective: the negated distillation
/// divergence, so minimizing it maximizes teacher/student disagreement.
pub fn adv_loss<T: Scalar>(
    teacher_logits: &Value<T>,
    student_logits: &Value<T>,
) -> Result<Value<T>> {
    ops::neg(&kd_kl_loss(teacher_logits, student_logits)?)
}

// ------------------------------------------------------------ BN statistics

/// Sum over layers of ||batch_mean - running_mean||^2 + ||batch_var -
/// running_var||^2, computed from statistics captured on the teacher's
/// forward pass.
pub fn bn_reg_loss<T: Scalar>(captures: &[BnCapture<T>]) -> Result<Value<T>> {
    if captures.is_empty() {
        return Err(Error::InvalidArgument(
            "bn_reg_loss requires captured batch statistics from at least one layer".into(),
        ));
    }
    let mut total: Option<Value<T>> = None;
    for cap in captures {
        let rm = Value::constant(Tensor::from_parts(
            vec![cap.running_mean.len()],
            cap.running_mean.clone(),
        ));
        let rv = Value::constant(Tensor::from_parts(
            vec![cap.running_var.len()],
            cap.running_var.clone(),
        ));
        let dm = ops::sub(&cap.batch_mean, &rm)?;
        let dv = ops::sub(&cap.batch_var, &rv)?;
        let layer = ops::add(
            &ops::sum_all(&ops::mul(&dm, &dm)?)?,
            &ops::sum_all(&ops::mul(&dv, &dv)?)?,
        )?;
        total = Some(match total {
            Some(acc) => ops::add(&acc, &layer)?,
            None => layer,
        });
    }
    Ok(total.unwrap())
}

// -------------------------------------------------------------- CAM margin

/// Spatial template the latent activation map must sufficiently exceed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskKind {
    /// Constant fill value.
    Full(f64),
    /// Gaussian bump: peak value at the (possibly half-integer) spatial
    /// center, standard deviation sigma.
    Gaussian { peak: f64, sigma: f64 },
}

#[derive(Debug, Clone)]
pub struct TargetMask<T: Scalar> {
    pub kind: MaskKind,
    values: Tensor<T>,
}

impl<T: Scalar> TargetMask<T> {
    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn size(&self) -> (usize, usize) {
        (self.values.shape()[0], self.values.shape()[1])
    }
}

/// Build a target mask of the given spatial size.
pub fn build_target_mask<T: Scalar>(kind: MaskKind, size: (usize, usize)) -> Result<TargetMask<T>> {
    let (h, w) = size;
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("mask size {h}x{w} must be positive")));
    }
    let values = match kind {
        MaskKind::Full(n) => Tensor::full(&[h, w], cast(n)),
        MaskKind::Gaussian { peak, sigma } => {
            if sigma <= 0.0 {
                return Err(Error::InvalidArgument(format!("gaussian sigma {sigma} must be > 0")));
            }
            let cr = (h as f64 - 1.0) / 2.0;
            let cc = (w as f64 - 1.0) / 2.0;
            let mut data = Vec::with_capacity(h * w);
            for r in 0..h {
                for c in 0..w {
                    let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
                    data.push(cast::<T>(peak * (-d2 / (2.0 * sigma * sigma)).exp()));
                }
            }
            Tensor::from_parts(vec![h, w], data)
        }
    };
    Ok(TargetMask { kind, values })
}

/// Latent activation map of `x` under the teacher for the given classes,
/// before any normalization or interpolation: M = sum_k w_k^y * T_k.
pub fn cam_latent<T: Scalar>(
    teacher: &CnnModel<T>,
    x: &Value<T>,
    labels: &[u32],
) -> Result<Value<T>> {
    let fwd = teacher.forward(x, BnMode::Eval)?;
    cam_from_forward(teacher, &fwd, labels)
}

/// CAM from an existing forward pass, reusing its feature maps.
pub fn cam_from_forward<T: Scalar>(
    teacher: &CnnModel<T>,
    fwd: &CnnForward<T>,
    labels: &[u32],
) -> Result<Value<T>> {
    let feat_channels = fwd.features.shape()[1];
    if teacher.head.in_features() != feat_channels {
        return Err(Error::InvalidArgument(format!(
            "classification head consumes {} features but the trunk produces {}; \
             the latent activation map requires a single linear head over pooled features",
            teacher.head.in_features(),
            feat_channels
        )));
    }
    ops::cam_weighted_sum(&fwd.features, &teacher.head.weight, labels)
}

/// Mean over batch and spatial positions of max(0, mask - M).
pub fn cam_loss<T: Scalar>(m: &Value<T>, mask: &TargetMask<T>) -> Result<Value<T>> {
    let ms = m.shape();
    let (h, w) = mask.size();
    if ms.len() != 3 || ms[1] != h || ms[2] != w {
        return Err(shape_err(
            "cam_loss",
            format!("map {:?} vs mask {}x{}", ms, h, w),
        ));
    }
    let batch = ms[0];
    let mut tiled = Vec::with_capacity(batch * h * w);
    for _ in 0..batch {
        tiled.extend_from_slice(mask.values.data());
    }
    let target = Value::constant(Tensor::from_parts(vec![batch, h, w], tiled));
    let short = ops::sub(&target, m)?;
    ops::mean_all(&ops::relu(&short)?)
}

// ----------------------------------------------------- embedding diversity

fn per_sample_mse<T: Scalar>(emb: &Value<T>, targets: &Tensor<T>) -> Result<Value<T>> {
    let es = emb.shape();
    if es != targets.shape() {
        return Err(shape_err(
            "embedding_mse",
            format!(
                "embedding {:?} vs targets {:?} (projection/table width mismatch)",
                es,
                targets.shape()
            ),
        ));
    }
    let t = Value::constant(targets.clone());
    let d = ops::sub(emb, &t)?;
    ops::mean_rows(&ops::mul(&d, &d)?)
}

/// Student-side bounding loss: mean over batch of max(0, MSE(f, f_y) - r_i).
/// Zero whenever every embedding sits within the inner radius.
pub fn bounding_loss_ed<T: Scalar>(
    emb: &Value<T>,
    targets: &Tensor<T>,
    r_i: f64,
) -> Result<Value<T>> {
    let mse = per_sample_mse(emb, targets)?;
    ops::mean_all(&ops::relu(&ops::add_scalar(&mse, -r_i)?)?)
}

/// Generator-side margin loss: mean over batch of max(0, r_o - MSE(f, f_y)).
/// Zero whenever every embedding lies beyond the outer radius.
pub fn margin_loss_aed<T: Scalar>(
    emb: &Value<T>,
    targets: &Tensor<T>,
    r_o: f64,
) -> Result<Value<T>> {
    let mse = per_sample_mse(emb, targets)?;
    ops::mean_all(&ops::relu(&ops::add_scalar(&ops::neg(&mse)?, r_o)?)?)
}

// ------------------------------------------------------------- total losses

/// Which network supplies the embedding for the generator's margin loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AedEmbedding {
    Student,
    Teacher,
}

/// Unweighted values of the generator's sub-losses, for metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorLossTerms {
    pub ce: f64,
    pub adv: f64,
    pub bn: f64,
    pub cam: f64,
    pub aed: f64,
}

pub struct GeneratorLoss<T: Scalar> {
    pub total: Value<T>,
    pub terms: GeneratorLossTerms,
}

/// Combined generator objective:
/// alpha_ce*CE + alpha_adv*(-KL) + alpha_bn*BN + alpha_cam*CAM + alpha_aed*AED.
/// Teacher runs in stats-capture mode (running statistics untouched);
/// the student is frozen in eval mode.
#[allow(clippy::too_many_arguments)]
pub fn generator_total_loss<T: Scalar>(
    images: &Value<T>,
    labels: &[u32],
    teacher: &CnnModel<T>,
    student: &CnnModel<T>,
    table: &ClassEmbeddingTable<T>,
    weights: &LossWeights,
    mask: &TargetMask<T>,
    aed_embedding: AedEmbedding,
) -> Result<GeneratorLoss<T>> {
    weights.validate()?;
    let t_fwd = teacher.forward(images, BnMode::Capture)?;
    let s_fwd = student.forward(images, BnMode::Eval)?;

    let ce = ce_loss(&t_fwd.logits, labels)?;
    let adv = adv_loss(&t_fwd.logits, &s_fwd.logits)?;
    let bn = bn_reg_loss(&t_fwd.bn_captures)?;
    let m = cam_from_forward(teacher, &t_fwd, labels)?;
    let cam = cam_loss(&m, mask)?;
    let emb = match aed_embedding {
        AedEmbedding::Student => &s_fwd.embedding,
        AedEmbedding::Teacher => &t_fwd.embedding,
    };
    let targets = table.rows_for(labels)?;
    let aed = margin_loss_aed(emb, &targets, weights.r_o)?;

    let terms = GeneratorLossTerms {
        ce: ce.value().item().to_f64().unwrap(),
        adv: adv.value().item().to_f64().unwrap(),
        bn: bn.value().item().to_f64().unwrap(),
        cam: cam.value().item().to_f64().unwrap(),
        aed: aed.value().item().to_f64().unwrap(),
    };
    let mut total = ops::scale(&ce, weights.alpha_ce)?;
    total = ops::add(&total, &ops::scale(&adv, weights.alpha_adv)?)?;
    total = ops::add(&total, &ops::scale(&bn, weights.alpha_bn)?)?;
    total = ops::add(&total, &ops::scale(&cam, weights.alpha_cam)?)?;
    total = ops::add(&total, &ops::scale(&aed, weights.alpha_aed)?)?;
    Ok(GeneratorLoss { total, terms })
}

pub struct StudentLoss<T: Scalar> {
    pub total: Value<T>,
    pub kl: f64,
    pub ed: f64,
}

/// Combined student objective: KL + alpha_ed * bounding loss. The teacher
/// runs in eval mode; the student runs in training mode.
pub fn student_total_loss<T: Scalar>(
    images: &Value<T>,
    labels: &[u32],
    teacher: &CnnModel<T>,
    student: &CnnModel<T>,
    table: &ClassEmbeddingTable<T>,
    weights: &LossWeights,
) -> Result<StudentLoss<T>> {
    weights.validate()?;
    let t_fwd = teacher.forward(images, BnMode::Eval)?;
    let s_fwd = student.forward(images, BnMode::Train)?;
    let kl = kd_kl_loss(&t_fwd.logits, &s_fwd.logits)?;
    let targets = table.rows_for(labels)?;
    let ed = bounding_loss_ed(&s_fwd.embedding, &targets, weights.r_i)?;
    let kl_v = kl.value().item().to_f64().unwrap();
    let ed_v = ed.value().item().to_f64().unwrap();
    let total = ops::add(&kl, &ops::scale(&ed, weights.alpha_ed)?)?;
    Ok(StudentLoss { total, kl: kl_v, ed: ed_v })
}
