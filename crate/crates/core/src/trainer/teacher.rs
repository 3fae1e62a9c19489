//! Supervised teacher pretraining and teacher checkpoint I/O. The
//! checkpoint records the architecture and the final test accuracy so a
//! distillation run can verify the teacher it was handed.

use crate::diffcore::{BnMode, Value};
use crate::error::{Error, Result};
use crate::losses::ce_loss;
use crate::models::{CnnModel, CnnSpec, TensorSink};
use crate::rng::SplitMix64;

use super::optim::SgdMomentum;
use super::schedule::cosine_lr;
use super::{evaluate, LabeledImages};

/// Settings for supervised pretraining.
#[derive(Debug, Clone)]
pub struct TeacherTrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub seed: u64,
    /// Train on a seeded random subset of this size; 0 uses everything.
    pub subset: usize,
}

/// Train a classifier with momentum SGD under a cosine-annealed learning
/// rate. Returns the model and its final test accuracy (top-1 percent).
pub fn train_teacher(
    spec: CnnSpec,
    settings: &TeacherTrainSettings,
    train: &LabeledImages,
    test: &LabeledImages,
) -> Result<(CnnModel<f32>, f64)> {
    if settings.batch < 2 {
        return Err(Error::InvalidArgument("teacher batch must be >= 2".into()));
    }
    let mut rng = SplitMix64::new(settings.seed);
    let model = CnnModel::<f32>::build(spec, &mut rng, true)?;
    let params = model.parameters();
    let mut opt = SgdMomentum::new(&params, settings.momentum, settings.weight_decay);

    let mut indices: Vec<usize> = (0..train.len()).collect();
    if settings.subset > 0 && settings.subset < indices.len() {
        rng.shuffle(&mut indices);
        indices.truncate(settings.subset);
    }
    let n = indices.len();
    let batches_per_epoch = n.div_ceil(settings.batch);
    let total_steps = settings.epochs * batches_per_epoch;
    let mut step = 0usize;

    for epoch in 0..settings.epochs {
        rng.shuffle(&mut indices);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in indices.chunks(settings.batch) {
            if chunk.len() < 2 {
                step += 1;
                continue; // batchnorm needs at least two samples
            }
            let (images, labels) = train.gather(chunk);
            let fwd = model.forward(&Value::constant(images), BnMode::Train)?;
            let loss = ce_loss(&fwd.logits, &labels)?;
            epoch_loss += loss.value().item() as f64 * chunk.len() as f64;
            seen += chunk.len();
            for p in &params {
                p.zero_grad();
            }
            crate::diffcore::backward(&loss)?;
            opt.step(&params, cosine_lr(step, total_steps, settings.lr));
            step += 1;
        }
        let (top1, _) = evaluate(&model, test, 256)?;
        println!(
            "teacher epoch {epoch}: train loss {:.4}, test top1 {top1:.2}",
            epoch_loss / seen.max(1) as f64
        );
    }
    let (top1, _) = evaluate(&model, test, 256)?;
    Ok((model, top1))
}

/// Write a teacher checkpoint: parameters plus architecture and accuracy
/// metadata.
pub fn save_teacher_checkpoint(
    model: &CnnModel<f32>,
    test_acc: f64,
    path: &std::path::Path,
) -> Result<()> {
    let mut sink = TensorSink::new();
    let spec = &model.spec;
    sink.push_scalar("meta/in_channels".into(), spec.in_channels as f64);
    sink.push_vec("meta/channels".into(), &spec.channels.iter().map(|&c| c as f32).collect::<Vec<_>>());
    sink.push_scalar("meta/num_classes".into(), spec.num_classes as f64);
    sink.push_scalar("meta/embed_dim".into(), spec.embed_dim as f64);
    sink.push_scalar("meta/bn_momentum".into(), spec.bn_momentum);
    sink.push_scalar("meta/bn_eps".into(), spec.bn_eps);
    sink.push_scalar("meta/test_acc".into(), test_acc);
    model.export_tensors("teacher", &mut sink);
    sink.save(path)
}

/// Load a teacher checkpoint as a frozen model plus its recorded accuracy.
pub fn load_teacher_checkpoint(path: &std::path::Path) -> Result<(CnnModel<f32>, f64)> {
    let sink = TensorSink::load(path)?;
    let channels: Vec<usize> = sink
        .require("meta/channels")?
        .data()
        .iter()
        .map(|&c| c as usize)
        .collect();
    let mut spec = CnnSpec::new(sink.scalar("meta/in_channels")? as usize, channels, sink.scalar("meta/num_classes")? as usize);
    spec.embed_dim = sink.scalar("meta/embed_dim")? as usize;
    spec.bn_momentum = sink.scalar("meta/bn_momentum")?;
    spec.bn_eps = sink.scalar("meta/bn_eps")?;
    // the seed is irrelevant: every tensor is overwritten by the import
    let mut model = CnnModel::<f32>::build(spec, &mut SplitMix64::new(0), false)?;
    model.import_tensors("teacher", &sink)?;
    let acc = sink.scalar("meta/test_acc")?;
    Ok((model, acc))
}
