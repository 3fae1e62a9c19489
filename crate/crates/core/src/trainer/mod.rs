//! Training orchestration: alternating generator and student phases over a
//! budget-capped pool, schedules, evaluation, checkpoints and resume.

pub mod config;
pub mod metrics;
pub mod optim;
pub mod schedule;
pub mod teacher;

use std::path::Path;
use std::time::Instant;

use crate::diffcore::{backward, BnMode, Tensor, Value};
use crate::error::{Error, Result};
use crate::losses::{
    build_target_mask, generator_total_loss, student_total_loss, GeneratorLossTerms, LossWeights,
    TargetMask,
};
use crate::models::{
    class_centers_from_embeddings, derive_radii, generate_batch, load_embedding_table,
    min_pairwise_mse, ClassEmbeddingTable, CnnModel, CnnSpec, EmbeddingSource, Generator,
    GeneratorSpec, NoisyLayer, TensorSink,
};
use crate::pool::{budget_from_ratio, MemoryPool, SyntheticBatch};
use crate::rng::SplitMix64;

pub use config::{EmbeddingSourceConfig, RadiiConfig, TrainConfig};
pub use metrics::{MetricsLog, CSV_HEADER};
pub use schedule::{cosine_lr, lr_schedule};
pub use teacher::{
    load_teacher_checkpoint, save_teacher_checkpoint, train_teacher, TeacherTrainSettings,
};

/// A labeled image set in model layout: (N, 3, H, W) plus class indices.
pub struct LabeledImages {
    pub images: Tensor<f32>,
    pub labels: Vec<u32>,
    pub num_classes: usize,
}

impl LabeledImages {
    pub fn new(images: Tensor<f32>, labels: Vec<u32>, num_classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "labeled_images",
                detail: format!("images {:?} vs {} labels", s, labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(LabeledImages { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.images.shape()[2]
    }

    /// Collect the rows at `indices` into a fresh batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<u32>) {
        let s = self.images.shape();
        let px: usize = s[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * px);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * px..(i + 1) * px]);
            labels.push(self.labels[i]);
        }
        let mut shape = s.to_vec();
        shape[0] = indices.len();
        (Tensor::from_parts(shape, data), labels)
    }
}

/// Top-1 / top-k accuracy in percent, k = min(5, K). Ties broken by lower
/// class index, so the result is deterministic.
pub fn evaluate(model: &CnnModel<f32>, data: &LabeledImages, batch: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluate on an empty set".into()));
    }
    let k = data.num_classes.min(5);
    let (mut hit1, mut hitk) = (0usize, 0usize);
    let n = data.len();
    let mut start = 0usize;
    while start < n {
        let end = (start + batch).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (images, labels) = data.gather(&idx);
        let fwd = model.forward(&Value::constant(images), BnMode::Eval)?;
        let logits = fwd.logits.detach();
        let kk = logits.shape()[1];
        for (row, &y) in labels.iter().enumerate() {
            let scores = &logits.data()[row * kk..(row + 1) * kk];
            let mut order: Vec<usize> = (0..kk).collect();
            order.sort_by(|&a, &b| {
                scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
            });
            if order[0] == y as usize {
                hit1 += 1;
            }
            if order[..k].contains(&(y as usize)) {
                hitk += 1;
            }
        }
        start = end;
    }
    Ok((100.0 * hit1 as f64 / n as f64, 100.0 * hitk as f64 / n as f64))
}

/// Frozen teacher plus the dataset facts the budget model needs.
pub struct RunInputs {
    pub teacher: CnnModel<f32>,
    pub recorded_teacher_acc: f64,
    /// Real training-set cardinality N (budget capacity reference).
    pub dataset_size: u64,
    /// Full data resolution l in pixels.
    pub full_resolution: usize,
}

struct GenUnit {
    batch_size: usize,
    generator: Generator<f32>,
    noisy: NoisyLayer<f32>,
    opt: optim::Adam,
    mask: TargetMask<f32>,
    gen_param_count: usize,
}

impl GenUnit {
    fn params(&self) -> Vec<Value<f32>> {
        let mut ps = self.generator.parameters();
        ps.extend(self.noisy.parameters());
        ps
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    teacher: CnnModel<f32>,
    student: CnnModel<f32>,
    student_opt: optim::Adam,
    units: Vec<GenUnit>,
    pool: MemoryPool,
    table: Option<ClassEmbeddingTable<f32>>,
    radii: Option<(f64, f64)>,
    rng_gen: SplitMix64,
    bootstrap_seed: u64,
    label_deck: Vec<u32>,
    deck_pos: usize,
    epoch: usize,
    gen_step: usize,
    student_step: usize,
    metrics: MetricsLog,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, inputs: RunInputs, test: &LabeledImages) -> Result<Trainer> {
        cfg.validate()?;
        let RunInputs { teacher, recorded_teacher_acc, dataset_size, full_resolution } = inputs;
        let k = teacher.spec.num_classes;
        if test.num_classes != k {
            return Err(Error::InvalidArgument(format!(
                "teacher has {k} classes, test set has {}",
                test.num_classes
            )));
        }
        // Gate: the provided teacher must reproduce its recorded accuracy.
        let (measured, _) = evaluate(&teacher, test, cfg.eval_batch)?;
        if (measured - recorded_teacher_acc).abs() > 0.5 {
            return Err(Error::InvalidArgument(format!(
                "teacher checkpoint records {recorded_teacher_acc:.2}% but measures {measured:.2}% on the provided test set"
            )));
        }
        for &e in &cfg.resolutions {
            if e > full_resolution {
                return Err(Error::InvalidArgument(format!(
                    "resolution {e} exceeds full resolution {full_resolution}"
                )));
            }
            if e < teacher.spec.min_resolution() {
                return Err(Error::InvalidArgument(format!(
                    "resolution {e} below the teacher minimum {}",
                    teacher.spec.min_resolution()
                )));
            }
        }

        let mut master = SplitMix64::new(cfg.seed);
        let mut rng_init = master.fork();
        let rng_gen = master.fork();
        let pool_seed = master.next_u64();
        let bootstrap_seed = master.next_u64();

        // Class-representative table and radii, when knowable up front.
        let (table, embedding_dim) = match &cfg.embedding_source {
            EmbeddingSourceConfig::File(path) => {
                let t = load_embedding_table(path)?;
                if t.num_classes() != k {
                    return Err(Error::InvalidArgument(format!(
                        "embedding table has {} classes, teacher distinguishes {k}",
                        t.num_classes()
                    )));
                }
                let dim = t.dim();
                (Some(t), dim)
            }
            EmbeddingSourceConfig::ClassCenter => (None, teacher.spec.embed_dim),
        };
        let radii = match cfg.radii {
            RadiiConfig::Fixed { r_i, r_o } => Some((r_i, r_o)),
            RadiiConfig::Auto => match &table {
                Some(t) => Some(derive_radii(min_pairwise_mse(t)?)?),
                None => None, // resolved after the class-center bootstrap
            },
        };
        if cfg.aed_embedding == crate::losses::AedEmbedding::Teacher
            && teacher.spec.embed_dim != embedding_dim
        {
            return Err(Error::InvalidArgument(format!(
                "aed_embedding = teacher needs a teacher embedding of width {embedding_dim}, got {}",
                teacher.spec.embed_dim
            )));
        }

        let mut student_spec = CnnSpec::new(3, cfg.student_channels.clone(), k);
        student_spec.embed_dim = embedding_dim;
        student_spec.bn_momentum = cfg.bn_momentum;
        student_spec.bn_eps = cfg.bn_eps;
        let student = CnnModel::build(student_spec, &mut rng_init, true)?;
        for &e in &cfg.resolutions {
            if e < student.spec.min_resolution() {
                return Err(Error::InvalidArgument(format!(
                    "resolution {e} below the student minimum {}",
                    student.spec.min_resolution()
                )));
            }
        }
        let student_params = student.parameters();
        let student_opt = optim::Adam::new(&student_params, cfg.student_weight_decay);

        let mask_kind = cfg.parsed_mask_kind()?;
        let mut units = Vec::new();
        for (&e, &bsz) in cfg.resolutions.iter().zip(&cfg.batch_sizes) {
            let mut gspec = GeneratorSpec::new(e, embedding_dim);
            gspec.base_channels = cfg.gen_base_channels;
            gspec.bn_momentum = cfg.bn_momentum;
            gspec.bn_eps = cfg.bn_eps;
            let generator = Generator::build(gspec, &mut rng_init)?;
            let noisy = NoisyLayer::build(embedding_dim, rng_init.next_u64());
            let latent = teacher.spec.latent_size(e);
            if latent.0 == 0 {
                return Err(Error::InvalidArgument(format!(
                    "teacher latent size collapses to zero at resolution {e}"
                )));
            }
            let mask = build_target_mask(mask_kind, latent)?;
            let gen_param_count = generator.parameters().len();
            let mut params = generator.parameters();
            params.extend(noisy.parameters());
            let opt = optim::Adam::new(&params, 0.0);
            units.push(GenUnit { batch_size: bsz, generator, noisy, opt, mask, gen_param_count });
        }

        let capacity = budget_from_ratio(cfg.data_ratio, dataset_size)?;
        let pool = MemoryPool::new(full_resolution, capacity, pool_seed);

        Ok(Trainer {
            cfg,
            teacher,
            student,
            student_opt,
            units,
            pool,
            table,
            radii,
            rng_gen,
            bootstrap_seed,
            label_deck: Vec::new(),
            deck_pos: 0,
            epoch: 0,
            gen_step: 0,
            student_step: 0,
            metrics: MetricsLog::new(),
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn metrics(&self) -> &MetricsLog {
        &self.metrics
    }

    pub fn pool(&self) -> &MemoryPool {
        &self.pool
    }

    pub fn student(&self) -> &CnnModel<f32> {
        &self.student
    }

    pub fn teacher(&self) -> &CnnModel<f32> {
        &self.teacher
    }

    pub fn table(&self) -> Option<&ClassEmbeddingTable<f32>> {
        self.table.as_ref()
    }

    pub fn resolved_radii(&self) -> Option<(f64, f64)> {
        self.radii
    }

    fn weights(&self) -> Result<LossWeights> {
        let radii = self.radii.ok_or_else(|| {
            Error::InvalidArgument("radii not resolved before first use".into())
        })?;
        Ok(self.cfg.loss_weights_with(radii))
    }

    /// Balanced pseudo-label draw: a full shuffled permutation of the
    /// classes is consumed before any class repeats.
    fn next_labels(&mut self, n: usize) -> Vec<u32> {
        let k = self.teacher.spec.num_classes as u32;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            if self.deck_pos >= self.label_deck.len() {
                self.label_deck = (0..k).collect();
                self.rng_gen.shuffle(&mut self.label_deck);
                self.deck_pos = 0;
            }
            out.push(self.label_deck[self.deck_pos]);
            self.deck_pos += 1;
        }
        out
    }

    /// Class-center bootstrap: embed one balanced probe batch from the
    /// untrained generator under a throwaway random table, take per-class
    /// teacher means, freeze. Derives radii when configured auto.
    fn ensure_table(&mut self) -> Result<()> {
        if self.table.is_some() {
            return Ok(());
        }
        let k = self.teacher.spec.num_classes;
        let dim = self.units[0].generator.spec.embedding_dim;
        let mut rng = SplitMix64::new(self.bootstrap_seed);
        let mut probe_rows = Tensor::zeros(&[k, dim]);
        probe_rows.fill_uniform(&mut rng, 1.0);
        let probe_table = ClassEmbeddingTable::new(probe_rows, EmbeddingSource::ClassCenter)?;
        let n = self.units[0].batch_size.max(k);
        let labels: Vec<u32> = (0..n).map(|i| (i % k) as u32).collect();
        let unit = &mut self.units[0];
        let images =
            generate_batch(&mut unit.generator, &mut unit.noisy, &probe_table, &labels, BnMode::Eval)?;
        let fwd = self.teacher.forward(&images, BnMode::Eval)?;
        let table = class_centers_from_embeddings(&fwd.embedding.detach(), &labels, k)?;
        if self.radii.is_none() {
            self.radii = Some(derive_radii(min_pairwise_mse(&table)?)?);
        }
        self.table = Some(table);
        Ok(())
    }

    fn pool_units_f64(&self) -> f64 {
        let s = self.pool.ledger().spent;
        *s.numer() as f64 / *s.denom() as f64
    }

    /// Write whatever is known about a failing batch next to the run
    /// outputs, then return the original error.
    fn dump_diagnostic(&self, labels: &[u32], images: Option<Tensor<f32>>, err: Error) -> Error {
        let mut sink = TensorSink::new();
        sink.push_vec("diagnostic/labels".into(), &labels.iter().map(|&y| y as f32).collect::<Vec<_>>());
        if let Some(t) = images {
            sink.push("diagnostic/images".into(), t);
        }
        let dir = Path::new(&self.cfg.out_dir);
        if std::fs::create_dir_all(dir).is_ok() {
            let _ = sink.save(dir.join("diagnostic_batch.museckpt"));
        }
        err
    }

    /// One generator phase: I iterations of (reinit noisy layer, draw
    /// pseudo-labels, g optimization steps over every resolution), then the
    /// final-step batches join the pool. No-op once the budget is spent.
    pub fn generator_phase(&mut self) -> Result<()> {
        let t0 = Instant::now();
        if self.pool.exhausted() {
            let units_spent = self.pool_units_f64();
            let wall = self.wall(t0);
            self.metrics.push_generator_row(self.epoch, None, units_spent, wall);
            return Ok(());
        }
        self.ensure_table()?;
        let weights = self.weights()?;
        let total_gen_steps = self.cfg.epochs * self.cfg.iters_g * self.cfg.steps_g;
        let mut sums = GeneratorLossTerms { ce: 0.0, adv: 0.0, bn: 0.0, cam: 0.0, aed: 0.0 };
        let mut samples = 0usize;

        'iterations: for it in 0..self.cfg.iters_g {
            let mut unit_labels = Vec::with_capacity(self.units.len());
            for u in 0..self.units.len() {
                let seed = self.rng_gen.next_u64();
                self.units[u].noisy.reinit(seed);
                let start = self.units[u].gen_param_count;
                let end = start + self.units[u].noisy.parameters().len();
                self.units[u].opt.reset_slots(start..end);
                let n = self.units[u].batch_size;
                unit_labels.push(self.next_labels(n));
            }
            let mut finals: Vec<Option<Tensor<f32>>> = vec![None; self.units.len()];
            for step in 0..self.cfg.steps_g {
                let lr = lr_schedule(self.gen_step, total_gen_steps, self.cfg.gen_lr, self.cfg.warmup_frac);
                for u in 0..self.units.len() {
                    let labels = unit_labels[u].clone();
                    let table = self.table.as_ref().unwrap();
                    let unit = &mut self.units[u];
                    let result = (|| -> Result<_> {
                        let images = generate_batch(
                            &mut unit.generator,
                            &mut unit.noisy,
                            table,
                            &labels,
                            BnMode::Train,
                        )?;
                        let loss = generator_total_loss(
                            &images,
                            &labels,
                            &self.teacher,
                            &self.student,
                            table,
                            &weights,
                            &unit.mask,
                            self.cfg.aed_embedding,
                        )?;
                        Ok((images, loss))
                    })();
                    let (images, loss) = match result {
                        Ok(v) => v,
                        Err(e) => return Err(self.dump_diagnostic(&labels, None, e)),
                    };
                    let params = unit.params();
                    for p in &params {
                        p.zero_grad();
                    }
                    if let Err(e) = backward(&loss.total) {
                        let dump = images.detach();
                        return Err(self.dump_diagnostic(&labels, Some(dump), e));
                    }
                    unit.opt.step(&params, lr);
                    sums.ce += loss.terms.ce;
                    sums.adv += loss.terms.adv;
                    sums.bn += loss.terms.bn;
                    sums.cam += loss.terms.cam;
                    sums.aed += loss.terms.aed;
                    samples += 1;
                    if step + 1 == self.cfg.steps_g {
                        finals[u] = Some(images.detach());
                    }
                }
                self.gen_step += 1;
            }
            for (u, images) in finals.into_iter().enumerate() {
                if self.pool.exhausted() {
                    break;
                }
                let images = images.expect("final step always generates");
                let batch = SyntheticBatch::new(
                    images,
                    unit_labels[u].clone(),
                    self.epoch as u32,
                    it as u32,
                )?;
                self.pool.append(batch)?;
            }
            if self.pool.exhausted() {
                break 'iterations;
            }
        }
        let inv = 1.0 / samples.max(1) as f64;
        let terms = GeneratorLossTerms {
            ce: sums.ce * inv,
            adv: sums.adv * inv,
            bn: sums.bn * inv,
            cam: sums.cam * inv,
            aed: sums.aed * inv,
        };
        let units_spent = self.pool_units_f64();
        let wall = self.wall(t0);
        self.metrics.push_generator_row(self.epoch, Some(terms), units_spent, wall);
        Ok(())
    }

    /// One student phase: S pool minibatches against the distillation
    /// objective. The teacher is never touched.
    pub fn student_phase(&mut self) -> Result<()> {
        let t0 = Instant::now();
        if self.pool.is_empty() {
            return Err(Error::InvalidArgument(
                "student phase with an empty pool; run a generator phase first".into(),
            ));
        }
        self.ensure_table()?;
        let weights = self.weights()?;
        let s_steps = self.cfg.effective_s();
        let total_student_steps = self.cfg.epochs * s_steps;
        let params = self.student.parameters();
        let (mut kl_sum, mut ed_sum) = (0.0, 0.0);
        for _ in 0..s_steps {
            let lr = lr_schedule(
                self.student_step,
                total_student_steps,
                self.cfg.student_lr,
                self.cfg.warmup_frac,
            );
            let (images, labels, _res) = self.pool.sample(self.cfg.student_batch)?;
            let table = self.table.as_ref().unwrap();
            let loss = match student_total_loss(
                &Value::constant(images.clone()),
                &labels,
                &self.teacher,
                &self.student,
                table,
                &weights,
            ) {
                Ok(l) => l,
                Err(e) => return Err(self.dump_diagnostic(&labels, Some(images), e)),
            };
            for p in &params {
                p.zero_grad();
            }
            if let Err(e) = backward(&loss.total) {
                return Err(self.dump_diagnostic(&labels, Some(images), e));
            }
            self.student_opt.step(&params, lr);
            kl_sum += loss.kl;
            ed_sum += loss.ed;
            self.student_step += 1;
        }
        let inv = 1.0 / s_steps as f64;
        let units_spent = self.pool_units_f64();
        let wall = self.wall(t0);
        self.metrics.push_student_row(self.epoch, kl_sum * inv, ed_sum * inv, units_spent, wall);
        Ok(())
    }

    fn wall(&self, t0: Instant) -> f64 {
        if self.cfg.record_timing {
            t0.elapsed().as_secs_f64()
        } else {
            0.0
        }
    }

    /// Generator phase, student phase, then a full-resolution evaluation.
    pub fn run_epoch(&mut self, test: &LabeledImages) -> Result<()> {
        self.generator_phase()?;
        self.student_phase()?;
        let t0 = Instant::now();
        let (top1, top5) = evaluate(&self.student, test, self.cfg.eval_batch)?;
        let units_spent = self.pool_units_f64();
        let wall = self.wall(t0);
        self.metrics.push_eval_row(self.epoch, top1, top5, units_spent, wall);
        self.epoch += 1;
        Ok(())
    }

    /// Run the remaining epochs, snapshotting per the configuration.
    pub fn run_to_completion(&mut self, test: &LabeledImages) -> Result<()> {
        while self.epoch < self.cfg.epochs {
            self.run_epoch(test)?;
            if self.cfg.snapshot_every > 0 && self.epoch % self.cfg.snapshot_every == 0 {
                let dir = Path::new(&self.cfg.out_dir).join(format!("snapshot_epoch_{}", self.epoch));
                self.save_state(&dir)?;
            }
        }
        Ok(())
    }

    /// Persist the full training state (between epochs) for exact resume.
    pub fn save_state(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.pool.save(dir.join("pool.musepool"))?;
        let mut sink = TensorSink::new();
        sink.push_scalar("state/epoch".into(), self.epoch as f64);
        sink.push_u64("state/gen_step".into(), self.gen_step as u64);
        sink.push_u64("state/student_step".into(), self.student_step as u64);
        sink.push_u64("state/rng_gen".into(), self.rng_gen.state());
        sink.push_scalar("state/exhausted".into(), if self.pool.exhausted() { 1.0 } else { 0.0 });
        sink.push_vec("state/label_deck".into(), &self.label_deck.iter().map(|&v| v as f32).collect::<Vec<_>>());
        sink.push_scalar("state/deck_pos".into(), self.deck_pos as f64);
        if let Some((r_i, r_o)) = self.radii {
            sink.push_scalar("state/r_i".into(), r_i);
            sink.push_scalar("state/r_o".into(), r_o);
        }
        if let Some(t) = &self.table {
            sink.push("state/table".into(), t.data().clone());
            sink.push_scalar(
                "state/table_source".into(),
                match t.source {
                    EmbeddingSource::File => 0.0,
                    EmbeddingSource::ClassCenter => 1.0,
                },
            );
        }
        self.student.export_tensors("student", &mut sink);
        self.student_opt.export("opt/student", &mut sink);
        for (i, unit) in self.units.iter().enumerate() {
            unit.generator.export_tensors(&format!("gen{i}"), &mut sink);
            unit.noisy.export_tensors(&format!("noisy{i}"), &mut sink);
            unit.opt.export(&format!("opt/gen{i}"), &mut sink);
        }
        sink.save(dir.join("state.museckpt"))?;
        std::fs::write(dir.join("metrics.csv"), self.metrics.to_csv())?;
        Ok(())
    }

    /// Rebuild a trainer from a saved state directory. The continuation is
    /// bit-identical to the uninterrupted run.
    pub fn load_state(
        cfg: TrainConfig,
        inputs: RunInputs,
        test: &LabeledImages,
        dir: &Path,
    ) -> Result<Trainer> {
        let full_resolution = inputs.full_resolution;
        let mut t = Trainer::new(cfg, inputs, test)?;
        let sink = TensorSink::load(dir.join("state.museckpt"))?;
        let pool = MemoryPool::load(dir.join("pool.musepool"))?;
        pool.validate_base_resolution(full_resolution)?;
        t.pool = pool;
        t.pool.set_exhausted(sink.scalar("state/exhausted")? != 0.0);
        t.epoch = sink.scalar("state/epoch")? as usize;
        t.gen_step = sink.u64("state/gen_step")? as usize;
        t.student_step = sink.u64("state/student_step")? as usize;
        t.rng_gen = SplitMix64::from_state(sink.u64("state/rng_gen")?);
        t.label_deck = sink
            .require("state/label_deck")?
            .data()
            .iter()
            .map(|&v| v as u32)
            .collect();
        t.deck_pos = sink.scalar("state/deck_pos")? as usize;
        if let Ok(r_i) = sink.scalar("state/r_i") {
            t.radii = Some((r_i, sink.scalar("state/r_o")?));
        }
        if let Some(tensor) = sink.get("state/table") {
            let source = if sink.scalar("state/table_source")? == 0.0 {
                EmbeddingSource::File
            } else {
                EmbeddingSource::ClassCenter
            };
            t.table = Some(ClassEmbeddingTable::new(tensor.clone(), source)?);
        }
        t.student.import_tensors("student", &sink)?;
        t.student_opt.import("opt/student", &sink)?;
        for (i, unit) in t.units.iter_mut().enumerate() {
            unit.generator.import_tensors(&format!("gen{i}"), &sink)?;
            unit.noisy.import_tensors(&format!("noisy{i}"), &sink)?;
            unit.opt.import(&format!("opt/gen{i}"), &sink)?;
        }
        let metrics_text = std::fs::read_to_string(dir.join("metrics.csv"))?;
        t.metrics = MetricsLog::from_csv(&metrics_text)?;
        Ok(t)
    }

    /// Test-support hook: append a prebuilt batch directly to the pool.
    pub fn debug_append(&mut self, batch: SyntheticBatch) -> Result<()> {
        self.pool.append(batch)?;
        Ok(())
    }

    /// Export the final student as a standalone checkpoint.
    pub fn save_student_checkpoint(&self, path: &Path, top1: f64) -> Result<()> {
        save_teacher_checkpoint(&self.student, top1, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::parse_ratio;

    /// Ten-class toy task: class y has a bright strip at row y mod 8.
    fn toy_data(n: usize, k: usize, res: usize, seed: u64) -> LabeledImages {
        let mut rng = SplitMix64::new(seed);
        let mut data = Vec::with_capacity(n * 3 * res * res);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = (i % k) as u32;
            let strip = y as usize % res;
            for _c in 0..3 {
                for r in 0..res {
                    for _x in 0..res {
                        let base = if r == strip { 0.8 } else { -0.2 };
                        data.push((base + rng.uniform(-0.05, 0.05)) as f32);
                    }
                }
            }
            labels.push(y);
        }
        LabeledImages::new(Tensor::from_parts(vec![n, 3, res, res], data), labels, k).unwrap()
    }

    fn toy_teacher(train: &LabeledImages, test: &LabeledImages) -> (CnnModel<f32>, f64) {
        let settings = TeacherTrainSettings {
            epochs: 3,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch: 16,
            seed: 5,
            subset: 0,
        };
        let spec = CnnSpec::new(3, vec![4, 8], train.num_classes);
        train_teacher(spec, &settings, train, test).unwrap()
    }

    fn tiny_config(seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.epochs = 2;
        cfg.iters_g = 1;
        cfg.steps_g = 2;
        cfg.iters_s = 5;
        cfg.resolutions = vec![8];
        cfg.batch_sizes = vec![4];
        cfg.data_ratio = parse_ratio("1").unwrap();
        cfg.seed = seed;
        cfg.student_batch = 4;
        cfg.gen_base_channels = 8;
        cfg.teacher_channels = vec![4, 8];
        cfg.student_channels = vec![4, 8];
        cfg.eval_batch = 32;
        cfg.dataset = "toy".into();
        cfg.out_dir = std::env::temp_dir()
            .join(format!("muse_trainer_{}_{}", std::process::id(), seed))
            .to_string_lossy()
            .into_owned();
        cfg
    }

    fn inputs_for(teacher_path: &std::path::Path, n: u64, l: usize) -> RunInputs {
        let (teacher, acc) = load_teacher_checkpoint(teacher_path).unwrap();
        RunInputs {
            teacher,
            recorded_teacher_acc: acc,
            dataset_size: n,
            full_resolution: l,
        }
    }

    struct Setup {
        dir: std::path::PathBuf,
        teacher_path: std::path::PathBuf,
        test: LabeledImages,
    }

    fn setup(name: &str) -> Setup {
        let dir = std::env::temp_dir().join(format!("muse_tr_{}_{}", name, std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let train = toy_data(64, 4, 8, 1);
        let test = toy_data(32, 4, 8, 2);
        let (teacher, acc) = toy_teacher(&train, &test);
        let teacher_path = dir.join("teacher.museckpt");
        save_teacher_checkpoint(&teacher, acc, &teacher_path).unwrap();
        Setup { dir, teacher_path, test }
    }

    #[test]
    fn single_iteration_appends_exactly_one_batch() {
        let s = setup("count");
        let mut cfg = tiny_config(1);
        cfg.epochs = 1;
        cfg.steps_g = 1;
        let mut t = Trainer::new(cfg, inputs_for(&s.teacher_path, 64, 8), &s.test).unwrap();
        t.generator_phase().unwrap();
        assert_eq!(t.pool().image_count(), 4);
        std::fs::remove_dir_all(&s.dir).ok();
    }

    #[test]
    fn zero_alpha_weights_leave_generator_unchanged() {
        let s = setup("zeroalpha");
        let mut cfg = tiny_config(2);
        cfg.alpha_ce = 0.0;
        cfg.alpha_adv = 0.0;
        cfg.alpha_bn = 0.0;
        cfg.alpha_cam = 0.0;
        cfg.alpha_ed = 0.0;
        cfg.alpha_aed = 0.0;
        let mut t = Trainer::new(cfg, inputs_for(&s.teacher_path, 64, 8), &s.test).unwrap();
        let before: Vec<Tensor<f32>> =
            t.units[0].generator.parameters().iter().map(|p| p.detach()).collect();
        t.generator_phase().unwrap();
        let after: Vec<Tensor<f32>> =
            t.units[0].generator.parameters().iter().map(|p| p.detach()).collect();
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a.data(), b.data());
        }
        std::fs::remove_dir_all(&s.dir).ok();
    }

    #[test]
    fn teacher_parameters_frozen_through_full_run() {
        let s = setup("frozen");
        let cfg = tiny_config(3);
        let mut t = Trainer::new(cfg, inputs_for(&s.teacher_path, 64, 8), &s.test).unwrap();
        let hash_before = t.teacher().parameter_hash();
        t.run_to_completion(&s.test).unwrap();
        assert_eq!(t.teacher().parameter_hash(), hash_before);
        std::fs::remove_dir_all(&s.dir).ok();
    }

    #[test]
    fn zero_learning_rate_freezes_student() {
        let s = setup("zerolr");
        let mut cfg = tiny_config(4);
        cfg.student_lr = 0.0;
        cfg.student_weight_decay = 0.0;
        let mut t = Trainer::new(cfg, inputs_for(&s.teacher_path, 64, 8), &s.test).unwrap();
        // learnable parameters only; running statistics move in train mode
        let before: Vec<Tensor<f32>> = t.student().parameters().iter().map(|p| p.detach()).collect();
        t.generator_phase().unwrap();
        t.student_phase().unwrap();
        for (a, p) in before.iter().zip(t.student().parameters()) {
            assert_eq!(a.data(), p.detach().data());
        }
        std::fs::remove_dir_all(&s.dir).ok();
    }

    #[test]
    fn metrics_row_count_is_three_per_epoch() {
        let s = setup("rows");
        let cfg = tiny_config(5);
        let epochs = cfg.epochs;
        let mut t = Trainer::new(cfg, inputs_for(&s.teacher_path, 64, 8), &s.test).unwrap();
        t.run_to_completion(&s.test).unwrap();
        assert_eq!(t.metrics().row_count(), 3 * epochs);
        std::fs::remove_dir_all(&s.dir).ok();
    }

    #[test]
    fn identical_seeds_give_byte_identical_metrics() {
        let s = setup("determinism");
        let run = || {
            let cfg = tiny_config(7);
            let mut t =
                Trainer::new(cfg, inputs_for(&s.teacher_path, 64, 8), &s.test).unwrap();
            t.run_to_completion(&s.test).unwrap();
            t.metrics().to_csv()
        };
        assert_eq!(run(), run());
        std::fs::remove_dir_all(&s.dir).ok();
    }

    #[test]
    fn resumed_run_matches_uninterrupted_byte_for_byte() {
        let s = setup("resume");
        let full_csv = {
            let cfg = tiny_config(9);
            let mut t =
                Trainer::new(cfg, inputs_for(&s.teacher_path, 64, 8), &s.test).unwrap();
            t.run_to_completion(&s.test).unwrap();
            t.metrics().to_csv()
        };
        let state_dir = s.dir.join("state");
        {
            let cfg = tiny_config(9);
            let mut t =
                Trainer::new(cfg, inputs_for(&s.teacher_path, 64, 8), &s.test).unwrap();
            t.run_epoch(&s.test).unwrap();
            t.save_state(&state_dir).unwrap();
        }
        let resumed_csv = {
            let cfg = tiny_config(9);
            let mut t = Trainer::load_state(
                cfg,
                inputs_for(&s.teacher_path, 64, 8),
                &s.test,
                &state_dir,
            )
            .unwrap();
            assert_eq!(t.epoch(), 1);
            t.run_to_completion(&s.test).unwrap();
            t.metrics().to_csv()
        };
        assert_eq!(full_csv, resumed_csv);
        std::fs::remove_dir_all(&s.dir).ok();
    }

    #[test]
    fn budget_exhaustion_turns_generator_phase_into_noop() {
        let s = setup("budget");
        let mut cfg = tiny_config(11);
        cfg.epochs = 3;
        cfg.iters_s = 80; // effective S = 80/16 = 5
        // capacity = 4/64 of 64 images: one 8px batch of 4 at l=8 costs 4 units
        cfg.data_ratio = parse_ratio("4/64").unwrap();
        let mut t = Trainer::new(cfg, inputs_for(&s.teacher_path, 64, 8), &s.test).unwrap();
        t.run_to_completion(&s.test).unwrap();
        assert!(t.pool().exhausted());
        assert_eq!(t.pool().image_count(), 4);
        let csv = t.metrics().to_csv();
        // later generator rows have empty loss cells
        let noop_rows: Vec<&str> = csv
            .lines()
            .filter(|l| l.contains(",generator,,,,,,"))
            .collect();
        assert_eq!(noop_rows.len(), 2, "{csv}");
        std::fs::remove_dir_all(&s.dir).ok();
    }

    #[test]
    fn wrong_teacher_accuracy_gate_rejects() {
        let s = setup("gate");
        let cfg = tiny_config(13);
        let mut inputs = inputs_for(&s.teacher_path, 64, 8);
        inputs.recorded_teacher_acc -= 10.0;
        assert!(Trainer::new(cfg, inputs, &s.test).is_err());
        std::fs::remove_dir_all(&s.dir).ok();
    }

    #[test]
    fn evaluate_perfect_and_handcount_fixtures() {
        // a model is a perfect oracle on data labeled by its own argmax
        let mut rng = SplitMix64::new(17);
        let model =
            CnnModel::<f32>::build(CnnSpec::new(3, vec![4, 6], 10), &mut rng, false).unwrap();
        let mut imgs = Tensor::zeros(&[10, 3, 8, 8]);
        imgs.fill_uniform(&mut rng, 1.0);
        let fwd = model.forward(&Value::constant(imgs.clone()), BnMode::Eval).unwrap();
        let logits = fwd.logits.detach();
        let labels: Vec<u32> = (0..10)
            .map(|r| {
                let row = &logits.data()[r * 10..(r + 1) * 10];
                (0..10).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap() as u32
            })
            .collect();
        let data = LabeledImages::new(imgs.clone(), labels.clone(), 10).unwrap();
        let (t1, t5) = evaluate(&model, &data, 4).unwrap();
        assert_eq!((t1, t5), (100.0, 100.0));

        // hand-counted oracle on deliberately wrong labels
        let wrong: Vec<u32> = labels.iter().map(|&y| (y + 1) % 10).collect();
        let data = LabeledImages::new(imgs, wrong.clone(), 10).unwrap();
        let (t1, t5) = evaluate(&model, &data, 3).unwrap();
        let mut hand1 = 0;
        let mut hand5 = 0;
        for (r, &y) in wrong.iter().enumerate() {
            let row = &logits.data()[r * 10..(r + 1) * 10];
            let mut idx: Vec<usize> = (0..10).collect();
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            if idx[0] == y as usize {
                hand1 += 1;
            }
            if idx[..5].contains(&(y as usize)) {
                hand5 += 1;
            }
        }
        assert_eq!(t1, 100.0 * hand1 as f64 / 10.0);
        assert_eq!(t5, 100.0 * hand5 as f64 / 10.0);
        assert!(t5 >= t1);

        // two classes: top-min(5, K) is exhaustive
        let mut rng = SplitMix64::new(21);
        let model2 =
            CnnModel::<f32>::build(CnnSpec::new(3, vec![4, 4], 2), &mut rng, false).unwrap();
        let mut imgs2 = Tensor::zeros(&[6, 3, 8, 8]);
        imgs2.fill_uniform(&mut rng, 1.0);
        let data2 = LabeledImages::new(imgs2, vec![0, 1, 0, 1, 0, 1], 2).unwrap();
        let (_, t2) = evaluate(&model2, &data2, 6).unwrap();
        assert_eq!(t2, 100.0);
    }
}
