//! Scratch harness for tuning the desk-scale configs; run explicitly:
//! cargo test -p muse-cli --test scratch_tune -- --ignored --nocapture

use std::path::PathBuf;
use std::time::Instant;

use muse_cli::dataset::{dataset_len, load_dataset, to_model_input, DatasetHandle, Split};
use muse_cli::synth;
use muse_core::models::CnnSpec;
use muse_core::pool::parse_ratio;
use muse_core::trainer::{
    evaluate, load_teacher_checkpoint, save_teacher_checkpoint, train_teacher, RunInputs,
    TeacherTrainSettings, TrainConfig, Trainer,
};

fn workspace() -> (PathBuf, f64) {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("tune_ws");
    std::fs::create_dir_all(&dir).unwrap();
    let data_dir = dir.join("data");
    let teacher_path = dir.join("teacher.museckpt");
    if !teacher_path.exists() {
        synth::write_task(&data_dir, 10000, 2000, 2024).unwrap();
        let train = to_model_input(
            load_dataset(&DatasetHandle::for_dataset("mnist", Split::Train).unwrap(), &data_dir)
                .unwrap(),
        )
        .unwrap();
        let test = to_model_input(
            load_dataset(&DatasetHandle::for_dataset("mnist", Split::Test).unwrap(), &data_dir)
                .unwrap(),
        )
        .unwrap();
        let t0 = Instant::now();
        let (teacher, acc) = train_teacher(
            CnnSpec::new(3, vec![16, 32, 32], 10),
            &TeacherTrainSettings {
                epochs: 3,
                lr: 0.1,
                momentum: 0.9,
                weight_decay: 5e-4,
                batch: 128,
                seed: 7,
                subset: 0,
            },
            &train,
            &test,
        )
        .unwrap();
        println!("teacher acc {acc:.2} in {:.1}s", t0.elapsed().as_secs_f64());
        save_teacher_checkpoint(&teacher, acc, &teacher_path).unwrap();
    }
    let (_, acc) = load_teacher_checkpoint(&teacher_path).unwrap();
    (dir, acc)
}

fn base_config(dir: &PathBuf, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.epochs = 16;
    cfg.iters_g = 1;
    cfg.steps_g = 80;
    cfg.iters_s = 2000;
    cfg.resolutions = vec![16, 20];
    cfg.batch_sizes = vec![32, 24];
    cfg.data_ratio = parse_ratio("0.02").unwrap();
    cfg.seed = seed;
    cfg.threads = 4;
    cfg.student_batch = 128;
    cfg.gen_base_channels = 32;
    cfg.teacher_channels = vec![16, 32, 32];
    cfg.student_channels = vec![8, 16, 32];
    cfg.embedding_source = muse_core::trainer::EmbeddingSourceConfig::File(
        concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/reference_embeddings.museemb")
            .to_string(),
    );
    cfg.dataset = "mnist".into();
    cfg.data_dir = dir.join("data").to_string_lossy().into_owned();
    cfg.teacher_ckpt = dir.join("teacher.museckpt").to_string_lossy().into_owned();
    cfg.out_dir = dir.join(format!("out_{seed}")).to_string_lossy().into_owned();
    cfg
}

fn run(cfg: TrainConfig, dir: &PathBuf) -> (f64, f64) {
    let data_dir = dir.join("data");
    let handle = DatasetHandle::for_dataset("mnist", Split::Train).unwrap();
    let n = dataset_len(&handle, &data_dir).unwrap();
    let test = to_model_input(
        load_dataset(&DatasetHandle::for_dataset("mnist", Split::Test).unwrap(), &data_dir)
            .unwrap(),
    )
    .unwrap();
    let (teacher, acc) = load_teacher_checkpoint(&dir.join("teacher.museckpt")).unwrap();
    let inputs = RunInputs {
        teacher,
        recorded_teacher_acc: acc,
        dataset_size: n,
        full_resolution: 28,
    };
    let t0 = Instant::now();
    let mut tr = Trainer::new(cfg, inputs, &test).unwrap();
    tr.run_to_completion(&test).unwrap();
    let (top1, _) = evaluate(tr.student(), &test, 256).unwrap();
    let wall = t0.elapsed().as_secs_f64();
    (top1, wall)
}

#[test]
#[ignore]
fn tune_muse() {
    let _ = rayon::ThreadPoolBuilder::new().num_threads(4).build_global();
    let (dir, teacher_acc) = workspace();
    println!("teacher {teacher_acc:.2}");
    let cfg = base_config(&dir, 42);
    let (top1, wall) = run(cfg, &dir);
    println!("MUSE seed42: top1 {top1:.2} wall {wall:.1}s");
}

#[test]
#[ignore]
fn tune_baseline() {
    let _ = rayon::ThreadPoolBuilder::new().num_threads(4).build_global();
    let (dir, _) = workspace();
    let mut cfg = base_config(&dir, 42);
    cfg.resolutions = vec![28];
    cfg.batch_sizes = vec![24];
    cfg.alpha_cam = 0.0;
    cfg.alpha_ed = 0.0;
    cfg.alpha_aed = 0.0;
    let (top1, wall) = run(cfg, &dir);
    println!("BASELINE seed42: top1 {top1:.2} wall {wall:.1}s");
}

#[test]
#[ignore]
fn diagnose() {
    let _ = rayon::ThreadPoolBuilder::new().num_threads(4).build_global();
    let (dir, _) = workspace();
    let mut cfg = base_config(&dir, 42);
    cfg.epochs = 16;
    let data_dir = dir.join("data");
    let handle = DatasetHandle::for_dataset("mnist", Split::Train).unwrap();
    let n = dataset_len(&handle, &data_dir).unwrap();
    let test = to_model_input(
        load_dataset(&DatasetHandle::for_dataset("mnist", Split::Test).unwrap(), &data_dir)
            .unwrap(),
    )
    .unwrap();
    let (teacher, acc) = load_teacher_checkpoint(&dir.join("teacher.museckpt")).unwrap();
    let inputs = RunInputs {
        teacher,
        recorded_teacher_acc: acc,
        dataset_size: n,
        full_resolution: 28,
    };
    let mut tr = Trainer::new(cfg, inputs, &test).unwrap();
    tr.run_to_completion(&test).unwrap();
    println!("{}", tr.metrics().to_csv());
    // teacher vs pseudo-labels on pool content
    use muse_core::diffcore::{BnMode, Value};
    let mut agree = 0usize;
    let mut total = 0usize;
    let mut teacher_conf = 0.0f64;
    for b in tr.pool().batches().iter().take(4) {
        let fwd = tr.teacher().forward(&Value::constant(b.images.clone()), BnMode::Eval).unwrap();
        let logits = fwd.logits.detach();
        let k = logits.shape()[1];
        for (i, &y) in b.labels.iter().enumerate() {
            let row = &logits.data()[i * k..(i + 1) * k];
            let arg = (0..k).max_by(|&a, &c| row[a].partial_cmp(&row[c]).unwrap()).unwrap();
            // softmax confidence of argmax
            let m = row.iter().cloned().fold(f32::MIN, f32::max);
            let z: f32 = row.iter().map(|v| (v - m).exp()).sum();
            teacher_conf += (1.0 / z) as f64;
            if arg == y as usize {
                agree += 1;
            }
            total += 1;
        }
    }
    println!("teacher-argmax agrees with pseudo-label: {agree}/{total}, mean max-prob {:.3}", teacher_conf / total as f64);
    // student prediction histogram on test
    let fwd = tr
        .student()
        .forward(&Value::constant(test.gather(&(0..200).collect::<Vec<_>>()).0), BnMode::Eval)
        .unwrap();
    let logits = fwd.logits.detach();
    let mut hist = [0usize; 10];
    for i in 0..200 {
        let row = &logits.data()[i * 10..(i + 1) * 10];
        let arg = (0..10).max_by(|&a, &c| row[a].partial_cmp(&row[c]).unwrap()).unwrap();
        hist[arg] += 1;
    }
    println!("student argmax histogram on test: {hist:?}");
}

#[test]
#[ignore]
fn kd_sanity_on_real_images() {
    // Fill the pool with real training images; if the student cannot learn
    // from teacher targets on real data, the KD path itself is broken.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(4).build_global();
    let (dir, _) = workspace();
    let mut cfg = base_config(&dir, 42);
    cfg.epochs = 6;
    cfg.resolutions = vec![28];
    cfg.batch_sizes = vec![50];
    cfg.data_ratio = parse_ratio("0.05").unwrap(); // 500 units
    let data_dir = dir.join("data");
    let handle = DatasetHandle::for_dataset("mnist", Split::Train).unwrap();
    let n = dataset_len(&handle, &data_dir).unwrap();
    let train = to_model_input(load_dataset(&handle, &data_dir).unwrap()).unwrap();
    let test = to_model_input(
        load_dataset(&DatasetHandle::for_dataset("mnist", Split::Test).unwrap(), &data_dir)
            .unwrap(),
    )
    .unwrap();
    let (teacher, acc) = load_teacher_checkpoint(&dir.join("teacher.museckpt")).unwrap();
    let inputs = RunInputs { teacher, recorded_teacher_acc: acc, dataset_size: n, full_resolution: 28 };
    let mut tr = Trainer::new(cfg, inputs, &test).unwrap();
    // bypass generation: append 500 real images
    use muse_core::pool::SyntheticBatch;
    for chunk_start in (0..500).step_by(50) {
        let idx: Vec<usize> = (chunk_start..chunk_start + 50).collect();
        let (images, labels) = train.gather(&idx);
        tr.debug_append(SyntheticBatch::new(images, labels, 0, 0).unwrap()).unwrap();
    }
    for _ in 0..6 {
        tr.student_phase().unwrap();
        let (top1, _) = evaluate(tr.student(), &test, 256).unwrap();
        println!("student top1 {top1:.2}");
    }
    println!("{}", tr.metrics().to_csv());
}

#[test]
#[ignore]
fn generator_fidelity_probe() {
    let _ = rayon::ThreadPoolBuilder::new().num_threads(4).build_global();
    let (dir, _) = workspace();
    let data_dir = dir.join("data");
    let (teacher, _) = load_teacher_checkpoint(&dir.join("teacher.museckpt")).unwrap();
    let _test = to_model_input(
        load_dataset(&DatasetHandle::for_dataset("mnist", Split::Test).unwrap(), &data_dir)
            .unwrap(),
    )
    .unwrap();
    use muse_core::diffcore::{backward, BnMode, Value};
    use muse_core::losses::*;
    use muse_core::models::*;
    use muse_core::rng::SplitMix64;
    use muse_core::trainer::optim::Adam;

    let table = load_embedding_table(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../fixtures/reference_embeddings.museemb"
    ))
    .unwrap();
    let mut rng = SplitMix64::new(9);
    let mut gspec = GeneratorSpec::new(20, 32);
    gspec.base_channels = 32;
    let mut gen = Generator::<f32>::build(gspec, &mut rng).unwrap();
    let mut noisy = NoisyLayer::<f32>::build(32, 11);
    let mut student_spec = CnnSpec::new(3, vec![8, 16, 32], 10);
    student_spec.embed_dim = 32;
    let student = CnnModel::<f32>::build(student_spec, &mut rng, true).unwrap();
    let weights = LossWeights::default();
    let mask = build_target_mask(MaskKind::Full(1.0), teacher.spec.latent_size(20)).unwrap();
    let labels: Vec<u32> = (0..48u32).map(|i| i % 10).collect();
    let mut params = gen.parameters();
    params.extend(noisy.parameters());
    let mut opt = Adam::new(&params, 0.0);
    for step in 0..400 {
        // fresh noisy layer every 80 steps, like one iteration boundary
        if step % 80 == 0 && step > 0 {
            noisy.reinit(1000 + step as u64);
        }
        let imgs = generate_batch(&mut gen, &mut noisy, &table, &labels, BnMode::Train).unwrap();
        let loss = generator_total_loss(
            &imgs, &labels, &teacher, &student, &table, &weights, &mask, AedEmbedding::Student,
        )
        .unwrap();
        for p in &params {
            p.zero_grad();
        }
        backward(&loss.total).unwrap();
        opt.step(&params, 4e-3);
        if step % 40 == 39 || step == 0 {
            let fwd = teacher.forward(&Value::constant(imgs.detach()), BnMode::Eval).unwrap();
            let logits = fwd.logits.detach();
            let mut agree = 0;
            for (i, &y) in labels.iter().enumerate() {
                let row = &logits.data()[i * 10..(i + 1) * 10];
                let arg = (0..10).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
                if arg == y as usize {
                    agree += 1;
                }
            }
            println!(
                "step {step}: ce {:.3} adv {:.3} bn {:.3} cam {:.3} aed {:.4} agree {agree}/48",
                loss.terms.ce, loss.terms.adv, loss.terms.bn, loss.terms.cam, loss.terms.aed
            );
        }
    }
}

#[test]
#[ignore]
fn domain_gap_probe() {
    let _ = rayon::ThreadPoolBuilder::new().num_threads(4).build_global();
    let (dir, _) = workspace();
    let mut cfg = base_config(&dir, 42);
    cfg.epochs = 10;
    let data_dir = dir.join("data");
    let handle = DatasetHandle::for_dataset("mnist", Split::Train).unwrap();
    let n = dataset_len(&handle, &data_dir).unwrap();
    let test = to_model_input(
        load_dataset(&DatasetHandle::for_dataset("mnist", Split::Test).unwrap(), &data_dir)
            .unwrap(),
    )
    .unwrap();
    let (teacher, acc) = load_teacher_checkpoint(&dir.join("teacher.museckpt")).unwrap();
    let inputs = RunInputs { teacher, recorded_teacher_acc: acc, dataset_size: n, full_resolution: 28 };
    let mut tr = Trainer::new(cfg, inputs, &test).unwrap();
    tr.run_to_completion(&test).unwrap();
    use muse_core::diffcore::{BnMode, Value};
    // student vs teacher argmax agreement on pool images (synthetic domain)
    let (mut agree_t, mut agree_y, mut total) = (0usize, 0usize, 0usize);
    for b in tr.pool().batches().iter().rev().take(4) {
        let tf = tr.teacher().forward(&Value::constant(b.images.clone()), BnMode::Eval).unwrap();
        let sf = tr.student().forward(&Value::constant(b.images.clone()), BnMode::Eval).unwrap();
        let tl = tf.logits.detach();
        let sl = sf.logits.detach();
        for (i, &y) in b.labels.iter().enumerate() {
            let trow = &tl.data()[i * 10..(i + 1) * 10];
            let srow = &sl.data()[i * 10..(i + 1) * 10];
            let ta = (0..10).max_by(|&a, &c| trow[a].partial_cmp(&trow[c]).unwrap()).unwrap();
            let sa = (0..10).max_by(|&a, &c| srow[a].partial_cmp(&srow[c]).unwrap()).unwrap();
            if ta == sa {
                agree_t += 1;
            }
            if sa == y as usize {
                agree_y += 1;
            }
            total += 1;
        }
    }
    println!("on LAST pool batches: student-teacher argmax agreement {agree_t}/{total}, student-pseudolabel {agree_y}/{total}");
    // per-channel activation stats after student conv1 on synthetic vs real
    let (real_imgs, _) = test.gather(&(0..112).collect::<Vec<_>>());
    let last = &tr.pool().batches().last().unwrap().images;
    for (name, imgs) in [("synthetic", last.clone()), ("real", real_imgs)] {
        let d = imgs.data();
        let mean: f32 = d.iter().sum::<f32>() / d.len() as f32;
        let var: f32 = d.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / d.len() as f32;
        println!("{name} input pixels: mean {mean:.3} std {:.3}", var.sqrt());
    }
}
