//! Implementations behind the CLI subcommands; kept as library functions so
//! the acceptance suite can drive the same paths in-process.

use std::path::Path;

use muse_core::error::{Error, Result};
use muse_core::losses::MaskKind;
use muse_core::models::{derive_radii, load_embedding_table, min_pairwise_mse};
use muse_core::pool::MemoryPool;
use muse_core::trainer::{
    evaluate, load_teacher_checkpoint, save_teacher_checkpoint, train_teacher, Trainer,
    RunInputs, TeacherTrainSettings, TrainConfig,
};
use muse_core::models::CnnSpec;

use crate::dataset::{dataset_len, load_dataset, to_model_input, DatasetHandle, Split};
use crate::images::{text_grid, write_pgm, write_ppm};

/// Apply `MUSE_THREADS` over the config value and size the global worker
/// pool. Safe to call repeatedly; only the first call wins.
pub fn apply_threads(cfg: &mut TrainConfig) {
    if let Ok(v) = std::env::var("MUSE_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                cfg.threads = n;
            }
        }
    }
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
}

pub fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    TrainConfig::parse(&text)
}

/// Load everything the distillation run needs, train, and write the run
/// artifacts under the configured output directory.
pub fn cmd_train(config_path: &Path, dry_run: bool) -> Result<()> {
    let mut cfg = read_config(config_path)?;
    if dry_run {
        print!("{}", cfg.to_resolved_text());
        return Ok(());
    }
    apply_threads(&mut cfg);
    let data_dir = Path::new(&cfg.data_dir).to_path_buf();
    let train_handle = DatasetHandle::for_dataset(&cfg.dataset, Split::Train)?;
    let test_handle = DatasetHandle::for_dataset(&cfg.dataset, Split::Test)?;
    let dataset_size = dataset_len(&train_handle, &data_dir)?;
    let test = to_model_input(load_dataset(&test_handle, &data_dir)?)?;
    let (teacher, recorded_acc) = load_teacher_checkpoint(Path::new(&cfg.teacher_ckpt))?;
    let inputs = RunInputs {
        teacher,
        recorded_teacher_acc: recorded_acc,
        dataset_size,
        full_resolution: train_handle.full_resolution(),
    };
    let out_dir = Path::new(&cfg.out_dir).to_path_buf();
    std::fs::create_dir_all(&out_dir)?;
    let dump_count = cfg.dump_images;
    let mut trainer = Trainer::new(cfg, inputs, &test)?;
    trainer.run_to_completion(&test)?;
    std::fs::write(out_dir.join("metrics.csv"), trainer.metrics().to_csv())?;
    let (top1, top5) = evaluate(trainer.student(), &test, 256)?;
    trainer.save_student_checkpoint(&out_dir.join("student.museckpt"), top1)?;
    trainer.pool().save(out_dir.join("pool.musepool"))?;
    if dump_count > 0 {
        dump_from_pool_file(&out_dir.join("pool.musepool"), dump_count, &out_dir.join("dumps"))?;
    }
    println!("final student top1 {top1:.2} top5 {top5:.2}");
    println!("artifacts written to {}", out_dir.display());
    Ok(())
}

pub fn cmd_train_teacher(config_path: &Path) -> Result<()> {
    let mut cfg = read_config(config_path)?;
    apply_threads(&mut cfg);
    let data_dir = Path::new(&cfg.data_dir).to_path_buf();
    let train = to_model_input(load_dataset(
        &DatasetHandle::for_dataset(&cfg.dataset, Split::Train)?,
        &data_dir,
    )?)?;
    let test = to_model_input(load_dataset(
        &DatasetHandle::for_dataset(&cfg.dataset, Split::Test)?,
        &data_dir,
    )?)?;
    let mut spec = CnnSpec::new(3, cfg.teacher_channels.clone(), train.num_classes);
    spec.bn_momentum = cfg.bn_momentum;
    spec.bn_eps = cfg.bn_eps;
    let settings = TeacherTrainSettings {
        epochs: cfg.teacher_epochs,
        lr: cfg.teacher_lr,
        momentum: cfg.teacher_momentum,
        weight_decay: cfg.teacher_weight_decay,
        batch: cfg.teacher_batch,
        seed: cfg.seed,
        subset: cfg.teacher_subset,
    };
    let (model, acc) = train_teacher(spec, &settings, &train, &test)?;
    let path = Path::new(&cfg.teacher_ckpt);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_teacher_checkpoint(&model, acc, path)?;
    println!("teacher saved to {} (test top1 {acc:.2})", path.display());
    Ok(())
}

pub fn cmd_eval(checkpoint: &Path, dataset: &str, data_dir: &Path) -> Result<()> {
    let (model, _) = load_teacher_checkpoint(checkpoint)?;
    let test = to_model_input(load_dataset(
        &DatasetHandle::for_dataset(dataset, Split::Test)?,
        data_dir,
    )?)?;
    if model.spec.num_classes != test.num_classes {
        return Err(Error::InvalidArgument(format!(
            "model distinguishes {} classes but the dataset has {}",
            model.spec.num_classes, test.num_classes
        )));
    }
    let (top1, top5) = evaluate(&model, &test, 256)?;
    println!("top1 {top1:.2} top5 {top5:.2}");
    Ok(())
}

pub fn cmd_derive_radii(embeddings: &Path) -> Result<()> {
    let table = load_embedding_table(embeddings)?;
    let min_dist = min_pairwise_mse(&table)?;
    let (r_i, r_o) = derive_radii(min_dist)?;
    println!("min_pairwise_mse {min_dist:.6}");
    println!("r_i {r_i:.6}");
    println!("r_o {r_o:.6}");
    Ok(())
}

pub fn cmd_mask_preview(kind: &str, params: &[f64], size: usize, out: &Path) -> Result<()> {
    let mask_kind = match (kind, params) {
        ("full", [n]) => MaskKind::Full(*n),
        ("gaussian", [peak, sigma]) => MaskKind::Gaussian { peak: *peak, sigma: *sigma },
        _ => {
            return Err(Error::InvalidArgument(
                "expected `full` with 1 parameter or `gaussian` with 2".into(),
            ))
        }
    };
    let mask = muse_core::losses::build_target_mask::<f64>(mask_kind, (size, size))?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out, text_grid(mask.values().data(), size, size))?;
    let pgm = out.with_extension("pgm");
    let as_f32: Vec<f32> = mask.values().data().iter().map(|&v| v as f32).collect();
    write_pgm(&pgm, &as_f32, size, size)?;
    println!("wrote {} and {}", out.display(), pgm.display());
    Ok(())
}

fn dump_from_pool_file(pool_path: &Path, count: usize, out_dir: &Path) -> Result<()> {
    let mut pool = MemoryPool::load(pool_path)?;
    if pool.is_empty() {
        return Err(Error::InvalidArgument("pool is empty; nothing to dump".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    for i in 0..count {
        let (images, labels, res) = pool.sample(1)?;
        let name = format!("img_{i}_y{}_e{res}.ppm", labels[0]);
        write_ppm(&out_dir.join(name), images.data(), res, res)?;
    }
    println!("wrote {count} images to {}", out_dir.display());
    Ok(())
}

pub fn cmd_dump_images(pool_path: &Path, count: usize, out_dir: &Path) -> Result<()> {
    dump_from_pool_file(pool_path, count, out_dir)
}

pub fn cmd_inspect_pool(pool_path: &Path) -> Result<()> {
    let pool = MemoryPool::load(pool_path)?;
    let ledger = pool.ledger();
    let as_f64 = |r: &muse_core::pool::Units| *r.numer() as f64 / *r.denom() as f64;
    println!("base_resolution {}", ledger.base_resolution);
    println!(
        "capacity {}/{} ({:.6} units)",
        ledger.capacity.numer(),
        ledger.capacity.denom(),
        as_f64(&ledger.capacity)
    );
    println!(
        "spent {}/{} ({:.6} units)",
        ledger.spent.numer(),
        ledger.spent.denom(),
        as_f64(&ledger.spent)
    );
    println!("batches {}", pool.batches().len());
    println!("images {}", pool.image_count());
    let mut resolutions: Vec<usize> = pool.batches().iter().map(|b| b.resolution).collect();
    resolutions.sort_unstable();
    resolutions.dedup();
    for e in resolutions {
        let n: usize =
            pool.batches().iter().filter(|b| b.resolution == e).map(|b| b.len()).sum();
        println!("resolution {e}: {n} images");
    }
    println!("rng_state {}", pool.rng_state());
    Ok(())
}
