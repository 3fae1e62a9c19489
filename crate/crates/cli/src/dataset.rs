//! Dataset ingestion: IDX (MNIST layout) and CIFAR-10 binary batches.
//! Loaded pixels are scaled to [0, 1] and then channel-normalized with the
//! handle's constants; models always consume 3-channel input, so grayscale
//! sets are replicated across channels by `to_model_input`.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use muse_core::diffcore::Tensor;
use muse_core::error::{Error, Result};
use muse_core::trainer::LabeledImages;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceFormat {
    Idx,
    CifarBinary,
}

/// Identity and layout of one dataset split.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    pub name: String,
    pub split: Split,
    /// Declared image shape (C, H, W).
    pub shape: (usize, usize, usize),
    pub num_classes: usize,
    pub format: SourceFormat,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl DatasetHandle {
    /// Handles for the supported dataset names. `mnist` also serves any
    /// IDX-layout task generated at 28x28 grayscale.
    pub fn for_dataset(name: &str, split: Split) -> Result<DatasetHandle> {
        match name {
            "mnist" => Ok(DatasetHandle {
                name: name.to_string(),
                split,
                shape: (1, 28, 28),
                num_classes: 10,
                format: SourceFormat::Idx,
                mean: vec![0.1307],
                std: vec![0.3081],
            }),
            "cifar10" => Ok(DatasetHandle {
                name: name.to_string(),
                split,
                shape: (3, 32, 32),
                num_classes: 10,
                format: SourceFormat::CifarBinary,
                mean: vec![0.4914, 0.4822, 0.4465],
                std: vec![0.2470, 0.2435, 0.2616],
            }),
            other => Err(Error::InvalidArgument(format!(
                "unknown dataset {other:?}; supported: mnist, cifar10"
            ))),
        }
    }

    pub fn full_resolution(&self) -> usize {
        self.shape.1
    }

    fn idx_file_names(&self) -> (PathBuf, PathBuf) {
        match self.split {
            Split::Train => ("train-images-idx3-ubyte".into(), "train-labels-idx1-ubyte".into()),
            Split::Test => ("t10k-images-idx3-ubyte".into(), "t10k-labels-idx1-ubyte".into()),
        }
    }

    fn cifar_files(&self) -> Vec<PathBuf> {
        match self.split {
            Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin").into()).collect(),
            Split::Test => vec!["test_batch.bin".into()],
        }
    }
}

/// Raw loaded split in its declared shape, normalized.
pub struct RawDataset {
    pub images: Tensor<f32>,
    pub labels: Vec<u32>,
    pub num_classes: usize,
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format(format!("truncated {what}")))?;
    Ok(u32::from_be_bytes(b))
}

fn load_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let mut r = File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let magic = read_be_u32(&mut r, "IDX image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("bad IDX image magic {magic:#010x}")));
    }
    let n = read_be_u32(&mut r, "IDX image count")? as usize;
    let h = read_be_u32(&mut r, "IDX rows")? as usize;
    let w = read_be_u32(&mut r, "IDX cols")? as usize;
    let mut pixels = vec![0u8; n * h * w];
    r.read_exact(&mut pixels)
        .map_err(|_| Error::Format("IDX image payload shorter than header declares".into()))?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("IDX image payload longer than header declares".into()));
    }
    Ok((pixels, n, h, w))
}

fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut r = File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let magic = read_be_u32(&mut r, "IDX label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("bad IDX label magic {magic:#010x}")));
    }
    let n = read_be_u32(&mut r, "IDX label count")? as usize;
    let mut labels = vec![0u8; n];
    r.read_exact(&mut labels)
        .map_err(|_| Error::Format("IDX label payload shorter than header declares".into()))?;
    Ok(labels)
}

/// Number of samples in a split, from headers/file sizes only.
pub fn dataset_len(handle: &DatasetHandle, dir: &Path) -> Result<u64> {
    match handle.format {
        SourceFormat::Idx => {
            let (images, _) = handle.idx_file_names();
            let mut r = File::open(dir.join(&images))
                .map_err(|e| Error::Io(format!("{}: {e}", dir.join(&images).display())))?;
            let magic = read_be_u32(&mut r, "IDX image magic")?;
            if magic != IDX_IMAGES_MAGIC {
                return Err(Error::Format(format!("bad IDX image magic {magic:#010x}")));
            }
            Ok(read_be_u32(&mut r, "IDX image count")? as u64)
        }
        SourceFormat::CifarBinary => {
            let mut total = 0u64;
            for f in handle.cifar_files() {
                let meta = std::fs::metadata(dir.join(&f))
                    .map_err(|e| Error::Io(format!("{}: {e}", dir.join(&f).display())))?;
                if meta.len() % 3073 != 0 {
                    return Err(Error::Format(format!(
                        "{} is not a whole number of 3073-byte records",
                        f.display()
                    )));
                }
                total += meta.len() / 3073;
            }
            Ok(total)
        }
    }
}

/// Load a split: pixels to [0, 1], then per-channel normalization.
pub fn load_dataset(handle: &DatasetHandle, dir: &Path) -> Result<RawDataset> {
    let (c, h, w) = handle.shape;
    let (raw, labels, n) = match handle.format {
        SourceFormat::Idx => {
            let (images, labels_name) = handle.idx_file_names();
            let (pixels, n, fh, fw) = load_idx_images(&dir.join(images))?;
            if (fh, fw) != (h, w) {
                return Err(Error::Format(format!(
                    "IDX images are {fh}x{fw}, handle declares {h}x{w}"
                )));
            }
            let labels = load_idx_labels(&dir.join(labels_name))?;
            if labels.len() != n {
                return Err(Error::Format(format!(
                    "{n} images but {} labels",
                    labels.len()
                )));
            }
            (pixels, labels, n)
        }
        SourceFormat::CifarBinary => {
            let mut pixels = Vec::new();
            let mut labels = Vec::new();
            for f in handle.cifar_files() {
                let path = dir.join(&f);
                let mut bytes = Vec::new();
                File::open(&path)
                    .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?
                    .read_to_end(&mut bytes)?;
                if bytes.len() % 3073 != 0 {
                    return Err(Error::Format(format!(
                        "{} is not a whole number of 3073-byte records",
                        f.display()
                    )));
                }
                for rec in bytes.chunks(3073) {
                    labels.push(rec[0]);
                    pixels.extend_from_slice(&rec[1..]);
                }
            }
            let n = labels.len();
            (pixels, labels, n)
        }
    };
    for &y in &labels {
        if (y as usize) >= handle.num_classes {
            return Err(Error::Format(format!("label {y} out of range")));
        }
    }
    if handle.mean.len() != c || handle.std.len() != c {
        return Err(Error::InvalidArgument("normalization constants must be per-channel".into()));
    }
    let mut data = Vec::with_capacity(n * c * h * w);
    for i in 0..n {
        for ch in 0..c {
            let (m, s) = (handle.mean[ch], handle.std[ch]);
            let base = (i * c + ch) * h * w;
            for p in 0..h * w {
                let v = raw[base + p] as f32 / 255.0;
                data.push((v - m) / s);
            }
        }
    }
    Ok(RawDataset {
        images: Tensor::new(vec![n, c, h, w], data)?,
        labels: labels.into_iter().map(|y| y as u32).collect(),
        num_classes: handle.num_classes,
    })
}

/// Adapt a raw split to model layout: replicate grayscale to 3 channels.
pub fn to_model_input(raw: RawDataset) -> Result<LabeledImages> {
    let s = raw.images.shape().to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let images = match c {
        3 => raw.images,
        1 => {
            let mut data = Vec::with_capacity(n * 3 * h * w);
            for i in 0..n {
                let plane = &raw.images.data()[i * h * w..(i + 1) * h * w];
                for _ in 0..3 {
                    data.extend_from_slice(plane);
                }
            }
            Tensor::new(vec![n, 3, h, w], data)?
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "models take 1- or 3-channel data, got {other}"
            )))
        }
    };
    LabeledImages::new(images, raw.labels, raw.num_classes)
}

/// Write an IDX image/label pair (MNIST layout); used by the synthetic
/// task generator and by tests.
pub fn write_idx(
    dir: &Path,
    split: Split,
    images: &[u8],
    labels: &[u8],
    h: usize,
    w: usize,
) -> Result<()> {
    use std::io::Write;
    std::fs::create_dir_all(dir)?;
    let n = labels.len();
    if images.len() != n * h * w {
        return Err(Error::InvalidArgument(format!(
            "{} pixels for {} {}x{} images",
            images.len(),
            n,
            h,
            w
        )));
    }
    let (img_name, lbl_name) = match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    };
    let mut f = File::create(dir.join(img_name))?;
    f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    f.write_all(&(n as u32).to_be_bytes())?;
    f.write_all(&(h as u32).to_be_bytes())?;
    f.write_all(&(w as u32).to_be_bytes())?;
    f.write_all(images)?;
    let mut f = File::create(dir.join(lbl_name))?;
    f.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    f.write_all(&(n as u32).to_be_bytes())?;
    f.write_all(labels)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("muse_ds_{}_{}", name, std::process::id()));
        std::fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn idx_round_trip_and_shape() {
        let dir = tmp("idx");
        let n = 5;
        let pixels: Vec<u8> = (0..n * 28 * 28).map(|i| (i % 251) as u8).collect();
        let labels: Vec<u8> = (0..n as u8).collect();
        write_idx(&dir, Split::Train, &pixels, &labels, 28, 28).unwrap();
        let handle = DatasetHandle::for_dataset("mnist", Split::Train).unwrap();
        assert_eq!(dataset_len(&handle, &dir).unwrap(), n as u64);
        let raw = load_dataset(&handle, &dir).unwrap();
        assert_eq!(raw.images.shape(), &[n, 1, 28, 28]);
        assert_eq!(raw.labels, vec![0, 1, 2, 3, 4]);
        // normalization: pixel 0 maps to (0 - m) / s
        let expect = (0.0 - 0.1307) / 0.3081;
        assert!((raw.images.data()[0] - expect).abs() < 1e-6);
        let model_in = to_model_input(raw).unwrap();
        assert_eq!(model_in.images.shape(), &[n, 3, 28, 28]);
        // channel replication
        let d = model_in.images.data();
        assert_eq!(d[0], d[28 * 28]);
        assert_eq!(d[0], d[2 * 28 * 28]);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn idx_truncation_detected() {
        let dir = tmp("idxtrunc");
        let pixels: Vec<u8> = vec![7; 3 * 28 * 28];
        write_idx(&dir, Split::Test, &pixels, &[0, 1, 2], 28, 28).unwrap();
        let img = dir.join("t10k-images-idx3-ubyte");
        let bytes = std::fs::read(&img).unwrap();
        std::fs::write(&img, &bytes[..bytes.len() - 10]).unwrap();
        let handle = DatasetHandle::for_dataset("mnist", Split::Test).unwrap();
        assert!(matches!(load_dataset(&handle, &dir), Err(Error::Format(_))));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn idx_bad_magic_detected() {
        let dir = tmp("idxmagic");
        std::fs::write(dir.join("train-images-idx3-ubyte"), [0u8; 16]).unwrap();
        std::fs::write(dir.join("train-labels-idx1-ubyte"), [0u8; 8]).unwrap();
        let handle = DatasetHandle::for_dataset("mnist", Split::Train).unwrap();
        assert!(load_dataset(&handle, &dir).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn cifar_batches_load_with_record_structure() {
        let dir = tmp("cifar");
        // two records per training batch file
        for i in 1..=5u8 {
            let mut bytes = Vec::new();
            for r in 0..2u8 {
                bytes.push((i + r) % 10);
                bytes.extend(std::iter::repeat_n(128u8, 3072));
            }
            std::fs::write(dir.join(format!("data_batch_{i}.bin")), &bytes).unwrap();
        }
        let handle = DatasetHandle::for_dataset("cifar10", Split::Train).unwrap();
        assert_eq!(dataset_len(&handle, &dir).unwrap(), 10);
        let raw = load_dataset(&handle, &dir).unwrap();
        assert_eq!(raw.images.shape(), &[10, 3, 32, 32]);
        assert_eq!(raw.labels.len(), 10);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn cifar_partial_record_rejected() {
        let dir = tmp("cifarbad");
        std::fs::write(dir.join("test_batch.bin"), vec![0u8; 3073 * 2 + 100]).unwrap();
        let handle = DatasetHandle::for_dataset("cifar10", Split::Test).unwrap();
        assert!(load_dataset(&handle, &dir).is_err());
        assert!(dataset_len(&handle, &dir).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
