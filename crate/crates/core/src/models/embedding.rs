//! Class-representative embeddings f_y: one row per class, loaded from a
//! file or computed as the per-class mean of teacher embeddings from the
//! first synthetic batch.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use crate::diffcore::{BnMode, Tensor, Value};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::wire;

use super::cnn::CnnModel;

const EMB_MAGIC: &[u8; 8] = b"MUSEEMB1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    File,
    ClassCenter,
}

/// K rows of class-representative vectors. Frozen once constructed; the
/// generator and the diversity losses treat rows as constants.
#[derive(Debug)]
pub struct ClassEmbeddingTable<T: Scalar> {
    data: Tensor<T>,
    pub source: EmbeddingSource,
}

impl<T: Scalar> ClassEmbeddingTable<T> {
    pub fn new(data: Tensor<T>, source: EmbeddingSource) -> Result<Self> {
        if data.shape().len() != 2 || data.shape()[0] == 0 || data.shape()[1] == 0 {
            return Err(Error::InvalidArgument(format!(
                "embedding table must be (K, dim) with K, dim >= 1, got {:?}",
                data.shape()
            )));
        }
        data.check_finite("embedding table")?;
        Ok(ClassEmbeddingTable { data, source })
    }

    pub fn num_classes(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn row(&self, class: usize) -> &[T] {
        let d = self.dim();
        &self.data.data()[class * d..(class + 1) * d]
    }

    /// Gather rows by label into a (B, dim) tensor.
    pub fn rows_for(&self, labels: &[u32]) -> Result<Tensor<T>> {
        let (k, d) = (self.num_classes(), self.dim());
        let mut out = Vec::with_capacity(labels.len() * d);
        for &y in labels {
            if y as usize >= k {
                return Err(Error::InvalidArgument(format!(
                    "label {y} out of range for {k} classes"
                )));
            }
            out.extend_from_slice(self.row(y as usize));
        }
        Ok(Tensor::from_parts(vec![labels.len(), d], out))
    }

    pub fn cast<U: Scalar>(&self) -> ClassEmbeddingTable<U> {
        ClassEmbeddingTable { data: self.data.cast(), source: self.source }
    }
}

/// Minimum over unordered class pairs of the mean squared row difference.
pub fn min_pairwise_mse<T: Scalar>(table: &ClassEmbeddingTable<T>) -> Result<f64> {
    let k = table.num_classes();
    if k < 2 {
        return Err(Error::InvalidArgument("min_pairwise_mse needs at least 2 classes".into()));
    }
    let d = table.dim() as f64;
    let mut best = f64::INFINITY;
    for i in 0..k {
        for j in i + 1..k {
            let mse = table
                .row(i)
                .iter()
                .zip(table.row(j))
                .map(|(&a, &b)| {
                    let diff = (a - b).to_f64().unwrap();
                    diff * diff
                })
                .sum::<f64>()
                / d;
            if mse < best {
                best = mse;
            }
        }
    }
    Ok(best)
}

/// Inner/outer radii from the minimum embedding distance: half of the
/// minimum for the inner radius, the full minimum for the outer.
pub fn derive_radii(min_dist: f64) -> Result<(f64, f64)> {
    if !(min_dist > 0.0) || !min_dist.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "minimum distance must be positive and finite, got {min_dist}"
        )));
    }
    Ok((min_dist / 2.0, min_dist))
}

/// Per-class means over precomputed embeddings (B, dim).
pub fn class_centers_from_embeddings<T: Scalar>(
    embeddings: &Tensor<T>,
    labels: &[u32],
    num_classes: usize,
) -> Result<ClassEmbeddingTable<T>> {
    let shape = embeddings.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "embeddings {:?} vs {} labels",
            shape,
            labels.len()
        )));
    }
    let d = shape[1];
    let mut sums = vec![T::zero(); num_classes * d];
    let mut counts = vec![0usize; num_classes];
    for (i, &y) in labels.iter().enumerate() {
        let y = y as usize;
        if y >= num_classes {
            return Err(Error::InvalidArgument(format!("label {y} out of range")));
        }
        counts[y] += 1;
        for (s, &e) in sums[y * d..(y + 1) * d].iter_mut().zip(&embeddings.data()[i * d..(i + 1) * d]) {
            *s += e;
        }
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidArgument(format!(
            "class {missing} absent from the batch used for class centers"
        )));
    }
    for (y, &c) in counts.iter().enumerate() {
        let inv = T::one() / crate::scalar::cast::<T>(c as f64);
        for s in sums[y * d..(y + 1) * d].iter_mut() {
            *s *= inv;
        }
    }
    ClassEmbeddingTable::new(
        Tensor::from_parts(vec![num_classes, d], sums),
        EmbeddingSource::ClassCenter,
    )
}

/// Per-class mean of the teacher's penultimate embeddings of `images`.
pub fn class_center_embeddings<T: Scalar>(
    teacher: &CnnModel<T>,
    images: &Tensor<T>,
    labels: &[u32],
    num_classes: usize,
) -> Result<ClassEmbeddingTable<T>> {
    let out = teacher.forward(&Value::constant(images.clone()), BnMode::Eval)?;
    let emb = out.embedding.detach();
    class_centers_from_embeddings(&emb, labels, num_classes)
}

pub fn save_embedding_table<P: AsRef<Path>>(
    table: &ClassEmbeddingTable<f32>,
    path: P,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    use std::io::Write;
    w.write_all(EMB_MAGIC)?;
    wire::write_u32(&mut w, table.num_classes() as u32)?;
    wire::write_u32(&mut w, table.dim() as u32)?;
    for &v in table.data.data() {
        wire::write_f32(&mut w, v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_embedding_table<P: AsRef<Path>>(path: P) -> Result<ClassEmbeddingTable<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    wire::expect_magic(&mut r, EMB_MAGIC, "embedding table")?;
    let k = wire::read_u32(&mut r, "embedding table class count")? as usize;
    let dim = wire::read_u32(&mut r, "embedding table dim")? as usize;
    if k == 0 || dim == 0 {
        return Err(Error::Format(format!("embedding table header K={k}, dim={dim}")));
    }
    let mut data = vec![0f32; k * dim];
    for v in data.iter_mut() {
        *v = wire::read_f32(&mut r, "embedding table payload")?;
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after embedding table payload".into()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("non-finite entry in embedding table".into()));
    }
    ClassEmbeddingTable::new(Tensor::from_parts(vec![k, dim], data), EmbeddingSource::File)
}
