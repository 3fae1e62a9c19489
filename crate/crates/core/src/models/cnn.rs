//! Small fully-convolutional classifiers used for both teacher and student:
//! a stack of conv-bn-relu blocks (max-pooled between blocks), global
//! average pooling, and a single linear head — the structure the latent
//! activation map computation relies on. An optional frozen projection maps
//! the pooled feature vector to the class-embedding width.

use crate::diffcore::{
    global_avg_pool, max_pool2x, ops, BatchNorm, BnCapture, BnMode, Conv2d, Linear, Value,
};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

use super::checkpointing::TensorSink;

/// Architecture description for a classifier network.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnSpec {
    pub in_channels: usize,
    /// Output channels of each conv block; spatial extent halves after every
    /// block except the last.
    pub channels: Vec<usize>,
    pub num_classes: usize,
    /// Width of the penultimate embedding. When it differs from the final
    /// feature width, a frozen seed-fixed linear projection is inserted;
    /// when equal, the pooled feature vector is the embedding.
    pub embed_dim: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl CnnSpec {
    pub fn new(in_channels: usize, channels: Vec<usize>, num_classes: usize) -> Self {
        let feat = *channels.last().expect("at least one conv block");
        CnnSpec {
            in_channels,
            channels,
            num_classes,
            embed_dim: feat,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one conv block".into()));
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidArgument("zero-sized network dimension".into()));
        }
        Ok(())
    }

    pub fn feature_width(&self) -> usize {
        *self.channels.last().unwrap()
    }

    fn pool_count(&self) -> usize {
        self.channels.len().saturating_sub(1)
    }

    /// Smallest square input the network accepts (every pool needs 2 pixels).
    pub fn min_resolution(&self) -> usize {
        1 << self.pool_count()
    }

    /// Spatial size of the pre-pooling feature maps for a square input,
    /// with floor semantics at each pooling stage.
    pub fn latent_size(&self, resolution: usize) -> (usize, usize) {
        let mut s = resolution;
        for _ in 0..self.pool_count() {
            s /= 2;
        }
        (s, s)
    }
}

struct ConvBlock<T: Scalar> {
    conv: Conv2d<T>,
    bn: BatchNorm<T>,
    pool: bool,
}

/// Classifier with trunk, GAP, single linear head and optional frozen
/// embedding projection.
pub struct CnnModel<T: Scalar> {
    pub spec: CnnSpec,
    blocks: Vec<ConvBlock<T>>,
    pub head: Linear<T>,
    embed_proj: Option<Linear<T>>,
}

/// All intermediate results of one classifier forward pass.
pub struct CnnForward<T: Scalar> {
    /// Pre-GAP feature maps of the last block, (B, C, h, w).
    pub features: Value<T>,
    /// GAP output, (B, C).
    pub pooled: Value<T>,
    /// Penultimate embedding, (B, embed_dim).
    pub embedding: Value<T>,
    /// Class logits, (B, K).
    pub logits: Value<T>,
    /// Batch statistics per BN layer; populated in `Capture` mode only.
    pub bn_captures: Vec<BnCapture<T>>,
}

impl<T: Scalar> CnnModel<T> {
    /// Build with the uniform 1/sqrt(fan_in) scheme. `trainable` decides
    /// whether parameters are graph parameters or frozen constants; the
    /// embedding projection is always frozen.
    pub fn build(spec: CnnSpec, rng: &mut SplitMix64, trainable: bool) -> Result<Self> {
        spec.validate()?;
        let mut blocks = Vec::with_capacity(spec.channels.len());
        let mut in_ch = spec.in_channels;
        let last = spec.channels.len() - 1;
        for (i, &out_ch) in spec.channels.iter().enumerate() {
            blocks.push(ConvBlock {
                conv: Conv2d::init(in_ch, out_ch, rng, trainable),
                bn: BatchNorm::new(out_ch, spec.bn_momentum, spec.bn_eps, trainable),
                pool: i < last,
            });
            in_ch = out_ch;
        }
        let head = Linear::init(spec.feature_width(), spec.num_classes, rng, trainable);
        let embed_proj = if spec.embed_dim != spec.feature_width() {
            Some(Linear::init(spec.feature_width(), spec.embed_dim, rng, false))
        } else {
            None
        };
        Ok(CnnModel { spec, blocks, head, embed_proj })
    }

    pub fn forward(&self, x: &Value<T>, mode: BnMode) -> Result<CnnForward<T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(Error::ShapeMismatch {
                op: "cnn_forward",
                detail: format!(
                    "expected (B, {}, H, W), got {:?}",
                    self.spec.in_channels, shape
                ),
            });
        }
        if shape[2] < self.spec.min_resolution() || shape[3] < self.spec.min_resolution() {
            return Err(Error::InvalidArgument(format!(
                "input {}x{} below the network minimum {}",
                shape[2],
                shape[3],
                self.spec.min_resolution()
            )));
        }
        let mut h = x.clone();
        let mut captures = Vec::new();
        for block in &self.blocks {
            h = block.conv.forward(&h)?;
            let (out, cap) = block.bn.forward_captured(&h, mode)?;
            if let Some(c) = cap {
                captures.push(c);
            }
            h = ops::relu(&out)?;
            if block.pool {
                h = max_pool2x(&h)?;
            }
        }
        let features = h;
        let pooled = global_avg_pool(&features)?;
        let logits = self.head.forward(&pooled)?;
        let embedding = match &self.embed_proj {
            Some(proj) => proj.forward(&pooled)?,
            None => pooled.clone(),
        };
        Ok(CnnForward { features, pooled, embedding, logits, bn_captures: captures })
    }

    /// Trainable parameters in a stable order.
    pub fn parameters(&self) -> Vec<Value<T>> {
        let mut ps = Vec::new();
        for b in &self.blocks {
            ps.push(b.conv.weight.clone());
            ps.push(b.conv.bias.clone());
            ps.push(b.bn.gamma.clone());
            ps.push(b.bn.beta.clone());
        }
        ps.push(self.head.weight.clone());
        ps.push(self.head.bias.clone());
        ps
    }

    pub fn export_tensors(&self, prefix: &str, out: &mut TensorSink) {
        for (i, b) in self.blocks.iter().enumerate() {
            out.push(format!("{prefix}/block{i}/conv/weight"), b.conv.weight.detach().cast());
            out.push(format!("{prefix}/block{i}/conv/bias"), b.conv.bias.detach().cast());
            out.push(format!("{prefix}/block{i}/bn/gamma"), b.bn.gamma.detach().cast());
            out.push(format!("{prefix}/block{i}/bn/beta"), b.bn.beta.detach().cast());
            out.push_vec(format!("{prefix}/block{i}/bn/running_mean"), &b.bn.running_mean.borrow());
            out.push_vec(format!("{prefix}/block{i}/bn/running_var"), &b.bn.running_var.borrow());
        }
        out.push(format!("{prefix}/head/weight"), self.head.weight.detach().cast());
        out.push(format!("{prefix}/head/bias"), self.head.bias.detach().cast());
        if let Some(p) = &self.embed_proj {
            out.push(format!("{prefix}/embed_proj/weight"), p.weight.detach().cast());
            out.push(format!("{prefix}/embed_proj/bias"), p.bias.detach().cast());
        }
    }

    pub fn import_tensors(&mut self, prefix: &str, src: &TensorSink) -> Result<()> {
        for (i, b) in self.blocks.iter().enumerate() {
            src.load_into(&format!("{prefix}/block{i}/conv/weight"), &b.conv.weight)?;
            src.load_into(&format!("{prefix}/block{i}/conv/bias"), &b.conv.bias)?;
            src.load_into(&format!("{prefix}/block{i}/bn/gamma"), &b.bn.gamma)?;
            src.load_into(&format!("{prefix}/block{i}/bn/beta"), &b.bn.beta)?;
            src.load_vec(&format!("{prefix}/block{i}/bn/running_mean"), &mut b.bn.running_mean.borrow_mut())?;
            src.load_vec(&format!("{prefix}/block{i}/bn/running_var"), &mut b.bn.running_var.borrow_mut())?;
        }
        src.load_into(&format!("{prefix}/head/weight"), &self.head.weight)?;
        src.load_into(&format!("{prefix}/head/bias"), &self.head.bias)?;
        if let Some(p) = &self.embed_proj {
            src.load_into(&format!("{prefix}/embed_proj/weight"), &p.weight)?;
            src.load_into(&format!("{prefix}/embed_proj/bias"), &p.bias)?;
        }
        Ok(())
    }

    /// FNV-1a over the little-endian bytes of all exported tensors; used to
    /// assert teacher immutability across a run.
    pub fn parameter_hash(&self) -> u64 {
        let mut sink = TensorSink::new();
        self.export_tensors("m", &mut sink);
        let mut h: u64 = 0xcbf29ce484222325;
        for (_, t) in sink.entries() {
            for v in t.data() {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}
