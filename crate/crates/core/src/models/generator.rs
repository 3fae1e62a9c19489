//! Conditional image generator and the reinitializable noisy layer feeding
//! it. The generator maps a class embedding to a (3, e, e) image through a
//! linear stage at e/4 resolution and two upsample + spectrally normalized
//! conv stages; the output stage is conv -> sigmoid -> batchnorm, so final
//! pixel values are not range-bounded.

use crate::diffcore::conv2d_3x3;
use crate::diffcore::{
    ops, spectral_normalize, spectral_normalize_frozen, upsample_nearest_2x, BatchNorm, BnMode,
    Conv2d, Linear, SpectralNormState, Value,
};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

use super::checkpointing::TensorSink;
use super::embedding::ClassEmbeddingTable;

/// Shape parameters of one generator instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    /// Target resolution e (square, divisible by 4).
    pub resolution: usize,
    /// Width of the class-embedding input.
    pub embedding_dim: usize,
    /// Channel width of the first stage; the second stage halves it.
    pub base_channels: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl GeneratorSpec {
    pub fn new(resolution: usize, embedding_dim: usize) -> Self {
        GeneratorSpec {
            resolution,
            embedding_dim,
            base_channels: 128,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution % 4 != 0 || self.resolution == 0 {
            return Err(Error::InvalidArgument(format!(
                "generator resolution {} must be a positive multiple of 4",
                self.resolution
            )));
        }
        if self.embedding_dim == 0 {
            return Err(Error::InvalidArgument("embedding_dim must be positive".into()));
        }
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "base_channels {} must be even and >= 2",
                self.base_channels
            )));
        }
        Ok(())
    }

    /// Width of the first linear stage: base_channels * (e/4)^2.
    pub fn linear_out_features(&self) -> usize {
        let s = self.resolution / 4;
        self.base_channels * s * s
    }
}

/// Generator network for one resolution.
pub struct Generator<T: Scalar> {
    pub spec: GeneratorSpec,
    fc: Linear<T>,
    bn_fc: BatchNorm<T>,
    conv1: Conv2d<T>,
    sn1: SpectralNormState<T>,
    bn1: BatchNorm<T>,
    conv2: Conv2d<T>,
    sn2: SpectralNormState<T>,
    bn2: BatchNorm<T>,
    conv3: Conv2d<T>,
    sn3: SpectralNormState<T>,
    bn_out: BatchNorm<T>,
}

impl<T: Scalar> Generator<T> {
    pub fn build(spec: GeneratorSpec, rng: &mut SplitMix64) -> Result<Self> {
        spec.validate()?;
        let base = spec.base_channels;
        let half = base / 2;
        let (mom, eps) = (spec.bn_momentum, spec.bn_eps);
        let fc = Linear::init(spec.embedding_dim, spec.linear_out_features(), rng, true);
        let bn_fc = BatchNorm::new(spec.linear_out_features(), mom, eps, true);
        let conv1 = Conv2d::init(base, base, rng, true);
        let sn1 = SpectralNormState::init(base, rng);
        let bn1 = BatchNorm::new(base, mom, eps, true);
        let conv2 = Conv2d::init(base, half, rng, true);
        let sn2 = SpectralNormState::init(half, rng);
        let bn2 = BatchNorm::new(half, mom, eps, true);
        let conv3 = Conv2d::init(half, 3, rng, true);
        let sn3 = SpectralNormState::init(3, rng);
        let bn_out = BatchNorm::new(3, mom, eps, true);
        Ok(Generator { spec, fc, bn_fc, conv1, sn1, bn1, conv2, sn2, bn2, conv3, sn3, bn_out })
    }

    /// Map (B, embedding_dim) inputs to (B, 3, e, e) images. Train mode
    /// refines the spectral-norm power iterates and batch-norm statistics;
    /// eval mode touches no state.
    pub fn forward(&mut self, x: &Value<T>, mode: BnMode) -> Result<Value<T>> {
        let update = mode == BnMode::Train;
        let quarter = self.spec.resolution / 4;
        let base = self.spec.base_channels;
        let batch = {
            let s = x.shape();
            if s.len() != 2 || s[1] != self.spec.embedding_dim {
                return Err(Error::ShapeMismatch {
                    op: "generator_forward",
                    detail: format!("expected (B, {}), got {:?}", self.spec.embedding_dim, s),
                });
            }
            s[0]
        };
        let h = self.fc.forward(x)?;
        let h = self.bn_fc.forward(&h, mode)?;
        let h = ops::reshape(&h, vec![batch, base, quarter, quarter])?;

        let h = upsample_nearest_2x(&h)?;
        let w1 = Self::normalized(&self.conv1.weight, &mut self.sn1, update)?;
        let h = conv2d_3x3(&h, &w1, &self.conv1.bias)?;
        let h = self.bn1.forward(&h, mode)?;
        let h = ops::leaky_relu(&h, 0.2)?;

        let h = upsample_nearest_2x(&h)?;
        let w2 = Self::normalized(&self.conv2.weight, &mut self.sn2, update)?;
        let h = conv2d_3x3(&h, &w2, &self.conv2.bias)?;
        let h = self.bn2.forward(&h, mode)?;
        let h = ops::leaky_relu(&h, 0.2)?;

        let w3 = Self::normalized(&self.conv3.weight, &mut self.sn3, update)?;
        let h = conv2d_3x3(&h, &w3, &self.conv3.bias)?;
        let h = ops::sigmoid(&h)?;
        self.bn_out.forward(&h, mode)
    }

    fn normalized(
        weight: &Value<T>,
        state: &mut SpectralNormState<T>,
        update: bool,
    ) -> Result<Value<T>> {
        if update {
            spectral_normalize(weight, state)
        } else {
            spectral_normalize_frozen(weight, state)
        }
    }

    /// Trainable parameters in a stable order.
    pub fn parameters(&self) -> Vec<Value<T>> {
        vec![
            self.fc.weight.clone(),
            self.fc.bias.clone(),
            self.bn_fc.gamma.clone(),
            self.bn_fc.beta.clone(),
            self.conv1.weight.clone(),
            self.conv1.bias.clone(),
            self.bn1.gamma.clone(),
            self.bn1.beta.clone(),
            self.conv2.weight.clone(),
            self.conv2.bias.clone(),
            self.bn2.gamma.clone(),
            self.bn2.beta.clone(),
            self.conv3.weight.clone(),
            self.conv3.bias.clone(),
            self.bn_out.gamma.clone(),
            self.bn_out.beta.clone(),
        ]
    }

    pub fn export_tensors(&self, prefix: &str, out: &mut TensorSink) {
        out.push(format!("{prefix}/fc/weight"), self.fc.weight.detach().cast());
        out.push(format!("{prefix}/fc/bias"), self.fc.bias.detach().cast());
        let bns = [("bn_fc", &self.bn_fc), ("bn1", &self.bn1), ("bn2", &self.bn2), ("bn_out", &self.bn_out)];
        for (name, bn) in bns {
            out.push(format!("{prefix}/{name}/gamma"), bn.gamma.detach().cast());
            out.push(format!("{prefix}/{name}/beta"), bn.beta.detach().cast());
            out.push_vec(format!("{prefix}/{name}/running_mean"), &bn.running_mean.borrow());
            out.push_vec(format!("{prefix}/{name}/running_var"), &bn.running_var.borrow());
        }
        let convs = [("conv1", &self.conv1, &self.sn1), ("conv2", &self.conv2, &self.sn2), ("conv3", &self.conv3, &self.sn3)];
        for (name, conv, sn) in convs {
            out.push(format!("{prefix}/{name}/weight"), conv.weight.detach().cast());
            out.push(format!("{prefix}/{name}/bias"), conv.bias.detach().cast());
            out.push_vec(format!("{prefix}/{name}/u"), &sn.u);
        }
    }

    pub fn import_tensors(&mut self, prefix: &str, src: &TensorSink) -> Result<()> {
        src.load_into(&format!("{prefix}/fc/weight"), &self.fc.weight)?;
        src.load_into(&format!("{prefix}/fc/bias"), &self.fc.bias)?;
        let bns = [("bn_fc", &self.bn_fc), ("bn1", &self.bn1), ("bn2", &self.bn2), ("bn_out", &self.bn_out)];
        for (name, bn) in bns {
            src.load_into(&format!("{prefix}/{name}/gamma"), &bn.gamma)?;
            src.load_into(&format!("{prefix}/{name}/beta"), &bn.beta)?;
            src.load_vec(&format!("{prefix}/{name}/running_mean"), &mut bn.running_mean.borrow_mut())?;
            src.load_vec(&format!("{prefix}/{name}/running_var"), &mut bn.running_var.borrow_mut())?;
        }
        src.load_into(&format!("{prefix}/conv1/weight"), &self.conv1.weight)?;
        src.load_into(&format!("{prefix}/conv1/bias"), &self.conv1.bias)?;
        src.load_vec(&format!("{prefix}/conv1/u"), &mut self.sn1.u)?;
        src.load_into(&format!("{prefix}/conv2/weight"), &self.conv2.weight)?;
        src.load_into(&format!("{prefix}/conv2/bias"), &self.conv2.bias)?;
        src.load_vec(&format!("{prefix}/conv2/u"), &mut self.sn2.u)?;
        src.load_into(&format!("{prefix}/conv3/weight"), &self.conv3.weight)?;
        src.load_into(&format!("{prefix}/conv3/bias"), &self.conv3.bias)?;
        src.load_vec(&format!("{prefix}/conv3/u"), &mut self.sn3.u)?;
        Ok(())
    }

    /// Pre-output activation for inspection: the sigmoid stage before the
    /// trailing batchnorm, guaranteed to lie in [0, 1].
    #[cfg(test)]
    pub(crate) fn forward_to_sigmoid(&mut self, x: &Value<T>, mode: BnMode) -> Result<Value<T>> {
        let update = mode == BnMode::Train;
        let quarter = self.spec.resolution / 4;
        let base = self.spec.base_channels;
        let batch = x.shape()[0];
        let h = self.fc.forward(x)?;
        let h = self.bn_fc.forward(&h, mode)?;
        let h = ops::reshape(&h, vec![batch, base, quarter, quarter])?;
        let h = upsample_nearest_2x(&h)?;
        let w1 = Self::normalized(&self.conv1.weight, &mut self.sn1, update)?;
        let h = conv2d_3x3(&h, &w1, &self.conv1.bias)?;
        let h = self.bn1.forward(&h, mode)?;
        let h = ops::leaky_relu(&h, 0.2)?;
        let h = upsample_nearest_2x(&h)?;
        let w2 = Self::normalized(&self.conv2.weight, &mut self.sn2, update)?;
        let h = conv2d_3x3(&h, &w2, &self.conv2.bias)?;
        let h = self.bn2.forward(&h, mode)?;
        let h = ops::leaky_relu(&h, 0.2)?;
        let w3 = Self::normalized(&self.conv3.weight, &mut self.sn3, update)?;
        let h = conv2d_3x3(&h, &w3, &self.conv3.bias)?;
        ops::sigmoid(&h)
    }
}

/// Reinitializable conditioning layer: 1-D batchnorm followed by a square
/// linear map. Redrawn at the start of every generation iteration to
/// diversify the generator's inputs.
pub struct NoisyLayer<T: Scalar> {
    pub bn: BatchNorm<T>,
    pub linear: Linear<T>,
    dim: usize,
}

impl<T: Scalar> NoisyLayer<T> {
    pub fn build(dim: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        NoisyLayer {
            bn: BatchNorm::new(dim, 0.1, 1e-5, true),
            linear: Linear::init(dim, dim, &mut rng, true),
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Redraw the linear map and reset batchnorm affine parameters and
    /// running statistics, deterministically from `seed`. Node identities
    /// are preserved so optimizer slots stay aligned.
    pub fn reinit(&mut self, seed: u64) {
        let mut rng = SplitMix64::new(seed);
        let bound = 1.0 / (self.dim as f64).sqrt();
        let mut w = crate::diffcore::Tensor::zeros(&[self.dim, self.dim]);
        w.fill_uniform(&mut rng, bound);
        let mut b = crate::diffcore::Tensor::zeros(&[self.dim]);
        b.fill_uniform(&mut rng, bound);
        self.linear.weight.set_data(w);
        self.linear.bias.set_data(b);
        self.bn.gamma.set_data(crate::diffcore::Tensor::full(&[self.dim], T::one()));
        self.bn.beta.set_data(crate::diffcore::Tensor::zeros(&[self.dim]));
        self.bn.reset_running();
    }

    pub fn forward(&self, x: &Value<T>, mode: BnMode) -> Result<Value<T>> {
        let h = self.bn.forward(x, mode)?;
        self.linear.forward(&h)
    }

    pub fn parameters(&self) -> Vec<Value<T>> {
        vec![
            self.bn.gamma.clone(),
            self.bn.beta.clone(),
            self.linear.weight.clone(),
            self.linear.bias.clone(),
        ]
    }

    pub fn export_tensors(&self, prefix: &str, out: &mut TensorSink) {
        out.push(format!("{prefix}/linear/weight"), self.linear.weight.detach().cast());
        out.push(format!("{prefix}/linear/bias"), self.linear.bias.detach().cast());
        out.push(format!("{prefix}/bn/gamma"), self.bn.gamma.detach().cast());
        out.push(format!("{prefix}/bn/beta"), self.bn.beta.detach().cast());
        out.push_vec(format!("{prefix}/bn/running_mean"), &self.bn.running_mean.borrow());
        out.push_vec(format!("{prefix}/bn/running_var"), &self.bn.running_var.borrow());
    }

    pub fn import_tensors(&mut self, prefix: &str, src: &TensorSink) -> Result<()> {
        src.load_into(&format!("{prefix}/linear/weight"), &self.linear.weight)?;
        src.load_into(&format!("{prefix}/linear/bias"), &self.linear.bias)?;
        src.load_into(&format!("{prefix}/bn/gamma"), &self.bn.gamma)?;
        src.load_into(&format!("{prefix}/bn/beta"), &self.bn.beta)?;
        src.load_vec(&format!("{prefix}/bn/running_mean"), &mut self.bn.running_mean.borrow_mut())?;
        src.load_vec(&format!("{prefix}/bn/running_var"), &mut self.bn.running_var.borrow_mut())?;
        Ok(())
    }
}

/// Generate images for the given pseudo-labels: x = G(Z(f_y)). Gradient
/// flows into generator and noisy-layer parameters; table rows enter as
/// constants.
pub fn generate_batch<T: Scalar>(
    generator: &mut Generator<T>,
    noisy: &mut NoisyLayer<T>,
    table: &ClassEmbeddingTable<T>,
    labels: &[u32],
    mode: BnMode,
) -> Result<Value<T>> {
    if table.dim() != generator.spec.embedding_dim {
        return Err(Error::ShapeMismatch {
            op: "generate_batch",
            detail: format!(
                "table dim {} vs generator embedding dim {}",
                table.dim(),
                generator.spec.embedding_dim
            ),
        });
    }
    let rows = table.rows_for(labels)?;
    let input = Value::constant(rows);
    let z = noisy.forward(&input, mode)?;
    generator.forward(&z, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use crate::models::embedding::EmbeddingSource;

    fn small_spec(e: usize) -> GeneratorSpec {
        let mut s = GeneratorSpec::new(e, 6);
        s.base_channels = 8;
        s
    }

    fn table(k: usize, dim: usize, seed: u64) -> ClassEmbeddingTable<f32> {
        let mut rng = SplitMix64::new(seed);
        let mut t = Tensor::zeros(&[k, dim]);
        t.fill_uniform(&mut rng, 1.0);
        ClassEmbeddingTable::new(t, EmbeddingSource::File).unwrap()
    }

    #[test]
    fn forward_shape_for_default_resolutions() {
        for e in [28usize, 32, 64, 96, 112] {
            let mut rng = SplitMix64::new(e as u64);
            let mut g = Generator::<f32>::build(small_spec(e), &mut rng).unwrap();
            let x = Value::constant(Tensor::zeros(&[2, 6]));
            let y = g.forward(&x, BnMode::Eval).unwrap();
            assert_eq!(y.shape(), vec![2, 3, e, e], "resolution {e}");
        }
    }

    #[test]
    fn linear_width_for_96_at_full_base_channels() {
        let spec = GeneratorSpec::new(96, 1000);
        assert_eq!(spec.linear_out_features(), 128 * 24 * 24);
        assert_eq!(spec.linear_out_features(), 73728);
    }

    #[test]
    fn resolution_must_be_multiple_of_four() {
        assert!(GeneratorSpec::new(30, 10).validate().is_err());
        assert!(GeneratorSpec::new(32, 10).validate().is_ok());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Generator::<f32>::build(small_spec(16), &mut SplitMix64::new(5)).unwrap();
        let b = Generator::<f32>::build(small_spec(16), &mut SplitMix64::new(5)).unwrap();
        let (mut sa, mut sb) = (TensorSink::new(), TensorSink::new());
        a.export_tensors("g", &mut sa);
        b.export_tensors("g", &mut sb);
        for ((na, ta), (nb, tb)) in sa.entries().iter().zip(sb.entries()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn generate_batch_shape_and_determinism() {
        let t = table(5, 6, 1);
        let mut g = Generator::<f32>::build(small_spec(16), &mut SplitMix64::new(2)).unwrap();
        let mut z = NoisyLayer::<f32>::build(6, 3);
        let labels = [0u32, 1, 2];
        let a = generate_batch(&mut g, &mut z, &t, &labels, BnMode::Eval).unwrap();
        assert_eq!(a.shape(), vec![3, 3, 16, 16]);
        let b = generate_batch(&mut g, &mut z, &t, &labels, BnMode::Eval).unwrap();
        assert_eq!(a.detach().data(), b.detach().data());
    }

    #[test]
    fn sigmoid_stage_is_unit_range_unlike_final_output() {
        let t = table(4, 6, 7);
        let mut g = Generator::<f32>::build(small_spec(16), &mut SplitMix64::new(8)).unwrap();
        let mut z = NoisyLayer::<f32>::build(6, 9);
        let rows = t.rows_for(&[0, 1, 2, 3]).unwrap();
        let input = Value::constant(rows);
        let pre = z.forward(&input, BnMode::Train).unwrap();
        let sig = g.forward_to_sigmoid(&pre, BnMode::Train).unwrap();
        for &v in sig.value().data() {
            assert!((0.0..=1.0).contains(&v));
        }
        // full output passes through a trailing batchnorm: not range-bounded
        let full = generate_batch(&mut g, &mut z, &t, &[0, 1, 2, 3], BnMode::Train).unwrap();
        let out_of_unit = full.value().data().iter().any(|&v| !(0.0..=1.0).contains(&v));
        assert!(out_of_unit, "trailing batchnorm should break the [0,1] range");
    }

    #[test]
    fn noisy_reinit_is_seeded_and_nondegenerate() {
        let mut z = NoisyLayer::<f32>::build(6, 1);
        z.reinit(7);
        let w7: Vec<f32> = z.linear.weight.detach().data().to_vec();
        z.reinit(8);
        let w8: Vec<f32> = z.linear.weight.detach().data().to_vec();
        z.reinit(7);
        let w7b: Vec<f32> = z.linear.weight.detach().data().to_vec();
        assert_eq!(w7, w7b);
        assert_ne!(w7, w8);
        // forward preserves width
        let x = Value::constant(Tensor::zeros(&[3, 6]));
        let y = z.forward(&x, BnMode::Eval).unwrap();
        assert_eq!(y.shape(), vec![3, 6]);
    }

    #[test]
    fn reinit_differs_across_seed_pairs() {
        let mut z = NoisyLayer::<f32>::build(4, 0);
        let mut prev: Option<Vec<f32>> = None;
        for seed in 0..100u64 {
            z.reinit(seed);
            let w: Vec<f32> = z.linear.weight.detach().data().to_vec();
            if let Some(p) = prev {
                assert_ne!(p, w, "seed {seed} collided");
            }
            prev = Some(w);
        }
    }
}
