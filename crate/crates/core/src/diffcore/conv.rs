//! Spatial operators: 3x3 convolution, 2x nearest upsampling, 2x2 max
//! pooling and global average pooling.
//!
//! Convolution uses per-sample im2col + GEMM. Batch work is parallelized
//! over samples; weight-gradient reduction runs over a fixed number of
//! sample chunks so results are bit-identical for any worker count.

use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

use super::graph::Value;
use super::ops::finish;
use super::tensor::Tensor;

/// Fixed chunk count for gradient reductions; independent of thread count.
const REDUCE_CHUNKS: usize = 8;

fn rank4<T: Scalar>(op: &'static str, x: &Value<T>) -> Result<(usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(shape_err(op, format!("expected (B,C,H,W), got {:?}", s)));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

// ------------------------------------------------------------------- conv

/// 3x3, stride-1, pad-1 convolution parameters: weight (O, C, 3, 3), bias (O,).
pub struct Conv2d<T: Scalar> {
    pub weight: Value<T>,
    pub bias: Value<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn init(
        in_channels: usize,
        out_channels: usize,
        rng: &mut crate::rng::SplitMix64,
        trainable: bool,
    ) -> Self {
        let fan_in = in_channels * 9;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut w = Tensor::zeros(&[out_channels, in_channels, 3, 3]);
        w.fill_uniform(rng, bound);
        let mut b = Tensor::zeros(&[out_channels]);
        b.fill_uniform(rng, bound);
        if trainable {
            Conv2d { weight: Value::parameter(w), bias: Value::parameter(b) }
        } else {
            Conv2d { weight: Value::constant(w), bias: Value::constant(b) }
        }
    }

    pub fn forward(&self, x: &Value<T>) -> Result<Value<T>> {
        conv2d_3x3(x, &self.weight, &self.bias)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Lay out the 3x3 receptive fields of one (C,H,W) sample as a
/// (C*9, H*W) column matrix, zero-padded at the borders.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    debug_assert_eq!(col.len(), c * 9 * hw);
    for v in col.iter_mut() {
        *v = T::zero();
    }
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                for y in 0..h as isize {
                    let sy = y + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dx).max(0);
                    let x_hi = (w as isize - dx).min(w as isize);
                    for xo in x_lo..x_hi {
                        row[(y as usize) * w + xo as usize] = plane[(sy as usize) * w + (xo + dx) as usize];
                    }
                }
            }
        }
    }
}

/// Scatter a (C*9, H*W) column-gradient back onto the (C,H,W) input layout.
fn col2im_add<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = &col[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                let dy = ky as isize - 1;
                let ddx = kx as isize - 1;
                for y in 0..h as isize {
                    let sy = y + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-ddx).max(0);
                    let x_hi = (w as isize - ddx).min(w as isize);
                    for xo in x_lo..x_hi {
                        plane[(sy as usize) * w + (xo + ddx) as usize] += row[(y as usize) * w + xo as usize];
                    }
                }
            }
        }
    }
}

/// 3x3 stride-1 pad-1 convolution: x (B,C,H,W), w (O,C,3,3), b (O,) -> (B,O,H,W).
pub fn conv2d_3x3<T: Scalar>(x: &Value<T>, w: &Value<T>, b: &Value<T>) -> Result<Value<T>> {
    let (batch, c, h, wd) = rank4("conv2d", x)?;
    let ws = w.shape();
    if ws.len() != 4 || ws[1] != c || ws[2] != 3 || ws[3] != 3 {
        return Err(shape_err("conv2d", format!("weight {:?} vs input channels {}", ws, c)));
    }
    let o = ws[0];
    if b.shape() != vec![o] {
        return Err(shape_err("conv2d", format!("bias {:?} vs out channels {}", b.shape(), o)));
    }
    let hw = h * wd;
    let k = c * 9;
    let mut out = vec![T::zero(); batch * o * hw];
    {
        let xv = x.value();
        let wv = w.value();
        let bv = b.value();
        let xd = xv.data();
        let wd_ = wv.data();
        let bd = bv.data();
        out.par_chunks_mut(o * hw).enumerate().for_each(|(bi, slab)| {
            let mut col = vec![T::zero(); k * hw];
            im2col(&xd[bi * c * hw..(bi + 1) * c * hw], c, h, wd, &mut col);
            for (oc, chunk) in slab.chunks_mut(hw).enumerate() {
                for v in chunk.iter_mut() {
                    *v = bd[oc];
                }
            }
            T::gemm(
                o, k, hw, T::one(),
                wd_, k as isize, 1,
                &col, hw as isize, 1,
                T::one(), slab, hw as isize, 1,
            );
        });
    }
    let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
    finish(
        "conv2d",
        Tensor::from_parts(vec![batch, o, h, wd], out),
        vec![x.clone(), w.clone(), b.clone()],
        move |g| {
            if xc.requires_grad() {
                let wv = wc.value();
                let wdat = wv.data();
                let mut dx = vec![T::zero(); batch * c * hw];
                dx.par_chunks_mut(c * hw).enumerate().for_each(|(bi, dxs)| {
                    let gs = &g[bi * o * hw..(bi + 1) * o * hw];
                    let mut dcol = vec![T::zero(); k * hw];
                    T::gemm(
                        k, o, hw, T::one(),
                        wdat, 1, k as isize, // w transposed
                        gs, hw as isize, 1,
                        T::zero(), &mut dcol, hw as isize, 1,
                    );
                    col2im_add(&dcol, c, h, wd, dxs);
                });
                drop(wv);
                xc.accumulate_grad(&dx);
            }
            if wc.requires_grad() {
                let xv = xc.value();
                let xd = xv.data();
                // Chunked partial sums, reduced in fixed order.
                let chunk = batch.div_ceil(REDUCE_CHUNKS);
                let partials: Vec<Vec<T>> = (0..batch)
                    .collect::<Vec<_>>()
                    .par_chunks(chunk.max(1))
                    .map(|samples| {
                        let mut dwp = vec![T::zero(); o * k];
                        let mut col = vec![T::zero(); k * hw];
                        for &bi in samples {
                            im2col(&xd[bi * c * hw..(bi + 1) * c * hw], c, h, wd, &mut col);
                            let gs = &g[bi * o * hw..(bi + 1) * o * hw];
                            T::gemm(
                                o, hw, k, T::one(),
                                gs, hw as isize, 1,
                                &col, 1, hw as isize, // col transposed
                                T::one(), &mut dwp, k as isize, 1,
                            );
                        }
                        dwp
                    })
                    .collect();
                drop(xv);
                let mut dw = vec![T::zero(); o * k];
                for p in partials {
                    for (a, b) in dw.iter_mut().zip(p) {
                        *a += b;
                    }
                }
                wc.accumulate_grad(&dw);
            }
            if bc.requires_grad() {
                let mut db = vec![T::zero(); o];
                for bi in 0..batch {
                    for oc in 0..o {
                        let gs = &g[(bi * o + oc) * hw..(bi * o + oc + 1) * hw];
                        db[oc] += gs.iter().fold(T::zero(), |a, &v| a + v);
                    }
                }
                bc.accumulate_grad(&db);
            }
        },
    )
}

// --------------------------------------------------------------- upsample

/// Nearest-neighbor 2x upsampling: (B,C,H,W) -> (B,C,2H,2W).
pub fn upsample_nearest_2x<T: Scalar>(x: &Value<T>) -> Result<Value<T>> {
    let (b, c, h, w) = rank4("upsample_nearest_2x", x)?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); b * c * h2 * w2];
    {
        let xv = x.value();
        let xd = xv.data();
        for p in 0..b * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
    }
    let xc = x.clone();
    finish(
        "upsample_nearest_2x",
        Tensor::from_parts(vec![b, c, h2, w2], out),
        vec![x.clone()],
        move |g| {
            let mut dx = vec![T::zero(); b * c * h * w];
            for p in 0..b * c {
                let gs = &g[p * h2 * w2..(p + 1) * h2 * w2];
                let ds = &mut dx[p * h * w..(p + 1) * h * w];
                for y in 0..h2 {
                    for xx in 0..w2 {
                        ds[(y / 2) * w + xx / 2] += gs[y * w2 + xx];
                    }
                }
            }
            xc.accumulate_grad(&dx);
        },
    )
}

// ------------------------------------------------------------------ pools

/// 2x2 stride-2 max pooling with floor semantics on odd extents.
pub fn max_pool2x<T: Scalar>(x: &Value<T>) -> Result<Value<T>> {
    let (b, c, h, w) = rank4("max_pool2x", x)?;
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(shape_err("max_pool2x", format!("spatial {}x{} too small", h, w)));
    }
    let mut out = vec![T::zero(); b * c * ho * wo];
    let mut argmax = vec![0usize; b * c * ho * wo];
    {
        let xv = x.value();
        let xd = xv.data();
        for p in 0..b * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            for y in 0..ho {
                for xx in 0..wo {
                    let mut best_idx = (2 * y) * w + 2 * xx;
                    let mut best = src[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = (2 * y + dy) * w + 2 * xx + dx;
                        if src[i] > best {
                            best = src[i];
                            best_idx = i;
                        }
                    }
                    out[p * ho * wo + y * wo + xx] = best;
                    argmax[p * ho * wo + y * wo + xx] = p * h * w + best_idx;
                }
            }
        }
    }
    let xc = x.clone();
    finish(
        "max_pool2x",
        Tensor::from_parts(vec![b, c, ho, wo], out),
        vec![x.clone()],
        move |g| {
            let mut dx = vec![T::zero(); b * c * h * w];
            for (i, &src_idx) in argmax.iter().enumerate() {
                dx[src_idx] += g[i];
            }
            xc.accumulate_grad(&dx);
        },
    )
}

/// Global average pooling: (B,C,H,W) -> (B,C).
pub fn global_avg_pool<T: Scalar>(x: &Value<T>) -> Result<Value<T>> {
    let (b, c, h, w) = rank4("global_avg_pool", x)?;
    let hw = h * w;
    if hw == 0 {
        return Err(shape_err("global_avg_pool", "empty spatial extent"));
    }
    let inv = T::one() / crate::scalar::cast::<T>(hw as f64);
    let mut out = vec![T::zero(); b * c];
    {
        let xv = x.value();
        let xd = xv.data();
        for p in 0..b * c {
            out[p] = xd[p * hw..(p + 1) * hw].iter().fold(T::zero(), |a, &v| a + v) * inv;
        }
    }
    let xc = x.clone();
    finish(
        "global_avg_pool",
        Tensor::from_parts(vec![b, c], out),
        vec![x.clone()],
        move |g| {
            let mut dx = vec![T::zero(); b * c * hw];
            for p in 0..b * c {
                let gv = g[p] * inv;
                for v in dx[p * hw..(p + 1) * hw].iter_mut() {
                    *v = gv;
                }
            }
            xc.accumulate_grad(&dx);
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::graph::backward;
    use crate::diffcore::ops::sum_all;
    use crate::rng::SplitMix64;

    #[test]
    fn upsample_shape_rule() {
        let x = Value::constant(Tensor::<f32>::zeros(&[1, 128, 8, 8]));
        let y = upsample_nearest_2x(&x).unwrap();
        assert_eq!(y.shape(), vec![1, 128, 16, 16]);
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        // Single-channel kernel with 1 at the center reproduces the input.
        let mut wdat = vec![0.0f64; 9];
        wdat[4] = 1.0;
        let w = Value::constant(Tensor::new(vec![1, 1, 3, 3], wdat).unwrap());
        let b = Value::constant(Tensor::zeros(&[1]));
        let xdat: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = Value::constant(Tensor::new(vec![1, 1, 4, 4], xdat.clone()).unwrap());
        let y = conv2d_3x3(&x, &w, &b).unwrap();
        assert_eq!(y.value().data(), &xdat[..]);
    }

    #[test]
    fn conv_matches_direct_sum_on_random_input() {
        // Brute-force direct convolution oracle.
        let mut rng = SplitMix64::new(11);
        let (b, c, o, h, w) = (2usize, 3usize, 4usize, 5usize, 5usize);
        let mut xt = Tensor::<f64>::zeros(&[b, c, h, w]);
        xt.fill_uniform(&mut rng, 1.0);
        let mut wt = Tensor::<f64>::zeros(&[o, c, 3, 3]);
        wt.fill_uniform(&mut rng, 1.0);
        let mut bt = Tensor::<f64>::zeros(&[o]);
        bt.fill_uniform(&mut rng, 1.0);
        let y = conv2d_3x3(
            &Value::constant(xt.clone()),
            &Value::constant(wt.clone()),
            &Value::constant(bt.clone()),
        )
        .unwrap();
        let yv = y.value();
        let (xd, wd, bd) = (xt.data(), wt.data(), bt.data());
        for bi in 0..b {
            for oc in 0..o {
                for y0 in 0..h as isize {
                    for x0 in 0..w as isize {
                        let mut acc = bd[oc];
                        for ci in 0..c {
                            for ky in -1..=1isize {
                                for kx in -1..=1isize {
                                    let (sy, sx) = (y0 + ky, x0 + kx);
                                    if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    let xi = ((bi * c + ci) * h + sy as usize) * w + sx as usize;
                                    let wi = ((oc * c + ci) * 3 + (ky + 1) as usize) * 3
                                        + (kx + 1) as usize;
                                    acc += xd[xi] * wd[wi];
                                }
                            }
                        }
                        let got = yv.data()[((bi * o + oc) * h + y0 as usize) * w + x0 as usize];
                        assert!((got - acc).abs() < 1e-12, "mismatch {} vs {}", got, acc);
                    }
                }
            }
        }
    }

    #[test]
    fn max_pool_floor_and_gradient_routing() {
        let x = Value::parameter(
            Tensor::new(
                vec![1, 1, 3, 3],
                vec![1.0f64, 5.0, 9.0, 2.0, 3.0, 9.0, 9.0, 9.0, 9.0],
            )
            .unwrap(),
        );
        let y = max_pool2x(&x).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1, 1]);
        assert_eq!(y.value().item(), 5.0);
        let loss = sum_all(&y).unwrap();
        backward(&loss).unwrap();
        let g = x.grad().unwrap();
        assert_eq!(g.data()[1], 1.0);
        assert_eq!(g.data().iter().copied().sum::<f64>(), 1.0);
    }

    #[test]
    fn gap_is_mean_per_plane() {
        let x = Value::constant(
            Tensor::new(vec![1, 2, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0])
                .unwrap(),
        );
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.value().data(), &[2.5, 10.0]);
    }
}
