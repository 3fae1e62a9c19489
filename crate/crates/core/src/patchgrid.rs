//! Patch-grid math for lower-resolution inputs to patch-based models:
//! patch counting, the center-biased distribution over window centers, and
//! position-embedding sub-grid extraction.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

/// Geometry of a full patch grid and the lower-resolution window cut from it.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGridSpec {
    /// Full grid (rows, cols), e.g. 14x14 for 224/16.
    pub grid: (usize, usize),
    /// Window (rows, cols) from the lowered resolution, e.g. 7x7.
    pub window: (usize, usize),
    /// Patch side length in pixels.
    pub patch: usize,
    /// Center-bias strength; 0 degenerates to uniform.
    pub lambda: f64,
}

impl PatchGridSpec {
    pub fn validate(&self) -> Result<()> {
        let ((gr, gc), (wr, wc)) = (self.grid, self.window);
        if gr == 0 || gc == 0 || wr == 0 || wc == 0 || self.patch == 0 {
            return Err(Error::InvalidArgument("patch grid dimensions must be positive".into()));
        }
        if wr > gr || wc > gc {
            return Err(Error::InvalidArgument(format!(
                "window {wr}x{wc} exceeds grid {gr}x{gc}"
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument("lambda must be >= 0".into()));
        }
        Ok(())
    }
}

/// Number of patches an H x W image yields at patch size P.
pub fn patch_count(h: usize, w: usize, p: usize) -> Result<usize> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::InvalidArgument(format!(
            "patch size {p} must divide image {h}x{w}"
        )));
    }
    Ok((h / p) * (w / p))
}

/// Half-widths of a window along one axis: low side gets floor((w-1)/2),
/// the extra cell of an even window goes to the high-index side.
fn half_widths(w: usize) -> (usize, usize) {
    ((w - 1) / 2, w / 2)
}

/// Probability table over valid window centers, weighted by
/// 1 / (1 + lambda * ((r - 7)^2 + (c - 7)^2)).
#[derive(Debug, Clone)]
pub struct CenterPmf {
    pub centers: Vec<(usize, usize)>,
    pub probs: Vec<f64>,
}

/// Valid centers are those where the window fits inside the grid:
/// floor(W/2) ..= G - 1 - floor(W/2) on each axis. Distances in the weight
/// are measured to index 7 on each axis.
pub fn center_index_pmf(spec: &PatchGridSpec) -> Result<CenterPmf> {
    spec.validate()?;
    let ((gr, gc), (wr, wc)) = (spec.grid, spec.window);
    let (r_lo, r_hi) = (wr / 2, gr.checked_sub(1 + wr / 2));
    let (c_lo, c_hi) = (wc / 2, gc.checked_sub(1 + wc / 2));
    let (r_hi, c_hi) = match (r_hi, c_hi) {
        (Some(a), Some(b)) if a >= r_lo && b >= c_lo => (a, b),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "no valid centers: window {wr}x{wc} in grid {gr}x{gc}"
            )))
        }
    };
    let mut centers = Vec::new();
    let mut weights = Vec::new();
    for r in r_lo..=r_hi {
        for c in c_lo..=c_hi {
            let d2 = (r as f64 - 7.0).powi(2) + (c as f64 - 7.0).powi(2);
            centers.push((r, c));
            weights.push(1.0 / (1.0 + spec.lambda * d2));
        }
    }
    let z: f64 = weights.iter().sum();
    let probs = weights.into_iter().map(|w| w / z).collect();
    Ok(CenterPmf { centers, probs })
}

/// Categorical draw from the pmf; deterministic given the rng state.
pub fn sample_center(pmf: &CenterPmf, rng: &mut SplitMix64) -> (usize, usize) {
    let u = rng.next_f64();
    let mut acc = 0.0;
    for (i, &p) in pmf.probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return pmf.centers[i];
        }
    }
    *pmf.centers.last().expect("pmf has at least one center")
}

/// Cut the window's sub-grid of position embeddings around `center` from a
/// (G_r, G_c, d) table. A pure gather: every output vector is bit-identical
/// to some input vector.
pub fn crop_position_embeddings<T: Scalar>(
    full_pos: &Tensor<T>,
    center: (usize, usize),
    spec: &PatchGridSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let shape = full_pos.shape();
    if shape.len() != 3 || shape[0] != spec.grid.0 || shape[1] != spec.grid.1 {
        return Err(Error::ShapeMismatch {
            op: "crop_position_embeddings",
            detail: format!("embeddings {:?} vs grid {:?}", shape, spec.grid),
        });
    }
    let d = shape[2];
    let (wr, wc) = spec.window;
    let (rl, rh) = half_widths(wr);
    let (cl, ch) = half_widths(wc);
    let (r, c) = center;
    // window [r-rl, r+rh] x [c-cl, c+ch] must lie inside the grid
    if r < rl || c < cl || r + rh >= spec.grid.0 || c + ch >= spec.grid.1 {
        return Err(Error::InvalidArgument(format!(
            "window centered at ({r}, {c}) overflows the {:?} grid",
            spec.grid
        )));
    }
    let mut out = Vec::with_capacity(wr * wc * d);
    for rr in r - rl..=r + rh {
        for cc in c - cl..=c + ch {
            let base = (rr * spec.grid.1 + cc) * d;
            out.extend_from_slice(&full_pos.data()[base..base + d]);
        }
    }
    Ok(Tensor::from_parts(vec![wr, wc, d], out))
}
