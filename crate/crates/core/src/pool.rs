//! Budget-accounted multi-resolution memory pool of synthetic batches.
//!
//! Costs are exact rationals: one full-resolution image is one unit, an
//! e-pixel image costs e^2/l^2 units. The ledger only ever grows; once the
//! budget is exhausted the pool refuses further appends and the trainer
//! continues on the fixed contents. Images are quantized to 16-bit floats
//! at append time, so in-memory pixels always equal what a save/load round
//! trip reproduces.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use half::f16;
use num_rational::Ratio;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Full-resolution-image equivalents.
pub type Units = Ratio<u64>;

const POOL_MAGIC: &[u8; 8] = b"MUSEPOOL";
const POOL_VERSION: u32 = 1;

/// Exact cost of one e-pixel square image in l-pixel units: e^2 / l^2.
pub fn cost_units(e: usize, l: usize) -> Result<Units> {
    if e == 0 || l == 0 || e > l {
        return Err(Error::InvalidArgument(format!(
            "cost_units requires 0 < e <= l, got e={e}, l={l}"
        )));
    }
    Ok(Ratio::new((e * e) as u64, (l * l) as u64))
}

/// Capacity in units for a data ratio over a real training set of size n.
pub fn budget_from_ratio(data_ratio: Units, n: u64) -> Result<Units> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be >= 1".into()));
    }
    if data_ratio <= Ratio::new(0, 1) || data_ratio > Ratio::new(1, 1) {
        return Err(Error::InvalidArgument(format!(
            "data ratio must lie in (0, 1], got {data_ratio}"
        )));
    }
    Ok(data_ratio * Ratio::from_integer(n))
}

/// Parse "0.02", "1/50" or "1" into an exact rational.
pub fn parse_ratio(s: &str) -> Result<Units> {
    let s = s.trim();
    let bad = || Error::InvalidArgument(format!("cannot parse ratio from {s:?}"));
    if let Some((a, b)) = s.split_once('/') {
        let num: u64 = a.trim().parse().map_err(|_| bad())?;
        let den: u64 = b.trim().parse().map_err(|_| bad())?;
        if den == 0 {
            return Err(bad());
        }
        return Ok(Ratio::new(num, den));
    }
    if let Some((int, frac)) = s.split_once('.') {
        let int_part: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        if frac.is_empty() || frac.len() > 9 || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let frac_part: u64 = frac.parse().map_err(|_| bad())?;
        return Ok(Ratio::new(int_part * den + frac_part, den));
    }
    let v: u64 = s.parse().map_err(|_| bad())?;
    Ok(Ratio::from_integer(v))
}

/// One generated batch: images with their pseudo-labels, resolution tag and
/// creation stamps.
#[derive(Debug, Clone)]
pub struct SyntheticBatch {
    pub images: Tensor<f32>,
    pub labels: Vec<u32>,
    pub resolution: usize,
    pub epoch: u32,
    pub iteration: u32,
}

impl SyntheticBatch {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<u32>,
        epoch: u32,
        iteration: u32,
    ) -> Result<Self> {
        let s = images.shape().to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != s[3] {
            return Err(Error::ShapeMismatch {
                op: "synthetic_batch",
                detail: format!("expected (B, 3, e, e), got {:?}", s),
            });
        }
        if s[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "synthetic_batch",
                detail: format!("{} images vs {} labels", s[0], labels.len()),
            });
        }
        images.check_finite("synthetic batch")?;
        Ok(SyntheticBatch { resolution: s[2], images, labels, epoch, iteration })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Pixel-budget ledger: capacity fixed at construction, spending monotone.
#[derive(Debug, Clone)]
pub struct BudgetLedger {
    pub base_resolution: usize,
    pub capacity: Units,
    pub spent: Units,
}

impl BudgetLedger {
    pub fn remaining(&self) -> Units {
        self.capacity - self.spent
    }
}

/// Result of one append.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AppendOutcome {
    /// Images actually stored (possibly fewer than offered).
    pub stored: usize,
    /// True when the batch was cut to fit; the pool is now closed.
    pub truncated: bool,
}

pub struct MemoryPool {
    batches: Vec<SyntheticBatch>,
    ledger: BudgetLedger,
    rng: SplitMix64,
    exhausted: bool,
}

impl MemoryPool {
    pub fn new(base_resolution: usize, capacity: Units, seed: u64) -> Self {
        MemoryPool {
            batches: Vec::new(),
            ledger: BudgetLedger {
                base_resolution,
                capacity,
                spent: Ratio::new(0, 1),
            },
            rng: SplitMix64::new(seed),
            exhausted: false,
        }
    }

    pub fn ledger(&self) -> &BudgetLedger {
        &self.ledger
    }

    pub fn exhausted(&self) -> bool {
        self.exhausted
    }

    /// Restore the exhaustion flag from trainer state; the pool file itself
    /// can only encode the spent == capacity case.
    pub fn set_exhausted(&mut self, flag: bool) {
        self.exhausted = flag;
    }

    pub fn batches(&self) -> &[SyntheticBatch] {
        &self.batches
    }

    pub fn image_count(&self) -> usize {
        self.batches.iter().map(|b| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    /// Spend recomputed from the stored contents; the ledger must always
    /// equal this exactly.
    pub fn recompute_spent(&self) -> Units {
        let mut total = Ratio::new(0u64, 1);
        for b in &self.batches {
            total += cost_units(b.resolution, self.ledger.base_resolution).unwrap()
                * Ratio::from_integer(b.len() as u64);
        }
        total
    }

    /// Store a batch, charging the ledger. If the whole batch does not fit,
    /// it is truncated to the affordable prefix and the pool closes; any
    /// later append is an error.
    pub fn append(&mut self, batch: SyntheticBatch) -> Result<AppendOutcome> {
        if self.exhausted {
            return Err(Error::InvalidArgument(
                "append to a budget-exhausted pool".to_string(),
            ));
        }
        let per_image = cost_units(batch.resolution, self.ledger.base_resolution)?;
        let remaining = self.ledger.remaining();
        let full_cost = per_image * Ratio::from_integer(batch.len() as u64);
        let (keep, truncated) = if full_cost <= remaining {
            (batch.len(), false)
        } else {
            ((remaining / per_image).to_integer() as usize, true)
        };
        if keep > 0 {
            let stored = if keep == batch.len() {
                batch
            } else {
                let px = 3 * batch.resolution * batch.resolution;
                let images = Tensor::from_parts(
                    vec![keep, 3, batch.resolution, batch.resolution],
                    batch.images.data()[..keep * px].to_vec(),
                );
                SyntheticBatch {
                    images,
                    labels: batch.labels[..keep].to_vec(),
                    resolution: batch.resolution,
                    epoch: batch.epoch,
                    iteration: batch.iteration,
                }
            };
            let quantized = SyntheticBatch {
                images: quantize_f16(&stored.images),
                ..stored
            };
            self.ledger.spent += per_image * Ratio::from_integer(keep as u64);
            self.batches.push(quantized);
        }
        if truncated || self.ledger.spent == self.ledger.capacity {
            self.exhausted = true;
        }
        Ok(AppendOutcome { stored: keep, truncated })
    }

    /// Uniform sample with replacement; the whole minibatch shares one
    /// resolution, picked with probability proportional to stored counts.
    pub fn sample(&mut self, batch_size: usize) -> Result<(Tensor<f32>, Vec<u32>, usize)> {
        if self.batches.is_empty() {
            return Err(Error::InvalidArgument("sample from an empty pool".to_string()));
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument("sample of zero images".to_string()));
        }
        // Resolution buckets in ascending-resolution order.
        let mut resolutions: Vec<usize> = self.batches.iter().map(|b| b.resolution).collect();
        resolutions.sort_unstable();
        resolutions.dedup();
        let counts: Vec<usize> = resolutions
            .iter()
            .map(|&e| self.batches.iter().filter(|b| b.resolution == e).map(|b| b.len()).sum())
            .collect();
        let total: usize = counts.iter().sum();
        let mut pick = self.rng.below(total as u64) as usize;
        let mut chosen = 0usize;
        for (i, &c) in counts.iter().enumerate() {
            if pick < c {
                chosen = i;
                break;
            }
            pick -= c;
        }
        let e = resolutions[chosen];
        let bucket: Vec<&SyntheticBatch> =
            self.batches.iter().filter(|b| b.resolution == e).collect();
        let bucket_count = counts[chosen];
        let px = 3 * e * e;
        let mut data = Vec::with_capacity(batch_size * px);
        let mut labels = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let mut idx = self.rng.below(bucket_count as u64) as usize;
            for b in &bucket {
                if idx < b.len() {
                    data.extend_from_slice(&b.images.data()[idx * px..(idx + 1) * px]);
                    labels.push(b.labels[idx]);
                    break;
                }
                idx -= b.len();
            }
        }
        Ok((Tensor::from_parts(vec![batch_size, 3, e, e], data), labels, e))
    }

    pub fn rng_state(&self) -> u64 {
        self.rng.state()
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut payload = Vec::new();
        payload.extend_from_slice(&POOL_VERSION.to_le_bytes());
        payload.extend_from_slice(&(self.ledger.base_resolution as u32).to_le_bytes());
        payload.extend_from_slice(&self.ledger.capacity.numer().to_le_bytes());
        payload.extend_from_slice(&self.ledger.capacity.denom().to_le_bytes());
        payload.extend_from_slice(&self.ledger.spent.numer().to_le_bytes());
        payload.extend_from_slice(&self.ledger.spent.denom().to_le_bytes());
        payload.extend_from_slice(&(self.batches.len() as u32).to_le_bytes());
        for b in &self.batches {
            payload.extend_from_slice(&(b.len() as u32).to_le_bytes());
            payload.extend_from_slice(&(b.resolution as u32).to_le_bytes());
            for &y in &b.labels {
                payload.extend_from_slice(&y.to_le_bytes());
            }
            for &v in b.images.data() {
                payload.extend_from_slice(&f16::from_f32(v).to_le_bytes());
            }
        }
        payload.extend_from_slice(&self.rng.state().to_le_bytes());
        let crc = crc32fast::hash(&payload);
        let mut w = File::create(path)?;
        w.write_all(POOL_MAGIC)?;
        w.write_all(&payload)?;
        w.write_all(&crc.to_le_bytes())?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<MemoryPool> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 12 || &bytes[..8] != POOL_MAGIC {
            return Err(Error::Format("bad pool magic".to_string()));
        }
        let payload = &bytes[8..bytes.len() - 4];
        let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        if crc32fast::hash(payload) != stored_crc {
            return Err(Error::Format("pool checksum mismatch".to_string()));
        }
        let mut cur = std::io::Cursor::new(payload);
        let version = crate::wire::read_u32(&mut cur, "pool version")?;
        if version != POOL_VERSION {
            return Err(Error::Format(format!(
                "pool version {version}, expected {POOL_VERSION}"
            )));
        }
        let l = crate::wire::read_u32(&mut cur, "pool base resolution")? as usize;
        let cap_n = crate::wire::read_u64(&mut cur, "pool capacity numerator")?;
        let cap_d = crate::wire::read_u64(&mut cur, "pool capacity denominator")?;
        let spent_n = crate::wire::read_u64(&mut cur, "pool spent numerator")?;
        let spent_d = crate::wire::read_u64(&mut cur, "pool spent denominator")?;
        if cap_d == 0 || spent_d == 0 {
            return Err(Error::Format("zero denominator in pool ledger".to_string()));
        }
        let batch_count = crate::wire::read_u32(&mut cur, "pool batch count")?;
        let mut batches = Vec::with_capacity(batch_count as usize);
        for _ in 0..batch_count {
            let b = crate::wire::read_u32(&mut cur, "pool batch size")? as usize;
            let e = crate::wire::read_u32(&mut cur, "pool batch resolution")? as usize;
            let mut labels = Vec::with_capacity(b);
            for _ in 0..b {
                labels.push(crate::wire::read_u32(&mut cur, "pool label")?);
            }
            let px = 3 * e * e;
            let mut data = Vec::with_capacity(b * px);
            for _ in 0..b * px {
                let mut hb = [0u8; 2];
                cur.read_exact(&mut hb)
                    .map_err(|_| Error::Format("truncated pool pixels".to_string()))?;
                data.push(f16::from_le_bytes(hb).to_f32());
            }
            batches.push(SyntheticBatch {
                images: Tensor::from_parts(vec![b, 3, e, e], data),
                labels,
                resolution: e,
                epoch: 0,
                iteration: 0,
            });
        }
        let rng_state = crate::wire::read_u64(&mut cur, "pool rng state")?;
        if (cur.position() as usize) != payload.len() {
            return Err(Error::Format("trailing bytes in pool payload".to_string()));
        }
        let ledger = BudgetLedger {
            base_resolution: l,
            capacity: Ratio::new(cap_n, cap_d),
            spent: Ratio::new(spent_n, spent_d),
        };
        let exhausted = ledger.spent == ledger.capacity;
        let pool = MemoryPool {
            batches,
            ledger,
            rng: SplitMix64::from_state(rng_state),
            exhausted,
        };
        if pool.recompute_spent() != pool.ledger.spent {
            return Err(Error::Format(
                "pool ledger does not match stored contents".to_string(),
            ));
        }
        Ok(pool)
    }

    /// Reject pools recorded at a different base resolution.
    pub fn validate_base_resolution(&self, l: usize) -> Result<()> {
        if self.ledger.base_resolution != l {
            return Err(Error::InvalidArgument(format!(
                "pool was recorded at base resolution {}, active config uses {}",
                self.ledger.base_resolution, l
            )));
        }
        Ok(())
    }
}

/// Round every pixel to the nearest representable 16-bit float.
fn quantize_f16(t: &Tensor<f32>) -> Tensor<f32> {
    Tensor::from_parts(
        t.shape().to_vec(),
        t.data().iter().map(|&v| f16::from_f32(v).to_f32()).collect(),
    )
}
