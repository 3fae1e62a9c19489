//! Flat key-value training configuration: parsing, validation, and
//! round-trippable resolved output.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::losses::{AedEmbedding, LossWeights, MaskKind};
use crate::pool::{parse_ratio, Units};

/// Where class-representative embeddings come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmbeddingSourceConfig {
    /// Mean teacher embeddings of the first generated batch.
    ClassCenter,
    /// Embedding-table file path.
    File(String),
}

/// Inner/outer radii: fixed values or derived from the embedding table's
/// minimum pairwise distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RadiiConfig {
    Fixed { r_i: f64, r_o: f64 },
    Auto,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub iters_g: usize,
    pub steps_g: usize,
    /// Base student iteration count; the effective count is scaled by the
    /// data ratio.
    pub iters_s: usize,
    pub resolutions: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub alpha_ce: f64,
    pub alpha_adv: f64,
    pub alpha_bn: f64,
    pub alpha_cam: f64,
    pub alpha_ed: f64,
    pub alpha_aed: f64,
    pub radii: RadiiConfig,
    pub data_ratio: Units,
    pub seed: u64,
    pub threads: usize,
    pub mask_kind: String,
    pub mask_params: Vec<f64>,
    pub aed_embedding: AedEmbedding,
    pub embedding_source: EmbeddingSourceConfig,
    pub dataset: String,
    pub data_dir: String,
    pub teacher_ckpt: String,
    pub out_dir: String,
    pub student_batch: usize,
    pub gen_base_channels: usize,
    pub teacher_channels: Vec<usize>,
    pub student_channels: Vec<usize>,
    pub gen_lr: f64,
    pub student_lr: f64,
    pub student_weight_decay: f64,
    pub warmup_frac: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub snapshot_every: usize,
    pub dump_images: usize,
    pub record_timing: bool,
    pub eval_batch: usize,
    pub teacher_epochs: usize,
    pub teacher_lr: f64,
    pub teacher_momentum: f64,
    pub teacher_weight_decay: f64,
    pub teacher_batch: usize,
    pub teacher_subset: usize,
}

impl Default for TrainConfig {
    /// Desk-scale defaults mirroring the small-image row of the
    /// hyperparameter table: 32-pixel base data, resolutions {24, 28} with
    /// batches {130, 100}.
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            iters_g: 20,
            steps_g: 40,
            iters_s: 200,
            resolutions: vec![24, 28],
            batch_sizes: vec![130, 100],
            alpha_ce: 0.5,
            alpha_adv: 1.3,
            alpha_bn: 10.0,
            alpha_cam: 0.1,
            alpha_ed: 10.0,
            alpha_aed: 5.0,
            radii: RadiiConfig::Fixed { r_i: 0.015, r_o: 0.03 },
            data_ratio: parse_ratio("0.1").unwrap(),
            seed: 0,
            threads: 4,
            mask_kind: "full".to_string(),
            mask_params: vec![1.0],
            aed_embedding: AedEmbedding::Student,
            embedding_source: EmbeddingSourceConfig::ClassCenter,
            dataset: "cifar10".to_string(),
            data_dir: "data".to_string(),
            teacher_ckpt: "teacher.museckpt".to_string(),
            out_dir: "out".to_string(),
            student_batch: 128,
            gen_base_channels: 128,
            teacher_channels: vec![16, 32, 32],
            student_channels: vec![8, 16, 32],
            gen_lr: 4e-3,
            student_lr: 1e-3,
            student_weight_decay: 0.01,
            warmup_frac: 0.1,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            snapshot_every: 0,
            dump_images: 0,
            record_timing: false,
            eval_batch: 256,
            teacher_epochs: 10,
            teacher_lr: 0.1,
            teacher_momentum: 0.9,
            teacher_weight_decay: 5e-4,
            teacher_batch: 128,
            teacher_subset: 0,
        }
    }
}

const REQUIRED_KEYS: &[&str] = &[
    "epochs",
    "iters_g",
    "steps_g",
    "iters_s",
    "resolutions",
    "batch_sizes",
    "alpha_ce",
    "alpha_adv",
    "alpha_bn",
    "alpha_cam",
    "alpha_ed",
    "alpha_aed",
    "r_i",
    "r_o",
    "data_ratio",
    "seed",
    "threads",
    "mask_kind",
    "mask_params",
    "aed_embedding",
    "embedding_source",
    "dataset",
    "data_dir",
    "teacher_ckpt",
    "out_dir",
];

fn cfg_err(line: Option<usize>, msg: impl Into<String>) -> Error {
    Error::Config { line, message: msg.into() }
}

struct Raw {
    // key -> (line, value)
    map: BTreeMap<String, (usize, String)>,
}

impl Raw {
    fn parse(text: &str) -> Result<Raw> {
        let mut map = BTreeMap::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(Some(line_no), format!("expected `key = value`, got {raw_line:?}")))?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(cfg_err(Some(line_no), "empty key"));
            }
            if map.insert(key.clone(), (line_no, value)).is_some() {
                return Err(cfg_err(Some(line_no), format!("duplicate key `{key}`")));
            }
        }
        Ok(Raw { map })
    }

    fn take(&self, key: &str) -> Option<(usize, &str)> {
        self.map.get(key).map(|(l, v)| (*l, v.as_str()))
    }

    fn required(&self, key: &str) -> Result<(usize, &str)> {
        self.take(key)
            .ok_or_else(|| cfg_err(None, format!("missing required key `{key}`")))
    }

    fn parse_with<T>(
        &self,
        key: &str,
        default: Option<T>,
        f: impl Fn(&str) -> Option<T>,
    ) -> Result<T> {
        match (self.take(key), default) {
            (Some((line, v)), _) => {
                f(v).ok_or_else(|| cfg_err(Some(line), format!("cannot parse `{key}` from {v:?}")))
            }
            (None, Some(d)) => Ok(d),
            (None, None) => Err(cfg_err(None, format!("missing required key `{key}`"))),
        }
    }
}

fn parse_usize(s: &str) -> Option<usize> {
    s.parse().ok()
}

fn parse_f64(s: &str) -> Option<f64> {
    s.parse().ok()
}

fn parse_usize_list(s: &str) -> Option<Vec<usize>> {
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

fn parse_f64_list(s: &str) -> Option<Vec<f64>> {
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let raw = Raw::parse(text)?;
        for key in REQUIRED_KEYS {
            raw.required(key)?;
        }
        let d = TrainConfig::default();

        let radii = {
            let (li, ri) = raw.required("r_i")?;
            let (lo, ro) = raw.required("r_o")?;
            if ri == "auto" || ro == "auto" {
                if ri != "auto" || ro != "auto" {
                    return Err(cfg_err(Some(li), "r_i and r_o must both be `auto` or both numeric"));
                }
                RadiiConfig::Auto
            } else {
                let r_i = parse_f64(ri).ok_or_else(|| cfg_err(Some(li), "cannot parse r_i"))?;
                let r_o = parse_f64(ro).ok_or_else(|| cfg_err(Some(lo), "cannot parse r_o"))?;
                RadiiConfig::Fixed { r_i, r_o }
            }
        };
        let aed_embedding = {
            let (line, v) = raw.required("aed_embedding")?;
            match v {
                "student" => AedEmbedding::Student,
                "teacher" => AedEmbedding::Teacher,
                _ => return Err(cfg_err(Some(line), "aed_embedding must be `student` or `teacher`")),
            }
        };
        let embedding_source = {
            let (_, v) = raw.required("embedding_source")?;
            if v == "class_center" {
                EmbeddingSourceConfig::ClassCenter
            } else {
                EmbeddingSourceConfig::File(v.to_string())
            }
        };
        let data_ratio = {
            let (line, v) = raw.required("data_ratio")?;
            parse_ratio(v).map_err(|e| cfg_err(Some(line), e.to_string()))?
        };

        let cfg = TrainConfig {
            epochs: raw.parse_with("epochs", None, parse_usize)?,
            iters_g: raw.parse_with("iters_g", None, parse_usize)?,
            steps_g: raw.parse_with("steps_g", None, parse_usize)?,
            iters_s: raw.parse_with("iters_s", None, parse_usize)?,
            resolutions: raw.parse_with("resolutions", None, parse_usize_list)?,
            batch_sizes: raw.parse_with("batch_sizes", None, parse_usize_list)?,
            alpha_ce: raw.parse_with("alpha_ce", None, parse_f64)?,
            alpha_adv: raw.parse_with("alpha_adv", None, parse_f64)?,
            alpha_bn: raw.parse_with("alpha_bn", None, parse_f64)?,
            alpha_cam: raw.parse_with("alpha_cam", None, parse_f64)?,
            alpha_ed: raw.parse_with("alpha_ed", None, parse_f64)?,
            alpha_aed: raw.parse_with("alpha_aed", None, parse_f64)?,
            radii,
            data_ratio,
            seed: raw.parse_with("seed", None, |s| s.parse().ok())?,
            threads: raw.parse_with("threads", None, parse_usize)?,
            mask_kind: raw.required("mask_kind")?.1.to_string(),
            mask_params: raw.parse_with("mask_params", None, parse_f64_list)?,
            aed_embedding,
            embedding_source,
            dataset: raw.required("dataset")?.1.to_string(),
            data_dir: raw.required("data_dir")?.1.to_string(),
            teacher_ckpt: raw.required("teacher_ckpt")?.1.to_string(),
            out_dir: raw.required("out_dir")?.1.to_string(),
            student_batch: raw.parse_with("student_batch", Some(d.student_batch), parse_usize)?,
            gen_base_channels: raw.parse_with("gen_base_channels", Some(d.gen_base_channels), parse_usize)?,
            teacher_channels: raw.parse_with("teacher_channels", Some(d.teacher_channels.clone()), parse_usize_list)?,
            student_channels: raw.parse_with("student_channels", Some(d.student_channels.clone()), parse_usize_list)?,
            gen_lr: raw.parse_with("gen_lr", Some(d.gen_lr), parse_f64)?,
            student_lr: raw.parse_with("student_lr", Some(d.student_lr), parse_f64)?,
            student_weight_decay: raw.parse_with("student_weight_decay", Some(d.student_weight_decay), parse_f64)?,
            warmup_frac: raw.parse_with("warmup_frac", Some(d.warmup_frac), parse_f64)?,
            bn_momentum: raw.parse_with("bn_momentum", Some(d.bn_momentum), parse_f64)?,
            bn_eps: raw.parse_with("bn_eps", Some(d.bn_eps), parse_f64)?,
            snapshot_every: raw.parse_with("snapshot_every", Some(d.snapshot_every), parse_usize)?,
            dump_images: raw.parse_with("dump_images", Some(d.dump_images), parse_usize)?,
            record_timing: raw.parse_with("record_timing", Some(d.record_timing), |s| match s {
                "true" => Some(true),
                "false" => Some(false),
                _ => None,
            })?,
            eval_batch: raw.parse_with("eval_batch", Some(d.eval_batch), parse_usize)?,
            teacher_epochs: raw.parse_with("teacher_epochs", Some(d.teacher_epochs), parse_usize)?,
            teacher_lr: raw.parse_with("teacher_lr", Some(d.teacher_lr), parse_f64)?,
            teacher_momentum: raw.parse_with("teacher_momentum", Some(d.teacher_momentum), parse_f64)?,
            teacher_weight_decay: raw.parse_with("teacher_weight_decay", Some(d.teacher_weight_decay), parse_f64)?,
            teacher_batch: raw.parse_with("teacher_batch", Some(d.teacher_batch), parse_usize)?,
            teacher_subset: raw.parse_with("teacher_subset", Some(d.teacher_subset), parse_usize)?,
        };
        // unknown keys are rejected to catch typos early
        let known: Vec<&str> = REQUIRED_KEYS
            .iter()
            .copied()
            .chain([
                "student_batch", "gen_base_channels", "teacher_channels", "student_channels",
                "gen_lr", "student_lr", "student_weight_decay", "warmup_frac", "bn_momentum",
                "bn_eps", "snapshot_every", "dump_images", "record_timing", "eval_batch",
                "teacher_epochs", "teacher_lr", "teacher_momentum", "teacher_weight_decay",
                "teacher_batch", "teacher_subset",
            ])
            .collect();
        for (key, (line, _)) in &raw.map {
            if !known.contains(&key.as_str()) {
                return Err(cfg_err(Some(*line), format!("unknown key `{key}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("iters_g", self.iters_g),
            ("steps_g", self.steps_g),
            ("iters_s", self.iters_s),
            ("threads", self.threads),
            ("student_batch", self.student_batch),
            ("eval_batch", self.eval_batch),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(cfg_err(None, format!("`{name}` must be >= 1")));
            }
        }
        if self.resolutions.is_empty() || self.resolutions.len() != self.batch_sizes.len() {
            return Err(cfg_err(
                None,
                format!(
                    "`resolutions` ({}) and `batch_sizes` ({}) must be non-empty and equal length",
                    self.resolutions.len(),
                    self.batch_sizes.len()
                ),
            ));
        }
        for &e in &self.resolutions {
            if e == 0 || e % 4 != 0 {
                return Err(cfg_err(None, format!("resolution {e} must be a positive multiple of 4")));
            }
        }
        let mut sorted = self.resolutions.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.resolutions.len() {
            return Err(cfg_err(None, "duplicate resolutions".to_string()));
        }
        for &b in &self.batch_sizes {
            if b < 2 {
                return Err(cfg_err(None, "per-resolution batch sizes must be >= 2".to_string()));
            }
        }
        if self.student_batch < 2 {
            return Err(cfg_err(None, "student_batch must be >= 2".to_string()));
        }
        if !(self.warmup_frac >= 0.0 && self.warmup_frac < 1.0) {
            return Err(cfg_err(None, "warmup_frac must lie in [0, 1)".to_string()));
        }
        self.loss_weights_with(match self.radii {
            RadiiConfig::Fixed { r_i, r_o } => (r_i, r_o),
            RadiiConfig::Auto => (0.015, 0.03), // placeholder only for alpha validation
        })
        .validate()
        .map_err(|e| cfg_err(None, e.to_string()))?;
        self.parsed_mask_kind().map_err(|e| cfg_err(None, e.to_string()))?;
        if self.effective_s() == 0 {
            return Err(cfg_err(
                None,
                format!(
                    "effective student iterations round(iters_s * data_ratio) = 0 (iters_s={}, data_ratio={})",
                    self.iters_s, self.data_ratio
                ),
            ));
        }
        Ok(())
    }

    /// Effective student iterations: round(iters_s * data_ratio), rounded
    /// half-up in exact integer arithmetic.
    pub fn effective_s(&self) -> usize {
        let num = *self.data_ratio.numer() as u128 * self.iters_s as u128;
        let den = *self.data_ratio.denom() as u128;
        ((2 * num + den) / (2 * den)) as usize
    }

    pub fn loss_weights_with(&self, radii: (f64, f64)) -> LossWeights {
        LossWeights {
            alpha_ce: self.alpha_ce,
            alpha_adv: self.alpha_adv,
            alpha_bn: self.alpha_bn,
            alpha_cam: self.alpha_cam,
            alpha_ed: self.alpha_ed,
            alpha_aed: self.alpha_aed,
            r_i: radii.0,
            r_o: radii.1,
        }
    }

    pub fn parsed_mask_kind(&self) -> Result<MaskKind> {
        match self.mask_kind.as_str() {
            "full" => {
                if self.mask_params.len() != 1 {
                    return Err(Error::InvalidArgument(
                        "mask_kind `full` takes exactly one parameter".into(),
                    ));
                }
                Ok(MaskKind::Full(self.mask_params[0]))
            }
            "gaussian" => {
                if self.mask_params.len() != 2 {
                    return Err(Error::InvalidArgument(
                        "mask_kind `gaussian` takes exactly two parameters (peak, sigma)".into(),
                    ));
                }
                Ok(MaskKind::Gaussian { peak: self.mask_params[0], sigma: self.mask_params[1] })
            }
            other => Err(Error::InvalidArgument(format!(
                "mask_kind must be `full` or `gaussian`, got {other:?}"
            ))),
        }
    }

    /// Render the fully resolved configuration. The output re-parses to an
    /// identical config, and includes the derived student iteration count
    /// as a comment.
    pub fn to_resolved_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# resolved configuration (derived S = {})", self.effective_s());
        let join = |xs: &[usize]| xs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        let joinf = |xs: &[f64]| xs.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "iters_g = {}", self.iters_g);
        let _ = writeln!(s, "steps_g = {}", self.steps_g);
        let _ = writeln!(s, "iters_s = {}", self.iters_s);
        let _ = writeln!(s, "resolutions = {}", join(&self.resolutions));
        let _ = writeln!(s, "batch_sizes = {}", join(&self.batch_sizes));
        let _ = writeln!(s, "alpha_ce = {}", self.alpha_ce);
        let _ = writeln!(s, "alpha_adv = {}", self.alpha_adv);
        let _ = writeln!(s, "alpha_bn = {}", self.alpha_bn);
        let _ = writeln!(s, "alpha_cam = {}", self.alpha_cam);
        let _ = writeln!(s, "alpha_ed = {}", self.alpha_ed);
        let _ = writeln!(s, "alpha_aed = {}", self.alpha_aed);
        match self.radii {
            RadiiConfig::Fixed { r_i, r_o } => {
                let _ = writeln!(s, "r_i = {r_i}");
                let _ = writeln!(s, "r_o = {r_o}");
            }
            RadiiConfig::Auto => {
                let _ = writeln!(s, "r_i = auto");
                let _ = writeln!(s, "r_o = auto");
            }
        }
        let _ = writeln!(s, "data_ratio = {}/{}", self.data_ratio.numer(), self.data_ratio.denom());
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "threads = {}", self.threads);
        let _ = writeln!(s, "mask_kind = {}", self.mask_kind);
        let _ = writeln!(s, "mask_params = {}", joinf(&self.mask_params));
        let _ = writeln!(
            s,
            "aed_embedding = {}",
            match self.aed_embedding {
                AedEmbedding::Student => "student",
                AedEmbedding::Teacher => "teacher",
            }
        );
        let _ = writeln!(
            s,
            "embedding_source = {}",
            match &self.embedding_source {
                EmbeddingSourceConfig::ClassCenter => "class_center",
                EmbeddingSourceConfig::File(p) => p.as_str(),
            }
        );
        let _ = writeln!(s, "dataset = {}", self.dataset);
        let _ = writeln!(s, "data_dir = {}", self.data_dir);
        let _ = writeln!(s, "teacher_ckpt = {}", self.teacher_ckpt);
        let _ = writeln!(s, "out_dir = {}", self.out_dir);
        let _ = writeln!(s, "student_batch = {}", self.student_batch);
        let _ = writeln!(s, "gen_base_channels = {}", self.gen_base_channels);
        let _ = writeln!(s, "teacher_channels = {}", join(&self.teacher_channels));
        let _ = writeln!(s, "student_channels = {}", join(&self.student_channels));
        let _ = writeln!(s, "gen_lr = {}", self.gen_lr);
        let _ = writeln!(s, "student_lr = {}", self.student_lr);
        let _ = writeln!(s, "student_weight_decay = {}", self.student_weight_decay);
        let _ = writeln!(s, "warmup_frac = {}", self.warmup_frac);
        let _ = writeln!(s, "bn_momentum = {}", self.bn_momentum);
        let _ = writeln!(s, "bn_eps = {}", self.bn_eps);
        let _ = writeln!(s, "snapshot_every = {}", self.snapshot_every);
        let _ = writeln!(s, "dump_images = {}", self.dump_images);
        let _ = writeln!(s, "record_timing = {}", self.record_timing);
        let _ = writeln!(s, "eval_batch = {}", self.eval_batch);
        let _ = writeln!(s, "teacher_epochs = {}", self.teacher_epochs);
        let _ = writeln!(s, "teacher_lr = {}", self.teacher_lr);
        let _ = writeln!(s, "teacher_momentum = {}", self.teacher_momentum);
        let _ = writeln!(s, "teacher_weight_decay = {}", self.teacher_weight_decay);
        let _ = writeln!(s, "teacher_batch = {}", self.teacher_batch);
        let _ = writeln!(s, "teacher_subset = {}", self.teacher_subset);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_text() -> String {
        let mut c = TrainConfig::default();
        c.dataset = "mnist".into();
        c.to_resolved_text()
    }

    #[test]
    fn parse_round_trip_fixed_point() {
        let text = minimal_text();
        let a = TrainConfig::parse(&text).unwrap();
        let b = TrainConfig::parse(&a.to_resolved_text()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_required_key_named_in_error() {
        let text: String = minimal_text()
            .lines()
            .filter(|l| !l.starts_with("alpha_cam"))
            .collect::<Vec<_>>()
            .join("\n");
        let err = TrainConfig::parse(&text).unwrap_err();
        assert!(err.to_string().contains("alpha_cam"), "{err}");
    }

    #[test]
    fn zero_generator_steps_rejected() {
        let text = minimal_text().replace("steps_g = 40", "steps_g = 0");
        let err = TrainConfig::parse(&text).unwrap_err();
        assert!(err.to_string().contains("steps_g"), "{err}");
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let mut text = minimal_text();
        text.push_str("mystery_key = 2\n");
        let err = TrainConfig::parse(&text).unwrap_err();
        assert!(err.to_string().contains("mystery_key"));
        assert!(err.to_string().contains("line"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "epochs 40\n";
        let err = TrainConfig::parse(text).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn effective_s_rounds_half_up_exactly() {
        let mut c = TrainConfig::default();
        c.iters_s = 2000;
        c.data_ratio = parse_ratio("0.02").unwrap();
        assert_eq!(c.effective_s(), 40);
        c.iters_s = 25;
        assert_eq!(c.effective_s(), 1); // 0.5 rounds up
        c.iters_s = 200;
        c.data_ratio = parse_ratio("0.1").unwrap();
        assert_eq!(c.effective_s(), 20);
    }

    #[test]
    fn effective_s_zero_is_rejected() {
        let text = minimal_text()
            .replace("iters_s = 200", "iters_s = 4")
            .replace("data_ratio = 1/10", "data_ratio = 0.02");
        let err = TrainConfig::parse(&text).unwrap_err();
        assert!(err.to_string().contains("effective student iterations"), "{err}");
    }

    #[test]
    fn auto_radii_must_be_paired() {
        let text = minimal_text().replace("r_i = 0.015", "r_i = auto");
        assert!(TrainConfig::parse(&text).is_err());
        let both = minimal_text()
            .replace("r_i = 0.015", "r_i = auto")
            .replace("r_o = 0.03", "r_o = auto");
        let cfg = TrainConfig::parse(&both).unwrap();
        assert_eq!(cfg.radii, RadiiConfig::Auto);
    }

    #[test]
    fn resolution_multiple_of_four_enforced() {
        let text = minimal_text().replace("resolutions = 24,28", "resolutions = 24,30");
        assert!(TrainConfig::parse(&text).is_err());
    }

    #[test]
    fn mask_kind_params_arity() {
        let text = minimal_text().replace("mask_params = 1", "mask_params = 1,2");
        assert!(TrainConfig::parse(&text).is_err());
        let gtext = minimal_text()
            .replace("mask_kind = full", "mask_kind = gaussian")
            .replace("mask_params = 1", "mask_params = 1,2");
        let cfg = TrainConfig::parse(&gtext).unwrap();
        assert_eq!(cfg.parsed_mask_kind().unwrap(), MaskKind::Gaussian { peak: 1.0, sigma: 2.0 });
    }
}
