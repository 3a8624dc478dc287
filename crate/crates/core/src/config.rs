//! Declarative run configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{TextConfig, VisionConfig};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::mosaic::{CropConfig, GridPolicy};
use crate::region::Sampling;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

/// `clim` trains regions of mosaicked canvases on their source captions;
/// `baseline` trains whole-image embeddings only, on the same number of images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Clim,
    Baseline,
}

/// How the source images of each mosaic are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Random,
    TextSimilarity,
    ImageSimilarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisionArch {
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for VisionArch {
    fn default() -> Self {
        let v = VisionConfig::default();
        Self {
            patch_size: v.patch_size,
            depth: v.depth,
            width: v.width,
            heads: v.heads,
            embed_dim: v.embed_dim,
            mlp_ratio: v.mlp_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextArch {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for TextArch {
    fn default() -> Self {
        let t = TextConfig::default();
        Self {
            depth: t.depth,
            width: t.width,
            heads: t.heads,
            mlp_ratio: t.mlp_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warm-up length; the rate then follows a cosine to zero.
    pub warmup_steps: u64,
    pub cosine: bool,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 100,
            cosine: true,
            grad_clip: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub mode: Mode,
    pub canvas_size: usize,
    pub grid: GridPolicy,
    pub n_plain: usize,
    pub n_mosaic: usize,
    pub composed_groups: usize,
    pub crop: CropConfig,
    pub sampling: SamplingMode,
    /// Candidate pool size for similarity-grouped mosaics.
    pub similarity_pool: usize,
    pub losses: LossWeights,
    /// Jittered sub-boxes per pseudo region offered to the max-size box rule.
    pub tag_candidates: usize,
    pub tag_candidate_area: [f64; 2],
    pub roi_sampling: Sampling,
    pub temperature_init: f64,
    pub bce_bias_init: f64,
    pub optim: OptimConfig,
    pub steps: u64,
    /// Zero-shot evaluation cadence in steps; 0 evaluates only at the end.
    pub eval_every: u64,
    pub log_every: u64,
    /// Evaluation images used at each cadence point (0 = all).
    pub eval_limit: usize,
    pub data_seed: u64,
    pub data: SynthConfig,
    pub vision: VisionArch,
    pub text: TextArch,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            mode: Mode::Clim,
            canvas_size: 64,
            grid: GridPolicy::default(),
            n_plain: 2,
            n_mosaic: 2,
            composed_groups: 4,
            crop: CropConfig::default(),
            sampling: SamplingMode::Random,
            similarity_pool: 64,
            losses: LossWeights::default(),
            tag_candidates: 10,
            tag_candidate_area: [0.3, 1.0],
            roi_sampling: Sampling::Fixed(2),
            temperature_init: 1.0 / 0.07,
            bce_bias_init: -2.0,
            optim: OptimConfig::default(),
            steps: 5000,
            eval_every: 1000,
            log_every: 50,
            eval_limit: 0,
            data_seed: 0,
            data: SynthConfig::default(),
            vision: VisionArch::default(),
            text: TextArch::default(),
        }
    }
}

impl RunConfig {
    /// Named starting points: `desk` (the defaults) and `paper`, the
    /// large-batch, low-learning-rate setting meant for a pretrained start.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::default()),
            "paper" => Ok(Self {
                n_plain: 64,
                n_mosaic: 64,
                optim: OptimConfig {
                    lr: 1e-5,
                    ..OptimConfig::default()
                },
                ..Self::default()
            }),
            other => Err(Error::Config(format!("unknown preset {other:?} (desk, paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_plain + self.n_mosaic == 0 {
            return bad("n_plain + n_mosaic must be at least 1".into());
        }
        self.grid.validate()?;
        self.crop.validate()?;
        self.losses.validate()?;
        self.data.validate()?;
        self.vision_config().validate()?;
        self.text_config(1).validate()?;
        if self.data.max_len < 9 {
            return bad(format!("max_len {} cannot hold template captions", self.data.max_len));
        }
        let largest = match &self.grid {
            GridPolicy::Fixed(n) => *n,
            GridPolicy::Random(v) => v.iter().copied().max().unwrap_or(1),
        };
        if self.canvas_size < largest * self.vision.patch_size {
            return bad(format!(
                "canvas {} is too small for a {largest}x{largest} grid of {}px patches",
                self.canvas_size, self.vision.patch_size
            ));
        }
        if self.sampling != SamplingMode::Random && self.similarity_pool < largest * largest {
            return bad(format!(
                "similarity_pool {} cannot fill a {largest}x{largest} mosaic",
                self.similarity_pool
            ));
        }
        if matches!(self.roi_sampling, Sampling::Fixed(0)) {
            return bad("roi_sampling must take at least one sample".into());
        }
        let [a0, a1] = self.tag_candidate_area;
        if !(0.0 < a0 && a0 <= a1 && a1 <= 1.0) {
            return bad(format!("tag_candidate_area {a0}..{a1} must lie in (0, 1]"));
        }
        if !(self.temperature_init >= 1.0 && self.temperature_init <= 100.0) {
            return bad(format!("temperature_init {} outside [1, 100]", self.temperature_init));
        }
        let o = &self.optim;
        if !(o.lr >= 0.0 && o.weight_decay >= 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2))
            || o.eps <= 0.0
            || o.grad_clip < 0.0
        {
            return bad(format!("invalid optimizer settings {o:?}"));
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        Ok(())
    }

    pub fn vision_config(&self) -> VisionConfig {
        let a = &self.vision;
        VisionConfig {
            image_size: self.canvas_size,
            patch_size: a.patch_size,
            depth: a.depth,
            width: a.width,
            heads: a.heads,
            embed_dim: a.embed_dim,
            mlp_ratio: a.mlp_ratio,
        }
    }

    pub fn text_config(&self, vocab_size: usize) -> TextConfig {
        let a = &self.text;
        TextConfig {
            vocab_size,
            max_len: self.data.max_len,
            depth: a.depth,
            width: a.width,
            heads: a.heads,
            embed_dim: self.vision.embed_dim,
            mlp_ratio: a.mlp_ratio,
        }
    }

    /// `(plain, mosaic)` images per batch after applying the mode.
    pub fn batch_mix(&self) -> (usize, usize) {
        match self.mode {
            Mode::Clim => (self.n_plain, self.n_mosaic),
            Mode::Baseline => (self.n_plain + self.n_mosaic, 0),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        Self::from_table(table)
    }

    /// Reads `path`, applies `key=value` overrides (dotted keys, TOML values;
    /// bare words are taken as strings) and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        Self::load_table(table, overrides)
    }

    /// [`RunConfig::load`] for an already parsed document.
    pub fn load_table(mut table: toml::Table, overrides: &[String]) -> Result<Self> {
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let config = Self::from_table(table)?;
        config.validate()?;
        Ok(config)
    }

    fn from_table(mut table: toml::Table) -> Result<Self> {
        let base = match table.remove("preset") {
            Some(toml::Value::String(name)) => Self::preset(&name)?,
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            None => Self::default(),
        };
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, table);
        toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(self.hash_bytes())
    }

    pub fn hash_bytes(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(json).into()
    }
}

/// Recursive merge. A table whose keys are not all present in the base (an
/// enum variant, or a misspelt field) replaces the base table wholesale.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if o.keys().all(|key| b.contains_key(key)) => {
                merge(b, o)
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Config(format!("empty key in {item:?}")))?;
    let mut node = table;
    for p in parts {
        node = match node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("{p} in {key:?} is not a table"))),
        };
    }
    node.insert(last.to_string(), value);
    Ok(())
}
