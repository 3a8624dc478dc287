//! Procedural shapes dataset with a held-out set of (shape, color) pairs.
//!
//! Each image shows one or two flat-colored shapes on a noisy gray
//! background and comes with a caption such as `a red square and a blue ring`.
//! Eight of the forty combinations are *novel*: they never occur in training
//! images or captions, so classifying them requires composing a color word
//! and a shape word that were only ever seen apart.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::mosaic::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
}

impl Shape {
    pub const ALL: [Shape; 5] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross, Shape::Ring];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
        }
    }

    /// Whether the pixel at offset `(u, v)` from the box center, in units of
    /// the half side length, belongs to the shape.
    fn covers(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Circle => u * u + v * v <= 1.0,
            Shape::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            // apex at the top, base at the bottom
            Shape::Triangle => (-0.9..=0.9).contains(&v) && u.abs() <= (v + 0.9) / 1.8,
            Shape::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            Shape::Ring => {
                let r2 = u * u + v * v;
                (0.36..=1.0).contains(&r2)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Black,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
        Color::White,
        Color::Black,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::White => "white",
            Color::Black => "black",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Cyan => [0.0, 1.0, 1.0],
            Color::Magenta => [1.0, 0.0, 1.0],
            Color::White => [1.0, 1.0, 1.0],
            Color::Black => [0.0, 0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Base,
    Novel,
}

/// A (shape, color) combination. Ids run `shape · 8 + color`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Concept {
    pub shape: Shape,
    pub color: Color,
}

impl Concept {
    pub const COUNT: usize = 40;

    pub fn from_id(id: usize) -> Self {
        Self {
            shape: Shape::ALL[id / 8],
            color: Color::ALL[id % 8],
        }
    }

    pub fn id(self) -> usize {
        self.shape as usize * 8 + self.color as usize
    }

    /// Held-out combinations: shape `j` with color `j` for `j < 5`, and shape
    /// `j − 5` with color `j` for `j = 5, 6, 7`. Every color and every shape
    /// keeps base combinations.
    pub fn split(self) -> Split {
        let (s, c) = (self.shape as usize, self.color as usize);
        if c % 5 == s && (c < 5 || s < 3) {
            Split::Novel
        } else {
            Split::Base
        }
    }

    pub fn all() -> impl Iterator<Item = Concept> {
        (0..Self::COUNT).map(Self::from_id)
    }

    pub fn base() -> Vec<Concept> {
        Self::all().filter(|c| c.split() == Split::Base).collect()
    }

    pub fn novel() -> Vec<Concept> {
        Self::all().filter(|c| c.split() == Split::Novel).collect()
    }
}

impl fmt::Display for Concept {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.color.name(), self.shape.name())
    }
}

/// Word-level vocabulary with `pad`, `start` and `end` specials.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    max_len: usize,
}

impl Vocabulary {
    pub const PAD: usize = 0;
    pub const START: usize = 1;
    pub const END: usize = 2;

    pub fn new(max_len: usize) -> Self {
        let mut words: Vec<String> = ["<pad>", "<start>", "<end>", "a", "and", "photo", "of"]
            .into_iter()
            .map(String::from)
            .collect();
        words.extend(Color::ALL.iter().map(|c| c.name().to_string()));
        words.extend(Shape::ALL.iter().map(|s| s.name().to_string()));
        Self { words, max_len }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// `[start, words…, end, pad…]`, exactly `max_len` ids.
    pub fn tokenize(&self, caption: &str) -> Result<Vec<usize>> {
        let mut ids = vec![Self::START];
        for w in caption.split_whitespace() {
            match self.id(w) {
                Some(id) if id > Self::END => ids.push(id),
                _ => return Err(Error::UnknownWord { word: w.to_string() }),
            }
        }
        ids.push(Self::END);
        if ids.len() > self.max_len {
            return Err(Error::Config(format!(
                "caption {caption:?} needs {} tokens, more than max_len {}",
                ids.len(),
                self.max_len
            )));
        }
        ids.resize(self.max_len, Self::PAD);
        Ok(ids)
    }

    /// Words between the start and end tokens, joined by single spaces.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::new();
        for &id in ids {
            match id {
                Self::START | Self::PAD => {}
                Self::END => break,
                _ => words.push(self.word(id).ok_or(Error::UnknownToken { id, vocab: self.len() })?),
            }
        }
        Ok(words.join(" "))
    }
}

/// `a photo of a {color} {shape}` for every concept, in concept order.
pub fn class_prompts(vocab: &Vocabulary, concepts: &[Concept]) -> Result<Vec<Vec<usize>>> {
    concepts
        .iter()
        .map(|c| vocab.tokenize(&format!("a photo of a {c}")))
        .collect()
}

pub fn caption_for(concepts: &[Concept]) -> String {
    concepts
        .iter()
        .map(|c| format!("a {c}"))
        .collect::<Vec<_>>()
        .join(" and ")
}

/// Parses a template caption back into its concepts.
pub fn parse_caption(caption: &str) -> Result<Vec<Concept>> {
    let mut out = Vec::new();
    for part in caption.split(" and ") {
        let words: Vec<&str> = part.split_whitespace().collect();
        let (color, shape) = match words.as_slice() {
            ["a", color, shape] => (*color, *shape),
            _ => return Err(Error::Dataset(format!("caption {caption:?} is not a template caption"))),
        };
        let color = Color::ALL.into_iter().find(|c| c.name() == color);
        let shape = Shape::ALL.into_iter().find(|s| s.name() == shape);
        match (color, shape) {
            (Some(color), Some(shape)) => out.push(Concept { shape, color }),
            _ => return Err(Error::Dataset(format!("caption {caption:?} names unknown concepts"))),
        }
    }
    Ok(out)
}

/// Which concepts a generated image may contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPolicy {
    /// Base concepts only.
    Train,
    /// All forty concepts.
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthObject {
    pub concept: Concept,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image: Image,
    pub caption: String,
    pub tokens: Vec<usize>,
    /// Concept ids present, in caption order.
    pub tags: Vec<usize>,
    pub objects: Vec<SynthObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub max_objects: usize,
    /// Standard deviation of the uniform background noise.
    pub noise: f64,
    /// Object side length as a fraction of the image size.
    pub object_size: [f64; 2],
    pub max_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            train_size: 4000,
            eval_size: 400,
            max_objects: 2,
            noise: 0.05,
            object_size: [0.35, 0.55],
            max_len: 12,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.object_size;
        if self.image_size < 16 {
            return Err(Error::Config(format!("image size {} is below 16", self.image_size)));
        }
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("object size range {lo}..{hi} is invalid")));
        }
        if self.max_objects == 0 || self.max_objects > 2 {
            return Err(Error::Config("max_objects must be 1 or 2".into()));
        }
        if !(0.0..=0.25).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} outside [0, 0.25]", self.noise)));
        }
        if self.train_size == 0 {
            return Err(Error::Config("train_size must be positive".into()));
        }
        Ok(())
    }
}

/// Derived per-sample generator: `seed XOR index`, on a stream per split.
pub fn sample_rng(seed: u64, index: usize, policy: SplitPolicy) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index as u64);
    rng.set_stream(match policy {
        SplitPolicy::Train => 0,
        SplitPolicy::Eval => 1,
    });
    rng
}

fn draw_concept<R: Rng + ?Sized>(rng: &mut R, policy: SplitPolicy) -> Concept {
    loop {
        let c = Concept::from_id(rng.random_range(0..Concept::COUNT));
        if policy == SplitPolicy::Eval || c.split() == Split::Base {
            return c;
        }
    }
}

/// Renders one sample; objects occupy disjoint square areas.
pub fn generate_sample<R: Rng + ?Sized>(rng: &mut R, policy: SplitPolicy, cfg: &SynthConfig) -> SynthSample {
    let s = cfg.image_size;
    let half_width = cfg.noise * 3f64.sqrt();
    let mut data = Vec::with_capacity(s * s * 3);
    for _ in 0..s * s {
        let v = (0.5 + half_width * (2.0 * rng.random::<f64>() - 1.0)) as f32;
        data.extend_from_slice(&[v, v, v]);
    }
    let mut image = Image::from_raw(s, s, data).expect("buffer sized s*s*3");

    let wanted = rng.random_range(1..=cfg.max_objects);
    let mut areas: Vec<[f64; 3]> = Vec::new();
    for _ in 0..wanted {
        for _attempt in 0..50 {
            let side =
                s as f64 * (cfg.object_size[0] + (cfg.object_size[1] - cfg.object_size[0]) * rng.random::<f64>());
            let x = rng.random::<f64>() * (s as f64 - side);
            let y = rng.random::<f64>() * (s as f64 - side);
            let free = areas.iter().all(|&[ax, ay, aside]| {
                x + side + 1.0 <= ax || ax + aside + 1.0 <= x || y + side + 1.0 <= ay || ay + aside + 1.0 <= y
            });
            if free {
                areas.push([x, y, side]);
                break;
            }
        }
    }

    let mut objects = Vec::with_capacity(areas.len());
    for [x, y, side] in areas {
        let concept = draw_concept(rng, policy);
        let (cx, cy, r) = (x + side / 2.0, y + side / 2.0, side / 2.0);
        let rgb = concept.color.rgb();
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for py in y.floor() as usize..((y + side).ceil() as usize).min(s) {
            for px in x.floor() as usize..((x + side).ceil() as usize).min(s) {
                let u = (px as f64 + 0.5 - cx) / r;
                let v = (py as f64 + 0.5 - cy) / r;
                if concept.shape.covers(u, v) {
                    image.set_pixel(px, py, rgb);
                    x0 = x0.min(px);
                    y0 = y0.min(py);
                    x1 = x1.max(px + 1);
                    y1 = y1.max(py + 1);
                }
            }
        }
        objects.push(SynthObject {
            concept,
            bbox: BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64),
        });
    }
    image.quantize();

    let concepts: Vec<Concept> = objects.iter().map(|o| o.concept).collect();
    let caption = caption_for(&concepts);
    let vocab = Vocabulary::new(cfg.max_len);
    let tokens = vocab.tokenize(&caption).expect("template captions fit the vocabulary");
    SynthSample {
        image,
        caption,
        tokens,
        tags: concepts.iter().map(|c| c.id()).collect(),
        objects,
    }
}

/// Training and evaluation samples regenerated from `(seed, config)`.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub seed: u64,
    pub config: SynthConfig,
    pub vocab: Vocabulary,
    pub train: Vec<SynthSample>,
    pub eval: Vec<SynthSample>,
}

impl SynthDataset {
    pub fn generate(seed: u64, config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let make = |policy, n| -> Vec<SynthSample> {
            (0..n)
                .map(|i| generate_sample(&mut sample_rng(seed, i, policy), policy, config))
                .collect()
        };
        let ds = Self {
            seed,
            config: config.clone(),
            vocab: Vocabulary::new(config.max_len),
            train: make(SplitPolicy::Train, config.train_size),
            eval: make(SplitPolicy::Eval, config.eval_size),
        };
        ds.check_leakage()?;
        Ok(ds)
    }

    /// Fails if any training caption or tag names a novel combination.
    pub fn check_leakage(&self) -> Result<()> {
        for (i, s) in self.train.iter().enumerate() {
            let from_caption = parse_caption(&s.caption)?;
            let leaked = from_caption
                .iter()
                .chain(s.objects.iter().map(|o| &o.concept))
                .find(|c| c.split() == Split::Novel);
            if let Some(c) = leaked {
                return Err(Error::Dataset(format!(
                    "training sample {i} contains novel concept {c}"
                )));
            }
        }
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        config_hash(self.seed, &self.config)
    }

    /// Writes `manifest.json` plus one PNG and one JSON record per sample
    /// under `train/` and `eval/`.
    pub fn write_cache(&self, dir: &Path) -> Result<()> {
        for (name, samples) in [("train", &self.train), ("eval", &self.eval)] {
            let sub = dir.join(name);
            fs::create_dir_all(&sub)?;
            for (i, s) in samples.iter().enumerate() {
                s.image.save_png(sub.join(format!("{i:06}.png")))?;
                let record = SampleRecord {
                    caption: s.caption.clone(),
                    tokens: s.tokens.clone(),
                    tags: s.tags.clone(),
                    objects: s.objects.clone(),
                };
                fs::write(sub.join(format!("{i:06}.json")), serde_json::to_string_pretty(&record)?)?;
            }
        }
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&self.manifest())? + "\n",
        )?;
        Ok(())
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            config_hash: self.config_hash(),
            seed: self.seed,
            config: self.config.clone(),
            train_count: self.train.len(),
            eval_count: self.eval.len(),
            vocabulary: (0..self.vocab.len())
                .filter_map(|i| self.vocab.word(i).map(String::from))
                .collect(),
        }
    }

    /// Loads a cache written by [`SynthDataset::write_cache`].
    pub fn read_cache(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let vocab = Vocabulary::new(manifest.config.max_len);
        if manifest.config_hash != config_hash(manifest.seed, &manifest.config) {
            return Err(Error::Dataset(format!(
                "manifest in {} has a stale config hash",
                dir.display()
            )));
        }
        let load = |name: &str, n: usize| -> Result<Vec<SynthSample>> {
            (0..n)
                .map(|i| {
                    let base = dir.join(name).join(format!("{i:06}"));
                    let image = Image::load_png(base.with_extension("png"))?;
                    let r: SampleRecord = serde_json::from_str(&fs::read_to_string(base.with_extension("json"))?)?;
                    Ok(SynthSample {
                        image,
                        caption: r.caption,
                        tokens: r.tokens,
                        tags: r.tags,
                        objects: r.objects,
                    })
                })
                .collect()
        };
        let ds = Self {
            seed: manifest.seed,
            train: load("train", manifest.train_count)?,
            eval: load("eval", manifest.eval_count)?,
            config: manifest.config,
            vocab,
        };
        ds.check_leakage()?;
        Ok(ds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub config: SynthConfig,
    pub train_count: usize,
    pub eval_count: usize,
    pub vocabulary: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SampleRecord {
    caption: String,
    tokens: Vec<usize>,
    tags: Vec<usize>,
    objects: Vec<SynthObject>,
}

/// SHA-256 of the seed and the JSON form of the dataset configuration.
pub fn config_hash(seed: u64, config: &SynthConfig) -> String {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(serde_json::to_vec(config).expect("config serializes"));
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concept_ids_round_trip_and_split_sizes() {
        for id in 0..Concept::COUNT {
            assert_eq!(Concept::from_id(id).id(), id);
        }
        assert_eq!(Concept::novel().len(), 8);
        assert_eq!(Concept::base().len(), 32);
        for color in Color::ALL {
            assert_eq!(Concept::novel().iter().filter(|c| c.color == color).count(), 1);
        }
        for shape in Shape::ALL {
            assert!(Concept::base().iter().any(|c| c.shape == shape));
        }
    }

    #[test]
    fn vocabulary_layout() {
        let v = Vocabulary::new(12);
        assert_eq!(v.len(), 20);
        assert_eq!(
            v.tokenize("").unwrap()[..3],
            [Vocabulary::START, Vocabulary::END, Vocabulary::PAD]
        );
        let err = v.tokenize("a purple circle").unwrap_err();
        assert!(err.to_string().contains("purple"));
        assert!(v.tokenize("a <end> circle").is_err());
    }

    #[test]
    fn parse_caption_inverts_caption_for() {
        let cs = [Concept::from_id(3), Concept::from_id(17)];
        assert_eq!(parse_caption(&caption_for(&cs)).unwrap(), cs);
    }
}
