//! Model dimensions and the vocabulary layout shared by text and region labels.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Reserved id; padding never goes through the token table.
pub const PAD_TOKEN: usize = 0;
/// Replacement id for masked text tokens.
pub const MASK_TOKEN: usize = 1;
/// First ordinary word id.
pub const FIRST_WORD_TOKEN: usize = 2;

/// Source of the positional term of region embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VisualPosition {
    /// Affine projection of the normalized bounding box.
    Bbox,
    /// Learned table indexed by the region's position in the sequence
    /// (ablation variant; breaks region-order invariance).
    Index,
}

impl fmt::Display for VisualPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VisualPosition::Bbox => "bbox",
            VisualPosition::Index => "index",
        })
    }
}

impl FromStr for VisualPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bbox" => Ok(Self::Bbox),
            "index" => Ok(Self::Index),
            other => Err(Error::Config(format!("unknown visual_position `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub n_detector_classes: usize,
    pub max_text_len: usize,
    pub max_regions: usize,
    /// Width of precomputed region features.
    pub d_v: usize,
    pub n_task_classes: usize,
    pub visual_position: VisualPosition,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            vocab: 256,
            n_detector_classes: 16,
            max_text_len: 16,
            max_regions: 8,
            d_v: 64,
            n_task_classes: 2,
            visual_position: VisualPosition::Bbox,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab", self.vocab),
            ("n_detector_classes", self.n_detector_classes),
            ("max_text_len", self.max_text_len),
            ("max_regions", self.max_regions),
            ("d_v", self.d_v),
            ("n_task_classes", self.n_task_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab < FIRST_WORD_TOKEN + self.n_detector_classes + 2 {
            return Err(Error::Config(format!(
                "vocab {} too small for {} detector label tokens",
                self.vocab, self.n_detector_classes
            )));
        }
        Ok(())
    }

    /// Total sequence length `3 + max_text_len + max_regions`.
    pub fn seq_len(&self) -> usize {
        3 + self.max_text_len + self.max_regions
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Token id carrying the label of detector class `class`; label tokens
    /// occupy the top `n_detector_classes` ids of the vocabulary.
    pub fn label_token(&self, class: usize) -> usize {
        self.vocab - self.n_detector_classes + class
    }

    /// Ordinary word ids: `FIRST_WORD_TOKEN..word_end()`.
    pub fn word_end(&self) -> usize {
        self.vocab - self.n_detector_classes
    }

    /// `key = value` lines, in a fixed order.
    pub fn to_lines(&self) -> Vec<String> {
        vec![
            format!("n_layers = {}", self.n_layers),
            format!("d_model = {}", self.d_model),
            format!("n_heads = {}", self.n_heads),
            format!("d_ff = {}", self.d_ff),
            format!("vocab = {}", self.vocab),
            format!("n_detector_classes = {}", self.n_detector_classes),
            format!("max_text_len = {}", self.max_text_len),
            format!("max_regions = {}", self.max_regions),
            format!("d_v = {}", self.d_v),
            format!("n_task_classes = {}", self.n_task_classes),
            format!("visual_position = {}", self.visual_position),
        ]
    }

    /// Applies one `key = value` setting. Returns `Ok(false)` for keys that
    /// are not model keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let parse = |v: &str| {
            v.parse::<usize>().map_err(|_| Error::Config(format!("`{key}` expects a non-negative integer, got `{v}`")))
        };
        match key {
            "n_layers" => self.n_layers = parse(value)?,
            "d_model" => self.d_model = parse(value)?,
            "n_heads" => self.n_heads = parse(value)?,
            "d_ff" => self.d_ff = parse(value)?,
            "vocab" => self.vocab = parse(value)?,
            "n_detector_classes" => self.n_detector_classes = parse(value)?,
            "max_text_len" => self.max_text_len = parse(value)?,
            "max_regions" => self.max_regions = parse(value)?,
            "d_v" => self.d_v = parse(value)?,
            "n_task_classes" => self.n_task_classes = parse(value)?,
            "visual_position" => self.visual_position = value.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}
