use crate::config::FusionConfig;
use crate::embedding::{TextInput, VisualInput};
use crate::error::{Error, Result};

/// Harmful/safe label for the domain objective; `Ignore` marks generic
/// samples that the domain loss skips.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DomainLabel {
    Ignore,
    Safe,
    Harmful,
}

impl DomainLabel {
    pub fn as_i8(self) -> i8 {
        match self {
            DomainLabel::Ignore => -1,
            DomainLabel::Safe => 0,
            DomainLabel::Harmful => 1,
        }
    }

    pub fn from_i64(v: i64) -> Result<Self> {
        match v {
            -1 => Ok(DomainLabel::Ignore),
            0 => Ok(DomainLabel::Safe),
            1 => Ok(DomainLabel::Harmful),
            other => Err(Error::Data(format!("domain_label must be -1, 0 or 1, got {other}"))),
        }
    }

    /// Binary target, or `None` when ignored.
    pub fn target(self) -> Option<f64> {
        match self {
            DomainLabel::Ignore => None,
            DomainLabel::Safe => Some(0.0),
            DomainLabel::Harmful => Some(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedSample {
    pub id: String,
    pub text: Option<TextInput>,
    pub image: Option<VisualInput>,
    pub domain_label: DomainLabel,
    pub task_label: Option<usize>,
    pub source: String,
}

impl MixedSample {
    pub fn is_paired(&self) -> bool {
        self.text.is_some() && self.image.is_some()
    }

    pub fn validate(&self, cfg: &FusionConfig) -> Result<()> {
        if self.text.is_none() && self.image.is_none() {
            return Err(Error::Data(format!("sample `{}` has neither text nor image", self.id)));
        }
        if let Some(t) = &self.text {
            t.validate(cfg)?;
        }
        if let Some(v) = &self.image {
            v.validate(cfg)?;
        }
        if let Some(label) = self.task_label {
            if label >= cfg.n_task_classes {
                return Err(Error::Data(format!(
                    "sample `{}` has task_label {label} but only {} classes",
                    self.id, cfg.n_task_classes
                )));
            }
        }
        Ok(())
    }
}

/// Dimensions every sample of a corpus must agree with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusDims {
    pub vocab_size: usize,
    pub n_detector_classes: usize,
    pub d_v: usize,
}

impl From<&FusionConfig> for CorpusDims {
    fn from(cfg: &FusionConfig) -> Self {
        Self { vocab_size: cfg.vocab, n_detector_classes: cfg.n_detector_classes, d_v: cfg.d_v }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub samples: Vec<MixedSample>,
    pub dims: CorpusDims,
}

impl Corpus {
    pub fn new(dims: CorpusDims) -> Self {
        Self { samples: Vec::new(), dims }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_task_labels(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.task_label.is_some())
    }
}
