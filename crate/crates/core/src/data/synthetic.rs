//! Synthetic corpora with a planted cross-modal rule.
//!
//! The task corpus labels a sample positive iff its text contains a trigger
//! token AND one of its regions has a trigger class. Samples are drawn in
//! three equal strata: both triggers, text trigger only, image trigger only.
//! Within each stratum containing a given trigger, half the samples are
//! positive, so `P(label = 1 | trigger present) = 0.5` for either trigger.
//!
//! Region features are drawn around fixed per-class Gaussian prototypes,
//! shared by every generated corpus (the stand-in for a frozen detector).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::mix_seed;
use super::sample::{Corpus, CorpusDims, DomainLabel, MixedSample};
use crate::config::{FusionConfig, FIRST_WORD_TOKEN};
use crate::embedding::{Region, TextInput, VisualInput};
use crate::error::{Error, Result};

/// Standard deviation of region features around their class prototype.
pub const FEATURE_SIGMA: f64 = 0.3;
const PROTOTYPE_SEED: u64 = 0x5EED_F00D;
const DETECTOR_CONFIDENCE: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combination {
    And,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticRule {
    pub text_trigger: usize,
    /// Detector class.
    pub image_trigger: usize,
    pub combination: Combination,
    /// Probability of flipping each generated label.
    pub label_noise: f64,
}

impl SyntheticRule {
    pub fn validate(&self, cfg: &FusionConfig) -> Result<()> {
        if !(FIRST_WORD_TOKEN..cfg.word_end()).contains(&self.text_trigger) {
            return Err(Error::Data(format!(
                "text trigger {} outside word ids {}..{}",
                self.text_trigger,
                FIRST_WORD_TOKEN,
                cfg.word_end()
            )));
        }
        if self.image_trigger >= cfg.n_detector_classes {
            return Err(Error::Data(format!(
                "image trigger {} outside {} detector classes",
                self.image_trigger, cfg.n_detector_classes
            )));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::Data(format!("label_noise {} not in [0, 0.5)", self.label_noise)));
        }
        if cfg.max_text_len < 2 || cfg.max_regions < 2 || cfg.word_end() - FIRST_WORD_TOKEN < 2 {
            return Err(Error::Data("generator needs max_text_len >= 2 and max_regions >= 2".into()));
        }
        Ok(())
    }

    pub fn has_text_trigger(&self, s: &MixedSample) -> bool {
        s.text.as_ref().is_some_and(|t| t.token_ids.contains(&self.text_trigger))
    }

    pub fn has_image_trigger(&self, s: &MixedSample) -> bool {
        s.image.as_ref().is_some_and(|v| v.regions.iter().any(|r| r.label == Some(self.image_trigger)))
    }

    /// The noiseless rule.
    pub fn clean_label(&self, s: &MixedSample) -> bool {
        match self.combination {
            Combination::And => self.has_text_trigger(s) && self.has_image_trigger(s),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSplits {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
}

/// Fixed per-class feature prototypes; index `n_detector_classes` is the
/// whole-image prototype.
pub fn class_prototypes(cfg: &FusionConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(PROTOTYPE_SEED, cfg.d_v as u64));
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..=cfg.n_detector_classes).map(|_| (0..cfg.d_v).map(|_| normal.sample(&mut rng)).collect()).collect()
}

struct Generator<'a> {
    cfg: &'a FusionConfig,
    prototypes: Vec<Vec<f64>>,
    noise: Normal<f64>,
}

impl<'a> Generator<'a> {
    fn new(cfg: &'a FusionConfig) -> Self {
        Self { cfg, prototypes: class_prototypes(cfg), noise: Normal::new(0.0, FEATURE_SIGMA).unwrap() }
    }

    fn feature(&self, rng: &mut ChaCha8Rng, proto: usize) -> Vec<f64> {
        self.prototypes[proto].iter().map(|p| p + self.noise.sample(rng)).collect()
    }

    /// Word tokens, none equal to `avoid`, with `plant` placed at a random position.
    fn text(&self, rng: &mut ChaCha8Rng, avoid: Option<usize>, plant: Option<usize>) -> TextInput {
        let len = rng.gen_range(2..=self.cfg.max_text_len);
        let mut ids: Vec<usize> = (0..len)
            .map(|_| loop {
                let id = rng.gen_range(FIRST_WORD_TOKEN..self.cfg.word_end());
                if Some(id) != avoid {
                    break id;
                }
            })
            .collect();
        if let Some(t) = plant {
            let pos = rng.gen_range(0..len);
            ids[pos] = t;
        }
        TextInput::caption(ids)
    }

    fn image(&self, rng: &mut ChaCha8Rng, avoid: Option<usize>, plant: Option<usize>) -> VisualInput {
        let c = self.cfg.n_detector_classes;
        let min_total = if plant.is_some() { 2 } else { 1 };
        let total = rng.gen_range(min_total..=self.cfg.max_regions);
        let mut regions = vec![Region::full_image(self.feature(rng, c))];
        let mut classes: Vec<usize> = (1..total)
            .map(|_| loop {
                let k = rng.gen_range(0..c);
                if Some(k) != avoid {
                    break k;
                }
            })
            .collect();
        if let Some(k) = plant {
            let pos = rng.gen_range(0..classes.len());
            classes[pos] = k;
        }
        for class in classes {
            let x1 = rng.gen_range(0.0..0.8);
            let y1 = rng.gen_range(0.0..0.8);
            let x2 = rng.gen_range(x1 + 0.05..=1.0);
            let y2 = rng.gen_range(y1 + 0.05..=1.0);
            let mut scores = vec![(1.0 - DETECTOR_CONFIDENCE) / (c - 1).max(1) as f64; c];
            scores[class] = DETECTOR_CONFIDENCE;
            regions.push(Region {
                label: Some(class),
                bbox: [x1, y1, x2, y2],
                feature: self.feature(rng, class),
                detector_scores: if c > 1 { Some(scores) } else { None },
            });
        }
        VisualInput { regions }
    }
}

#[derive(Clone, Copy)]
enum Stratum {
    Both,
    TextOnly,
    ImageOnly,
}

fn split_sizes(n: usize, f: SplitFractions) -> Result<[usize; 3]> {
    let parts = [f.train, f.val, f.test];
    if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Data(format!("split fractions {parts:?} must be in [0,1] and sum to 1")));
    }
    let train = (n as f64 * f.train).round() as usize;
    let val = ((n as f64 * f.val).round() as usize).min(n - train);
    let sizes = [train, val, n - train - val];
    for (size, frac) in sizes.iter().zip(parts) {
        if frac > 0.0 && *size < 3 {
            return Err(Error::Data(format!(
                "infeasible stratification: a split of {size} samples cannot hold 3 strata"
            )));
        }
    }
    Ok(sizes)
}

/// Generates train/val/test corpora for `rule`. Every split carries noisy labels.
pub fn gen_synthetic(
    rule: &SyntheticRule,
    cfg: &FusionConfig,
    n: usize,
    fractions: SplitFractions,
    seed: u64,
) -> Result<SyntheticSplits> {
    cfg.validate()?;
    rule.validate(cfg)?;
    if n < 10 {
        return Err(Error::Data(format!("need at least 10 samples, got {n}")));
    }
    let sizes = split_sizes(n, fractions)?;
    let generator = Generator::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpora = Vec::with_capacity(3);
    for (name, size) in ["train", "val", "test"].into_iter().zip(sizes) {
        let mut strata: Vec<Stratum> = (0..size)
            .map(|i| match i % 3 {
                0 => Stratum::Both,
                1 => Stratum::TextOnly,
                _ => Stratum::ImageOnly,
            })
            .collect();
        strata.shuffle(&mut rng);
        let mut corpus = Corpus::new(CorpusDims::from(cfg));
        for (i, stratum) in strata.into_iter().enumerate() {
            let (has_t, has_i) = match stratum {
                Stratum::Both => (true, true),
                Stratum::TextOnly => (true, false),
                Stratum::ImageOnly => (false, true),
            };
            let text = generator.text(&mut rng, Some(rule.text_trigger), has_t.then_some(rule.text_trigger));
            let image = generator.image(&mut rng, Some(rule.image_trigger), has_i.then_some(rule.image_trigger));
            let clean = has_t && has_i;
            let flip = rng.gen_bool(rule.label_noise);
            corpus.samples.push(MixedSample {
                id: format!("{name}-{i:05}"),
                text: Some(text),
                image: Some(image),
                domain_label: DomainLabel::Ignore,
                task_label: Some(usize::from(clean ^ flip)),
                source: "synthetic-and".into(),
            });
        }
        corpora.push(corpus);
    }
    let test = corpora.pop().unwrap();
    let val = corpora.pop().unwrap();
    let train = corpora.pop().unwrap();
    Ok(SyntheticSplits { train, val, test })
}

/// `(samples with the text trigger, positives among them)`.
pub fn text_trigger_marginal(corpus: &Corpus, rule: &SyntheticRule) -> (usize, usize) {
    corpus
        .samples
        .iter()
        .filter(|s| rule.has_text_trigger(s))
        .fold((0, 0), |(n, pos), s| (n + 1, pos + usize::from(s.task_label == Some(1))))
}

/// Mixed pretraining corpus in equal thirds: text-only content-moderation
/// samples (harmful iff the text trigger appears), image-only samples
/// (harmful iff a trigger-class region appears), and generic paired samples
/// whose domain label is ignored.
pub fn gen_unimodal_cm(rule: &SyntheticRule, cfg: &FusionConfig, n: usize, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    rule.validate(cfg)?;
    let generator = Generator::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = Corpus::new(CorpusDims::from(cfg));
    for i in 0..n {
        let sample = match i % 3 {
            0 => {
                let harmful = rng.gen_bool(0.5);
                let text = generator.text(&mut rng, Some(rule.text_trigger), harmful.then_some(rule.text_trigger));
                MixedSample {
                    id: format!("cm-text-{i:05}"),
                    text: Some(text),
                    image: None,
                    domain_label: if harmful { DomainLabel::Harmful } else { DomainLabel::Safe },
                    task_label: None,
                    source: "cm-language".into(),
                }
            }
            1 => {
                let harmful = rng.gen_bool(0.5);
                let image = generator.image(&mut rng, Some(rule.image_trigger), harmful.then_some(rule.image_trigger));
                MixedSample {
                    id: format!("cm-image-{i:05}"),
                    text: None,
                    image: Some(image),
                    domain_label: if harmful { DomainLabel::Harmful } else { DomainLabel::Safe },
                    task_label: None,
                    source: "cm-vision".into(),
                }
            }
            _ => MixedSample {
                id: format!("vl-{i:05}"),
                text: Some(generator.text(&mut rng, None, None)),
                image: Some(generator.image(&mut rng, None, None)),
                domain_label: DomainLabel::Ignore,
                task_label: None,
                source: "generic-vl".into(),
            },
        };
        corpus.samples.push(sample);
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::to_jsonl_string;

    fn rule(noise: f64) -> SyntheticRule {
        SyntheticRule { text_trigger: 7, image_trigger: 3, combination: Combination::And, label_noise: noise }
    }

    const THIRDS: SplitFractions = SplitFractions { train: 0.6, val: 0.2, test: 0.2 };

    #[test]
    fn labels_follow_rule_without_noise() {
        let cfg = FusionConfig::default();
        let r = rule(0.0);
        let splits = gen_synthetic(&r, &cfg, 300, THIRDS, 1).unwrap();
        for s in splits.train.samples.iter().chain(&splits.test.samples) {
            s.validate(&cfg).unwrap();
            let both = r.has_text_trigger(s) && r.has_image_trigger(s);
            assert_eq!(s.task_label, Some(usize::from(both)));
            // every sample carries at least one trigger
            assert!(r.has_text_trigger(s) || r.has_image_trigger(s));
        }
    }

    #[test]
    fn split_sizes_follow_fractions() {
        let cfg = FusionConfig::default();
        let splits = gen_synthetic(&rule(0.05), &cfg, 100, THIRDS, 2).unwrap();
        assert_eq!((splits.train.len(), splits.val.len(), splits.test.len()), (60, 20, 20));
    }

    #[test]
    fn tiny_or_invalid_requests_fail() {
        let cfg = FusionConfig::default();
        assert!(gen_synthetic(&rule(0.0), &cfg, 9, THIRDS, 0).is_err());
        let skewed = SplitFractions { train: 0.9, val: 0.05, test: 0.05 };
        assert!(gen_synthetic(&rule(0.0), &cfg, 20, skewed, 0).is_err());
        assert!(gen_synthetic(&rule(0.5), &cfg, 100, THIRDS, 0).is_err());
        let bad = SyntheticRule { image_trigger: 99, ..rule(0.0) };
        assert!(gen_synthetic(&bad, &cfg, 100, THIRDS, 0).is_err());
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let cfg = FusionConfig::default();
        let a = gen_synthetic(&rule(0.05), &cfg, 60, THIRDS, 9).unwrap();
        let b = gen_synthetic(&rule(0.05), &cfg, 60, THIRDS, 9).unwrap();
        assert_eq!(to_jsonl_string(&a.train), to_jsonl_string(&b.train));
        assert_eq!(to_jsonl_string(&a.test), to_jsonl_string(&b.test));
        let c = gen_synthetic(&rule(0.05), &cfg, 60, THIRDS, 10).unwrap();
        assert_ne!(to_jsonl_string(&a.train), to_jsonl_string(&c.train));
    }

    #[test]
    fn text_trigger_marginal_is_half() {
        let cfg = FusionConfig::default();
        let r = rule(0.05);
        let all = SplitFractions { train: 1.0, val: 0.0, test: 0.0 };
        let splits = gen_synthetic(&r, &cfg, 10_000, all, 4).unwrap();
        let (n, pos) = text_trigger_marginal(&splits.train, &r);
        let p = pos as f64 / n as f64;
        assert!((p - 0.5).abs() < 0.02, "P(label=1 | text trigger) = {p}");
    }

    #[test]
    fn within_trigger_strata_single_trigger_accuracy_is_chance() {
        // Exhaustive count: among samples containing one trigger, the
        // best constant prediction is right at most 0.5 + 2 * noise of the time.
        let cfg = FusionConfig::default();
        let r = rule(0.05);
        let splits = gen_synthetic(&r, &cfg, 3000, THIRDS, 5).unwrap();
        for has in [&|s: &MixedSample| r.has_text_trigger(s) as u8, &|s: &MixedSample| r.has_image_trigger(s) as u8]
            as [&dyn Fn(&MixedSample) -> u8; 2]
        {
            let with: Vec<_> = splits.train.samples.iter().filter(|s| has(s) == 1).collect();
            let pos = with.iter().filter(|s| s.task_label == Some(1)).count();
            let best = pos.max(with.len() - pos) as f64 / with.len() as f64;
            assert!(best <= 0.5 + 2.0 * r.label_noise, "accuracy {best}");
        }
    }

    #[test]
    fn unimodal_cm_labels() {
        let cfg = FusionConfig::default();
        let r = rule(0.0);
        let c = gen_unimodal_cm(&r, &cfg, 90, 3).unwrap();
        for s in &c.samples {
            s.validate(&cfg).unwrap();
            match (s.text.is_some(), s.image.is_some()) {
                (true, false) => assert_eq!(
                    s.domain_label,
                    if r.has_text_trigger(s) { DomainLabel::Harmful } else { DomainLabel::Safe }
                ),
                (false, true) => assert_eq!(
                    s.domain_label,
                    if r.has_image_trigger(s) { DomainLabel::Harmful } else { DomainLabel::Safe }
                ),
                _ => assert_eq!(s.domain_label, DomainLabel::Ignore),
            }
        }
        assert_eq!(c.samples.iter().filter(|s| s.is_paired()).count(), 30);
    }
}
