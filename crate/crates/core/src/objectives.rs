//! Pretraining objectives: input corruption, the five per-sample losses and
//! their weighted batch combination.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{FusionConfig, MASK_TOKEN};
use crate::data::{mix_seed, DomainLabel, MixedSample};
use crate::embedding::{TextInput, VisualInput};
use crate::error::{Error, Result};
use crate::model::{encode, head_domain, head_itm, head_mlm, head_roi, ModelVars};
use crate::tape::{Tape, Target, Var};
use crate::tensor::Tensor;

/// Coefficients of the composite loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub omega: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, gamma: 1.0, lambda: 0.2, omega: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("omega", self.omega),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("loss weight {name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorruptionProbs {
    pub mlm: f64,
    pub itm: f64,
    pub roi: f64,
}

impl Default for CorruptionProbs {
    fn default() -> Self {
        Self { mlm: 0.15, itm: 0.5, roi: 0.15 }
    }
}

impl CorruptionProbs {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_mlm", self.mlm), ("p_itm", self.itm), ("p_roi", self.roi)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedToken {
    /// Index into the text.
    pub position: usize,
    pub original: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedRegion {
    /// Index into the region list.
    pub region: usize,
    pub target: Vec<f64>,
}

/// Everything random about one sample's corrupted view.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorruptionPlan {
    pub mlm: Vec<MaskedToken>,
    /// Replacement text when this sample is an ITM negative.
    pub swapped_text: Option<TextInput>,
    pub roi: Vec<MaskedRegion>,
}

impl CorruptionPlan {
    pub fn itm_is_negative(&self) -> bool {
        self.swapped_text.is_some()
    }

    /// The corrupted `(text, image)` inputs.
    pub fn apply(&self, sample: &MixedSample) -> (Option<TextInput>, Option<VisualInput>) {
        let mut text = self.swapped_text.clone().or_else(|| sample.text.clone());
        if let Some(t) = text.as_mut() {
            for m in &self.mlm {
                t.token_ids[m.position] = MASK_TOKEN;
            }
        }
        let mut image = sample.image.clone();
        if let Some(v) = image.as_mut() {
            for m in &self.roi {
                let r = &mut v.regions[m.region];
                r.label = None;
                r.feature.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        (text, image)
    }
}

/// Draws the corruption of one sample. `partners` are candidate swap-in
/// texts (other samples of the batch); a swap happens only for paired samples.
/// Order: ITM swap, then MLM masking of the resulting text, then RoI masking.
/// The whole-image region is never masked.
pub fn plan_corruption(
    sample: &MixedSample,
    partners: &[&TextInput],
    probs: CorruptionProbs,
    cfg: &FusionConfig,
    seed: u64,
) -> CorruptionPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = CorruptionPlan::default();
    if sample.is_paired() && !partners.is_empty() && rng.gen_bool(probs.itm) {
        let pick = rng.gen_range(0..partners.len());
        plan.swapped_text = Some(partners[pick].clone());
    }
    if let Some(text) = plan.swapped_text.as_ref().or(sample.text.as_ref()) {
        for (position, &original) in text.token_ids.iter().enumerate() {
            if rng.gen_bool(probs.mlm) {
                plan.mlm.push(MaskedToken { position, original });
            }
        }
    }
    if let Some(image) = &sample.image {
        for (region, r) in image.regions.iter().enumerate() {
            let Some(class) = r.label else { continue };
            if rng.gen_bool(probs.roi) {
                let target = r.detector_scores.clone().unwrap_or_else(|| {
                    let mut one_hot = vec![0.0; cfg.n_detector_classes];
                    one_hot[class] = 1.0;
                    one_hot
                });
                plan.roi.push(MaskedRegion { region, target });
            }
        }
    }
    plan
}

/// Plans a whole batch; sample `i` uses the stream `mix_seed(seed, i)` and
/// swaps in texts from the other samples of the batch.
pub fn plan_batch(
    batch: &[&MixedSample],
    probs: CorruptionProbs,
    cfg: &FusionConfig,
    seed: u64,
) -> Vec<CorruptionPlan> {
    batch
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let partners: Vec<&TextInput> =
                batch.iter().enumerate().filter(|&(j, _)| j != i).filter_map(|(_, o)| o.text.as_ref()).collect();
            plan_corruption(s, &partners, probs, cfg, mix_seed(seed, i as u64))
        })
        .collect()
}

fn zero(tape: &mut Tape) -> Var {
    tape.leaf(Tensor::scalar(0.0))
}

/// `max(0, cos(f_vl, f_v)) + max(0, cos(f_vl, f_l))`.
pub fn loss_con(tape: &mut Tape, f_vl: Var, f_v: Var, f_l: Var) -> Result<Var> {
    let cv = tape.cosine_similarity(f_vl, f_v)?;
    let cl = tape.cosine_similarity(f_vl, f_l)?;
    let hv = tape.relu(cv);
    let hl = tape.relu(cl);
    tape.add(hv, hl)
}

/// Mean cross-entropy of `logits` (one row per masked token) against the
/// original ids; a detached zero when nothing was masked.
pub fn loss_mlm(tape: &mut Tape, logits: Option<Var>, originals: &[usize]) -> Result<Var> {
    match logits {
        Some(l) if !originals.is_empty() => {
            let targets: Vec<Target> = originals.iter().map(|&id| Target::Class(id)).collect();
            tape.cross_entropy(l, &targets)
        }
        _ => Ok(zero(tape)),
    }
}

pub fn loss_itm(tape: &mut Tape, logit: Var, matched: bool) -> Result<Var> {
    tape.bce_with_logits(logit, if matched { 1.0 } else { 0.0 })
}

/// Mean soft cross-entropy over masked regions; a detached zero when none.
pub fn loss_roi(tape: &mut Tape, logits: Option<Var>, targets: &[Vec<f64>]) -> Result<Var> {
    match logits {
        Some(l) if !targets.is_empty() => {
            let targets: Vec<Target> = targets.iter().map(|t| Target::Probs(t.clone())).collect();
            tape.cross_entropy(l, &targets)
        }
        _ => Ok(zero(tape)),
    }
}

/// Binary cross-entropy for harmful/safe; ignored labels give a detached
/// zero, so nothing flows back into the domain head.
pub fn loss_domain(tape: &mut Tape, logit: Var, label: DomainLabel) -> Result<Var> {
    match label.target() {
        Some(y) => tape.bce_with_logits(logit, y),
        None => Ok(zero(tape)),
    }
}

/// Per-sample loss terms; `None` where a term does not apply.
#[derive(Clone, Copy, Debug, Default)]
pub struct SampleTerms {
    pub con: Option<Var>,
    pub mlm: Option<Var>,
    pub itm: Option<Var>,
    pub roi: Option<Var>,
    pub dom: Option<Var>,
}

/// Runs the corrupted sample through the model and builds every applicable term.
pub fn sample_terms(
    tape: &mut Tape,
    sample: &MixedSample,
    plan: &CorruptionPlan,
    vars: &ModelVars,
    cfg: &FusionConfig,
) -> Result<SampleTerms> {
    let (text, image) = plan.apply(sample);
    let (seq, out) = encode(tape, text.as_ref(), image.as_ref(), vars, cfg)?;
    let mut terms = SampleTerms::default();
    if sample.is_paired() {
        terms.con = Some(loss_con(tape, out.f_vl, out.f_v, out.f_l)?);
        let logit = head_itm(tape, out.f_vl, &vars.heads)?;
        terms.itm = Some(loss_itm(tape, logit, !plan.itm_is_negative())?);
    }
    if text.is_some() {
        let logits = if plan.mlm.is_empty() {
            None
        } else {
            let positions: Vec<usize> = plan.mlm.iter().map(|m| seq.text_offset() + m.position).collect();
            Some(head_mlm(tape, out.tokens, &positions, &vars.heads)?)
        };
        let originals: Vec<usize> = plan.mlm.iter().map(|m| m.original).collect();
        terms.mlm = Some(loss_mlm(tape, logits, &originals)?);
    }
    if image.is_some() {
        let logits = if plan.roi.is_empty() {
            None
        } else {
            let offset = seq.image_offset(cfg);
            let positions: Vec<usize> = plan.roi.iter().map(|m| offset + m.region).collect();
            Some(head_roi(tape, out.tokens, &positions, &vars.heads)?)
        };
        let targets: Vec<Vec<f64>> = plan.roi.iter().map(|m| m.target.clone()).collect();
        terms.roi = Some(loss_roi(tape, logits, &targets)?);
    }
    if sample.domain_label != DomainLabel::Ignore {
        let logit = head_domain(tape, out.f_vl, &vars.heads)?;
        terms.dom = Some(loss_domain(tape, logit, sample.domain_label)?);
    }
    Ok(terms)
}

/// Unweighted batch-mean of each term plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub con: f64,
    pub mlm: f64,
    pub itm: f64,
    pub roi: f64,
    pub dom: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.con, self.mlm, self.itm, self.roi, self.dom, self.total].iter().all(|v| v.is_finite())
    }

    /// `step=<n> con=<x> mlm=<x> itm=<x> roi=<x> dom=<x> total=<x> lr=<x>`
    pub fn log_line(&self, step: u64, lr: f64) -> String {
        format!("step={step} {self} lr={lr}")
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "con={} mlm={} itm={} roi={} dom={} total={}",
            self.con, self.mlm, self.itm, self.roi, self.dom, self.total
        )
    }
}

fn batch_mean(tape: &mut Tape, terms: impl Iterator<Item = Option<Var>>) -> Result<Var> {
    let present: Vec<Var> = terms.flatten().collect();
    let Some((&first, rest)) = present.split_first() else {
        return Ok(zero(tape));
    };
    let mut acc = first;
    for &v in rest {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.scale(acc, 1.0 / present.len() as f64))
}

/// Weighted sum of per-term batch means; each mean runs over the samples the
/// term applies to, and empty terms contribute zero.
pub fn combined_loss(tape: &mut Tape, terms: &[SampleTerms], w: &LossWeights) -> Result<(Var, LossReport)> {
    let con = batch_mean(tape, terms.iter().map(|t| t.con))?;
    let mlm = batch_mean(tape, terms.iter().map(|t| t.mlm))?;
    let itm = batch_mean(tape, terms.iter().map(|t| t.itm))?;
    let roi = batch_mean(tape, terms.iter().map(|t| t.roi))?;
    let dom = batch_mean(tape, terms.iter().map(|t| t.dom))?;
    let parts = [(con, w.alpha), (mlm, w.beta), (itm, w.gamma), (roi, w.lambda), (dom, w.omega)];
    let mut total = tape.scale(parts[0].0, parts[0].1);
    for &(v, weight) in &parts[1..] {
        let scaled = tape.scale(v, weight);
        total = tape.add(total, scaled)?;
    }
    let item = |v: Var| tape.value(v).item();
    let report = LossReport {
        con: item(con),
        mlm: item(mlm),
        itm: item(itm),
        roi: item(roi),
        dom: item(dom),
        total: item(total),
    };
    Ok((total, report))
}
