//! Finite-difference check of every parameter gradient of the composite
//! pretraining loss on a small mixed batch.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{FusionConfig, FIRST_WORD_TOKEN};
use crate::data::{DomainLabel, MixedSample};
use crate::embedding::{Region, TextInput, VisualInput};
use crate::error::Result;
use crate::model::{init_params, ModelVars};
use crate::objectives::{combined_loss, sample_terms, CorruptionPlan, LossWeights, MaskedRegion, MaskedToken};
use crate::params::ParamStore;
use crate::tape::{OpKind, Tape};

pub const FD_STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so entries whose gradient is
/// (numerically) zero compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;
/// Entries whose two-point estimate is off by more than this are re-measured
/// with the four-point stencil.
const REFINE_ABOVE: f64 = TOLERANCE / 4.0;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub max_rel: f64,
    pub n_checked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupError>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel <= self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.groups.iter().map(|g| g.name.len()).max().unwrap_or(0);
        for g in &self.groups {
            let verdict = if g.max_rel <= self.tolerance { "ok" } else { "FAIL" };
            writeln!(f, "{:width$}  max_rel={:.3e}  n={}  {verdict}", g.name, g.max_rel, g.n_checked)?;
        }
        writeln!(
            f,
            "gradcheck {}: worst {:.3e} (tolerance {:.0e})",
            if self.passed() { "passed" } else { "failed" },
            self.worst(),
            self.tolerance
        )
    }
}

/// Three samples, one per modality mix: a paired generic sample (domain
/// ignored), a harmful text-only sample and a safe image-only sample, each
/// with at least one masked token or region.
pub fn probe_batch(cfg: &FusionConfig, seed: u64) -> (Vec<MixedSample>, Vec<CorruptionPlan>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_tok = cfg.max_text_len.min(4);
    let n_reg = cfg.max_regions.min(3);
    let mut text = || TextInput::caption((0..n_tok).map(|_| rng.gen_range(FIRST_WORD_TOKEN..cfg.word_end())).collect());
    let (t0, t1) = (text(), text());
    let mut image = || {
        let mut feat = || (0..cfg.d_v).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let mut regions = vec![Region::full_image(feat())];
        for k in 1..n_reg {
            let class = k % cfg.n_detector_classes;
            let mut scores = vec![0.2 / (cfg.n_detector_classes - 1).max(1) as f64; cfg.n_detector_classes];
            scores[class] = 0.8;
            regions.push(Region {
                label: Some(class),
                bbox: [0.05 * k as f64, 0.1, 0.5 + 0.1 * k as f64, 0.9],
                feature: feat(),
                detector_scores: (cfg.n_detector_classes > 1).then_some(scores),
            });
        }
        VisualInput { regions }
    };
    let (v0, v2) = (image(), image());
    let mk = |id: &str, text, image, domain_label| MixedSample {
        id: id.into(),
        text,
        image,
        domain_label,
        task_label: None,
        source: "gradcheck".into(),
    };
    let samples = vec![
        mk("paired", Some(t0.clone()), Some(v0.clone()), DomainLabel::Ignore),
        mk("text", Some(t1.clone()), None, DomainLabel::Harmful),
        mk("image", None, Some(v2.clone()), DomainLabel::Safe),
    ];
    let roi_target = |v: &VisualInput| {
        v.regions
            .get(1)
            .map(|r| MaskedRegion { region: 1, target: r.detector_scores.clone().unwrap_or_else(|| vec![1.0]) })
    };
    let plans = vec![
        CorruptionPlan {
            mlm: vec![MaskedToken { position: n_tok - 1, original: t0.token_ids[n_tok - 1] }],
            swapped_text: None,
            roi: roi_target(&v0).into_iter().collect(),
        },
        CorruptionPlan { mlm: vec![MaskedToken { position: 0, original: t1.token_ids[0] }], ..Default::default() },
        CorruptionPlan { roi: roi_target(&v2).into_iter().collect(), ..Default::default() },
    ];
    (samples, plans)
}

struct Problem<'a> {
    cfg: &'a FusionConfig,
    weights: LossWeights,
    samples: Vec<MixedSample>,
    plans: Vec<CorruptionPlan>,
}

impl Problem<'_> {
    fn build(&self, tape: &mut Tape, params: &ParamStore) -> Result<(crate::params::BoundParams, crate::tape::Var)> {
        let (bound, vars) = ModelVars::bind(tape, params, self.cfg)?;
        let terms = self
            .samples
            .iter()
            .zip(&self.plans)
            .map(|(s, p)| sample_terms(tape, s, p, &vars, self.cfg))
            .collect::<Result<Vec<_>>>()?;
        let (loss, _) = combined_loss(tape, &terms, &self.weights)?;
        Ok((bound, loss))
    }

    fn loss(&self, params: &ParamStore) -> Result<f64> {
        let mut tape = Tape::new();
        let (_, loss) = self.build(&mut tape, params)?;
        Ok(tape.value(loss).item())
    }
}

/// Compares backprop against central differences for every scalar of every
/// parameter; one report line per parameter tensor.
pub fn gradcheck(cfg: &FusionConfig, weights: LossWeights, seed: u64) -> Result<GradcheckReport> {
    run(cfg, weights, seed, None)
}

/// As [`gradcheck`], with the backward rule of `kind` scaled by `factor`.
#[doc(hidden)]
pub fn gradcheck_with_fault(
    cfg: &FusionConfig,
    weights: LossWeights,
    seed: u64,
    kind: OpKind,
    factor: f64,
) -> Result<GradcheckReport> {
    run(cfg, weights, seed, Some((kind, factor)))
}

fn run(cfg: &FusionConfig, weights: LossWeights, seed: u64, fault: Option<(OpKind, f64)>) -> Result<GradcheckReport> {
    cfg.validate()?;
    let mut params = init_params(cfg, seed)?;
    let (samples, plans) = probe_batch(cfg, seed);
    let problem = Problem { cfg, weights, samples, plans };
    let mut tape = Tape::new();
    if let Some((kind, factor)) = fault {
        tape.inject_backward_fault(kind, factor);
    }
    let (bound, loss) = problem.build(&mut tape, &params)?;
    tape.backward(loss)?;
    params.zero_grad();
    params.absorb_grads(&tape, &bound);

    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut groups = Vec::with_capacity(names.len());
    for name in names {
        let analytic = params.get(&name).expect("listed").grad().map(<[f64]>::to_vec);
        let n = params.get(&name).expect("listed").len();
        let analytic = analytic.unwrap_or_else(|| vec![0.0; n]);
        let mut max_rel: f64 = 0.0;
        for i in 0..n {
            let original = params.get(&name).expect("listed").data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                params.get_mut(&name).expect("listed").data_mut()[i] = original + offset;
                problem.loss(&params)
            };
            let (p1, m1) = (at(FD_STEP)?, at(-FD_STEP)?);
            let mut r = relative_error(analytic[i], (p1 - m1) / (2.0 * FD_STEP));
            if r > REFINE_ABOVE {
                // the two-point estimate carries an O(h^2) error of its own
                let (p2, m2) = (at(2.0 * FD_STEP)?, at(-2.0 * FD_STEP)?);
                r = relative_error(analytic[i], (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * FD_STEP));
            }
            params.get_mut(&name).expect("listed").data_mut()[i] = original;
            max_rel = max_rel.max(r);
        }
        groups.push(GroupError { name, max_rel, n_checked: n });
    }
    Ok(GradcheckReport { groups, tolerance: TOLERANCE })
}
