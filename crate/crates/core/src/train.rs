//! Learning-rate schedule, run configuration, training loops and evaluation.

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::checkpoint::Checkpoint;
use crate::config::FusionConfig;
use crate::data::{batch_indices, mix_seed, Corpus, MixedSample};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{encode, head_task, init_params, is_task_head_param, is_trunk_param, ModelVars};
use crate::objectives::{combined_loss, plan_batch, sample_terms, CorruptionProbs, LossWeights, SampleTerms};
use crate::optim::{AdamWConfig, AdamWState};
use crate::params::ParamStore;
use crate::tape::{Tape, Target, Var};

/// Linear warmup to `base_lr`, then linear decay to zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !self.base_lr.is_finite() || self.base_lr < 0.0 {
            return Err(Error::Config(format!("base_lr = {} must be finite and >= 0", self.base_lr)));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps = {} exceeds total_steps = {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let step = step.min(self.total_steps);
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        if self.total_steps == self.warmup_steps {
            return 0.0;
        }
        self.base_lr * (self.total_steps - step) as f64 / (self.total_steps - self.warmup_steps) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Pretrain,
    Finetune,
    Eval,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Mode::Pretrain),
            "finetune" => Ok(Mode::Finetune),
            "eval" => Ok(Mode::Eval),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Which inputs reach the classifier at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Full,
    /// Image block replaced by PAD.
    TextOnly,
    /// Text block replaced by PAD.
    ImageOnly,
    /// Per-sample maximum of the text-only and image-only probabilities.
    MaxFuse,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "text_only" => Ok(Ablation::TextOnly),
            "image_only" => Ok(Ablation::ImageOnly),
            "max_fuse" => Ok(Ablation::MaxFuse),
            other => Err(Error::Config(format!("unknown ablation `{other}` (full, text_only, image_only, max_fuse)"))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::TextOnly => "text_only",
            Ablation::ImageOnly => "image_only",
            Ablation::MaxFuse => "max_fuse",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    /// Where the resulting checkpoint is written.
    pub out: Option<PathBuf>,
    pub model: FusionConfig,
    pub weights: LossWeights,
    pub corruption: CorruptionProbs,
    pub schedule: Schedule,
    pub adamw: AdamWConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze_trunk: bool,
    pub ablation: Ablation,
}

impl RunConfig {
    pub fn defaults(mode: Mode) -> Self {
        let schedule = match mode {
            Mode::Finetune => Schedule { base_lr: 3e-4, warmup_steps: 50, total_steps: 500 },
            _ => Schedule { base_lr: 1e-5, warmup_steps: 100, total_steps: 1000 },
        };
        Self {
            mode,
            train_data: None,
            eval_data: None,
            out: None,
            model: FusionConfig::default(),
            weights: LossWeights::default(),
            corruption: CorruptionProbs::default(),
            schedule,
            adamw: AdamWConfig::default(),
            batch_size: 32,
            seed: 0,
            freeze_trunk: false,
            ablation: Ablation::Full,
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. Relative paths are
    /// resolved against `base_dir`. Unknown keys are errors.
    pub fn parse(text: &str, base_dir: &Path, mode: Mode) -> Result<Self> {
        let mut cfg = Self::defaults(mode);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", i + 1)))?;
            cfg.set(key, value, base_dir).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, mode: Mode) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let cfg = Self::parse(&text, base, mode)?;
        for p in [&cfg.train_data, &cfg.eval_data].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("data file {} does not exist", p.display())));
            }
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str, base_dir: &Path) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("`{key}` has invalid value `{v}`")))
        }
        let path = |v: &str| base_dir.join(v);
        match key {
            "mode" => {
                let m: Mode = value.parse()?;
                if m != self.mode {
                    return Err(Error::Config(format!("config is for mode `{value}`")));
                }
            }
            "train_data" => self.train_data = Some(path(value)),
            "eval_data" => self.eval_data = Some(path(value)),
            "out" => self.out = Some(path(value)),
            "alpha" => self.weights.alpha = num(key, value)?,
            "beta" => self.weights.beta = num(key, value)?,
            "gamma" => self.weights.gamma = num(key, value)?,
            "lambda" => self.weights.lambda = num(key, value)?,
            "omega" => self.weights.omega = num(key, value)?,
            "p_mlm" => self.corruption.mlm = num(key, value)?,
            "p_itm" => self.corruption.itm = num(key, value)?,
            "p_roi" => self.corruption.roi = num(key, value)?,
            "base_lr" => self.schedule.base_lr = num(key, value)?,
            "warmup_steps" => self.schedule.warmup_steps = num(key, value)?,
            "total_steps" => self.schedule.total_steps = num(key, value)?,
            "weight_decay" => self.adamw.weight_decay = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "freeze_trunk" => self.freeze_trunk = num(key, value)?,
            "ablation" => self.ablation = value.parse()?,
            _ => {
                if !self.model.set(key, value)? {
                    return Err(Error::Config(format!("unknown key `{key}`")));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.corruption.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.adamw.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Endless stream of shuffled batches, one reshuffle per epoch.
struct BatchStream {
    len: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    queue: VecDeque<Vec<usize>>,
}

impl BatchStream {
    fn new(len: usize, batch_size: usize, seed: u64) -> Self {
        Self { len, batch_size, seed, epoch: 0, queue: VecDeque::new() }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.queue.is_empty() {
            self.queue = batch_indices(self.len, self.batch_size, self.seed, self.epoch).into();
            self.epoch += 1;
        }
        self.queue.pop_front().expect("corpus is not empty")
    }
}

const ORDER_STREAM: u64 = 1;
const CORRUPTION_STREAM: u64 = 2;

fn check_corpus(corpus: &Corpus, cfg: &FusionConfig) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    corpus.samples.iter().try_for_each(|s| s.validate(cfg))
}

fn apply_gradients(
    tape: &mut Tape,
    loss: Var,
    params: &mut ParamStore,
    bound: &crate::params::BoundParams,
    opt: &mut AdamWState,
    lr: f64,
    adamw: &AdamWConfig,
    trainable: impl Fn(&str) -> bool,
) -> Result<()> {
    tape.backward(loss)?;
    params.zero_grad();
    params.absorb_grads(tape, bound);
    opt.update(params, lr, adamw, trainable)?;
    params.zero_grad();
    Ok(())
}

/// Runs the composite pretraining objective for `schedule.total_steps`
/// updates; every step's loss line goes to `log`. Starts from `init` when
/// given, otherwise from fresh parameters seeded by `run.seed`.
pub fn pretrain(
    run: &RunConfig,
    corpus: &Corpus,
    init: Option<&Checkpoint>,
    log: &mut dyn FnMut(&str),
) -> Result<Checkpoint> {
    run.validate()?;
    let cfg = &run.model;
    check_corpus(corpus, cfg)?;
    let fresh = init_params(cfg, run.seed)?;
    let (mut params, mut opt) = match init {
        Some(c) => {
            c.check_params(&fresh)?;
            (c.params.clone(), c.optimizer.clone().unwrap_or_default())
        }
        None => (fresh, AdamWState::default()),
    };
    let mut stream = BatchStream::new(corpus.len(), run.batch_size, mix_seed(run.seed, ORDER_STREAM));
    let corruption_seed = mix_seed(run.seed, CORRUPTION_STREAM);
    for step in 1..=run.schedule.total_steps {
        let batch: Vec<&MixedSample> = stream.next_batch().into_iter().map(|i| &corpus.samples[i]).collect();
        let plans = plan_batch(&batch, run.corruption, cfg, mix_seed(corruption_seed, step));
        let mut tape = Tape::new();
        let (bound, vars) = ModelVars::bind(&mut tape, &params, cfg)?;
        let terms = batch
            .iter()
            .zip(&plans)
            .map(|(s, p)| sample_terms(&mut tape, s, p, &vars, cfg))
            .collect::<Result<Vec<SampleTerms>>>()?;
        let (loss, report) = combined_loss(&mut tape, &terms, &run.weights)?;
        if !report.is_finite() {
            return Err(Error::NonFiniteLoss { step: step as usize, report: report.to_string() });
        }
        let lr = run.schedule.lr_at(step);
        apply_gradients(&mut tape, loss, &mut params, &bound, &mut opt, lr, &run.adamw, |n| !is_task_head_param(n))?;
        log(&report.log_line(step, lr));
    }
    Ok(Checkpoint { config: cfg.clone(), params, optimizer: Some(opt) })
}

fn task_logits(
    tape: &mut Tape,
    text: Option<&crate::embedding::TextInput>,
    image: Option<&crate::embedding::VisualInput>,
    vars: &ModelVars,
    cfg: &FusionConfig,
) -> Result<Var> {
    let (_, out) = encode(tape, text, image, vars, cfg)?;
    head_task(tape, out.f_vl, &vars.heads)
}

/// Trains the task head with cross-entropy on the joint summary, and the
/// trunk too unless `run.freeze_trunk`. Zero steps return `init` unchanged.
pub fn finetune(run: &RunConfig, corpus: &Corpus, init: &Checkpoint, log: &mut dyn FnMut(&str)) -> Result<Checkpoint> {
    run.validate()?;
    let cfg = &run.model;
    check_corpus(corpus, cfg)?;
    if !corpus.has_task_labels() {
        return Err(Error::Data("finetuning corpus is missing task labels".into()));
    }
    init.check_params(&init_params(cfg, 0)?)?;
    if run.schedule.total_steps == 0 {
        return Ok(init.clone());
    }
    let mut params = init.params.clone();
    let mut opt = AdamWState::default();
    let freeze = run.freeze_trunk;
    let trainable = move |n: &str| is_task_head_param(n) || (!freeze && is_trunk_param(n));
    let mut stream = BatchStream::new(corpus.len(), run.batch_size, mix_seed(run.seed, ORDER_STREAM));
    for step in 1..=run.schedule.total_steps {
        let batch: Vec<&MixedSample> = stream.next_batch().into_iter().map(|i| &corpus.samples[i]).collect();
        let mut tape = Tape::new();
        let (bound, vars) = ModelVars::bind(&mut tape, &params, cfg)?;
        let mut rows = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for s in &batch {
            rows.push(task_logits(&mut tape, s.text.as_ref(), s.image.as_ref(), &vars, cfg)?);
            targets.push(Target::Class(s.task_label.expect("checked above")));
        }
        let logits = tape.concat_rows(&rows)?;
        let loss = tape.cross_entropy(logits, &targets)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step: step as usize, report: format!("task={value}") });
        }
        let lr = run.schedule.lr_at(step);
        apply_gradients(&mut tape, loss, &mut params, &bound, &mut opt, lr, &run.adamw, &trainable)?;
        log(&format!("step={step} task={value} lr={lr}"));
    }
    Ok(Checkpoint { config: cfg.clone(), params, optimizer: Some(opt) })
}

fn softmax_positive(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    (logits[1] - max).exp() / denom
}

fn probability(
    params: &ParamStore,
    cfg: &FusionConfig,
    text: Option<&crate::embedding::TextInput>,
    image: Option<&crate::embedding::VisualInput>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (_, vars) = ModelVars::bind(&mut tape, params, cfg)?;
    let logits = task_logits(&mut tape, text, image, &vars, cfg)?;
    Ok(softmax_positive(tape.value(logits).data()))
}

/// Probability of the positive (harmful) class under `ablation`.
pub fn positive_probability(
    params: &ParamStore,
    cfg: &FusionConfig,
    sample: &MixedSample,
    ablation: Ablation,
) -> Result<f64> {
    if cfg.n_task_classes < 2 {
        return Err(Error::Config("scoring needs n_task_classes >= 2".into()));
    }
    let need = |present: bool, what: &str| {
        if present {
            Ok(())
        } else {
            Err(Error::Data(format!("sample `{}` has no {what} for the {ablation} ablation", sample.id)))
        }
    };
    let (text, image) = (sample.text.as_ref(), sample.image.as_ref());
    match ablation {
        Ablation::Full => probability(params, cfg, text, image),
        Ablation::TextOnly => {
            need(text.is_some(), "text")?;
            probability(params, cfg, text, None)
        }
        Ablation::ImageOnly => {
            need(image.is_some(), "image")?;
            probability(params, cfg, None, image)
        }
        Ablation::MaxFuse => {
            let mut best = f64::NEG_INFINITY;
            if text.is_some() {
                best = best.max(probability(params, cfg, text, None)?);
            }
            if image.is_some() {
                best = best.max(probability(params, cfg, None, image)?);
            }
            Ok(best)
        }
    }
}

/// Scores every sample (in corpus order) and computes the metrics block.
pub fn evaluate(params: &ParamStore, cfg: &FusionConfig, corpus: &Corpus, ablation: Ablation) -> Result<MetricsReport> {
    let mut scores = Vec::with_capacity(corpus.len());
    let mut labels = Vec::with_capacity(corpus.len());
    for s in &corpus.samples {
        s.validate(cfg)?;
        let label = s.task_label.ok_or_else(|| Error::Data(format!("sample `{}` has no task label", s.id)))?;
        scores.push(positive_probability(params, cfg, s, ablation)?);
        labels.push(label == 1);
    }
    Ok(MetricsReport::compute(&scores, &labels))
}

/// Mean `cos(f_VL, f_V)` and `cos(f_VL, f_L)` over the paired samples.
pub fn summary_cosines(params: &ParamStore, cfg: &FusionConfig, samples: &[MixedSample]) -> Result<(f64, f64)> {
    let (mut sum_v, mut sum_l, mut n) = (0.0, 0.0, 0usize);
    for s in samples.iter().filter(|s| s.is_paired()) {
        let mut tape = Tape::new();
        let (_, vars) = ModelVars::bind(&mut tape, params, cfg)?;
        let (_, out) = encode(&mut tape, s.text.as_ref(), s.image.as_ref(), &vars, cfg)?;
        let cv = tape.cosine_similarity(out.f_vl, out.f_v)?;
        let cl = tape.cosine_similarity(out.f_vl, out.f_l)?;
        sum_v += tape.value(cv).item();
        sum_l += tape.value(cl).item();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("no paired samples".into()));
    }
    Ok((sum_v / n as f64, sum_l / n as f64))
}
