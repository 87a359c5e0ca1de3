//! Continual-learning trainers and the sequential protocol driver.
//!
//! Every method shares one step loop. A step draws the current-domain batch,
//! optionally randomizes it, optionally stacks replayed memory samples onto
//! it, builds the method's loss (plain cross-entropy, the meta-learned domain
//! randomization objective, plus any anchoring penalty) and takes one
//! optimizer step. Each random consumer has its own named stream per stage,
//! so switching a feature off never shifts the draws of another.

mod check;
mod memory;
mod objective;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::domains::{batches, images_to_array, Domain, LabeledDataset};
use crate::evalx::{evaluate, EvalError, RunReport, TrainLog};
use crate::gradcore::{adam_step, grad, sgd_step, AdamState, Array, GradError, ParamSet, Tape, Tensor};
use crate::models::{task_loss, Classifier, ModelConfig, ModelError};
use crate::rng::stream;
use crate::xforms::{apply_batch, build_set, randomize_batch, sample_transform, TransformError, TransformSet};

pub use check::{composite_check, CompositeReport};
pub use memory::{er_step, EpisodicMemory};
pub use objective::{
    adapted_params, anchor_penalty, fisher_diagonal, metadr_objective, penalty, Anchor, MetaBatch, MetaHyper, MetaTerms,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("loss diverged at domain {domain:?} step {step}")]
    Diverged { domain: String, step: usize },
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Naive,
    NaiveDr,
    L2,
    Ewc,
    Er,
    Metadr,
    OracleAll,
    OracleCumulative,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Naive => "naive",
            Self::NaiveDr => "naive_dr",
            Self::L2 => "l2",
            Self::Ewc => "ewc",
            Self::Er => "er",
            Self::Metadr => "metadr",
            Self::OracleAll => "oracle_all",
            Self::OracleCumulative => "oracle_cumulative",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

macro_rules! defaults {
    ($($name:ident: $ty:ty = $v:expr;)*) => {
        $(fn $name() -> $ty { $v })*
    };
}

defaults! {
    d_lr: f64 = 3e-4;
    d_lr_later: f64 = 3e-5;
    d_alpha: f64 = 0.1;
    d_one: f64 = 1.0;
    d_k: usize = 1;
    d_steps: usize = 3000;
    d_batch: usize = 64;
    d_optimizer: OptimizerKind = OptimizerKind::Adam;
    d_set: String = "psi3".to_string();
    d_memory_size: usize = 100;
    d_fisher_samples: usize = 200;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub method: Method,
    /// Learning rate on the first domain.
    #[serde(default = "d_lr")]
    pub lr: f64,
    /// Learning rate on every later domain.
    #[serde(default = "d_lr_later")]
    pub lr_later: f64,
    /// Step size of the simulated adaptation.
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    /// Weight of the recall term.
    #[serde(default = "d_one")]
    pub beta: f64,
    /// Weight of the adapt term.
    #[serde(default = "d_one")]
    pub gamma: f64,
    /// Transformations sampled per step.
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default = "d_k")]
    pub inner_steps: usize,
    #[serde(default)]
    pub first_order: bool,
    /// Steps per domain.
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_batch")]
    pub batch: usize,
    #[serde(default = "d_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "d_set")]
    pub transform_set: String,
    /// Strength of the L2 / EWC penalty.
    #[serde(default = "d_one")]
    pub lambda: f64,
    #[serde(default = "d_memory_size")]
    pub memory_size: usize,
    /// Replay memory on top of the method (implied by `er`).
    #[serde(default)]
    pub memory: bool,
    /// Randomize the current-domain batch (implied by `naive_dr`).
    #[serde(default)]
    pub dr: bool,
    #[serde(default = "d_fisher_samples")]
    pub fisher_samples: usize,
}

impl TrainerConfig {
    pub fn new(method: Method) -> Self {
        serde_json::from_value(serde_json::json!({ "method": method })).expect("defaults")
    }

    /// Checks ranges; the error names the offending field.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field: &str, why: &str| Err(TrainError::Config(format!("{field}: {why}")));
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !positive(self.lr) {
            return bad("lr", "must be > 0");
        }
        if !positive(self.lr_later) {
            return bad("lr_later", "must be > 0");
        }
        if !positive(self.alpha) {
            return bad("alpha", "must be > 0");
        }
        if !nonneg(self.beta) {
            return bad("beta", "must be >= 0");
        }
        if !nonneg(self.gamma) {
            return bad("gamma", "must be >= 0");
        }
        if !nonneg(self.lambda) {
            return bad("lambda", "must be >= 0");
        }
        if self.k == 0 {
            return bad("k", "must be >= 1");
        }
        if self.inner_steps == 0 {
            return bad("inner_steps", "must be >= 1");
        }
        if self.steps == 0 {
            return bad("steps", "must be >= 1");
        }
        if self.batch == 0 {
            return bad("batch", "must be >= 1");
        }
        if self.uses_memory() && self.memory_size == 0 {
            return bad("memory_size", "must be >= 1 when replay is on");
        }
        if self.needs_set() {
            build_set(&self.transform_set)?;
        }
        Ok(())
    }

    pub fn uses_dr(&self) -> bool {
        self.dr || self.method == Method::NaiveDr
    }

    pub fn uses_memory(&self) -> bool {
        self.memory || self.method == Method::Er
    }

    fn needs_set(&self) -> bool {
        self.uses_dr() || self.method == Method::Metadr
    }

    pub fn meta_hyper(&self) -> MetaHyper {
        MetaHyper { alpha: self.alpha, beta: self.beta, gamma: self.gamma, inner_steps: self.inner_steps, first_order: self.first_order }
    }

    /// Label used in reports, e.g. `metadr_er`.
    pub fn label(&self) -> String {
        let mut s = self.method.name().to_string();
        if self.dr && self.method != Method::NaiveDr {
            s.push_str("_dr");
        }
        if self.memory && self.method != Method::Er {
            s.push_str("_er");
        }
        s
    }
}

enum Optim {
    Adam(AdamState<f32>),
    Sgd,
}

/// Training state carried across the domains of one run.
pub struct Learner {
    pub model: ModelConfig,
    pub params: ParamSet<f32>,
    pub config: TrainerConfig,
    pub anchors: Vec<Anchor<f32>>,
    pub memory: EpisodicMemory,
    set: Option<TransformSet>,
    seed: u64,
}

fn finite(v: f64, domain: &str, step: usize) -> Result<(), TrainError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(TrainError::Diverged { domain: domain.to_string(), step })
    }
}

fn diverged(e: GradError, domain: &str, step: usize) -> TrainError {
    match e {
        GradError::NonFinite(_) => TrainError::Diverged { domain: domain.to_string(), step },
        e => TrainError::Grad(e),
    }
}

impl Learner {
    pub fn new(model: ModelConfig, config: TrainerConfig, seed: u64) -> Result<Self, TrainError> {
        config.validate()?;
        let params = model.init_params()?;
        let set = if config.needs_set() { Some(build_set(&config.transform_set)?) } else { None };
        Ok(Self { model, params, config, anchors: Vec::new(), memory: EpisodicMemory::new(), set, seed })
    }

    /// Replaces the transform set (custom sets, reductions in tests).
    pub fn with_set(mut self, set: TransformSet) -> Self {
        self.set = Some(set);
        self
    }

    /// `steps` optimizer steps on `train`, with fresh optimizer state.
    /// `stage` selects the random streams.
    pub fn train_stage(&mut self, train: &LabeledDataset, stage: usize, lr: f64, steps: usize) -> Result<TrainLog, TrainError> {
        let started = Instant::now();
        let cfg = self.config.clone();
        let name = train.name().to_string();
        let mut log = TrainLog::new(&name);
        let tag = |s: &str| stream(self.seed, &format!("{s}/{stage}"));
        let mut batch_rng = tag("batch");
        let mut meta_rng = tag("meta");
        let mut transform_rng = tag("transform");
        let mut dr_rng = tag("dr");
        let mut replay_rng = tag("replay");
        let mut optim = match cfg.optimizer {
            OptimizerKind::Adam => Optim::Adam(AdamState::new(&self.params)),
            OptimizerKind::Sgd => Optim::Sgd,
        };
        let use_dr = cfg.uses_dr();
        let use_memory = cfg.uses_memory();
        let is_meta = cfg.method == Method::Metadr;
        let hyper = cfg.meta_hyper();
        let meta_active = is_meta && (cfg.beta != 0.0 || cfg.gamma != 0.0);
        let mut meta_batches = batches(train, cfg.batch, steps, &mut meta_rng);
        for (step, b) in batches(train, cfg.batch, steps, &mut batch_rng).enumerate() {
            let set = self.set.as_ref();
            let x_main = if use_dr {
                let set = set.expect("set configured");
                images_to_array(&randomize_batch(set, &train.gather_images(&b.indices), &mut dr_rng)?)
            } else {
                train.gather(&b.indices)
            };
            let (x_task, y_task) = if use_memory {
                er_step((x_main.clone(), b.labels.clone()), &self.memory, cfg.batch, &mut replay_rng)
            } else {
                (x_main.clone(), b.labels.clone())
            };
            let tape = Tape::new();
            let ps = self.params.attach(&tape);
            let xt = Tensor::constant(x_task);
            let mut metas = Vec::new();
            if is_meta {
                let set = set.expect("set configured");
                let mb = meta_batches.next().expect("one meta batch per step");
                for _ in 0..cfg.k {
                    let t = sample_transform(set, &mut transform_rng)?;
                    if meta_active {
                        let x_meta = images_to_array(&apply_batch(&t, &train.gather_images(&mb.indices))?);
                        let x_t = images_to_array(&apply_batch(&t, &train.gather_images(&b.indices))?);
                        metas.push(MetaBatch { x_meta: Tensor::constant(x_meta), y_meta: mb.labels.clone(), x_main: Tensor::constant(x_t) });
                    }
                }
            }
            let (mut total, task, recall, adapt) = if meta_active {
                let x = Tensor::constant(x_main);
                let terms = metadr_objective(&self.model, &ps, (&xt, &y_task), &x, &b.labels, &metas, &hyper)
                    .map_err(|e| diverged(e, &name, step))?;
                (terms.total, terms.task, Some(terms.recall), Some(terms.adapt))
            } else {
                let l = task_loss(&self.model.logits(&ps, &xt)?, &y_task).map_err(|e| diverged(e, &name, step))?;
                let v = l.item();
                (l, v, None, None)
            };
            if let Some(p) = penalty(&ps, &self.anchors, cfg.lambda)? {
                total = total.add(&p).map_err(|e| diverged(e, &name, step))?;
            }
            finite(f64::from(total.item()), &name, step)?;
            let grads: Vec<Array<f32>> =
                grad(&total, &ps, false).map_err(|e| diverged(e, &name, step))?.iter().map(|g| g.value().clone()).collect();
            drop(total);
            tape.release();
            match &mut optim {
                Optim::Adam(st) => adam_step(&mut self.params, &grads, st, lr as f32)?,
                Optim::Sgd => sgd_step(&mut self.params, &grads, lr as f32)?,
            }
            log.task.push(f64::from(task));
            if let (Some(r), Some(a)) = (recall, adapt) {
                log.recall.push(f64::from(r));
                log.adapt.push(f64::from(a));
            }
            log.steps += 1;
        }
        log.wall_secs = started.elapsed().as_secs_f64();
        Ok(log)
    }

    /// Bookkeeping after a domain: memory commit, L2/EWC anchor.
    pub fn end_domain(&mut self, domain: usize, train: &LabeledDataset) -> Result<(), TrainError> {
        if self.config.uses_memory() {
            self.memory.commit(domain, train, self.config.memory_size, &mut stream(self.seed, &format!("memory/{domain}")));
        }
        match self.config.method {
            Method::L2 => self.anchors.push(Anchor { domain, params: self.params.values().to_vec(), fisher: None }),
            Method::Ewc => {
                let fisher = ewc_fisher_estimate(
                    &self.model,
                    &self.params,
                    train,
                    self.config.fisher_samples,
                    &mut stream(self.seed, &format!("fisher/{domain}")),
                )?;
                self.anchors.push(Anchor { domain, params: self.params.values().to_vec(), fisher: Some(fisher) });
            }
            _ => {}
        }
        Ok(())
    }
}

/// Diagonal Fisher of `model` on `samples` random training images.
pub fn ewc_fisher_estimate<M: Classifier>(
    model: &M,
    params: &ParamSet<f32>,
    data: &LabeledDataset,
    samples: usize,
    rng: &mut impl rand::Rng,
) -> Result<Vec<Array<f32>>, GradError> {
    let n = data.len();
    fisher_diagonal(
        params,
        samples,
        |r: &mut _| rand::Rng::random_range(r, 0..n),
        |ps, i| model.logits(ps, &Tensor::constant(data.gather(&[i]))),
        rng,
    )
}

/// Concatenation of datasets of equal geometry.
pub fn union(parts: &[&LabeledDataset], name: &str) -> LabeledDataset {
    let first = parts[0];
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        pixels.extend_from_slice(p.pixels());
        labels.extend_from_slice(p.labels());
    }
    LabeledDataset::new(name.to_string(), first.shape(), first.classes(), pixels, labels).expect("parts share geometry")
}

/// A run stopped by an error, with the report up to that point.
#[derive(Debug)]
pub struct RunAbort {
    pub error: TrainError,
    pub partial: RunReport,
}

fn eval_row(learner: &Learner, domains: &[Domain]) -> Result<Vec<f64>, TrainError> {
    domains.iter().map(|d| Ok(evaluate(&learner.model, &learner.params, &d.splits.test)?)).collect()
}

/// Trains sequentially over `domains` and evaluates every domain's test set
/// after each stage. `config_echo` is stored in the report verbatim.
pub fn run_protocol(
    domains: &[Domain],
    model: &ModelConfig,
    config: &TrainerConfig,
    seed: u64,
    config_echo: serde_json::Value,
) -> Result<RunReport, RunAbort> {
    let names: Vec<String> = domains.iter().map(|d| d.name.clone()).collect();
    let mut report = RunReport::new(config.label(), seed, config_echo, names);
    let abort = |error: TrainError, mut partial: RunReport| {
        partial.status = format!("aborted: {error}");
        partial.finish();
        RunAbort { error, partial }
    };
    let mut learner = match Learner::new(model.clone(), config.clone(), seed) {
        Ok(l) => l,
        Err(e) => return Err(abort(e, report)),
    };
    if domains.is_empty() {
        return Err(abort(TrainError::Config("no domains".into()), report));
    }
    let run = |learner: &mut Learner, report: &mut RunReport| -> Result<(), TrainError> {
        match config.method {
            Method::OracleAll => {
                let parts: Vec<&LabeledDataset> = domains.iter().map(|d| &d.splits.train).collect();
                let all = union(&parts, "all");
                report.logs.push(learner.train_stage(&all, 0, config.lr, config.steps * domains.len())?);
                report.matrix.push_row("all".into(), eval_row(learner, domains)?)?;
            }
            Method::OracleCumulative => {
                for (i, d) in domains.iter().enumerate() {
                    let parts: Vec<&LabeledDataset> = domains[..=i].iter().map(|d| &d.splits.train).collect();
                    let seen = union(&parts, &d.name);
                    let lr = if i == 0 { config.lr } else { config.lr_later };
                    report.logs.push(learner.train_stage(&seen, i, lr, config.steps)?);
                    report.matrix.push_row(d.name.clone(), eval_row(learner, domains)?)?;
                }
            }
            _ => {
                for (i, d) in domains.iter().enumerate() {
                    let lr = if i == 0 { config.lr } else { config.lr_later };
                    report.logs.push(learner.train_stage(&d.splits.train, i, lr, config.steps)?);
                    learner.end_domain(i, &d.splits.train)?;
                    report.matrix.push_row(d.name.clone(), eval_row(learner, domains)?)?;
                }
            }
        }
        Ok(())
    };
    match run(&mut learner, &mut report) {
        Ok(()) => {
            report.finish();
            Ok(report)
        }
        Err(e) => Err(abort(e, report)),
    }
}
