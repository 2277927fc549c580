//! Model families behind one interface, input preparation per mode, batched
//! gradients and the training loop.

use std::str::FromStr;
use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adjoint::{grad_check_fd, GradCheckReport};
use crate::control::{record_path, ControlPath, Interpolation, ObservationChannels, preprocess_missing};
use crate::data::{accuracy, auc_score, confusion, SequenceRecord};
use crate::error::{Error, Result};
use crate::fwp::{
    CdeInput, DeltaVariant, DiscreteConfig, DiscreteModel, Drive, Family, FwpConfig, FwpModel, RfwpConfig, RfwpModel,
    Rule, RuleKind, StepDrive, VanillaConfig, VanillaModel,
};
use crate::logsig::{logsig_dim, windowize};
use crate::numcore::{adam_update, AdamState, ParamStore, Tensor};
use crate::par;
use crate::solver::SolveConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    DirectNode,
    Ncde,
    Nrde,
    Discrete,
    OdeRfwp,
    VanillaNcde,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "direct_node" => Self::DirectNode,
            "ncde" => Self::Ncde,
            "nrde" => Self::Nrde,
            "discrete" => Self::Discrete,
            "ode_rfwp" => Self::OdeRfwp,
            "vanilla_ncde" => Self::VanillaNcde,
            other => {
                return Err(Error::Config(format!(
                    "unknown mode `{other}` (direct_node|ncde|nrde|discrete|ode_rfwp|vanilla_ncde)"
                )))
            }
        })
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::DirectNode => "direct_node",
            Self::Ncde => "ncde",
            Self::Nrde => "nrde",
            Self::Discrete => "discrete",
            Self::OdeRfwp => "ode_rfwp",
            Self::VanillaNcde => "vanilla_ncde",
        })
    }
}

/// Everything needed to rebuild a model; stored in checkpoint headers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub mode: Mode,
    pub rule: RuleKind,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    /// Raw channels per observation, before preprocessing.
    pub channels: usize,
    pub n_classes: usize,
    pub d_static: usize,
    pub interpolation: Interpolation,
    pub oi: ObservationChannels,
    pub logsig_depth: usize,
    pub logsig_step: usize,
}

impl ModelSpec {
    /// Width of the preprocessed knots: time, values, observation channels.
    pub fn knot_width(&self) -> usize {
        1 + self.channels + if self.oi == ObservationChannels::None { 0 } else { self.channels }
    }

    /// Width of the model input after mode-specific preparation.
    pub fn input_dim(&self) -> usize {
        match self.mode {
            Mode::Nrde => logsig_dim(self.knot_width(), self.logsig_depth),
            _ => self.knot_width(),
        }
    }

    pub fn to_arch(&self) -> IndexMap<String, String> {
        let mut m = IndexMap::new();
        let r = self.rule;
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("mode", self.mode.to_string());
        put("rule", r.rule.to_string());
        put("delta_variant", if r.delta_variant == DeltaVariant::Post { "post" } else { "pre" }.into());
        put("cde_input", if r.cde_input == CdeInput::DxOnly { "dx_only" } else { "x_and_dx" }.into());
        put("hebb_kv_swap", r.hebb_kv_swap.to_string());
        put("d_model", self.d_model.to_string());
        put("heads", self.heads.to_string());
        put("d_ff", self.d_ff.to_string());
        put("layers", self.layers.to_string());
        put("channels", self.channels.to_string());
        put("n_classes", self.n_classes.to_string());
        put("d_static", self.d_static.to_string());
        put("interpolation", self.interpolation.to_string());
        put("oi", self.oi.to_string());
        put("logsig_depth", self.logsig_depth.to_string());
        put("logsig_step", self.logsig_step.to_string());
        m
    }

    pub fn from_arch(arch: &IndexMap<String, String>) -> Result<Self> {
        let get = |k: &str| arch.get(k).map(String::as_str).ok_or_else(|| Error::Checkpoint(format!("arch lacks `{k}`")));
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Checkpoint(format!("arch `{k}` is not an integer"))) };
        let delta = match get("delta_variant")? {
            "post" => DeltaVariant::Post,
            _ => DeltaVariant::Pre,
        };
        let cde = match get("cde_input")? {
            "dx_only" => CdeInput::DxOnly,
            _ => CdeInput::XAndDx,
        };
        let rule = RuleKind::new(get("rule")?.parse()?)
            .with_delta(delta)
            .with_cde_input(cde)
            .with_swap(get("hebb_kv_swap")? == "true");
        Ok(Self {
            mode: get("mode")?.parse()?,
            rule,
            d_model: num("d_model")?,
            heads: num("heads")?,
            d_ff: num("d_ff")?,
            layers: num("layers")?,
            channels: num("channels")?,
            n_classes: num("n_classes")?,
            d_static: num("d_static")?,
            interpolation: get("interpolation")?.parse()?,
            oi: get("oi")?.parse()?,
            logsig_depth: num("logsig_depth")?,
            logsig_step: num("logsig_step")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Net {
    Fwp(FwpModel),
    Discrete(DiscreteModel),
    Rfwp(RfwpModel),
    Vanilla(VanillaModel),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Input {
    Path(ControlPath),
    Steps(StepDrive),
    Rows { rows: Tensor, times: Vec<f64> },
}

/// A sequence prepared for a particular model.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub label: usize,
    pub statics: Option<Vec<f64>>,
    pub input: Input,
    /// Integration intervals (or discrete steps) the model will take.
    pub effective_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    net: Net,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let d_in = spec.input_dim();
        if spec.mode == Mode::Nrde && !(1..=2).contains(&spec.logsig_depth) {
            return Err(Error::Config(format!("log-signature depth must be 1 or 2, got {}", spec.logsig_depth)));
        }
        if spec.mode == Mode::Nrde && spec.logsig_step == 0 {
            return Err(Error::Config("log-signature step must be at least 1".into()));
        }
        let net = match spec.mode {
            Mode::DirectNode | Mode::Ncde | Mode::Nrde => {
                let family = if spec.mode == Mode::Ncde { Family::Cde } else { Family::Direct };
                spec.rule.validate(family)?;
                Net::Fwp(FwpModel::new(FwpConfig {
                    family,
                    rule: spec.rule,
                    d_in,
                    d_model: spec.d_model,
                    heads: spec.heads,
                    d_ff: spec.d_ff,
                    layers: spec.layers,
                    n_classes: spec.n_classes,
                    d_static: spec.d_static,
                })?)
            }
            Mode::Discrete => Net::Discrete(DiscreteModel::new(DiscreteConfig {
                rule: spec.rule.rule,
                d_in,
                d_model: spec.d_model,
                heads: spec.heads,
                n_classes: spec.n_classes,
                d_static: spec.d_static,
            })?),
            Mode::OdeRfwp => Net::Rfwp(RfwpModel::new(RfwpConfig {
                rule: spec.rule.rule,
                d_in,
                d_model: spec.d_model,
                heads: spec.heads,
                d_ode: spec.d_ff,
                n_classes: spec.n_classes,
                d_static: spec.d_static,
            })?),
            Mode::VanillaNcde => {
                if spec.d_model == 0 || spec.d_ff == 0 {
                    return Err(Error::Config("vanilla NCDE needs positive d_model and d_ff".into()));
                }
                Net::Vanilla(VanillaModel::new(VanillaConfig {
                    d_in,
                    d_hidden: spec.d_model,
                    d_mlp: spec.d_ff,
                    n_classes: spec.n_classes,
                    d_static: spec.d_static,
                }))
            }
        };
        Ok(Self { spec, net })
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        match &self.net {
            Net::Fwp(m) => m.init_params(seed),
            Net::Discrete(m) => m.init_params(seed),
            Net::Rfwp(m) => m.init_params(seed),
            Net::Vanilla(m) => m.init_params(seed),
        }
    }

    /// Builds the mode's input from a raw record.
    pub fn prepare(&self, rec: &SequenceRecord) -> Result<Example> {
        self.prepare_inner(rec).map_err(|e| e.in_sequence(&rec.id))
    }

    fn prepare_inner(&self, rec: &SequenceRecord) -> Result<Example> {
        let s = &self.spec;
        if rec.channels() != s.channels {
            return Err(Error::dim(
                "prepare",
                format!("sequence has {} channels, model was built for {}", rec.channels(), s.channels),
            ));
        }
        if rec.label >= s.n_classes {
            return Err(Error::Config(format!("label {} outside {} classes", rec.label, s.n_classes)));
        }
        let n = rec.len();
        let (input, effective_steps) = match s.mode {
            Mode::DirectNode | Mode::Ncde | Mode::VanillaNcde => (Input::Path(record_path(rec, s.oi, s.interpolation)?), n.max(2) - 1),
            Mode::Nrde => {
                let knots = preprocess_missing(rec, s.oi)?;
                let idx: Vec<f64> = (0..n).map(|i| i as f64).collect();
                let stream = windowize(&knots, &idx, s.logsig_step, s.logsig_depth)?;
                let w = stream.n_windows();
                (Input::Steps(StepDrive::new(stream.features)?), w)
            }
            Mode::Discrete | Mode::OdeRfwp => (Input::Rows { rows: preprocess_missing(rec, s.oi)?, times: rec.times.clone() }, n),
        };
        Ok(Example { id: rec.id.clone(), label: rec.label, statics: rec.statics.clone(), input, effective_steps })
    }

    fn drive<'a>(input: &'a Input) -> Result<&'a dyn Drive> {
        match input {
            Input::Path(p) => Ok(p),
            Input::Steps(s) => Ok(s),
            Input::Rows { .. } => Err(Error::Config("continuous model given a discrete input".into())),
        }
    }

    fn rows(input: &Input) -> Result<(&Tensor, &[f64])> {
        match input {
            Input::Rows { rows, times } => Ok((rows, times)),
            _ => Err(Error::Config("discrete model given a continuous input".into())),
        }
    }

    pub fn loss_and_grad(&self, params: &ParamStore, ex: &Example, solver: &SolveConfig) -> Result<(f64, ParamStore, Vec<f64>)> {
        let st = ex.statics.as_deref();
        let r = match &self.net {
            Net::Fwp(m) => m.loss_and_grad(params, Self::drive(&ex.input)?, st, ex.label, solver),
            Net::Vanilla(m) => m.loss_and_grad(params, Self::drive(&ex.input)?, st, ex.label, solver),
            Net::Discrete(m) => m.loss_and_grad(params, Self::rows(&ex.input)?.0, st, ex.label),
            Net::Rfwp(m) => {
                let (rows, times) = Self::rows(&ex.input)?;
                m.loss_and_grad(params, rows, times, st, ex.label, solver)
            }
        };
        r.map_err(|e| e.in_sequence(&ex.id))
    }

    pub fn logits(&self, params: &ParamStore, ex: &Example, solver: &SolveConfig) -> Result<Vec<f64>> {
        let st = ex.statics.as_deref();
        let r = match &self.net {
            Net::Fwp(m) => m.forward(params, Self::drive(&ex.input)?, st, solver).map(|f| f.logits),
            Net::Vanilla(m) => m.forward(params, Self::drive(&ex.input)?, st, solver).map(|f| f.0),
            Net::Discrete(m) => m.forward(params, Self::rows(&ex.input)?.0, st),
            Net::Rfwp(m) => {
                let (rows, times) = Self::rows(&ex.input)?;
                m.forward(params, rows, times, st, solver)
            }
        };
        r.map_err(|e| e.in_sequence(&ex.id))
    }

    /// Loss-only evaluation for finite differences.
    pub fn loss(&self, params: &ParamStore, ex: &Example, solver: &SolveConfig) -> Result<f64> {
        let logits = self.logits(params, ex, solver)?;
        Ok(crate::numcore::ops::cross_entropy(&logits, ex.label).0)
    }
}

/// Picks the delta variant for `auto`: post-delta beyond 1000 steps.
pub fn auto_delta_variant(max_effective_steps: usize) -> DeltaVariant {
    if max_effective_steps > 1000 {
        DeltaVariant::Post
    } else {
        DeltaVariant::Pre
    }
}

/// Mean loss and mean gradient over `batch`. Per-example work runs on the
/// current thread pool when `parallel`; the reduction is always sequential in
/// batch order, so the result does not depend on the thread count.
pub fn batch_loss_and_grad(
    model: &Model,
    params: &ParamStore,
    batch: &[&Example],
    solver: &SolveConfig,
    parallel: bool,
) -> Result<(f64, ParamStore)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let work = |i: usize| model.loss_and_grad(params, batch[i], solver);
    let results = if parallel { par::map_range(batch.len(), work) } else { par::map_range_sequential(batch.len(), work) };
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for r in results {
        let (l, g, _) = r?;
        loss += l;
        total.add_scaled(1.0, &g)?;
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    Ok((loss / n, total))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidMetric {
    Accuracy,
    Auc,
}

impl FromStr for ValidMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Self::Accuracy),
            "auc" => Ok(Self::Auc),
            other => Err(Error::Config(format!("unknown metric `{other}` (accuracy|auc)"))),
        }
    }
}

impl std::fmt::Display for ValidMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Accuracy => "accuracy",
            Self::Auc => "auc",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    /// Binary tasks only: AUC of the class-1 softmax probability.
    pub auc: Option<f64>,
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn metric(&self, m: ValidMetric) -> Result<f64> {
        match m {
            ValidMetric::Accuracy => Ok(self.accuracy),
            ValidMetric::Auc => self.auc.ok_or_else(|| Error::Metric("AUC needs a binary task with both classes".into())),
        }
    }

    /// Plain-text report: accuracy, AUC when defined, per-class counts.
    pub fn render(&self) -> String {
        let mut s = format!("examples {}\naccuracy {:.6}\n", self.n, self.accuracy);
        if let Some(a) = self.auc {
            s += &format!("auc {a:.6}\n");
        }
        s += "class gold predicted correct\n";
        for (c, row) in self.confusion.iter().enumerate() {
            let gold: usize = row.iter().sum();
            let pred: usize = self.confusion.iter().map(|r| r[c]).sum();
            s += &format!("{c} {gold} {pred} {}\n", row[c]);
        }
        s
    }
}

pub fn evaluate(model: &Model, params: &ParamStore, data: &[Example], solver: &SolveConfig) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Metric("cannot evaluate an empty split".into()));
    }
    let logits = par::map_range(data.len(), |i| model.logits(params, &data[i], solver)).into_iter().collect::<Result<Vec<_>>>()?;
    let pred: Vec<usize> = logits
        .iter()
        .map(|l| l.iter().enumerate().fold(0, |best, (i, v)| if *v > l[best] { i } else { best }))
        .collect();
    let gold: Vec<usize> = data.iter().map(|e| e.label).collect();
    let k = model.spec.n_classes;
    let auc = if k == 2 {
        let scores: Vec<f64> = logits.iter().map(|l| 1.0 / (1.0 + (l[0] - l[1]).exp())).collect();
        let labels: Vec<bool> = gold.iter().map(|g| *g == 1).collect();
        auc_score(&scores, &labels).ok()
    } else {
        None
    };
    Ok(EvalReport { n: data.len(), accuracy: accuracy(&pred, &gold)?, auc, confusion: confusion(&pred, &gold, k) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub metric: ValidMetric,
    /// Per-example work on the thread pool (the reduction stays ordered).
    pub parallel: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_metric: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: ParamStore,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub logs: Vec<EpochLog>,
    pub last: ParamStore,
}

/// Adam over shuffled mini-batches for a fixed number of epochs; keeps the
/// parameters with the best validation metric (ties keep the earlier epoch).
/// `on_epoch` sees every log line as soon as the epoch ends.
pub fn train(
    model: &Model,
    init: ParamStore,
    train_set: &[Example],
    valid_set: &[Example],
    solver: &SolveConfig,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochLog, bool, &ParamStore) -> Result<()>,
) -> Result<TrainOutcome> {
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::Config("training needs non-empty train and valid splits".into()));
    }
    if opts.batch_size == 0 || opts.epochs == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }
    if !(opts.lr >= 0.0) || !opts.lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", opts.lr)));
    }
    let mut params = init;
    let mut adam = AdamState::new(&params, opts.lr);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(ParamStore, usize, f64)> = None;
    let mut logs = Vec::with_capacity(opts.epochs);
    for epoch in 1..=opts.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(opts.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_loss_and_grad(model, &params, &batch, solver, opts.parallel)
                .map_err(|e| Error::Training { epoch, batch: b + 1, source: Box::new(e) })?;
            loss_sum += loss * batch.len() as f64;
            adam_update(&mut params, &grads, &mut adam)?;
            params
                .iter()
                .try_for_each(|(_, t)| t.ensure_finite("parameter update"))
                .map_err(|e| Error::Training { epoch, batch: b + 1, source: Box::new(e) })?;
        }
        let report = evaluate(model, &params, valid_set, solver).map_err(|e| Error::Training { epoch, batch: 0, source: Box::new(e) })?;
        let metric = report.metric(opts.metric)?;
        let log = EpochLog { epoch, train_loss: loss_sum / train_set.len() as f64, valid_metric: metric, seconds: start.elapsed().as_secs_f64() };
        let improved = best.as_ref().is_none_or(|(_, _, m)| metric > *m);
        if improved {
            best = Some((params.clone(), epoch, metric));
        }
        on_epoch(&log, improved, &params)?;
        logs.push(log);
    }
    let (best, best_epoch, best_metric) = best.expect("at least one epoch");
    Ok(TrainOutcome { best, best_epoch, best_metric, logs, last: params })
}

/// Finite-difference check of the model's analytic gradient on one example.
/// `corrupt` scales the analytic gradient of the named tensor, as a negative
/// control for the checker itself.
pub fn gradcheck_example(
    model: &Model,
    params: &ParamStore,
    ex: &Example,
    solver: &SolveConfig,
    perturbation: f64,
    corrupt: Option<&str>,
) -> Result<GradCheckReport> {
    let (_, mut g, _) = model.loss_and_grad(params, ex, solver)?;
    if let Some(name) = corrupt {
        let t = g.get_mut(name)?;
        t.data_mut().iter_mut().for_each(|v| *v = 1.5 * *v + 1e-3);
    }
    grad_check_fd(|p| model.loss(p, ex, solver), params, &g, perturbation)
}

/// Spec helper for tests and the CLI.
pub fn default_rule(rule: Rule) -> RuleKind {
    RuleKind::new(rule)
}
