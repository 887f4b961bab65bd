//! Losses, GRL schedules and the alternating two-step training loop.
//!
//! Each batch runs two independent forward/backward passes:
//!
//! 1. pattern step: `L_p_cls` plus the subject adversary behind `GRL_p`,
//!    updating `Φ, E_p, B_p, C_p` (and `C_s` when the adversary exists);
//! 2. subject step: `L_s_cls` plus the pattern adversary behind `GRL_s`,
//!    updating `Φ, E_s, B_s, C_s` (and `C_p` when the adversary exists).
//!
//! ERM and P-Only run the pattern step only. Optimizers are plain SGD.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sgd_step, Graph, Mode, Reduction, Var};
use crate::data::WindowedDataset;
use crate::error::{Error, Result};
use crate::network::{Component, DualBranchModel, ForwardOutputs, InputSpec, Lambdas, Paths, Variant};
use crate::rng::named_rng;
use crate::tensor::{Scalar, Tensor};

/// Hyperparameters of one training run, mirrored field for field by the JSON
/// config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_s_init: f64,
    pub lambda_s_max: f64,
    pub lambda_p_init: f64,
    pub lambda_p_max: f64,
    pub seed: u64,
    /// SGD iterations per step per batch.
    pub iterations: usize,
    /// Keep the model with the best validation pattern accuracy.
    pub track_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Proposed,
            epochs: 100,
            batch_size: 256,
            learning_rate: 0.001,
            lambda_s_init: 0.0,
            lambda_s_max: 0.1,
            lambda_p_init: 1.0,
            lambda_p_max: 1.5,
            seed: 0,
            iterations: 1,
            track_best: false,
        }
    }
}

impl TrainConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid(
                "batch_size",
                format!("{} < 2 (batch norm needs two samples)", self.batch_size),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", format!("{} must be > 0", self.learning_rate)));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations", "must be >= 1"));
        }
        for (name, init, max) in [
            ("lambda_s", self.lambda_s_init, self.lambda_s_max),
            ("lambda_p", self.lambda_p_init, self.lambda_p_max),
        ] {
            if !(init >= 0.0 && init.is_finite() && max.is_finite()) {
                return Err(Error::invalid(format!("{name}_init"), format!("{init} must be finite and >= 0")));
            }
            if max < init {
                return Err(Error::invalid(format!("{name}_max"), format!("{max} < init {init}")));
            }
        }
        Ok(())
    }

    /// Training progress `p` for a 0-based epoch: 0 on the first epoch and 1
    /// on the last.
    pub fn progress(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            1.0
        } else {
            (epoch as f64 / (self.epochs - 1) as f64).min(1.0)
        }
    }

    /// `(λ_s, λ_p)` at progress `p`.
    pub fn lambdas_at(&self, p: f64) -> Result<Lambdas> {
        Lambdas::new(
            lambda_schedule(p, self.lambda_s_init, self.lambda_s_max),
            lambda_schedule(p, self.lambda_p_init, self.lambda_p_max),
        )
    }
}

/// `init + p·(max − init)`, with `p` clamped into `[0, 1]`.
pub fn lambda_schedule(p: f64, init: f64, max: f64) -> f64 {
    let p = if (0.0..=1.0).contains(&p) {
        p
    } else {
        log::warn!("training progress {p} outside [0, 1], clamping");
        if p.is_nan() {
            0.0
        } else {
            p.clamp(0.0, 1.0)
        }
    };
    init + p * (max - init)
}

/// Cross-entropies of the paths a forward pass produced (`None` if absent).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub pattern_cls: Option<f64>,
    pub subject_cls: Option<f64>,
    pub subject_adv: Option<f64>,
    pub pattern_adv: Option<f64>,
}

impl LossBundle {
    fn values(&self) -> [(&'static str, Option<f64>); 4] {
        [
            ("L_p_cls", self.pattern_cls),
            ("L_s_cls", self.subject_cls),
            ("L_s_adv", self.subject_adv),
            ("L_p_adv", self.pattern_adv),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|(_, v)| v.is_none_or(f64::is_finite))
    }

    fn describe(&self) -> String {
        self.values()
            .iter()
            .filter_map(|(n, v)| v.map(|v| format!("{n}={v}")))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Loss nodes attached to a graph.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossNodes {
    pub pattern_cls: Option<Var>,
    pub subject_cls: Option<Var>,
    pub subject_adv: Option<Var>,
    pub pattern_adv: Option<Var>,
}

/// Adds a cross-entropy node for every present output. Pattern targets are
/// needed for `logits_p` and `logits_adv_p`, subject targets for `logits_s`
/// and `logits_adv_s`.
pub fn attach_losses<T: Scalar>(
    graph: &mut Graph<T>,
    outputs: &ForwardOutputs,
    pattern_targets: Option<&Tensor<T>>,
    subject_targets: Option<&Tensor<T>>,
    reduction: Reduction,
) -> Result<(LossNodes, LossBundle)> {
    let mut ce = |logits: Option<Var>, targets: Option<&Tensor<T>>, what: &str| -> Result<Option<Var>> {
        let Some(logits) = logits else { return Ok(None) };
        let targets =
            targets.ok_or_else(|| Error::dim("compute_losses", format!("{what} labels required")))?;
        Ok(Some(graph.softmax_cross_entropy(logits, targets, reduction)?.0))
    };
    let nodes = LossNodes {
        pattern_cls: ce(outputs.logits_p, pattern_targets, "pattern")?,
        subject_cls: ce(outputs.logits_s, subject_targets, "subject")?,
        subject_adv: ce(outputs.logits_adv_s, subject_targets, "subject")?,
        pattern_adv: ce(outputs.logits_adv_p, pattern_targets, "pattern")?,
    };
    let value = |v: Option<Var>| v.map(|v| graph.value(v).data()[0].as_f64());
    let bundle = LossBundle {
        pattern_cls: value(nodes.pattern_cls),
        subject_cls: value(nodes.subject_cls),
        subject_adv: value(nodes.subject_adv),
        pattern_adv: value(nodes.pattern_adv),
    };
    Ok((nodes, bundle))
}

/// Batch-mean cross-entropies of every present path.
pub fn compute_losses<T: Scalar>(
    graph: &mut Graph<T>,
    outputs: &ForwardOutputs,
    pattern_targets: Option<&Tensor<T>>,
    subject_targets: Option<&Tensor<T>>,
) -> Result<LossBundle> {
    Ok(attach_losses(graph, outputs, pattern_targets, subject_targets, Reduction::Mean)?.1)
}

/// One of the two alternating updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Pattern,
    Subject,
}

impl Step {
    /// Whether `variant` runs this step.
    pub fn applies_to(self, variant: Variant) -> bool {
        match self {
            Step::Pattern => true,
            Step::Subject => variant.has_subject_branch(),
        }
    }

    /// Forward paths this step evaluates.
    pub fn paths(self, variant: Variant) -> Paths {
        match self {
            Step::Pattern => Paths {
                pattern: true,
                subject: false,
                adv_subject: variant.has_subject_adversary(),
                adv_pattern: false,
            },
            Step::Subject => Paths {
                pattern: false,
                subject: true,
                adv_subject: false,
                adv_pattern: variant.has_pattern_adversary(),
            },
        }
    }

    /// Parameter group updated by this step's optimizer.
    pub fn components(self, variant: Variant) -> Vec<Component> {
        match self {
            Step::Pattern => {
                let mut c = vec![
                    Component::Extractor,
                    Component::PatternEncoder,
                    Component::PatternBottleneck,
                    Component::PatternClassifier,
                ];
                if variant.has_subject_adversary() {
                    c.push(Component::SubjectClassifier);
                }
                c
            }
            Step::Subject => {
                let mut c = vec![
                    Component::Extractor,
                    Component::SubjectEncoder,
                    Component::SubjectBottleneck,
                    Component::SubjectClassifier,
                ];
                if variant.has_pattern_adversary() {
                    c.push(Component::PatternClassifier);
                }
                c
            }
        }
    }
}

/// Losses and train-mode accuracy counts of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepResult {
    pub losses: LossBundle,
    pub pattern_correct: Option<usize>,
    pub subject_correct: Option<usize>,
}

fn argmax_hits<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(targets.data().chunks(k))
        .filter(|(z, y)| {
            let pred = argmax(z);
            y[pred] == T::one()
        })
        .count()
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Forward and backward for one step, leaving the step's gradients in the
/// model's parameter buffers (previous gradients are cleared first).
///
/// The backward root is the sum of the step's classification loss and its
/// adversarial loss; the GRL inside the graph supplies the `−λ` factor.
#[allow(clippy::too_many_arguments)]
pub fn step_gradients<T: Scalar, R: Rng + ?Sized>(
    model: &mut DualBranchModel<T>,
    step: Step,
    batch: &Tensor<T>,
    pattern_targets: &Tensor<T>,
    subject_targets: Option<&Tensor<T>>,
    lambdas: Lambdas,
    rng: &mut R,
) -> Result<StepResult> {
    let variant = model.variant();
    if !step.applies_to(variant) {
        return Err(Error::UnsupportedVariant {
            variant: variant.to_string(),
            what: "the subject step".into(),
        });
    }
    model.clear_grads();
    let mut graph = Graph::new();
    let (out, bindings) = model.forward_paths(&mut graph, batch, Mode::Train, lambdas, step.paths(variant), rng)?;
    let (nodes, losses) = attach_losses(&mut graph, &out, Some(pattern_targets), subject_targets, Reduction::Mean)?;
    let terms: Vec<Var> = match step {
        Step::Pattern => [nodes.pattern_cls, nodes.subject_adv],
        Step::Subject => [nodes.subject_cls, nodes.pattern_adv],
    }
    .into_iter()
    .flatten()
    .collect();
    let mut root = terms[0];
    for &t in &terms[1..] {
        root = graph.add(root, t)?;
    }
    let result = StepResult {
        losses,
        pattern_correct: out.logits_p.map(|v| argmax_hits(graph.value(v), pattern_targets)),
        subject_correct: match (out.logits_s, subject_targets) {
            (Some(v), Some(y)) => Some(argmax_hits(graph.value(v), y)),
            _ => None,
        },
    };
    if !losses.all_finite() {
        return Ok(result);
    }
    let grads = graph.backward(root)?;
    model.accumulate_grads(&grads, &bindings)?;
    Ok(result)
}

/// SGD update of the step's parameter group; clears all gradients.
pub fn apply_step<T: Scalar>(model: &mut DualBranchModel<T>, step: Step, learning_rate: f64) -> Result<()> {
    let group = model.component_params(&step.components(model.variant()));
    let mut tensors: Vec<&mut Tensor<T>> = model
        .params_mut()
        .iter_mut()
        .enumerate()
        .filter(|(i, _)| group.contains(i))
        .map(|(_, p)| &mut p.tensor)
        .collect();
    let r = sgd_step(&mut tensors, T::from_f64(learning_rate));
    model.clear_grads();
    r
}

/// Metrics of one epoch; serialized as one row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lambda_s: f64,
    pub lambda_p: f64,
    #[serde(rename = "L_p_cls")]
    pub l_p_cls: f64,
    #[serde(rename = "L_s_cls")]
    pub l_s_cls: Option<f64>,
    #[serde(rename = "L_s_adv")]
    pub l_s_adv: Option<f64>,
    #[serde(rename = "L_p_adv")]
    pub l_p_adv: Option<f64>,
    pub train_pattern_acc: f64,
    pub train_subject_acc: Option<f64>,
}

/// Mutable state of a run between epochs.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    /// Progress used by the last completed epoch.
    pub progress: f64,
    rng: ChaCha8Rng,
    /// Optimizer steps taken by the pattern and subject optimizers.
    pub optimizer_steps: [usize; 2],
    pub best: Option<BestSnapshot>,
}

/// Model with the best validation pattern accuracy seen so far.
#[derive(Clone, Debug)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub accuracy: f64,
    pub model: DualBranchModel,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Self {
        TrainState {
            epoch: 0,
            progress: 0.0,
            rng: named_rng(config.seed, "train.run"),
            optimizer_steps: [0, 0],
            best: None,
        }
    }
}

#[derive(Default)]
struct Running {
    sum: f64,
    weight: f64,
}

impl Running {
    fn add(&mut self, v: Option<f64>, w: usize) {
        if let Some(v) = v {
            self.sum += v * w as f64;
            self.weight += w as f64;
        }
    }

    fn mean(&self) -> Option<f64> {
        (self.weight > 0.0).then(|| self.sum / self.weight)
    }
}

fn check_model(model: &DualBranchModel, data: &WindowedDataset, config: &TrainConfig) -> Result<()> {
    if model.variant() != config.variant {
        return Err(Error::invalid(
            "variant",
            format!("model is {} but the config says {}", model.variant(), config.variant),
        ));
    }
    if model.n_patterns() != data.n_patterns() {
        return Err(Error::invalid(
            "n_patterns",
            format!("model has {} classes, data {}", model.n_patterns(), data.n_patterns()),
        ));
    }
    if model.variant().has_subject_head() && model.n_subjects() != data.n_subjects() {
        return Err(Error::invalid(
            "n_subjects",
            format!("model has {} subjects, data {}", model.n_subjects(), data.n_subjects()),
        ));
    }
    let spec = model.input_spec();
    if spec.window_len != data.window_params().window || spec.channels != data.channels() {
        return Err(Error::invalid(
            "input",
            format!(
                "model expects {}×{}, data has {}×{}",
                spec.window_len,
                spec.channels,
                data.window_params().window,
                data.channels()
            ),
        ));
    }
    Ok(())
}

/// Shuffled mini-batches; a trailing batch of one window is dropped.
fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

/// What an observer sees of one optimizer step.
pub struct StepContext<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub step: Step,
    pub inputs: &'a Tensor<f32>,
    pub pattern_targets: &'a Tensor<f32>,
    pub subject_targets: Option<&'a Tensor<f32>>,
    pub lambdas: Lambdas,
    /// Run RNG as it was before this step's forward pass.
    pub rng_before: &'a ChaCha8Rng,
}

/// Hooks into [`train_epoch_observed`].
pub trait StepObserver {
    /// After backward, before the update; the model holds this step's gradients.
    fn gradients(&mut self, _ctx: &StepContext<'_>, _model: &DualBranchModel) -> Result<()> {
        Ok(())
    }

    /// After the update.
    fn updated(&mut self, _ctx: &StepContext<'_>, _model: &DualBranchModel) -> Result<()> {
        Ok(())
    }
}

impl StepObserver for () {}

/// One pass over the training windows.
pub fn train_epoch(
    model: &mut DualBranchModel,
    data: &WindowedDataset,
    state: &mut TrainState,
    config: &TrainConfig,
) -> Result<EpochLog> {
    train_epoch_observed(model, data, state, config, &mut ())
}

/// [`train_epoch`] with hooks around every optimizer step.
pub fn train_epoch_observed(
    model: &mut DualBranchModel,
    data: &WindowedDataset,
    state: &mut TrainState,
    config: &TrainConfig,
    observer: &mut dyn StepObserver,
) -> Result<EpochLog> {
    check_model(model, data, config)?;
    if data.len() < 2 {
        return Err(Error::invalid("training split", format!("{} windows, need at least 2", data.len())));
    }
    let epoch = state.epoch;
    let p = config.progress(epoch).max(state.progress);
    let lambdas = config.lambdas_at(p)?;
    let variant = model.variant();
    let subject_labels = variant.has_subject_head();
    let steps: Vec<Step> = [Step::Pattern, Step::Subject]
        .into_iter()
        .filter(|s| s.applies_to(variant))
        .collect();

    let mut l_p_cls = Running::default();
    let mut l_s_cls = Running::default();
    let mut l_s_adv = Running::default();
    let mut l_p_adv = Running::default();
    let (mut p_hits, mut p_seen) = (0usize, 0usize);
    let (mut s_hits, mut s_seen) = (0usize, 0usize);

    for (b, idx) in batches(data.len(), config.batch_size, &mut state.rng).into_iter().enumerate() {
        let x = data.batch(&idx)?;
        let y_p = data.pattern_one_hot(&idx)?;
        let y_s = if subject_labels { Some(data.subject_one_hot(&idx)?) } else { None };
        let n = idx.len();
        for &step in &steps {
            for _ in 0..config.iterations {
                let rng_before = state.rng.clone();
                let r = step_gradients(model, step, &x, &y_p, y_s.as_ref(), lambdas, &mut state.rng)?;
                if !r.losses.all_finite() {
                    model.clear_grads();
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: b,
                        losses: r.losses.describe(),
                    });
                }
                let ctx = StepContext {
                    epoch,
                    batch: b,
                    step,
                    inputs: &x,
                    pattern_targets: &y_p,
                    subject_targets: y_s.as_ref(),
                    lambdas,
                    rng_before: &rng_before,
                };
                observer.gradients(&ctx, model)?;
                apply_step(model, step, config.learning_rate)?;
                observer.updated(&ctx, model)?;
                state.optimizer_steps[if step == Step::Pattern { 0 } else { 1 }] += 1;
                l_p_cls.add(r.losses.pattern_cls, n);
                l_s_cls.add(r.losses.subject_cls, n);
                l_s_adv.add(r.losses.subject_adv, n);
                l_p_adv.add(r.losses.pattern_adv, n);
                if let Some(c) = r.pattern_correct {
                    p_hits += c;
                    p_seen += n;
                }
                if let Some(c) = r.subject_correct {
                    s_hits += c;
                    s_seen += n;
                }
            }
        }
    }
    state.epoch += 1;
    state.progress = p;
    Ok(EpochLog {
        epoch,
        lambda_s: lambdas.subject_adv.get(),
        lambda_p: lambdas.pattern_adv.get(),
        l_p_cls: l_p_cls.mean().unwrap_or(f64::NAN),
        l_s_cls: l_s_cls.mean(),
        l_s_adv: l_s_adv.mean(),
        l_p_adv: l_p_adv.mean(),
        train_pattern_acc: p_hits as f64 / p_seen.max(1) as f64,
        train_subject_acc: (s_seen > 0).then(|| s_hits as f64 / s_seen as f64),
    })
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: DualBranchModel,
    pub log: Vec<EpochLog>,
    pub state: TrainState,
}

/// Builds a model for `data` from `config.seed` and trains it for
/// `config.epochs` epochs.
pub fn train(data: &WindowedDataset, config: &TrainConfig, validation: Option<&WindowedDataset>) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training split", "no training windows"));
    }
    let input = InputSpec {
        window_len: data.window_params().window,
        channels: data.channels(),
    };
    let n_subjects = if config.variant.has_subject_head() { data.n_subjects() } else { 0 };
    let model = DualBranchModel::new(config.variant, data.n_patterns(), n_subjects, config.seed, input)?;
    train_model(model, data, config, validation)
}

/// Trains an existing model for `config.epochs` epochs.
pub fn train_model(
    mut model: DualBranchModel,
    data: &WindowedDataset,
    config: &TrainConfig,
    validation: Option<&WindowedDataset>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut state = TrainState::new(config);
    let mut log = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let row = train_epoch(&mut model, data, &mut state, config)?;
        log::info!(
            "epoch {} λs={:.4} λp={:.4} L_p_cls={:.4} acc={:.4}",
            row.epoch,
            row.lambda_s,
            row.lambda_p,
            row.l_p_cls,
            row.train_pattern_acc
        );
        if let (true, Some(valid)) = (config.track_best, validation) {
            let acc = pattern_accuracy(&model, valid, config.batch_size)?;
            if state.best.as_ref().is_none_or(|b| acc > b.accuracy) {
                state.best = Some(BestSnapshot {
                    epoch: row.epoch,
                    accuracy: acc,
                    model: model.clone(),
                });
            }
        }
        log.push(row);
    }
    Ok(TrainOutcome { model, log, state })
}

/// Eval-mode pattern probabilities for every window, `[N, N_p]`.
pub fn predict_patterns(model: &DualBranchModel, data: &WindowedDataset, chunk: usize) -> Result<Tensor<f32>> {
    let k = model.n_patterns();
    let mut out = Vec::with_capacity(data.len() * k);
    let idx: Vec<usize> = (0..data.len()).collect();
    for c in idx.chunks(chunk.max(1)) {
        out.extend_from_slice(model.predict_patterns(&data.batch(c)?)?.data());
    }
    Tensor::new(vec![data.len(), k], out)
}

fn pattern_accuracy(model: &DualBranchModel, data: &WindowedDataset, chunk: usize) -> Result<f64> {
    let probs = predict_patterns(model, data, chunk)?;
    let k = model.n_patterns();
    let hits = probs
        .data()
        .chunks(k)
        .zip(data.infos())
        .filter(|(p, info)| argmax(p) == info.pattern)
        .count();
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// Writes the training log as CSV with an empty cell for absent losses.
pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
