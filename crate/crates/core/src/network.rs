//! The dual-branch adversarial network and its three baseline variants.
//!
//! ```text
//!              ┌─ E_p ─ B_p ─ z_p ─┬─ C_p ───────────── ŷ_p
//! X ─ Φ ─ z ──┤                    └─ GRL_p ─ C_s ───── ŷ_adv,s
//!              └─ E_s ─ B_s ─ z_s ─┬─ C_s ───────────── ŷ_s
//!                                  └─ GRL_s ─ C_p ───── ŷ_adv,p
//! ```
//!
//! `C_p` and `C_s` are single parameter sets shared between the main and the
//! adversarial paths.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, BatchNormState, Gradients, Graph, GrlCoefficient, Mode, Var};
use crate::error::{Error, Result};
use crate::rng::named_rng;
use crate::tensor::{Scalar, Tensor};

/// Samples per window.
pub const WINDOW_LEN: usize = 408;
/// Forearm electrode channels.
pub const CHANNELS: usize = 8;
/// Width of the pattern- and subject-specific feature vectors.
pub const BOTTLENECK_UNITS: usize = 256;
pub const DROPOUT_RATE: f64 = 0.5;

/// One conv block: conv (stride 1, same padding) → BN → ReLU → maxpool(2, 2).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlockSpec {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvBlockSpec {
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }
}

/// Shared feature extractor Φ.
pub const EXTRACTOR: ConvBlockSpec = ConvBlockSpec {
    kernel: 5,
    in_channels: CHANNELS,
    out_channels: 32,
};

/// Encoder blocks of each branch (identical for both branches).
pub const ENCODER: [ConvBlockSpec; 2] = [
    ConvBlockSpec {
        kernel: 3,
        in_channels: 32,
        out_channels: 64,
    },
    ConvBlockSpec {
        kernel: 5,
        in_channels: 64,
        out_channels: 128,
    },
];

/// Which components a model contains and how it is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Both branches with both gradient reversal layers.
    Proposed,
    /// Pattern branch only, no adversary.
    Erm,
    /// Pattern branch with a subject adversary behind a reversal layer.
    #[serde(rename = "ponly")]
    POnly,
    /// Both branches, no reversal layers.
    Mtl,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Erm, Variant::POnly, Variant::Mtl, Variant::Proposed];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Proposed => "proposed",
            Variant::Erm => "erm",
            Variant::POnly => "ponly",
            Variant::Mtl => "mtl",
        }
    }

    pub fn has_subject_branch(self) -> bool {
        matches!(self, Variant::Proposed | Variant::Mtl)
    }

    pub fn has_subject_head(self) -> bool {
        !matches!(self, Variant::Erm)
    }

    /// Subject prediction from the pattern features through `GRL_p`.
    pub fn has_subject_adversary(self) -> bool {
        matches!(self, Variant::Proposed | Variant::POnly)
    }

    /// Pattern prediction from the subject features through `GRL_s`.
    pub fn has_pattern_adversary(self) -> bool {
        matches!(self, Variant::Proposed)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "proposed" => Ok(Variant::Proposed),
            "erm" => Ok(Variant::Erm),
            "ponly" | "dann" => Ok(Variant::POnly),
            "mtl" => Ok(Variant::Mtl),
            _ => Err(Error::invalid(
                "variant",
                format!("unknown variant {s:?} (expected proposed, erm, ponly or mtl)"),
            )),
        }
    }
}

/// Logical grouping of parameters, used for optimizer groups and audits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    Extractor,
    PatternEncoder,
    PatternBottleneck,
    PatternClassifier,
    SubjectEncoder,
    SubjectBottleneck,
    SubjectClassifier,
}

/// Which feature map [`DualBranchModel::export_features`] returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    /// Flattened extractor output `z`.
    Original,
    Pattern,
    Subject,
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(FeatureKind::Original),
            "pattern" => Ok(FeatureKind::Pattern),
            "subject" => Ok(FeatureKind::Subject),
            _ => Err(Error::invalid(
                "which",
                format!("{s:?} (expected original, pattern or subject)"),
            )),
        }
    }
}

/// Input geometry of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub window_len: usize,
    pub channels: usize,
}

impl Default for InputSpec {
    fn default() -> Self {
        InputSpec {
            window_len: WINDOW_LEN,
            channels: CHANNELS,
        }
    }
}

impl InputSpec {
    /// Length after the extractor's pooling.
    pub fn extractor_len(&self) -> usize {
        self.window_len / 2
    }

    /// Length after both encoder blocks.
    pub fn encoder_len(&self) -> usize {
        self.window_len / 2 / 2 / 2
    }

    /// Width of the flattened encoder output fed to the bottleneck.
    pub fn flat_features(&self) -> usize {
        self.encoder_len() * ENCODER[1].out_channels
    }

    pub fn original_features(&self) -> usize {
        self.extractor_len() * EXTRACTOR.out_channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvBlockIds {
    weight: usize,
    bias: usize,
    gamma: usize,
    beta: usize,
    bn: usize,
    padding: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct BottleneckIds {
    weight: usize,
    bias: usize,
    gamma: usize,
    beta: usize,
    bn: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ClassifierIds {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct BranchIds {
    encoder: [ConvBlockIds; 2],
    bottleneck: BottleneckIds,
}

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f32> {
    pub name: String,
    pub component: Component,
    pub tensor: Tensor<T>,
}

/// A named batch-norm running-statistics slot.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormSlot<T = f32> {
    pub name: String,
    pub component: Component,
    pub state: BatchNormState<T>,
}

/// GRL coefficients for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lambdas {
    /// `λ_s`, scaling `GRL_p` between `B_p` and `C_s`.
    pub subject_adv: GrlCoefficient,
    /// `λ_p`, scaling `GRL_s` between `B_s` and `C_p`.
    pub pattern_adv: GrlCoefficient,
}

impl Lambdas {
    pub const ZERO: Lambdas = Lambdas {
        subject_adv: GrlCoefficient::ZERO,
        pattern_adv: GrlCoefficient::ZERO,
    };

    pub fn new(lambda_s: f64, lambda_p: f64) -> Result<Self> {
        Ok(Lambdas {
            subject_adv: GrlCoefficient::new(lambda_s)?,
            pattern_adv: GrlCoefficient::new(lambda_p)?,
        })
    }
}

/// Selects which outputs a forward pass computes.
///
/// Branches are evaluated only if one of their outputs is requested.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Paths {
    pub pattern: bool,
    pub subject: bool,
    pub adv_subject: bool,
    pub adv_pattern: bool,
}

impl Paths {
    pub const ALL: Paths = Paths {
        pattern: true,
        subject: true,
        adv_subject: true,
        adv_pattern: true,
    };

    pub const PATTERN_ONLY: Paths = Paths {
        pattern: true,
        subject: false,
        adv_subject: false,
        adv_pattern: false,
    };
}

/// Graph handles produced by a forward pass. Absent paths are `None`.
///
/// The `logits_*` nodes feed the softmax; use [`ForwardOutputs::probabilities`]
/// for the distributions.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOutputs {
    /// Flattened extractor output, `[N, W·C']`.
    pub z: Option<Var>,
    pub z_p: Option<Var>,
    pub z_s: Option<Var>,
    pub logits_p: Option<Var>,
    pub logits_s: Option<Var>,
    pub logits_adv_s: Option<Var>,
    pub logits_adv_p: Option<Var>,
}

impl ForwardOutputs {
    pub fn probabilities<T: Scalar>(graph: &Graph<T>, logits: Option<Var>) -> Option<Tensor<T>> {
        logits.map(|v| softmax(graph.value(v)).expect("logits are [N, K]"))
    }
}

/// Lazily maps parameter indices to graph leaves for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: Vec<Option<Var>>,
}

impl Bindings {
    pub fn var(&self, param: usize) -> Option<Var> {
        self.vars.get(param).copied().flatten()
    }

    pub fn bound(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
    }
}

/// Extractor, two branches and two classifier heads, with a variant tag.
#[derive(Clone, Debug, PartialEq)]
pub struct DualBranchModel<T = f32> {
    variant: Variant,
    n_patterns: usize,
    n_subjects: usize,
    seed: u64,
    input: InputSpec,
    dropout: f64,
    params: Vec<Param<T>>,
    bn: Vec<BatchNormSlot<T>>,
    layout: Layout,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    extractor: ConvBlockIds,
    pattern: BranchIds,
    subject: Option<BranchIds>,
    pattern_head: ClassifierIds,
    subject_head: Option<ClassifierIds>,
}

/// FNV-1a, used to give every named parameter its own RNG stream.
struct Builder<T: Scalar> {
    seed: u64,
    params: Vec<Param<T>>,
    bn: Vec<BatchNormSlot<T>>,
}

impl<T: Scalar> Builder<T> {
    /// He-style uniform init: U(−√(6/fan_in), √(6/fan_in)).
    fn weight(&mut self, name: String, component: Component, shape: &[usize], fan_in: usize) -> usize {
        let mut rng = named_rng(self.seed, &name);
        let bound = (6.0 / fan_in as f64).sqrt();
        let tensor = Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound)));
        self.push(name, component, tensor)
    }

    fn constant(&mut self, name: String, component: Component, len: usize, value: f64) -> usize {
        self.push(name, component, Tensor::full(&[len], T::from_f64(value)))
    }

    fn push(&mut self, name: String, component: Component, tensor: Tensor<T>) -> usize {
        self.params.push(Param {
            name,
            component,
            tensor,
        });
        self.params.len() - 1
    }

    fn batch_norm(&mut self, name: String, component: Component, channels: usize) -> (usize, usize, usize) {
        let gamma = self.constant(format!("{name}.gamma"), component, channels, 1.0);
        let beta = self.constant(format!("{name}.beta"), component, channels, 0.0);
        self.bn.push(BatchNormSlot {
            name,
            component,
            state: BatchNormState::new(channels),
        });
        (gamma, beta, self.bn.len() - 1)
    }

    fn conv_block(&mut self, prefix: &str, component: Component, spec: ConvBlockSpec) -> ConvBlockIds {
        let weight = self.weight(
            format!("{prefix}.conv.weight"),
            component,
            &[spec.out_channels, spec.in_channels, spec.kernel],
            spec.in_channels * spec.kernel,
        );
        let bias = self.constant(format!("{prefix}.conv.bias"), component, spec.out_channels, 0.0);
        let (gamma, beta, bn) = self.batch_norm(format!("{prefix}.bn"), component, spec.out_channels);
        ConvBlockIds {
            weight,
            bias,
            gamma,
            beta,
            bn,
            padding: spec.padding(),
        }
    }

    fn branch(&mut self, prefix: &str, encoder: Component, bottleneck: Component, flat: usize) -> BranchIds {
        let e0 = self.conv_block(&format!("{prefix}.encoder.0"), encoder, ENCODER[0]);
        let e1 = self.conv_block(&format!("{prefix}.encoder.1"), encoder, ENCODER[1]);
        let weight = self.weight(
            format!("{prefix}.bottleneck.linear.weight"),
            bottleneck,
            &[BOTTLENECK_UNITS, flat],
            flat,
        );
        let bias = self.constant(format!("{prefix}.bottleneck.linear.bias"), bottleneck, BOTTLENECK_UNITS, 0.0);
        let (gamma, beta, bn) = self.batch_norm(format!("{prefix}.bottleneck.bn"), bottleneck, BOTTLENECK_UNITS);
        BranchIds {
            encoder: [e0, e1],
            bottleneck: BottleneckIds {
                weight,
                bias,
                gamma,
                beta,
                bn,
            },
        }
    }

    fn classifier(&mut self, prefix: &str, component: Component, classes: usize) -> ClassifierIds {
        let weight = self.weight(
            format!("{prefix}.weight"),
            component,
            &[classes, BOTTLENECK_UNITS],
            BOTTLENECK_UNITS,
        );
        let bias = self.constant(format!("{prefix}.bias"), component, classes, 0.0);
        ClassifierIds { weight, bias }
    }
}

/// Builds a freshly initialized model with the default 408×8 input.
pub fn build_model<T: Scalar>(
    variant: Variant,
    n_patterns: usize,
    n_subjects: usize,
    seed: u64,
) -> Result<DualBranchModel<T>> {
    DualBranchModel::new(variant, n_patterns, n_subjects, seed, InputSpec::default())
}

impl<T: Scalar> DualBranchModel<T> {
    /// Deterministic construction: the same arguments give bit-identical
    /// parameters, and components shared between variants get identical values.
    pub fn new(
        variant: Variant,
        n_patterns: usize,
        n_subjects: usize,
        seed: u64,
        input: InputSpec,
    ) -> Result<Self> {
        if n_patterns < 2 {
            return Err(Error::invalid("n_patterns", format!("{n_patterns} < 2")));
        }
        if variant.has_subject_head() && n_subjects < 2 {
            return Err(Error::invalid("n_subjects", format!("{n_subjects} < 2")));
        }
        if input.encoder_len() == 0 || input.channels == 0 {
            return Err(Error::invalid(
                "input",
                format!("window of {} samples is too short for three poolings", input.window_len),
            ));
        }
        let mut b = Builder::<T> {
            seed,
            params: Vec::new(),
            bn: Vec::new(),
        };
        let extractor = b.conv_block(
            "extractor",
            Component::Extractor,
            ConvBlockSpec {
                in_channels: input.channels,
                ..EXTRACTOR
            },
        );
        let flat = input.flat_features();
        let pattern = b.branch("pattern", Component::PatternEncoder, Component::PatternBottleneck, flat);
        let subject = variant
            .has_subject_branch()
            .then(|| b.branch("subject", Component::SubjectEncoder, Component::SubjectBottleneck, flat));
        let pattern_head = b.classifier("pattern.classifier", Component::PatternClassifier, n_patterns);
        let subject_head = variant
            .has_subject_head()
            .then(|| b.classifier("subject.classifier", Component::SubjectClassifier, n_subjects));
        Ok(DualBranchModel {
            variant,
            n_patterns,
            n_subjects: if variant.has_subject_head() { n_subjects } else { 0 },
            seed,
            input,
            dropout: DROPOUT_RATE,
            params: b.params,
            bn: b.bn,
            layout: Layout {
                extractor,
                pattern,
                subject,
                pattern_head,
                subject_head,
            },
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn n_patterns(&self) -> usize {
        self.n_patterns
    }

    /// Width of the subject classifier; 0 for ERM.
    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_spec(&self) -> InputSpec {
        self.input
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout
    }

    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("{rate} not in [0, 1)")));
        }
        self.dropout = rate;
        Ok(())
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn batch_norms(&self) -> &[BatchNormSlot<T>] {
        &self.bn
    }

    pub fn batch_norms_mut(&mut self) -> &mut [BatchNormSlot<T>] {
        &mut self.bn
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.param_index(name).map(|i| &self.params[i].tensor)
    }

    /// Indices of all parameters in the given components.
    pub fn component_params(&self, components: &[Component]) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| components.contains(&self.params[i].component))
            .collect()
    }

    /// Same architecture in another precision.
    pub fn cast<U: Scalar>(&self) -> DualBranchModel<U> {
        DualBranchModel {
            variant: self.variant,
            n_patterns: self.n_patterns,
            n_subjects: self.n_subjects,
            seed: self.seed,
            input: self.input,
            dropout: self.dropout,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    component: p.component,
                    tensor: p.tensor.cast(),
                })
                .collect(),
            bn: self
                .bn
                .iter()
                .map(|s| BatchNormSlot {
                    name: s.name.clone(),
                    component: s.component,
                    state: s.state.cast(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// Replaces a parameter's values, keeping its shape.
    pub fn set_param(&mut self, name: &str, values: &[T]) -> Result<()> {
        let i = self
            .param_index(name)
            .ok_or_else(|| Error::invalid("parameter", format!("model has no parameter {name:?}")))?;
        let t = &mut self.params[i].tensor;
        if t.numel() != values.len() {
            return Err(Error::dim(
                "set_param",
                format!("{name}: {} values for shape {:?}", values.len(), t.shape()),
            ));
        }
        t.data_mut().copy_from_slice(values);
        t.clear_grad();
        Ok(())
    }

    /// Replaces the running statistics of a batch-norm layer.
    pub fn set_batch_norm(&mut self, name: &str, state: BatchNormState<T>) -> Result<()> {
        let slot = self
            .bn
            .iter_mut()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::invalid("batch norm", format!("model has no layer {name:?}")))?;
        if slot.state.channels() != state.channels() || state.running_var.len() != state.channels() {
            return Err(Error::dim(
                "set_batch_norm",
                format!("{name}: {} channels, expected {}", state.channels(), slot.state.channels()),
            ));
        }
        slot.state = state;
        Ok(())
    }

    /// Copies every parameter and batch-norm state that `other` also has, by
    /// name. Fails if a shared name has a different shape.
    pub fn copy_state_from(&mut self, other: &DualBranchModel<T>) -> Result<()> {
        for p in &other.params {
            if self.param_index(&p.name).is_some() {
                self.set_param(&p.name, p.tensor.data())?;
            }
        }
        for s in &other.bn {
            if self.bn.iter().any(|b| b.name == s.name) {
                self.set_batch_norm(&s.name, s.state.clone())?;
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<()> {
        let want = [self.input.window_len, self.input.channels];
        match batch.shape() {
            [_, l, c] if [*l, *c] == want => Ok(()),
            s => Err(Error::dim(
                "forward",
                format!("batch must be [N, {}, {}], got {s:?}", want[0], want[1]),
            )),
        }
    }

    /// Full forward pass computing every path the variant has.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        graph: &mut Graph<T>,
        batch: &Tensor<T>,
        mode: Mode,
        lambdas: Lambdas,
        rng: &mut R,
    ) -> Result<(ForwardOutputs, Bindings)> {
        self.forward_paths(graph, batch, mode, lambdas, Paths::ALL, rng)
    }

    /// Forward pass restricted to `paths` (intersected with what the variant has).
    ///
    /// Train mode updates the batch-norm running statistics of every branch
    /// that runs. Both heads fed by a bottleneck share one dropout mask.
    pub fn forward_paths<R: Rng + ?Sized>(
        &mut self,
        graph: &mut Graph<T>,
        batch: &Tensor<T>,
        mode: Mode,
        lambdas: Lambdas,
        paths: Paths,
        rng: &mut R,
    ) -> Result<(ForwardOutputs, Bindings)> {
        let mut bn = std::mem::take(&mut self.bn);
        let result = self.forward_core(&mut bn, graph, batch, mode, lambdas, paths, rng);
        self.bn = bn;
        result.map(|(out, bindings, _)| (out, bindings))
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_core<R: Rng + ?Sized>(
        &self,
        bn: &mut [BatchNormSlot<T>],
        graph: &mut Graph<T>,
        batch: &Tensor<T>,
        mode: Mode,
        lambdas: Lambdas,
        paths: Paths,
        rng: &mut R,
    ) -> Result<(ForwardOutputs, Bindings, Vec<(String, Vec<usize>)>)> {
        self.check_batch(batch)?;
        let mut run = Run {
            params: &self.params,
            bn,
            bindings: Bindings {
                vars: vec![None; self.params.len()],
            },
            graph,
            mode,
            trace: Vec::new(),
        };
        let v = self.variant;
        let l = &self.layout;
        let x = run.graph.input(batch.clone());
        let z = run.conv_block(x, &l.extractor)?;
        let n = batch.shape()[0];
        let z_flat = run.graph.reshape(z, &[n, self.input.original_features()])?;
        run.record(l.extractor.weight, ".conv.weight", ".flatten", z_flat);
        let mut out = ForwardOutputs {
            z: Some(z_flat),
            ..Default::default()
        };

        let adv_s = paths.adv_subject && v.has_subject_adversary();
        let adv_p = paths.adv_pattern && v.has_pattern_adversary();
        let subject_main = paths.subject && v.has_subject_branch();

        if paths.pattern || adv_s {
            let z_p = run.branch(z, &l.pattern, self.input.flat_features(), self.dropout, rng)?;
            out.z_p = Some(z_p);
            if paths.pattern {
                out.logits_p = Some(run.classifier(z_p, &l.pattern_head, "")?);
            }
            if adv_s {
                let head = l.subject_head.as_ref().expect("adversary implies subject head");
                let r = run.graph.gradient_reversal(z_p, lambdas.subject_adv);
                out.logits_adv_s = Some(run.classifier(r, head, ".adversarial")?);
            }
        }
        if subject_main || adv_p {
            let branch = l.subject.as_ref().expect("variant has subject branch");
            let z_s = run.branch(z, branch, self.input.flat_features(), self.dropout, rng)?;
            out.z_s = Some(z_s);
            if subject_main {
                let head = l.subject_head.as_ref().expect("subject branch implies head");
                out.logits_s = Some(run.classifier(z_s, head, "")?);
            }
            if adv_p {
                let r = run.graph.gradient_reversal(z_s, lambdas.pattern_adv);
                out.logits_adv_p = Some(run.classifier(r, &l.pattern_head, ".adversarial")?);
            }
        }
        Ok((out, run.bindings, run.trace))
    }

    /// Adds the gradients of one backward sweep into the bound parameters.
    pub fn accumulate_grads(&mut self, grads: &Gradients<T>, bindings: &Bindings) -> Result<()> {
        for (i, var) in bindings.bound() {
            grads.accumulate_into(var, &mut self.params[i].tensor)?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.clear_grad());
    }

    /// Eval-mode forward that leaves the model untouched.
    pub fn infer(&self, graph: &mut Graph<T>, batch: &Tensor<T>, paths: Paths) -> Result<ForwardOutputs> {
        let mut bn = self.bn.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, _, _) = self.forward_core(&mut bn, graph, batch, Mode::Eval, Lambdas::ZERO, paths, &mut rng)?;
        Ok(out)
    }

    /// Per-sample output shape of every block in an eval-mode pass over
    /// `batch`, in evaluation order. The batch dimension is dropped.
    pub fn shape_trace(&self, batch: &Tensor<T>) -> Result<Vec<(String, Vec<usize>)>> {
        let mut bn = self.bn.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut graph = Graph::new();
        let (_, _, trace) =
            self.forward_core(&mut bn, &mut graph, batch, Mode::Eval, Lambdas::ZERO, Paths::ALL, &mut rng)?;
        Ok(trace.into_iter().map(|(name, shape)| (name, shape[1..].to_vec())).collect())
    }

    /// Pattern probabilities `[N, N_p]` in eval mode.
    pub fn predict_patterns(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut graph = Graph::new();
        let out = self.infer(&mut graph, batch, Paths::PATTERN_ONLY)?;
        Ok(ForwardOutputs::probabilities(&graph, out.logits_p).expect("pattern path requested"))
    }

    /// Subject probabilities `[N, N_s]` from the subject branch in eval mode.
    pub fn predict_subjects(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.variant.has_subject_branch() {
            return Err(Error::UnsupportedVariant {
                variant: self.variant.to_string(),
                what: "subject prediction".into(),
            });
        }
        let mut graph = Graph::new();
        let paths = Paths {
            pattern: false,
            subject: true,
            adv_subject: false,
            adv_pattern: false,
        };
        let out = self.infer(&mut graph, batch, paths)?;
        Ok(ForwardOutputs::probabilities(&graph, out.logits_s).expect("subject path requested"))
    }

    /// Eval-mode features: flattened `z` (`[N, W·C']`), `z_p` or `z_s` (`[N, 256]`).
    pub fn export_features(&self, batch: &Tensor<T>, which: FeatureKind) -> Result<Tensor<T>> {
        let paths = match which {
            FeatureKind::Original => Paths {
                pattern: false,
                subject: false,
                adv_subject: false,
                adv_pattern: false,
            },
            FeatureKind::Pattern => Paths::PATTERN_ONLY,
            FeatureKind::Subject => {
                if !self.variant.has_subject_branch() {
                    return Err(Error::UnsupportedVariant {
                        variant: self.variant.to_string(),
                        what: "subject-specific features".into(),
                    });
                }
                Paths {
                    pattern: false,
                    subject: true,
                    adv_subject: false,
                    adv_pattern: false,
                }
            }
        };
        let mut graph = Graph::new();
        let out = self.infer(&mut graph, batch, paths)?;
        let var = match which {
            FeatureKind::Original => out.z,
            FeatureKind::Pattern => out.z_p,
            FeatureKind::Subject => out.z_s,
        }
        .expect("requested path ran");
        Ok(graph.value(var).clone())
    }
}

struct Run<'a, T: Scalar> {
    params: &'a [Param<T>],
    bn: &'a mut [BatchNormSlot<T>],
    bindings: Bindings,
    graph: &'a mut Graph<T>,
    mode: Mode,
    trace: Vec<(String, Vec<usize>)>,
}

impl<T: Scalar> Run<'_, T> {
    fn p(&mut self, i: usize) -> Var {
        if let Some(v) = self.bindings.vars[i] {
            return v;
        }
        let v = self.graph.param(&self.params[i].tensor);
        self.bindings.vars[i] = Some(v);
        v
    }

    /// Logs the shape of `v` under the name of `param` with `strip` replaced by `tag`.
    fn record(&mut self, param: usize, strip: &str, tag: &str, v: Var) {
        let name = &self.params[param].name;
        let label = format!("{}{tag}", name.strip_suffix(strip).unwrap_or(name));
        self.trace.push((label, self.graph.shape(v).to_vec()));
    }

    fn conv_block(&mut self, x: Var, ids: &ConvBlockIds) -> Result<Var> {
        let (w, b, g, be) = (self.p(ids.weight), self.p(ids.bias), self.p(ids.gamma), self.p(ids.beta));
        let y = self.graph.conv1d(x, w, b, ids.padding)?;
        let y = self.graph.batch_norm(y, g, be, &mut self.bn[ids.bn].state, self.mode)?;
        let y = self.graph.relu(y)?;
        let y = self.graph.maxpool1d(y)?;
        self.record(ids.weight, ".conv.weight", "", y);
        Ok(y)
    }

    fn branch<R: Rng + ?Sized>(
        &mut self,
        z: Var,
        ids: &BranchIds,
        flat: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Var> {
        let h = self.conv_block(z, &ids.encoder[0])?;
        let h = self.conv_block(h, &ids.encoder[1])?;
        let n = self.graph.shape(h)[0];
        // [N, W, C] row-major is already position-major, channel-minor
        let h = self.graph.reshape(h, &[n, flat])?;
        self.record(ids.bottleneck.weight, ".bottleneck.linear.weight", ".flatten", h);
        let bt = &ids.bottleneck;
        let (w, b, g, be) = (self.p(bt.weight), self.p(bt.bias), self.p(bt.gamma), self.p(bt.beta));
        let h = self.graph.linear(h, w, b)?;
        let h = self.graph.batch_norm(h, g, be, &mut self.bn[bt.bn].state, self.mode)?;
        let h = self.graph.relu(h)?;
        let h = self.graph.dropout(h, dropout, self.mode, rng)?;
        self.record(bt.weight, ".linear.weight", "", h);
        Ok(h)
    }

    fn classifier(&mut self, x: Var, ids: &ClassifierIds, tag: &str) -> Result<Var> {
        let (w, b) = (self.p(ids.weight), self.p(ids.bias));
        let y = self.graph.linear(x, w, b)?;
        self.record(ids.weight, ".weight", tag, y);
        Ok(y)
    }
}
