//! MiniCNN with two-branch batch normalization.
//!
//! Both branches read the same convolution kernels and classifier from one
//! [`ParamStore`]. Each branch owns a pair of BN affines (`bnN.adaptive.*`,
//! `bnN.frozen.*`). The Adaptive branch normalizes with batch statistics
//! and maintains running statistics. The Frozen branch normalizes with the
//! pre-training population statistics. Inference uses the Adaptive affines
//! with the running statistics.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::{DType, Scalar, Tensor};

pub const CONV_STRIDE: usize = 2;
pub const CONV_PAD: usize = 1;
pub const CONV_KERNEL: usize = 3;

fn default_widths() -> Vec<usize> {
    vec![16, 32]
}
fn default_eps() -> f64 {
    1e-5
}
fn default_bn_momentum() -> f64 {
    0.1
}
fn default_dtype() -> DType {
    DType::F32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `[C, H, W]` of one input image.
    pub input: [usize; 3],
    /// Output channels of each Conv3×3/s2 → BN → ReLU block.
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    pub target_classes: usize,
    #[serde(default)]
    pub source_classes: Option<usize>,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_dtype")]
    pub dtype: DType,
}

impl ModelConfig {
    pub fn new(input: [usize; 3], target_classes: usize) -> Self {
        Self {
            input,
            widths: default_widths(),
            target_classes,
            source_classes: None,
            eps: default_eps(),
            bn_momentum: default_bn_momentum(),
            dtype: default_dtype(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.contains(&0) {
            return Err(Error::Config(format!("input shape {:?} has a zero extent", self.input)));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("invalid block widths {:?}", self.widths)));
        }
        if self.target_classes < 2 || self.source_classes.is_some_and(|k| k < 2) {
            return Err(Error::Config("class counts must be at least 2".into()));
        }
        if self.eps < 0.0 || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("eps must be >= 0 and momentum in [0, 1]".into()));
        }
        let (mut h, mut w) = (self.input[1], self.input[2]);
        for _ in &self.widths {
            if h + 2 * CONV_PAD < CONV_KERNEL || w + 2 * CONV_PAD < CONV_KERNEL {
                return Err(Error::Config("input too small for the block stack".into()));
            }
            h = (h + 2 * CONV_PAD - CONV_KERNEL) / CONV_STRIDE + 1;
            w = (w + 2 * CONV_PAD - CONV_KERNEL) / CONV_STRIDE + 1;
        }
        Ok(())
    }

    pub fn feature_width(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }
}

/// Which statistics and affines a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchMode {
    AdaptiveTrain,
    FrozenTrain,
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Target,
    Source,
}

impl std::str::FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(Head::Target),
            "source" => Ok(Head::Source),
            other => Err(Error::InvalidInput(format!("unknown head `{other}`"))),
        }
    }
}

impl Head {
    fn prefix(self) -> &'static str {
        match self {
            Head::Target => "head",
            Head::Source => "source_head",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum StatSource {
    Batch,
    Frozen,
    Running,
}

/// A branch's pair of BN affines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AffineSet {
    Adaptive,
    Frozen,
}

/// Resolved normalization plan for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Normalization {
    pub stats: StatSource,
    pub affine: AffineSet,
}

impl Normalization {
    /// Batch statistics with the Frozen affines; what warmup uses to
    /// re-estimate the frozen statistics.
    pub(crate) const WARMUP: Self = Self {
        stats: StatSource::Batch,
        affine: AffineSet::Frozen,
    };
}

impl From<BranchMode> for Normalization {
    fn from(mode: BranchMode) -> Self {
        match mode {
            BranchMode::AdaptiveTrain => Self {
                stats: StatSource::Batch,
                affine: AffineSet::Adaptive,
            },
            BranchMode::FrozenTrain => Self {
                stats: StatSource::Frozen,
                affine: AffineSet::Frozen,
            },
            BranchMode::Inference => Self {
                stats: StatSource::Running,
                affine: AffineSet::Adaptive,
            },
        }
    }
}

/// Statistics of one BN layer. The affines live in the [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct BnLayerState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub frozen_mean: Vec<T>,
    pub frozen_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Scalar> BnLayerState<T> {
    pub fn new(channels: usize, eps: T, momentum: T) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            frozen_mean: vec![T::zero(); channels],
            frozen_var: vec![T::one(); channels],
            eps,
            momentum,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    fn ema(old: &mut [T], new: &[T], m: T) {
        for (o, &b) in old.iter_mut().zip(new) {
            *o = (T::one() - m) * *o + m * b;
        }
    }

    /// `running ← (1 - m)·running + m·batch` for mean and variance.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        Self::ema(&mut self.running_mean, &stats.mean, self.momentum);
        Self::ema(&mut self.running_var, &stats.var, self.momentum);
    }

    /// The same EMA applied to the frozen statistics; only warmup calls this.
    pub fn update_frozen(&mut self, stats: &BatchStats<T>) {
        Self::ema(&mut self.frozen_mean, &stats.mean, self.momentum);
        Self::ema(&mut self.frozen_var, &stats.var, self.momentum);
    }

    fn stats(&self, src: StatSource) -> Option<(&[T], &[T])> {
        match src {
            StatSource::Batch => None,
            StatSource::Frozen => Some((&self.frozen_mean, &self.frozen_var)),
            StatSource::Running => Some((&self.running_mean, &self.running_var)),
        }
    }
}

/// Normalizes `x` with the statistics selected by `mode`, then applies the
/// given affine. Returns the batch statistics in `AdaptiveTrain`.
pub fn bn_forward<T: Scalar>(
    x: &Tensor<T>,
    state: &BnLayerState<T>,
    gamma: &[T],
    beta: &[T],
    mode: BranchMode,
) -> Result<(Tensor<T>, Option<BatchStats<T>>)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let gv = tape.constant(Tensor::new(vec![gamma.len()], gamma.to_vec())?);
    let bv = tape.constant(Tensor::new(vec![beta.len()], beta.to_vec())?);
    let (y, stats) = normalize_node(&mut tape, xv, state, Normalization::from(mode).stats)?;
    let out = tape.channel_affine(y, gv, bv)?;
    Ok((tape.value(out).clone(), stats))
}

fn normalize_node<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    state: &BnLayerState<T>,
    src: StatSource,
) -> Result<(Var, Option<BatchStats<T>>)> {
    match state.stats(src) {
        None => {
            let (y, stats) = tape.norm_batch(x, state.eps)?;
            Ok((y, Some(stats)))
        }
        Some((mean, var)) => Ok((tape.norm_fixed(x, mean, var, state.eps)?, None)),
    }
}

/// Nodes of one recorded forward pass.
#[derive(Debug, Clone)]
pub struct GraphOutput<T> {
    /// Global-average-pooled features `[N, F]`.
    pub features: Var,
    pub logits: Var,
    /// Per BN layer; `Some` when the layer normalized with batch statistics.
    pub batch_stats: Vec<Option<BatchStats<T>>>,
    /// Input of each convolution (`h` of the previous layer).
    pub conv_inputs: Vec<Var>,
    /// Convolution outputs before normalization.
    pub pre_norm: Vec<Var>,
    /// Normalized activations before the affine.
    pub normalized: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub bn: Vec<BnLayerState<T>>,
}

pub fn conv_name(layer: usize) -> String {
    format!("conv{}.weight", layer + 1)
}

pub fn bn_affine_names(layer: usize, affine: AffineSet) -> (String, String) {
    let tag = match affine {
        AffineSet::Adaptive => "adaptive",
        AffineSet::Frozen => "frozen",
    };
    (
        format!("bn{}.{tag}.gamma", layer + 1),
        format!("bn{}.{tag}.beta", layer + 1),
    )
}

/// True for the Frozen branch's BN affines.
pub fn is_frozen_affine(name: &str) -> bool {
    name.starts_with("bn") && name.contains(".frozen.")
}

pub fn is_source_head(name: &str) -> bool {
    name.starts_with("source_head.")
}

fn init_linear<T: Scalar, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> (Tensor<T>, Tensor<T>) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let w = (0..fan_in * fan_out).map(|_| T::of(dist.sample(rng))).collect();
    (
        Tensor::new(vec![fan_in, fan_out], w).expect("sized"),
        Tensor::zeros(&[fan_out]),
    )
}

impl<T: Scalar> Model<T> {
    /// Random initialization: He-normal kernels, unit gammas, zero betas,
    /// uniform classifier weights and zero biases.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut bn = Vec::with_capacity(config.widths.len());
        let mut in_ch = config.input[0];
        for (l, &out_ch) in config.widths.iter().enumerate() {
            let fan_in = in_ch * CONV_KERNEL * CONV_KERNEL;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let k = (0..out_ch * fan_in).map(|_| T::of(normal.sample(rng))).collect();
            params.insert(
                conv_name(l),
                Tensor::new(vec![out_ch, in_ch, CONV_KERNEL, CONV_KERNEL], k)?,
            );
            for set in [AffineSet::Adaptive, AffineSet::Frozen] {
                let (g, b) = bn_affine_names(l, set);
                params.insert(g, Tensor::full(&[out_ch], T::one()));
                params.insert(b, Tensor::zeros(&[out_ch]));
            }
            bn.push(BnLayerState::new(out_ch, T::of(config.eps), T::of(config.bn_momentum)));
            in_ch = out_ch;
        }
        let (w, b) = init_linear(rng, in_ch, config.target_classes);
        params.insert("head.weight", w);
        params.insert("head.bias", b);
        if let Some(ks) = config.source_classes {
            let (w, b) = init_linear(rng, in_ch, ks);
            params.insert("source_head.weight", w);
            params.insert("source_head.bias", b);
        }
        Ok(Self { config, params, bn })
    }

    pub fn num_layers(&self) -> usize {
        self.bn.len()
    }

    pub fn has_head(&self, head: Head) -> bool {
        self.params.contains(&format!("{}.weight", head.prefix()))
    }

    pub fn num_classes(&self, head: Head) -> Result<usize> {
        let w = self
            .params
            .get(&format!("{}.weight", head.prefix()))
            .ok_or_else(|| Error::InvalidInput(format!("model has no {head:?} head")))?;
        Ok(w.shape()[1])
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.config.input {
            return Err(Error::shape(
                "model_forward",
                format!("input {s:?} does not match [N, {:?}]", self.config.input),
            ));
        }
        Ok(())
    }

    /// Records one forward pass on `tape` without touching any statistics.
    pub(crate) fn graph(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        x: Var,
        norm: Normalization,
        head: Head,
    ) -> Result<GraphOutput<T>> {
        self.check_input(tape.value(x))?;
        if !self.has_head(head) {
            return Err(Error::InvalidInput(format!("model has no {head:?} head")));
        }
        let mut h = x;
        let layers = self.num_layers();
        let mut out = GraphOutput {
            features: x,
            logits: x,
            batch_stats: Vec::with_capacity(layers),
            conv_inputs: Vec::with_capacity(layers),
            pre_norm: Vec::with_capacity(layers),
            normalized: Vec::with_capacity(layers),
        };
        for (l, state) in self.bn.iter().enumerate() {
            out.conv_inputs.push(h);
            let conv = tape.conv2d(h, bound.var(&conv_name(l))?, CONV_STRIDE, CONV_PAD)?;
            let (normed, stats) = normalize_node(tape, conv, state, norm.stats)?;
            let (g, b) = bn_affine_names(l, norm.affine);
            let y = tape.channel_affine(normed, bound.var(&g)?, bound.var(&b)?)?;
            h = tape.relu(y);
            out.pre_norm.push(conv);
            out.normalized.push(normed);
            out.batch_stats.push(stats);
        }
        let feats = tape.global_avg_pool(h)?;
        let p = head.prefix();
        let z = tape.matmul(feats, bound.var(&format!("{p}.weight"))?)?;
        let logits = tape.add_bias(z, bound.var(&format!("{p}.bias"))?)?;
        out.features = feats;
        out.logits = logits;
        Ok(out)
    }

    /// Records one forward pass through `branch` without committing statistics.
    pub fn forward_graph(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        x: Var,
        branch: BranchMode,
        head: Head,
    ) -> Result<GraphOutput<T>> {
        self.graph(tape, bound, x, branch.into(), head)
    }

    /// EMA-updates the running statistics with a pass's batch statistics.
    pub fn commit_running(&mut self, stats: &[Option<BatchStats<T>>]) {
        for (state, s) in self.bn.iter_mut().zip(stats) {
            if let Some(s) = s {
                state.update_running(s);
            }
        }
    }

    pub(crate) fn commit_frozen(&mut self, stats: &[Option<BatchStats<T>>]) {
        for (state, s) in self.bn.iter_mut().zip(stats) {
            if let Some(s) = s {
                state.update_frozen(s);
            }
        }
    }

    /// Eager forward returning `(features, logits)`. `AdaptiveTrain` commits
    /// the batch statistics to the running statistics.
    pub fn model_forward(&mut self, x: &Tensor<T>, branch: BranchMode, head: Head) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let g = self.forward_graph(&mut tape, &bound, xv, branch, head)?;
        if branch == BranchMode::AdaptiveTrain {
            self.commit_running(&g.batch_stats);
        }
        Ok((tape.value(g.features).clone(), tape.value(g.logits).clone()))
    }

    /// Logits without side effects.
    pub fn logits(&self, x: &Tensor<T>, branch: BranchMode, head: Head) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let g = self.forward_graph(&mut tape, &bound, xv, branch, head)?;
        Ok(tape.value(g.logits).clone())
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        self.logits(x, BranchMode::Inference, Head::Target)?.argmax_rows()
    }

    /// Turns a pre-trained source model into the starting point of
    /// fine-tuning: the trained classifier becomes the source head, a fresh
    /// target head is drawn, and both branches start from the pre-trained
    /// affines and population statistics.
    pub fn prepare_finetune<R: Rng + ?Sized>(&mut self, target_classes: usize, rng: &mut R) -> Result<()> {
        if target_classes < 2 {
            return Err(Error::Config("target class count must be at least 2".into()));
        }
        let w = self.params.remove("head.weight").ok_or_else(|| Error::UnknownParameter("head.weight".into()))?;
        let b = self.params.remove("head.bias").ok_or_else(|| Error::UnknownParameter("head.bias".into()))?;
        self.config.source_classes = Some(w.shape()[1]);
        self.params.insert("source_head.weight", w);
        self.params.insert("source_head.bias", b);
        let (w, b) = init_linear(rng, self.config.feature_width(), target_classes);
        self.params.insert("head.weight", w);
        self.params.insert("head.bias", b);
        self.config.target_classes = target_classes;
        for l in 0..self.num_layers() {
            let (ga, ba) = bn_affine_names(l, AffineSet::Adaptive);
            let (gf, bf) = bn_affine_names(l, AffineSet::Frozen);
            let g = self.params.require(&ga)?.clone();
            let b = self.params.require(&ba)?.clone();
            self.params.insert(gf, g);
            self.params.insert(bf, b);
            let s = &mut self.bn[l];
            s.frozen_mean = s.running_mean.clone();
            s.frozen_var = s.running_var.clone();
        }
        Ok(())
    }

    /// Sets every BN layer's eps (the scale-law checks use 0).
    pub fn set_eps(&mut self, eps: f64) {
        self.config.eps = eps;
        for s in &mut self.bn {
            s.eps = T::of(eps);
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut config = self.config.clone();
        config.dtype = U::DTYPE;
        Model {
            config,
            params: self.params.cast(),
            bn: self
                .bn
                .iter()
                .map(|s| BnLayerState {
                    running_mean: s.running_mean.iter().map(|&v| U::of(v.f64())).collect(),
                    running_var: s.running_var.iter().map(|&v| U::of(v.f64())).collect(),
                    frozen_mean: s.frozen_mean.iter().map(|&v| U::of(v.f64())).collect(),
                    frozen_var: s.frozen_var.iter().map(|&v| U::of(v.f64())).collect(),
                    eps: U::of(s.eps.f64()),
                    momentum: U::of(s.momentum.f64()),
                })
                .collect(),
        }
    }
}
