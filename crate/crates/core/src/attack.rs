//! l∞ projected gradient descent.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::network::{BranchMode, Head, Model};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Loss the attacker ascends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackLoss {
    /// Cross-entropy against the true labels.
    #[default]
    Ce,
    /// KL divergence of the adversarial prediction from the clean one.
    KlToClean,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// l∞ radius on the [0, 1] pixel scale.
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    #[serde(default = "default_true")]
    pub rand_init: bool,
    /// `None` means cross-entropy for standalone attacks and the method's
    /// default inside training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<AttackLoss>,
}

impl AttackConfig {
    /// PGD-10 with ε = 8/255 and α = 2/255.
    pub fn pgd10() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            steps: 10,
            rand_init: true,
            loss: None,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) || !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!(
                "attack needs 0 <= epsilon <= 1 and alpha >= 0, got epsilon={} alpha={}",
                self.epsilon, self.alpha
            )));
        }
        Ok(())
    }
}

/// Something PGD can differentiate through.
pub trait Classifier<T: Scalar> {
    /// Records logits for `x` on `tape` with no persistent side effects.
    fn logits_graph(&self, tape: &mut Tape<T>, x: Var, branch: BranchMode) -> Result<Var>;
}

/// A model viewed through one of its classifier heads.
#[derive(Debug, Clone, Copy)]
pub struct WithHead<'a, T> {
    pub model: &'a Model<T>,
    pub head: Head,
}

impl<T: Scalar> Model<T> {
    pub fn with_head(&self, head: Head) -> WithHead<'_, T> {
        WithHead { model: self, head }
    }
}

impl<T: Scalar> Classifier<T> for WithHead<'_, T> {
    fn logits_graph(&self, tape: &mut Tape<T>, x: Var, branch: BranchMode) -> Result<Var> {
        let bound = self.model.params.bind_frozen(tape);
        Ok(self.model.forward_graph(tape, &bound, x, branch, self.head)?.logits)
    }
}

impl<T: Scalar> Classifier<T> for Model<T> {
    fn logits_graph(&self, tape: &mut Tape<T>, x: Var, branch: BranchMode) -> Result<Var> {
        self.with_head(Head::Target).logits_graph(tape, x, branch)
    }
}

/// Softmax-linear classifier over flattened inputs: `logits = x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier<T> {
    pub params: ParamStore<T>,
}

impl<T: Scalar> LinearClassifier<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let [_, k] = weight.dims2("linear classifier")?;
        if bias.len() != k {
            return Err(Error::shape("linear classifier", "bias width differs from classes"));
        }
        let mut params = ParamStore::new();
        params.insert("weight", weight);
        params.insert("bias", bias);
        Ok(Self { params })
    }
}

impl<T: Scalar> Classifier<T> for LinearClassifier<T> {
    fn logits_graph(&self, tape: &mut Tape<T>, x: Var, _branch: BranchMode) -> Result<Var> {
        let bound = self.params.bind_frozen(tape);
        if tape.value(x).rank() != 2 {
            return Err(Error::shape(
                "linear classifier",
                format!("expects flattened [N, D] input, got {:?}", tape.value(x).shape()),
            ));
        }
        let z = tape.matmul(x, bound.var("weight")?)?;
        tape.add_bias(z, bound.var("bias")?)
    }
}

/// Clamps `x_adv` into `[x - ε, x + ε] ∩ [0, 1]` elementwise.
pub fn project_linf<T: Scalar>(x_adv: &Tensor<T>, x_orig: &Tensor<T>, epsilon: T) -> Result<Tensor<T>> {
    x_adv.zip_map(x_orig, |a, o| {
        a.max(o - epsilon).min(o + epsilon).max(T::zero()).min(T::one())
    })
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Loss of one iterate and its input gradient.
fn loss_and_grad<T: Scalar, C: Classifier<T>>(
    model: &C,
    branch: BranchMode,
    x: &Tensor<T>,
    labels: &[usize],
    clean_logits: Option<&Tensor<T>>,
) -> Result<(T, Tensor<T>)> {
    let mut tape = Tape::new();
    let xv = tape.variable(x.clone());
    let logits = model.logits_graph(&mut tape, xv, branch)?;
    let loss = match clean_logits {
        None => tape.softmax_cross_entropy(logits, labels)?,
        Some(clean) => {
            let c = tape.constant(clean.clone());
            tape.kl_div_logits(logits, c)?
        }
    };
    let adj = tape.backward(loss)?;
    let g = adj.get_or_zeros(xv, x);
    Ok((tape.value(loss).item()?, g))
}

/// PGD with per-iterate loss trace: `trace[i]` is the attack loss at the
/// i-th iterate, so the last entry belongs to the returned point.
pub fn pgd_attack_trace<T: Scalar, C: Classifier<T>, R: Rng + ?Sized>(
    model: &C,
    branch: BranchMode,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<T>)> {
    run_pgd(model, branch, x, labels, cfg, rng, true)
}

fn run_pgd<T: Scalar, C: Classifier<T>, R: Rng + ?Sized>(
    model: &C,
    branch: BranchMode,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
    trace_final: bool,
) -> Result<(Tensor<T>, Vec<T>)> {
    cfg.validate()?;
    if cfg.epsilon == 0.0 {
        return Ok((x.clone(), Vec::new()));
    }
    let eps = T::of(cfg.epsilon);
    let alpha = T::of(cfg.alpha);
    let clean_logits = match cfg.loss.unwrap_or_default() {
        AttackLoss::Ce => None,
        AttackLoss::KlToClean => {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let l = model.logits_graph(&mut tape, xv, branch)?;
            Some(tape.value(l).clone())
        }
    };

    let mut adv = if cfg.rand_init {
        let noise: Vec<T> = (0..x.len())
            .map(|_| T::of(rng.random_range(-cfg.epsilon..=cfg.epsilon)))
            .collect();
        let start = x.zip_map(&Tensor::new(x.shape().to_vec(), noise)?, |a, b| a + b)?;
        project_linf(&start, x, eps)?
    } else {
        x.clone()
    };

    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..cfg.steps {
        let (loss, g) = loss_and_grad(model, branch, &adv, labels, clean_logits.as_ref())?;
        trace.push(loss);
        let stepped = adv.zip_map(&g, |a, gv| a + alpha * sign(gv))?;
        adv = project_linf(&stepped, x, eps)?;
    }
    if trace_final {
        trace.push(loss_and_grad(model, branch, &adv, labels, clean_logits.as_ref())?.0);
    }
    Ok((adv, trace))
}

/// Adversarial examples for `x` within the l∞ ball of `cfg.epsilon`.
///
/// The attacked branch normalizes exactly as it would in its forward pass,
/// but no statistics are ever committed.
pub fn pgd_attack<T: Scalar, C: Classifier<T>, R: Rng + ?Sized>(
    model: &C,
    branch: BranchMode,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor<T>> {
    run_pgd(model, branch, x, labels, cfg, rng, false).map(|(adv, _)| adv)
}

/// Verifies the ball and pixel-range invariants of an attack output.
pub fn check_ball<T: Scalar>(x_adv: &Tensor<T>, x: &Tensor<T>, epsilon: f64) -> Result<()> {
    x_adv.expect_same_shape(x, "check_ball")?;
    for (&a, &o) in x_adv.data().iter().zip(x.data()) {
        let (a, o) = (a.f64(), o.f64());
        if (a - o).abs() > epsilon + 1e-7 || !(0.0..=1.0).contains(&a) {
            return Err(Error::InvalidInput(format!(
                "adversarial value {a} leaves the ball around {o} (epsilon {epsilon})"
            )));
        }
    }
    Ok(())
}
