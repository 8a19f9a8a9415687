//! Training objectives.
//!
//! Every objective receives already-generated adversarial inputs, records
//! its graph on a fresh tape with all parameters as differentiated leaves,
//! and returns a [`LossGraph`]. Statistics observed by the adaptive forward
//! passes are only applied to the model through [`LossGraph::commit`].

use crate::autodiff::{Adjoints, BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::network::{BranchMode, GraphOutput, Head, Model};
use crate::params::{BoundParams, GradientSet};
use crate::tensor::{Scalar, Tensor};

use super::config::{KlOrder, Reduction};

/// A recorded objective, ready for backpropagation.
pub struct LossGraph<T> {
    pub tape: Tape<T>,
    pub bound: BoundParams,
    pub loss: Var,
    /// Named scalar components of `loss`.
    pub terms: Vec<(&'static str, Var)>,
    /// Batch statistics of each adaptive forward pass, in execution order.
    pub adaptive_stats: Vec<Vec<Option<BatchStats<T>>>>,
}

impl<T: Scalar> LossGraph<T> {
    pub fn value(&self) -> T {
        self.tape.value(self.loss).data()[0]
    }

    pub fn term(&self, name: &str) -> Option<T> {
        self.terms
            .iter()
            .find(|(n, _)| *n == name)
            .map(|&(_, v)| self.tape.value(v).data()[0])
    }

    /// Gradients of the total loss for every parameter.
    pub fn gradients(&self) -> Result<GradientSet<T>> {
        self.gradients_of(self.loss)
    }

    /// Gradients of one scalar node (for instance a single term).
    pub fn gradients_of(&self, v: Var) -> Result<GradientSet<T>> {
        let adj = self.tape.backward(v)?;
        Ok(self.bound.gradients(&self.tape, &adj))
    }

    pub fn adjoints(&self) -> Result<Adjoints<T>> {
        self.tape.backward(self.loss)
    }

    /// EMA-updates the model's running statistics, pass by pass.
    pub fn commit(&self, model: &mut Model<T>) {
        for stats in &self.adaptive_stats {
            model.commit_running(stats);
        }
    }
}

/// Shared state while an objective is being recorded.
struct Builder<T> {
    tape: Tape<T>,
    bound: BoundParams,
    adaptive_stats: Vec<Vec<Option<BatchStats<T>>>>,
}

impl<T: Scalar> Builder<T> {
    fn forward(
        &mut self,
        model: &Model<T>,
        x: &Tensor<T>,
        branch: BranchMode,
        head: Head,
    ) -> Result<GraphOutput<T>> {
        let xv = self.tape.constant(x.clone());
        let out = model.forward_graph(&mut self.tape, &self.bound, xv, branch, head)?;
        if branch == BranchMode::AdaptiveTrain {
            self.adaptive_stats.push(out.batch_stats.clone());
        }
        Ok(out)
    }

    fn ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.tape.softmax_cross_entropy(logits, labels)
    }

    /// `a + c·b`.
    fn add_scaled(&mut self, a: Var, b: Var, c: f64) -> Result<Var> {
        let s = self.tape.scale(b, T::of(c));
        self.tape.add(a, s)
    }

    fn finish(self, loss: Var, terms: Vec<(&'static str, Var)>) -> LossGraph<T> {
        LossGraph {
            tape: self.tape,
            bound: self.bound,
            loss,
            terms,
            adaptive_stats: self.adaptive_stats,
        }
    }
}

fn start<T: Scalar>(model: &Model<T>) -> Builder<T> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, |_| true);
    Builder {
        tape,
        bound,
        adaptive_stats: Vec::new(),
    }
}

fn check_labels(x: &Tensor<impl Scalar>, y: &[usize]) -> Result<()> {
    if x.shape().first() != Some(&y.len()) {
        return Err(Error::shape(
            "loss",
            format!("batch {:?} with {} labels", x.shape(), y.len()),
        ));
    }
    Ok(())
}

fn halves<T: Scalar>(x: &Tensor<T>, y: &[usize]) -> Result<((Tensor<T>, Vec<usize>), (Tensor<T>, Vec<usize>))> {
    check_labels(x, y)?;
    let n = y.len();
    if n % 2 != 0 || n < 4 {
        return Err(Error::InvalidInput(format!(
            "TWINS objectives split the batch in two; need an even size >= 4, got {n}"
        )));
    }
    let h = n / 2;
    Ok((
        (x.slice_rows(0, h)?, y[..h].to_vec()),
        (x.slice_rows(h, n)?, y[h..].to_vec()),
    ))
}

fn reduce<T: Scalar>(g: &mut Builder<T>, mean: Var, n: usize, reduction: Reduction) -> Var {
    match reduction {
        Reduction::Mean => mean,
        Reduction::Sum => g.tape.scale(mean, T::of(n as f64)),
    }
}

/// Mean cross-entropy of the adaptive branch on `x_adv`.
pub fn compute_at_loss<T: Scalar>(model: &Model<T>, x_adv: &Tensor<T>, y: &[usize]) -> Result<LossGraph<T>> {
    check_labels(x_adv, y)?;
    let mut g = start(model);
    let out = g.forward(model, x_adv, BranchMode::AdaptiveTrain, Head::Target)?;
    let ce = g.ce(out.logits, y)?;
    Ok(g.finish(ce, vec![("ce", ce)]))
}

/// Adaptive cross-entropy on the first half plus `lambda` times frozen
/// cross-entropy on the second half of an adversarial batch.
pub fn compute_twins_at_loss<T: Scalar>(
    model: &Model<T>,
    x_adv: &Tensor<T>,
    y: &[usize],
    lambda: f64,
    reduction: Reduction,
) -> Result<LossGraph<T>> {
    let ((xa, ya), (xf, yf)) = halves(x_adv, y)?;
    let mut g = start(model);
    let oa = g.forward(model, &xa, BranchMode::AdaptiveTrain, Head::Target)?;
    let ce_a = g.ce(oa.logits, &ya)?;
    let of = g.forward(model, &xf, BranchMode::FrozenTrain, Head::Target)?;
    let ce_f = g.ce(of.logits, &yf)?;
    let wa = reduce(&mut g, ce_a, ya.len(), reduction);
    let wf = reduce(&mut g, ce_f, yf.len(), reduction);
    let total = g.add_scaled(wa, wf, lambda)?;
    Ok(g.finish(total, vec![("adaptive", wa), ("frozen", wf)]))
}

/// `CE(adv) + beta·KL` on one branch; returns `(wing, ce, kl)`.
#[allow(clippy::too_many_arguments)]
fn trades_wing<T: Scalar>(
    g: &mut Builder<T>,
    model: &Model<T>,
    x: &Tensor<T>,
    x_adv: &Tensor<T>,
    y: &[usize],
    beta: f64,
    order: KlOrder,
    branch: BranchMode,
) -> Result<(Var, Var, Var)> {
    x.expect_same_shape(x_adv, "trades")?;
    let adv = g.forward(model, x_adv, branch, Head::Target)?;
    let ce = g.ce(adv.logits, y)?;
    let clean = g.forward(model, x, branch, Head::Target)?;
    let kl = match order {
        KlOrder::AdvFirst => g.tape.kl_div_logits(adv.logits, clean.logits)?,
        KlOrder::CleanFirst => g.tape.kl_div_logits(clean.logits, adv.logits)?,
    };
    let wing = g.add_scaled(ce, kl, beta)?;
    Ok((wing, ce, kl))
}

/// Single-branch TRADES: `CE(adv) + beta·KL` between adversarial and clean
/// predictions.
pub fn compute_trades_loss<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    x_adv: &Tensor<T>,
    y: &[usize],
    beta: f64,
    order: KlOrder,
) -> Result<LossGraph<T>> {
    check_labels(x_adv, y)?;
    let mut g = start(model);
    let (wing, ce, kl) = trades_wing(&mut g, model, x, x_adv, y, beta, order, BranchMode::AdaptiveTrain)?;
    Ok(g.finish(wing, vec![("ce", ce), ("kl", kl)]))
}

/// TRADES wings on both halves: adaptive on the first, frozen (weighted by
/// `lambda`) on the second.
#[allow(clippy::too_many_arguments)]
pub fn compute_twins_trades_loss<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    x_adv: &Tensor<T>,
    y: &[usize],
    beta: f64,
    lambda: f64,
    order: KlOrder,
    reduction: Reduction,
) -> Result<LossGraph<T>> {
    let ((xa, ya), (xf, yf)) = halves(x_adv, y)?;
    let ((ca, _), (cf, _)) = halves(x, y)?;
    let mut g = start(model);
    let (wa, _, _) = trades_wing(&mut g, model, &ca, &xa, &ya, beta, order, BranchMode::AdaptiveTrain)?;
    let (wf, _, _) = trades_wing(&mut g, model, &cf, &xf, &yf, beta, order, BranchMode::FrozenTrain)?;
    let wa = reduce(&mut g, wa, ya.len(), reduction);
    let wf = reduce(&mut g, wf, yf.len(), reduction);
    let total = g.add_scaled(wa, wf, lambda)?;
    Ok(g.finish(total, vec![("adaptive", wa), ("frozen", wf)]))
}

/// Adversarial cross-entropy plus `lambda` times the mean distance between
/// the live and the pre-trained features.
pub fn compute_lwf_loss<T: Scalar>(
    model: &Model<T>,
    pretrained: &Model<T>,
    x_adv: &Tensor<T>,
    y: &[usize],
    lambda: f64,
) -> Result<LossGraph<T>> {
    check_labels(x_adv, y)?;
    let (fw, pw) = (model.config.feature_width(), pretrained.config.feature_width());
    if fw != pw {
        return Err(Error::shape(
            "lwf",
            format!("feature width {fw} differs from the pre-trained extractor's {pw}"),
        ));
    }
    // The pre-trained extractor normalizes like the live adaptive branch so
    // identical weights give identical features.
    let mut pt_tape = Tape::new();
    let pt_bound = pretrained.params.bind_frozen(&mut pt_tape);
    let xv = pt_tape.constant(x_adv.clone());
    let pt = pretrained.forward_graph(&mut pt_tape, &pt_bound, xv, BranchMode::AdaptiveTrain, Head::Target)?;
    let pt_feats = pt_tape.value(pt.features).clone();

    let mut g = start(model);
    let out = g.forward(model, x_adv, BranchMode::AdaptiveTrain, Head::Target)?;
    let ce = g.ce(out.logits, y)?;
    let target = g.tape.constant(pt_feats);
    let reg = g.tape.row_distance_mean(out.features, target)?;
    let total = g.add_scaled(ce, reg, lambda)?;
    Ok(g.finish(total, vec![("ce", ce), ("feature_distance", reg)]))
}

/// Target cross-entropy plus `lambda` times source cross-entropy through
/// the source head. `source` holds an adversarial source batch and labels.
pub fn compute_joint_loss<T: Scalar>(
    model: &Model<T>,
    x_adv: &Tensor<T>,
    y: &[usize],
    source: Option<(&Tensor<T>, &[usize])>,
    lambda: f64,
) -> Result<LossGraph<T>> {
    check_labels(x_adv, y)?;
    if !model.has_head(Head::Source) {
        return Err(Error::InvalidInput("the joint objective needs a source head".into()));
    }
    let mut g = start(model);
    let out = g.forward(model, x_adv, BranchMode::AdaptiveTrain, Head::Target)?;
    let ce = g.ce(out.logits, y)?;
    let Some((xs, ys)) = source else {
        return Ok(g.finish(ce, vec![("ce", ce)]));
    };
    check_labels(xs, ys)?;
    let src = g.forward(model, xs, BranchMode::AdaptiveTrain, Head::Source)?;
    let ce_s = g.ce(src.logits, ys)?;
    let total = g.add_scaled(ce, ce_s, lambda)?;
    Ok(g.finish(total, vec![("ce", ce), ("source_ce", ce_s)]))
}
