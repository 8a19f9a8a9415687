//! Diagnostics: gradient-norm statistics, distance from initialization,
//! robust-overfitting gap, the BN scale probe, and accuracy evaluation.

use rand::Rng;
use serde::Serialize;

use crate::attack::{check_ball, pgd_attack, AttackConfig};
use crate::autodiff::Tape;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::network::{conv_name, BranchMode, Head, Model, CONV_PAD, CONV_STRIDE};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::training::EpochRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradNormStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// `std / mean`, or 0 when the mean is 0.
    pub cv: f64,
}

/// Mean, population standard deviation and coefficient of variation of
/// one epoch's per-step gradient norms.
pub fn grad_norm_epoch_stats(log: &[f64]) -> Result<GradNormStats> {
    if log.is_empty() {
        return Err(Error::InvalidInput("gradient-norm log is empty".into()));
    }
    if let Some(bad) = log.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidInput(format!("gradient norm {bad} is not >= 0")));
    }
    let n = log.len() as f64;
    let mean = log.iter().sum::<f64>() / n;
    let std = (log.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let cv = if mean > 0.0 { std / mean } else { 0.0 };
    Ok(GradNormStats { mean, std, cv })
}

/// Euclidean norm of the concatenated difference of two parameter sets.
pub fn weight_distance<T: Scalar>(theta: &ParamStore<T>, theta_pt: &ParamStore<T>) -> Result<f64> {
    if theta.len() != theta_pt.len() {
        return Err(Error::InvalidInput(format!(
            "parameter sets differ in size ({} vs {})",
            theta.len(),
            theta_pt.len()
        )));
    }
    let mut sq = 0.0;
    for (name, a) in theta.iter() {
        let b = theta_pt
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        a.expect_same_shape(b, "weight_distance")?;
        sq += a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| {
                let d = x.f64() - y.f64();
                d * d
            })
            .sum::<f64>();
    }
    Ok(sq.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OverfitGap {
    pub best: f64,
    pub last: f64,
    pub gap: f64,
}

/// Best, final and `best - final` robust accuracy of a run.
pub fn overfitting_gap(history: &[f64]) -> Result<OverfitGap> {
    let last = *history
        .last()
        .ok_or_else(|| Error::InvalidInput("robust-accuracy history is empty".into()))?;
    let best = history.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(OverfitGap {
        best,
        last,
        gap: best - last,
    })
}

/// Whole-run view of a metrics history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunSummary {
    pub epochs: usize,
    /// Mean over epochs of the per-epoch mean gradient norm.
    pub grad_norm_mean: f64,
    /// Distance from the starting weights after a quarter of the epochs
    /// (rounded up).
    pub weight_dist_quarter: f64,
    pub weight_dist_final: f64,
    pub overfitting: OverfitGap,
}

pub fn summarize_run(history: &[EpochRecord]) -> Result<RunSummary> {
    let last = history
        .last()
        .ok_or_else(|| Error::InvalidInput("metrics history is empty".into()))?;
    let n = history.len();
    let quarter = &history[n.div_ceil(4).max(1) - 1];
    let pgd: Vec<f64> = history.iter().map(|r| r.pgd_acc).collect();
    Ok(RunSummary {
        epochs: n,
        grad_norm_mean: history.iter().map(|r| r.grad_norm_mean).sum::<f64>() / n as f64,
        weight_dist_quarter: quarter.weight_dist,
        weight_dist_final: last.weight_dist,
        overfitting: overfitting_gap(&pgd)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub clean_acc: f64,
    pub robust_acc: Option<f64>,
}

/// Clean accuracy and, given an attack, accuracy on PGD outputs. Both
/// passes use inference normalization; the attack targets the same
/// network, so it sees what will be deployed.
pub fn evaluate<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    data: &Dataset<T>,
    attack: Option<&AttackConfig>,
    batch_size: usize,
    rng: &mut R,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate on an empty dataset".into()));
    }
    let batch_size = batch_size.max(1);
    let (mut clean, mut robust) = (0usize, 0usize);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (x, y) = data.batch(chunk)?;
        let pred = model.predict(&x)?;
        clean += pred.iter().zip(&y).filter(|(p, l)| p == l).count();
        if let Some(cfg) = attack {
            let x_adv = pgd_attack(model, BranchMode::Inference, &x, &y, cfg, rng)?;
            check_ball(&x_adv, &x, cfg.epsilon)?;
            let pred = model.predict(&x_adv)?;
            robust += pred.iter().zip(&y).filter(|(p, l)| p == l).count();
        }
    }
    let n = data.len() as f64;
    Ok(EvalReport {
        clean_acc: clean as f64 / n,
        robust_acc: attack.map(|_| robust as f64 / n),
    })
}

/// Largest coordinate-wise relative error `|a - b| / max(|a|, |b|)` over
/// coordinates where `max(|a|, |b|) > floor`.
pub fn max_relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, floor: f64) -> Result<f64> {
    a.expect_same_shape(b, "max_relative_error")?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .filter_map(|(&x, &y)| {
            let (x, y) = (x.f64(), y.f64());
            let scale = x.abs().max(y.abs());
            (scale > floor).then(|| (x - y).abs() / scale)
        })
        .fold(0.0, f64::max))
}

fn check_layer<T: Scalar>(model: &Model<T>, layer: usize) -> Result<()> {
    if layer >= model.num_layers() {
        return Err(Error::InvalidInput(format!(
            "layer {layer} does not feed a BN layer (model has {} convolutions)",
            model.num_layers()
        )));
    }
    Ok(())
}

/// Kernel gradient of layer `layer` under the frozen branch: once from
/// autodiff, once assembled from the normalized activation's adjoint as
/// `∂L/∂h̃ · h / σ_pt`. Needs eps = 0 in that layer for the two to agree.
pub fn frozen_gradient_check<T: Scalar>(
    model: &Model<T>,
    layer: usize,
    x: &Tensor<T>,
    y: &[usize],
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_layer(model, layer)?;
    let mut tape = Tape::new();
    let name = conv_name(layer);
    let bound = model.params.bind(&mut tape, |n| n == name);
    let xv = tape.constant(x.clone());
    let out = model.forward_graph(&mut tape, &bound, xv, BranchMode::FrozenTrain, Head::Target)?;
    let loss = tape.softmax_cross_entropy(out.logits, y)?;
    let adj = tape.backward(loss)?;
    let kv = bound.var(&name)?;
    let autodiff = adj.get_or_zeros(kv, tape.value(kv));

    let h = tape.value(out.conv_inputs[layer]);
    let d_norm = adj.get_or_zeros(out.normalized[layer], tape.value(out.normalized[layer]));
    let sigma: Vec<T> = model.bn[layer].frozen_var.iter().map(|v| v.sqrt()).collect();
    let formula = kernel_grad_direct(h, &d_norm, &sigma, autodiff.shape())?;
    Ok((autodiff, formula))
}

/// `Σ_{n,p,q} g[n,o,p,q] / σ[o] · h[n,c,p·s+i−pad, q·s+j−pad]` by direct loops.
fn kernel_grad_direct<T: Scalar>(h: &Tensor<T>, g: &Tensor<T>, sigma: &[T], kshape: &[usize]) -> Result<Tensor<T>> {
    let [n, c, hh, hw] = h.dims4("frozen gradient")?;
    let [_, o, oh, ow] = g.dims4("frozen gradient")?;
    let (kh, kw) = (kshape[2], kshape[3]);
    let mut out = vec![T::zero(); o * c * kh * kw];
    for oc in 0..o {
        for ic in 0..c {
            for i in 0..kh {
                for j in 0..kw {
                    let mut acc = T::zero();
                    for b in 0..n {
                        for p in 0..oh {
                            let r = (p * CONV_STRIDE + i) as isize - CONV_PAD as isize;
                            if r < 0 || r >= hh as isize {
                                continue;
                            }
                            for q in 0..ow {
                                let s = (q * CONV_STRIDE + j) as isize - CONV_PAD as isize;
                                if s < 0 || s >= hw as isize {
                                    continue;
                                }
                                let gv = g.data()[((b * o + oc) * oh + p) * ow + q];
                                let hv = h.data()[((b * c + ic) * hh + r as usize) * hw + s as usize];
                                acc = acc + gv / sigma[oc] * hv;
                            }
                        }
                    }
                    out[((oc * c + ic) * kh + i) * kw + j] = acc;
                }
            }
        }
    }
    Tensor::new(kshape.to_vec(), out)
}

/// One row of a [`scale_probe`] report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleProbeRow {
    pub gamma: f64,
    pub branch: BranchMode,
    /// `‖logits(γ) − logits(1)‖∞ / ‖logits(1)‖∞`.
    pub forward_delta: f64,
    /// `‖∇w_j(γ)‖ / ‖∇w_j(1)‖`, gradients taken w.r.t. the scaled vector.
    pub grad_ratio: f64,
    pub argmax_unchanged: bool,
    /// Frozen branch only: relative error of the analytic kernel gradient.
    pub formula_error: Option<f64>,
}

fn probe_once<T: Scalar>(
    model: &Model<T>,
    layer: usize,
    channel: usize,
    branch: BranchMode,
    x: &Tensor<T>,
    y: &[usize],
) -> Result<(Tensor<T>, f64)> {
    let mut tape = Tape::new();
    let name = conv_name(layer);
    let bound = model.params.bind(&mut tape, |n| n == name);
    let xv = tape.constant(x.clone());
    let out = model.forward_graph(&mut tape, &bound, xv, branch, Head::Target)?;
    let loss = tape.softmax_cross_entropy(out.logits, y)?;
    let adj = tape.backward(loss)?;
    let kv = bound.var(&name)?;
    let grad = adj.get_or_zeros(kv, tape.value(kv));
    let per = grad.len() / grad.shape()[0];
    let gj = &grad.data()[channel * per..(channel + 1) * per];
    let norm = gj.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
    Ok((tape.value(out.logits).clone(), norm))
}

/// Rescales output channel `channel` of convolution `layer` by each `γ` and
/// reports, per branch, how the logits and that channel's gradient norm
/// respond. The probed BN layer must have eps = 0.
pub fn scale_probe<T: Scalar>(
    model: &Model<T>,
    layer: usize,
    channel: usize,
    gammas: &[f64],
    x: &Tensor<T>,
    y: &[usize],
) -> Result<Vec<ScaleProbeRow>> {
    check_layer(model, layer)?;
    if model.bn[layer].eps != T::zero() {
        return Err(Error::Config("the scale probe needs eps = 0 in the probed BN layer".into()));
    }
    let name = conv_name(layer);
    let out_ch = model.params.require(&name)?.shape()[0];
    if channel >= out_ch {
        return Err(Error::InvalidInput(format!("channel {channel} outside [0, {out_ch})")));
    }
    let mut rows = Vec::new();
    for branch in [BranchMode::AdaptiveTrain, BranchMode::FrozenTrain] {
        let (base_logits, base_norm) = probe_once(model, layer, channel, branch, x, y)?;
        let base_pred = base_logits.argmax_rows()?;
        for &gamma in gammas {
            if !(gamma > 0.0) {
                return Err(Error::InvalidInput(format!("scale factor must be > 0, got {gamma}")));
            }
            let mut scaled = model.clone();
            let k = scaled.params.get_mut(&name).expect("checked above");
            let per = k.len() / out_ch;
            for v in &mut k.data_mut()[channel * per..(channel + 1) * per] {
                *v = *v * T::of(gamma);
            }
            let (logits, norm) = probe_once(&scaled, layer, channel, branch, x, y)?;
            let diff = logits.zip_map(&base_logits, |a, b| a - b)?.max_abs().f64();
            let formula_error = match branch {
                BranchMode::FrozenTrain => {
                    let (a, f) = frozen_gradient_check(&scaled, layer, x, y)?;
                    Some(max_relative_error(&a, &f, 1e-8)?)
                }
                _ => None,
            };
            rows.push(ScaleProbeRow {
                gamma,
                branch,
                forward_delta: diff / base_logits.max_abs().f64().max(f64::MIN_POSITIVE),
                grad_ratio: norm / base_norm,
                argmax_unchanged: logits.argmax_rows()? == base_pred,
                formula_error,
            });
        }
    }
    Ok(rows)
}
