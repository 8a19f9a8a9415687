use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{evaluate, grad_norm_epoch_stats, weight_distance};
use crate::attack::{pgd_attack, AttackConfig, AttackLoss};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::network::{BranchMode, Head, Model};
use crate::tensor::{Scalar, Tensor};

use super::config::{Method, TrainConfig};
use super::loss::{
    compute_at_loss, compute_joint_loss, compute_lwf_loss, compute_trades_loss, compute_twins_at_loss,
    compute_twins_trades_loss, LossGraph,
};
use super::optim::{sgd_update, OptState};

/// One epoch of training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub clean_acc: f64,
    pub pgd_acc: f64,
    pub grad_norm_mean: f64,
    pub grad_norm_cv: f64,
    pub weight_dist: f64,
}

/// Data and reference models a run needs beyond its config.
#[derive(Debug, Clone, Copy)]
pub struct TrainInputs<'a, T> {
    pub train: &'a Dataset<T>,
    pub val: &'a Dataset<T>,
    /// Source-task data; required by the joint objective.
    pub source: Option<&'a Dataset<T>>,
    /// Frozen pre-trained extractor; required by LwF.
    pub pretrained: Option<&'a Model<T>>,
    /// Validation attack; defaults to the training attack with CE.
    pub eval_attack: Option<&'a AttackConfig>,
}

impl<'a, T> TrainInputs<'a, T> {
    pub fn new(train: &'a Dataset<T>, val: &'a Dataset<T>) -> Self {
        Self {
            train,
            val,
            source: None,
            pretrained: None,
            eval_attack: None,
        }
    }
}

// Independent random streams of one run.
const STREAM_SHUFFLE: u64 = 1;
const STREAM_ATTACK: u64 = 2;
const STREAM_SOURCE: u64 = 3;
const STREAM_EVAL: u64 = 1000;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Splits a shuffled order into the batches one epoch visits. TWINS
/// methods need even batches of at least 4, others at least 2.
fn epoch_batches(order: &[usize], batch_size: usize, twins: bool) -> Vec<&[usize]> {
    let min = if twins { 4 } else { 2 };
    order
        .chunks(batch_size)
        .map(|c| if twins && c.len() % 2 == 1 { &c[..c.len() - 1] } else { c })
        .filter(|c| c.len() >= min)
        .collect()
}

fn check_inputs<T: Scalar>(cfg: &TrainConfig, model: &Model<T>, inputs: &TrainInputs<'_, T>) -> Result<()> {
    cfg.validate()?;
    let target = model.num_classes(Head::Target)?;
    for (name, d) in [("training", inputs.train), ("validation", inputs.val)] {
        if d.image_shape() != model.config.input {
            return Err(Error::Config(format!(
                "{name} images {:?} do not match the model input {:?}",
                d.image_shape(),
                model.config.input
            )));
        }
        if d.classes > target {
            return Err(Error::Config(format!(
                "{name} data has {} classes but the target head has {target}",
                d.classes
            )));
        }
    }
    match cfg.method {
        Method::Joint => {
            let src = inputs
                .source
                .ok_or_else(|| Error::Config("the joint objective needs source data".into()))?;
            if src.classes > model.num_classes(Head::Source)? {
                return Err(Error::Config("source data has more classes than the source head".into()));
            }
            if src.image_shape() != model.config.input {
                return Err(Error::Config("source images do not match the model input".into()));
            }
        }
        Method::Lwf if inputs.pretrained.is_none() => {
            return Err(Error::Config("LwF needs the pre-trained extractor".into()));
        }
        _ => {}
    }
    if inputs.train.len() < if cfg.method.is_twins() { 4 } else { 2 } {
        return Err(Error::Config("training set is too small for a single batch".into()));
    }
    Ok(())
}

/// Records the method's objective for one batch.
fn batch_loss<T: Scalar, R: Rng + ?Sized>(
    cfg: &TrainConfig,
    attack: &AttackConfig,
    model: &Model<T>,
    inputs: &TrainInputs<'_, T>,
    x: &Tensor<T>,
    y: &[usize],
    attack_rng: &mut R,
    source_rng: &mut R,
) -> Result<LossGraph<T>> {
    let adv = |rng: &mut R| pgd_attack(model, BranchMode::AdaptiveTrain, x, y, attack, rng);
    match cfg.method {
        Method::Std => compute_at_loss(model, x, y),
        Method::At => compute_at_loss(model, &adv(attack_rng)?, y),
        Method::Trades => compute_trades_loss(model, x, &adv(attack_rng)?, y, cfg.beta, cfg.kl_order),
        Method::TwinsAt => compute_twins_at_loss(model, &adv(attack_rng)?, y, cfg.lambda_twins, cfg.reduction),
        Method::TwinsTrades => compute_twins_trades_loss(
            model,
            x,
            &adv(attack_rng)?,
            y,
            cfg.beta,
            cfg.lambda_twins,
            cfg.kl_order,
            cfg.reduction,
        ),
        Method::Lwf => {
            let pt = inputs.pretrained.expect("checked before training");
            compute_lwf_loss(model, pt, &adv(attack_rng)?, y, cfg.lambda_lwf)
        }
        Method::Joint => {
            let x_adv = adv(attack_rng)?;
            let src = inputs.source.expect("checked before training");
            let n = y.len().min(src.len());
            if n < 2 {
                return compute_joint_loss(model, &x_adv, y, None, cfg.lambda_uot);
            }
            let mut picks = index::sample(source_rng, src.len(), n).into_vec();
            picks.sort_unstable();
            let (xs, ys) = src.batch(&picks)?;
            let mut src_attack = attack.clone();
            src_attack.loss = Some(AttackLoss::Ce);
            let xs_adv = pgd_attack(
                &model.with_head(Head::Source),
                BranchMode::AdaptiveTrain,
                &xs,
                &ys,
                &src_attack,
                attack_rng,
            )?;
            compute_joint_loss(model, &x_adv, y, Some((&xs_adv, &ys)), cfg.lambda_uot)
        }
    }
}

/// Trains `model` in place for `cfg.epochs` epochs and returns one record
/// per epoch. The weight distance is measured from the parameters at entry.
pub fn run_training<T: Scalar>(
    cfg: &TrainConfig,
    model: &mut Model<T>,
    inputs: &TrainInputs<'_, T>,
) -> Result<Vec<EpochRecord>> {
    check_inputs(cfg, model, inputs)?;
    let start = model.params.clone();
    let method = cfg.method;
    let mut opt = OptState::new(&model.params, |n| method.trains(n));
    let attack = cfg.train_attack();
    let eval_attack = inputs.eval_attack.cloned().unwrap_or_else(|| {
        let mut a = cfg.attack.clone();
        a.loss = Some(AttackLoss::Ce);
        a
    });
    let mut shuffle_rng = stream(cfg.seed, STREAM_SHUFFLE);
    let mut attack_rng = stream(cfg.seed, STREAM_ATTACK);
    let mut source_rng = stream(cfg.seed, STREAM_SOURCE);
    let mut order: Vec<usize> = (0..inputs.train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut norms) = (0.0, Vec::new());
        for chunk in epoch_batches(&order, cfg.batch_size, method.is_twins()) {
            let (x, y) = inputs.train.batch(chunk)?;
            let graph = batch_loss(cfg, &attack, model, inputs, &x, &y, &mut attack_rng, &mut source_rng)?;
            let value = graph.value().f64();
            if !value.is_finite() {
                return Err(Error::InvalidInput(format!("training loss diverged at epoch {epoch}")));
            }
            let mut grads = graph.gradients()?;
            for name in model.params.names().filter(|n| !method.trains(n)).map(String::from).collect::<Vec<_>>() {
                grads.remove(&name);
            }
            norms.push(grads.global_norm().f64());
            graph.commit(model);
            sgd_update(&mut model.params, &grads, &mut opt, lr, cfg.weight_decay, cfg.momentum)?;
            loss_sum += value;
        }
        let stats = grad_norm_epoch_stats(&norms)?;
        let mut eval_rng = stream(cfg.seed, STREAM_EVAL + epoch as u64);
        let report = evaluate(model, inputs.val, Some(&eval_attack), cfg.batch_size, &mut eval_rng)?;
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / norms.len() as f64,
            clean_acc: report.clean_acc,
            pgd_acc: report.robust_acc.unwrap_or(f64::NAN),
            grad_norm_mean: stats.mean,
            grad_norm_cv: stats.cv,
            weight_dist: weight_distance(&model.params, &start)?,
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;
    use crate::tensor::DType;

    fn toy(seed: u64, n: usize) -> Dataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Vec::with_capacity(n * 16);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % 2;
            for _ in 0..16 {
                let base = if c == 0 { 0.2 } else { 0.8 };
                img.push(base + 0.1 * (rng.random::<f64>() - 0.5));
            }
            labels.push(c);
        }
        Dataset::new(Tensor::new(vec![n, 1, 4, 4], img).unwrap(), labels, 2).unwrap()
    }

    fn model(seed: u64) -> Model<f64> {
        let mut cfg = ModelConfig::new([1, 4, 4], 2);
        cfg.widths = vec![4, 4];
        cfg.dtype = DType::F64;
        Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn cfg(method: Method, epochs: usize) -> TrainConfig {
        let mut c = TrainConfig::new(method, 0.05, 8, epochs);
        c.attack = AttackConfig::pgd10().with_epsilon(2.0 / 255.0);
        c.attack.steps = 2;
        c
    }

    #[test]
    fn batches_respect_twins_split() {
        let order: Vec<usize> = (0..11).collect();
        let b = epoch_batches(&order, 4, true);
        assert_eq!(b.iter().map(|c| c.len()).collect::<Vec<_>>(), vec![4, 4]);
        let b = epoch_batches(&order, 5, true);
        assert_eq!(b.iter().map(|c| c.len()).collect::<Vec<_>>(), vec![4, 4]);
        let b = epoch_batches(&order, 5, false);
        assert_eq!(b.iter().map(|c| c.len()).collect::<Vec<_>>(), vec![5, 5]);
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let (tr, va) = (toy(1, 16), toy(2, 8));
        let mut m = model(0);
        let before = m.clone();
        let h = run_training(&cfg(Method::At, 0), &mut m, &TrainInputs::new(&tr, &va)).unwrap();
        assert!(h.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn history_follows_schedule_and_is_reproducible() {
        let (tr, va) = (toy(1, 16), toy(2, 8));
        let mut c = cfg(Method::TwinsAt, 3);
        c.milestones = vec![1, 2];
        c.lambda_twins = 0.3;
        let run = || {
            let mut m = model(0);
            let h = run_training(&c, &mut m, &TrainInputs::new(&tr, &va)).unwrap();
            (m, h)
        };
        let (m1, h1) = run();
        let (m2, h2) = run();
        assert_eq!(h1.len(), 3);
        for r in &h1 {
            assert_eq!(r.lr, c.lr_at_epoch(r.epoch));
            assert!((0.0..=1.0).contains(&r.clean_acc) && (0.0..=1.0).contains(&r.pgd_acc));
        }
        assert_eq!(m1, m2);
        assert_eq!(h1, h2);
    }

    #[test]
    fn fine_tuning_never_touches_frozen_stats() {
        let (tr, va) = (toy(1, 16), toy(2, 8));
        for method in [Method::At, Method::TwinsAt, Method::TwinsTrades] {
            let mut m = model(0);
            let frozen: Vec<_> = m.bn.iter().map(|s| (s.frozen_mean.clone(), s.frozen_var.clone())).collect();
            let running = m.bn[0].running_mean.clone();
            run_training(&cfg(method, 1), &mut m, &TrainInputs::new(&tr, &va)).unwrap();
            let after: Vec<_> = m.bn.iter().map(|s| (s.frozen_mean.clone(), s.frozen_var.clone())).collect();
            assert_eq!(frozen, after, "{method}");
            assert_ne!(running, m.bn[0].running_mean);
        }
    }

    #[test]
    fn untrained_parameters_stay_put() {
        let (tr, va) = (toy(1, 16), toy(2, 8));
        let mut m = model(0);
        let before = m.params.get("bn1.frozen.gamma").unwrap().clone();
        run_training(&cfg(Method::At, 1), &mut m, &TrainInputs::new(&tr, &va)).unwrap();
        assert_eq!(m.params.get("bn1.frozen.gamma").unwrap(), &before);
    }

    #[test]
    fn missing_inputs_are_config_errors() {
        let (tr, va) = (toy(1, 16), toy(2, 8));
        let mut m = model(0);
        assert!(matches!(
            run_training(&cfg(Method::Lwf, 1), &mut m, &TrainInputs::new(&tr, &va)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            run_training(&cfg(Method::Joint, 1), &mut m, &TrainInputs::new(&tr, &va)),
            Err(Error::Config(_))
        ));
    }
}
