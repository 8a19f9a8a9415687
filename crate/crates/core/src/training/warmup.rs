use rand::seq::SliceRandom;
use rand::Rng;

use crate::attack::{pgd_attack, AttackConfig, AttackLoss};
use crate::autodiff::Tape;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::network::{BranchMode, Head, Model, Normalization};
use crate::tensor::{Scalar, Tensor};

/// Re-estimates the frozen statistics on adversarial target data.
///
/// Each batch is attacked through the frozen branch and the source head,
/// using the head's own clean predictions as labels, then normalized with
/// its batch statistics so the frozen statistics can be EMA-updated. After
/// this the frozen statistics stay fixed.
pub fn warmup_bn<T: Scalar, R: Rng + ?Sized>(
    model: &mut Model<T>,
    data: &Dataset<T>,
    attack: &AttackConfig,
    batch_size: usize,
    epochs: usize,
    rng: &mut R,
) -> Result<()> {
    if epochs == 0 {
        return Ok(());
    }
    if !model.has_head(Head::Source) {
        return Err(Error::InvalidInput("warmup attacks through the source head, which is missing".into()));
    }
    if batch_size < 2 {
        return Err(Error::Config("warmup batch size must be at least 2".into()));
    }
    let mut attack = attack.clone();
    attack.loss = Some(AttackLoss::Ce);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (x, _) = data.batch(chunk)?;
            warmup_step(model, &x, &attack, rng)?;
        }
    }
    Ok(())
}

/// One warmup batch; returns the adversarial batch that was normalized.
pub(crate) fn warmup_step<T: Scalar, R: Rng + ?Sized>(
    model: &mut Model<T>,
    x: &Tensor<T>,
    attack: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let pseudo = model.logits(x, BranchMode::FrozenTrain, Head::Source)?.argmax_rows()?;
    let x_adv = pgd_attack(&model.with_head(Head::Source), BranchMode::FrozenTrain, x, &pseudo, attack, rng)?;
    let mut tape = Tape::new();
    let bound = model.params.bind_frozen(&mut tape);
    let xv = tape.constant(x_adv.clone());
    let out = model.graph(&mut tape, &bound, xv, Normalization::WARMUP, Head::Source)?;
    model.commit_frozen(&out.batch_stats);
    Ok(x_adv)
}
