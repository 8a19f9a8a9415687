//! Per-seed pipeline: source pre-training, warmup, fine-tuning, evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{evaluate, overfitting_gap, EvalReport};
use crate::attack::{AttackConfig, AttackLoss};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::network::Model;
use crate::tensor::{DType, Scalar};
use crate::training::{run_training, warmup_bn, EpochRecord, TrainConfig, TrainInputs};

use super::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use super::config::ExperimentConfig;
use super::metrics::write_metrics;

/// Which pipeline stages to execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub pretrain: bool,
    pub finetune: bool,
}

impl Stages {
    pub const ALL: Self = Self {
        pretrain: true,
        finetune: true,
    };
    pub const PRETRAIN: Self = Self {
        pretrain: true,
        finetune: false,
    };
    /// Fine-tuning from an existing `pretrain.ckpt` in the seed directory.
    pub const FINETUNE: Self = Self {
        pretrain: false,
        finetune: true,
    };
}

/// Outcome of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub dir: PathBuf,
    #[serde(default)]
    pub pretrain: Option<StageSummary>,
    #[serde(default)]
    pub finetune: Option<StageSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub epochs: usize,
    pub clean_acc: f64,
    pub robust_acc: Option<f64>,
    /// Best, final and gap of the per-epoch validation PGD accuracy.
    pub best_pgd_acc: Option<f64>,
    pub final_pgd_acc: Option<f64>,
    pub overfitting_gap: Option<f64>,
}

impl StageSummary {
    fn new(history: &[EpochRecord], report: EvalReport) -> Result<Self> {
        let pgd: Vec<f64> = history.iter().map(|r| r.pgd_acc).collect();
        let gap = if pgd.is_empty() { None } else { Some(overfitting_gap(&pgd)?) };
        Ok(Self {
            epochs: history.len(),
            clean_acc: report.clean_acc,
            robust_acc: report.robust_acc,
            best_pgd_acc: gap.map(|g| g.best),
            final_pgd_acc: gap.map(|g| g.last),
            overfitting_gap: gap.map(|g| g.gap),
        })
    }
}

// Random streams per seed, disjoint from the trainer's.
const STREAM_INIT: u64 = 10;
const STREAM_HEAD: u64 = 11;
const STREAM_WARMUP: u64 = 12;
const STREAM_EVAL: u64 = 13;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.output_dir.join(format!("seed_{seed}"))
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// The evaluation attack: explicit, or the fine-tuning attack with CE.
pub fn eval_attack(cfg: &ExperimentConfig) -> AttackConfig {
    cfg.eval_attack.clone().unwrap_or_else(|| {
        let mut a = cfg.finetune.attack.clone();
        a.loss = Some(AttackLoss::Ce);
        a
    })
}

struct Data<T> {
    target: (Dataset<T>, Dataset<T>),
    source: Option<(Dataset<T>, Dataset<T>)>,
}

fn load_data<T: Scalar>(cfg: &ExperimentConfig) -> Result<Data<T>> {
    let target = cfg.target.load_split::<T>()?;
    let source = cfg.source.as_ref().map(|s| s.load_split::<T>()).transpose()?;
    if let Some((s, _)) = &source {
        if s.image_shape() != target.0.image_shape() {
            return Err(Error::Config(format!(
                "source images {:?} and target images {:?} differ in shape",
                s.image_shape(),
                target.0.image_shape()
            )));
        }
    }
    Ok(Data { target, source })
}

fn with_seed(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    let mut c = cfg.clone();
    c.seed = seed;
    c
}

fn meta<T: Scalar>(model: &Model<T>, stage: &str, seed: u64, epoch: usize, cfg: &TrainConfig) -> CheckpointMeta {
    CheckpointMeta {
        model: model.config.clone(),
        stage: stage.into(),
        seed,
        epoch,
        method: Some(cfg.method),
    }
}

fn run_seed<T: Scalar>(cfg: &ExperimentConfig, data: &Data<T>, seed: u64, stages: Stages) -> Result<SeedSummary> {
    let dir = seed_dir(cfg, seed);
    create_dir(&dir)?;
    let mut summary = SeedSummary {
        seed,
        dir: dir.clone(),
        pretrain: None,
        finetune: None,
    };
    let attack = eval_attack(cfg);
    let (train, val) = &data.target;
    let input = train.image_shape();

    let pretrained: Option<Model<T>> = match (&cfg.pretrain, &cfg.init_checkpoint) {
        (Some(pcfg), _) if stages.pretrain => {
            let (src_train, src_val) = data.source.as_ref().expect("validated: pretrain has source");
            let mc = cfg.model.model_config(input, src_train.classes, T::DTYPE);
            let mut model = Model::<T>::new(mc, &mut rng(seed, STREAM_INIT))?;
            let pcfg = with_seed(pcfg, seed);
            let history = run_training(&pcfg, &mut model, &TrainInputs::new(src_train, src_val))?;
            if !history.is_empty() {
                write_metrics(&history, &dir.join("pretrain_metrics.csv"))?;
            }
            save_checkpoint(&dir.join("pretrain.ckpt"), &model, &meta(&model, "pretrain", seed, history.len(), &pcfg))?;
            let mut pa = pcfg.attack.clone();
            pa.loss = Some(AttackLoss::Ce);
            let report = evaluate(&model, src_val, Some(&pa), pcfg.batch_size, &mut rng(seed, STREAM_EVAL))?;
            summary.pretrain = Some(StageSummary::new(&history, report)?);
            Some(model)
        }
        (Some(_), _) => {
            let path = dir.join("pretrain.ckpt");
            if !path.is_file() {
                return Err(Error::Config(format!(
                    "{} is missing; run the pre-training stage first",
                    path.display()
                )));
            }
            Some(load_checkpoint::<T>(&path)?.0)
        }
        (None, Some(path)) => Some(load_checkpoint::<T>(path)?.0),
        (None, None) => None,
    };
    if !stages.finetune {
        return Ok(summary);
    }

    let fcfg = with_seed(&cfg.finetune, seed);
    let (mut model, reference) = match pretrained {
        Some(pt) => {
            let mut m = pt.clone();
            m.prepare_finetune(train.classes, &mut rng(seed, STREAM_HEAD))?;
            (m, Some(pt))
        }
        None => {
            let mc = cfg.model.model_config(input, train.classes, T::DTYPE);
            (Model::new(mc, &mut rng(seed, STREAM_INIT))?, None)
        }
    };
    if fcfg.method.is_twins() && fcfg.warmup_epochs > 0 {
        warmup_bn(
            &mut model,
            train,
            &fcfg.attack,
            fcfg.batch_size,
            fcfg.warmup_epochs,
            &mut rng(seed, STREAM_WARMUP),
        )?;
        save_checkpoint(&dir.join("warmup.ckpt"), &model, &meta(&model, "warmup", seed, 0, &fcfg))?;
    }
    let inputs = TrainInputs {
        train,
        val,
        source: data.source.as_ref().map(|(s, _)| s),
        pretrained: reference.as_ref(),
        eval_attack: Some(&attack),
    };
    let history = run_training(&fcfg, &mut model, &inputs)?;
    if !history.is_empty() {
        write_metrics(&history, &dir.join("metrics.csv"))?;
    }
    save_checkpoint(&dir.join("finetune.ckpt"), &model, &meta(&model, "finetune", seed, history.len(), &fcfg))?;
    let report = evaluate(&model, val, Some(&attack), fcfg.batch_size, &mut rng(seed, STREAM_EVAL))?;
    write_json(&dir.join("eval.json"), &report)?;
    summary.finetune = Some(StageSummary::new(&history, report)?);
    Ok(summary)
}

fn run_typed<T: Scalar>(cfg: &ExperimentConfig, stages: Stages) -> Result<Vec<SeedSummary>> {
    let data = load_data::<T>(cfg)?;
    create_dir(&cfg.output_dir)?;
    let summaries = cfg
        .seeds
        .iter()
        .map(|&s| run_seed(cfg, &data, s, stages))
        .collect::<Result<Vec<_>>>()?;
    write_json(&cfg.output_dir.join("summary.json"), &summaries)?;
    Ok(summaries)
}

/// Runs `stages` for every seed and writes checkpoints, `metrics.csv` and
/// `eval.json` under `output_dir/seed_{s}`, plus `summary.json`.
pub fn run_experiment(cfg: &ExperimentConfig, stages: Stages) -> Result<Vec<SeedSummary>> {
    cfg.validate()?;
    match cfg.dtype {
        DType::F32 => run_typed::<f32>(cfg, stages),
        DType::F64 => run_typed::<f64>(cfg, stages),
    }
}

/// Evaluates a checkpoint on the target validation split.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path, seed: u64) -> Result<EvalReport> {
    fn typed<T: Scalar>(cfg: &ExperimentConfig, checkpoint: &Path, seed: u64) -> Result<EvalReport> {
        let (model, _) = load_checkpoint::<T>(checkpoint)?;
        let (_, val) = cfg.target.load_split::<T>()?;
        let attack = eval_attack(cfg);
        evaluate(&model, &val, Some(&attack), cfg.finetune.batch_size, &mut rng(seed, STREAM_EVAL))
    }
    match cfg.dtype {
        DType::F32 => typed::<f32>(cfg, checkpoint, seed),
        DType::F64 => typed::<f64>(cfg, checkpoint, seed),
    }
}

/// Writes each configured dataset (before splitting) as IDX files named
/// `{role}-images.idx` and `{role}-labels.idx` under `out`.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    let mut written = Vec::new();
    for (role, spec) in std::iter::once(("target", &cfg.target)).chain(cfg.source.as_ref().map(|s| ("source", s))) {
        let d = spec.load::<f64>()?;
        let (ip, lp) = (out.join(format!("{role}-images.idx")), out.join(format!("{role}-labels.idx")));
        super::data::write_idx(&d, &ip, &lp)?;
        written.extend([ip, lp]);
    }
    Ok(written)
}
