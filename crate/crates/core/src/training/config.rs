use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, AttackLoss};
use crate::error::{Error, Result};
use crate::network::{is_frozen_affine, is_source_head};

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Clean cross-entropy, no attack.
    Std,
    At,
    Trades,
    TwinsAt,
    TwinsTrades,
    Lwf,
    Joint,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Std,
        Method::At,
        Method::Trades,
        Method::TwinsAt,
        Method::TwinsTrades,
        Method::Lwf,
        Method::Joint,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Std => "std",
            Method::At => "at",
            Method::Trades => "trades",
            Method::TwinsAt => "twins-at",
            Method::TwinsTrades => "twins-trades",
            Method::Lwf => "lwf",
            Method::Joint => "joint",
        }
    }

    pub fn is_twins(self) -> bool {
        matches!(self, Method::TwinsAt | Method::TwinsTrades)
    }

    pub fn is_trades(self) -> bool {
        matches!(self, Method::Trades | Method::TwinsTrades)
    }

    pub fn is_adversarial(self) -> bool {
        self != Method::Std
    }

    /// Loss the training attack maximizes unless overridden.
    pub fn default_attack_loss(self) -> AttackLoss {
        if self.is_trades() {
            AttackLoss::KlToClean
        } else {
            AttackLoss::Ce
        }
    }

    /// Whether the optimizer updates parameter `name` under this method.
    /// Frozen-branch affines only train in TWINS; the source head only in
    /// the joint objective.
    pub fn trains(self, name: &str) -> bool {
        if is_frozen_affine(name) {
            return self.is_twins();
        }
        if is_source_head(name) {
            return self == Method::Joint;
        }
        true
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method `{s}` (expected one of: std, at, trades, twins-at, twins-trades, lwf, joint)"
                ))
            })
    }
}

/// Argument order of the TRADES KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlOrder {
    /// `KL(adv ‖ clean)`.
    #[default]
    AdvFirst,
    /// `KL(clean ‖ adv)`.
    CleanFirst,
}

/// How the two TWINS sub-batch terms are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// Per-sub-batch means; `lambda_twins` is batch-size independent.
    #[default]
    Mean,
    /// Per-sub-batch sums.
    Sum,
}

fn d_momentum() -> f64 {
    0.9
}
fn d_beta() -> f64 {
    6.0
}
fn d_decay() -> f64 {
    0.1
}
fn d_lambda_twins() -> f64 {
    1.0
}
fn d_warmup() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    /// Base learning rate.
    pub eta: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_lambda_twins")]
    pub lambda_twins: f64,
    #[serde(default)]
    pub lambda_lwf: f64,
    #[serde(default)]
    pub lambda_uot: f64,
    #[serde(default = "d_beta")]
    pub beta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "d_decay")]
    pub decay: f64,
    #[serde(default)]
    pub seed: u64,
    /// Training attack; its `loss` falls back to [`Method::default_attack_loss`].
    pub attack: AttackConfig,
    /// Frozen-statistics warmup passes; only TWINS methods use them.
    #[serde(default = "d_warmup")]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub kl_order: KlOrder,
    #[serde(default)]
    pub reduction: Reduction,
}

impl TrainConfig {
    /// Defaults for `method` with the PGD-10 training attack.
    pub fn new(method: Method, eta: f64, batch_size: usize, epochs: usize) -> Self {
        Self {
            method,
            eta,
            weight_decay: 0.0,
            momentum: d_momentum(),
            lambda_twins: d_lambda_twins(),
            lambda_lwf: 0.0,
            lambda_uot: 0.0,
            beta: d_beta(),
            batch_size,
            epochs,
            milestones: Vec::new(),
            decay: d_decay(),
            seed: 0,
            attack: AttackConfig::pgd10(),
            warmup_epochs: d_warmup(),
            kl_order: KlOrder::default(),
            reduction: Reduction::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("eta", self.eta),
            ("weight_decay", self.weight_decay),
            ("momentum", self.momentum),
            ("lambda_twins", self.lambda_twins),
            ("lambda_lwf", self.lambda_lwf),
            ("lambda_uot", self.lambda_uot),
            ("beta", self.beta),
            ("decay", self.decay),
        ];
        for (name, v) in rates {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.method.is_twins() && (self.batch_size % 2 != 0 || self.batch_size < 4) {
            return Err(Error::Config(format!(
                "{} splits each batch in two; batch_size must be even and >= 4, got {}",
                self.method, self.batch_size
            )));
        }
        self.attack.validate()
    }

    /// Training attack with the method's loss.
    pub fn train_attack(&self) -> AttackConfig {
        let mut a = self.attack.clone();
        a.loss = Some(a.loss.unwrap_or_else(|| self.method.default_attack_loss()));
        a
    }

    /// `eta · decay^(number of milestones ≤ epoch)`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.eta * self.decay.powi(passed as i32)
    }
}
