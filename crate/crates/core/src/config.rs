//! Adaptation hyper-parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refine::AugmentationPolicy;

/// Every knob of the adaptation run. Unknown keys in a config file are
/// rejected; missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BetaConfig {
    /// Clean-probability threshold for the easy subdomain.
    pub tau: f64,
    /// Weight of the adversarial subdomain alignment.
    pub gamma: f64,
    /// Mixup Beta(alpha, alpha) parameter.
    pub mixup_alpha: f64,
    /// Weight of the MSE term on mixed hard samples.
    pub lambda_mse: f64,
    /// Sharpening temperature for co-guessed hard labels.
    pub temperature: f64,
    pub warmup_epochs: usize,
    /// Total epochs including warm-up.
    pub epochs: usize,
    pub batch_size: usize,
    pub body_lr: f64,
    pub head_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Momentum of the per-network pseudo-label table.
    pub ema_momentum: f64,
    /// Warm-up minimizes `CE - entropy_weight * H(p)`: a positive weight
    /// rewards entropy and so penalizes over-confident near-zero losses.
    pub entropy_weight: f64,
    /// Weight of the mutual-information term in the distillation step.
    pub mi_weight: f64,
    pub finetune_epochs: usize,
    pub finetune_lr_scale: f64,
    pub hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub augmentation: AugmentationPolicy,
    pub gmm_max_iter: usize,
    pub gmm_tol: f64,
    /// Keep pseudo labels at the raw black-box answers instead of the EMA table.
    pub freeze_pseudo_labels: bool,
    /// Candidate alpha used for the per-epoch bound columns.
    pub bound_alpha: f64,
    pub seed: u64,
}

impl Default for BetaConfig {
    fn default() -> Self {
        Self {
            tau: 0.8,
            gamma: 0.1,
            mixup_alpha: 1.0,
            lambda_mse: 0.0,
            temperature: 0.5,
            warmup_epochs: 3,
            epochs: 23,
            batch_size: 64,
            body_lr: 0.01,
            head_lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-3,
            ema_momentum: 0.6,
            entropy_weight: 0.2,
            mi_weight: 1.0,
            finetune_epochs: 2,
            finetune_lr_scale: 0.1,
            hidden: vec![64, 64],
            discriminator_hidden: vec![16],
            augmentation: AugmentationPolicy::default(),
            gmm_max_iter: 100,
            gmm_tol: 1e-8,
            freeze_pseudo_labels: false,
            bound_alpha: 0.5,
            seed: 0,
        }
    }
}

impl BetaConfig {
    pub fn adaptation_epochs(&self) -> usize {
        self.epochs - self.warmup_epochs
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau {} outside (0, 1]", self.tau));
        }
        for (name, v) in [
            ("body_lr", self.body_lr),
            ("head_lr", self.head_lr),
            ("mixup_alpha", self.mixup_alpha),
            ("temperature", self.temperature),
            ("finetune_lr_scale", self.finetune_lr_scale),
            ("gmm_tol", self.gmm_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("lambda_mse", self.lambda_mse),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("entropy_weight", self.entropy_weight),
            ("mi_weight", self.mi_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return bad(format!("ema_momentum {} outside [0, 1)", self.ema_momentum));
        }
        if !(0.0..=1.0).contains(&self.bound_alpha) {
            return bad(format!("bound_alpha {} outside [0, 1]", self.bound_alpha));
        }
        if self.epochs < self.warmup_epochs {
            return bad(format!(
                "epochs ({}) must include the {} warm-up epochs",
                self.epochs, self.warmup_epochs
            ));
        }
        if self.batch_size == 0 || self.gmm_max_iter == 0 {
            return bad("batch_size and gmm_max_iter must be positive".into());
        }
        if self.hidden.contains(&0) || self.discriminator_hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        self.augmentation.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
