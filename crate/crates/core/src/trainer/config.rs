use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::actor::{EtaController, EtaMode, GuidanceMode};
use crate::critic::{AggregationOrder, CriticSettings, TargetKind, ValueTargetMode};
use crate::error::{DacError, Result};

/// Lagrange multiplier settings (`[eta]` table).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EtaConfig {
    pub mode: EtaMode,
    pub init: f64,
    /// Behavior-cloning threshold; only meaningful for the learnable mode.
    pub b: Option<f64>,
    pub alpha: f64,
    pub floor: f64,
}

impl Default for EtaConfig {
    fn default() -> Self {
        EtaConfig { mode: EtaMode::Constant, init: 1.0, b: None, alpha: 1e-3, floor: 1e-4 }
    }
}

impl EtaConfig {
    pub fn controller(&self) -> EtaController {
        EtaController { eta: self.init, mode: self.mode, b: self.b.unwrap_or(0.0), alpha: self.alpha, floor: self.floor }
    }
}

/// Every hyperparameter of a training run. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr_actor: f64,
    pub lr_critic: f64,
    /// Cosine decay of both learning rates over `steps`.
    pub lr_decay: bool,
    pub ema_alpha: f64,
    pub actor_target_period: u64,
    pub diffusion_steps: usize,
    pub ensemble_size: usize,
    pub rho: f64,
    pub gamma: f64,
    pub next_actions: usize,
    pub value_mode: ValueTargetMode,
    pub target_kind: TargetKind,
    pub aggregation: AggregationOrder,
    pub guidance: GuidanceMode,
    /// Rows per batch used for the denoised-mode samples; 0 means the whole batch.
    pub denoised_samples: usize,
    pub actor_hidden: usize,
    pub actor_depth: usize,
    pub critic_hidden: usize,
    pub critic_depth: usize,
    /// The Q scale is re-estimated every this many steps.
    pub scale_refresh: u64,
    pub scale_sample: usize,
    pub metrics_every: u64,
    pub checkpoint_every: u64,
    /// Rescale rewards by the spread of trajectory returns before training.
    pub tune_rewards: bool,
    pub seed: u64,
    pub eta: EtaConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_size: 256,
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            lr_decay: true,
            ema_alpha: 5e-3,
            actor_target_period: 5,
            diffusion_steps: 5,
            ensemble_size: 10,
            rho: 1.0,
            gamma: 0.99,
            next_actions: 10,
            value_mode: ValueTargetMode::Mean,
            target_kind: TargetKind::Lcb,
            aggregation: AggregationOrder::ActionsThenMembers,
            guidance: GuidanceMode::Soft,
            denoised_samples: 0,
            actor_hidden: 256,
            actor_depth: 3,
            critic_hidden: 256,
            critic_depth: 3,
            scale_refresh: 1000,
            scale_sample: 4096,
            metrics_every: 100,
            checkpoint_every: 5000,
            tune_rewards: false,
            seed: 0,
            eta: EtaConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Two-dimensional bandit reproduction settings: 20,000 steps, batch 128,
    /// learning rate 1e-3, 50 diffusion steps, learnable multiplier with
    /// threshold 1.3. Denoised guidance back-propagates through 8 sampled
    /// rows per batch.
    pub fn bandit_reference() -> Self {
        TrainConfig {
            steps: 20_000,
            denoised_samples: 8,
            batch_size: 128,
            lr_actor: 1e-3,
            lr_critic: 1e-3,
            diffusion_steps: 50,
            actor_hidden: 256,
            critic_hidden: 32,
            metrics_every: 100,
            checkpoint_every: 5000,
            eta: EtaConfig { mode: EtaMode::Learnable, init: 1.0, b: Some(1.3), ..EtaConfig::default() },
            ..TrainConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg = Self::from_toml_unchecked(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses without validating, so callers can apply overrides first.
    pub fn from_toml_unchecked(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Collects every violated constraint, naming the offending keys.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let mut positive = |key: &str, v: f64| {
            if !(v > 0.0) || !v.is_finite() {
                bad.push(format!("{key} must be positive (got {v})"));
            }
        };
        positive("lr_actor", self.lr_actor);
        positive("lr_critic", self.lr_critic);
        positive("ema_alpha", self.ema_alpha);
        positive("eta.init", self.eta.init);
        positive("eta.floor", self.eta.floor);
        if self.ema_alpha > 1.0 {
            bad.push("ema_alpha must not exceed 1".into());
        }
        for (key, v) in [
            ("batch_size", self.batch_size as u64),
            ("actor_target_period", self.actor_target_period),
            ("diffusion_steps", self.diffusion_steps as u64),
            ("ensemble_size", self.ensemble_size as u64),
            ("next_actions", self.next_actions as u64),
            ("actor_hidden", self.actor_hidden as u64),
            ("critic_hidden", self.critic_hidden as u64),
            ("scale_refresh", self.scale_refresh),
            ("scale_sample", self.scale_sample as u64),
            ("metrics_every", self.metrics_every),
            ("checkpoint_every", self.checkpoint_every),
        ] {
            if v == 0 {
                bad.push(format!("{key} must be at least 1"));
            }
        }
        if !(self.rho >= 0.0) {
            bad.push(format!("rho must be non-negative (got {})", self.rho));
        }
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            bad.push(format!("gamma must lie in [0, 1) (got {})", self.gamma));
        }
        match self.eta.mode {
            EtaMode::Constant => {
                if self.eta.b.is_some() {
                    bad.push("eta.b is set but eta.mode is constant; the threshold only applies to learnable eta".into());
                }
            }
            EtaMode::Learnable => {
                match self.eta.b {
                    Some(b) if b > 0.0 => {}
                    Some(b) => bad.push(format!("eta.b must be positive (got {b})")),
                    None => bad.push("eta.b is required when eta.mode is learnable".into()),
                }
                if !(self.eta.alpha > 0.0) {
                    bad.push(format!("eta.alpha must be positive (got {})", self.eta.alpha));
                }
            }
        }
        if self.eta.init < self.eta.floor {
            bad.push("eta.init must not be below eta.floor".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(DacError::Validation(bad))
        }
    }

    pub fn critic_settings(&self) -> CriticSettings {
        CriticSettings {
            ensemble_size: self.ensemble_size,
            rho: self.rho,
            gamma: self.gamma,
            target_kind: self.target_kind,
            value_mode: self.value_mode,
            order: self.aggregation,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
