use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which counterfactual terms enter the joint objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossToggles {
    pub counterfactual_ce: bool,
    pub proximity: bool,
    pub plausibility: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self::FULL
    }
}

impl LossToggles {
    pub const BASE: Self = Self {
        counterfactual_ce: false,
        proximity: false,
        plausibility: false,
    };
    pub const FULL: Self = Self {
        counterfactual_ce: true,
        proximity: true,
        plausibility: true,
    };

    pub fn any(&self) -> bool {
        self.counterfactual_ce || self.proximity || self.plausibility
    }

    /// The named ablation configurations, in table order.
    pub fn ablation_rows() -> [(&'static str, Self); 5] {
        let t = |ce, prox, plaus| Self {
            counterfactual_ce: ce,
            proximity: prox,
            plausibility: plaus,
        };
        [
            ("Base", t(false, false, false)),
            ("Base+CE", t(true, false, false)),
            ("Base+CE+Flow", t(true, false, true)),
            ("Base+CE+Dist", t(true, true, false)),
            ("Full", t(true, true, true)),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub dropout: f64,
    pub flow_layers: usize,
    pub flow_hidden: usize,
    pub flow_blocks: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            blocks: 4,
            dropout: 0.25,
            flow_layers: 8,
            flow_hidden: 16,
            flow_blocks: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub min_lr: f64,
    /// Weight of the distance to the nearest alternative cluster center.
    pub alpha: f64,
    /// Use `x' = W_m` instead of `x' = x − W_m` in the distance term.
    pub literal_target: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 1e-3,
            min_lr: 1e-5,
            alpha: 0.8,
            literal_target: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowPhaseConfig {
    pub epochs: usize,
    pub lr: f64,
    pub min_lr: f64,
    /// Epochs without a better validation NLL before stopping; 0 disables.
    pub patience: usize,
}

impl Default for FlowPhaseConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            lr: 1e-3,
            min_lr: 1e-5,
            patience: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointConfig {
    /// Upper bound on epochs of the joint phase.
    pub epochs: usize,
    pub lr: f64,
    pub min_lr: f64,
    /// Epochs over which the trade-off weights ramp from 0 to `alpha`.
    pub ramp_epochs: usize,
    /// Targets for the counterfactual CE, proximity and plausibility terms.
    pub alpha: [f64; 3],
    pub early_stopping: bool,
    pub patience: usize,
    pub accuracy_slack: f64,
    pub min_validity: f64,
    pub l2_weight: f64,
    /// Use the global rather than per-class density threshold in the
    /// plausibility hinge.
    pub global_threshold: bool,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            lr: 1e-3,
            min_lr: 1e-5,
            ramp_epochs: 20,
            alpha: [0.8, 0.1, 0.1],
            early_stopping: true,
            patience: 15,
            accuracy_slack: 0.02,
            min_validity: 0.95,
            l2_weight: 0.1,
            global_threshold: false,
        }
    }
}

/// Complete training configuration; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub validation_fraction: f64,
    /// Downsample the training split to the minority class count.
    pub balance: bool,
    pub noise_sigma: f64,
    pub clusters_per_class: usize,
    pub network: NetworkConfig,
    pub pretrain: PretrainConfig,
    pub flow: FlowPhaseConfig,
    pub joint: JointConfig,
    pub losses: LossToggles,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 128,
            validation_fraction: 0.2,
            balance: true,
            noise_sigma: crate::dataio::DEFAULT_NOISE_SIGMA,
            clusters_per_class: 5,
            network: NetworkConfig::default(),
            pretrain: PretrainConfig::default(),
            flow: FlowPhaseConfig::default(),
            joint: JointConfig::default(),
            losses: LossToggles::FULL,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)");
        }
        if self.noise_sigma < 0.0 || self.clusters_per_class == 0 {
            return bad("noise_sigma must be ≥ 0 and clusters_per_class ≥ 1");
        }
        if !(0.0..1.0).contains(&self.network.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.joint.alpha.iter().any(|a| *a < 0.0) || self.pretrain.alpha < 0.0 {
            return bad("trade-off weights must be nonnegative");
        }
        Ok(())
    }
}

/// Linear ramp of the trade-off weights: `α_i(t) = target_i · min(t/R, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TradeoffSchedule {
    pub targets: [f64; 3],
    pub ramp_steps: u64,
}

impl TradeoffSchedule {
    pub fn alpha(&self, step: u64) -> [f64; 3] {
        let f = if self.ramp_steps == 0 {
            1.0
        } else {
            (step as f64 / self.ramp_steps as f64).min(1.0)
        };
        self.targets.map(|t| t * f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_is_piecewise_linear() {
        let s = TradeoffSchedule {
            targets: [0.8, 0.1, 0.1],
            ramp_steps: 100,
        };
        assert_eq!(s.alpha(0), [0.0; 3]);
        assert_eq!(s.alpha(50), [0.4, 0.05, 0.05]);
        assert_eq!(s.alpha(100), [0.8, 0.1, 0.1]);
        assert_eq!(s.alpha(1000), [0.8, 0.1, 0.1]);
        let mut prev = [0.0; 3];
        for t in 0..150 {
            let a = s.alpha(t);
            assert!(a.iter().zip(&prev).all(|(x, y)| x >= y));
            prev = a;
        }
    }

    #[test]
    fn partial_toml_keeps_defaults() {
        let cfg = TrainConfig::from_toml("seed = 7\n[joint]\npatience = 3\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.joint.patience, 3);
        assert_eq!(cfg.joint.alpha, [0.8, 0.1, 0.1]);
        assert_eq!(cfg.batch_size, 128);
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(TrainConfig::from_toml("sed = 1").is_err());
        assert!(TrainConfig::from_toml("batch_size = 0").is_err());
    }
}
