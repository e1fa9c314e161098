use serde::{Deserialize, Serialize};

use crate::ansatz::KernelName;
use crate::data::DatasetBundle;
use crate::error::{arg, Result};
use crate::exec::Exec;
use crate::fusion::FusionStrategy;
use crate::model::{AblationMode, ModelSpec, DEFAULT_BLOCKS, DEFAULT_D, DEFAULT_HIDDEN};

/// Run configuration. Every field has a default, so `{}` is a valid file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub fusion_strategy: FusionStrategy,
    pub kernel_name: KernelName,
    pub ablation_mode: AblationMode,
    /// Aligned feature width.
    pub d: usize,
    /// MLP hidden width.
    pub hidden: usize,
    /// Conv + pool blocks; `shallow-qcnn` always uses one.
    pub blocks: usize,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 25,
            seed: 998_244_353,
            fusion_strategy: FusionStrategy::Qcmm,
            kernel_name: KernelName::SO4,
            ablation_mode: AblationMode::None,
            d: DEFAULT_D,
            hidden: DEFAULT_HIDDEN,
            blocks: DEFAULT_BLOCKS,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return arg(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return arg("batch_size must be positive");
        }
        if self.d == 0 || self.hidden == 0 || self.blocks == 0 {
            return arg("d, hidden and blocks must be positive");
        }
        Ok(())
    }

    /// Architecture for a bundle's input widths.
    pub fn model_spec(&self, bundle: &DatasetBundle) -> ModelSpec {
        let base = ModelSpec::new(
            bundle.spec.d_h,
            bundle.spec.d_l,
            self.kernel_name,
            self.fusion_strategy,
            self.ablation_mode,
        );
        ModelSpec {
            d: self.d,
            hidden: self.hidden,
            blocks: if self.ablation_mode == AblationMode::ShallowQcnn { 1 } else { self.blocks },
            ..base
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c: TrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!((c.learning_rate, c.batch_size, c.epochs, c.seed), (1e-3, 16, 25, 998244353));
    }

    #[test]
    fn names_and_validation() {
        let c: TrainConfig = serde_json::from_str(
            r#"{"fusion_strategy": "circuit-block", "kernel_name": "U15", "ablation_mode": "shallow-qcnn", "exec": "sequential"}"#,
        )
        .unwrap();
        assert_eq!(c.fusion_strategy, FusionStrategy::CircuitBlock);
        assert_eq!(c.kernel_name, KernelName::U15);
        assert_eq!(c.ablation_mode, AblationMode::ShallowQcnn);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"ablation_mode": "deeper"}"#).is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 0.1}"#).is_err());
        let bad = TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
