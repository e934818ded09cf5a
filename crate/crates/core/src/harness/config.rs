//! Run configuration: defaults, strict JSON parsing, dotted-key overrides.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::ScheduleKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Cifar10,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleSelector {
    Fixed,
    Stagnation,
}

impl From<ScheduleSelector> for ScheduleKind {
    fn from(s: ScheduleSelector) -> ScheduleKind {
        match s {
            ScheduleSelector::Fixed => ScheduleKind::FixedStep,
            ScheduleSelector::Stagnation => ScheduleKind::Stagnation,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    /// Growth stages n; the final network is N_sn.
    pub stages: u32,
    pub precision: Precision,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 1,
            stages: 2,
            precision: Precision::Single,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub schedule: ScheduleSelector,
    /// Stagnation detector: window length in steps.
    pub stagnation_window: u64,
    /// Stagnation detector: relative improvement floor.
    pub stagnation_epsilon: f64,
    pub max_halvings: u32,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0002,
            ema_decay: 0.9999,
            schedule: ScheduleSelector::Fixed,
            stagnation_window: 1000,
            stagnation_epsilon: 0.001,
            max_halvings: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetSection {
    pub steps_per_growth: u64,
    pub steps_final_base_lr: u64,
    pub steps_decay_phase: u64,
    pub batch_size: usize,
    pub eval_every: u64,
}

impl Default for BudgetSection {
    fn default() -> Self {
        BudgetSection {
            steps_per_growth: 2000,
            steps_final_base_lr: 3000,
            steps_decay_phase: 2000,
            batch_size: 128,
            eval_every: 500,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    pub data_dir: Option<String>,
    /// Truncate the training split (after a fixed-seed shuffle).
    pub subset_size: Option<usize>,
    pub augment: bool,
    pub drop_last: bool,
    pub synth_classes: usize,
    pub synth_per_class: usize,
    pub synth_image_size: usize,
    pub synth_noise: f64,
    /// Synthetic test split size per class.
    pub synth_test_per_class: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Cifar10,
            data_dir: None,
            subset_size: Some(10_000),
            augment: false,
            drop_last: true,
            synth_classes: 10,
            synth_per_class: 1000,
            synth_image_size: 32,
            synth_noise: 0.25,
            synth_test_per_class: 200,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub run: RunSection,
    pub optimizer: OptimizerSection,
    pub budget: BudgetSection,
    pub data: DataSection,
}

impl TrainConfig {
    /// Parse strictly from JSON text: unknown keys are errors that name the
    /// offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Apply one `dotted.key=value` override on top of this config,
    /// re-checking strictness so typos are rejected by name.
    pub fn with_override(&self, dotted_key: &str, raw_value: &str) -> Result<Self> {
        let mut value = serde_json::to_value(self).expect("config serializes");
        let parsed: serde_json::Value = match serde_json::from_str(raw_value) {
            Ok(v) => v,
            Err(_) => serde_json::Value::String(raw_value.to_string()),
        };
        fn set(
            v: &mut serde_json::Value,
            parts: &[&str],
            leaf: serde_json::Value,
            full: &str,
        ) -> Result<()> {
            let map = v.as_object_mut().ok_or_else(|| {
                Error::config(format!("override key {full:?} descends into a non-section"))
            })?;
            match parts {
                [] => Err(Error::config("empty override key")),
                [last] => {
                    map.insert(last.to_string(), leaf);
                    Ok(())
                }
                [head, rest @ ..] => {
                    let slot = map
                        .entry(head.to_string())
                        .or_insert_with(|| serde_json::Value::Object(Default::default()));
                    set(slot, rest, leaf, full)
                }
            }
        }
        let parts: Vec<&str> = dotted_key.split('.').collect();
        set(&mut value, &parts, parsed, dotted_key)?;
        let cfg: TrainConfig =
            serde_json::from_value(value).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.optimizer.lr <= 0.0 {
            return Err(Error::config("optimizer.lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            return Err(Error::config("optimizer.momentum must be in [0,1)"));
        }
        if !(0.0..1.0).contains(&self.optimizer.ema_decay) {
            return Err(Error::config("optimizer.ema_decay must be in (0,1)"));
        }
        if self.budget.batch_size == 0 {
            return Err(Error::config("budget.batch_size must be >= 1"));
        }
        for (name, v) in [
            ("budget.steps_per_growth", self.budget.steps_per_growth),
            ("budget.steps_final_base_lr", self.budget.steps_final_base_lr),
            ("budget.steps_decay_phase", self.budget.steps_decay_phase),
            ("budget.eval_every", self.budget.eval_every),
            ("optimizer.stagnation_window", self.optimizer.stagnation_window),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        if self.data.synth_classes < 2 {
            return Err(Error::config("data.synth_classes must be >= 2"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let err = TrainConfig::from_json(r#"{"optimizer": {"learning_rat": 0.1}}"#).unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
    }

    #[test]
    fn file_then_flag_precedence() {
        let cfg = TrainConfig::from_json(r#"{"optimizer": {"lr": 0.2}}"#).unwrap();
        assert_eq!(cfg.optimizer.lr, 0.2);
        let cfg = cfg.with_override("optimizer.lr", "0.05").unwrap();
        assert_eq!(cfg.optimizer.lr, 0.05);
    }

    #[test]
    fn override_with_bad_key_names_it() {
        let cfg = TrainConfig::default();
        let err = cfg.with_override("optimizer.learning_rat", "0.3").unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
    }

    #[test]
    fn string_override_for_enums() {
        let cfg = TrainConfig::default()
            .with_override("data.source", "synthetic")
            .unwrap();
        assert_eq!(cfg.data.source, DataSource::Synthetic);
        let cfg = cfg.with_override("run.precision", "double").unwrap();
        assert_eq!(cfg.run.precision, Precision::Double);
    }

    #[test]
    fn json_round_trip() {
        let cfg = TrainConfig::default();
        let text = cfg.to_json_pretty();
        let back = TrainConfig::from_json(&text).unwrap();
        assert_eq!(back.optimizer.lr, cfg.optimizer.lr);
        assert_eq!(back.budget.steps_per_growth, cfg.budget.steps_per_growth);
    }
}
