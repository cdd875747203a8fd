use serde::{Deserialize, Serialize};

use crate::bank::{BankUpdatePolicy, Sampling, Selecting};
use crate::error::{Error, Result};
use crate::regen::InteractionStrategy;
use crate::synthdata::BenchmarkConfig;

use super::augment::AugmentConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Side of the square patch fed to the featurizer (odd).
    pub patch: usize,
    /// Raw feature width `D0` of the frozen featurizer.
    pub raw_dim: usize,
    /// Embedding width `D`.
    pub embed_dim: usize,
    /// Std of the frozen projection entries, times `1/sqrt(fan_in)`.
    pub featurizer_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch: 3,
            raw_dim: 24,
            embed_dim: 8,
            featurizer_scale: 4.0,
        }
    }
}

/// Which map decides whether a target pixel passes the `tau` gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateOn {
    /// The regenerated semantic pseudo-label.
    #[default]
    Regenerated,
    /// The weak-view prediction before regeneration.
    Original,
}

/// Initial bank contents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankInit {
    /// Random unit rows.
    Random,
    /// Embeddings of random source pixels of each slot's class under the
    /// initial model.
    #[default]
    Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: BenchmarkConfig,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    /// Bank size `K`.
    pub bank_size: usize,
    pub bank_init: BankInit,
    /// Instance softmax temperature.
    pub tp: f64,
    /// Pseudo-label confidence threshold.
    pub tau: f64,
    pub lambda_ins: f64,
    /// Boundary threshold for BPS selection.
    pub sigma: usize,
    pub policy: BankUpdatePolicy,
    pub strategy: InteractionStrategy,
    /// Off: `z_hat = z` and `q_hat = q_alpha`.
    pub regen: bool,
    pub gate_on: GateOn,
    /// Soft cross-entropy against `z_hat` instead of its argmax.
    pub soft_target: bool,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Iterations between metric rows (a row is also written at 0 and at the end).
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Desk-scale defaults: paper hyper-parameters with a smaller bank and run.
    pub fn desk() -> Self {
        Self {
            data: BenchmarkConfig::default(),
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            bank_size: 50,
            bank_init: BankInit::Source,
            tp: 0.1,
            tau: 0.968,
            lambda_ins: 1.0,
            sigma: 1,
            policy: BankUpdatePolicy::default(),
            strategy: InteractionStrategy::default(),
            regen: true,
            gate_on: GateOn::Regenerated,
            soft_target: false,
            learning_rate: 0.1,
            iterations: 2000,
            eval_interval: 250,
            seed: 0,
        }
    }

    /// The published hyper-parameters: `K = 300`, random bank init, `sigma = 2`.
    pub fn paper() -> Self {
        Self {
            bank_size: 300,
            bank_init: BankInit::Random,
            sigma: 2,
            ..Self::desk()
        }
    }

    /// Semantic-only self-training: no instance loss, no regeneration, frozen bank.
    pub fn baseline(mut self) -> Self {
        self.lambda_ins = 0.0;
        self.regen = false;
        self.strategy.phi = 1.0;
        self.policy.sampling = Sampling::NoUpdate;
        self
    }

    /// True when the bank influences training at all.
    pub fn uses_bank(&self) -> bool {
        self.lambda_ins != 0.0 || self.regen
    }

    pub fn classes(&self) -> usize {
        self.data.classes
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.policy.validate()?;
        self.strategy.validate()?;
        self.augment.validate()?;
        let m = &self.model;
        if m.patch % 2 == 0 || m.raw_dim == 0 || m.embed_dim == 0 {
            return Err(Error::Invalid(
                "model needs an odd patch and non-zero raw_dim/embed_dim".into(),
            ));
        }
        if !(m.featurizer_scale.is_finite() && m.featurizer_scale > 0.0) {
            return Err(Error::Invalid("featurizer_scale must be positive".into()));
        }
        if self.bank_size < self.classes() {
            return Err(Error::Invalid(format!(
                "bank_size {} smaller than {} classes",
                self.bank_size,
                self.classes()
            )));
        }
        if !(self.tp > 0.0 && self.tp.is_finite()) {
            return Err(Error::BadTemperature(self.tp));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Invalid(format!("tau {} outside [0, 1]", self.tau)));
        }
        if !(self.lambda_ins >= 0.0 && self.lambda_ins.is_finite()) {
            return Err(Error::Invalid("lambda_ins must be non-negative".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid("learning_rate must be positive".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Invalid("eval_interval must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Names of the component-ablation variants, baseline first.
pub const COMPONENT_IDS: [&str; 6] = ["baseline", "I", "II", "III", "IV", "V"];

/// One step of the component ablation applied on top of `base`.
pub fn component_variant(base: &RunConfig, id: &str) -> Option<RunConfig> {
    let mut c = base.clone();
    let ins_only = |c: &mut RunConfig, sampling, selecting| {
        c.regen = false;
        c.policy.sampling = sampling;
        c.policy.selecting = selecting;
    };
    match id {
        "baseline" => c = c.baseline(),
        "I" => ins_only(&mut c, Sampling::Random, Selecting::Random),
        "II" => ins_only(&mut c, Sampling::ClassBalanced, Selecting::Random),
        "III" => ins_only(&mut c, Sampling::ClassBalanced, Selecting::BoundaryPixels),
        "IV" => {
            ins_only(&mut c, Sampling::Random, Selecting::Random);
            c.regen = true;
        }
        "V" => {
            c.regen = true;
            c.policy.sampling = Sampling::ClassBalanced;
            c.policy.selecting = Selecting::BoundaryPixels;
        }
        _ => return None,
    }
    Some(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_paper_scalars() {
        let d = RunConfig::desk();
        assert_eq!(d.bank_size, 50);
        assert_eq!(d.iterations, 2000);
        assert_eq!((d.tp, d.tau, d.lambda_ins), (0.1, 0.968, 1.0));
        assert_eq!((d.strategy.phi, d.policy.momentum, d.policy.interval), (0.9, 0.999, 50));
        assert_eq!(RunConfig::paper().bank_size, 300);
        d.validate().unwrap();
        RunConfig::paper().validate().unwrap();
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let d = RunConfig::desk();
        let text = serde_json::to_string(&d).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), d);
        assert!(RunConfig::from_json(r#"{"bank_sise": 10}"#).is_err());
        assert!(RunConfig::from_json(r#"{"policy": {"momentm": 0.5}}"#).is_err());
        let partial = RunConfig::from_json(r#"{"iterations": 7}"#).unwrap();
        assert_eq!(partial.iterations, 7);
        assert_eq!(partial.bank_size, 50);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_json(r#"{"tp": 0}"#).is_err());
        assert!(RunConfig::from_json(r#"{"bank_size": 3}"#).is_err());
        assert!(RunConfig::from_json(r#"{"strategy": {"phi": 1.5}}"#).is_err());
    }

    #[test]
    fn component_variants_differ_only_where_expected() {
        let base = RunConfig::desk();
        let v: Vec<RunConfig> = COMPONENT_IDS
            .iter()
            .map(|id| component_variant(&base, id).unwrap())
            .collect();
        assert!(!v[0].uses_bank());
        assert!(v[1..].iter().all(|c| c.lambda_ins == 1.0));
        assert_eq!(v[5], base);
        assert!(!v[1].regen && !v[3].regen && v[4].regen);
        assert!(component_variant(&base, "VI").is_none());
    }
}
