//! The run configuration: every module's settings in one JSON document.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::diffusion::{DenoiserConfig, ScheduleConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::features::HfConfig;
use crate::losses::LossConfig;
use crate::modulation::ModulationConfig;
use crate::prior::PriorConfig;
use crate::synth::DatasetConfig;

/// Method components toggled by the ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Components {
    /// Condition on RGB, high-frequency and texture streams of the segmented
    /// views; otherwise on RGB tokens of the raw views.
    pub decouple: bool,
    /// Timestep-dependent modulation; otherwise the plain stream mean.
    pub time_modulation: bool,
}

impl Default for Components {
    fn default() -> Self {
        Components {
            decouple: true,
            time_modulation: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 8,
            lr: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub samples_per_pairing: usize,
    /// Test scenes used as backgrounds, spread evenly over the classes.
    pub pairings: usize,
    pub classifier_epochs: usize,
    pub classifier_lr: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples_per_pairing: 4,
            pairings: 10,
            classifier_epochs: 400,
            classifier_lr: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub features: HfConfig,
    pub encoder: EncoderConfig,
    pub modulation: ModulationConfig,
    pub diffusion: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub loss: LossConfig,
    pub prior: PriorConfig,
    pub components: Components,
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
    pub eval: EvalConfig,
}

fn collect(errs: &mut Vec<String>, r: Result<()>) {
    match r {
        Ok(()) => {}
        Err(Error::Config(e)) => errs.extend(e),
        Err(other) => errs.push(other.to_string()),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        collect(&mut errs, self.features.validate());
        collect(&mut errs, self.encoder.validate());
        collect(&mut errs, self.modulation.validate());
        collect(&mut errs, self.diffusion.validate());
        collect(&mut errs, self.denoiser.validate());
        collect(&mut errs, self.loss.validate(self.diffusion.steps));
        collect(&mut errs, self.prior.validate(self.diffusion.steps));
        collect(&mut errs, self.dataset.validate());
        if self.modulation.token_dim != self.encoder.dim {
            errs.push(format!(
                "modulation.token_dim {} must equal encoder.dim {}",
                self.modulation.token_dim, self.encoder.dim
            ));
        }
        if self.train.batch_size == 0 {
            errs.push("train.batch_size must be positive".into());
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            errs.push(format!("train.lr must be positive, got {}", self.train.lr));
        }
        if self.eval.samples_per_pairing == 0 || self.eval.pairings == 0 {
            errs.push("eval.samples_per_pairing and eval.pairings must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Parses a (possibly partial) JSON document. Unknown keys are errors,
    /// all listed at once; the second value lists keys that took defaults.
    pub fn from_json(text: &str) -> Result<(RunConfig, Vec<String>)> {
        let value: Value = serde_json::from_str(text)?;
        let reference = serde_json::to_value(RunConfig::default())?;
        let mut unknown = Vec::new();
        let mut missing = Vec::new();
        diff_keys(&value, &reference, "", &mut unknown, &mut missing);
        if !unknown.is_empty() {
            return Err(Error::Config(
                unknown.into_iter().map(|k| format!("unknown key {k}")).collect(),
            ));
        }
        let cfg: RunConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok((cfg, missing))
    }

    pub fn load(path: &Path) -> Result<(RunConfig, Vec<String>)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn diff_keys(value: &Value, reference: &Value, prefix: &str, unknown: &mut Vec<String>, missing: &mut Vec<String>) {
    let (Value::Object(v), Value::Object(r)) = (value, reference) else {
        return;
    };
    let join = |k: &str| {
        if prefix.is_empty() {
            k.to_string()
        } else {
            format!("{prefix}.{k}")
        }
    };
    for (k, sub) in v {
        match r.get(k) {
            Some(rsub) => diff_keys(sub, rsub, &join(k), unknown, missing),
            None => unknown.push(join(k)),
        }
    }
    for k in r.keys() {
        if !v.contains_key(k) {
            missing.push(join(k));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_takes_every_default() {
        let (cfg, missing) = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert!(missing.contains(&"prior".to_string()));
    }

    #[test]
    fn partial_sections_merge_with_defaults() {
        let (cfg, missing) = RunConfig::from_json(r#"{"prior": {"lambda": 0.25}, "seed": 3}"#).unwrap();
        assert_eq!(cfg.prior.lambda, 0.25);
        assert_eq!(cfg.prior.high_noise_t, 800);
        assert_eq!(cfg.seed, 3);
        assert!(missing.contains(&"prior.enabled".to_string()));
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        match RunConfig::from_json(r#"{"prior": {"lamda": 0.2}, "extra": 1, "train": {"epochs": 2}}"#) {
            Err(Error::Config(e)) => {
                assert_eq!(e.len(), 3, "{e:?}");
                assert!(e.iter().any(|m| m.contains("prior.lamda")));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_values_are_all_listed() {
        match RunConfig::from_json(
            r#"{"prior": {"lambda": 2.0}, "loss": {"weight_ocr": -1.0}, "train": {"batch_size": 0}}"#,
        ) {
            Err(Error::Config(e)) => assert_eq!(e.len(), 3, "{e:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trip() {
        let cfg = RunConfig::default();
        let (back, missing) = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert!(missing.is_empty());
    }
}
