//! Run configuration: one JSON document, every field defaulted, unknown keys
//! rejected, validated before any compute.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::PretrainConfig;
use crate::grpo::GrpoConfig;
use crate::model::NetConfig;
use crate::rewards::RewardConfig;
use crate::sampler::ScheduleConfig;
use crate::synth::{GenConfig, GlyphFont};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub generator: GenConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub architecture: NetConfig,
    pub pretrain: PretrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Master seed of the evaluation init noise.
    pub noise_seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub schedule: ScheduleConfig,
    pub rewards: RewardConfig,
    pub grpo: GrpoConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.generator.validate(&GlyphFont::builtin())?;
        self.model.architecture.validate()?;
        self.model.pretrain.validate()?;
        crate::sampler::SampleSchedule::new(&self.schedule)?;
        self.rewards.validate()?;
        self.grpo.validate()?;
        if self.rewards.window.size > self.data.generator.size {
            return Err(Error::Config(format!(
                "reward window {} exceeds image size {}",
                self.rewards.window.size, self.data.generator.size
            )));
        }
        if !self.data.generator.size.is_multiple_of(self.model.architecture.patch_size) {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.data.generator.size, self.model.architecture.patch_size
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form (all defaults filled in).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        format!("{digest:x}")[..16].to_string()
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.grpo.group_size, 8);
        assert_eq!(cfg.schedule.steps, 20);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            RunConfig::from_json(r#"{"grpo":{"groupsize":4}}"#),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::from_json(r#"{"extra":1}"#).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_json(r#"{"grpo":{"tau":0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"data":{"generator":{"size":48}}}"#).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.grpo.clip_eps = 0.3;
        assert_ne!(a.hash(), b.hash());
        let round = RunConfig::from_json(&a.to_json_pretty()).unwrap();
        assert_eq!(round.hash(), a.hash());
    }
}
