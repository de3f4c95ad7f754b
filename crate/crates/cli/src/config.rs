//! Application config. Every field is optional so the file, the flags and
//! the environment can be layered in that order.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ota_core::losses::{LossWeights, MalConfig};
use ota_core::supervision::SamplerConfig;

pub const ENV_ENDPOINT: &str = "OTA_LLM_ENDPOINT";
pub const ENV_MODEL: &str = "OTA_LLM_MODEL";
pub const ENV_KEY: &str = "OTA_LLM_KEY";
pub const ENV_LOG: &str = "OTA_LOG";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub log_level: Option<String>,
    pub paths: Paths,
    pub sampler: SamplerSection,
    pub mal: MalSection,
    pub weights: WeightsSection,
    pub head: HeadSection,
    pub llm: LlmSection,
    pub train: TrainSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub transcripts: Option<PathBuf>,
    pub rejects: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSection {
    pub q_max: Option<usize>,
    pub a_max: Option<usize>,
    pub seed: Option<u64>,
    pub shuffle: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MalSection {
    pub gamma: Option<f64>,
    pub alpha_neg: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightsSection {
    pub query: Option<f64>,
    pub attr: Option<f64>,
    #[serde(rename = "box")]
    pub box_: Option<f64>,
    pub giou: Option<f64>,
    pub fgl: Option<f64>,
    pub ddf: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadSection {
    pub d_vis: Option<usize>,
    pub d_txt: Option<usize>,
    pub shared_affine: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmSection {
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub key: Option<String>,
    pub timeout_secs: Option<u64>,
    pub retries: Option<u32>,
    pub concurrency: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub world_seed: Option<u64>,
}

/// Parses TOML text. Unknown keys are an error in strict mode and a warning
/// otherwise.
pub fn parse(text: &str, strict: bool) -> Result<AppConfig> {
    let de = toml::Deserializer::new(text);
    let mut unknown = Vec::new();
    let cfg: AppConfig = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))?;
    if !unknown.is_empty() {
        if strict {
            bail!("unknown config keys: {}", unknown.join(", "));
        }
        for k in &unknown {
            log::warn!("ignoring unknown config key `{k}`");
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: Option<&Path>, strict: bool) -> Result<AppConfig> {
    match path {
        None => Ok(AppConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            parse(&text, strict).with_context(|| format!("config {}", p.display()))
        }
    }
}

fn set<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

impl AppConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler_config().validate()?;
        self.mal_config().validate().map_err(anyhow::Error::msg)?;
        self.loss_weights().validate().map_err(anyhow::Error::msg)?;
        if self.head.d_vis == Some(0) || self.head.d_txt == Some(0) {
            bail!("head dimensions must be at least 1");
        }
        if self.llm.concurrency == Some(0) {
            bail!("llm.concurrency must be at least 1");
        }
        Ok(())
    }

    /// Environment overrides; these win over both file and flags.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        set(&mut self.llm.endpoint, get(ENV_ENDPOINT));
        set(&mut self.llm.model, get(ENV_MODEL));
        set(&mut self.llm.key, get(ENV_KEY));
        set(&mut self.log_level, get(ENV_LOG));
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        self.sampler_over(SamplerConfig::default())
    }

    /// `base` with every field the config sets replaced.
    pub fn sampler_over(&self, base: SamplerConfig) -> SamplerConfig {
        let s = &self.sampler;
        SamplerConfig {
            q_max: s.q_max.unwrap_or(base.q_max),
            a_max: s.a_max.unwrap_or(base.a_max),
            seed: s.seed.unwrap_or(base.seed),
            shuffle: s.shuffle.unwrap_or(base.shuffle),
        }
    }

    pub fn mal_config(&self) -> MalConfig {
        let d = MalConfig::default();
        MalConfig {
            gamma: self.mal.gamma.unwrap_or(d.gamma),
            alpha_neg: self.mal.alpha_neg.unwrap_or(d.alpha_neg),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        let d = LossWeights::default();
        let w = &self.weights;
        LossWeights {
            query: w.query.unwrap_or(d.query),
            attr: w.attr.unwrap_or(d.attr),
            box_: w.box_.unwrap_or(d.box_),
            giou: w.giou.unwrap_or(d.giou),
            fgl: w.fgl.unwrap_or(d.fgl),
            ddf: w.ddf.unwrap_or(d.ddf),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_strict_and_lenient() {
        let text = "[sampler]\nq_max = 8\nbogus = 1\n";
        assert!(parse(text, true).is_err());
        let cfg = parse(text, false).unwrap();
        assert_eq!(cfg.sampler.q_max, Some(8));
    }

    #[test]
    fn env_beats_file() {
        let mut cfg = parse("[llm]\nendpoint = \"http://file\"\nmodel = \"m\"\n", true).unwrap();
        cfg.apply_env(|k| (k == ENV_ENDPOINT).then(|| "http://env".to_string()));
        assert_eq!(cfg.llm.endpoint.as_deref(), Some("http://env"));
        assert_eq!(cfg.llm.model.as_deref(), Some("m"));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(parse("[sampler]\nq_max = 0\n", true).is_err());
        assert!(parse("[mal]\ngamma = -1.0\n", true).is_err());
    }

    #[test]
    fn sections_fill_defaults() {
        let cfg = parse("[weights]\nattr = 0.0\n", true).unwrap();
        let w = cfg.loss_weights();
        assert_eq!(w.attr, 0.0);
        assert_eq!(w.box_, LossWeights::default().box_);
    }
}
