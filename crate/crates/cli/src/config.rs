//! Run configuration: one JSON file holding every numeric knob.
//!
//! Flags stay reserved for paths, seeds, and `-n`; unknown keys anywhere in
//! the file are rejected so typos cannot silently fall back to defaults.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use reflex_core::perturb::PerturbOptions;
use reflex_core::reward::RewardConfig;
use reflex_core::rlkernel::RlConfig;
use reflex_core::similarity::SimilarityKind;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    /// Default output directory; `--out` and `REFLEX_OUT` take precedence.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub reward: RewardConfig<f64>,
    pub rl: RlConfig<f64>,
    /// When set, overrides `reward.similarity`.
    pub similarity: Option<SimilarityKind>,
    pub perturb: PerturbOptions,
    pub io: IoConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("invalid config: cannot read {}", p.display()))?;
                serde_json::from_str::<RunConfig>(&text)
                    .with_context(|| format!("invalid config: {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(kind) = cfg.similarity.clone() {
            cfg.reward.similarity = kind;
        }
        cfg.reward
            .validate()
            .map_err(|e| anyhow::anyhow!("invalid config: {e}"))?;
        cfg.rl
            .validate()
            .map_err(|e| anyhow::anyhow!("invalid config: {e}"))?;
        cfg.perturb
            .validate()
            .map_err(|e| anyhow::anyhow!("invalid config: {e}"))?;
        Ok(cfg)
    }
}
