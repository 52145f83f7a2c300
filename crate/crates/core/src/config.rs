//! Run configuration: one JSON document with model, heads, corpus, capture,
//! probe and intervention sections. Missing fields take their defaults;
//! unknown fields are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::hashing::hash_json;
use crate::intervene::{DEFAULT_ALPHA, DEFAULT_EPSILON};
use crate::model::{build_model, default_registry, detune, Model, ModelConfig, PlantedHeadSpec};
use crate::probe::TrainConfig;
use crate::trace::{TokenSelect, DEFAULT_TOPK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadsSection {
    /// Gain multiplier for the spatial heads; 1 keeps the registry as is.
    pub spatial_detune: f64,
    /// Replaces the default planted-head registry when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub registry: Option<Vec<PlantedHeadSpec>>,
}

impl Default for HeadsSection {
    fn default() -> Self {
        HeadsSection { spatial_detune: 1.0, registry: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptureSection {
    pub token_select: TokenSelect,
}

impl Default for CaptureSection {
    fn default() -> Self {
        CaptureSection { token_select: TokenSelect::TopK(DEFAULT_TOPK) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterventionSection {
    pub epsilon: f64,
    pub alpha: f64,
    /// Seeds for random-head controls.
    pub random_seeds: Vec<u64>,
    /// Relative threshold (times the row max) for the sparsity statistic.
    pub sparsity_threshold: f64,
}

impl Default for InterventionSection {
    fn default() -> Self {
        InterventionSection {
            epsilon: DEFAULT_EPSILON,
            alpha: DEFAULT_ALPHA,
            random_seeds: (0..5).collect(),
            sparsity_threshold: 0.001,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub heads: HeadsSection,
    pub corpus: CorpusConfig,
    pub capture: CaptureSection,
    pub probe: TrainConfig,
    pub intervention: InterventionSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                RunConfig::from_json(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.probe.validate()?;
        if !(self.heads.spatial_detune > 0.0) || !self.heads.spatial_detune.is_finite() {
            return Err(Error::Config("heads.spatial_detune must be positive".into()));
        }
        let iv = &self.intervention;
        if !(iv.epsilon > 0.0 && iv.epsilon <= 1.0) {
            return Err(Error::Config("intervention.epsilon must lie in (0, 1]".into()));
        }
        if !iv.alpha.is_finite() {
            return Err(Error::Config("intervention.alpha must be finite".into()));
        }
        if !(iv.sparsity_threshold >= 0.0) {
            return Err(Error::Config("intervention.sparsity_threshold must be >= 0".into()));
        }
        if self.corpus.scene.grid_size != self.model.grid_size {
            return Err(Error::Config("corpus.scene.grid_size must equal model.grid_size".into()));
        }
        if let TokenSelect::TopK(0) = self.capture.token_select {
            return Err(Error::Config("capture.token_select top-k must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Hash of the canonical (compact, declaration-ordered) encoding, so
    /// whitespace, key order and omitted defaults do not change it.
    pub fn hash(&self) -> String {
        hash_json(self)
    }

    pub fn build_model(&self) -> Result<Model> {
        let reg = self.heads.registry.clone().unwrap_or_else(default_registry);
        let specs = if self.heads.spatial_detune == 1.0 { reg } else { detune(&reg, self.heads.spatial_detune) };
        build_model(self.model.clone(), &specs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn hash_ignores_layout_and_defaults() {
        let a = RunConfig::from_json(r#"{"probe": {"epochs": 5}, "intervention": {"alpha": 0.2}}"#).unwrap();
        let b = RunConfig::from_json("{\n  \"intervention\": {\"alpha\": 0.2},\n  \"probe\": {\"epochs\": 5, \"seed\": 0}\n}")
            .unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), RunConfig::default().hash());
    }

    #[test]
    fn round_trips() {
        let mut c = RunConfig::default();
        c.capture.token_select = TokenSelect::Last;
        c.heads.spatial_detune = 0.5;
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn explicit_registry_replaces_default() {
        let mut c = RunConfig::default();
        c.heads.registry = Some(default_registry()[..1].to_vec());
        let c = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(c.build_model().unwrap().planted.len(), 1);
        assert!(!RunConfig::default().to_json().contains("registry"));
    }

    #[test]
    fn errors_name_the_field() {
        let e = RunConfig::from_json(r#"{"probe": {"epochz": 3}}"#).unwrap_err();
        assert!(e.to_string().contains("epochz"), "{e}");
        let e = RunConfig::from_json(r#"{"intervention": {"epsilon": 0}}"#).unwrap_err();
        assert!(e.to_string().contains("intervention.epsilon"), "{e}");
        let e = RunConfig::from_json(r#"{"model": {"embed_dim": "x"}}"#).unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }
}
