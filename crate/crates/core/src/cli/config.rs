use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::corpus::StageCategory;
use crate::error::{Error, Result};
use crate::memory;
use crate::pipelines::{Method, RagQueryMode};
use crate::retrieval::{DEFAULT_K, DEFAULT_MAX_CHARS};

/// Fully resolved configuration for one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub category: Option<StageCategory>,
    pub method: Option<Method>,
    pub corpus_path: Option<PathBuf>,
    pub guideline_path: Option<PathBuf>,
    /// Prebuilt chunk index; built from the guideline on the fly when absent.
    pub index_path: Option<PathBuf>,
    pub k: usize,
    pub threshold: f64,
    pub n_train: usize,
    pub n_splits: usize,
    pub train_size: usize,
    pub base_seed: u64,
    pub output_dir: PathBuf,
    pub script_path: Option<PathBuf>,
    pub templates_dir: Option<PathBuf>,
    pub rag_query_mode: RagQueryMode,
    pub chat_model: String,
    pub embed_model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_in_flight: usize,
    pub schema_retries: u32,
    pub constrained_decoding: bool,
    pub chunk_max_chars: usize,
    pub chunk_overlap: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            category: None,
            method: None,
            corpus_path: None,
            guideline_path: None,
            index_path: None,
            k: DEFAULT_K,
            threshold: 80.0,
            n_train: 40,
            n_splits: 8,
            train_size: 100,
            base_seed: 0,
            output_dir: PathBuf::from("out"),
            script_path: None,
            templates_dir: None,
            rag_query_mode: RagQueryMode::Guideline,
            chat_model: "mistralai/Mixtral-8x7B-Instruct-v0.1".into(),
            embed_model: "nvidia/NV-Embed-v2".into(),
            temperature: 0.0,
            max_tokens: 2048,
            max_in_flight: crate::llm::DEFAULT_MAX_IN_FLIGHT,
            schema_retries: crate::llm::DEFAULT_SCHEMA_RETRIES,
            constrained_decoding: false,
            chunk_max_chars: DEFAULT_MAX_CHARS,
            chunk_overlap: 0,
        }
    }
}

impl RunConfig {
    /// Layers `overrides` over an optional JSON config file over the defaults.
    ///
    /// A run manifest is also accepted as a config file; its embedded `config`
    /// object is used.
    pub fn resolve(file: Option<&Path>, overrides: Map<String, Value>) -> Result<Self> {
        let Value::Object(mut merged) = serde_json::to_value(RunConfig::default())? else {
            unreachable!("config serializes to an object")
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let value: Value =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let Value::Object(mut obj) = value else {
                return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
            };
            if obj.contains_key("template_hashes") {
                if let Some(Value::Object(inner)) = obj.remove("config") {
                    obj = inner;
                }
            }
            merged.extend(obj);
        }
        merged.extend(overrides);
        let cfg: RunConfig = serde_json::from_value(Value::Object(merged))
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<()> {
        memory::check_threshold(self.threshold).map_err(|e| Error::Config(e.to_string()))?;
        let positive = [
            ("k", self.k),
            ("n_train", self.n_train),
            ("n_splits", self.n_splits),
            ("train_size", self.train_size),
            ("max_in_flight", self.max_in_flight),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::Config(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn category(&self) -> Result<StageCategory> {
        self.category
            .ok_or_else(|| Error::Config("a category is required (--category T|N)".into()))
    }

    pub fn method(&self) -> Result<Method> {
        self.method
            .ok_or_else(|| Error::Config("a method is required (--method)".into()))
    }

    pub fn corpus_path(&self) -> Result<&Path> {
        self.corpus_path
            .as_deref()
            .ok_or_else(|| Error::Config("a corpus is required (--corpus)".into()))
    }

    pub fn guideline_path(&self) -> Result<&Path> {
        self.guideline_path
            .as_deref()
            .ok_or_else(|| Error::Config("a guideline document is required (--guideline)".into()))
    }

    /// Method-specific checks done before any backend is contacted.
    pub fn check_for_method(&self, method: Method) -> Result<()> {
        if method.uses_retrieval() {
            self.guideline_path()?;
        } else if self.guideline_path.is_some() {
            log::warn!("--guideline is ignored by method {method}");
        }
        if method == Method::Kewltm && self.n_train > self.train_size {
            return Err(Error::Config(format!(
                "n_train {} exceeds train_size {}",
                self.n_train, self.train_size
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn overrides(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn defaults() {
        let c = RunConfig::resolve(None, Map::new()).unwrap();
        assert_eq!(
            (c.k, c.threshold, c.n_train, c.n_splits, c.train_size, c.base_seed),
            (5, 80.0, 40, 8, 100, 0)
        );
        assert!(c.category().is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"k": 7, "threshold": 50, "category": "N"}"#).unwrap();
        let c = RunConfig::resolve(Some(&path), overrides(json!({"k": 3}))).unwrap();
        assert_eq!(c.k, 3);
        assert_eq!(c.threshold, 50.0);
        assert_eq!(c.category, Some(StageCategory::N));
    }

    #[test]
    fn manifest_is_a_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let cfg = RunConfig {
            n_train: 12,
            ..RunConfig::default()
        };
        let manifest = json!({"status": "OK", "template_hashes": {}, "config": cfg});
        std::fs::write(&path, manifest.to_string()).unwrap();
        assert_eq!(RunConfig::resolve(Some(&path), Map::new()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::resolve(None, overrides(json!({"threshold": 120.0}))).is_err());
        assert!(RunConfig::resolve(None, overrides(json!({"k": 0}))).is_err());
        assert!(RunConfig::resolve(None, overrides(json!({"bogus": 1}))).is_err());
    }

    #[test]
    fn retrieval_methods_need_guideline() {
        let c = RunConfig::default();
        assert!(matches!(c.check_for_method(Method::Kewrag), Err(Error::Config(_))));
        assert!(c.check_for_method(Method::Zscot).is_ok());
    }
}
