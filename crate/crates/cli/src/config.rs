use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cams_core::aggregators::{AggregatorKind, RasaParams};
use cams_core::llm::LlmEnsembleConfig;
use cams_core::metrics::MetricKind;
use cams_core::pipeline::{default_selections, ResourceSelection};
use cams_core::WorkerId;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    /// The store file already holds every vector; nothing is embedded.
    Store,
    Precomputed,
    Http,
    Hashed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub provider: ProviderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_retries")]
    pub retries: usize,
    #[serde(default)]
    pub normalize: bool,
}

fn default_batch() -> usize {
    64
}

fn default_retries() -> usize {
    2
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            provider: ProviderKind::Store,
            path: None,
            url: None,
            dim: None,
            batch_size: default_batch(),
            retries: default_retries(),
            normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub la_counts: Vec<usize>,
    /// Explicit L.A. worker lists keyed by count, overriding the nested defaults.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub subsets: BTreeMap<usize, Vec<WorkerId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset files; each may hold one or several roles over the same instances.
    pub datasets: Vec<PathBuf>,
    /// Embedding store file; defaults to `<out>/embeddings.camsemb`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store: Option<PathBuf>,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm: Option<LlmEnsembleConfig>,
    #[serde(default = "default_selections")]
    pub selections: Vec<ResourceSelection>,
    #[serde(default = "all_aggregators")]
    pub aggregators: Vec<AggregatorKind>,
    #[serde(default = "all_metrics")]
    pub metrics: Vec<MetricKind>,
    #[serde(default)]
    pub rasa: RasaParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    /// Row label in report tables.
    #[serde(default = "default_label")]
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

fn all_aggregators() -> Vec<AggregatorKind> {
    AggregatorKind::ALL.to_vec()
}

fn all_metrics() -> Vec<MetricKind> {
    MetricKind::ALL.to_vec()
}

fn default_label() -> String {
    "data".into()
}

fn absolutize(base: &Path, p: &Path) -> PathBuf {
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    std::path::absolute(&joined).unwrap_or(joined)
}

impl RunConfig {
    pub fn from_json_str(json: &str) -> Result<Self, CliError> {
        serde_json::from_str(json).map_err(|e| CliError::Validation(format!("run config: {e}")))
    }

    /// Reads the config and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let raw = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json_str(&raw)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in self.datasets.iter_mut() {
            *p = absolutize(base, p);
        }
        if let Some(p) = self.store.as_mut() {
            *p = absolutize(base, p);
        }
        if let Some(p) = self.embedding.path.as_mut() {
            *p = absolutize(base, p);
        }
        if let Some(p) = self.out.as_mut() {
            *p = absolutize(base, p);
        }
        if let Some(dir) = self.llm.as_mut().and_then(|l| l.cache_dir.as_mut()) {
            *dir = absolutize(base, dir);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        if self.datasets.is_empty() {
            return bad("config lists no datasets".into());
        }
        if let Some(p) = self.datasets.iter().find(|p| !p.is_file()) {
            return bad(format!("dataset {} does not exist", p.display()));
        }
        if self.selections.is_empty() || self.aggregators.is_empty() {
            return bad("selections and aggregators must be non-empty".into());
        }
        if let Some(s) = self.selections.iter().find(|s| s.is_empty()) {
            return bad(format!("empty selection {s:?}"));
        }
        self.rasa.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        let e = &self.embedding;
        match e.provider {
            ProviderKind::Precomputed if e.path.as_ref().is_none_or(|p| !p.is_file()) => {
                return bad("precomputed embeddings need an existing `path`".into())
            }
            ProviderKind::Http if e.url.is_none() => return bad("http embeddings need a `url`".into()),
            ProviderKind::Hashed if e.dim.is_none_or(|d| d == 0) => {
                return bad("hashed embeddings need a positive `dim`".into())
            }
            _ => {}
        }
        if e.batch_size == 0 {
            return bad("embedding batch_size must be positive".into());
        }
        if let Some(llm) = &self.llm {
            llm.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        }
        if let Some(sweep) = &self.sweep {
            if sweep.la_counts.is_empty() {
                return bad("sweep.la_counts must be non-empty".into());
            }
            if sweep.la_counts.contains(&0) {
                return bad("sweep.la_counts must be positive".into());
            }
            for (count, workers) in &sweep.subsets {
                if workers.len() != *count {
                    return bad(format!("sweep subset for {count} lists {} workers", workers.len()));
                }
            }
        }
        Ok(())
    }
}
