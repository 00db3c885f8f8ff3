//! Pipeline configuration: TOML file, `SELFCITE_*` environment overrides,
//! then command-line flags, in increasing precedence.
//!
//! Environment variables map onto the key tree with `__` as the separator:
//! `SELFCITE_RERANK__N=5` sets `rerank.n`, `SELFCITE_SEED=7` sets `seed`.
//! Values are parsed as TOML scalars when possible and fall back to strings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contextcite::{ExtractionConfig, DEFAULT_EPSILON, DEFAULT_SFT_THRESHOLD};
use crate::prefs::{Window, DEFAULT_TRUNCATION_BUDGET};
use crate::rerank::RerankConfig;
use crate::segmenter::LanguageHint;

use super::PipelineError;

pub const ENV_PREFIX: &str = "SELFCITE_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    #[default]
    Oracle,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerSection {
    pub kind: ScorerKind,
    pub endpoint: Option<String>,
    pub oracle_spec_path: Option<PathBuf>,
    /// Bearer token; never written to manifests.
    #[serde(skip_serializing)]
    pub auth_token: Option<String>,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub max_in_flight: usize,
}

impl Default for ScorerSection {
    fn default() -> Self {
        Self {
            kind: ScorerKind::Oracle,
            endpoint: None,
            oracle_spec_path: None,
            auth_token: None,
            timeout_secs: 60.0,
            max_retries: 3,
            max_in_flight: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BalanceSection {
    pub window_min: usize,
    pub window_max: usize,
}

impl Default for BalanceSection {
    fn default() -> Self {
        let w = Window::default();
        Self {
            window_min: w.min,
            window_max: w.max,
        }
    }
}

impl BalanceSection {
    pub fn window(&self) -> Window {
        Window {
            min: self.window_min,
            max: self.window_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TruncationSection {
    pub budget_tokens: usize,
}

impl Default for TruncationSection {
    fn default() -> Self {
        Self {
            budget_tokens: DEFAULT_TRUNCATION_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbSection {
    pub shift_min: usize,
    pub shift_max: usize,
}

impl Default for PerturbSection {
    fn default() -> Self {
        Self {
            shift_min: 3,
            shift_max: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextCiteSection {
    pub calls: usize,
    pub lambda: f64,
    pub epsilon: f64,
}

impl Default for ContextCiteSection {
    fn default() -> Self {
        Self {
            calls: 256,
            lambda: 0.01,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftSection {
    pub threshold: f64,
}

impl Default for SftSection {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_SFT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentSection {
    pub language: LanguageHint,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IoSection {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Secondary output: audit (rerank) or weights (contextcite).
    pub aux_output: Option<PathBuf>,
    /// Candidate file or sampling endpoint URL.
    pub candidates: Option<String>,
}

/// Fully resolved configuration for one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// 0 means one worker per logical core.
    pub workers: usize,
    pub scorer: ScorerSection,
    pub rerank: RerankConfig,
    pub balance: BalanceSection,
    pub truncation: TruncationSection,
    pub extraction: ExtractionConfig,
    pub contextcite: ContextCiteSection,
    pub perturb: PerturbSection,
    pub sft: SftSection,
    pub segment: SegmentSection,
    pub io: IoSection,
}

impl PipelineConfig {
    /// Builds a config from an optional TOML file, environment overrides and
    /// flag overrides (`(dotted.key, value)` pairs; `None` removes the key).
    pub fn resolve<I>(
        file: Option<&Path>,
        env: I,
        flags: &[(String, Option<toml::Value>)],
    ) -> Result<Self, PipelineError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut tree = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    PipelineError::Config(format!("cannot read {}: {e}", path.display()))
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        let mut env: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        env.sort();
        for (key, value) in env {
            let path: Vec<String> = key[ENV_PREFIX.len()..]
                .split("__")
                .map(str::to_lowercase)
                .collect();
            set_path(&mut tree, &path, parse_scalar(&value))?;
        }
        for (key, value) in flags {
            let path: Vec<String> = key.split('.').map(String::from).collect();
            match value {
                Some(v) => set_path(&mut tree, &path, v.clone())?,
                None => unset_path(&mut tree, &path),
            }
        }
        let cfg: Self = toml::Value::Table(tree)
            .try_into()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::Config(m));
        self.rerank.validate().or_else(err)?;
        self.extraction.validate().or_else(err)?;
        match self.scorer.kind {
            ScorerKind::Oracle if self.scorer.endpoint.is_some() => {
                return err("scorer.kind = oracle but scorer.endpoint is set".into())
            }
            ScorerKind::Http if self.scorer.oracle_spec_path.is_some() => {
                return err("scorer.kind = http but scorer.oracle_spec_path is set".into())
            }
            _ => {}
        }
        if self.balance.window_min > self.balance.window_max {
            return err("balance.window_min > balance.window_max".into());
        }
        if self.perturb.shift_min > self.perturb.shift_max {
            return err("perturb.shift_min > perturb.shift_max".into());
        }
        if self.truncation.budget_tokens == 0 {
            return err("truncation.budget_tokens must be >= 1".into());
        }
        if self.contextcite.calls < 2 {
            return err("contextcite.calls must be >= 2".into());
        }
        if !(self.contextcite.lambda.is_finite() && self.contextcite.lambda >= 0.0) {
            return err("contextcite.lambda must be >= 0".into());
        }
        if !(self.contextcite.epsilon > 0.0 && self.contextcite.epsilon < 0.5) {
            return err("contextcite.epsilon must be in (0, 0.5)".into());
        }
        if !(0.0..=1.0).contains(&self.sft.threshold) {
            return err("sft.threshold must be in [0, 1]".into());
        }
        if !(self.scorer.timeout_secs.is_finite() && self.scorer.timeout_secs > 0.0) {
            return err("scorer.timeout_secs must be > 0".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(tree: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), PipelineError> {
    let (last, parents) = path
        .split_last()
        .ok_or_else(|| PipelineError::Config("empty override key".into()))?;
    let mut node = tree;
    for p in parents {
        let entry = node
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| PipelineError::Config(format!("`{p}` is not a table")))?;
    }
    node.insert(last.clone(), value);
    Ok(())
}

fn unset_path(tree: &mut toml::Table, path: &[String]) {
    let Some((last, parents)) = path.split_last() else {
        return;
    };
    let mut node = tree;
    for p in parents {
        match node.get_mut(p).and_then(toml::Value::as_table_mut) {
            Some(t) => node = t,
            None => return,
        }
    }
    node.remove(last);
}
