use std::path::{Path, PathBuf};

use m2cl_core::config as defaults;
use m2cl_core::context::SelectionMode;
use m2cl_core::engine::DiscrepancyMetric;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Mock,
    Http,
}

/// Everything needed to reproduce a run. Loaded from JSON; CLI flags override.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n_agents: usize,
    pub max_rounds: usize,
    pub beta: f64,
    pub seed: u64,
    pub pool_path: Option<PathBuf>,
    pub problems_path: Option<PathBuf>,
    pub backend: Backend,
    pub endpoint: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub timeout_secs: f64,
    pub max_retries: usize,
    pub output_dir: PathBuf,
    pub training_epochs: usize,
    pub batch: usize,
    pub lr_context: f64,
    pub lr_alpha: f64,
    pub alpha_max: f64,
    pub train_fraction: f64,
    pub d_model: usize,
    pub n_tokens: usize,
    pub scale_dim: usize,
    pub pool_size: usize,
    pub selection: SelectionMode,
    pub discrepancy: DiscrepancyMetric,
    pub decode_k: usize,
    /// Consensus-mock peer weight.
    pub gamma: f64,
    /// Consensus-mock noise std per embedding entry.
    pub noise: f64,
    /// Parallel problems during `discuss`; 0 uses every core.
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_agents: defaults::N_AGENTS,
            max_rounds: defaults::MAX_ROUNDS,
            beta: defaults::BETA,
            seed: 0,
            pool_path: None,
            problems_path: None,
            backend: Backend::Mock,
            endpoint: None,
            model: "default".into(),
            temperature: 0.0,
            timeout_secs: 60.0,
            max_retries: 3,
            output_dir: PathBuf::from("runs/latest"),
            training_epochs: defaults::TRAINING_EPOCHS,
            batch: defaults::BATCH_SIZE,
            lr_context: defaults::LR_CONTEXT,
            lr_alpha: defaults::LR_ALPHA,
            alpha_max: defaults::ALPHA_MAX,
            train_fraction: defaults::TRAIN_FRACTION,
            d_model: defaults::D_MODEL,
            n_tokens: defaults::N_TOKENS,
            scale_dim: defaults::SCALE_DIM,
            pool_size: defaults::POOL_SIZE,
            selection: SelectionMode::Greedy,
            discrepancy: DiscrepancyMetric::Activation,
            decode_k: 1,
            gamma: defaults::MOCK_GAMMA,
            noise: 0.0,
            jobs: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Validation(msg));
        if self.n_agents < 2 {
            return bad(format!("n_agents must be >= 2, got {}", self.n_agents));
        }
        if self.max_rounds < 1 {
            return bad("max_rounds must be >= 1".into());
        }
        if !(self.beta >= 0.0) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if self.d_model == 0 || self.n_tokens == 0 || self.scale_dim == 0 || self.batch == 0 || self.decode_k == 0 {
            return bad("d_model, n_tokens, scale_dim, batch and decode_k must be positive".into());
        }
        if !(self.lr_context > 0.0) || !(self.lr_alpha > 0.0) || !(self.alpha_max > 0.0) {
            return bad("learning rates and alpha_max must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad(format!("train_fraction must lie in (0, 1], got {}", self.train_fraction));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(self.noise >= 0.0) {
            return bad("gamma must lie in [0, 1] and noise must be >= 0".into());
        }
        if self.backend == Backend::Http && self.endpoint.as_deref().is_none_or(|e| e.trim().is_empty()) {
            return bad("backend http requires an endpoint".into());
        }
        Ok(())
    }

    /// Number of problems used for training: the leading `ceil(train_fraction * count)`.
    pub fn train_count(&self, n_problems: usize) -> usize {
        ((self.train_fraction * n_problems as f64).ceil() as usize).clamp(1, n_problems.max(1))
    }

    pub fn pool_path(&self) -> Result<&Path, CliError> {
        self.pool_path
            .as_deref()
            .ok_or_else(|| CliError::Validation("no pool given (--pool or pool_path)".into()))
    }

    pub fn problems_path(&self) -> Result<&Path, CliError> {
        self.problems_path
            .as_deref()
            .ok_or_else(|| CliError::Validation("no problems given (--problems or problems_path)".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), c);
        let partial: RunConfig = serde_json::from_str(r#"{"n_agents": 3}"#).unwrap();
        assert_eq!(partial.n_agents, 3);
        assert_eq!(partial.max_rounds, 8);
        assert!(serde_json::from_str::<RunConfig>(r#"{"agents": 3}"#).is_err());
    }

    #[test]
    fn http_needs_endpoint() {
        let c = RunConfig {
            backend: Backend::Http,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn train_split() {
        let c = RunConfig::default();
        assert_eq!(c.train_count(20), 4);
        assert_eq!(c.train_count(21), 5);
        assert_eq!(c.train_count(1), 1);
    }
}
