//! Declarative run configuration, loadable from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adrpo::toy::TrainParams;
use crate::adrpo::AdrpoConfig;
use crate::gateway::{Backend, Gateway, GatewayConfig};
use crate::memory::DEFAULT_CORE_CAPACITY;
use crate::prompts::PromptSet;
use crate::reward::PenaltyParams;

use super::PipelineError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Root for all pipeline outputs.
    pub out_dir: PathBuf,
    /// Optional prompt template directory overriding the embedded set.
    pub prompts_dir: Option<PathBuf>,
    /// Expert reference token counts for the entry length penalty. Defaults
    /// to the reference trajectory written by `build` under `out_dir`.
    pub reference_tokens: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out_dir: PathBuf::from("out"),
            prompts_dir: None,
            reference_tokens: None,
        }
    }
}

/// Per-role gateway endpoints. The four memory agents share `agent`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewaysConfig {
    pub agent: GatewayConfig,
    pub answer: GatewayConfig,
    pub judge: GatewayConfig,
    pub qa_gen: GatewayConfig,
    pub embed: GatewayConfig,
}

/// Toy-trainer section: training knobs plus environment shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyRunConfig {
    pub train: TrainParams,
    pub vocab: usize,
    pub core_len: usize,
    pub episodic_len: usize,
    pub semantic_len: usize,
    pub procedural_len: usize,
    pub target_token: usize,
    /// Score only the episodic segment (the attribution-sensitive setup).
    pub episodic_only: bool,
}

impl Default for ToyRunConfig {
    fn default() -> Self {
        ToyRunConfig {
            train: TrainParams::default(),
            vocab: 6,
            core_len: 1,
            episodic_len: 2,
            semantic_len: 2,
            procedural_len: 1,
            target_token: 3,
            episodic_only: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Memories retrieved as construction and QA-generation context.
    pub k_construct: usize,
    /// Memories retrieved when answering a question.
    pub k_answer: usize,
    /// Synthetic QA pairs per session (J).
    pub questions_per_session: usize,
    /// Rollouts per session during reward evaluation (N).
    pub rollouts: usize,
    /// Sampling temperature for rollout diversity.
    pub rollout_temperature: f64,
    /// Cosine threshold for reference resolution.
    pub resolve_threshold: f64,
    pub core_capacity_chars: usize,
    pub penalty: PenaltyParams,
    pub adrpo: AdrpoConfig,
    pub paths: PathsConfig,
    pub gateways: GatewaysConfig,
    pub toy: ToyRunConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            k_construct: 20,
            k_answer: 10,
            questions_per_session: 5,
            rollouts: 8,
            rollout_temperature: 1.0,
            resolve_threshold: crate::codec::DEFAULT_RESOLVE_THRESHOLD,
            core_capacity_chars: DEFAULT_CORE_CAPACITY,
            penalty: PenaltyParams::default(),
            adrpo: AdrpoConfig::default(),
            paths: PathsConfig::default(),
            gateways: GatewaysConfig::default(),
            toy: ToyRunConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load_toml(path: &Path) -> Result<RunConfig, PipelineError> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.k_construct == 0 || self.k_answer == 0 {
            return Err(PipelineError::Config("k_construct and k_answer must be positive".into()));
        }
        if self.questions_per_session == 0 {
            return Err(PipelineError::Config("questions_per_session must be positive".into()));
        }
        if self.rollouts == 0 {
            return Err(PipelineError::Config("rollouts must be positive".into()));
        }
        self.penalty.validate().map_err(PipelineError::Config)?;
        self.adrpo
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    /// Forces every gateway onto the deterministic hash-mock backend seeded
    /// from the run seed. Used by `--mock` and the offline test suites.
    pub fn with_mock_backends(mut self) -> RunConfig {
        for gw in [
            &mut self.gateways.agent,
            &mut self.gateways.answer,
            &mut self.gateways.judge,
            &mut self.gateways.qa_gen,
            &mut self.gateways.embed,
        ] {
            gw.backend = Backend::MockHash;
            gw.mock_seed = self.seed;
        }
        self
    }
}

/// Constructed gateways plus prompts and config: everything a pipeline stage
/// needs.
pub struct PipelineCtx {
    pub cfg: RunConfig,
    pub prompts: PromptSet,
    pub agent: Gateway,
    pub answer: Gateway,
    pub judge: Gateway,
    pub qa_gen: Gateway,
    pub embed: Gateway,
}

impl PipelineCtx {
    pub fn new(cfg: RunConfig) -> Result<PipelineCtx, PipelineError> {
        cfg.validate()?;
        let prompts = match &cfg.paths.prompts_dir {
            Some(dir) => PromptSet::load_dir(dir)?,
            None => PromptSet::embedded(),
        };
        Ok(PipelineCtx {
            prompts,
            agent: Gateway::new(cfg.gateways.agent.clone())?,
            answer: Gateway::new(cfg.gateways.answer.clone())?,
            judge: Gateway::new(cfg.gateways.judge.clone())?,
            qa_gen: Gateway::new(cfg.gateways.qa_gen.clone())?,
            embed: Gateway::new(cfg.gateways.embed.clone())?,
            cfg,
        })
    }

    /// Mock context rooted at `out_dir`, the standard test setup.
    pub fn mock(out_dir: &Path, seed: u64) -> Result<PipelineCtx, PipelineError> {
        let cfg = RunConfig {
            seed,
            paths: PathsConfig {
                out_dir: out_dir.to_path_buf(),
                ..PathsConfig::default()
            },
            ..RunConfig::default()
        }
        .with_mock_backends();
        PipelineCtx::new(cfg)
    }
}
