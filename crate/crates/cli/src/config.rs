//! Per-command run configurations. Each is read from an optional JSON file
//! and then overridden by command-line flags.

use std::path::{Path, PathBuf};

use blindguard_core::detection::DEFAULT_BUDGET;
use blindguard_core::embedding::EmbeddingProviderSpec;
use blindguard_core::graph::TopologyKind;
use blindguard_core::sim::{AttackKind, DefenseKind, EvalConfig, SimConfig};
use blindguard_core::training::TrainConfig;
use blindguard_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackDistribution {
    pub kind: AttackKind,
    pub n_attackers: usize,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusRunConfig {
    pub count: usize,
    pub n_agents: usize,
    pub topologies: Vec<TopologyKind>,
    pub provider: EmbeddingProviderSpec,
    pub seed: u64,
    /// When set, graphs carry attackers and ground-truth labels.
    pub attack: Option<AttackDistribution>,
}

impl Default for CorpusRunConfig {
    fn default() -> Self {
        CorpusRunConfig {
            count: 200,
            n_agents: 10,
            topologies: TopologyKind::GENERATED.to_vec(),
            provider: EmbeddingProviderSpec::default(),
            seed: 0,
            attack: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub corpus: Option<PathBuf>,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectRunConfig {
    pub corpus: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub k: usize,
}

impl Default for DetectRunConfig {
    fn default() -> Self {
        DetectRunConfig {
            corpus: None,
            model: None,
            k: DEFAULT_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateRunConfig {
    pub topology: TopologyKind,
    pub n_agents: usize,
    pub attack: Option<AttackDistribution>,
    pub defense: DefenseKind,
    pub model: Option<PathBuf>,
    pub task_index: u64,
    pub seed: u64,
    pub sim: SimConfig,
}

impl Default for SimulateRunConfig {
    fn default() -> Self {
        SimulateRunConfig {
            topology: TopologyKind::Random,
            n_agents: 10,
            attack: Some(AttackDistribution {
                kind: AttackKind::PromptInjection,
                n_attackers: 3,
                strength: 0.9,
            }),
            defense: DefenseKind::None,
            model: None,
            task_index: 0,
            seed: 0,
            sim: SimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateRunConfig {
    pub model: Option<PathBuf>,
    pub eval: EvalConfig,
}

/// The config in `path`, or the defaults when no file is given.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
