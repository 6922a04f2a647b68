use std::path::{Path, PathBuf};

use serde::Deserialize;

use clonelm::eval::EvalOptions;
use clonelm::{Family, GenerationConfig, ModelConfig, TrainingConfig};

/// Model shape; unset fields take the family defaults. The vocabulary size
/// always comes from the learned vocabulary.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub family: Family,
    pub embedding_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub num_layers: Option<usize>,
    pub num_heads: Option<usize>,
    pub context_length: Option<usize>,
    pub init_scale: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            family: Family::Gru,
            embedding_dim: None,
            hidden_dim: None,
            num_layers: None,
            num_heads: None,
            context_length: None,
            init_scale: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, vocab_size: usize) -> ModelConfig {
        let mut c = match self.family {
            Family::Gru => ModelConfig::gru(vocab_size),
            Family::Transformer => ModelConfig::transformer(vocab_size),
        };
        c.embedding_dim = self.embedding_dim.unwrap_or(c.embedding_dim);
        c.hidden_dim = self.hidden_dim.unwrap_or(c.hidden_dim);
        c.num_layers = self.num_layers.unwrap_or(c.num_layers);
        c.num_heads = self.num_heads.unwrap_or(c.num_heads);
        c.context_length = self.context_length.unwrap_or(c.context_length);
        c.init_scale = self.init_scale.unwrap_or(c.init_scale);
        c
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Root of the Java sources, one sub-folder per functionality.
    pub source_dir: Option<PathBuf>,
    /// References TSV (clone rows and optionally pair rows).
    pub refs: Option<PathBuf>,
    /// Extra pair rows, if kept in a separate file.
    pub pairs: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BpeSection {
    pub num_merges: usize,
}

impl Default for BpeSection {
    fn default() -> Self {
        BpeSection { num_merges: 10_000 }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Propagated to the split, training, evaluation and generation seeds.
    pub seed: u64,
    pub paths: Paths,
    pub bpe: BpeSection,
    pub model: ModelSection,
    pub training: TrainingConfig,
    pub generation: GenerationConfig,
    pub eval: EvalOptions,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
    }

    /// Copies the global seed into every seeded section.
    pub fn propagate_seed(&mut self) {
        self.training.seed = self.seed;
        self.generation.seed = self.seed;
    }
}
