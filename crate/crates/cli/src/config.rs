use std::collections::HashSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use mixsep::pipeline::PipelineConfig;
use serde::{Deserialize, Serialize};

/// One recording: a multichannel WAV plus its frame-level embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub id: String,
    pub audio: PathBuf,
    pub embeddings: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub inputs: Vec<InputSpec>,
    pub output_dir: PathBuf,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    /// Expected embedding dimension; any dimension is accepted when unset.
    #[serde(default)]
    pub embedding_dim: Option<usize>,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

fn default_jobs() -> usize {
    1
}

impl RunConfig {
    /// Parses, resolves relative paths against the config's directory and
    /// validates.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for input in &mut cfg.inputs {
            input.audio = resolve(base, &input.audio);
            input.embeddings = resolve(base, &input.embeddings);
        }
        cfg.output_dir = resolve(base, &cfg.output_dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.inputs.is_empty() {
            bail!("config lists no inputs");
        }
        if self.jobs == 0 {
            bail!("jobs must be at least 1");
        }
        let mut seen = HashSet::new();
        for input in &self.inputs {
            if input.id.is_empty() || input.id.contains(['/', '\\']) || input.id.starts_with('.') {
                bail!("input id {:?} is not a plain file name", input.id);
            }
            if !seen.insert(&input.id) {
                bail!("duplicate input id {:?}", input.id);
            }
        }
        if self.embedding_dim == Some(0) {
            bail!("embedding_dim must be positive");
        }
        self.pipeline.validate()?;
        Ok(())
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
