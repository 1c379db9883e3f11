//! Run configuration and the on-disk workspace layout.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spaceedit::generator::GeneratorConfig;
use spaceedit::inversion::InversionConfig;
use spaceedit::lgie::{EmbedderConfig, MapperConfig, ZeroShotConfig};
use spaceedit::training::TrainConfig;

/// Overrides the configured workspace directory.
pub const WORKSPACE_ENV: &str = "SPACEDIT_WORKSPACE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_pairs: usize,
    pub resolution: usize,
    /// Directory of base photos; procedural bases when absent.
    pub source_dir: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_pairs: 2000,
            resolution: 32,
            source_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LgieConfig {
    pub embedder: EmbedderConfig,
    pub mapper: MapperConfig,
    pub zero_shot: ZeroShotConfig,
}

impl Default for LgieConfig {
    fn default() -> Self {
        Self {
            embedder: EmbedderConfig::default(),
            mapper: MapperConfig::default(),
            zero_shot: ZeroShotConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Held-out pairs scored by `eval`.
    pub eval_pairs: usize,
    pub diversity_inputs: usize,
    pub diversity_samples: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            eval_pairs: 20,
            diversity_inputs: 10,
            diversity_samples: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    pub addr: String,
    pub workers: usize,
    pub queue_depth: usize,
    /// Cluster count shown by the style browser.
    pub clusters: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
            workers: 1,
            queue_depth: 4,
            clusters: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub workspace: PathBuf,
    pub seed: u64,
    pub device: String,
    pub dataset: DatasetConfig,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub inversion: InversionConfig,
    /// Settings for the batch inversions behind the style index.
    pub index_inversion: InversionConfig,
    pub lgie: LgieConfig,
    pub metrics: MetricsConfig,
    pub serve: ServeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let generator = GeneratorConfig::toy(32);
        RunConfig {
            workspace: PathBuf::from("workspace"),
            seed: 0,
            device: "cpu".into(),
            dataset: DatasetConfig::default(),
            generator,
            train: TrainConfig {
                total_images: 24_000,
                checkpoint_interval: 250,
                ..TrainConfig::default()
            },
            inversion: InversionConfig::default(),
            index_inversion: InversionConfig {
                steps: 100,
                initial_lr: 0.01,
                optimize_noise: false,
                ..InversionConfig::default()
            },
            lgie: LgieConfig {
                mapper: MapperConfig {
                    steps: 1500,
                    ..MapperConfig::default()
                },
                ..LgieConfig::default()
            },
            metrics: MetricsConfig::default(),
            serve: ServeConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a JSON config, applies the workspace override and validates.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(ws) = std::env::var_os(WORKSPACE_ENV).filter(|v| !v.is_empty()) {
            cfg.workspace = PathBuf::from(ws);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.device != "cpu" {
            bail!(
                "unsupported device `{}` (only `cpu` is available)",
                self.device
            );
        }
        if self.dataset.resolution != self.generator.resolution {
            bail!(
                "dataset resolution {} differs from generator resolution {}",
                self.dataset.resolution,
                self.generator.resolution
            );
        }
        self.generator.validate()?;
        self.train.validate()?;
        self.inversion.validate()?;
        self.index_inversion.validate()?;
        if self.serve.workers == 0 {
            bail!("serve.workers must be at least 1");
        }
        if self.metrics.diversity_samples < 2 || self.metrics.eval_pairs == 0 {
            bail!("metrics need at least 2 diversity samples and 1 eval pair");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn workspace(&self) -> Workspace {
        Workspace {
            root: self.workspace.clone(),
        }
    }
}

/// `datasets/`, `checkpoints/`, `indexes/`, `sessions/` and `reports/`
/// under one root.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub const DIRS: [&'static str; 5] =
        ["datasets", "checkpoints", "indexes", "sessions", "reports"];

    pub fn create(&self) -> Result<()> {
        for d in Self::DIRS {
            let p = self.root.join(d);
            fs::create_dir_all(&p).with_context(|| format!("creating {}", p.display()))?;
        }
        Ok(())
    }

    pub fn dataset(&self, name: &str) -> PathBuf {
        self.root.join("datasets").join(name)
    }

    pub fn run_dir(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn index(&self, name: &str) -> PathBuf {
        self.root.join("indexes").join(format!("{name}.jsonl"))
    }

    pub fn sessions(&self) -> PathBuf {
        self.root.join("sessions")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"seed": 1, "colour": 2}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"learning_rat": 1}}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"seed": 3}"#).unwrap();
        assert_eq!(c.seed, 3);
    }
}
