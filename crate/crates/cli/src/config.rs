use std::fs;
use std::path::{Path, PathBuf};

use keyseg_core::ingest::View;
use keyseg_core::refine::RefineConfig;
use keyseg_core::synth::SynthConfig;
use keyseg_core::trainer::TrainConfig;
use keyseg_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldSettings {
    pub k: usize,
}

impl Default for FoldSettings {
    fn default() -> Self {
        FoldSettings { k: 5 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSettings {
    /// Default dataset manifest for `train` and `cv`.
    pub manifest: Option<PathBuf>,
    /// Default output directory for `synth`, `build` and `cv`.
    pub out_dir: Option<PathBuf>,
}

/// Everything a run needs, read from one JSON document. Unknown keys are
/// errors at every level.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. When set (here or with `--seed`) it replaces the seeds in
    /// the `synth` and `train` sections and seeds the fold assignment.
    pub seed: Option<u64>,
    pub view: Option<View>,
    pub model: Option<String>,
    pub refine: RefineConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub folds: FoldSettings,
    /// Patients withheld from cross-validation and reported as a test set.
    pub test_patients: Vec<String>,
    pub paths: PathSettings,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io {
                context: format!("reading {}", path.display()),
                source: e,
            })?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Loads `path`, or the defaults when no file is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        self.refine.validate()?;
        self.synth.validate()?;
        self.train.validate()?;
        if self.folds.k < 2 {
            return Err(Error::Config(format!("folds.k must be at least 2, got {}", self.folds.k)));
        }
        Ok(())
    }

    /// Applies the master seed (command line first, then config).
    pub fn apply_seed(&mut self, cli_seed: Option<u64>) {
        if let Some(s) = cli_seed.or(self.seed) {
            self.seed = Some(s);
            self.synth.seed = s;
            self.train.seed = s;
        }
    }

    pub fn fold_seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }
}
