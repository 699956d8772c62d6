//! Run configuration: one TOML file with a section per pipeline stage,
//! plus the override chain used by the command-line tool.
//!
//! A config file never has to exist — every field has a default tuned for
//! the desk-scale setup — and a file may set only the keys it cares about.
//! Unknown keys are rejected so a typo cannot silently fall back to a
//! default. The fully resolved configuration (file merged with overrides)
//! is echoed into each run directory as `resolved-config.toml`, which
//! makes any run reproducible from its artifacts alone.
//!
//! ```toml
//! [backbone]
//! hidden_dim = 64
//! num_layers = 4
//! num_heads = 4
//! ffn_dim = 256
//! max_seq_len = 256
//! ln_eps = 1e-5
//! max_vocab = 4096
//! seed = 11
//!
//! [peft]
//! bottleneck_dim = 16
//! phm_dim = 4
//! lora_rank = 16
//! lora_alpha = 16.0
//!
//! [training]
//! epochs = 4
//! batch_size = 8
//! lr = 0.001
//! seed = 7
//! reset_moments = false
//!
//! [data]
//! train = "corpus/train.jsonl"
//! valid = "corpus/valid.jsonl"
//! test = "corpus/test.jsonl"
//!
//! [output]
//! run_root = "runs"
//!
//! [synth]
//! languages = ["go", "php", "python", "ruby"]
//! train_sizes = [150, 150, 150, 15]
//! valid_sizes = [20, 20, 20, 4]
//! test_sizes = [20, 20, 20, 4]
//! overlap = 0.7
//! seed = 5
//! ```
//!
//! Precedence for the run-directory root, highest first: the `--run-root`
//! flag, the `PEFTLAB_RUN_ROOT` environment variable, `output.run_root`
//! from the file, and finally the built-in default `runs`. Training flags
//! (`--seed`, `--epochs`, `--batch-size`, `--lr`) override the `[training]`
//! section the same way.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::corpus::SynthSpec;
use crate::error::{Error, Result};
use crate::peft::{AdapterKind, AdapterSpec};
use crate::train::TrainPlan;

/// Everything a run needs, resolved from file + overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneSection,
    pub peft: PeftSection,
    pub training: TrainingSection,
    pub data: DataSection,
    pub output: OutputSection,
    /// Recipe for `synth-corpus`; absent unless that command is used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
}

/// Architecture of the frozen decoder. The vocabulary size is not a config
/// key: it is measured from the corpus at pretrain time and travels inside
/// the checkpoint from then on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub ln_eps: f64,
    /// Cap on the vocabulary built from the training split.
    pub max_vocab: usize,
    /// Seed for the backbone's initial parameters.
    pub seed: u64,
}

impl Default for BackboneSection {
    fn default() -> BackboneSection {
        BackboneSection {
            hidden_dim: 64,
            num_layers: 4,
            num_heads: 4,
            ffn_dim: 256,
            max_seq_len: 256,
            ln_eps: 1e-5,
            max_vocab: 4096,
            seed: 11,
        }
    }
}

impl BackboneSection {
    pub fn to_backbone_config(&self, vocab_size: usize) -> BackboneConfig {
        BackboneConfig {
            vocab_size,
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            max_seq_len: self.max_seq_len,
            ln_eps: self.ln_eps,
        }
    }
}

/// Hyperparameters shared by every adapter the run trains; the kind and
/// language come from command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeftSection {
    pub bottleneck_dim: usize,
    pub phm_dim: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for PeftSection {
    fn default() -> PeftSection {
        PeftSection {
            bottleneck_dim: 16,
            phm_dim: 4,
            lora_rank: 16,
            lora_alpha: 16.0,
        }
    }
}

impl PeftSection {
    pub fn to_spec(&self, kind: AdapterKind, language: &str) -> AdapterSpec {
        let mut spec = AdapterSpec::new(kind, language);
        spec.bottleneck_dim = self.bottleneck_dim;
        spec.phm_n = self.phm_dim;
        spec.lora_rank = self.lora_rank;
        spec.lora_alpha = self.lora_alpha;
        spec
    }
}

/// The optimisation schedule. For the adversarial two-phase schedule,
/// `epochs` is the length of *each* phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Start the second adversarial phase with fresh optimizer moments
    /// instead of carrying phase-one state over.
    pub reset_moments: bool,
}

impl Default for TrainingSection {
    fn default() -> TrainingSection {
        TrainingSection {
            epochs: 4,
            batch_size: 8,
            lr: 1e-3,
            seed: 7,
            reset_moments: false,
        }
    }
}

impl TrainingSection {
    pub fn plan(&self) -> TrainPlan {
        TrainPlan {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
        }
    }
}

/// Corpus split files. All optional in the file; each command demands the
/// splits it actually reads and names the missing key in its error.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
}

/// Which corpus split a command should read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn key(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl DataSection {
    /// The configured path for `split`, validated to exist on disk.
    pub fn require(&self, split: Split) -> Result<&Path> {
        let slot = match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        };
        let path = slot.as_deref().ok_or_else(|| {
            Error::Config(format!("data.{} is not set", split.key()))
        })?;
        if !path.is_file() {
            return Err(Error::Config(format!(
                "data.{}: no such file: {}",
                split.key(),
                path.display()
            )));
        }
        Ok(path)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_root: Option<PathBuf>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
}

impl RunConfig {
    /// Read a config file, or produce the all-defaults config when no path
    /// is given.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Fold command-line overrides into the file values.
    pub fn apply(&mut self, ov: &Overrides) {
        if let Some(seed) = ov.seed {
            self.training.seed = seed;
        }
        if let Some(epochs) = ov.epochs {
            self.training.epochs = epochs;
        }
        if let Some(batch) = ov.batch_size {
            self.training.batch_size = batch;
        }
        if let Some(lr) = ov.lr {
            self.training.lr = lr;
        }
    }

    /// The run-directory root after the whole precedence chain. `flag` is
    /// the command-line value and `env` the `PEFTLAB_RUN_ROOT` variable;
    /// both are parameters so the resolution stays a pure function.
    pub fn resolve_run_root(
        &self,
        flag: Option<&Path>,
        env: Option<&str>,
    ) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(e) = env {
            if !e.is_empty() {
                return PathBuf::from(e);
            }
        }
        if let Some(p) = &self.output.run_root {
            return p.clone();
        }
        PathBuf::from("runs")
    }

    /// Serialize for the `resolved-config.toml` echo. Struct field order is
    /// fixed, so equal configs always produce identical bytes.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}

/// Name of the environment variable consulted for the run-directory root.
pub const RUN_ROOT_ENV: &str = "PEFTLAB_RUN_ROOT";
