//! The run configuration file: one JSON document describing the model, the
//! alphabet, training, the data and where outputs go.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use srf_core::ctc::LabelAlphabet;
use srf_core::data::{Normalization, SyntheticConfig};
use srf_core::model::ModelConfig;
use srf_core::trainer::TrainConfig;

use crate::error::{CliError, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphabetConfig {
    pub symbols: Vec<String>,
    #[serde(default)]
    pub blank: usize,
    #[serde(default)]
    pub eos: Option<usize>,
    #[serde(default)]
    pub padding: Option<usize>,
}

impl AlphabetConfig {
    pub fn build(&self) -> Result<LabelAlphabet> {
        Ok(LabelAlphabet::new(self.symbols.clone(), self.blank, self.eos, self.padding)?)
    }
}

/// A feature file and its transcripts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSplit {
    pub features: PathBuf,
    pub transcripts: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileData {
    pub train: FileSplit,
    #[serde(default)]
    pub valid: Option<FileSplit>,
    #[serde(default)]
    pub test: Option<FileSplit>,
}

/// Generated corpus, split in order into train, valid and test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub generator: SyntheticConfig,
    pub train: usize,
    pub valid: usize,
    #[serde(default)]
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic(SyntheticData),
    Files(FileData),
}

fn default_hop() -> f64 {
    10.0
}

fn default_win() -> f64 {
    25.0
}

fn default_delta() -> usize {
    4
}

/// Frame timing of the input features, used for delays and real-time
/// factors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingConfig {
    #[serde(default = "default_hop")]
    pub hop_ms: f64,
    #[serde(default = "default_win")]
    pub win_ms: f64,
    /// Frames of context consumed by delta features on each side.
    #[serde(default = "default_delta")]
    pub delta_frames: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            hop_ms: default_hop(),
            win_ms: default_win(),
            delta_frames: default_delta(),
        }
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_beam() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub model: ModelConfig,
    pub alphabet: AlphabetConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub timing: TimingConfig,
    /// Default beam width of `decode` and `evaluate`.
    #[serde(default = "default_beam")]
    pub beam: usize,
}

/// Independent seeds derived from the run seed, one per purpose.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedPurpose {
    Corpus,
    Init,
    Train,
}

impl RunConfig {
    pub fn derived_seed(&self, purpose: SeedPurpose) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        // Far above the per-epoch streams used during training.
        rng.set_stream((1 << 63) + purpose as u64);
        rng.next_u64()
    }

    pub fn init_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.derived_seed(SeedPurpose::Init))
    }

    /// Checks every field and their cross-references; no data is read.
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::config(
                "version",
                format!("expected {CONFIG_VERSION}, got {}", self.version),
            ));
        }
        self.model.validate()?;
        let alphabet = self.alphabet.build()?;
        self.model.validate_outputs(alphabet.size(), alphabet.padding())?;
        self.train.validate()?;
        if self.beam == 0 {
            return Err(CliError::config("beam", "must be at least 1"));
        }
        let t = &self.timing;
        if !(t.hop_ms > 0.0 && t.hop_ms.is_finite() && t.win_ms >= 0.0 && t.win_ms.is_finite()) {
            return Err(CliError::config("timing", "hop_ms must be positive and win_ms non-negative"));
        }
        if let DataConfig::Synthetic(s) = &self.data {
            let g = &s.generator;
            g.validate()?;
            let cap = &self.model.capsulation;
            if g.feature_dim != cap.input_dim {
                return Err(CliError::config(
                    "data.synthetic.generator.feature_dim",
                    format!("expected {} (model.capsulation.input_dim), got {}", cap.input_dim, g.feature_dim),
                ));
            }
            if g.time_stride != cap.time_stride() {
                return Err(CliError::config(
                    "data.synthetic.generator.time_stride",
                    format!("expected {} (front-end time stride), got {}", cap.time_stride(), g.time_stride),
                ));
            }
            let labels: Vec<usize> = (1..=g.symbols).collect();
            alphabet.check_target(&labels).map_err(|e| {
                CliError::config(
                    "alphabet",
                    format!("synthetic labels 1..={} must be ordinary symbols: {e}", g.symbols),
                )
            })?;
            if s.train == 0 {
                return Err(CliError::config("data.synthetic.train", "must be at least 1"));
            }
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let DataConfig::Files(f) = &mut self.data {
            for split in [Some(&mut f.train), f.valid.as_mut(), f.test.as_mut()].into_iter().flatten() {
                fix(&mut split.features);
                fix(&mut split.transcripts);
            }
        }
    }

    /// Parses a configuration document, applies `key=value` overrides and
    /// validates the result. Relative paths are taken relative to `base`.
    pub fn from_json(text: &str, overrides: &[String], base: &Path) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| CliError::config("config", e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| CliError::config("config", e.to_string()))?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, overrides, base)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }
}

/// Sets the scalar at a dotted path, e.g. `train.epochs=3` or
/// `model.layers.0.method=dr`. The value is read as JSON and falls back to
/// a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {assignment:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    if value.is_object() || value.is_array() {
        return Err(CliError::config(path, "only scalar fields can be overridden"));
    }
    let keys: Vec<&str> = path.split('.').collect();
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert((*key).to_owned(), value);
                    return Ok(());
                }
                map.get_mut(*key)
                    .ok_or_else(|| CliError::config(path, format!("no field {key:?}")))?
            }
            Value::Array(items) => {
                let idx: usize = key
                    .parse()
                    .map_err(|_| CliError::config(path, format!("{key:?} is not an index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| CliError::config(path, format!("index {idx} outside 0..{len}")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(CliError::config(path, format!("{key:?} is inside a scalar"))),
        };
    }
    unreachable!("the loop returns on the last key")
}
