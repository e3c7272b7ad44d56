//! Experiment plumbing: declarative run configs, environment fingerprints,
//! cost-table reports, the benchmark runner, and reproduction checks against
//! the stored constants.
//!
//! Every run directory gets a manifest with the config hash, the seed, and
//! an environment fingerprint — enough to re-run bit-identically apart from
//! wall times.

pub mod bench;
pub(crate) mod quantities;
pub mod reference;
pub mod reproduce;
pub mod tables;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ArchConfig;
use crate::error::{Error, Result};

pub use bench::{
    run_benchmark, validate_benchmark_json, write_benchmark, BenchCost, BenchmarkResult,
    StageTiming,
};
pub use reference::{ReferenceCell, ReferenceFile, REFERENCE_TOML};
pub use reproduce::{reproduce, CellOutcome, ReproduceReport, REPRODUCE_TARGETS};
pub use tables::{cost_tables, run_cost_tables, CostTable, CostTablesReport, TableEntry};

/// Environment variable naming the root directory for run outputs.
pub const OUTPUT_ROOT_ENV: &str = "MINIVLM_OUT";

/// Where run directories go: `$MINIVLM_OUT`, defaulting to `./runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// Tasks an experiment can name.
pub const EXPERIMENT_TASKS: [&str; 5] = ["pretrain", "caption", "vqa", "nlvr2", "retrieval"];

/// Reference to a network architecture: a built-in preset, a config file,
/// or an inline config (stored as its canonical text form so the reference
/// hashes and serializes like the others).
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelRef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inline: Option<String>,
}

impl ModelRef {
    pub fn from_preset(name: &str) -> ModelRef {
        ModelRef { preset: Some(name.into()), ..ModelRef::default() }
    }

    pub fn from_path(path: impl Into<PathBuf>) -> ModelRef {
        ModelRef { path: Some(path.into()), ..ModelRef::default() }
    }

    pub fn inline(config: &ArchConfig) -> ModelRef {
        ModelRef { inline: Some(config.to_toml()), ..ModelRef::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let set = [self.preset.is_some(), self.path.is_some(), self.inline.is_some()]
            .iter()
            .filter(|&&b| b)
            .count();
        if set != 1 {
            return Err(Error::InvalidConfig(
                "a model reference needs exactly one of `preset`, `path`, or `inline`".into(),
            ));
        }
        Ok(())
    }

    pub fn resolve(&self) -> Result<ArchConfig> {
        self.validate()?;
        if let Some(name) = &self.preset {
            return ArchConfig::preset(name);
        }
        if let Some(path) = &self.path {
            return ArchConfig::load(path);
        }
        ArchConfig::from_toml(self.inline.as_deref().expect("validated"))
    }

    /// Anchor a relative `path` reference at `base` (the config file's
    /// directory) and require the file to exist.
    fn resolve_path_against(&mut self, base: &Path) -> Result<()> {
        if let Some(p) = &mut self.path {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if !p.is_file() {
                return Err(Error::InvalidConfig(format!(
                    "model config file `{}` does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }
}

/// Optional data files a task may need.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct InputPaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
}

impl InputPaths {
    fn entries(&mut self) -> [(&'static str, &mut Option<PathBuf>); 3] {
        [
            ("corpus", &mut self.corpus),
            ("features", &mut self.features),
            ("weights", &mut self.weights),
        ]
    }
}

fn default_repetitions() -> usize {
    5
}
fn default_threads() -> usize {
    1
}

/// Benchmark settings: repetition count and the declared thread count
/// (recorded in the fingerprint; stages within a run are serial).
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct BenchSettings {
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_threads")]
    pub threads: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings { repetitions: default_repetitions(), threads: default_threads() }
    }
}

/// One experiment, declaratively: which networks, which task, which data,
/// which seed. The seed is mandatory — there is no unseeded mode.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub detector: ModelRef,
    pub transformer: ModelRef,
    #[serde(default)]
    pub inputs: InputPaths,
    #[serde(default)]
    pub benchmark: BenchSettings,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file and resolve every relative path against the file's
    /// directory, requiring referenced files to exist. After `load`, the
    /// config carries only absolute, verified paths.
    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let mut cfg = ExperimentConfig::from_toml(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        cfg.resolve_paths(&base)?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("experiment config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !EXPERIMENT_TASKS.contains(&self.task.as_str()) {
            return Err(Error::UnknownTask(format!(
                "{}; valid tasks: {}",
                self.task,
                EXPERIMENT_TASKS.join(", ")
            )));
        }
        self.detector.validate()?;
        self.transformer.validate()?;
        if self.benchmark.repetitions < 3 {
            return Err(Error::InvalidConfig(format!(
                "fewer than 3 benchmark repetitions ({}); the std would be meaningless",
                self.benchmark.repetitions
            )));
        }
        if self.benchmark.threads == 0 {
            return Err(Error::InvalidConfig("thread count must be positive".into()));
        }
        Ok(())
    }

    /// Anchor relative paths at `base` and require every referenced file to
    /// exist.
    pub fn resolve_paths(&mut self, base: &Path) -> Result<()> {
        self.detector.resolve_path_against(base)?;
        self.transformer.resolve_path_against(base)?;
        for (name, slot) in self.inputs.entries() {
            if let Some(p) = slot {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
                if !p.is_file() {
                    return Err(Error::InvalidConfig(format!(
                        "input `{name}` points at `{}`, which does not exist",
                        p.display()
                    )));
                }
            }
        }
        if let Some(out) = &mut self.output_dir {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        Ok(())
    }

    /// Content hash of the canonical serialized form.
    pub fn config_hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    /// Run directory: the explicit `output_dir`, or a deterministic
    /// task+hash name under the output root.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| {
            output_root().join(format!("{}-{}", self.task, &self.config_hash()[..8]))
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// What the machine and build looked like, enough to interpret timings and
/// re-run the artifact.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct EnvironmentFingerprint {
    pub os: String,
    pub arch: String,
    pub family: String,
    pub package_version: String,
    /// Thread count the run declares (stages are serial; this is the pinned
    /// budget, not a measurement).
    pub declared_threads: usize,
    /// What the host actually offers.
    pub available_parallelism: usize,
}

pub fn fingerprint(declared_threads: usize) -> EnvironmentFingerprint {
    EnvironmentFingerprint {
        os: std::env::consts::OS.to_string(),
        arch: std::env::consts::ARCH.to_string(),
        family: std::env::consts::FAMILY.to_string(),
        package_version: env!("CARGO_PKG_VERSION").to_string(),
        declared_threads,
        available_parallelism: std::thread::available_parallelism()
            .map(usize::from)
            .unwrap_or(1),
    }
}

/// The provenance record written into every run directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub fingerprint: EnvironmentFingerprint,
    /// Canonical text of the settings the hash covers.
    pub config: String,
}

/// Write `manifest.json` for a run with the given canonical settings text.
pub fn write_run_manifest(
    dir: &Path,
    seed: u64,
    declared_threads: usize,
    config_text: &str,
) -> Result<PathBuf> {
    let manifest = RunManifest {
        config_hash: sha256_hex(config_text.as_bytes()),
        seed,
        fingerprint: fingerprint(declared_threads),
        config: config_text.to_string(),
    };
    fs::create_dir_all(dir)?;
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}
