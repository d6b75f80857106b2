use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use cipherbench::backends::{BackendConfig, BackendKind};
use cipherbench::corpus::DatasetFormat;
use cipherbench::runner::{ExperimentConfig, ScoringMode};
use cipherbench::sampling::SampleMode;
use serde::{Deserialize, Serialize};

/// A configuration problem, reported with the offending field path.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub vocab: Option<PathBuf>,
    pub reserved: Option<PathBuf>,
    /// POS tag TSV (`id<TAB>TAG,TAG`).
    pub pos: Option<PathBuf>,
    /// Precomputed frequency TSV.
    pub freq: Option<PathBuf>,
    /// Plain-text corpus counted when `freq` is absent.
    pub freq_corpus: Option<PathBuf>,
    pub pool: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub format: Option<DatasetFormat>,
    /// External tokenizer command speaking the bridge protocol.
    pub tokenizer_command: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CipherParams {
    pub r: f64,
    pub k: usize,
    pub seed: u64,
    pub space_partition: bool,
    pub pos_filter: Option<BTreeSet<String>>,
}

impl Default for CipherParams {
    fn default() -> Self {
        CipherParams {
            r: 0.5,
            k: 10,
            seed: 0,
            space_partition: true,
            pos_filter: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingParams {
    pub n: usize,
    pub mode: SampleMode,
    pub independent: bool,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            n: 20,
            mode: SampleMode::Priority,
            independent: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub name: String,
    /// Dataset label in reports; defaults to `name`.
    pub dataset: Option<String>,
    pub paths: Paths,
    pub cipher: CipherParams,
    pub sampling: SamplingParams,
    pub backend: Option<BackendConfig>,
    pub scoring: ScoringMode,
    pub runs: usize,
    pub labels: Vec<String>,
    pub out_dir: PathBuf,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            name: "experiment".into(),
            dataset: None,
            paths: Paths::default(),
            cipher: CipherParams::default(),
            sampling: SamplingParams::default(),
            backend: None,
            scoring: ScoringMode::GenerationParse,
            runs: 3,
            labels: Vec::new(),
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Command-line values that override the config file.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Vocabulary JSON.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Reserved-token config JSON.
    #[arg(long)]
    pub reserved: Option<PathBuf>,
    /// Frequency TSV.
    #[arg(long)]
    pub freq: Option<PathBuf>,
    /// Demo pool JSONL.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Test set JSONL.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Shuffle rate.
    #[arg(long)]
    pub r: Option<f64>,
    /// Number of frequency bins.
    #[arg(long)]
    pub k: Option<usize>,
    /// Demonstrations per prompt.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub runs: Option<usize>,
    /// Experiment name.
    #[arg(long)]
    pub name: Option<String>,
    /// Output root directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

impl CliConfig {
    pub fn from_json(text: &str, origin: &str) -> anyhow::Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_err(format!("{origin}: {path}: {}", e.inner()))
        })
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text, &path.display().to_string())?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    /// Makes relative input paths relative to `base` (the config file's
    /// directory). `out_dir` stays relative to the working directory.
    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p.as_mut() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        let p = &mut self.paths;
        for slot in [
            &mut p.vocab,
            &mut p.reserved,
            &mut p.pos,
            &mut p.freq,
            &mut p.freq_corpus,
            &mut p.pool,
            &mut p.test,
        ] {
            fix(slot);
        }
        if let Some(b) = self.backend.as_mut() {
            fix(&mut b.lexicon);
        }
    }

    /// Loads `--config` (or defaults) and applies flag overrides.
    pub fn resolve(o: &Overrides) -> anyhow::Result<Self> {
        let mut cfg = match &o.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(v) = &o.vocab {
            cfg.paths.vocab = Some(v.clone());
        }
        if let Some(v) = &o.reserved {
            cfg.paths.reserved = Some(v.clone());
        }
        if let Some(v) = &o.freq {
            cfg.paths.freq = Some(v.clone());
        }
        if let Some(v) = &o.pool {
            cfg.paths.pool = Some(v.clone());
        }
        if let Some(v) = &o.test {
            cfg.paths.test = Some(v.clone());
        }
        if let Some(v) = o.r {
            cfg.cipher.r = v;
        }
        if let Some(v) = o.k {
            cfg.cipher.k = v;
        }
        if let Some(v) = o.n {
            cfg.sampling.n = v;
        }
        if let Some(v) = o.seed {
            cfg.cipher.seed = v;
        }
        if let Some(v) = o.runs {
            cfg.runs = v;
        }
        if let Some(v) = &o.name {
            cfg.name = v.clone();
        }
        if let Some(v) = &o.out_dir {
            cfg.out_dir = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if !(0.0..=1.0).contains(&self.cipher.r) {
            return Err(config_err(format!(
                "cipher.r: {} outside [0, 1]",
                self.cipher.r
            )));
        }
        if self.cipher.k == 0 {
            return Err(config_err("cipher.k: must be at least 1"));
        }
        if self.sampling.n == 0 {
            return Err(config_err("sampling.n: must be at least 1"));
        }
        if self.runs == 0 {
            return Err(config_err("runs: must be at least 1"));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(config_err("name: must be a non-empty path segment"));
        }
        let p = &self.paths;
        for (field, path) in [
            ("paths.vocab", &p.vocab),
            ("paths.reserved", &p.reserved),
            ("paths.pos", &p.pos),
            ("paths.freq", &p.freq),
            ("paths.freq_corpus", &p.freq_corpus),
            ("paths.pool", &p.pool),
            ("paths.test", &p.test),
        ] {
            if let Some(path) = path {
                if !path.is_file() {
                    return Err(config_err(format!(
                        "{field}: no such file {}",
                        path.display()
                    )));
                }
            }
        }
        if let Some(lex) = self.backend.as_ref().and_then(|b| b.lexicon.as_ref()) {
            if !lex.is_file() {
                return Err(config_err(format!(
                    "backend.lexicon: no such file {}",
                    lex.display()
                )));
            }
        }
        Ok(())
    }

    pub fn require<'a, T>(&self, field: &str, value: &'a Option<T>) -> anyhow::Result<&'a T> {
        value
            .as_ref()
            .ok_or_else(|| config_err(format!("{field}: required by this command")))
    }

    pub fn backend(&self) -> anyhow::Result<&BackendConfig> {
        let b = self.require("backend", &self.backend)?;
        if b.kind == BackendKind::Http && b.endpoint_url.is_none() {
            return Err(config_err(
                "backend.endpoint_url: required for kind \"http\"",
            ));
        }
        Ok(b)
    }

    pub fn experiment(&self) -> ExperimentConfig {
        let dataset = self.dataset.clone().unwrap_or_else(|| self.name.clone());
        let mut exp = ExperimentConfig::new(&self.name, &dataset, self.cipher.r, self.sampling.n);
        exp.k = self.cipher.k;
        exp.sample_mode = self.sampling.mode;
        exp.scoring = self.scoring;
        exp.runs = self.runs;
        exp.base_seed = self.cipher.seed;
        exp.space_partition = self.cipher.space_partition;
        exp.pos_filter = self.cipher.pos_filter.clone();
        exp.independent_sampling = self.sampling.independent;
        exp.labels = self.labels.clone();
        exp
    }
}
