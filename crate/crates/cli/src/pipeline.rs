use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use anyhow::Context;
use cipherbench::cipher::{CipherPair, CipherSpec};
use cipherbench::corpus::{load_jsonl, DatasetFormat, DemoPool, Instance};
use cipherbench::lexicon::{
    build_bins, build_frequency, eligible_tokens, load_pos_tags, EligibleSet, FrequencyTable,
    ZipfBins,
};
use cipherbench::tokenization::ReservedConfig;
use cipherbench::{TokenId, TokenizerSpec, Vocabulary};

use crate::config::{config_err, CliConfig};

pub type PosTags = HashMap<TokenId, BTreeSet<String>>;

pub struct Tokenizer {
    pub spec: TokenizerSpec,
    pub pos_tags: Option<PosTags>,
}

pub fn load_tokenizer(cfg: &CliConfig) -> anyhow::Result<Tokenizer> {
    let path = cfg.require("paths.vocab", &cfg.paths.vocab)?;
    let reserved = match &cfg.paths.reserved {
        Some(p) => {
            ReservedConfig::load(p).with_context(|| format!("paths.reserved: {}", p.display()))?
        }
        None => ReservedConfig::default(),
    };
    let mut vocab = Vocabulary::load(path)
        .with_context(|| format!("paths.vocab: {}", path.display()))?
        .with_reserved(&reserved);
    let pos_tags = match &cfg.paths.pos {
        Some(p) => {
            let tags = load_pos_tags(p).with_context(|| format!("paths.pos: {}", p.display()))?;
            vocab = vocab.with_pos_tags(&tags);
            Some(tags)
        }
        None => None,
    };
    let spec = match &cfg.paths.tokenizer_command {
        Some(cmd) => TokenizerSpec::bridge(vocab, cmd)
            .with_context(|| format!("paths.tokenizer_command: {cmd}"))?,
        None => TokenizerSpec::builtin(vocab),
    };
    Ok(Tokenizer { spec, pos_tags })
}

pub fn load_dataset(cfg: &CliConfig, field: &str, path: &Path) -> anyhow::Result<Vec<Instance>> {
    let format = cfg.paths.format.unwrap_or(DatasetFormat::Classification);
    let report =
        load_jsonl(path, format).with_context(|| format!("{field}: {}", path.display()))?;
    if report.discarded > 0 {
        log::info!(
            "{}: discarded {} instances",
            path.display(),
            report.discarded
        );
    }
    if report.instances.is_empty() {
        return Err(config_err(format!(
            "{field}: {} holds no instances",
            path.display()
        )));
    }
    Ok(report.instances)
}

pub struct Datasets {
    pub pool: DemoPool,
    pub tests: Vec<Instance>,
}

pub fn load_datasets(cfg: &CliConfig, tok: &TokenizerSpec) -> anyhow::Result<Datasets> {
    let pool_path = cfg.require("paths.pool", &cfg.paths.pool)?;
    let test_path = cfg.require("paths.test", &cfg.paths.test)?;
    let pool = load_dataset(cfg, "paths.pool", pool_path)?;
    let tests = load_dataset(cfg, "paths.test", test_path)?;
    let pool = DemoPool::build(pool, tok)?;
    Ok(Datasets { pool, tests })
}

/// `paths.freq`, else counts over `paths.freq_corpus`, else over the demo
/// pool's input fields.
pub fn load_frequency(
    cfg: &CliConfig,
    tok: &TokenizerSpec,
    pool: Option<&DemoPool>,
) -> anyhow::Result<FrequencyTable> {
    if let Some(p) = &cfg.paths.freq {
        return FrequencyTable::load(p).with_context(|| format!("paths.freq: {}", p.display()));
    }
    if let Some(p) = &cfg.paths.freq_corpus {
        let text = fs::read_to_string(p)?;
        return Ok(build_frequency(
            &p.display().to_string(),
            text.lines(),
            tok,
        )?);
    }
    let pool = pool.ok_or_else(|| {
        config_err("paths.freq: required when neither paths.freq_corpus nor paths.pool is set")
    })?;
    let texts: Vec<&str> = pool
        .instances()
        .iter()
        .flat_map(|i| i.input_fields())
        .collect();
    Ok(build_frequency("demo-pool", texts, tok)?)
}

pub struct Lexicon {
    pub eligible: EligibleSet,
    pub bins: ZipfBins,
}

pub fn build_lexicon(
    cfg: &CliConfig,
    tok: &Tokenizer,
    freq: &FrequencyTable,
) -> anyhow::Result<Lexicon> {
    let eligible = eligible_tokens(
        tok.spec.vocab(),
        tok.pos_tags.as_ref(),
        cfg.cipher.pos_filter.as_ref(),
    )?;
    let bins = build_bins(freq, &eligible, cfg.cipher.k)?;
    Ok(Lexicon { eligible, bins })
}

pub fn cipher_spec(cfg: &CliConfig, seed: u64) -> CipherSpec {
    CipherSpec {
        seed,
        r: cfg.cipher.r,
        space_partition: cfg.cipher.space_partition,
        pos_filter: cfg.cipher.pos_filter.clone(),
    }
}

/// The cipher pair a given run of `cfg` uses.
pub fn run_cipher(
    cfg: &CliConfig,
    tok: &Tokenizer,
    lex: &Lexicon,
    run: u32,
) -> anyhow::Result<CipherPair> {
    let seed = cfg.experiment().run_seed(run);
    Ok(CipherPair::generate(
        &cipher_spec(cfg, seed),
        &lex.eligible,
        &lex.bins,
        tok.spec.vocab(),
    )?)
}
