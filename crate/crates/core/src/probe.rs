//! Logit-lens probe support: token selection, probe prompts with expected
//! positions, and rank-difference aggregation.
//!
//! The external extractor reads the prompts and positions files, ranks the
//! original and substituted token at the position before each occurrence,
//! and writes one [`RankRecord`] per (layer, position).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cipher::{BijectiveCipher, CipherError, NonBijectiveSpec};
use crate::corpus::{DemoPool, Instance};
use crate::lexicon::FrequencyTable;
use crate::prompting::{render_demo_blocks, Cipher, CipherMode, PromptError};
use crate::rng::{self, TAG_PROBE};
use crate::tokenization::{TokenId, TokenizerSpec, Vocabulary};

pub const TOP_TOKENS: usize = 600;
pub const PROBE_TOKENS: usize = 30;
pub const EXAMPLES_PER_TOKEN: usize = 15;
pub const MAX_OCCURRENCE: u32 = 15;
pub const CHUNK_SIZE: u32 = 3;
pub const PROBE_POS: [&str; 3] = ["NOUN", "VERB", "ADJ"];

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("{found} qualifying tokens, {needed} needed")]
    InsufficientTokens { found: usize, needed: usize },
    #[error("probe mode must be bijective or non_bijective")]
    Mode,
    #[error("no rank records")]
    NoData,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Cipher(#[from] CipherError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSelection {
    pub mode: CipherMode,
    pub originals: Vec<TokenId>,
    /// Paired one-to-one with `originals` in bijective mode.
    pub substitutes: Vec<TokenId>,
    /// The top tokens not chosen as originals: the non-bijective draw pool.
    pub remaining: Vec<TokenId>,
    pub seed: u64,
}

impl ProbeSelection {
    pub fn bijective(&self) -> Result<BijectiveCipher, ProbeError> {
        Ok(BijectiveCipher::from_pairs(
            self.originals
                .iter()
                .copied()
                .zip(self.substitutes.iter().copied()),
        )?)
    }

    pub fn non_bijective(&self) -> Result<NonBijectiveSpec, ProbeError> {
        Ok(NonBijectiveSpec::with_pool(
            self.originals.iter().copied().collect(),
            self.remaining.clone(),
            rng::derive_seed(self.seed, &[TAG_PROBE, 1]),
        )?)
    }
}

/// Tokens tagged with one of `pos`, by descending count (ties: ascending
/// id), restricted to counted, non-reserved tokens.
pub fn qualifying_tokens(
    freq: &FrequencyTable,
    tags: &HashMap<TokenId, BTreeSet<String>>,
    vocab: &Vocabulary,
    pos: &[&str],
) -> Vec<TokenId> {
    let ids = tags
        .iter()
        .filter(|(_, t)| t.iter().any(|x| pos.contains(&x.as_str())))
        .map(|(&id, _)| id)
        .filter(|&id| freq.count(id) > 0)
        .filter(|&id| vocab.get(id).is_some_and(|e| !e.reserved));
    freq.ranked(ids)
}

/// Picks the top 600 qualifying tokens, then 30 originals among them and 30
/// substitutes from the other 570.
pub fn select_probe_tokens(
    freq: &FrequencyTable,
    tags: &HashMap<TokenId, BTreeSet<String>>,
    vocab: &Vocabulary,
    seed: u64,
    mode: CipherMode,
) -> Result<ProbeSelection, ProbeError> {
    if mode == CipherMode::None {
        return Err(ProbeError::Mode);
    }
    let ranked = qualifying_tokens(freq, tags, vocab, &PROBE_POS);
    if ranked.len() < TOP_TOKENS {
        return Err(ProbeError::InsufficientTokens {
            found: ranked.len(),
            needed: TOP_TOKENS,
        });
    }
    let top = &ranked[..TOP_TOKENS];
    let mut r = rng::keyed(seed, &[TAG_PROBE]);
    let chosen = index::sample(&mut r, top.len(), PROBE_TOKENS).into_vec();
    let chosen_set: BTreeSet<usize> = chosen.iter().copied().collect();
    let originals: Vec<TokenId> = chosen.iter().map(|&i| top[i]).collect();
    let remaining: Vec<TokenId> = (0..top.len())
        .filter(|i| !chosen_set.contains(i))
        .map(|i| top[i])
        .collect();
    let substitutes = index::sample(&mut r, remaining.len(), PROBE_TOKENS)
        .into_iter()
        .map(|i| remaining[i])
        .collect();
    Ok(ProbeSelection {
        mode,
        originals,
        substitutes,
        remaining,
        seed,
    })
}

/// An occurrence of a substituted original token in a probe prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbePosition {
    pub position: usize,
    /// 1-based, in reading order.
    pub occurrence: u32,
    pub orig_id: TokenId,
    pub sub_id: TokenId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbePrompt {
    pub prompt_id: String,
    pub original: TokenId,
    pub text: String,
    pub token_ids: Vec<TokenId>,
    pub example_ids: Vec<String>,
    pub positions: Vec<ProbePosition>,
}

/// One prompt per original token with at least `examples_per_token`
/// containing pool instances; others are dropped with a warning. All
/// originals are substituted, but only the prompt's own token is recorded,
/// up to occurrence 15.
pub fn build_probe_prompts(
    selection: &ProbeSelection,
    pool: &DemoPool,
    tokenizer: &TokenizerSpec,
    examples_per_token: usize,
) -> Result<Vec<ProbePrompt>, ProbeError> {
    let bij;
    let nonbij;
    let cipher = match selection.mode {
        CipherMode::Bijective => {
            bij = selection.bijective()?;
            Cipher::Bijective(&bij)
        }
        CipherMode::NonBijective => {
            nonbij = selection.non_bijective()?;
            Cipher::NonBijective(&nonbij)
        }
        CipherMode::None => return Err(ProbeError::Mode),
    };
    let mut prompts = Vec::new();
    for (i, &orig) in selection.originals.iter().enumerate() {
        let containing = pool.containing(orig);
        if containing.len() < examples_per_token {
            log::warn!(
                "dropping probe token {orig}: {} containing examples, {examples_per_token} needed",
                containing.len()
            );
            continue;
        }
        let mut r = rng::keyed(selection.seed, &[TAG_PROBE, 2, u64::from(orig.0)]);
        let examples: Vec<&Instance> = index::sample(&mut r, containing.len(), examples_per_token)
            .into_iter()
            .map(|j| pool.get(containing[j]))
            .collect();
        let prompt_id = format!("p{i:02}-{orig}");
        let rendered = render_demo_blocks(tokenizer, &examples, cipher, &prompt_id)?;
        let positions = rendered
            .ciphered_positions
            .iter()
            .filter(|cp| cp.original_id == Some(orig))
            .zip(1u32..)
            .take_while(|(_, k)| *k <= MAX_OCCURRENCE)
            .map(|(cp, k)| ProbePosition {
                position: cp.position,
                occurrence: k,
                orig_id: orig,
                sub_id: cp.substituted_id,
            })
            .collect();
        prompts.push(ProbePrompt {
            prompt_id,
            original: orig,
            text: rendered.text,
            token_ids: rendered.token_ids,
            example_ids: examples.iter().map(|e| e.id.clone()).collect(),
            positions,
        });
    }
    Ok(prompts)
}

/// Writes `{"prompt_id","text","token_ids"}` lines and
/// `{"prompt_id","position","occurrence","orig_id","sub_id"}` lines.
pub fn write_probe_files(
    prompts: &[ProbePrompt],
    prompts_path: &Path,
    positions_path: &Path,
) -> Result<(), ProbeError> {
    let mut pw = BufWriter::new(fs::File::create(prompts_path)?);
    let mut qw = BufWriter::new(fs::File::create(positions_path)?);
    for p in prompts {
        serde_json::to_writer(
            &mut pw,
            &serde_json::json!({
                "prompt_id": p.prompt_id,
                "text": p.text,
                "token_ids": p.token_ids,
            }),
        )?;
        pw.write_all(b"\n")?;
        for pos in &p.positions {
            serde_json::to_writer(
                &mut qw,
                &serde_json::json!({
                    "prompt_id": p.prompt_id,
                    "position": pos.position,
                    "occurrence": pos.occurrence,
                    "orig_id": pos.orig_id,
                    "sub_id": pos.sub_id,
                }),
            )?;
            qw.write_all(b"\n")?;
        }
    }
    pw.flush()?;
    qw.flush()?;
    Ok(())
}

/// One rank observation from the extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankRecord {
    pub layer: u32,
    pub position: usize,
    pub occurrence: u32,
    pub orig_id: TokenId,
    pub sub_id: TokenId,
    pub orig_rank: u32,
    pub sub_rank: u32,
}

/// `orig_rank − sub_rank`; positive when the substitute ranks higher.
pub fn rank_diff(record: &RankRecord) -> i64 {
    i64::from(record.orig_rank) - i64::from(record.sub_rank)
}

/// Parses record JSONL. `vocab_size`, when given, bounds the ranks.
pub fn parse_records(text: &str, vocab_size: Option<u32>) -> Result<Vec<RankRecord>, ProbeError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| ProbeError::Parse { line: i + 1, msg };
        let rec: RankRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if rec.orig_rank == 0 || rec.sub_rank == 0 {
            return Err(err("ranks are 1-based".into()));
        }
        if let Some(v) = vocab_size {
            if rec.orig_rank > v || rec.sub_rank > v {
                return Err(err(format!("rank exceeds vocabulary size {v}")));
            }
        }
        if rec.occurrence == 0 {
            return Err(err("occurrence is 1-based".into()));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_records(path: &Path, vocab_size: Option<u32>) -> Result<Vec<RankRecord>, ProbeError> {
    parse_records(&fs::read_to_string(path)?, vocab_size)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CellStat {
    pub sum: i64,
    pub count: usize,
}

impl CellStat {
    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum as f64 / self.count as f64)
    }
}

/// Mean rank difference per (layer, occurrence) plus last-layer chunk means.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub cells: BTreeMap<(u32, u32), CellStat>,
    pub layers: Vec<u32>,
    pub max_occurrence: u32,
    /// Means over occurrences 1–3, 4–6, …, 13–15 of the last layer.
    pub chunk_means: Vec<Option<f64>>,
}

pub fn aggregate(records: &[RankRecord]) -> Result<Aggregate, ProbeError> {
    if records.is_empty() {
        return Err(ProbeError::NoData);
    }
    let mut cells: BTreeMap<(u32, u32), CellStat> = BTreeMap::new();
    for r in records {
        let c = cells.entry((r.layer, r.occurrence)).or_default();
        c.sum += rank_diff(r);
        c.count += 1;
    }
    let layers: Vec<u32> = records
        .iter()
        .map(|r| r.layer)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let last = *layers.last().expect("nonempty");
    let max_occurrence = records
        .iter()
        .map(|r| r.occurrence)
        .max()
        .unwrap_or(0)
        .max(MAX_OCCURRENCE);
    let chunk_means = (0..MAX_OCCURRENCE / CHUNK_SIZE)
        .map(|ch| {
            let lo = ch * CHUNK_SIZE + 1;
            let mut acc = CellStat::default();
            for occ in lo..lo + CHUNK_SIZE {
                if let Some(c) = cells.get(&(last, occ)) {
                    acc.sum += c.sum;
                    acc.count += c.count;
                }
            }
            acc.mean()
        })
        .collect();
    Ok(Aggregate {
        cells,
        layers,
        max_occurrence,
        chunk_means,
    })
}

fn fmt_mean(m: Option<f64>) -> String {
    m.map_or_else(|| "null".to_string(), |v| format!("{v}"))
}

impl Aggregate {
    pub fn mean(&self, layer: u32, occurrence: u32) -> Option<f64> {
        self.cells
            .get(&(layer, occurrence))
            .and_then(CellStat::mean)
    }

    /// `layer,occurrence,mean_diff,count` over the full grid; empty cells
    /// print `null`.
    pub fn heatmap_csv(&self) -> String {
        let mut out = String::from("layer,occurrence,mean_diff,count\n");
        for &layer in &self.layers {
            for occ in 1..=self.max_occurrence {
                let c = self.cells.get(&(layer, occ)).copied().unwrap_or_default();
                let _ = writeln!(out, "{layer},{occ},{},{}", fmt_mean(c.mean()), c.count);
            }
        }
        out
    }

    /// `chunk,mean_diff` with chunks labelled `1-3` … `13-15`.
    pub fn chunks_csv(&self) -> String {
        let mut out = String::from("chunk,mean_diff\n");
        for (i, m) in self.chunk_means.iter().enumerate() {
            let lo = i as u32 * CHUNK_SIZE + 1;
            let _ = writeln!(out, "{lo}-{},{}", lo + CHUNK_SIZE - 1, fmt_mean(*m));
        }
        out
    }
}
