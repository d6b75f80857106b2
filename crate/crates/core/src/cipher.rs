//! Paired substitution ciphers over a shared ciphered set `S`.
//!
//! `S` is drawn cell by cell, where a cell groups eligible tokens of the same
//! frequency bin and space class (and POS group, when filtered). The
//! bijective cipher permutes each cell with a single cycle, so no token maps
//! to itself and every substitute keeps its original's frequency band and
//! spacing. The non-bijective cipher replaces each occurrence of a token in
//! `S` with an independent uniform draw from `S`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::{EligibleSet, ZipfBins};
use crate::rng::{self, TAG_NONBIJ, TAG_PERMUTE, TAG_SELECT};
use crate::tokenization::{SpaceClass, TokenId, Vocabulary};

#[derive(Debug, Error)]
pub enum CipherError {
    #[error("shuffle rate {0} outside [0, 1]")]
    InvalidRate(f64),
    #[error("internal invariant violated: {0}")]
    InternalInvariant(String),
    #[error("invalid cipher map: {0}")]
    InvalidMap(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CipherSpec {
    pub seed: u64,
    /// Shuffle rate: share of each cell placed into `S`.
    pub r: f64,
    pub space_partition: bool,
    pub pos_filter: Option<BTreeSet<String>>,
}

impl CipherSpec {
    pub fn new(seed: u64, r: f64) -> Self {
        CipherSpec {
            seed,
            r,
            space_partition: true,
            pos_filter: None,
        }
    }

    pub fn validate(&self) -> Result<(), CipherError> {
        if !(0.0..=1.0).contains(&self.r) {
            return Err(CipherError::InvalidRate(self.r));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub bin: usize,
    pub space: Option<SpaceClass>,
    pub pos: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cell {
    pub key: CellKey,
    /// Sorted by id.
    pub tokens: Vec<TokenId>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CipheredSet {
    ids: BTreeSet<TokenId>,
    cells: Vec<Cell>,
}

impl CipheredSet {
    /// Builds a set from explicit cells. Cells must be disjoint.
    pub fn from_cells(cells: Vec<Cell>) -> Result<Self, CipherError> {
        let mut ids = BTreeSet::new();
        for cell in &cells {
            for &t in &cell.tokens {
                if !ids.insert(t) {
                    return Err(CipherError::InvalidMap(format!(
                        "token {t} appears in two cells"
                    )));
                }
            }
        }
        Ok(CipheredSet { ids, cells })
    }

    pub fn ids(&self) -> &BTreeSet<TokenId> {
        &self.ids
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.ids.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Groups eligible tokens into cells keyed by bin, space class and POS group.
pub fn partition_cells(
    spec: &CipherSpec,
    eligible: &EligibleSet,
    bins: &ZipfBins,
    vocab: &Vocabulary,
) -> BTreeMap<CellKey, Vec<TokenId>> {
    let filter = spec.pos_filter.as_ref().filter(|f| !f.is_empty());
    let mut cells: BTreeMap<CellKey, Vec<TokenId>> = BTreeMap::new();
    for &id in &eligible.ids {
        let (Some(bin), Some(entry)) = (bins.bin(id), vocab.get(id)) else {
            continue;
        };
        if entry.reserved {
            continue;
        }
        let pos = match filter {
            Some(f) => {
                let group = entry
                    .pos_tags
                    .as_ref()
                    .and_then(|tags| tags.iter().find(|t| f.contains(*t)).cloned());
                match group {
                    Some(g) => Some(g),
                    None => continue,
                }
            }
            None => None,
        };
        let key = CellKey {
            bin,
            space: spec.space_partition.then_some(entry.space_class),
            pos,
        };
        cells.entry(key).or_default().push(id);
    }
    cells
}

/// Draws `⌊r·|cell|⌋` tokens from each cell without replacement; cells left
/// with fewer than two tokens are dropped.
pub fn select_ciphered_set(
    spec: &CipherSpec,
    eligible: &EligibleSet,
    bins: &ZipfBins,
    vocab: &Vocabulary,
) -> Result<CipheredSet, CipherError> {
    spec.validate()?;
    let mut rng = rng::keyed(spec.seed, &[TAG_SELECT]);
    let mut cells = Vec::new();
    for (key, tokens) in partition_cells(spec, eligible, bins, vocab) {
        // epsilon guards products like 0.29 * 100 = 28.999...
        let take = ((spec.r * tokens.len() as f64) + 1e-9).floor() as usize;
        let take = take.min(tokens.len());
        if take < 2 {
            continue;
        }
        let mut picked: Vec<TokenId> = index::sample(&mut rng, tokens.len(), take)
            .into_iter()
            .map(|i| tokens[i])
            .collect();
        picked.sort_unstable();
        cells.push(Cell {
            key,
            tokens: picked,
        });
    }
    CipheredSet::from_cells(cells)
}

/// In-place Sattolo shuffle: the result is a uniformly random single cycle.
pub fn sattolo<T, R: Rng + ?Sized>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..i);
        items.swap(i, j);
    }
}

/// A consistent token substitution and its inverse.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BijectiveCipher {
    mapping: BTreeMap<TokenId, TokenId>,
    inverse: BTreeMap<TokenId, TokenId>,
}

impl BijectiveCipher {
    /// One-to-one map from explicit pairs. Domain and range may differ.
    pub fn from_pairs(
        pairs: impl IntoIterator<Item = (TokenId, TokenId)>,
    ) -> Result<Self, CipherError> {
        let mut mapping = BTreeMap::new();
        let mut inverse = BTreeMap::new();
        for (a, b) in pairs {
            if mapping.insert(a, b).is_some() {
                return Err(CipherError::InvalidMap(format!("{a} mapped twice")));
            }
            if inverse.insert(b, a).is_some() {
                return Err(CipherError::InvalidMap(format!(
                    "{b} is the image of two tokens"
                )));
            }
        }
        Ok(BijectiveCipher { mapping, inverse })
    }

    pub fn map(&self, id: TokenId) -> TokenId {
        self.mapping.get(&id).copied().unwrap_or(id)
    }

    pub fn unmap(&self, id: TokenId) -> TokenId {
        self.inverse.get(&id).copied().unwrap_or(id)
    }

    pub fn apply(&self, tokens: &[TokenId]) -> Vec<TokenId> {
        tokens.iter().map(|&t| self.map(t)).collect()
    }

    pub fn invert(&self, tokens: &[TokenId]) -> Vec<TokenId> {
        tokens.iter().map(|&t| self.unmap(t)).collect()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (TokenId, TokenId)> + '_ {
        self.mapping.iter().map(|(&a, &b)| (a, b))
    }

    pub fn domain(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.mapping.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }
}

/// Single-cycle permutation within every cell of `set`.
pub fn build_bijection(set: &CipheredSet, seed: u64) -> Result<BijectiveCipher, CipherError> {
    let mut rng = rng::keyed(seed, &[TAG_PERMUTE]);
    let mut pairs = Vec::with_capacity(set.len());
    for cell in set.cells() {
        if cell.tokens.len() < 2 {
            return Err(CipherError::InternalInvariant(format!(
                "cell {:?} has {} token(s); a derangement needs at least 2",
                cell.key,
                cell.tokens.len()
            )));
        }
        let mut image = cell.tokens.clone();
        sattolo(&mut image, &mut rng);
        pairs.extend(cell.tokens.iter().copied().zip(image));
    }
    BijectiveCipher::from_pairs(pairs)
}

/// Where an occurrence sits, for keying its non-bijective draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DrawKey {
    pub instance: u64,
    pub block: u64,
    pub field: u64,
}

impl DrawKey {
    pub fn new(instance_id: &str, block: usize, field: usize) -> Self {
        DrawKey {
            instance: rng::hash_str(instance_id),
            block: block as u64,
            field: field as u64,
        }
    }
}

/// Per-occurrence uniform replacement of the tokens in `targets`.
///
/// For the paired experiment the draw pool equals the target set `S`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NonBijectiveSpec {
    targets: BTreeSet<TokenId>,
    pool: Vec<TokenId>,
    stream_seed: u64,
}

impl NonBijectiveSpec {
    pub fn new(set: &CipheredSet, stream_seed: u64) -> Self {
        NonBijectiveSpec {
            targets: set.ids().clone(),
            pool: set.ids().iter().copied().collect(),
            stream_seed,
        }
    }

    /// Replaces `targets` with draws from a separate `pool`.
    pub fn with_pool(
        targets: BTreeSet<TokenId>,
        pool: Vec<TokenId>,
        stream_seed: u64,
    ) -> Result<Self, CipherError> {
        if !targets.is_empty() && pool.is_empty() {
            return Err(CipherError::InvalidMap("empty draw pool".into()));
        }
        Ok(NonBijectiveSpec {
            targets,
            pool,
            stream_seed,
        })
    }

    pub fn targets(&self) -> &BTreeSet<TokenId> {
        &self.targets
    }

    pub fn pool(&self) -> &[TokenId] {
        &self.pool
    }

    pub fn stream_seed(&self) -> u64 {
        self.stream_seed
    }

    /// The draw for the occurrence at `position` under `key`.
    pub fn draw(&self, key: DrawKey, position: usize) -> TokenId {
        let mut r = rng::keyed(
            self.stream_seed,
            &[
                TAG_NONBIJ,
                key.instance,
                key.block,
                key.field,
                position as u64,
            ],
        );
        self.pool[r.random_range(0..self.pool.len())]
    }

    pub fn apply(&self, tokens: &[TokenId], key: DrawKey) -> Vec<TokenId> {
        tokens
            .iter()
            .enumerate()
            .map(|(pos, &t)| {
                if self.targets.contains(&t) {
                    self.draw(key, pos)
                } else {
                    t
                }
            })
            .collect()
    }
}

/// The bijective and non-bijective conditions of one experiment seed.
#[derive(Clone, Debug)]
pub struct CipherPair {
    pub spec: CipherSpec,
    pub k: usize,
    pub set: CipheredSet,
    pub bijective: BijectiveCipher,
    pub non_bijective: NonBijectiveSpec,
}

impl CipherPair {
    pub fn generate(
        spec: &CipherSpec,
        eligible: &EligibleSet,
        bins: &ZipfBins,
        vocab: &Vocabulary,
    ) -> Result<Self, CipherError> {
        let set = select_ciphered_set(spec, eligible, bins, vocab)?;
        let bijective = build_bijection(&set, spec.seed)?;
        let non_bijective = NonBijectiveSpec::new(&set, rng::derive_seed(spec.seed, &[TAG_NONBIJ]));
        Ok(CipherPair {
            spec: spec.clone(),
            k: bins.k(),
            set,
            bijective,
            non_bijective,
        })
    }

    pub fn to_file(&self) -> CipherFile {
        CipherFile {
            seed: self.spec.seed,
            r: self.spec.r,
            k: self.k,
            space_partition: self.spec.space_partition,
            pos_filter: self
                .spec
                .pos_filter
                .as_ref()
                .map(|f| f.iter().cloned().collect()),
            s: self.set.ids().iter().map(|t| t.0).collect(),
            pairs: self.bijective.pairs().map(|(a, b)| [a.0, b.0]).collect(),
            nonbij_stream_seed: self.non_bijective.stream_seed(),
        }
    }
}

/// Cipher map file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CipherFile {
    pub seed: u64,
    pub r: f64,
    pub k: usize,
    pub space_partition: bool,
    pub pos_filter: Option<Vec<String>>,
    #[serde(rename = "S")]
    pub s: Vec<u32>,
    pub pairs: Vec<[u32; 2]>,
    pub nonbij_stream_seed: u64,
}

impl CipherFile {
    pub fn to_json(&self) -> Result<String, CipherError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), CipherError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CipherError> {
        let file: CipherFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        file.check()?;
        Ok(file)
    }

    /// Pairs must form a permutation of `S`.
    pub fn check(&self) -> Result<(), CipherError> {
        let s: BTreeSet<u32> = self.s.iter().copied().collect();
        let dom: BTreeSet<u32> = self.pairs.iter().map(|p| p[0]).collect();
        let img: BTreeSet<u32> = self.pairs.iter().map(|p| p[1]).collect();
        if dom != s || img != s || self.pairs.len() != s.len() {
            return Err(CipherError::InvalidMap(
                "pairs are not a permutation of S".into(),
            ));
        }
        Ok(())
    }

    pub fn bijective(&self) -> Result<BijectiveCipher, CipherError> {
        BijectiveCipher::from_pairs(self.pairs.iter().map(|p| (TokenId(p[0]), TokenId(p[1]))))
    }

    pub fn non_bijective(&self) -> NonBijectiveSpec {
        let targets: BTreeSet<TokenId> = self.s.iter().map(|&t| TokenId(t)).collect();
        NonBijectiveSpec {
            pool: targets.iter().copied().collect(),
            targets,
            stream_seed: self.nonbij_stream_seed,
        }
    }
}
