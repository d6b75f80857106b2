//! Token frequencies, frequency bins and the eligible-token universe.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenization::{TokenId, TokenizerError, TokenizerSpec, Vocabulary};

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("frequency corpus is empty")]
    EmptyCorpus,
    #[error("{eligible} eligible tokens cannot fill {k} bins")]
    TooFewTokens { eligible: usize, k: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FrequencyTable {
    pub corpus_id: String,
    counts: BTreeMap<TokenId, u64>,
}

impl FrequencyTable {
    pub fn new(corpus_id: impl Into<String>) -> Self {
        FrequencyTable {
            corpus_id: corpus_id.into(),
            counts: BTreeMap::new(),
        }
    }

    pub fn from_counts(
        corpus_id: impl Into<String>,
        counts: impl IntoIterator<Item = (TokenId, u64)>,
    ) -> Self {
        let mut t = FrequencyTable::new(corpus_id);
        for (id, c) in counts {
            *t.counts.entry(id).or_default() += c;
        }
        t
    }

    /// Zero for ids never seen.
    pub fn count(&self, id: TokenId) -> u64 {
        self.counts.get(&id).copied().unwrap_or(0)
    }

    pub fn add(&mut self, id: TokenId, n: u64) {
        *self.counts.entry(id).or_default() += n;
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// Non-zero entries in id order.
    pub fn iter(&self) -> impl Iterator<Item = (TokenId, u64)> + '_ {
        self.counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .map(|(&id, &c)| (id, c))
    }

    /// Ids sorted by count descending, then id ascending.
    pub fn ranked(&self, ids: impl IntoIterator<Item = TokenId>) -> Vec<TokenId> {
        let mut v: Vec<TokenId> = ids.into_iter().collect();
        v.sort_by(|a, b| self.count(*b).cmp(&self.count(*a)).then(a.cmp(b)));
        v
    }

    /// TSV `token_id \t count`, sorted by id.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (id, c) in self.iter() {
            let _ = writeln!(s, "{id}\t{c}");
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), LexiconError> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        let text = fs::read_to_string(path)?;
        let name = path.display().to_string();
        let mut t = FrequencyTable::new(name.clone());
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: &str| LexiconError::Parse {
                path: name.clone(),
                line: i + 1,
                msg: msg.to_string(),
            };
            let (id, count) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected `token_id<TAB>count`"))?;
            let id: u32 = id.trim().parse().map_err(|_| parse_err("bad token id"))?;
            let count: u64 = count.trim().parse().map_err(|_| parse_err("bad count"))?;
            t.add(TokenId(id), count);
        }
        Ok(t)
    }
}

/// Counts token occurrences over every line of a plain-text corpus.
pub fn build_frequency<'a, I>(
    corpus_id: &str,
    lines: I,
    tokenizer: &TokenizerSpec,
) -> Result<FrequencyTable, LexiconError>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut table = FrequencyTable::new(corpus_id);
    let mut seen_any = false;
    for line in lines {
        seen_any = true;
        for id in tokenizer.encode(line)? {
            table.add(id, 1);
        }
    }
    if !seen_any {
        return Err(LexiconError::EmptyCorpus);
    }
    Ok(table)
}

/// Which constraints produced an [`EligibleSet`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Constraints {
    pub reserved_excluded: bool,
    pub space_class_partition: bool,
    pub pos_filter: Option<BTreeSet<String>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EligibleSet {
    pub ids: BTreeSet<TokenId>,
    pub constraints: Constraints,
}

impl EligibleSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.ids.contains(&id)
    }
}

/// TSV `token_id \t POS1,POS2,...`.
pub fn load_pos_tags(path: &Path) -> Result<HashMap<TokenId, BTreeSet<String>>, LexiconError> {
    let text = fs::read_to_string(path)?;
    parse_pos_tags(&text, &path.display().to_string())
}

pub fn parse_pos_tags(
    text: &str,
    source: &str,
) -> Result<HashMap<TokenId, BTreeSet<String>>, LexiconError> {
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, tags) = line.split_once('\t').unwrap_or((line, ""));
        let id: u32 = id.trim().parse().map_err(|_| LexiconError::Parse {
            path: source.to_string(),
            line: i + 1,
            msg: "bad token id".into(),
        })?;
        let tags: BTreeSet<String> = tags
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect();
        out.insert(TokenId(id), tags);
    }
    Ok(out)
}

/// All non-reserved vocabulary ids, narrowed to `pos_filter` when given.
///
/// The vocabulary must already carry reserved flags (and POS tags, when a
/// filter is used). An empty filter is treated as no filter.
pub fn eligible_tokens(
    vocab: &Vocabulary,
    pos_tags: Option<&HashMap<TokenId, BTreeSet<String>>>,
    pos_filter: Option<&BTreeSet<String>>,
) -> Result<EligibleSet, LexiconError> {
    let filter = pos_filter.filter(|f| !f.is_empty());
    if filter.is_some() && pos_tags.is_none() {
        return Err(LexiconError::Config(
            "a POS filter requires a POS tag file".into(),
        ));
    }
    let ids = vocab
        .entries()
        .iter()
        .filter(|e| !e.reserved)
        .filter(|e| match (filter, pos_tags) {
            (Some(f), Some(tags)) => tags
                .get(&e.id)
                .is_some_and(|t| t.iter().any(|tag| f.contains(tag))),
            _ => true,
        })
        .map(|e| e.id)
        .collect();
    Ok(EligibleSet {
        ids,
        constraints: Constraints {
            reserved_excluded: true,
            space_class_partition: false,
            pos_filter: filter.cloned(),
        },
    })
}

/// Rank-contiguous partition of the eligible set into `k` frequency bins.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ZipfBins {
    k: usize,
    assignment: BTreeMap<TokenId, usize>,
}

impl ZipfBins {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn bin(&self, id: TokenId) -> Option<usize> {
        self.assignment.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (TokenId, usize)> + '_ {
        self.assignment.iter().map(|(&id, &b)| (id, b))
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &b in self.assignment.values() {
            sizes[b] += 1;
        }
        sizes
    }
}

/// Sorts eligible tokens by (count desc, id asc) and cuts the ranking into
/// `k` contiguous bins; the first `len % k` bins take one extra token.
pub fn build_bins(
    freq: &FrequencyTable,
    eligible: &EligibleSet,
    k: usize,
) -> Result<ZipfBins, LexiconError> {
    if k == 0 {
        return Err(LexiconError::Config("k must be at least 1".into()));
    }
    if eligible.len() < k {
        return Err(LexiconError::TooFewTokens {
            eligible: eligible.len(),
            k,
        });
    }
    let ranked = freq.ranked(eligible.ids.iter().copied());
    let base = ranked.len() / k;
    let extra = ranked.len() % k;
    let mut assignment = BTreeMap::new();
    let mut it = ranked.into_iter();
    for bin in 0..k {
        let size = base + usize::from(bin < extra);
        for id in it.by_ref().take(size) {
            assignment.insert(id, bin);
        }
    }
    Ok(ZipfBins { k, assignment })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenization::ReservedConfig;
    use proptest::prelude::*;

    fn word_vocab(words: &[&str]) -> Vocabulary {
        Vocabulary::from_surfaces(
            "Ġ",
            words
                .iter()
                .enumerate()
                .map(|(i, w)| (TokenId(i as u32), w.to_string())),
        )
        .unwrap()
        .with_reserved(&ReservedConfig {
            id_ranges: vec![],
            punctuation_rule: true,
            extra_surfaces: vec![],
        })
    }

    #[test]
    fn direct_count() {
        let t = TokenizerSpec::builtin(Vocabulary::induce(["a b"], "Ġ"));
        let f = build_frequency("c", ["a b", "a"], &t).unwrap();
        let a = t.vocab().lookup("a").unwrap();
        let b = t.vocab().lookup("Ġb").unwrap();
        assert_eq!(f.count(a), 2);
        assert_eq!(f.count(b), 1);
        assert_eq!(f.count(TokenId(3)), 0);
    }

    #[test]
    fn empty_corpus_errors() {
        let t = TokenizerSpec::builtin(Vocabulary::induce(["a"], "Ġ"));
        let lines: [&str; 0] = [];
        assert!(matches!(
            build_frequency("c", lines, &t),
            Err(LexiconError::EmptyCorpus)
        ));
    }

    #[test]
    fn tsv_round_trip() {
        let f = FrequencyTable::from_counts("x", [(TokenId(3), 9), (TokenId(1), 4)]);
        assert_eq!(f.to_tsv(), "1\t4\n3\t9\n");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.tsv");
        f.save(&p).unwrap();
        let g = FrequencyTable::load(&p).unwrap();
        assert_eq!(g.count(TokenId(3)), 9);
        assert_eq!(g.iter().collect::<Vec<_>>(), f.iter().collect::<Vec<_>>());
    }

    #[test]
    fn bad_tsv_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.tsv");
        fs::write(&p, "1\t2\nnope\n").unwrap();
        assert!(matches!(
            FrequencyTable::load(&p),
            Err(LexiconError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn rank_split_two_bins() {
        let v = word_vocab(&["A", "B", "C", "D"]);
        let f = FrequencyTable::from_counts(
            "c",
            [
                (TokenId(0), 100),
                (TokenId(1), 90),
                (TokenId(2), 10),
                (TokenId(3), 9),
            ],
        );
        let e = eligible_tokens(&v, None, None).unwrap();
        let bins = build_bins(&f, &e, 2).unwrap();
        assert_eq!(bins.bin(TokenId(0)), Some(0));
        assert_eq!(bins.bin(TokenId(1)), Some(0));
        assert_eq!(bins.bin(TokenId(2)), Some(1));
        assert_eq!(bins.bin(TokenId(3)), Some(1));
        let one = build_bins(&f, &e, 1).unwrap();
        assert!(one.iter().all(|(_, b)| b == 0));
        assert_eq!(one.len(), 4);
    }

    #[test]
    fn too_few_tokens() {
        let v = word_vocab(&["A", "B"]);
        let e = eligible_tokens(&v, None, None).unwrap();
        let f = FrequencyTable::new("c");
        assert!(matches!(
            build_bins(&f, &e, 3),
            Err(LexiconError::TooFewTokens { eligible: 2, k: 3 })
        ));
    }

    #[test]
    fn unseen_tokens_land_last() {
        let v = word_vocab(&["A", "B", "C", "D"]);
        let f = FrequencyTable::from_counts("c", [(TokenId(3), 5), (TokenId(2), 1)]);
        let e = eligible_tokens(&v, None, None).unwrap();
        let bins = build_bins(&f, &e, 2).unwrap();
        assert_eq!(bins.bin(TokenId(3)), Some(0));
        assert_eq!(bins.bin(TokenId(2)), Some(0));
        assert_eq!(bins.bin(TokenId(0)), Some(1));
    }

    #[test]
    fn punctuation_excluded() {
        let v = word_vocab(&["the", ",", "love"]);
        let e = eligible_tokens(&v, None, None).unwrap();
        assert_eq!(e.ids, BTreeSet::from([TokenId(0), TokenId(2)]));
    }

    #[test]
    fn pos_filter_nouns() {
        let v = word_vocab(&["school", "run"]);
        let tags = parse_pos_tags("0\tNOUN\n1\tVERB\n", "t").unwrap();
        let nouns = BTreeSet::from(["NOUN".to_string()]);
        let e = eligible_tokens(&v, Some(&tags), Some(&nouns)).unwrap();
        assert_eq!(e.ids, BTreeSet::from([TokenId(0)]));
        assert_eq!(e.constraints.pos_filter, Some(nouns.clone()));
        // empty filter is a no-op
        let e = eligible_tokens(&v, Some(&tags), Some(&BTreeSet::new())).unwrap();
        assert_eq!(e.len(), 2);
        assert!(matches!(
            eligible_tokens(&v, None, Some(&nouns)),
            Err(LexiconError::Config(_))
        ));
    }

    #[test]
    fn pos_tsv_multi_and_empty_tags() {
        let tags = parse_pos_tags("4\tNOUN,VERB\n5\t\n6\n", "t").unwrap();
        assert_eq!(tags[&TokenId(4)].len(), 2);
        assert!(tags[&TokenId(5)].is_empty());
        assert!(tags[&TokenId(6)].is_empty());
    }

    /// Brute-force oracle: position in a fully sorted list decides the bin.
    fn oracle_bins(counts: &[u64], k: usize) -> Vec<usize> {
        let n = counts.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        let mut bounds = Vec::new();
        let mut acc = 0;
        for b in 0..k {
            acc += n / k + usize::from(b < n % k);
            bounds.push(acc);
        }
        let mut out = vec![0; n];
        for (rank, &tok) in order.iter().enumerate() {
            out[tok] = bounds.iter().position(|&end| rank < end).unwrap();
        }
        out
    }

    #[test]
    fn thousand_tokens_ten_bins() {
        let n = 1000;
        let words: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        let v = word_vocab(&refs);
        let counts: Vec<u64> = (0..n as u64).map(|i| (i * 7919) % 613).collect();
        let f = FrequencyTable::from_counts(
            "c",
            counts
                .iter()
                .enumerate()
                .map(|(i, &c)| (TokenId(i as u32), c)),
        );
        let e = eligible_tokens(&v, None, None).unwrap();
        let bins = build_bins(&f, &e, 10).unwrap();
        assert_eq!(bins.sizes(), vec![100; 10]);
        let oracle = oracle_bins(&counts, 10);
        for (i, &b) in oracle.iter().enumerate().take(n) {
            assert_eq!(bins.bin(TokenId(i as u32)), Some(b));
        }
    }

    proptest! {
        #[test]
        fn bins_are_rank_monotone_partitions(
            counts in prop::collection::vec(0u64..50, 1..80),
            k in 1usize..12,
        ) {
            prop_assume!(counts.len() >= k);
            let words: Vec<String> = (0..counts.len()).map(|i| format!("w{i}")).collect();
            let refs: Vec<&str> = words.iter().map(String::as_str).collect();
            let v = word_vocab(&refs);
            let f = FrequencyTable::from_counts(
                "c",
                counts.iter().enumerate().map(|(i, &c)| (TokenId(i as u32), c)),
            );
            let e = eligible_tokens(&v, None, None).unwrap();
            let bins = build_bins(&f, &e, k).unwrap();
            prop_assert_eq!(bins.len(), counts.len());
            let sizes = bins.sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            for a in 0..counts.len() {
                for b in 0..counts.len() {
                    if counts[a] > counts[b] {
                        prop_assert!(bins.bin(TokenId(a as u32)) <= bins.bin(TokenId(b as u32)));
                    }
                }
            }
            let again = build_bins(&f, &e, k).unwrap();
            prop_assert_eq!(again, bins);
        }
    }
}
