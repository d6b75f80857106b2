//! Simulated learners and the synthetic polarity task.
//!
//! Both learners score a test input by summing token polarities and answer
//! positive when the sum is non-negative. Tokens in the ciphered set count as
//! unknown: the retrieval learner ignores them, the in-context learner
//! estimates their polarity from the labels of demos that contain them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use super::{Backend, BackendError, Completion, Query};
use crate::corpus::{CorpusError, DemoPool, Instance, TaskKind};
use crate::rng;
use crate::tokenization::{TokenId, TokenizerSpec, Vocabulary, DEFAULT_MARKER};

/// Known token polarities.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LearnerLexicon {
    weights: HashMap<TokenId, i8>,
}

impl LearnerLexicon {
    pub fn new(weights: impl IntoIterator<Item = (TokenId, i8)>) -> Self {
        LearnerLexicon {
            weights: weights.into_iter().collect(),
        }
    }

    pub fn weight(&self, id: TokenId) -> Option<i8> {
        self.weights.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `id<TAB>weight` lines, ascending id.
    pub fn to_tsv(&self) -> String {
        let sorted: BTreeMap<_, _> = self.weights.iter().collect();
        let mut out = String::new();
        for (id, w) in sorted {
            let _ = writeln!(out, "{id}\t{w}");
        }
        out
    }

    pub fn parse_tsv(text: &str) -> Result<Self, String> {
        let mut weights = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, w) = line
                .split_once('\t')
                .ok_or_else(|| format!("line {}: expected id<TAB>weight", n + 1))?;
            let id: u32 = id
                .trim()
                .parse()
                .map_err(|_| format!("line {}: bad id {id:?}", n + 1))?;
            let w: i8 = w
                .trim()
                .parse()
                .ok()
                .filter(|w: &i8| (-1..=1).contains(w))
                .ok_or_else(|| format!("line {}: weight must be -1, 0 or 1", n + 1))?;
            weights.insert(TokenId(id), w);
        }
        Ok(LearnerLexicon { weights })
    }
}

pub fn load_lexicon(path: &Path) -> Result<LearnerLexicon, BackendError> {
    let text = fs::read_to_string(path)
        .map_err(|e| BackendError::Config(format!("lexicon {}: {e}", path.display())))?;
    LearnerLexicon::parse_tsv(&text)
        .map_err(|e| BackendError::Config(format!("lexicon {}: {e}", path.display())))
}

fn known(lexicon: &LearnerLexicon, unknown: &BTreeSet<TokenId>, t: TokenId) -> Option<f64> {
    if unknown.contains(&t) {
        None
    } else {
        lexicon.weight(t).map(f64::from)
    }
}

/// Sum of known polarities over `test`; positive iff the result is `≥ 0`.
pub fn sim_retrieval_learner(
    test: &[TokenId],
    lexicon: &LearnerLexicon,
    unknown: &BTreeSet<TokenId>,
) -> f64 {
    test.iter()
        .filter_map(|&t| known(lexicon, unknown, t))
        .sum()
}

/// Like [`sim_retrieval_learner`], but each unknown token takes the mean
/// label sign of the demos containing it. `demos` pairs demo tokens with a
/// label sign of `+1.0` or `-1.0`.
pub fn sim_incontext_learner(
    demos: &[(&[TokenId], f64)],
    test: &[TokenId],
    lexicon: &LearnerLexicon,
    unknown: &BTreeSet<TokenId>,
) -> f64 {
    let mut estimates: HashMap<TokenId, Option<f64>> = HashMap::new();
    let mut score = 0.0;
    for &t in test {
        if let Some(w) = known(lexicon, unknown, t) {
            score += w;
            continue;
        }
        let est = *estimates.entry(t).or_insert_with(|| {
            let signs: Vec<f64> = demos
                .iter()
                .filter(|(tokens, _)| tokens.contains(&t))
                .map(|&(_, s)| s)
                .collect();
            (!signs.is_empty()).then(|| signs.iter().sum::<f64>() / signs.len() as f64)
        });
        score += est.unwrap_or(0.0);
    }
    score
}

/// `+1` for the positive label, `-1` for the negative one.
pub fn label_sign(label: &str, positive: &str, negative: &str) -> Option<f64> {
    let l = label.trim();
    if l.eq_ignore_ascii_case(positive) {
        Some(1.0)
    } else if l.eq_ignore_ascii_case(negative) {
        Some(-1.0)
    } else {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimKind {
    Retrieval,
    InContext,
}

pub struct SimBackend {
    kind: SimKind,
    lexicon: LearnerLexicon,
    positive: String,
    negative: String,
}

impl SimBackend {
    pub fn new(kind: SimKind, lexicon: LearnerLexicon, positive: &str, negative: &str) -> Self {
        SimBackend {
            kind,
            lexicon,
            positive: positive.to_string(),
            negative: negative.to_string(),
        }
    }
}

impl Backend for SimBackend {
    fn complete(&self, query: &Query<'_>) -> Result<Completion, BackendError> {
        if query.kind != TaskKind::Classification {
            return Err(BackendError::Unsupported(
                "simulated learners handle classification only".into(),
            ));
        }
        let prompt = query.prompt;
        let test = prompt
            .test_block()
            .ok_or_else(|| BackendError::Unsupported("prompt has no test block".into()))?;
        let test_tokens: Vec<TokenId> = test.fields.concat();
        let unknown = query.ciphered_set.ids();
        let score = match self.kind {
            SimKind::Retrieval => sim_retrieval_learner(&test_tokens, &self.lexicon, unknown),
            SimKind::InContext => {
                let demo_tokens: Vec<(Vec<TokenId>, f64)> = prompt
                    .demo_blocks()
                    .iter()
                    .filter_map(|b| {
                        let sign =
                            label_sign(b.answer.as_deref()?, &self.positive, &self.negative)?;
                        Some((b.fields.concat(), sign))
                    })
                    .collect();
                let demos: Vec<(&[TokenId], f64)> = demo_tokens
                    .iter()
                    .map(|(t, s)| (t.as_slice(), *s))
                    .collect();
                sim_incontext_learner(&demos, &test_tokens, &self.lexicon, unknown)
            }
        };
        let label = if score >= 0.0 {
            &self.positive
        } else {
            &self.negative
        };
        let option_scores = query.candidates.map(|cands| {
            cands
                .iter()
                .map(|c| if c.trim() == label { 0.0 } else { -1.0 })
                .collect()
        });
        Ok(Completion {
            text: format!(" {label}"),
            option_scores,
        })
    }

    fn name(&self) -> String {
        match self.kind {
            SimKind::Retrieval => "sim_retrieval".into(),
            SimKind::InContext => "sim_in_context".into(),
        }
    }
}

/// A polarity-sum sentiment task over words `w0 … w{n-1}`.
///
/// Word weights are drawn once per seed with probabilities `p_negative`,
/// `p_zero`, `p_positive`; `w0` is forced to `+1` and `w1` to `-1`.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub words: Vec<String>,
    pub word_weights: Vec<i8>,
    /// Inclusive sentence length range, in words.
    pub sentence_length: (usize, usize),
    pub seed: u64,
}

/// A synthetic task with its tokenizer and derived lexicon.
pub struct SyntheticData {
    pub task: SyntheticTask,
    pub tokenizer: TokenizerSpec,
    pub lexicon: LearnerLexicon,
}

impl SyntheticTask {
    pub fn new(
        n_words: usize,
        probs: [f64; 3],
        sentence_length: (usize, usize),
        seed: u64,
    ) -> Self {
        assert!(n_words >= 2, "need at least two words");
        assert!(
            sentence_length.0 >= 1 && sentence_length.0 <= sentence_length.1,
            "bad sentence length range"
        );
        let total: f64 = probs.iter().sum();
        let mut r = rng::keyed(seed, &[rng::hash_str("synthetic-lexicon")]);
        let words: Vec<String> = (0..n_words).map(|i| format!("w{i}")).collect();
        let word_weights = (0..n_words)
            .map(|i| match i {
                0 => 1,
                1 => -1,
                _ => {
                    let u: f64 = r.random::<f64>() * total;
                    if u < probs[0] {
                        -1
                    } else if u < probs[0] + probs[1] {
                        0
                    } else {
                        1
                    }
                }
            })
            .collect();
        SyntheticTask {
            words,
            word_weights,
            sentence_length,
            seed,
        }
    }

    /// Vocabulary holding both the bare and the space-prefixed form of every word.
    pub fn vocabulary(&self) -> Vocabulary {
        let lines: Vec<String> = self.words.iter().map(|w| format!("{w} {w}")).collect();
        Vocabulary::induce(lines.iter().map(String::as_str), DEFAULT_MARKER)
    }

    /// Builds the tokenizer and lexicon (both word forms share a weight).
    pub fn materialize(self) -> SyntheticData {
        let tokenizer = TokenizerSpec::builtin(self.vocabulary());
        let vocab = tokenizer.vocab();
        let mut weights = Vec::with_capacity(self.words.len() * 2);
        for (w, &p) in self.words.iter().zip(&self.word_weights) {
            for surface in [w.clone(), format!("{DEFAULT_MARKER}{w}")] {
                if let Some(id) = vocab.lookup(&surface) {
                    weights.push((id, p));
                }
            }
        }
        SyntheticData {
            lexicon: LearnerLexicon::new(weights),
            tokenizer,
            task: self,
        }
    }

    /// Fractions of negative, zero and positive words.
    pub fn weight_fractions(&self) -> [f64; 3] {
        let mut c = [0usize; 3];
        for &w in &self.word_weights {
            c[(w + 1) as usize] += 1;
        }
        let n = self.word_weights.len() as f64;
        c.map(|x| x as f64 / n)
    }

    fn sentence(&self, r: &mut impl Rng) -> (String, i64) {
        let len = r.random_range(self.sentence_length.0..=self.sentence_length.1);
        let mut text = String::new();
        let mut sum = 0i64;
        for i in 0..len {
            let w = r.random_range(0..self.words.len());
            if i > 0 {
                text.push(' ');
            }
            text.push_str(&self.words[w]);
            sum += i64::from(self.word_weights[w]);
        }
        (text, sum)
    }

    /// `n` labelled sentences with ids `{prefix}{i}`.
    pub fn sentences(&self, prefix: &str, n: usize) -> Vec<Instance> {
        let mut r = rng::keyed(
            self.seed,
            &[rng::hash_str("synthetic-sentences"), rng::hash_str(prefix)],
        );
        (0..n)
            .map(|i| {
                let (text, sum) = self.sentence(&mut r);
                let label = if sum >= 0 { "positive" } else { "negative" };
                Instance::classification(format!("{prefix}{i}"), text, label)
            })
            .collect()
    }
}

/// Draws a demo pool and a disjoint test list.
pub fn generate_synthetic(
    task: &SyntheticTask,
    tokenizer: &TokenizerSpec,
    n_pool: usize,
    n_test: usize,
) -> Result<(DemoPool, Vec<Instance>), CorpusError> {
    let pool = DemoPool::build(task.sentences("p", n_pool), tokenizer)?;
    Ok((pool, task.sentences("t", n_test)))
}

/// Probability that a sentence's weight sum is non-negative, for uniform
/// word draws with weight fractions `[neg, zero, pos]` and lengths uniform
/// over `lengths` (inclusive).
pub fn analytic_positive_rate(fractions: [f64; 3], lengths: (usize, usize)) -> f64 {
    let [q, z, p] = fractions;
    let ln_fact: Vec<f64> = (0..=lengths.1)
        .scan(0.0, |acc, k| {
            if k > 0 {
                *acc += (k as f64).ln();
            }
            Some(*acc)
        })
        .collect();
    let term = |base: f64, k: usize| {
        if k == 0 {
            0.0
        } else if base == 0.0 {
            f64::NEG_INFINITY
        } else {
            k as f64 * base.ln()
        }
    };
    let mut total = 0.0;
    for len in lengths.0..=lengths.1 {
        let mut rate = 0.0;
        for a in 0..=len {
            for b in 0..=(len - a).min(a) {
                let c = len - a - b;
                let lp = ln_fact[len] - ln_fact[a] - ln_fact[b] - ln_fact[c]
                    + term(p, a)
                    + term(q, b)
                    + term(z, c);
                rate += lp.exp();
            }
        }
        total += rate;
    }
    total / (lengths.1 - lengths.0 + 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex(pairs: &[(u32, i8)]) -> LearnerLexicon {
        LearnerLexicon::new(pairs.iter().map(|&(i, w)| (TokenId(i), w)))
    }

    const GOOD: TokenId = TokenId(1);
    const BAD: TokenId = TokenId(2);
    const XYLO: TokenId = TokenId(9);

    #[test]
    fn retrieval_examples() {
        let l = lex(&[(1, 1), (2, -1)]);
        let none = BTreeSet::new();
        assert_eq!(
            sim_retrieval_learner(&[TokenId(50), TokenId(51)], &l, &none),
            0.0
        );
        assert_eq!(sim_retrieval_learner(&[GOOD, BAD, GOOD], &l, &none), 1.0);
        let masked = BTreeSet::from([GOOD]);
        assert_eq!(sim_retrieval_learner(&[GOOD, BAD, GOOD], &l, &masked), -1.0);
    }

    #[test]
    fn incontext_estimates_from_demos() {
        let l = lex(&[(1, 1), (2, -1)]);
        let none = BTreeSet::new();
        let demo = [XYLO, TokenId(40)];
        let demos = [(&demo[..], 1.0)];
        assert_eq!(
            sim_incontext_learner(&demos, &[XYLO, BAD, XYLO], &l, &none),
            1.0
        );
        // no demo covers the unknown token: same as retrieval
        let other = [TokenId(41)];
        let demos = [(&other[..], -1.0)];
        let test = [TokenId(77), BAD];
        assert_eq!(
            sim_incontext_learner(&demos, &test, &l, &none),
            sim_retrieval_learner(&test, &l, &none)
        );
    }

    #[test]
    fn incontext_bijective_recovers_gold() {
        // good -> xylo everywhere; xylo is unknown to the learner
        let l = lex(&[(1, 1), (2, -1), (9, -1)]);
        let unknown = BTreeSet::from([GOOD, XYLO]);
        let d1 = [XYLO, XYLO, BAD];
        let d2 = [XYLO];
        let demos = [(&d1[..], 1.0), (&d2[..], 1.0)];
        let test = [XYLO, XYLO, BAD];
        assert!(sim_incontext_learner(&demos, &test, &l, &unknown) >= 0.0);
        let plain = [GOOD, GOOD, BAD];
        assert!(sim_retrieval_learner(&plain, &l, &BTreeSet::new()) >= 0.0);
    }

    #[test]
    fn retrieval_ignores_out_of_lexicon_replacements() {
        let l = lex(&[(1, 1), (2, -1)]);
        let none = BTreeSet::new();
        let a = [GOOD, TokenId(50), BAD, TokenId(60), GOOD];
        let b = [GOOD, TokenId(70), BAD, TokenId(71), GOOD];
        assert_eq!(
            sim_retrieval_learner(&a, &l, &none),
            sim_retrieval_learner(&b, &l, &none)
        );
    }

    #[test]
    fn lexicon_tsv_round_trip() {
        let l = lex(&[(3, 1), (1, -1), (2, 0)]);
        assert_eq!(l.to_tsv(), "1\t-1\n2\t0\n3\t1\n");
        assert_eq!(LearnerLexicon::parse_tsv(&l.to_tsv()).unwrap(), l);
        assert!(LearnerLexicon::parse_tsv("1\t5\n").is_err());
        assert!(LearnerLexicon::parse_tsv("x\t1\n").is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let t = SyntheticTask::new(40, [0.4, 0.2, 0.4], (3, 7), 5);
        let a = t.sentences("p", 50);
        assert_eq!(a, t.sentences("p", 50));
        assert_ne!(a, t.sentences("t", 50));
        assert_eq!(t.word_weights[0], 1);
        assert_eq!(t.word_weights[1], -1);
    }

    #[test]
    fn synthetic_gold_agrees_with_lexicon_sum() {
        let data = SyntheticTask::new(30, [0.4, 0.2, 0.4], (2, 6), 9).materialize();
        let none = BTreeSet::new();
        for inst in data.task.sentences("t", 500) {
            let toks = inst.input_tokens(&data.tokenizer).unwrap();
            let score = sim_retrieval_learner(&toks, &data.lexicon, &none);
            let predicted = if score >= 0.0 { "positive" } else { "negative" };
            assert_eq!(Some(predicted), inst.label());
        }
    }

    #[test]
    fn all_zero_sentence_is_positive() {
        let mut t = SyntheticTask::new(3, [0.0, 1.0, 0.0], (1, 1), 1);
        t.word_weights = vec![0, 0, 0];
        assert!(t
            .sentences("x", 20)
            .iter()
            .all(|i| i.label() == Some("positive")));
    }

    #[test]
    fn analytic_rate_small_cases() {
        // one word, fractions (q, z, p): P(sum >= 0) = z + p
        assert!((analytic_positive_rate([0.3, 0.2, 0.5], (1, 1)) - 0.7).abs() < 1e-12);
        // two words, symmetric: 1 - P(sum < 0) = 1 - (q^2 + 2qz)
        let (q, z) = (0.4, 0.2);
        let expect = 1.0 - (q * q + 2.0 * q * z);
        assert!((analytic_positive_rate([q, z, 0.4], (2, 2)) - expect).abs() < 1e-12);
    }
}
