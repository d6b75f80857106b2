//! Instruction-free prompt rendering.
//!
//! Classification blocks:
//!
//! ```text
//! Input: {input}
//! Output: {label}
//!
//! ```
//!
//! Multiple-choice blocks:
//!
//! ```text
//! Question: {question}
//! Options: (1) {option} (2) {option}
//! Answer: ({k})
//!
//! ```
//!
//! The test block repeats the demo layout without its answer. Ciphers touch
//! input fields only (inputs, questions, options); labels and answer markers
//! are never rewritten.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cipher::{BijectiveCipher, DrawKey, NonBijectiveSpec};
use crate::corpus::{Instance, InstanceBody, TaskKind};
use crate::tokenization::{TokenId, TokenizerError, TokenizerSpec};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("instance {id:?} is {found:?}, expected {expected:?}")]
    KindMismatch {
        id: String,
        expected: TaskKind,
        found: TaskKind,
    },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CipherMode {
    None,
    Bijective,
    NonBijective,
}

/// The cipher applied to input fields.
#[derive(Clone, Copy, Debug)]
pub enum Cipher<'a> {
    None,
    Bijective(&'a BijectiveCipher),
    NonBijective(&'a NonBijectiveSpec),
}

impl Cipher<'_> {
    pub fn mode(&self) -> CipherMode {
        match self {
            Cipher::None => CipherMode::None,
            Cipher::Bijective(_) => CipherMode::Bijective,
            Cipher::NonBijective(_) => CipherMode::NonBijective,
        }
    }

    pub fn apply(&self, tokens: &[TokenId], key: DrawKey) -> Vec<TokenId> {
        match self {
            Cipher::None => tokens.to_vec(),
            Cipher::Bijective(c) => c.apply(tokens),
            Cipher::NonBijective(c) => c.apply(tokens, key),
        }
    }
}

/// A prompt position whose token differs from the unciphered rendering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CipheredPosition {
    pub position: usize,
    /// `None` only when the two renderings tokenize to different lengths
    /// and the original cannot be paired unambiguously.
    pub original_id: Option<TokenId>,
    pub substituted_id: TokenId,
}

/// One demo or test block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedBlock {
    pub instance_id: String,
    /// Field-level token ids after ciphering, in field order.
    pub fields: Vec<Vec<TokenId>>,
    /// Gold label or `(k)` marker shown in the block; `None` for the test block.
    pub answer: Option<String>,
    /// Token offsets `[start, end)` in the prompt.
    pub span: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub token_ids: Vec<TokenId>,
    pub ciphered_positions: Vec<CipheredPosition>,
    /// Token offsets `[start, end)` of the test block; empty when there is none.
    pub test_span: (usize, usize),
    pub blocks: Vec<RenderedBlock>,
}

impl RenderedPrompt {
    pub fn demo_blocks(&self) -> &[RenderedBlock] {
        match self.blocks.last() {
            Some(b) if b.answer.is_none() => &self.blocks[..self.blocks.len() - 1],
            _ => &self.blocks,
        }
    }

    pub fn test_block(&self) -> Option<&RenderedBlock> {
        self.blocks.last().filter(|b| b.answer.is_none())
    }
}

enum Part<'a> {
    Lit(String),
    Field(&'a str),
}

fn classification_parts(inst: &Instance, with_answer: bool) -> Vec<Part<'_>> {
    let InstanceBody::Classification { input, label } = &inst.body else {
        unreachable!("kind checked by caller")
    };
    let mut parts = vec![Part::Lit("Input: ".into()), Part::Field(input)];
    if with_answer {
        parts.push(Part::Lit(format!("\nOutput: {label}\n\n")));
    } else {
        parts.push(Part::Lit("\nOutput:".into()));
    }
    parts
}

fn multiple_choice_parts(inst: &Instance, with_answer: bool) -> Vec<Part<'_>> {
    let InstanceBody::MultipleChoice {
        question,
        options,
        answer,
    } = &inst.body
    else {
        unreachable!("kind checked by caller")
    };
    let mut parts = vec![
        Part::Lit("Question: ".into()),
        Part::Field(question),
        Part::Lit("\nOptions:".into()),
    ];
    for (i, opt) in options.iter().enumerate() {
        parts.push(Part::Lit(format!(" ({}) ", i + 1)));
        parts.push(Part::Field(opt));
    }
    if with_answer {
        parts.push(Part::Lit(format!("\nAnswer: ({answer})\n\n")));
    } else {
        parts.push(Part::Lit("\n".into()));
    }
    parts
}

struct BlockText {
    instance_id: String,
    plain: String,
    ciphered: String,
    fields: Vec<Vec<TokenId>>,
    answer: Option<String>,
}

fn render_block(
    tokenizer: &TokenizerSpec,
    inst: &Instance,
    parts: Vec<Part<'_>>,
    cipher: Cipher<'_>,
    key_instance: &str,
    block: usize,
    answer: Option<String>,
) -> Result<BlockText, PromptError> {
    let mut plain = String::new();
    let mut ciphered = String::new();
    let mut fields = Vec::new();
    for part in parts {
        match part {
            Part::Lit(s) => {
                plain.push_str(&s);
                ciphered.push_str(&s);
            }
            Part::Field(text) => {
                let ids = tokenizer.encode(text)?;
                let out = cipher.apply(&ids, DrawKey::new(key_instance, block, fields.len()));
                plain.push_str(text);
                if out == ids {
                    ciphered.push_str(text);
                } else {
                    ciphered.push_str(&tokenizer.decode(&out)?);
                }
                fields.push(out);
            }
        }
    }
    Ok(BlockText {
        instance_id: inst.id.clone(),
        plain,
        ciphered,
        fields,
        answer,
    })
}

fn check_kind(instances: &[&Instance], expected: TaskKind) -> Result<(), PromptError> {
    for inst in instances {
        if inst.kind() != expected {
            return Err(PromptError::KindMismatch {
                id: inst.id.clone(),
                expected,
                found: inst.kind(),
            });
        }
    }
    Ok(())
}

fn render(
    tokenizer: &TokenizerSpec,
    demos: &[&Instance],
    test: Option<&Instance>,
    cipher: Cipher<'_>,
    kind: TaskKind,
    key_instance: &str,
) -> Result<RenderedPrompt, PromptError> {
    let mut all: Vec<&Instance> = demos.to_vec();
    all.extend(test);
    check_kind(&all, kind)?;
    let parts = |inst, with_answer| match kind {
        TaskKind::Classification => classification_parts(inst, with_answer),
        TaskKind::MultipleChoice => multiple_choice_parts(inst, with_answer),
    };

    let mut blocks = Vec::with_capacity(all.len());
    for (b, inst) in demos.iter().enumerate() {
        blocks.push(render_block(
            tokenizer,
            inst,
            parts(inst, true),
            cipher,
            key_instance,
            b,
            Some(inst.gold()),
        )?);
    }
    if let Some(t) = test {
        blocks.push(render_block(
            tokenizer,
            t,
            parts(t, false),
            cipher,
            key_instance,
            demos.len(),
            None,
        )?);
    }
    assemble(tokenizer, blocks, test.is_some())
}

fn assemble(
    tokenizer: &TokenizerSpec,
    blocks: Vec<BlockText>,
    has_test: bool,
) -> Result<RenderedPrompt, PromptError> {
    let text: String = blocks.iter().map(|b| b.ciphered.as_str()).collect();
    let plain_text: String = blocks.iter().map(|b| b.plain.as_str()).collect();
    let token_ids = tokenizer.encode(&text)?;

    let mut block_ids = Vec::with_capacity(blocks.len());
    let mut plain_ids = Vec::with_capacity(blocks.len());
    for b in &blocks {
        block_ids.push(tokenizer.encode(&b.ciphered)?);
        plain_ids.push(tokenizer.encode(&b.plain)?);
    }

    let concatenated: Vec<TokenId> = block_ids.iter().flatten().copied().collect();
    let mut spans = Vec::with_capacity(blocks.len());
    let mut ciphered_positions = Vec::new();
    if concatenated == token_ids {
        let mut offset = 0;
        for (c, p) in block_ids.iter().zip(&plain_ids) {
            for mut cp in diff_positions(c, p) {
                cp.position += offset;
                ciphered_positions.push(cp);
            }
            spans.push((offset, offset + c.len()));
            offset += c.len();
        }
    } else {
        // Tokens merged across a block boundary: fall back to whole-prompt
        // alignment and approximate block spans by character offsets.
        let plain_full = tokenizer.encode(&plain_text)?;
        ciphered_positions = diff_positions(&token_ids, &plain_full);
        let mut chars = 0;
        let mut start = 0;
        for b in &blocks {
            chars += b.ciphered.len();
            let end = token_prefix_covering(tokenizer, &token_ids, chars)?.max(start);
            spans.push((start, end));
            start = end;
        }
    }

    let test_span = if has_test {
        spans.last().copied().unwrap_or((0, 0))
    } else {
        (token_ids.len(), token_ids.len())
    };
    let blocks = blocks
        .into_iter()
        .zip(spans)
        .map(|(b, span)| RenderedBlock {
            instance_id: b.instance_id,
            fields: b.fields,
            answer: b.answer,
            span,
        })
        .collect();
    Ok(RenderedPrompt {
        text,
        token_ids,
        ciphered_positions,
        test_span,
        blocks,
    })
}

/// Smallest token count whose decoded prefix spans at least `bytes` bytes.
fn token_prefix_covering(
    tokenizer: &TokenizerSpec,
    ids: &[TokenId],
    bytes: usize,
) -> Result<usize, PromptError> {
    let (mut lo, mut hi) = (0, ids.len());
    while lo < hi {
        let mid = (lo + hi) / 2;
        if tokenizer.decode(&ids[..mid])?.len() >= bytes {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(lo)
}

/// Positions where `ciphered` differs from `plain`.
///
/// Equal lengths compare positionwise. Otherwise the two sequences are
/// aligned by longest common subsequence; unmatched ciphered tokens are
/// reported, paired with the plain tokens of the same gap when the gap
/// lengths agree.
pub fn diff_positions(ciphered: &[TokenId], plain: &[TokenId]) -> Vec<CipheredPosition> {
    if ciphered.len() == plain.len() {
        return ciphered
            .iter()
            .zip(plain)
            .enumerate()
            .filter(|(_, (c, p))| c != p)
            .map(|(i, (&c, &p))| CipheredPosition {
                position: i,
                original_id: Some(p),
                substituted_id: c,
            })
            .collect();
    }
    let anchors = lcs_pairs(ciphered, plain);
    let mut out = Vec::new();
    let (mut ci, mut pi) = (0, 0);
    for (ca, pa) in anchors
        .into_iter()
        .chain(std::iter::once((ciphered.len(), plain.len())))
    {
        let same_len = ca - ci == pa - pi;
        for (k, c) in (ci..ca).enumerate() {
            out.push(CipheredPosition {
                position: c,
                original_id: same_len.then(|| plain[pi + k]),
                substituted_id: ciphered[c],
            });
        }
        ci = ca + 1;
        pi = pa + 1;
    }
    out
}

fn lcs_pairs(a: &[TokenId], b: &[TokenId]) -> Vec<(usize, usize)> {
    let (n, m) = (a.len(), b.len());
    let mut dp = vec![0u32; (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            dp[at(i, j)] = if a[i] == b[j] {
                dp[at(i + 1, j + 1)] + 1
            } else {
                dp[at(i + 1, j)].max(dp[at(i, j + 1)])
            };
        }
    }
    let mut pairs = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if a[i] == b[j] {
            pairs.push((i, j));
            i += 1;
            j += 1;
        } else if dp[at(i + 1, j)] >= dp[at(i, j + 1)] {
            i += 1;
        } else {
            j += 1;
        }
    }
    pairs
}

/// Renders classification demos followed by the test input. Non-bijective
/// draws are keyed by the test instance id, block index and field index.
pub fn render_classification(
    tokenizer: &TokenizerSpec,
    demos: &[&Instance],
    test: &Instance,
    cipher: Cipher<'_>,
) -> Result<RenderedPrompt, PromptError> {
    render(
        tokenizer,
        demos,
        Some(test),
        cipher,
        TaskKind::Classification,
        &test.id,
    )
}

pub fn render_multiple_choice(
    tokenizer: &TokenizerSpec,
    demos: &[&Instance],
    test: &Instance,
    cipher: Cipher<'_>,
) -> Result<RenderedPrompt, PromptError> {
    render(
        tokenizer,
        demos,
        Some(test),
        cipher,
        TaskKind::MultipleChoice,
        &test.id,
    )
}

/// Dispatches on the test instance's kind.
pub fn render_prompt(
    tokenizer: &TokenizerSpec,
    demos: &[&Instance],
    test: &Instance,
    cipher: Cipher<'_>,
) -> Result<RenderedPrompt, PromptError> {
    match test.kind() {
        TaskKind::Classification => render_classification(tokenizer, demos, test, cipher),
        TaskKind::MultipleChoice => render_multiple_choice(tokenizer, demos, test, cipher),
    }
}

/// Classification demo blocks only, with no test block. Draws are keyed by
/// `key`.
pub fn render_demo_blocks(
    tokenizer: &TokenizerSpec,
    demos: &[&Instance],
    cipher: Cipher<'_>,
    key: &str,
) -> Result<RenderedPrompt, PromptError> {
    render(
        tokenizer,
        demos,
        None,
        cipher,
        TaskKind::Classification,
        key,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cipher::{Cell, CellKey, CipheredSet};
    use crate::tokenization::{Vocabulary, DEFAULT_MARKER};

    fn tok() -> TokenizerSpec {
        TokenizerSpec::builtin(Vocabulary::induce(
            [
                "great awful",
                "awful great",
                "I love this school apple , school",
                "school apple",
                "a b c d",
            ],
            DEFAULT_MARKER,
        ))
    }

    fn id(t: &TokenizerSpec, s: &str) -> TokenId {
        t.vocab().lookup(s).unwrap()
    }

    #[test]
    fn classification_template_matches() {
        let t = tok();
        let demo = Instance::classification("d", "great", "positive");
        let test = Instance::classification("t", "awful", "negative");
        let p = render_classification(&t, &[&demo], &test, Cipher::None).unwrap();
        assert_eq!(
            p.text,
            "Input: great\nOutput: positive\n\nInput: awful\nOutput:"
        );
        assert!(p.ciphered_positions.is_empty());
        assert_eq!(p.test_span.1, p.token_ids.len());
        assert_eq!(
            t.decode(&p.token_ids[p.test_span.0..]).unwrap(),
            "Input: awful\nOutput:"
        );
    }

    #[test]
    fn empty_set_matches_none_mode() {
        let t = tok();
        let demo = Instance::classification("d", "I love this school", "positive");
        let test = Instance::classification("t", "school apple", "negative");
        let empty = NonBijectiveSpec::new(&CipheredSet::default(), 3);
        let bij = BijectiveCipher::default();
        let none = render_classification(&t, &[&demo], &test, Cipher::None).unwrap();
        for c in [Cipher::NonBijective(&empty), Cipher::Bijective(&bij)] {
            assert_eq!(render_classification(&t, &[&demo], &test, c).unwrap(), none);
        }
    }

    #[test]
    fn bijective_school_to_apple_everywhere() {
        let t = tok();
        let (s, a) = (id(&t, "Ġschool"), id(&t, "Ġapple"));
        let bij = BijectiveCipher::from_pairs([(s, a), (a, s)]).unwrap();
        let demo = Instance::classification("d", "I love this school , school", "positive");
        let test = Instance::classification("t", "I love school", "school");
        let p = render_classification(&t, &[&demo], &test, Cipher::Bijective(&bij)).unwrap();
        assert_eq!(
            p.text,
            "Input: I love this apple , apple\nOutput: positive\n\nInput: I love apple\nOutput:"
        );
        assert_eq!(p.ciphered_positions.len(), 3);
        for cp in &p.ciphered_positions {
            assert_eq!(p.token_ids[cp.position], cp.substituted_id);
            assert_eq!(cp.original_id, Some(s));
            assert_eq!(cp.substituted_id, a);
        }
    }

    #[test]
    fn labels_never_ciphered() {
        let t = tok();
        let great = id(&t, "great");
        let awful = id(&t, "awful");
        let bij = BijectiveCipher::from_pairs([(great, awful), (awful, great)]).unwrap();
        let demo = Instance::classification("d", "great", "great");
        let test = Instance::classification("t", "awful", "awful");
        let p = render_classification(&t, &[&demo], &test, Cipher::Bijective(&bij)).unwrap();
        assert_eq!(
            p.text,
            "Input: awful\nOutput: great\n\nInput: great\nOutput:"
        );
    }

    #[test]
    fn multiple_choice_template() {
        let t = tok();
        let demo = Instance::multiple_choice("d", "a b", vec!["c".into(), "d".into()], 1);
        let test = Instance::multiple_choice("t", "b a", vec!["d".into(), "c".into()], 2);
        let p = render_multiple_choice(&t, &[&demo], &test, Cipher::None).unwrap();
        assert_eq!(
            p.text,
            "Question: a b\nOptions: (1) c (2) d\nAnswer: (1)\n\nQuestion: b a\nOptions: (1) d (2) c\n"
        );
    }

    #[test]
    fn options_are_ciphered_markers_kept() {
        let t = tok();
        let (c, d) = (id(&t, "c"), id(&t, "d"));
        let bij = BijectiveCipher::from_pairs([(c, d), (d, c)]).unwrap();
        let demo = Instance::multiple_choice("d", "c", vec!["c".into(), "d".into()], 2);
        let test = Instance::multiple_choice("t", "d", vec!["c".into(), "d".into()], 1);
        let p = render_multiple_choice(&t, &[&demo], &test, Cipher::Bijective(&bij)).unwrap();
        assert_eq!(
            p.text,
            "Question: d\nOptions: (1) d (2) c\nAnswer: (2)\n\nQuestion: c\nOptions: (1) d (2) c\n"
        );
    }

    #[test]
    fn kind_mismatch_is_error() {
        let t = tok();
        let demo = Instance::multiple_choice("d", "a", vec!["c".into(), "d".into()], 1);
        let test = Instance::classification("t", "great", "positive");
        let err = render_classification(&t, &[&demo], &test, Cipher::None).unwrap_err();
        assert!(matches!(err, PromptError::KindMismatch { .. }));
        assert!(render_multiple_choice(&t, &[], &test, Cipher::None).is_err());
    }

    #[test]
    fn nonbijective_positions_match_diff() {
        let t = tok();
        let ids = ["Ġschool", "Ġapple", "Ġlove", "Ġthis"].map(|s| id(&t, s));
        let set = CipheredSet::from_cells(vec![Cell {
            key: CellKey {
                bin: 0,
                space: None,
                pos: None,
            },
            tokens: ids.to_vec(),
        }])
        .unwrap();
        let nb = NonBijectiveSpec::new(&set, 11);
        let demo = Instance::classification("d", "I love this school apple", "positive");
        let test = Instance::classification("t", "I love school", "negative");
        let none = render_classification(&t, &[&demo, &demo], &test, Cipher::None).unwrap();
        let p =
            render_classification(&t, &[&demo, &demo], &test, Cipher::NonBijective(&nb)).unwrap();
        assert_eq!(p.token_ids.len(), none.token_ids.len());
        let expected: Vec<usize> = (0..p.token_ids.len())
            .filter(|&i| p.token_ids[i] != none.token_ids[i])
            .collect();
        let got: Vec<usize> = p.ciphered_positions.iter().map(|c| c.position).collect();
        assert_eq!(got, expected);
        let again =
            render_classification(&t, &[&demo, &demo], &test, Cipher::NonBijective(&nb)).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn block_spans_tile_prompt() {
        let t = tok();
        let demo = Instance::classification("d", "great", "positive");
        let test = Instance::classification("t", "awful", "negative");
        let p = render_classification(&t, &[&demo, &demo], &test, Cipher::None).unwrap();
        let mut end = 0;
        for b in &p.blocks {
            assert_eq!(b.span.0, end);
            end = b.span.1;
        }
        assert_eq!(end, p.token_ids.len());
        assert_eq!(p.demo_blocks().len(), 2);
        assert_eq!(p.test_block().unwrap().instance_id, "t");
    }

    #[test]
    fn lcs_diff_reports_inserted_tokens() {
        let c = [1, 2, 9, 9, 3].map(TokenId);
        let p = [1, 2, 7, 3].map(TokenId);
        let d = diff_positions(&c, &p);
        assert_eq!(d.iter().map(|x| x.position).collect::<Vec<_>>(), [2, 3]);
        assert!(d.iter().all(|x| x.original_id.is_none()));
        let c = [1, 8, 2, 3, 4].map(TokenId);
        let p = [1, 7, 2, 3].map(TokenId);
        let d = diff_positions(&c, &p);
        assert_eq!(d[0].position, 1);
        assert_eq!(d[0].original_id, Some(TokenId(7)));
        assert_eq!(d[1].position, 4);
    }
}
