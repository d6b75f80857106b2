//! Text ⇄ token-id conversion.
//!
//! Two tokenizer modes share one [`Vocabulary`]: a built-in word-level
//! tokenizer (GPT-style space-prefix marker, byte fallback) used by every
//! in-process test, and a bridge that forwards requests to an external
//! tokenizer process over a line protocol (see [`bridge`]).

pub mod bridge;
mod vocab;
mod wordlevel;

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bridge::BridgeTokenizer;
pub use vocab::{
    ReservedConfig, SpaceClass, TokenEntry, VocabFile, VocabToken, Vocabulary, DEFAULT_MARKER,
};
pub use wordlevel::WordLevel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for TokenId {
    fn from(v: u32) -> Self {
        TokenId(v)
    }
}

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("unknown token id {0}")]
    UnknownToken(TokenId),
    #[error("cannot encode character {0:?}: no character or byte token in vocabulary")]
    Unencodable(char),
    #[error("tokenizer bridge: {0}")]
    Bridge(String),
    #[error("invalid vocabulary: {0}")]
    Vocab(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    BuiltinWordLevel,
    ExternalBridge,
}

enum Engine {
    Builtin(WordLevel),
    Bridge(BridgeTokenizer),
}

/// A vocabulary plus the engine that maps text onto it.
///
/// The built-in engine is immutable and `Sync`; the bridge engine serializes
/// all calls over a single subprocess.
pub struct TokenizerSpec {
    vocab: Arc<Vocabulary>,
    engine: Engine,
}

impl fmt::Debug for TokenizerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TokenizerSpec")
            .field("marker", &self.vocab.marker())
            .field("size", &self.vocab.len())
            .field("mode", &self.mode())
            .finish()
    }
}

impl TokenizerSpec {
    pub fn builtin(vocab: Vocabulary) -> Self {
        let vocab = Arc::new(vocab);
        TokenizerSpec {
            engine: Engine::Builtin(WordLevel::new(Arc::clone(&vocab))),
            vocab,
        }
    }

    /// Spawns `command` (whitespace-split) and talks to it over stdio.
    pub fn bridge(vocab: Vocabulary, command: &str) -> Result<Self, TokenizerError> {
        let bridge = BridgeTokenizer::spawn(command)?;
        Ok(TokenizerSpec {
            vocab: Arc::new(vocab),
            engine: Engine::Bridge(bridge),
        })
    }

    pub fn load_builtin(path: &Path, reserved: &ReservedConfig) -> Result<Self, TokenizerError> {
        let vocab = Vocabulary::load(path)?.with_reserved(reserved);
        Ok(Self::builtin(vocab))
    }

    pub fn mode(&self) -> TokenizerMode {
        match self.engine {
            Engine::Builtin(_) => TokenizerMode::BuiltinWordLevel,
            Engine::Bridge(_) => TokenizerMode::ExternalBridge,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn marker(&self) -> &str {
        self.vocab.marker()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, TokenizerError> {
        match &self.engine {
            Engine::Builtin(wl) => wl.encode(text),
            Engine::Bridge(b) => b.encode(text),
        }
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        if let Some(&bad) = ids.iter().find(|id| self.vocab.get(**id).is_none()) {
            return Err(TokenizerError::UnknownToken(bad));
        }
        match &self.engine {
            Engine::Builtin(wl) => wl.decode(ids),
            Engine::Bridge(b) => b.decode(ids),
        }
    }
}

/// Reserved-token and space-class rule for a single vocabulary entry.
///
/// An entry is reserved when its id falls in a configured range, when it is
/// the `_` blank placeholder or a configured extra surface, or (with the
/// punctuation rule on) when its marker-stripped surface is entirely
/// punctuation or whitespace.
pub fn classify(
    id: TokenId,
    surface: &str,
    marker: &str,
    config: &ReservedConfig,
) -> (SpaceClass, bool) {
    let (space_class, stripped) = match surface.strip_prefix(marker) {
        Some(rest) if !marker.is_empty() => (SpaceClass::SpacePrefixed, rest),
        _ => (SpaceClass::NonSpace, surface),
    };
    let in_range = config
        .id_ranges
        .iter()
        .any(|&[lo, hi]| (lo..=hi).contains(&id.0));
    let placeholder = stripped == "_";
    let extra = config
        .extra_surfaces
        .iter()
        .any(|s| s == surface || s == stripped);
    let punct = config.punctuation_rule && stripped.chars().all(is_punct_or_space);
    (space_class, in_range || placeholder || extra || punct)
}

fn is_punct_or_space(c: char) -> bool {
    use std::sync::OnceLock;
    static PUNCT: OnceLock<regex::Regex> = OnceLock::new();
    if c.is_whitespace() || c.is_ascii_punctuation() {
        return true;
    }
    let re = PUNCT.get_or_init(|| regex::Regex::new(r"^\p{P}$").expect("static regex"));
    let mut buf = [0u8; 4];
    re.is_match(c.encode_utf8(&mut buf))
}
