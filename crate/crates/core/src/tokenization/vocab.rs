use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{classify, wordlevel, TokenId, TokenizerError};

pub const DEFAULT_MARKER: &str = "Ġ";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpaceClass {
    SpacePrefixed,
    NonSpace,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenEntry {
    pub id: TokenId,
    pub surface: String,
    pub space_class: SpaceClass,
    pub reserved: bool,
    pub pos_tags: Option<BTreeSet<String>>,
}

/// Reserved-token configuration. Ranges are inclusive.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReservedConfig {
    #[serde(default)]
    pub id_ranges: Vec<[u32; 2]>,
    #[serde(default = "default_true")]
    pub punctuation_rule: bool,
    #[serde(default)]
    pub extra_surfaces: Vec<String>,
}

fn default_true() -> bool {
    true
}

impl Default for ReservedConfig {
    /// Byte tokens of the built-in vocabulary plus the punctuation rule.
    fn default() -> Self {
        ReservedConfig {
            id_ranges: vec![[0, 255]],
            punctuation_rule: true,
            extra_surfaces: Vec::new(),
        }
    }
}

impl ReservedConfig {
    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// On-disk vocabulary: `{"marker": "Ġ", "tokens": [{"id": 0, "surface": "..."}]}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VocabFile {
    pub marker: String,
    pub tokens: Vec<VocabToken>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VocabToken {
    pub id: u32,
    pub surface: String,
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    marker: String,
    entries: Vec<TokenEntry>,
    position: HashMap<TokenId, usize>,
    by_surface: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from `(id, surface)` pairs. Entries are classified
    /// with the default reserved config; call [`Vocabulary::with_reserved`]
    /// to apply another one.
    pub fn from_surfaces(
        marker: &str,
        tokens: impl IntoIterator<Item = (TokenId, String)>,
    ) -> Result<Self, TokenizerError> {
        let config = ReservedConfig::default();
        let mut entries: Vec<TokenEntry> = tokens
            .into_iter()
            .map(|(id, surface)| {
                let (space_class, reserved) = classify(id, &surface, marker, &config);
                TokenEntry {
                    id,
                    surface,
                    space_class,
                    reserved,
                    pos_tags: None,
                }
            })
            .collect();
        entries.sort_by_key(|e| e.id);
        let mut position = HashMap::with_capacity(entries.len());
        let mut by_surface = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if position.insert(e.id, i).is_some() {
                return Err(TokenizerError::Vocab(format!("duplicate id {}", e.id)));
            }
            // first id wins for duplicate surfaces
            by_surface.entry(e.surface.clone()).or_insert(e.id);
        }
        Ok(Vocabulary {
            marker: marker.to_string(),
            entries,
            position,
            by_surface,
        })
    }

    /// Word-level vocabulary induced from a corpus: ids 0..=255 are UTF-8
    /// byte tokens (`<0xNN>`), then the lone space marker and newline, then
    /// every character and every pre-tokenized piece seen, in sorted order.
    pub fn induce<'a>(lines: impl IntoIterator<Item = &'a str>, marker: &str) -> Self {
        let mut pieces = BTreeSet::new();
        let mut chars = BTreeSet::new();
        for line in lines {
            for piece in wordlevel::pretokenize(line) {
                let body = piece.strip_prefix(' ').unwrap_or(piece);
                // text that literally contains the marker glyph goes through byte fallback
                if body.contains(marker) {
                    continue;
                }
                chars.extend(body.chars().map(String::from));
                pieces.insert(wordlevel::piece_surface(piece, marker));
            }
        }
        let mut surfaces: Vec<String> = (0..=255u8).map(byte_surface).collect();
        let mut seen: BTreeSet<String> = surfaces.iter().cloned().collect();
        for s in [marker.to_string(), "\n".to_string()]
            .into_iter()
            .chain(chars)
            .chain(pieces)
        {
            if seen.insert(s.clone()) {
                surfaces.push(s);
            }
        }
        let tokens = surfaces
            .into_iter()
            .enumerate()
            .map(|(i, s)| (TokenId(i as u32), s));
        Vocabulary::from_surfaces(marker, tokens).expect("induced ids are dense and unique")
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let file: VocabFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        Self::from_file(file)
    }

    pub fn from_file(file: VocabFile) -> Result<Self, TokenizerError> {
        Vocabulary::from_surfaces(
            &file.marker,
            file.tokens.into_iter().map(|t| (TokenId(t.id), t.surface)),
        )
    }

    pub fn to_file(&self) -> VocabFile {
        VocabFile {
            marker: self.marker.clone(),
            tokens: self
                .entries
                .iter()
                .map(|e| VocabToken {
                    id: e.id.0,
                    surface: e.surface.clone(),
                })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        fs::write(path, serde_json::to_string_pretty(&self.to_file())?)?;
        Ok(())
    }

    /// Re-classifies every entry under `config`.
    pub fn with_reserved(mut self, config: &ReservedConfig) -> Self {
        for e in &mut self.entries {
            let (space_class, reserved) = classify(e.id, &e.surface, &self.marker, config);
            e.space_class = space_class;
            e.reserved = reserved;
        }
        self
    }

    /// Attaches POS tags; ids without a row keep `None`.
    pub fn with_pos_tags(mut self, tags: &HashMap<TokenId, BTreeSet<String>>) -> Self {
        for e in &mut self.entries {
            e.pos_tags = tags.get(&e.id).cloned();
        }
        self
    }

    pub fn marker(&self) -> &str {
        &self.marker
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: TokenId) -> Option<&TokenEntry> {
        self.position.get(&id).map(|&i| &self.entries[i])
    }

    pub fn lookup(&self, surface: &str) -> Option<TokenId> {
        self.by_surface.get(surface).copied()
    }

    pub fn entries(&self) -> &[TokenEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.entries.iter().map(|e| e.id)
    }

    pub fn surface(&self, id: TokenId) -> Option<&str> {
        self.get(id).map(|e| e.surface.as_str())
    }

    /// Byte value when `id` is a `<0xNN>` fallback token.
    pub fn byte_value(&self, id: TokenId) -> Option<u8> {
        self.get(id).and_then(|e| parse_byte_surface(&e.surface))
    }

    pub fn byte_token(&self, b: u8) -> Option<TokenId> {
        self.lookup(&byte_surface(b))
    }
}

fn byte_surface(b: u8) -> String {
    format!("<0x{b:02X}>")
}

fn parse_byte_surface(s: &str) -> Option<u8> {
    let hex = s.strip_prefix("<0x")?.strip_suffix('>')?;
    if hex.len() != 2 {
        return None;
    }
    u8::from_str_radix(hex, 16).ok()
}
