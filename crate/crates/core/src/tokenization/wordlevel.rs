use std::sync::{Arc, OnceLock};

use regex::Regex;

use super::{TokenId, TokenizerError, Vocabulary};

fn piece_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r" ?[\p{L}\p{N}]+| ?[^\s\p{L}\p{N}]|\s").expect("static regex"))
}

/// Splits text into word pieces: an alphanumeric run or a single other
/// character, each optionally carrying one leading space, or a bare
/// whitespace character. The pieces always concatenate back to `text`.
pub(crate) fn pretokenize(text: &str) -> Vec<&str> {
    piece_regex().find_iter(text).map(|m| m.as_str()).collect()
}

/// Vocabulary surface of a piece: a leading space becomes the marker.
pub(crate) fn piece_surface(piece: &str, marker: &str) -> String {
    match piece.strip_prefix(' ') {
        Some(rest) => format!("{marker}{rest}"),
        None => piece.to_string(),
    }
}

/// Word-level tokenizer over a fixed vocabulary.
///
/// Pieces missing from the vocabulary fall back to single-character tokens
/// and, below that, to UTF-8 byte tokens, so any text with byte tokens in
/// the vocabulary round-trips exactly.
#[derive(Clone, Debug)]
pub struct WordLevel {
    vocab: Arc<Vocabulary>,
}

impl WordLevel {
    pub fn new(vocab: Arc<Vocabulary>) -> Self {
        WordLevel { vocab }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, TokenizerError> {
        let marker = self.vocab.marker();
        let mut out = Vec::with_capacity(text.len() / 4 + 1);
        for piece in pretokenize(text) {
            let (spaced, body) = match piece.strip_prefix(' ') {
                Some(rest) => (true, rest),
                None => (false, piece),
            };
            let literal_marker = !marker.is_empty() && body.contains(marker);
            if !literal_marker {
                if let Some(id) = self.vocab.lookup(&piece_surface(piece, marker)) {
                    out.push(id);
                    continue;
                }
            }
            self.fallback(spaced, body, &mut out)?;
        }
        Ok(out)
    }

    fn fallback(
        &self,
        spaced: bool,
        body: &str,
        out: &mut Vec<TokenId>,
    ) -> Result<(), TokenizerError> {
        let marker = self.vocab.marker();
        let mut chars = body.chars().peekable();
        if spaced {
            let joined = chars
                .peek()
                .filter(|c| !marker.contains(**c))
                .and_then(|c| self.vocab.lookup(&format!("{marker}{c}")));
            match joined {
                Some(id) => {
                    out.push(id);
                    chars.next();
                }
                None => match self.vocab.lookup(marker) {
                    Some(id) => out.push(id),
                    None => self.push_bytes(' ', out)?,
                },
            }
        }
        for c in chars {
            let mut buf = [0u8; 4];
            let s: &str = c.encode_utf8(&mut buf);
            match self.vocab.lookup(s).filter(|_| !marker.contains(c)) {
                Some(id) => out.push(id),
                None => self.push_bytes(c, out)?,
            }
        }
        Ok(())
    }

    fn push_bytes(&self, c: char, out: &mut Vec<TokenId>) -> Result<(), TokenizerError> {
        let mut buf = [0u8; 4];
        for &b in c.encode_utf8(&mut buf).as_bytes() {
            out.push(
                self.vocab
                    .byte_token(b)
                    .ok_or(TokenizerError::Unencodable(c))?,
            );
        }
        Ok(())
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let marker = self.vocab.marker();
        let mut out = String::new();
        let mut pending: Vec<u8> = Vec::new();
        for &id in ids {
            if let Some(b) = self.vocab.byte_value(id) {
                pending.push(b);
                continue;
            }
            if !pending.is_empty() {
                out.push_str(&String::from_utf8_lossy(&pending));
                pending.clear();
            }
            let surface = self
                .vocab
                .surface(id)
                .ok_or(TokenizerError::UnknownToken(id))?;
            match surface.strip_prefix(marker).filter(|_| !marker.is_empty()) {
                Some(rest) => {
                    out.push(' ');
                    out.push_str(rest);
                }
                None => out.push_str(surface),
            }
        }
        if !pending.is_empty() {
            out.push_str(&String::from_utf8_lossy(&pending));
        }
        Ok(out)
    }
}
