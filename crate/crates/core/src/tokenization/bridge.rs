//! Line protocol to an external tokenizer process.
//!
//! One UTF-8 request per line, one response per line:
//!
//! ```text
//! ENC <json string>       ->  IDS <id> <id> ...
//! DEC <id> <id> ...       ->  TXT <json string>
//! SURF <id>               ->  TXT <json string>
//! (malformed request)     ->  ERR <message>
//! ```

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use super::{TokenId, TokenizerError, TokenizerSpec};

struct Channel {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// Client side of the bridge. All requests go through one subprocess, one
/// at a time.
pub struct BridgeTokenizer {
    channel: Mutex<Channel>,
}

impl BridgeTokenizer {
    pub fn spawn(command: &str) -> Result<Self, TokenizerError> {
        let mut parts = command.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| TokenizerError::Bridge("empty bridge command".into()))?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| TokenizerError::Bridge(format!("cannot start `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(BridgeTokenizer {
            channel: Mutex::new(Channel {
                child,
                stdin,
                stdout,
            }),
        })
    }

    fn request(&self, line: &str) -> Result<String, TokenizerError> {
        let mut ch = self
            .channel
            .lock()
            .map_err(|_| TokenizerError::Bridge("bridge channel poisoned".into()))?;
        let io_err = |e: std::io::Error| TokenizerError::Bridge(format!("bridge io: {e}"));
        writeln!(ch.stdin, "{line}").map_err(io_err)?;
        ch.stdin.flush().map_err(io_err)?;
        let mut resp = String::new();
        if ch.stdout.read_line(&mut resp).map_err(io_err)? == 0 {
            return Err(TokenizerError::Bridge("bridge closed its output".into()));
        }
        let resp = resp.trim_end_matches(['\n', '\r']).to_string();
        if let Some(msg) = resp.strip_prefix("ERR") {
            return Err(TokenizerError::Bridge(format!(
                "bridge error: {}",
                msg.trim()
            )));
        }
        Ok(resp)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, TokenizerError> {
        let resp = self.request(&format!("ENC {}", serde_json::to_string(text)?))?;
        parse_ids_response(&resp)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let resp = self.request(&format!("DEC {}", join_ids(ids)))?;
        parse_text_response(&resp)
    }

    pub fn surface(&self, id: TokenId) -> Result<String, TokenizerError> {
        let resp = self.request(&format!("SURF {id}"))?;
        parse_text_response(&resp)
    }
}

impl Drop for BridgeTokenizer {
    fn drop(&mut self) {
        if let Ok(ch) = self.channel.get_mut() {
            let _ = ch.child.kill();
            let _ = ch.child.wait();
        }
    }
}

fn join_ids(ids: &[TokenId]) -> String {
    ids.iter()
        .map(|id| id.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_id_list(s: &str) -> Result<Vec<TokenId>, String> {
    s.split_whitespace()
        .map(|t| {
            t.parse::<u32>()
                .map(TokenId)
                .map_err(|_| format!("bad id {t:?}"))
        })
        .collect()
}

fn split_verb(line: &str) -> (&str, &str) {
    match line.split_once(' ') {
        Some((verb, rest)) => (verb, rest),
        None => (line, ""),
    }
}

pub(crate) fn parse_ids_response(resp: &str) -> Result<Vec<TokenId>, TokenizerError> {
    match split_verb(resp) {
        ("IDS", rest) => parse_id_list(rest).map_err(TokenizerError::Bridge),
        _ => Err(TokenizerError::Bridge(format!(
            "protocol violation: expected IDS, got {resp:?}"
        ))),
    }
}

pub(crate) fn parse_text_response(resp: &str) -> Result<String, TokenizerError> {
    match split_verb(resp) {
        ("TXT", rest) => serde_json::from_str(rest).map_err(|e| {
            TokenizerError::Bridge(format!("protocol violation: bad TXT payload: {e}"))
        }),
        _ => Err(TokenizerError::Bridge(format!(
            "protocol violation: expected TXT, got {resp:?}"
        ))),
    }
}

/// Answers one request line with `tokenizer`. Never fails: malformed
/// requests produce an `ERR` line.
pub fn handle_request(tokenizer: &TokenizerSpec, line: &str) -> String {
    let line = line.trim_end_matches(['\n', '\r']);
    let result: Result<String, String> = match split_verb(line) {
        ("ENC", payload) => serde_json::from_str::<String>(payload)
            .map_err(|e| format!("bad ENC payload: {e}"))
            .and_then(|text| tokenizer.encode(&text).map_err(|e| e.to_string()))
            .map(|ids| format!("IDS {}", join_ids(&ids)).trim_end().to_string()),
        ("DEC", payload) => parse_id_list(payload)
            .and_then(|ids| tokenizer.decode(&ids).map_err(|e| e.to_string()))
            .and_then(|text| {
                serde_json::to_string(&text)
                    .map(|j| format!("TXT {j}"))
                    .map_err(|e| e.to_string())
            }),
        ("SURF", payload) => payload
            .trim()
            .parse::<u32>()
            .map_err(|_| format!("bad SURF id {payload:?}"))
            .and_then(|id| {
                tokenizer
                    .vocab()
                    .surface(TokenId(id))
                    .map(str::to_string)
                    .ok_or_else(|| format!("unknown token id {id}"))
            })
            .and_then(|s| {
                serde_json::to_string(&s)
                    .map(|j| format!("TXT {j}"))
                    .map_err(|e| e.to_string())
            }),
        (verb, _) => Err(format!("unknown request {verb:?}")),
    };
    result.unwrap_or_else(|msg| format!("ERR {}", msg.replace('\n', " ")))
}

/// Serves the protocol until `input` reaches end of file.
pub fn serve<R: BufRead, W: Write>(
    tokenizer: &TokenizerSpec,
    input: R,
    mut output: W,
) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        writeln!(output, "{}", handle_request(tokenizer, &line))?;
        output.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenization::vocab::DEFAULT_MARKER;
    use crate::tokenization::Vocabulary;

    fn tok() -> TokenizerSpec {
        TokenizerSpec::builtin(Vocabulary::induce(["hi there"], DEFAULT_MARKER))
    }

    #[test]
    fn enc_dec_surf() {
        let t = tok();
        let resp = handle_request(&t, r#"ENC "hi there""#);
        let ids = parse_ids_response(&resp).unwrap();
        assert_eq!(ids.len(), 2);
        let dec = handle_request(&t, &format!("DEC {}", join_ids(&ids)));
        assert_eq!(parse_text_response(&dec).unwrap(), "hi there");
        let surf = handle_request(&t, &format!("SURF {}", ids[1]));
        assert_eq!(parse_text_response(&surf).unwrap(), "Ġthere");
    }

    #[test]
    fn empty_text_yields_bare_ids() {
        let t = tok();
        assert_eq!(handle_request(&t, r#"ENC """#), "IDS");
        assert_eq!(parse_ids_response("IDS").unwrap(), vec![]);
        assert_eq!(parse_text_response(&handle_request(&t, "DEC")).unwrap(), "");
    }

    #[test]
    fn malformed_requests_get_err() {
        let t = tok();
        for bad in ["garbage", "ENC not-json", "DEC 1 x", "SURF 999999", ""] {
            assert!(handle_request(&t, bad).starts_with("ERR "), "{bad:?}");
        }
    }

    #[test]
    fn serve_loop_survives_errors() {
        let t = tok();
        let input = "garbage\nENC \"hi\"\n";
        let mut out = Vec::new();
        serve(&t, input.as_bytes(), &mut out).unwrap();
        let out = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("ERR"));
        assert!(lines[1].starts_with("IDS "));
    }

    #[test]
    fn protocol_violations_detected() {
        assert!(parse_ids_response("TXT \"x\"").is_err());
        assert!(parse_text_response("TXT not-json").is_err());
        assert!(parse_ids_response("IDS 1 two").is_err());
    }

    #[test]
    fn spawn_missing_program_is_bridge_error() {
        let r = BridgeTokenizer::spawn("/definitely/not/a/real/bridge");
        assert!(matches!(r, Err(TokenizerError::Bridge(_))));
    }
}
