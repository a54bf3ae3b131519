//! Vocabularies: one token per diagnostic code, and a byte-pair-encoding
//! tokenizer for note text.
//!
//! Both file formats are line oriented UTF-8. Token strings are escaped so
//! that tabs, newlines, spaces and backslashes survive: `\\`, `\t`, `\n`, `\s`.

mod bpe;
mod code_vocab;

pub use bpe::{train_bpe, TextVocab};
pub use code_vocab::{build_code_vocab, CodeVocab};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub(crate) fn escape_token(tok: &str) -> String {
    let mut out = String::with_capacity(tok.len());
    for c in tok.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            ' ' => out.push_str("\\s"),
            c => out.push(c),
        }
    }
    out
}

pub(crate) fn unescape_token(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('s') => out.push(' '),
            other => return Err(Error::Vocab(format!("bad escape \\{other:?} in {s:?}"))),
        }
    }
    Ok(out)
}

/// Renders `token<TAB>id` lines.
pub(crate) fn render_vocab(tokens: &[String]) -> String {
    let mut s = String::new();
    for (id, tok) in tokens.iter().enumerate() {
        s.push_str(&escape_token(tok));
        s.push('\t');
        s.push_str(&id.to_string());
        s.push('\n');
    }
    s
}

/// Parses `token<TAB>id` lines; ids must be contiguous from 0.
pub(crate) fn parse_vocab(text: &str, path: &str) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let parse_err = |msg: String| Error::Parse {
            path: path.to_string(),
            line: n + 1,
            msg,
        };
        let (tok, id) = line.split_once('\t').ok_or_else(|| parse_err("expected token<TAB>id".into()))?;
        let id: usize = id.trim().parse().map_err(|_| parse_err(format!("bad id {id:?}")))?;
        if id != tokens.len() {
            return Err(parse_err(format!("id {id} out of order, expected {}", tokens.len())));
        }
        tokens.push(unescape_token(tok).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(tokens)
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
