//! Two small deterministic tokenizers with deliberately different
//! vocabularies: a byte-level one (256 byte ids followed by the specials,
//! 260 ids) and a printable-ASCII character one (specials first, 100 ids).
//! The same character therefore never shares an id across the two.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("token id {id} out of range for vocabulary of {size}")]
    OutOfRange { id: usize, size: usize },
    #[error("unknown tokenizer kind {0:?}")]
    UnknownKind(String),
    #[error("vocabulary line {line}: {detail}")]
    Parse { line: usize, detail: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    Byte,
    Char,
}

impl TokenizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenizerKind::Byte => "byte",
            TokenizerKind::Char => "char",
        }
    }
}

impl fmt::Display for TokenizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TokenizerKind {
    type Err = TokenizerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "byte" => Ok(TokenizerKind::Byte),
            "char" => Ok(TokenizerKind::Char),
            other => Err(TokenizerError::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Special {
    Bos,
    Eos,
    Pad,
    Unk,
}

impl Special {
    const ALL: [Special; 4] = [Special::Bos, Special::Eos, Special::Pad, Special::Unk];

    fn label(self) -> &'static str {
        match self {
            Special::Bos => "<bos>",
            Special::Eos => "<eos>",
            Special::Pad => "<pad>",
            Special::Unk => "<unk>",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Byte(u8),
    Char(char),
    Special(Special),
}

impl Token {
    /// One-line text form used by the vocabulary file.
    fn render(self) -> String {
        match self {
            Token::Special(s) => s.label().to_string(),
            Token::Char('\n') => "<0x0A>".to_string(),
            Token::Char(c) => c.to_string(),
            Token::Byte(b) if (0x21..0x7f).contains(&b) && b != b'<' => (b as char).to_string(),
            Token::Byte(b) => format!("<0x{b:02X}>"),
        }
    }
}

/// An id ↔ token table with its special ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    kind: TokenizerKind,
    tokens: Vec<Token>,
    byte_to_id: [Option<usize>; 256],
    bos: usize,
    eos: usize,
    pad: usize,
    unk: usize,
}

/// Characters covered by the char-level tokenizer: newline plus printable
/// ASCII (space through `~`).
fn char_alphabet() -> impl Iterator<Item = char> {
    std::iter::once('\n').chain((0x20u8..0x7f).map(char::from))
}

impl Vocabulary {
    pub fn new(kind: TokenizerKind) -> Self {
        let tokens: Vec<Token> = match kind {
            TokenizerKind::Byte => (0..=255u8)
                .map(Token::Byte)
                .chain(Special::ALL.map(Token::Special))
                .collect(),
            TokenizerKind::Char => [Special::Pad, Special::Bos, Special::Eos, Special::Unk]
                .map(Token::Special)
                .into_iter()
                .chain(char_alphabet().map(Token::Char))
                .collect(),
        };
        Self::from_tokens(kind, tokens).expect("built-in vocabularies are well formed")
    }

    pub fn byte() -> Self {
        Self::new(TokenizerKind::Byte)
    }

    pub fn char() -> Self {
        Self::new(TokenizerKind::Char)
    }

    fn from_tokens(kind: TokenizerKind, tokens: Vec<Token>) -> Result<Self, TokenizerError> {
        let find = |s: Special| {
            tokens
                .iter()
                .position(|&t| t == Token::Special(s))
                .ok_or_else(|| TokenizerError::Parse {
                    line: 0,
                    detail: format!("missing special {}", s.label()),
                })
        };
        let mut byte_to_id = [None; 256];
        for (id, t) in tokens.iter().enumerate() {
            let byte = match (*t, kind) {
                (Token::Byte(b), TokenizerKind::Byte) => Some(b),
                (Token::Char(c), TokenizerKind::Char) if c.is_ascii() => Some(c as u8),
                (Token::Special(_), _) => None,
                _ => {
                    return Err(TokenizerError::Parse {
                        line: id + 1,
                        detail: format!("token {t:?} does not belong to a {kind} vocabulary"),
                    })
                }
            };
            if let Some(b) = byte {
                if byte_to_id[b as usize].replace(id).is_some() {
                    return Err(TokenizerError::Parse {
                        line: id + 1,
                        detail: "duplicate token".into(),
                    });
                }
            }
        }
        Ok(Vocabulary {
            kind,
            byte_to_id,
            bos: find(Special::Bos)?,
            eos: find(Special::Eos)?,
            pad: find(Special::Pad)?,
            unk: find(Special::Unk)?,
            tokens,
        })
    }

    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn bos(&self) -> usize {
        self.bos
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn unk(&self) -> usize {
        self.unk
    }

    pub fn token(&self, id: usize) -> Option<Token> {
        self.tokens.get(id).copied()
    }

    pub fn is_special(&self, id: usize) -> bool {
        matches!(self.token(id), Some(Token::Special(_)))
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        match self.kind {
            TokenizerKind::Byte => text
                .bytes()
                .map(|b| self.byte_to_id[b as usize].unwrap_or(self.unk))
                .collect(),
            TokenizerKind::Char => text
                .chars()
                .map(|c| {
                    if c.is_ascii() {
                        self.byte_to_id[c as usize].unwrap_or(self.unk)
                    } else {
                        self.unk
                    }
                })
                .collect(),
        }
    }

    /// Specials other than UNK render as nothing; UNK renders as `?`.
    /// Byte sequences that are not valid UTF-8 decode lossily.
    pub fn decode(&self, ids: &[usize]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::with_capacity(ids.len());
        for &id in ids {
            match self.token(id) {
                None => {
                    return Err(TokenizerError::OutOfRange {
                        id,
                        size: self.size(),
                    })
                }
                Some(Token::Special(Special::Unk)) => bytes.push(b'?'),
                Some(Token::Special(_)) => {}
                Some(Token::Byte(b)) => bytes.push(b),
                Some(Token::Char(c)) => {
                    let mut buf = [0u8; 4];
                    bytes.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
                }
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// UTF-8 text, one token per line, line number = id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(&t.render());
            out.push('\n');
        }
        out
    }

    pub fn from_text(kind: TokenizerKind, text: &str) -> Result<Self, TokenizerError> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        let tokens = body
            .split('\n')
            .enumerate()
            .map(|(i, line)| {
                parse_token(kind, line).ok_or_else(|| TokenizerError::Parse {
                    line: i + 1,
                    detail: format!("unrecognised token {line:?}"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_tokens(kind, tokens)
    }
}

fn parse_token(kind: TokenizerKind, line: &str) -> Option<Token> {
    if let Some(s) = Special::ALL.iter().find(|s| s.label() == line) {
        return Some(Token::Special(*s));
    }
    let escaped = line
        .strip_prefix("<0x")
        .and_then(|r| r.strip_suffix('>'))
        .and_then(|hex| u8::from_str_radix(hex, 16).ok());
    let mut chars = line.chars();
    let single = match (chars.next(), chars.next()) {
        (Some(c), None) => Some(c),
        _ => None,
    };
    match kind {
        TokenizerKind::Byte => escaped
            .or_else(|| single.filter(char::is_ascii).map(|c| c as u8))
            .map(Token::Byte),
        TokenizerKind::Char => escaped.map(char::from).or(single).map(Token::Char),
    }
}
