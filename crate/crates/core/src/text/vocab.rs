use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const MASK: u32 = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<s>", "</s>", "<unk>", "<mask>"];

/// A vocabulary entry.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Piece {
    Reserved(u32),
    /// Target-language tag, e.g. `<2de>`.
    Tag(String),
    Bytes(Vec<u8>),
}

/// Shared multilingual vocabulary: reserved tokens, one tag per language,
/// then byte-level subword pieces.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pieces: Vec<Piece>,
    bytes_index: HashMap<Vec<u8>, u32>,
    tags: Vec<String>,
}

pub fn tag_token(lang: &str) -> String {
    format!("<2{lang}>")
}

impl Vocabulary {
    /// Reserved tokens followed by one tag per language.
    pub fn with_languages<S: AsRef<str>>(languages: &[S]) -> Result<Self> {
        let mut vocab = Self {
            pieces: (0..RESERVED.len() as u32).map(Piece::Reserved).collect(),
            bytes_index: HashMap::new(),
            tags: Vec::new(),
        };
        for lang in languages {
            let lang = lang.as_ref();
            let valid = !lang.is_empty()
                && lang.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !valid {
                return Err(Error::Language(lang.to_string()));
            }
            if vocab.tags.iter().any(|t| t == lang) {
                return Err(Error::Config(format!("duplicate language `{lang}`")));
            }
            vocab.tags.push(lang.to_string());
            vocab.pieces.push(Piece::Tag(lang.to_string()));
        }
        Ok(vocab)
    }

    /// Appends a byte piece, returning its id. Existing pieces are reused.
    pub fn push_bytes(&mut self, bytes: Vec<u8>) -> u32 {
        if let Some(&id) = self.bytes_index.get(&bytes) {
            return id;
        }
        let id = self.pieces.len() as u32;
        self.bytes_index.insert(bytes.clone(), id);
        self.pieces.push(Piece::Bytes(bytes));
        id
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn piece(&self, id: u32) -> Option<&Piece> {
        self.pieces.get(id as usize)
    }

    pub fn id_of_bytes(&self, bytes: &[u8]) -> Option<u32> {
        self.bytes_index.get(bytes).copied()
    }

    pub fn languages(&self) -> &[String] {
        &self.tags
    }

    pub fn tag_id(&self, lang: &str) -> Result<u32> {
        self.tags
            .iter()
            .position(|t| t == lang)
            .map(|i| (RESERVED.len() + i) as u32)
            .ok_or_else(|| Error::Language(lang.to_string()))
    }

    pub fn is_tag(&self, id: u32) -> bool {
        let first = RESERVED.len() as u32;
        (first..first + self.tags.len() as u32).contains(&id)
    }

    pub fn tag_language(&self, id: u32) -> Option<&str> {
        match self.piece(id) {
            Some(Piece::Tag(lang)) => Some(lang),
            _ => None,
        }
    }

    /// Reserved tokens and language tags.
    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < RESERVED.len() + self.tags.len()
    }

    pub fn token_string(&self, id: u32) -> String {
        match self.piece(id) {
            Some(Piece::Reserved(r)) => RESERVED[*r as usize].to_string(),
            Some(Piece::Tag(lang)) => tag_token(lang),
            Some(Piece::Bytes(b)) => escape_bytes(b),
            None => format!("<invalid:{id}>"),
        }
    }

    /// One token per line, line number = id.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for id in 0..self.len() as u32 {
            out.push_str(&self.token_string(id));
            out.push('\n');
        }
        out
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        for (i, want) in RESERVED.iter().enumerate() {
            if lines.get(i) != Some(want) {
                return Err(Error::Config(format!(
                    "vocabulary line {}: expected reserved token {want}",
                    i + 1
                )));
            }
        }
        let mut langs = Vec::new();
        let mut rest = &lines[RESERVED.len()..];
        while let Some(line) = rest.first() {
            match line.strip_prefix("<2").and_then(|l| l.strip_suffix('>')) {
                Some(lang) => langs.push(lang.to_string()),
                None => break,
            }
            rest = &rest[1..];
        }
        let mut vocab = Self::with_languages(&langs)?;
        for (offset, line) in rest.iter().enumerate() {
            let lineno = RESERVED.len() + langs.len() + offset + 1;
            let bytes = unescape_bytes(line)
                .ok_or_else(|| Error::Config(format!("vocabulary line {lineno}: bad token `{line}`")))?;
            let before = vocab.len();
            vocab.push_bytes(bytes);
            if vocab.len() == before {
                return Err(Error::Config(format!("vocabulary line {lineno}: duplicate token")));
            }
        }
        Ok(vocab)
    }
}

/// Printable ASCII is kept; `\`, `<`, whitespace and everything else become `\xHH`.
pub fn escape_bytes(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len());
    for &b in bytes {
        if (0x21..=0x7e).contains(&b) && b != b'\\' && b != b'<' {
            s.push(b as char);
        } else {
            let _ = write!(s, "\\x{b:02x}");
        }
    }
    s
}

pub fn unescape_bytes(s: &str) -> Option<Vec<u8>> {
    let raw = s.as_bytes();
    let mut out = Vec::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        match raw[i] {
            b'\\' => {
                if raw.get(i + 1) != Some(&b'x') {
                    return None;
                }
                let hex = std::str::from_utf8(raw.get(i + 2..i + 4)?).ok()?;
                out.push(u8::from_str_radix(hex, 16).ok()?);
                i += 4;
            }
            b'<' => return None,
            b => {
                out.push(b);
                i += 1;
            }
        }
    }
    if out.is_empty() {
        None
    } else {
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_and_tags() {
        let v = Vocabulary::with_languages(&["en", "de"]).unwrap();
        assert_eq!(v.token_string(PAD), "<pad>");
        assert_eq!(v.token_string(MASK), "<mask>");
        assert_eq!(v.tag_id("en").unwrap(), 5);
        assert_eq!(v.tag_id("de").unwrap(), 6);
        assert!(v.is_tag(6) && !v.is_tag(7) && !v.is_tag(BOS));
        assert!(matches!(v.tag_id("fr"), Err(Error::Language(_))));
        assert!(Vocabulary::with_languages(&["en", "en"]).is_err());
    }

    #[test]
    fn escaping_round_trips_every_byte() {
        let all: Vec<u8> = (0..=255).collect();
        let s = escape_bytes(&all);
        assert!(!s.contains(' ') && !s.contains('\n') && !s.contains('<'));
        assert_eq!(unescape_bytes(&s).unwrap(), all);
    }

    #[test]
    fn file_round_trip() {
        let mut v = Vocabulary::with_languages(&["en", "fr"]).unwrap();
        v.push_bytes(b" ".to_vec());
        v.push_bytes(b"<".to_vec());
        v.push_bytes("é".as_bytes().to_vec());
        let text = v.to_file_string();
        assert_eq!(Vocabulary::from_file_string(&text).unwrap(), v);
    }
}
