//! Ordered symbol table mapping characters to class indices. The CTC blank
//! is not a member; it implicitly occupies index `len()`.

use std::collections::HashMap;

use crate::ctc::LabelSeq;
use crate::error::{Error, Result};
use crate::metrics::nfc;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Charset {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl Charset {
    pub fn new(symbols: Vec<char>) -> Result<Charset> {
        if symbols.is_empty() {
            return Err(Error::Config("charset must not be empty".into()));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, &c) in symbols.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(Error::Config(format!("duplicate charset symbol {c:?}")));
            }
        }
        Ok(Charset { symbols, index })
    }

    /// Build from the NFC form of a string, one symbol per character.
    pub fn from_text(text: &str) -> Result<Charset> {
        Charset::new(nfc(text).chars().collect())
    }

    /// The 33 Russian letters, the 9 extra Kazakh letters, space, digits,
    /// and basic punctuation. Bundles carry their own charset; this is only
    /// the default for new runs.
    pub fn default_cyrillic() -> Charset {
        let mut symbols: Vec<char> = "абвгдеёжзийклмнопрстуфхцчшщъыьэюя".chars().collect();
        symbols.extend("әғқңөұүһі".chars());
        symbols.push(' ');
        symbols.extend('0'..='9');
        symbols.extend(".,!?-".chars());
        Charset::new(symbols).expect("default charset is duplicate-free")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty charsets
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn as_string(&self) -> String {
        self.symbols.iter().collect()
    }

    /// Reserved blank index (one past the last symbol).
    pub fn blank_index(&self) -> usize {
        self.symbols.len()
    }

    /// Class count including the blank.
    pub fn classes_with_blank(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn char_at(&self, i: usize) -> Option<char> {
        self.symbols.get(i).copied()
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    /// Encode NFC-normalized text; out-of-charset characters are an error
    /// naming the character and its 0-based position.
    pub fn encode(&self, text: &str) -> Result<LabelSeq> {
        let normalized = nfc(text);
        let mut out = Vec::with_capacity(normalized.chars().count());
        for (pos, c) in normalized.chars().enumerate() {
            match self.index_of(c) {
                Some(i) => out.push(i),
                None => return Err(Error::CharsetMiss { ch: c, pos }),
            }
        }
        LabelSeq::new(out, self.len())
    }

    pub fn decode(&self, label: &LabelSeq) -> String {
        label
            .indices()
            .iter()
            .map(|&i| self.symbols[i])
            .collect()
    }

    /// FNV-1a over the UTF-8 bytes of the symbol string; used to detect
    /// charset mismatches between artifacts.
    pub fn hash_hex(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.as_string().into_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}
