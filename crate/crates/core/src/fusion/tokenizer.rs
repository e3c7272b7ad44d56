//! Token vocabulary and two interchangeable text tokenizers.
//!
//! The vocabulary follows the classic uncased-BERT layout: `[PAD]` at 0, a
//! block of unused slots, then `[UNK]`/`[CLS]`/`[SEP]`/`[MASK]` at ids
//! 100..=103, then ordinary pieces. Continuation pieces start with `##`.
//!
//! Two tokenizers cover the two uses in this crate: a greedy longest-match
//! wordpiece tokenizer (the real thing, for arbitrary text) and a plain
//! whitespace tokenizer (for tests where token boundaries must be obvious).

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 100;
pub const CLS_ID: u32 = 101;
pub const SEP_ID: u32 = 102;
pub const MASK_ID: u32 = 103;

/// First id available for ordinary pieces; everything below is reserved.
pub const FIRST_WORD_ID: u32 = 104;

/// Token string table with id lookup.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Build a vocabulary from ordinary pieces (continuations prefixed with
    /// `##`), laid out after the reserved special-token block.
    pub fn new(pieces: &[&str]) -> Result<Self> {
        let mut tokens: Vec<String> = Vec::with_capacity(FIRST_WORD_ID as usize + pieces.len());
        for i in 0..FIRST_WORD_ID {
            tokens.push(match i {
                PAD_ID => "[PAD]".to_string(),
                UNK_ID => "[UNK]".to_string(),
                CLS_ID => "[CLS]".to_string(),
                SEP_ID => "[SEP]".to_string(),
                MASK_ID => "[MASK]".to_string(),
                _ => format!("[unused{i}]"),
            });
        }
        for &p in pieces {
            tokens.push(p.to_string());
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Tokenizer(format!("duplicate piece `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_to_id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn id_to_token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    /// Special and reserved ids are exempt from masking and never produced
    /// from running text.
    pub fn is_special(&self, id: u32) -> bool {
        id < FIRST_WORD_ID
    }
}

/// How running text becomes piece ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizerMode {
    /// Greedy longest-match wordpiece with `##` continuations.
    WordPiece,
    /// Whole-word lookup only; words missing from the vocabulary become
    /// `[UNK]`.
    Whitespace,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vocab,
    mode: TokenizerMode,
}

impl Tokenizer {
    pub fn new(vocab: Vocab, mode: TokenizerMode) -> Self {
        Tokenizer { vocab, mode }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Lowercase, split on whitespace with punctuation as standalone words,
    /// then tokenize each word per the mode.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in split_words(text) {
            match self.mode {
                TokenizerMode::Whitespace => {
                    ids.push(self.vocab.token_to_id(&word).unwrap_or(UNK_ID));
                }
                TokenizerMode::WordPiece => self.wordpiece(&word, &mut ids),
            }
        }
        ids
    }

    fn wordpiece(&self, word: &str, out: &mut Vec<u32>) {
        let chars: Vec<char> = word.chars().collect();
        let mut start = 0;
        let mut pieces = Vec::new();
        while start < chars.len() {
            // Longest match first; continuations carry the ## prefix.
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let mut piece: String = chars[start..end].iter().collect();
                if start > 0 {
                    piece = format!("##{piece}");
                }
                if let Some(id) = self.vocab.token_to_id(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    // One un-splittable word -> single [UNK].
                    out.push(UNK_ID);
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut s = String::new();
        for &id in ids {
            let tok = self.vocab.id_to_token(id).unwrap_or("[UNK]");
            if let Some(cont) = tok.strip_prefix("##") {
                s.push_str(cont);
            } else {
                if !s.is_empty() {
                    s.push(' ');
                }
                s.push_str(tok);
            }
        }
        s
    }
}

fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for c in text.to_lowercase().chars() {
        if c.is_whitespace() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if c.is_ascii_punctuation() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(c.to_string());
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}
