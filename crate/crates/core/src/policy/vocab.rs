//! Byte-level vocabulary with atomic protocol tags.
//!
//! Symbols `0..256` are raw UTF-8 bytes. The six protocol tags, padding and
//! end-of-sequence each own one reserved symbol above the byte range, so a
//! tag can never be split across sampling steps.

use sha2::{Digest, Sha256};

use crate::protocol::TAGS;

pub type Symbol = u32;

pub const TOOL_OPEN: Symbol = 256;
pub const TOOL_CLOSE: Symbol = 257;
pub const MATCHES_OPEN: Symbol = 258;
pub const MATCHES_CLOSE: Symbol = 259;
pub const ANSWER_OPEN: Symbol = 260;
pub const ANSWER_CLOSE: Symbol = 261;
pub const PAD: Symbol = 262;
pub const EOS: Symbol = 263;

/// Total number of symbols in the standard vocabulary.
pub const VOCAB_SIZE: usize = 264;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tags: [(&'static str, Symbol); 6],
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocabulary {
    pub fn standard() -> Self {
        Vocabulary {
            tags: [
                (TAGS.tool_open, TOOL_OPEN),
                (TAGS.tool_close, TOOL_CLOSE),
                (TAGS.matches_open, MATCHES_OPEN),
                (TAGS.matches_close, MATCHES_CLOSE),
                (TAGS.answer_open, ANSWER_OPEN),
                (TAGS.answer_close, ANSWER_CLOSE),
            ],
        }
    }

    pub fn size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn tag_symbol(&self, tag: &str) -> Option<Symbol> {
        self.tags.iter().find(|(t, _)| *t == tag).map(|&(_, s)| s)
    }

    pub fn tag_text(&self, symbol: Symbol) -> Option<&'static str> {
        self.tags.iter().find(|&&(_, s)| s == symbol).map(|&(t, _)| t)
    }

    pub fn is_reserved(symbol: Symbol) -> bool {
        symbol as usize >= 256
    }

    pub fn encode(&self, text: &str) -> Vec<Symbol> {
        let bytes = text.as_bytes();
        let mut out = Vec::with_capacity(bytes.len());
        let mut i = 0;
        'outer: while i < bytes.len() {
            if bytes[i] == b'<' {
                // closing tags are longer than their openers, so try them first
                for &(tag, sym) in self.tags.iter().rev() {
                    if bytes[i..].starts_with(tag.as_bytes()) {
                        out.push(sym);
                        i += tag.len();
                        continue 'outer;
                    }
                }
            }
            out.push(bytes[i] as Symbol);
            i += 1;
        }
        out
    }

    /// Inverse of [`encode`](Self::encode). Invalid UTF-8 produced by a model
    /// is replaced lossily; padding and end-of-sequence decode to nothing.
    pub fn decode(&self, ids: &[Symbol]) -> String {
        let mut out = String::new();
        let mut pending: Vec<u8> = Vec::new();
        for &id in ids {
            if (id as usize) < 256 {
                pending.push(id as u8);
                continue;
            }
            out.push_str(&String::from_utf8_lossy(&pending));
            pending.clear();
            if let Some(tag) = self.tag_text(id) {
                out.push_str(tag);
            }
        }
        out.push_str(&String::from_utf8_lossy(&pending));
        out
    }

    /// Stable fingerprint of the symbol table, stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("bytes:256;size:{VOCAB_SIZE};pad:{PAD};eos:{EOS}").as_bytes());
        for (tag, sym) in &self.tags {
            h.update(format!(";{tag}={sym}").as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
