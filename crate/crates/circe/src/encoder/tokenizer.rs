//! Hash-based tokenizer: lowercase, split on anything that is not an ASCII
//! alphanumeric, FNV-1a 64-bit hash each piece, reduce modulo the vocab.
//! Id 0 is reserved for empty text.

use super::EncoderConfig;

/// Token ids in `[0, vocab)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Splits `text` into hashed token ids. Empty text yields the reserved id 0.
pub fn tokenize(text: &str, config: &EncoderConfig) -> TokenSequence {
    let lower = text.to_lowercase();
    let ids: Vec<u32> = lower
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|piece| !piece.is_empty())
        .map(|piece| (fnv1a64(piece.as_bytes()) % config.vocab as u64) as u32)
        .collect();
    if ids.is_empty() {
        TokenSequence { ids: vec![0] }
    } else {
        TokenSequence { ids }
    }
}
