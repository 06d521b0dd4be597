//! Byte-level tokenizer: each byte is its own token, plus two specials.

pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const VOCAB_SIZE: usize = 258;

pub fn encode(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

/// Inverse of [`encode`]; special tokens are dropped.
pub fn decode(tokens: &[u32]) -> Vec<u8> {
    tokens
        .iter()
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect()
}
