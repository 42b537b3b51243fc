//! Byte-level tokenizer: 256 byte tokens plus pad/bos/eos specials.
//! No merges, no normalization — `detokenize(tokenize(s)) == s` for any bytes.

pub const PAD: usize = 256;
pub const BOS: usize = 257;
pub const EOS: usize = 258;

/// Smallest vocabulary a model needs to consume tokenized text.
pub const VOCAB_SIZE: usize = 259;

pub fn tokenize(text: &str) -> Vec<usize> {
    tokenize_bytes(text.as_bytes())
}

pub fn tokenize_bytes(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| usize::from(b)).collect()
}

/// Byte tokens map back to bytes; specials are dropped.
pub fn detokenize(tokens: &[usize]) -> Vec<u8> {
    tokens
        .iter()
        .filter_map(|&t| u8::try_from(t).ok())
        .collect()
}

/// Lossy text view of detokenized bytes (for display only).
pub fn detokenize_text(tokens: &[usize]) -> String {
    String::from_utf8_lossy(&detokenize(tokens)).into_owned()
}
