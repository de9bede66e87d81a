//! Text normalization and tokenization shared by ingestion, embedding keys
//! and the text metrics.

use unicode_normalization::UnicodeNormalization;

/// Unicode NFC with outer whitespace trimmed. Inner casing and punctuation
/// are preserved.
pub fn normalize(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    nfc.trim().to_string()
}

/// NFC only; used for content keys so that lookups are insensitive to the
/// composition form of the caller's string.
pub fn nfc(text: &str) -> String {
    text.nfc().collect()
}

/// Lowercases, detaches every punctuation or symbol character into its own
/// token and splits on whitespace.
///
/// ```
/// use cams_core::text::tokenize;
/// assert_eq!(tokenize("I don't, OK?"), ["i", "don", "'", "t", ",", "ok", "?"]);
/// ```
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            flush(&mut word, &mut tokens);
        } else if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else {
            flush(&mut word, &mut tokens);
            tokens.push(c.to_lowercase().collect());
        }
    }
    flush(&mut word, &mut tokens);
    tokens
}

fn flush(word: &mut String, tokens: &mut Vec<String>) {
    if !word.is_empty() {
        tokens.push(std::mem::take(word));
    }
}
