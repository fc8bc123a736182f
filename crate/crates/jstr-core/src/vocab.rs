//! Character-level vocabulary: 36 alphanumerics plus 5 control tokens.
//!
//! The table is fixed and documented in the README:
//! PAD=0, SEP=1, EOS=2, TRUE=3, FALSE=4, 'a'..'z'=5..30, '0'..'9'=31..40.

use thiserror::Error;

pub const VOCAB_SIZE: usize = 41;

pub const PAD: TokenId = TokenId(0);
pub const SEP: TokenId = TokenId(1);
pub const EOS: TokenId = TokenId(2);
pub const TRUE: TokenId = TokenId(3);
pub const FALSE: TokenId = TokenId(4);

const CHAR_BASE: u8 = 5;
const DIGIT_BASE: u8 = 31;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("character {0:?} is not in the normalized charset")]
    UnknownChar(char),
    #[error("token id {0} out of range (vocab size {VOCAB_SIZE})")]
    OutOfRange(u8),
}

/// Integer in [0, 41).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenId(pub u8);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_char(self) -> bool {
        self.0 >= CHAR_BASE
    }

    /// Debug rendering; specials come out bracketed.
    pub fn render(self) -> String {
        match self {
            PAD => "[PAD]".to_string(),
            SEP => "[SEP]".to_string(),
            EOS => "[EOS]".to_string(),
            TRUE => "[TRUE]".to_string(),
            FALSE => "[FALSE]".to_string(),
            t => char_of(t).expect("valid char token").to_string(),
        }
    }
}

/// Lowercase and drop everything outside [a-z0-9].
pub fn normalize(text: &str) -> String {
    text.chars()
        .flat_map(|c| c.to_lowercase())
        .filter(|c| c.is_ascii_lowercase() || c.is_ascii_digit())
        .collect()
}

pub fn token_of(c: char) -> Result<TokenId, VocabError> {
    match c {
        'a'..='z' => Ok(TokenId(CHAR_BASE + (c as u8 - b'a'))),
        '0'..='9' => Ok(TokenId(DIGIT_BASE + (c as u8 - b'0'))),
        other => Err(VocabError::UnknownChar(other)),
    }
}

pub fn char_of(id: TokenId) -> Result<char, VocabError> {
    match id.0 {
        5..=30 => Ok((b'a' + (id.0 - CHAR_BASE)) as char),
        31..=40 => Ok((b'0' + (id.0 - DIGIT_BASE)) as char),
        _ => Err(VocabError::OutOfRange(id.0)),
    }
}

/// Per-character encoding of an already-normalized string. No specials are
/// appended; un-normalized input is rejected.
pub fn encode(text: &str) -> Result<Vec<TokenId>, VocabError> {
    text.chars().map(token_of).collect()
}

/// Inverse of [`encode`]: character tokens become characters, specials are
/// stripped. Ids outside the vocabulary are an error.
pub fn decode(ids: &[TokenId]) -> Result<String, VocabError> {
    let mut out = String::with_capacity(ids.len());
    for &id in ids {
        if id.0 as usize >= VOCAB_SIZE {
            return Err(VocabError::OutOfRange(id.0));
        }
        if id.is_char() {
            out.push(char_of(id)?);
        }
    }
    Ok(out)
}

/// Debug rendering with specials shown as `[SEP]`, `[EOS]`, etc.
pub fn render_debug(ids: &[TokenId]) -> String {
    ids.iter().map(|id| id.render()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("Cafe!"), "cafe");
        assert_eq!(normalize("ICDAR-2013"), "icdar2013");
        assert_eq!(normalize("stop"), "stop");
        assert_eq!(normalize("!!!"), "");
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode("").unwrap(), vec![]);
        assert_eq!(encode("cat").unwrap(), vec![TokenId(7), TokenId(5), TokenId(24)]);
        assert_eq!(encode("a0").unwrap(), vec![TokenId(5), TokenId(31)]);
        assert_eq!(encode("Cat"), Err(VocabError::UnknownChar('C')));
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode(&[TokenId(7), TokenId(5), TokenId(24)]).unwrap(), "cat");
        assert_eq!(decode(&[]).unwrap(), "");
        // EOS is stripped from recognition output.
        assert_eq!(decode(&[TokenId(7), TokenId(5), TokenId(24), EOS]).unwrap(), "cat");
        assert_eq!(decode(&[TokenId(41)]), Err(VocabError::OutOfRange(41)));
    }

    #[test]
    fn debug_rendering_keeps_specials() {
        assert_eq!(render_debug(&[SEP, TokenId(7), EOS]), "[SEP]c[EOS]");
        assert_eq!(render_debug(&[TRUE, FALSE, PAD]), "[TRUE][FALSE][PAD]");
    }

    #[test]
    fn table_is_bijective() {
        for raw in 5..41u8 {
            let c = char_of(TokenId(raw)).unwrap();
            assert_eq!(token_of(c).unwrap(), TokenId(raw));
        }
    }

    proptest! {
        #[test]
        fn round_trip_any_string(s in "\\PC*") {
            let n = normalize(&s);
            let ids = encode(&n).unwrap();
            prop_assert_eq!(decode(&ids).unwrap(), n);
        }

        #[test]
        fn encode_never_emits_specials(s in "[a-z0-9]{0,40}") {
            for id in encode(&s).unwrap() {
                prop_assert!(id.index() >= 5);
            }
        }
    }
}
