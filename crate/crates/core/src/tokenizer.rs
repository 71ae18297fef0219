//! Byte-level tokenizer: id 0 is BOS, id 1 is EOS, ids 2..=257 are bytes.

use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const BYTE_OFFSET: u32 = 2;
pub const VOCAB_SIZE: usize = 258;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub text: String,
}

impl TokenSequence {
    /// Number of ids including BOS and EOS.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.len() <= 2
    }

    pub fn ids_usize(&self) -> Vec<usize> {
        self.ids.iter().map(|&i| i as usize).collect()
    }
}

pub fn encode(text: &str) -> TokenSequence {
    let mut ids = Vec::with_capacity(text.len() + 2);
    ids.push(BOS);
    ids.extend(text.bytes().map(|b| b as u32 + BYTE_OFFSET));
    ids.push(EOS);
    TokenSequence {
        ids,
        text: text.to_string(),
    }
}

pub fn decode(ids: &[u32]) -> Result<String> {
    match (ids.first(), ids.last()) {
        (Some(&BOS), Some(&EOS)) if ids.len() >= 2 => {}
        _ => {
            return Err(Error::Framing(format!(
                "expected [BOS .. EOS], got {} ids",
                ids.len()
            )))
        }
    }
    let bytes = ids[1..ids.len() - 1]
        .iter()
        .map(|&id| byte_of(id).ok_or(Error::TokenOutOfRange(id)))
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|e| Error::Framing(format!("invalid UTF-8: {e}")))
}

/// Byte carried by a token id, `None` for specials and out-of-range ids.
pub fn byte_of(id: u32) -> Option<u8> {
    if (BYTE_OFFSET..BYTE_OFFSET + 256).contains(&id) {
        Some((id - BYTE_OFFSET) as u8)
    } else {
        None
    }
}

/// Text carried by generated ids, skipping specials and replacing invalid
/// UTF-8.
pub fn lossy_text(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids.iter().filter_map(|&id| byte_of(id)).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}
