use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Padding id for byte-level inputs; ids `0..=255` are the bytes themselves.
pub const BYTE_PAD: u32 = 256;

/// Token ids with a recorded true length; positions at and beyond
/// `true_len` are padding.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub true_len: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, true_len: usize) -> Result<Self> {
        if true_len > ids.len() {
            return Err(Error::Param(format!(
                "true length {true_len} exceeds {} ids",
                ids.len()
            )));
        }
        Ok(TokenSequence { ids, true_len })
    }

    /// A sequence with no padding.
    pub fn unpadded(ids: Vec<u32>) -> Self {
        let true_len = ids.len();
        TokenSequence { ids, true_len }
    }

    /// Byte tokens, truncated or padded to exactly `max_len`.
    ///
    /// The second value reports whether bytes were dropped.
    pub fn from_bytes(bytes: &[u8], max_len: usize) -> (Self, bool) {
        let kept = bytes.len().min(max_len);
        let mut ids: Vec<u32> = bytes[..kept].iter().map(|&b| b as u32).collect();
        ids.resize(max_len, BYTE_PAD);
        (TokenSequence { ids, true_len: kept }, kept < bytes.len())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `true` at real positions, `false` at padding.
    pub fn pad_mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| i < self.true_len).collect()
    }

    pub fn real(&self) -> &[u32] {
        &self.ids[..self.true_len]
    }

    /// Appends `pad` until the sequence holds `len` ids.
    pub fn pad_to(&self, len: usize, pad: u32) -> Result<Self> {
        if len < self.ids.len() {
            return Err(Error::Length { len: self.ids.len(), max: len });
        }
        let mut ids = self.ids.clone();
        ids.resize(len, pad);
        Ok(TokenSequence { ids, true_len: self.true_len })
    }

    /// Unpadded prefix as bytes; fails on ids above 255.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.real()
            .iter()
            .map(|&t| u8::try_from(t).map_err(|_| Error::Param(format!("token {t} is not a byte"))))
            .collect()
    }
}
