use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::TokenSequence;
use crate::error::{Error, Result};

/// Row-major 8-bit intensities with their grid extents.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelSequence {
    pub height: usize,
    pub width: usize,
    pub tokens: Vec<u8>,
}

impl PixelSequence {
    pub fn new(height: usize, width: usize, tokens: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || tokens.len() != height * width {
            return Err(Error::Shape { op: "pixel_sequence", lhs: vec![height, width], rhs: vec![tokens.len()] });
        }
        Ok(PixelSequence { height, width, tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.tokens[row * self.width + col]
    }

    /// Inverse of [`image_to_sequence`].
    pub fn to_grid(&self) -> Vec<Vec<u8>> {
        self.tokens.chunks(self.width).map(<[u8]>::to_vec).collect()
    }

    /// Model input: intensities are the token ids (vocabulary 256).
    pub fn to_token_sequence(&self) -> TokenSequence {
        TokenSequence::unpadded(self.tokens.iter().map(|&b| b as u32).collect())
    }
}

/// Flattens a rectangular grid row by row.
pub fn image_to_sequence(grid: &[Vec<u8>]) -> Result<PixelSequence> {
    let height = grid.len();
    let width = grid.first().map_or(0, Vec::len);
    if let Some(bad) = grid.iter().position(|r| r.len() != width) {
        return Err(Error::Shape { op: "image_to_sequence", lhs: vec![height, width], rhs: vec![bad, grid[bad].len()] });
    }
    PixelSequence::new(height, width, grid.concat())
}

/// Binary records: `u16 height, u16 width` (little-endian), the pixels,
/// then one label byte.
pub fn encode_records(records: &[(PixelSequence, u8)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (p, label) in records {
        let (h, w) = (u16::try_from(p.height), u16::try_from(p.width));
        let (Ok(h), Ok(w)) = (h, w) else {
            return Err(Error::Format(format!("{}x{} exceeds the u16 record header", p.height, p.width)));
        };
        out.extend_from_slice(&h.to_le_bytes());
        out.extend_from_slice(&w.to_le_bytes());
        out.extend_from_slice(&p.tokens);
        out.push(*label);
    }
    Ok(out)
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<(PixelSequence, u8)>> {
    let mut out = Vec::new();
    let mut at = 0;
    while at < bytes.len() {
        if bytes.len() - at < 4 {
            return Err(Error::Format(format!("{} trailing bytes at offset {at}", bytes.len() - at)));
        }
        let h = u16::from_le_bytes([bytes[at], bytes[at + 1]]) as usize;
        let w = u16::from_le_bytes([bytes[at + 2], bytes[at + 3]]) as usize;
        let end = at + 4 + h * w + 1;
        if end > bytes.len() {
            return Err(Error::Format(format!("record at offset {at} needs {} bytes, {} remain", end - at, bytes.len() - at)));
        }
        let p = PixelSequence::new(h, w, bytes[at + 4..end - 1].to_vec())?;
        out.push((p, bytes[end - 1]));
        at = end;
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[(PixelSequence, u8)]) -> Result<()> {
    fs::write(path, encode_records(records)?).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<(PixelSequence, u8)>> {
    decode_records(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flattening_is_row_major_and_invertible() {
        let grid = vec![vec![1, 2], vec![3, 4]];
        let s = image_to_sequence(&grid).unwrap();
        assert_eq!(s.tokens, vec![1, 2, 3, 4]);
        assert_eq!(s.to_grid(), grid);
        let white = image_to_sequence(&vec![vec![255u8; 32]; 32]).unwrap();
        assert_eq!(white.len(), 1024);
        assert!(white.tokens.iter().all(|&t| t == 255));
    }

    #[test]
    fn ragged_grid_rejected() {
        assert!(image_to_sequence(&[vec![1, 2], vec![3]]).is_err());
    }

    #[test]
    fn records_round_trip() {
        let recs = vec![
            (PixelSequence::new(2, 3, vec![0, 1, 2, 3, 4, 255]).unwrap(), 1),
            (PixelSequence::new(1, 1, vec![9]).unwrap(), 0),
        ];
        let bytes = encode_records(&recs).unwrap();
        assert_eq!(bytes.len(), 4 + 6 + 1 + 4 + 1 + 1);
        assert_eq!(decode_records(&bytes).unwrap(), recs);
        assert!(decode_records(&bytes[..bytes.len() - 1]).is_err());
    }
}
