use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::pixels::PixelSequence;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PLANE: usize = CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * CIFAR_PLANE;

/// Rec. 601 luma weights for red, green and blue.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// One CIFAR-10 image: a label and channel-planar RGB bytes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cifar10Record {
    pub label: u8,
    /// 1024 red, then 1024 green, then 1024 blue bytes, each plane row-major.
    pub pixels: Vec<u8>,
}

impl Cifar10Record {
    pub fn new(label: u8, pixels: Vec<u8>) -> Result<Self> {
        if label > 9 {
            return Err(Error::Format(format!("CIFAR-10 label {label} exceeds 9")));
        }
        if pixels.len() != 3 * CIFAR_PLANE {
            return Err(Error::Format(format!("CIFAR-10 image needs {} bytes, got {}", 3 * CIFAR_PLANE, pixels.len())));
        }
        Ok(Cifar10Record { label, pixels })
    }

    pub fn rgb(&self, i: usize) -> [u8; 3] {
        [self.pixels[i], self.pixels[CIFAR_PLANE + i], self.pixels[2 * CIFAR_PLANE + i]]
    }
}

pub fn gray(rgb: [u8; 3]) -> u8 {
    let y: f64 = rgb.iter().zip(LUMA_WEIGHTS).map(|(&c, w)| c as f64 * w).sum();
    y.round().clamp(0.0, 255.0) as u8
}

pub fn to_grayscale(record: &Cifar10Record) -> PixelSequence {
    let tokens = (0..CIFAR_PLANE).map(|i| gray(record.rgb(i))).collect();
    PixelSequence { height: CIFAR_SIDE, width: CIFAR_SIDE, tokens }
}

/// Parses a CIFAR-10 binary batch held in memory.
pub fn parse_cifar10_bytes(bytes: &[u8]) -> Result<Vec<Cifar10Record>> {
    let rem = bytes.len() % CIFAR_RECORD_BYTES;
    if rem != 0 {
        return Err(Error::Format(format!(
            "{} bytes is not a multiple of {CIFAR_RECORD_BYTES}: {rem} trailing bytes",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .enumerate()
        .map(|(i, c)| {
            Cifar10Record::new(c[0], c[1..].to_vec())
                .map_err(|e| Error::Format(format!("record {i}: {e}")))
        })
        .collect()
}

pub fn parse_cifar10(path: &Path) -> Result<Vec<Cifar10Record>> {
    parse_cifar10_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn encode_cifar10(records: &[Cifar10Record]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * CIFAR_RECORD_BYTES);
    for r in records {
        out.push(r.label);
        out.extend_from_slice(&r.pixels);
    }
    out
}
