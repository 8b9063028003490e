//! Byte-level text and pair loaders, and the CIFAR-10 binary format.

mod cifar;
mod dataset;
mod sequence;
mod text;

pub use cifar::{
    encode_cifar10, gray, parse_cifar10, parse_cifar10_bytes, to_grayscale, Cifar10Record, CIFAR_PLANE,
    CIFAR_RECORD_BYTES, CIFAR_SIDE, LUMA_WEIGHTS,
};
pub use dataset::{load_examples, DatasetFormat, DatasetSpec};
pub use sequence::{TokenSequence, BYTE_PAD};
pub use text::{load_pairs, load_text_corpus, ByteDocument, DocumentPair, TextCorpus};
