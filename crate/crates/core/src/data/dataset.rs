use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::cifar::{parse_cifar10, to_grayscale};
use super::sequence::TokenSequence;
use super::text::{load_pairs, load_text_corpus};
use crate::error::{Error, Result};
use crate::model::Example;
use crate::tasks::listops::{encode_tokens, read_tsv};
use crate::tasks::pixels::read_records;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// `tokens<TAB>label` ListOps file.
    Listops,
    /// Text corpus directory or `text<TAB>label` file.
    Text,
    /// `doc1<TAB>doc2<TAB>label` file.
    Pairs,
    /// Pixel records (Pathfinder, Path-X, ingested images).
    Records,
    /// Raw CIFAR-10 binary batch, converted to grayscale on load.
    Cifar10,
}

/// Where a dataset lives and how to read it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub format: DatasetFormat,
    pub path: PathBuf,
    /// Token budget per document for text formats; defaults to the model's
    /// maximum length minus the CLS position.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_len: Option<usize>,
    /// Keep only the first `limit` examples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

fn fits(seq: TokenSequence, budget: usize) -> Result<TokenSequence> {
    if seq.len() > budget {
        return Err(Error::Length { len: seq.len() + 1, max: budget + 1 });
    }
    Ok(seq)
}

/// Reads `spec` into model examples for an encoder whose maximum length
/// (including CLS) is `model_max_len`.
pub fn load_examples(spec: &DatasetSpec, model_max_len: usize) -> Result<Vec<Example>> {
    let budget = model_max_len.saturating_sub(1);
    let doc_len = spec.max_len.unwrap_or(budget);
    if doc_len > budget {
        return Err(Error::Config(format!("dataset max_len {doc_len} exceeds the model budget {budget}")));
    }
    let mut out: Vec<Example> = match spec.format {
        DatasetFormat::Listops => read_tsv(&spec.path)?
            .into_iter()
            .map(|s| {
                let ids = encode_tokens(&s.expr.tokens())?;
                Ok(Example::single(fits(TokenSequence::unpadded(ids), budget)?, s.label as usize))
            })
            .collect::<Result<_>>()?,
        DatasetFormat::Text => load_text_corpus(&spec.path, doc_len)?
            .documents
            .into_iter()
            .map(|d| Example::single(d.tokens, d.label))
            .collect(),
        DatasetFormat::Pairs => load_pairs(&spec.path, doc_len)?
            .into_iter()
            .map(|p| Example::pair(p.first, p.second, p.label))
            .collect(),
        DatasetFormat::Records => read_records(&spec.path)?
            .into_iter()
            .map(|(px, label)| Ok(Example::single(fits(px.to_token_sequence(), budget)?, label as usize)))
            .collect::<Result<_>>()?,
        DatasetFormat::Cifar10 => parse_cifar10(&spec.path)?
            .iter()
            .map(|r| Ok(Example::single(fits(to_grayscale(r).to_token_sequence(), budget)?, r.label as usize)))
            .collect::<Result<_>>()?,
    };
    if let Some(n) = spec.limit {
        out.truncate(n);
    }
    if out.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    Ok(out)
}
