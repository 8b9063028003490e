use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::sequence::TokenSequence;
use crate::error::{Error, Result};

/// A byte-tokenized document with its class and origin.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteDocument {
    pub tokens: TokenSequence,
    pub label: usize,
    /// File path, or `path:line` for TSV input.
    pub source: String,
    /// Byte length before truncation.
    pub original_len: usize,
}

impl ByteDocument {
    pub fn truncated(&self) -> bool {
        self.original_len > self.tokens.true_len
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextCorpus {
    /// Class names by label index.
    pub classes: Vec<String>,
    pub documents: Vec<ByteDocument>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentPair {
    pub first: TokenSequence,
    pub second: TokenSequence,
    pub label: usize,
    pub line: usize,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Loads a labelled corpus and maps every document to exactly `max_len`
/// byte tokens.
///
/// A directory is read as `<root>/<class>/<file>`: classes are the
/// subdirectory names, numbered in numeric order when every name is an
/// integer and lexicographic order otherwise. A regular file is read as TSV
/// with one `text<TAB>label` document per line, split on the last tab and
/// with integer labels.
pub fn load_text_corpus(path: &Path, max_len: usize) -> Result<TextCorpus> {
    if max_len == 0 {
        return Err(Error::Param("max_len must be positive".into()));
    }
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    let corpus = if meta.is_dir() { load_dir(path, max_len)? } else { load_tsv(path, max_len)? };
    if corpus.documents.is_empty() {
        return Err(Error::Empty("text corpus"));
    }
    Ok(corpus)
}

fn load_dir(root: &Path, max_len: usize) -> Result<TextCorpus> {
    let mut class_dirs: Vec<(String, PathBuf)> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .map(|p| (p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(), p))
        .collect();
    if class_dirs.iter().all(|(n, _)| n.parse::<u64>().is_ok()) {
        class_dirs.sort_by_key(|(n, _)| n.parse::<u64>().unwrap_or(0));
    }
    let mut documents = Vec::new();
    for (label, (_, dir)) in class_dirs.iter().enumerate() {
        for file in sorted_entries(dir)?.into_iter().filter(|p| p.is_file()) {
            let bytes = read(&file)?;
            let (tokens, _) = TokenSequence::from_bytes(&bytes, max_len);
            documents.push(ByteDocument {
                tokens,
                label,
                source: file.display().to_string(),
                original_len: bytes.len(),
            });
        }
    }
    Ok(TextCorpus { classes: class_dirs.into_iter().map(|(n, _)| n).collect(), documents })
}

fn parse_label(field: &str, line: usize) -> Result<usize> {
    field.trim().parse::<usize>().map_err(|_| Error::Parse {
        position: line,
        message: format!("line {line}: label {field:?} is not a non-negative integer"),
    })
}

fn tsv_lines(bytes: &[u8]) -> impl Iterator<Item = (usize, &[u8])> {
    bytes
        .split(|&b| b == b'\n')
        .map(|l| l.strip_suffix(b"\r").unwrap_or(l))
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.is_empty())
}

fn load_tsv(path: &Path, max_len: usize) -> Result<TextCorpus> {
    let bytes = read(path)?;
    let mut documents = Vec::new();
    for (line, raw) in tsv_lines(&bytes) {
        let cut = raw.iter().rposition(|&b| b == b'\t').ok_or_else(|| Error::Parse {
            position: line,
            message: format!("line {line}: expected text<TAB>label"),
        })?;
        let label = parse_label(&String::from_utf8_lossy(&raw[cut + 1..]), line)?;
        let text = &raw[..cut];
        let (tokens, _) = TokenSequence::from_bytes(text, max_len);
        documents.push(ByteDocument {
            tokens,
            label,
            source: format!("{}:{line}", path.display()),
            original_len: text.len(),
        });
    }
    let classes = documents.iter().map(|d| d.label).max().map_or(0, |m| m + 1);
    Ok(TextCorpus { classes: (0..classes).map(|c| c.to_string()).collect(), documents })
}

/// Reads `doc1<TAB>doc2<TAB>label` lines; each document gets its own
/// `max_len_per_doc` budget and labels must be 0 or 1.
pub fn load_pairs(path: &Path, max_len_per_doc: usize) -> Result<Vec<DocumentPair>> {
    if max_len_per_doc == 0 {
        return Err(Error::Param("max_len_per_doc must be positive".into()));
    }
    let bytes = read(path)?;
    let mut pairs = Vec::new();
    for (line, raw) in tsv_lines(&bytes) {
        let cols: Vec<&[u8]> = raw.split(|&b| b == b'\t').collect();
        if cols.len() != 3 {
            return Err(Error::Parse {
                position: line,
                message: format!("line {line}: expected 3 tab-separated columns, found {}", cols.len()),
            });
        }
        let label = parse_label(&String::from_utf8_lossy(cols[2]), line)?;
        if label > 1 {
            return Err(Error::Parse { position: line, message: format!("line {line}: pair label {label} is not 0 or 1") });
        }
        pairs.push(DocumentPair {
            first: TokenSequence::from_bytes(cols[0], max_len_per_doc).0,
            second: TokenSequence::from_bytes(cols[1], max_len_per_doc).0,
            label,
            line,
        });
    }
    if pairs.is_empty() {
        return Err(Error::Empty("pair corpus"));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsv_splits_on_last_tab() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.tsv");
        fs::write(&p, "a\tb\t1\nab\t0\n").unwrap();
        let c = load_text_corpus(&p, 4).unwrap();
        assert_eq!(c.documents[0].tokens.to_bytes().unwrap(), b"a\tb");
        assert_eq!(c.documents[1].tokens.ids, vec![97, 98, 256, 256]);
        assert_eq!(c.classes.len(), 2);
    }

    #[test]
    fn pair_label_outside_binary_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.tsv");
        fs::write(&p, "x\ty\t1\nx\ty\t2\n").unwrap();
        match load_pairs(&p, 8) {
            Err(Error::Parse { position, .. }) => assert_eq!(position, 2),
            other => panic!("{other:?}"),
        }
    }
}
