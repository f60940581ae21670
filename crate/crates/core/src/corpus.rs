//! Documents and the manifest that lists them.
//!
//! A manifest has one record per line, `id,path[,target]`. `path` is relative
//! to the manifest's directory and `target` is an optional DD/MM/YYYY date.
//! Blank lines and lines starting with `#` are ignored.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dates::{parse_strict_ddmmyyyy, CanonicalDate};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: expected `id,path[,target]`, got {content:?}")]
    Malformed { line: usize, content: String },
    #[error("record {id:?}: cannot read {path}: {source}")]
    MissingText {
        id: String,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("record {id:?}: {path} is not valid UTF-8")]
    NotUnicode { id: String, path: PathBuf },
    #[error("record {id:?}: invalid target date {value:?}")]
    InvalidTarget { id: String, value: String },
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
}

/// Strips each line and drops lines that end up empty.
pub fn normalize_text(raw: &str) -> String {
    raw.lines()
        .map(str::trim)
        .filter(|line| !line.is_empty())
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    id: String,
    text: String,
    char_count: usize,
    target: Option<CanonicalDate>,
}

impl Document {
    /// Builds a document from raw text, normalising it first.
    pub fn new(id: impl Into<String>, raw_text: &str, target: Option<CanonicalDate>) -> Self {
        let text = normalize_text(raw_text);
        let char_count = text.chars().count();
        Self {
            id: id.into(),
            text,
            char_count,
            target,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Number of unicode scalar values in the normalised text.
    pub fn char_count(&self) -> usize {
        self.char_count
    }

    pub fn target(&self) -> Option<CanonicalDate> {
        self.target
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    documents: Vec<Document>,
    source_path: String,
}

impl Corpus {
    /// Builds a corpus in memory, rejecting duplicate ids.
    pub fn new(
        documents: Vec<Document>,
        source_path: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        let mut seen = HashSet::with_capacity(documents.len());
        for doc in &documents {
            if !seen.insert(doc.id()) {
                return Err(CorpusError::DuplicateId(doc.id().to_string()));
            }
        }
        Ok(Self {
            documents,
            source_path: source_path.into(),
        })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn source_path(&self) -> &str {
        &self.source_path
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.id() == id)
    }
}

struct ManifestRecord<'a> {
    id: &'a str,
    path: &'a str,
    target: Option<&'a str>,
}

fn parse_record(line_no: usize, line: &str) -> Result<ManifestRecord<'_>, CorpusError> {
    let malformed = || CorpusError::Malformed {
        line: line_no,
        content: line.to_string(),
    };
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    let (id, path, target) = match fields.as_slice() {
        [id, path] => (*id, *path, None),
        [id, path, target] => (*id, *path, (!target.is_empty()).then_some(*target)),
        _ => return Err(malformed()),
    };
    if id.is_empty() || path.is_empty() {
        return Err(malformed());
    }
    Ok(ManifestRecord { id, path, target })
}

/// Loads every document listed in a manifest, in manifest order.
pub fn load_corpus(manifest_path: &Path) -> Result<Corpus, CorpusError> {
    let manifest = fs::read_to_string(manifest_path).map_err(|source| CorpusError::Manifest {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new(""));

    let mut documents = Vec::new();
    for (index, line) in manifest.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let record = parse_record(index + 1, trimmed)?;
        let target = record
            .target
            .map(|value| {
                parse_strict_ddmmyyyy(value).ok_or_else(|| CorpusError::InvalidTarget {
                    id: record.id.to_string(),
                    value: value.to_string(),
                })
            })
            .transpose()?;
        let text_path = base.join(record.path);
        let bytes = fs::read(&text_path).map_err(|source| CorpusError::MissingText {
            id: record.id.to_string(),
            path: text_path.clone(),
            source,
        })?;
        let raw = String::from_utf8(bytes).map_err(|_| CorpusError::NotUnicode {
            id: record.id.to_string(),
            path: text_path.clone(),
        })?;
        documents.push(Document::new(record.id, &raw, target));
    }
    Corpus::new(documents, manifest_path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, content: &[u8]) {
        fs::File::create(dir.join(name))
            .unwrap()
            .write_all(content)
            .unwrap();
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_text("  a  \n\n b "), "a\nb");
        assert_eq!(normalize_text(""), "");
        assert_eq!(normalize_text("abc"), "abc");
        assert_eq!(normalize_text("a\r\n\t\r\n  b  c "), "a\nb  c");
    }

    #[test]
    fn empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "m.csv", b"# nothing here\n\n");
        let corpus = load_corpus(&dir.path().join("m.csv")).unwrap();
        assert!(corpus.is_empty());
    }

    #[test]
    fn minimal_record() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "d1.txt", b"x");
        write(dir.path(), "m.csv", b"d1,d1.txt,05/05/1998\n");
        let corpus = load_corpus(&dir.path().join("m.csv")).unwrap();
        let doc = &corpus.documents()[0];
        assert_eq!(doc.id(), "d1");
        assert_eq!(doc.text(), "x");
        assert_eq!(doc.char_count(), 1);
        assert_eq!(doc.target(), Some(CanonicalDate::new(5, 5, 1998).unwrap()));
    }

    #[test]
    fn record_order_and_optional_target() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.txt", b"  born 01/01/2000  \n\n");
        write(dir.path(), "b.txt", "caf\u{e9}".as_bytes());
        write(dir.path(), "m.csv", b"zeta,a.txt\nalpha,b.txt,\n");
        let corpus = load_corpus(&dir.path().join("m.csv")).unwrap();
        let ids: Vec<_> = corpus.documents().iter().map(Document::id).collect();
        assert_eq!(ids, ["zeta", "alpha"]);
        assert_eq!(corpus.documents()[0].text(), "born 01/01/2000");
        assert_eq!(corpus.documents()[1].char_count(), 4);
        assert!(corpus.documents().iter().all(|d| d.target().is_none()));
    }

    #[test]
    fn invalid_target_names_record() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "d1.txt", b"x");
        write(dir.path(), "m.csv", b"d1,d1.txt,31/02/2001\n");
        let err = load_corpus(&dir.path().join("m.csv")).unwrap_err();
        assert!(matches!(err, CorpusError::InvalidTarget { ref id, .. } if id == "d1"));
    }

    #[test]
    fn missing_file_names_record() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "m.csv", b"d7,nope.txt\n");
        let err = load_corpus(&dir.path().join("m.csv")).unwrap_err();
        assert!(err.to_string().contains("d7"), "{err}");
    }

    #[test]
    fn rejects_duplicates_and_bad_encoding() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.txt", b"x");
        write(dir.path(), "bad.txt", &[0xff, 0xfe]);
        write(dir.path(), "dup.csv", b"a,a.txt\na,a.txt\n");
        write(dir.path(), "enc.csv", b"b,bad.txt\n");
        write(dir.path(), "shape.csv", b"a,a.txt,01/01/2000,extra\n");
        assert!(matches!(
            load_corpus(&dir.path().join("dup.csv")),
            Err(CorpusError::DuplicateId(_))
        ));
        assert!(matches!(
            load_corpus(&dir.path().join("enc.csv")),
            Err(CorpusError::NotUnicode { .. })
        ));
        assert!(matches!(
            load_corpus(&dir.path().join("shape.csv")),
            Err(CorpusError::Malformed { line: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "[ \ta-c\n\r]{0,30}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once.clone());
        }
    }
}
