//! Documents, knowledge-triple docids, and the collision-aware docid multimap.
//!
//! A document is identified at retrieval time by any of its triples. Each
//! triple is canonicalized into a flat docid string of the form
//! `<docid_start> head, relation, tail <docid_end>`. The same canonical string
//! may belong to several documents; the corpus keeps every owner so that a
//! generated docid resolves to all matching documents.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::tokenizer::{self, Tokenizer};

pub const START_MARKER: &str = "<docid_start>";
pub const END_MARKER: &str = "<docid_end>";

/// Field separator inside a canonical docid.
const FIELD_SEP: &str = ", ";
/// Escaped form of a literal ", " occurring inside an entity or relation.
const ESCAPED_COMMA: &str = ",\u{00A0}";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("malformed record on line {line_no}: {detail}")]
    MalformedRecord { line_no: usize, detail: String },
    #[error("duplicate doc_id {0:?}")]
    DuplicateDocId(String),
    #[error("document {doc_id:?}: triple {index} has an empty field")]
    EmptyTripleField { doc_id: String, index: usize },
    #[error("document {doc_id:?}: triple {index} contains the reserved token {token:?}")]
    ReservedToken {
        doc_id: String,
        index: usize,
        token: String,
    },
    #[error("corpus contains no docids")]
    EmptyCorpus,
    #[error("n-gram size must be at least 1")]
    InvalidN,
    #[error("question has {len} tokens, fewer than n = {n}")]
    QuestionTooShort { n: usize, len: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A (head, relation, tail) triple with normalized fields.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Triple {
    head: String,
    relation: String,
    tail: String,
}

/// Which field of a triple failed validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TripleField {
    Head,
    Relation,
    Tail,
}

fn normalize_field(raw: &str) -> String {
    let nfc: String = raw.nfc().collect();
    let mut out = String::with_capacity(nfc.len());
    for word in nfc.split(char::is_whitespace).filter(|w| !w.is_empty()) {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

impl Triple {
    /// Normalizes each field (NFC, trimmed, internal whitespace collapsed).
    pub fn new(head: &str, relation: &str, tail: &str) -> Result<Self, TripleField> {
        let head = normalize_field(head);
        let relation = normalize_field(relation);
        let tail = normalize_field(tail);
        if head.is_empty() {
            return Err(TripleField::Head);
        }
        if relation.is_empty() {
            return Err(TripleField::Relation);
        }
        if tail.is_empty() {
            return Err(TripleField::Tail);
        }
        Ok(Self {
            head,
            relation,
            tail,
        })
    }

    pub fn head(&self) -> &str {
        &self.head
    }

    pub fn relation(&self) -> &str {
        &self.relation
    }

    pub fn tail(&self) -> &str {
        &self.tail
    }

    fn fields(&self) -> [&str; 3] {
        [&self.head, &self.relation, &self.tail]
    }

    /// Parses a canonical docid string back into its triple.
    pub fn parse_canonical(docid: &str) -> Option<Self> {
        let inner = docid
            .strip_prefix(START_MARKER)?
            .strip_suffix(END_MARKER)?
            .strip_prefix(' ')?
            .strip_suffix(' ')?;
        let parts: Vec<&str> = inner.split(FIELD_SEP).collect();
        if parts.len() != 3 {
            return None;
        }
        let unescape = |s: &str| s.replace(ESCAPED_COMMA, FIELD_SEP);
        Triple::new(&unescape(parts[0]), &unescape(parts[1]), &unescape(parts[2])).ok()
    }
}

/// Formats a triple as its canonical docid string.
///
/// Internal ", " sequences are escaped with a no-break space so the three
/// fields can always be recovered by splitting on ", ".
pub fn canonical_docid(t: &Triple) -> String {
    let mut out = String::with_capacity(
        START_MARKER.len() + END_MARKER.len() + t.head.len() + t.relation.len() + t.tail.len() + 8,
    );
    out.push_str(START_MARKER);
    out.push(' ');
    for (i, field) in t.fields().iter().enumerate() {
        if i > 0 {
            out.push_str(FIELD_SEP);
        }
        out.push_str(&field.replace(FIELD_SEP, ESCAPED_COMMA));
    }
    out.push(' ');
    out.push_str(END_MARKER);
    out
}

/// Renders a canonical docid for humans, undoing the comma escape.
pub fn display_docid(docid: &str) -> String {
    docid.replace(ESCAPED_COMMA, FIELD_SEP)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub text: String,
    pub triples: Vec<Triple>,
}

impl Document {
    /// Documents without triples are kept but never reachable by a docid.
    pub fn is_indexable(&self) -> bool {
        !self.triples.is_empty()
    }
}

#[derive(Deserialize)]
struct RawRecord {
    doc_id: String,
    #[serde(default)]
    title: String,
    #[serde(default)]
    text: String,
    #[serde(default)]
    triples: Vec<Vec<String>>,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    doc_id: &'a str,
    title: &'a str,
    text: &'a str,
    triples: Vec<[&'a str; 3]>,
}

/// Ground-truth query record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub question: String,
    pub gold_doc_ids: Vec<String>,
}

/// An immutable, ingested corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    documents: Vec<Document>,
    positions: HashMap<String, usize>,
    // canonical docid -> ordinals of owning documents, ascending
    docid_map: IndexMap<String, Vec<usize>>,
}

/// Fractions of distinct docids owned by at least two / three documents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CollisionStats {
    pub distinct_docids: usize,
    pub in_ge2: usize,
    pub in_ge3: usize,
    pub frac_ge2: f64,
    pub frac_ge3: f64,
}

fn check_reserved(doc_id: &str, index: usize, t: &Triple) -> Result<(), CorpusError> {
    for field in t.fields() {
        for token in tokenizer::split_whitespace(field) {
            if tokenizer::RESERVED_TOKENS.contains(&token) {
                return Err(CorpusError::ReservedToken {
                    doc_id: doc_id.to_string(),
                    index,
                    token: token.to_string(),
                });
            }
        }
    }
    Ok(())
}

impl Corpus {
    pub fn empty() -> Self {
        Self {
            documents: Vec::new(),
            positions: HashMap::new(),
            docid_map: IndexMap::new(),
        }
    }

    /// Builds a corpus from already-normalized documents.
    ///
    /// Duplicate triples inside one document collapse to a single entry.
    pub fn from_documents(documents: Vec<Document>) -> Result<Self, CorpusError> {
        let mut corpus = Self::empty();
        for doc in documents {
            corpus.push(doc)?;
        }
        Ok(corpus)
    }

    fn push(&mut self, mut doc: Document) -> Result<(), CorpusError> {
        if self.positions.contains_key(&doc.doc_id) {
            return Err(CorpusError::DuplicateDocId(doc.doc_id));
        }
        let mut seen = HashSet::new();
        doc.triples.retain(|t| seen.insert(t.clone()));
        for (i, t) in doc.triples.iter().enumerate() {
            check_reserved(&doc.doc_id, i, t)?;
        }
        if !doc.is_indexable() {
            log::warn!("document {:?} has no triples and is not indexable", doc.doc_id);
        }
        let ordinal = self.documents.len();
        for t in &doc.triples {
            self.docid_map
                .entry(canonical_docid(t))
                .or_default()
                .push(ordinal);
        }
        self.positions.insert(doc.doc_id.clone(), ordinal);
        self.documents.push(doc);
        Ok(())
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn document(&self, doc_id: &str) -> Option<&Document> {
        self.positions.get(doc_id).map(|&i| &self.documents[i])
    }

    /// Distinct canonical docids in first-occurrence order.
    pub fn docids(&self) -> impl ExactSizeIterator<Item = &str> {
        self.docid_map.keys().map(String::as_str)
    }

    pub fn num_docids(&self) -> usize {
        self.docid_map.len()
    }

    /// Every document owning `docid`, in corpus order. Unknown docids resolve to nothing.
    pub fn resolve_docid(&self, docid: &str) -> Vec<&str> {
        self.docid_map
            .get(docid)
            .map(|owners| {
                owners
                    .iter()
                    .map(|&i| self.documents[i].doc_id.as_str())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn collision_stats(&self) -> Result<CollisionStats, CorpusError> {
        let distinct = self.docid_map.len();
        if distinct == 0 {
            return Err(CorpusError::EmptyCorpus);
        }
        let in_ge2 = self.docid_map.values().filter(|v| v.len() >= 2).count();
        let in_ge3 = self.docid_map.values().filter(|v| v.len() >= 3).count();
        Ok(CollisionStats {
            distinct_docids: distinct,
            in_ge2,
            in_ge3,
            frac_ge2: in_ge2 as f64 / distinct as f64,
            frac_ge3: in_ge3 as f64 / distinct as f64,
        })
    }

    /// Reads line-delimited JSON records. Blank lines are skipped.
    pub fn ingest(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let file = File::open(path)?;
        Self::ingest_reader(BufReader::new(file))
    }

    pub fn ingest_reader(reader: impl BufRead) -> Result<Self, CorpusError> {
        let mut corpus = Self::empty();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawRecord =
                serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                    line_no,
                    detail: e.to_string(),
                })?;
            if raw.doc_id.is_empty() {
                return Err(CorpusError::MalformedRecord {
                    line_no,
                    detail: "empty doc_id".into(),
                });
            }
            let mut triples = Vec::with_capacity(raw.triples.len());
            for (index, fields) in raw.triples.iter().enumerate() {
                let [h, r, t] = fields.as_slice() else {
                    return Err(CorpusError::MalformedRecord {
                        line_no,
                        detail: format!("triple {index} has {} fields, expected 3", fields.len()),
                    });
                };
                let triple = Triple::new(h, r, t).map_err(|_| CorpusError::EmptyTripleField {
                    doc_id: raw.doc_id.clone(),
                    index,
                })?;
                triples.push(triple);
            }
            corpus.push(Document {
                doc_id: raw.doc_id,
                title: raw.title,
                text: raw.text,
                triples,
            })?;
        }
        Ok(corpus)
    }

    /// Writes the corpus in the same record format `ingest` reads.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_records(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_records(&self, w: &mut impl Write) -> Result<(), CorpusError> {
        for doc in &self.documents {
            let rec = RecordOut {
                doc_id: &doc.doc_id,
                title: &doc.title,
                text: &doc.text,
                triples: doc.triples.iter().map(Triple::fields).collect(),
            };
            serde_json::to_writer(&mut *w, &rec).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Reads ground-truth query records, one JSON object per line.
pub fn read_queries(path: impl AsRef<Path>) -> Result<Vec<QueryRecord>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QueryRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                line_no: i + 1,
                detail: e.to_string(),
            })?;
        out.push(rec);
    }
    Ok(out)
}

/// Fraction of the question's n-grams (counted by position) that occur
/// verbatim in the text of at least one of `docs`.
pub fn ngram_overlap(
    question: &str,
    docs: &[&Document],
    n: usize,
    tk: &dyn Tokenizer,
) -> Result<f64, CorpusError> {
    if n == 0 {
        return Err(CorpusError::InvalidN);
    }
    let q = tk.tokenize(question);
    if q.len() < n {
        return Err(CorpusError::QuestionTooShort { n, len: q.len() });
    }
    let mut doc_ngrams: HashSet<&[String]> = HashSet::new();
    let doc_tokens: Vec<Vec<String>> = docs.iter().map(|d| tk.tokenize(&d.text)).collect();
    for toks in &doc_tokens {
        doc_ngrams.extend(toks.windows(n));
    }
    let total = q.len() - n + 1;
    let hits = q.windows(n).filter(|g| doc_ngrams.contains(g)).count();
    Ok(hits as f64 / total as f64)
}
