//! Token alphabet shared by the index and the decoder.
//!
//! Ids 0..4 are reserved and identical for every corpus. Tokens that occur in
//! canonical docids follow in first-occurrence order; this prefix of the id
//! space is the *indexed region*. A vocabulary may be extended afterwards with
//! thought-only tokens (query words, script words), which never occur in the
//! index and do not change the vocabulary fingerprint.

use std::collections::HashMap;
use std::ops::Deref;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, END_MARKER, START_MARKER};

pub type TokenId = u32;

pub const SEPARATOR_ID: TokenId = 0;
pub const START_ID: TokenId = 1;
pub const END_ID: TokenId = 2;
pub const UNK_ID: TokenId = 3;

pub const SEPARATOR_TOKEN: &str = "<sep>";
pub const UNK_TOKEN: &str = "<unk>";

pub const RESERVED_TOKENS: [&str; 4] = [SEPARATOR_TOKEN, START_MARKER, END_MARKER, UNK_TOKEN];
pub const NUM_RESERVED: usize = RESERVED_TOKENS.len();

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("corpus contains no docids")]
    EmptyCorpus,
    #[error("invalid token id {0}")]
    InvalidTokenId(TokenId),
    #[error("duplicate token {0:?}")]
    DuplicateToken(String),
}

/// Splits on Unicode whitespace except U+00A0, which joins the halves of an
/// escaped in-entity comma into one token.
pub fn split_whitespace(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| c.is_whitespace() && c != '\u{00A0}')
        .filter(|s| !s.is_empty())
}

/// Text tokenization used by corpus analyses.
pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Vec<String>;
}

/// Verbatim whitespace tokens; the same split `Vocabulary::encode` uses.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        split_whitespace(text).map(str::to_owned).collect()
    }
}

/// Lowercased alphanumeric runs; punctuation is dropped.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordTokenizer;

impl Tokenizer for WordTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|s| !s.is_empty())
            .map(str::to_lowercase)
            .collect()
    }
}

/// An ordered list of token ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }
}

impl Deref for TokenSeq {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(v: Vec<TokenId>) -> Self {
        TokenSeq(v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
    indexed_len: usize,
}

impl Vocabulary {
    fn reserved_only() -> Self {
        let id_to_token: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self {
            id_to_token,
            token_to_id,
            indexed_len: NUM_RESERVED,
        }
    }

    /// Vocabulary over every token of every canonical docid in `corpus`.
    pub fn build(corpus: &Corpus) -> Result<Self, VocabError> {
        if corpus.num_docids() == 0 {
            return Err(VocabError::EmptyCorpus);
        }
        let mut v = Self::reserved_only();
        for docid in corpus.docids() {
            for tok in split_whitespace(docid) {
                v.intern(tok);
            }
        }
        v.indexed_len = v.id_to_token.len();
        Ok(v)
    }

    /// Rebuilds a vocabulary from its non-reserved indexed tokens, in id order.
    pub fn from_indexed_tokens<I, S>(tokens: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self::reserved_only();
        for tok in tokens {
            let tok = tok.into();
            if v.token_to_id.contains_key(&tok) {
                return Err(VocabError::DuplicateToken(tok));
            }
            v.intern(&tok);
        }
        v.indexed_len = v.id_to_token.len();
        Ok(v)
    }

    fn intern(&mut self, tok: &str) -> TokenId {
        if let Some(&id) = self.token_to_id.get(tok) {
            return id;
        }
        let id = self.id_to_token.len() as TokenId;
        self.id_to_token.push(tok.to_string());
        self.token_to_id.insert(tok.to_string(), id);
        id
    }

    /// Appends unseen whitespace tokens of `text` after the indexed region.
    pub fn extend_with_text(&mut self, text: &str) {
        for tok in split_whitespace(text) {
            if tok != SEPARATOR_TOKEN {
                self.intern(tok);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    /// Number of ids that can occur in an indexed docid (reserved ids included).
    pub fn indexed_len(&self) -> usize {
        self.indexed_len
    }

    /// Indexed, non-reserved tokens in id order.
    pub fn indexed_tokens(&self) -> &[String] {
        &self.id_to_token[NUM_RESERVED..self.indexed_len]
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Hash of the indexed region; equal fingerprints mean interchangeable
    /// vocabularies for index lookups.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        for tok in &self.id_to_token[..self.indexed_len] {
            h.update((tok.len() as u64).to_le_bytes());
            h.update(tok.as_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest is 32 bytes"))
    }

    /// Whitespace-splits `text`; unknown tokens (and a literal separator) map to the unknown id.
    pub fn encode(&self, text: &str) -> TokenSeq {
        TokenSeq(
            split_whitespace(text)
                .map(|tok| match self.token_to_id.get(tok) {
                    Some(&SEPARATOR_ID) | None => UNK_ID,
                    Some(&id) => id,
                })
                .collect(),
        )
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String, VocabError> {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            let tok = self.token(id).ok_or(VocabError::InvalidTokenId(id))?;
            if i > 0 {
                out.push(' ');
            }
            out.push_str(tok);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Document, Triple};

    fn corpus(triples: &[(&str, &str, &str)]) -> Corpus {
        Corpus::from_documents(
            triples
                .iter()
                .enumerate()
                .map(|(i, (h, r, t))| Document {
                    doc_id: format!("d{i}"),
                    title: String::new(),
                    text: String::new(),
                    triples: vec![Triple::new(h, r, t).unwrap()],
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_docid_vocabulary() {
        let v = Vocabulary::build(&corpus(&[("A", "b", "C")])).unwrap();
        assert_eq!(v.indexed_tokens(), ["A,", "b,", "C"]);
        assert_eq!(v.len(), NUM_RESERVED + 3);
        assert_eq!(v.id(START_MARKER), Some(START_ID));
        assert_eq!(v.id(END_MARKER), Some(END_ID));
    }

    #[test]
    fn build_is_deterministic() {
        let c = corpus(&[("A", "b", "C"), ("D", "b", "A")]);
        let a = Vocabulary::build(&c).unwrap();
        let b = Vocabulary::build(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn empty_corpus_is_error() {
        assert_eq!(
            Vocabulary::build(&Corpus::empty()).unwrap_err(),
            VocabError::EmptyCorpus
        );
    }

    #[test]
    fn encode_decode() {
        let v = Vocabulary::build(&corpus(&[("A", "b", "C")])).unwrap();
        let docid = "<docid_start> A, b, C <docid_end>";
        let ids = v.encode(docid);
        assert_eq!(ids.0, vec![START_ID, 4, 5, 6, END_ID]);
        assert_eq!(v.decode(&ids).unwrap(), docid);
        assert!(v.encode("").is_empty());
        assert_eq!(v.encode("A, zebra").0, vec![4, UNK_ID]);
        assert_eq!(v.decode(&[UNK_ID]).unwrap(), "<unk>");
        assert_eq!(v.encode("<sep>").0, vec![UNK_ID]);
        assert_eq!(
            v.decode(&[99]).unwrap_err(),
            VocabError::InvalidTokenId(99)
        );
    }

    #[test]
    fn escaped_comma_stays_one_token() {
        let v = Vocabulary::build(&corpus(&[("Washington, D.C.", "in", "US")])).unwrap();
        assert_eq!(v.indexed_tokens()[0], "Washington,\u{00A0}D.C.,");
    }

    #[test]
    fn extension_keeps_fingerprint_and_ids() {
        let mut v = Vocabulary::build(&corpus(&[("A", "b", "C")])).unwrap();
        let fp = v.fingerprint();
        let before = v.encode("<docid_start> A, b, C <docid_end>");
        v.extend_with_text("think about A, then zebra <sep>");
        assert_eq!(v.fingerprint(), fp);
        assert_eq!(v.indexed_len(), NUM_RESERVED + 3);
        assert_eq!(v.encode("<docid_start> A, b, C <docid_end>"), before);
        let z = v.id("zebra").unwrap();
        assert!(z as usize >= v.indexed_len());
        assert_eq!(v.id("<sep>"), Some(SEPARATOR_ID));
    }

    #[test]
    fn word_tokenizer_normalizes() {
        assert_eq!(
            WordTokenizer.tokenize("Where is Paris, France?"),
            ["where", "is", "paris", "france"]
        );
    }
}
