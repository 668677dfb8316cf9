#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};
use std::hash::{DefaultHasher, Hash, Hasher};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use thinkdex_core::corpus::{Corpus, Document, Triple};
use thinkdex_core::fmindex::Occurrence;
use thinkdex_core::scorer::{ScoreRequest, ScoreResponse, Scorer, ScorerError};
use thinkdex_core::tokenizer::{TokenId, END_ID, SEPARATOR_ID, START_ID};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random sequences over `1..alphabet` totalling about `tokens` tokens.
pub fn random_sequences(rng: &mut impl Rng, tokens: usize, alphabet: usize, max_len: usize) -> Vec<Vec<TokenId>> {
    let mut out = Vec::new();
    let mut total = 0;
    while total < tokens {
        let len = rng.gen_range(1..=max_len);
        out.push((0..len).map(|_| rng.gen_range(1..alphabet as TokenId)).collect());
        total += len;
    }
    out
}

/// Every (sequence, offset) where `pattern` occurs, by direct comparison.
pub fn naive_occurrences(seqs: &[Vec<TokenId>], pattern: &[TokenId]) -> Vec<Occurrence> {
    let mut out = Vec::new();
    if pattern.is_empty() {
        return out;
    }
    for (seq, s) in seqs.iter().enumerate() {
        if s.len() < pattern.len() {
            continue;
        }
        for offset in 0..=s.len() - pattern.len() {
            if s[offset] == pattern[0] && s[offset..offset + pattern.len()] == *pattern {
                out.push(Occurrence { seq, offset });
            }
        }
    }
    out
}

/// Tokens that follow `prefix` at the start of some sequence; the separator
/// stands for "sequence ends here".
pub fn naive_next(seqs: &[Vec<TokenId>], prefix: &[TokenId]) -> BTreeSet<TokenId> {
    seqs.iter()
        .filter(|s| s.starts_with(prefix))
        .map(|s| s.get(prefix.len()).copied().unwrap_or(SEPARATOR_ID))
        .collect()
}

/// Word pools for synthetic triples.
#[derive(Clone, Copy)]
pub struct Pools {
    pub entities: usize,
    pub relations: usize,
}

fn entity(i: usize) -> String {
    // a few multi-word entities give docids of varying length
    if i % 7 == 0 {
        format!("E{i} Jr")
    } else {
        format!("E{i}")
    }
}

fn relation(i: usize) -> String {
    if i % 3 == 0 {
        format!("rel{i} of")
    } else {
        format!("rel{i}")
    }
}

/// One document per random triple until the indexed text reaches `tokens`.
/// Triples repeat across documents by chance, so collisions occur.
pub fn triple_corpus(rng: &mut impl Rng, tokens: usize, pools: Pools) -> Corpus {
    let mut docs = Vec::new();
    let mut total = 0;
    while total < tokens {
        let h = entity(rng.gen_range(0..pools.entities));
        let r = relation(rng.gen_range(0..pools.relations));
        let t = entity(rng.gen_range(0..pools.entities));
        total += 3 + h.split(' ').count() + r.split(' ').count() + t.split(' ').count();
        docs.push(Document {
            doc_id: format!("doc{}", docs.len()),
            title: String::new(),
            text: format!("{h} {r} {t}"),
            triples: vec![Triple::new(&h, &r, &t).unwrap()],
        });
    }
    Corpus::from_documents(docs).unwrap()
}

/// Corpus with exactly `n` distinct docids.
pub fn corpus_with_docids(rng: &mut impl Rng, n: usize, pools: Pools) -> Corpus {
    let mut seen = std::collections::HashSet::new();
    let mut docs = Vec::new();
    while seen.len() < n {
        let h = entity(rng.gen_range(0..pools.entities));
        let r = relation(rng.gen_range(0..pools.relations));
        let t = entity(rng.gen_range(0..pools.entities));
        let triple = Triple::new(&h, &r, &t).unwrap();
        seen.insert(triple.clone());
        docs.push(Document {
            doc_id: format!("doc{}", docs.len()),
            title: String::new(),
            text: format!("{h} {r} {t}"),
            triples: vec![triple],
        });
    }
    Corpus::from_documents(docs).unwrap()
}

fn context_rng(req: &ScoreRequest<'_>, salt: u64) -> ChaCha8Rng {
    let mut h = DefaultHasher::new();
    req.context.hash(&mut h);
    salt.hash(&mut h);
    ChaCha8Rng::seed_from_u64(h.finish())
}

/// Scorers that try to push the decoder off the index.
#[derive(Clone, Copy, Debug)]
pub enum Adversary {
    /// Random scores over the whole vocabulary, mask ignored.
    FullVocab,
    /// Huge scores on ids outside the mask, small ones inside it.
    Junk,
    /// Prefers markers and the separator whether or not they are allowed.
    Markers,
    /// Mask tokens with extreme, nearly tied scores.
    Extreme,
}

pub struct AdversarialScorer {
    pub kind: Adversary,
    pub vocab_len: usize,
    pub salt: u64,
}

impl Scorer for AdversarialScorer {
    fn score(&self, req: &ScoreRequest<'_>) -> Result<ScoreResponse, ScorerError> {
        let mut rng = context_rng(req, self.salt);
        let n = self.vocab_len as TokenId;
        let mut scores: HashMap<TokenId, f64> = HashMap::new();
        match self.kind {
            Adversary::FullVocab => {
                for t in 0..n + 50 {
                    scores.insert(t, rng.gen_range(-5.0..5.0));
                }
                // open spans often in thought mode
                if req.mask.is_none() {
                    scores.insert(START_ID, 4.0);
                }
            }
            Adversary::Junk => {
                for _ in 0..20 {
                    scores.insert(rng.gen_range(0..n + 1000), 50.0 + rng.gen::<f64>());
                }
                if let Some(m) = req.mask {
                    for &t in m {
                        scores.entry(t).or_insert(rng.gen_range(-3.0..0.0));
                    }
                } else {
                    scores.insert(START_ID, 60.0);
                }
            }
            Adversary::Markers => {
                scores.insert(END_ID, 10.0);
                scores.insert(SEPARATOR_ID, if req.mask.is_some() { 10.0 } else { -2.0 });
                scores.insert(START_ID, 9.0);
                if let Some(m) = req.mask {
                    for &t in m {
                        scores.entry(t).or_insert(rng.gen_range(-1.0..1.0));
                    }
                }
                for _ in 0..3 {
                    scores.insert(rng.gen_range(n..n + 100), 20.0);
                }
            }
            Adversary::Extreme => match req.mask {
                Some(m) => {
                    for &t in m {
                        scores.insert(t, 600.0 + rng.gen::<f64>() * 1e-9);
                    }
                }
                None => {
                    scores.insert(START_ID, 700.0);
                    scores.insert(SEPARATOR_ID, 699.0);
                }
            },
        }
        ScoreResponse::from_logits(scores)
    }
}
