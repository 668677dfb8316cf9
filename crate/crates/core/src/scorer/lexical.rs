use std::collections::HashSet;
use std::sync::Arc;

use super::{ScoreRequest, ScoreResponse, Scorer, ScorerError};
use crate::corpus::Triple;
use crate::fmindex::{FmIndex, IndexError};
use crate::tokenizer::{TokenId, Tokenizer, Vocabulary, WordTokenizer, END_ID, SEPARATOR_ID, START_ID};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LexicalConfig {
    /// N-gram order for query/docid matching.
    pub n: usize,
    /// Softmax temperature over overlap counts.
    pub temperature: f64,
    /// Docid spans to request before ending the sequence.
    pub hops: usize,
}

impl Default for LexicalConfig {
    fn default() -> Self {
        Self {
            n: 1,
            temperature: 1.0,
            hops: 1,
        }
    }
}

/// Surface-matching baseline.
///
/// In thought mode it opens a docid span until `hops` spans exist, then ends
/// the sequence. In docid mode each candidate token scores the largest number
/// of distinct query n-grams shared with any not-yet-emitted docid reachable
/// through it.
pub struct LexicalScorer {
    ix: Arc<FmIndex>,
    vocab: Arc<Vocabulary>,
    cfg: LexicalConfig,
    doc_grams: Vec<HashSet<Vec<String>>>,
}

fn grams(words: &[String], n: usize) -> HashSet<Vec<String>> {
    words.windows(n).map(<[String]>::to_vec).collect()
}

impl LexicalScorer {
    /// `vocab` must cover the query words (see `Vocabulary::extend_with_text`).
    pub fn new(ix: Arc<FmIndex>, vocab: Arc<Vocabulary>, cfg: LexicalConfig) -> Result<Self, IndexError> {
        if ix.num_sequences() > 0 && ix.docid(0).is_none() {
            return Err(IndexError::NoDocids);
        }
        let n = cfg.n.max(1);
        let doc_grams = (0..ix.num_sequences())
            .map(|i| {
                let docid = ix.docid(i).expect("checked above");
                let text = match Triple::parse_canonical(docid) {
                    Some(t) => format!("{} {} {}", t.head(), t.relation(), t.tail()),
                    None => docid.to_string(),
                };
                grams(&WordTokenizer.tokenize(&text), n)
            })
            .collect();
        Ok(Self {
            ix,
            vocab,
            cfg: LexicalConfig { n, ..cfg },
            doc_grams,
        })
    }

    fn query_grams(&self, prompt: &[TokenId]) -> HashSet<Vec<String>> {
        let text: Vec<&str> = prompt.iter().filter_map(|&t| self.vocab.token(t)).collect();
        grams(&WordTokenizer.tokenize(&text.join(" ")), self.cfg.n)
    }

    /// Sequence ordinals of docid spans already closed in `generated`.
    fn emitted(&self, generated: &[TokenId]) -> HashSet<usize> {
        let mut out = HashSet::new();
        let mut open: Option<usize> = None;
        for (i, &t) in generated.iter().enumerate() {
            match (open, t) {
                (None, START_ID) => open = Some(i),
                (Some(s), END_ID) => {
                    let found = self
                        .ix
                        .search(self.ix.root_state(), &generated[s..=i])
                        .and_then(|st| self.ix.locate_sequences(st).ok());
                    out.extend(found.into_iter().flatten());
                    open = None;
                }
                _ => {}
            }
        }
        out
    }

    fn overlap(&self, seq: usize, q: &HashSet<Vec<String>>) -> usize {
        let d = &self.doc_grams[seq];
        if d.len() < q.len() {
            d.iter().filter(|g| q.contains(*g)).count()
        } else {
            q.iter().filter(|g| d.contains(*g)).count()
        }
    }
}

impl Scorer for LexicalScorer {
    fn score(&self, req: &ScoreRequest<'_>) -> Result<ScoreResponse, ScorerError> {
        req.check()?;
        let (mask, state) = match (req.mask, req.search_state) {
            (Some(m), Some(s)) => (m, s),
            _ => {
                let spans = req.generated().iter().filter(|&&t| t == START_ID).count();
                let next = if spans < self.cfg.hops { START_ID } else { SEPARATOR_ID };
                return Ok(ScoreResponse::certain(next));
            }
        };
        let q = self.query_grams(req.prompt());
        let emitted = self.emitted(req.generated());
        let temp = self.cfg.temperature.max(f64::MIN_POSITIVE);
        let mut logits = Vec::with_capacity(mask.len());
        for &t in mask {
            let Some(next) = self.ix.extend(state, t) else {
                continue;
            };
            let best = if next.depth == 0 {
                None
            } else {
                self.ix
                    .locate_positions(next)
                    .map_err(|e| ScorerError::Unavailable(e.to_string()))?
                    .into_iter()
                    .map(|o| o.seq)
                    .filter(|s| !emitted.contains(s))
                    .map(|s| self.overlap(s, &q))
                    .max()
            };
            // -1 ranks paths whose docids were all emitted below any fresh path
            let score = best.map_or(-1.0, |b| b as f64);
            logits.push((t, score / temp));
        }
        ScoreResponse::from_logits(logits)
    }
}
