//! Hybrid decoding: free thought tokens interleaved with index-constrained
//! docid spans in a single autoregressive loop.
//!
//! In thought mode the scorer is unconstrained. Choosing the start marker
//! opens a docid span, after which every step is restricted to
//! `allowed_next` of the current index state. The span closes once the state
//! is complete (the end marker has been produced and only the separator can
//! follow), so every closed span names an indexed docid.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::Corpus;
use crate::fmindex::{FmIndex, IndexError, SearchState};
use crate::scorer::{ScoreRequest, ScoreResponse, Scorer, ScorerError};
use crate::tokenizer::{TokenId, Vocabulary, SEPARATOR_ID, START_ID};

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("vocabulary fingerprint {supplied:016x} does not match index fingerprint {index:016x}")]
    VocabMismatch { index: u64, supplied: u64 },
    #[error("index carries no vocabulary or docid table")]
    NoDocids,
    #[error("query encodes to no tokens")]
    EmptyQuery,
    #[error("invalid decode config: {0}")]
    InvalidConfig(&'static str),
    #[error("session already finished")]
    Finished,
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
}

impl From<IndexError> for DecodeError {
    fn from(e: IndexError) -> Self {
        DecodeError::InvariantViolation(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Policy {
    Greedy,
    /// Samples from the tempered distribution with a seeded generator.
    Sample { seed: u64, temperature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub max_total_tokens: usize,
    pub max_docids: usize,
    pub max_hops: usize,
    pub policy: Policy,
    /// Extra end-of-sequence id in thought mode; the separator always ends.
    pub stop_token: Option<TokenId>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_total_tokens: 2048,
            max_docids: 10,
            max_hops: 5,
            policy: Policy::Greedy,
            stop_token: None,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.max_total_tokens == 0 || self.max_docids == 0 || self.max_hops == 0 {
            return Err(DecodeError::InvalidConfig("bounds must be at least 1"));
        }
        if let Policy::Sample { temperature, .. } = self.policy {
            if !(temperature.is_finite() && temperature > 0.0) {
                return Err(DecodeError::InvalidConfig("temperature must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Mode {
    Thought,
    Docid,
}

/// Which budget ended a session early.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    Tokens,
    Docids,
    Hops,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Span {
    Thought {
        text: String,
        tokens: Vec<TokenId>,
    },
    Docid {
        docid: String,
        doc_ids: Vec<String>,
        tokens: Vec<TokenId>,
    },
}

impl Span {
    pub fn tokens(&self) -> &[TokenId] {
        match self {
            Span::Thought { tokens, .. } | Span::Docid { tokens, .. } => tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodedSequence {
    /// Alternating spans, starting with a (possibly empty) thought span.
    pub spans: Vec<Span>,
    /// Every appended token, in order.
    pub tokens: Vec<TokenId>,
    /// Token chosen on the final step but not appended (end of sequence or a
    /// span refused by a budget).
    pub terminal: Option<TokenId>,
    pub truncation: Option<Truncation>,
    /// Sum of chosen-token log-probabilities, terminal choice included.
    pub logprob: f64,
    pub steps: usize,
    pub scorer_us: u64,
}

impl DecodedSequence {
    pub fn docid_spans(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.spans.iter().filter_map(|s| match s {
            Span::Docid { docid, doc_ids, .. } => Some((docid.as_str(), doc_ids.as_slice())),
            Span::Thought { .. } => None,
        })
    }

    pub fn num_docid_spans(&self) -> usize {
        self.docid_spans().count()
    }
}

/// Union of resolved documents over all docid spans, first occurrence first.
pub fn retrieved_docs(d: &DecodedSequence) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for (_, ids) in d.docid_spans() {
        for id in ids {
            if seen.insert(id.as_str()) {
                out.push(id.clone());
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOutcome {
    /// Chosen token; `None` only when the step ended on an exhausted budget
    /// without consulting the scorer.
    pub token: Option<TokenId>,
    pub mode_after: Mode,
    pub finished: bool,
}

pub struct DecodeSession<'a> {
    ix: &'a FmIndex,
    corpus: &'a Corpus,
    vocab: &'a Vocabulary,
    scorer: &'a dyn Scorer,
    cfg: DecodeConfig,
    rng: ChaCha8Rng,
    mode: Mode,
    history: Vec<TokenId>,
    prompt_len: usize,
    state: Option<SearchState>,
    current: Vec<TokenId>,
    out: DecodedSequence,
    n_hops: usize,
    n_docids: usize,
    finished: bool,
    scorer_time: Duration,
}

impl<'a> DecodeSession<'a> {
    pub fn new(
        query: &str,
        ix: &'a FmIndex,
        corpus: &'a Corpus,
        vocab: &'a Vocabulary,
        scorer: &'a dyn Scorer,
        cfg: DecodeConfig,
    ) -> Result<Self, DecodeError> {
        cfg.validate()?;
        let index_fp = ix.vocab_fingerprint().ok_or(DecodeError::NoDocids)?;
        if ix.docid(0).is_none() {
            return Err(DecodeError::NoDocids);
        }
        if index_fp != vocab.fingerprint() {
            return Err(DecodeError::VocabMismatch {
                index: index_fp,
                supplied: vocab.fingerprint(),
            });
        }
        let history = vocab.encode(query).into_inner();
        if history.is_empty() {
            return Err(DecodeError::EmptyQuery);
        }
        let seed = match cfg.policy {
            Policy::Sample { seed, .. } => seed,
            Policy::Greedy => 0,
        };
        Ok(Self {
            ix,
            corpus,
            vocab,
            scorer,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            mode: Mode::Thought,
            prompt_len: history.len(),
            history,
            state: None,
            current: Vec::new(),
            out: DecodedSequence {
                spans: Vec::new(),
                tokens: Vec::new(),
                terminal: None,
                truncation: None,
                logprob: 0.0,
                steps: 0,
                scorer_us: 0,
            },
            n_hops: 0,
            n_docids: 0,
            finished: false,
            scorer_time: Duration::ZERO,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn history(&self) -> &[TokenId] {
        &self.history
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn search_state(&self) -> Option<SearchState> {
        self.state
    }

    /// Spans closed so far.
    pub fn emitted(&self) -> &[Span] {
        &self.out.spans
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn scorer_time(&self) -> Duration {
        self.scorer_time
    }

    fn generated(&self) -> usize {
        self.history.len() - self.prompt_len
    }

    fn finish(&mut self, terminal: Option<(TokenId, f64)>, truncation: Option<Truncation>) {
        if let Some((t, lp)) = terminal {
            self.out.terminal = Some(t);
            self.out.logprob += lp;
        }
        self.out.truncation = truncation;
        if self.mode == Mode::Thought && !self.current.is_empty() {
            self.close_thought();
        }
        self.finished = true;
    }

    fn close_thought(&mut self) {
        let tokens = std::mem::take(&mut self.current);
        let text = self.vocab.decode(&tokens).expect("thought tokens are vocabulary ids");
        self.out.spans.push(Span::Thought { text, tokens });
    }

    fn choose(&mut self, resp: &ScoreResponse) -> (TokenId, f64) {
        match self.cfg.policy {
            Policy::Greedy => {
                let t = resp.argmax();
                (t, resp.get(t).expect("argmax is in support"))
            }
            Policy::Sample { temperature, .. } => {
                let max = resp.iter().map(|(_, x)| x).fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = resp.iter().map(|(_, x)| ((x - max) / temperature).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut u = self.rng.gen::<f64>() * total;
                for ((t, x), w) in resp.iter().zip(&weights) {
                    if u < *w {
                        return (t, x);
                    }
                    u -= w;
                }
                resp.iter().last().expect("response is nonempty")
            }
        }
    }

    pub fn step(&mut self) -> Result<StepOutcome, DecodeError> {
        if self.finished {
            return Err(DecodeError::Finished);
        }
        let at_budget = self.generated() >= self.cfg.max_total_tokens;
        let mask = match (self.mode, self.state) {
            (Mode::Docid, Some(st)) => {
                if at_budget {
                    // the open span cannot complete; it is dropped
                    self.finish(None, Some(Truncation::Tokens));
                    return Ok(self.outcome(None));
                }
                let m = self.ix.allowed_next(st)?;
                if m.is_empty() {
                    return Err(DecodeError::InvariantViolation("dead end in docid mode".into()));
                }
                Some(m)
            }
            (Mode::Docid, None) => {
                return Err(DecodeError::InvariantViolation("docid mode without state".into()))
            }
            (Mode::Thought, _) => None,
        };

        let req = ScoreRequest {
            context: &self.history,
            prompt_len: self.prompt_len,
            mask: mask.as_deref(),
            search_state: self.state,
        };
        let t0 = Instant::now();
        let raw = self.scorer.score(&req);
        self.scorer_time += t0.elapsed();
        self.out.scorer_us = self.scorer_time.as_micros() as u64;
        let raw = raw?;
        let resp = match &mask {
            Some(m) => raw.restrict(m)?,
            None => {
                let n = self.vocab.len() as TokenId;
                ScoreResponse::from_logits(raw.iter().filter(|&(t, _)| t < n))?
            }
        };
        let (tok, lp) = self.choose(&resp);
        self.out.steps += 1;

        match self.mode {
            Mode::Thought => self.thought_step(tok, lp, at_budget)?,
            Mode::Docid => self.docid_step(tok, lp)?,
        }
        Ok(self.outcome(Some(tok)))
    }

    fn outcome(&self, token: Option<TokenId>) -> StepOutcome {
        StepOutcome {
            token,
            mode_after: self.mode,
            finished: self.finished,
        }
    }

    fn thought_step(&mut self, tok: TokenId, lp: f64, at_budget: bool) -> Result<(), DecodeError> {
        if tok == SEPARATOR_ID || Some(tok) == self.cfg.stop_token {
            self.finish(Some((tok, lp)), None);
            return Ok(());
        }
        if at_budget {
            self.finish(Some((tok, lp)), Some(Truncation::Tokens));
            return Ok(());
        }
        if tok != START_ID {
            self.push(tok, lp);
            self.current.push(tok);
            return Ok(());
        }
        if self.n_docids >= self.cfg.max_docids {
            self.finish(Some((tok, lp)), Some(Truncation::Docids));
            return Ok(());
        }
        let new_hop = self.n_docids == 0 || !self.current.is_empty();
        if new_hop && self.n_hops >= self.cfg.max_hops {
            self.finish(Some((tok, lp)), Some(Truncation::Hops));
            return Ok(());
        }
        let st = self.ix.extend(self.ix.root_state(), START_ID).ok_or_else(|| {
            DecodeError::InvariantViolation("no indexed docid begins with the start marker".into())
        })?;
        self.close_thought();
        self.push(tok, lp);
        self.current.push(tok);
        self.n_hops += new_hop as usize;
        self.state = Some(st);
        self.mode = Mode::Docid;
        Ok(())
    }

    fn docid_step(&mut self, tok: TokenId, lp: f64) -> Result<(), DecodeError> {
        let st = self.state.expect("docid mode has a state");
        let next = self
            .ix
            .extend(st, tok)
            .ok_or_else(|| DecodeError::InvariantViolation(format!("token {tok} left the index")))?;
        self.push(tok, lp);
        self.current.push(tok);
        self.state = Some(next);
        if self.ix.is_complete(next) {
            let docid = match self.ix.locate(next)?.as_slice() {
                [one] => one.to_string(),
                other => {
                    return Err(DecodeError::InvariantViolation(format!(
                        "complete state located {} docids",
                        other.len()
                    )))
                }
            };
            let doc_ids = self
                .corpus
                .resolve_docid(&docid)
                .into_iter()
                .map(str::to_owned)
                .collect();
            let tokens = std::mem::take(&mut self.current);
            self.out.spans.push(Span::Docid { docid, doc_ids, tokens });
            self.n_docids += 1;
            self.state = None;
            self.mode = Mode::Thought;
        }
        Ok(())
    }

    fn push(&mut self, tok: TokenId, lp: f64) {
        self.history.push(tok);
        self.out.tokens.push(tok);
        self.out.logprob += lp;
    }

    /// Steps to completion.
    pub fn run(mut self) -> Result<DecodedSequence, DecodeError> {
        while !self.finished {
            self.step()?;
        }
        Ok(self.out)
    }

    /// The sequence decoded so far; finished sessions return their result.
    pub fn into_sequence(self) -> DecodedSequence {
        self.out
    }
}
