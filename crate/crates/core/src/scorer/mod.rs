//! Next-token scoring contract used by the decoder.
//!
//! A scorer maps a token history (and, in constrained mode, a candidate mask)
//! to a normalized log-probability distribution. Scorers hold no per-session
//! state and must tolerate concurrent calls.

mod lexical;
mod oracle;
mod remote;

use crate::fmindex::SearchState;
use crate::tokenizer::TokenId;

pub use lexical::{LexicalConfig, LexicalScorer};
pub use oracle::OracleScorer;
pub use remote::RemoteScorer;

/// Default remote call timeout.
pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;

const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum ScorerError {
    #[error("scorer unavailable: {0}")]
    Unavailable(String),
    #[error("no token has finite score")]
    EmptySupport,
    #[error("scorer timed out after {0} ms")]
    Timeout(u64),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("request context is empty")]
    EmptyContext,
}

#[derive(Debug, Clone, Copy)]
pub struct ScoreRequest<'a> {
    /// Prompt followed by everything generated so far.
    pub context: &'a [TokenId],
    /// Number of leading prompt tokens in `context`.
    pub prompt_len: usize,
    /// Allowed tokens, ascending and nonempty, in constrained mode.
    pub mask: Option<&'a [TokenId]>,
    /// Index state of the open docid span, in constrained mode.
    pub search_state: Option<SearchState>,
}

impl<'a> ScoreRequest<'a> {
    pub fn prompt(&self) -> &'a [TokenId] {
        &self.context[..self.prompt_len.min(self.context.len())]
    }

    pub fn generated(&self) -> &'a [TokenId] {
        &self.context[self.prompt_len.min(self.context.len())..]
    }

    fn check(&self) -> Result<(), ScorerError> {
        if self.context.is_empty() {
            return Err(ScorerError::EmptyContext);
        }
        if self.mask.is_some_and(<[TokenId]>::is_empty) {
            return Err(ScorerError::EmptySupport);
        }
        Ok(())
    }
}

/// Normalized log-probabilities, sorted by token id.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreResponse {
    logprobs: Vec<(TokenId, f64)>,
}

impl ScoreResponse {
    /// Log-softmax of unnormalized scores. Entries at negative infinity are
    /// dropped; duplicate ids are rejected.
    pub fn from_logits(logits: impl IntoIterator<Item = (TokenId, f64)>) -> Result<Self, ScorerError> {
        let mut v: Vec<(TokenId, f64)> = logits.into_iter().collect();
        if v.iter().any(|(_, x)| x.is_nan() || *x == f64::INFINITY) {
            return Err(ScorerError::Protocol("score is NaN or +inf".into()));
        }
        v.retain(|(_, x)| x.is_finite());
        if v.is_empty() {
            return Err(ScorerError::EmptySupport);
        }
        v.sort_unstable_by_key(|&(t, _)| t);
        if v.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(ScorerError::Protocol("duplicate token in scores".into()));
        }
        let max = v.iter().map(|&(_, x)| x).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + v.iter().map(|&(_, x)| (x - max).exp()).sum::<f64>().ln();
        for (_, x) in &mut v {
            *x -= lse;
        }
        Ok(Self { logprobs: v })
    }

    /// Uniform distribution over `tokens`.
    pub fn uniform(tokens: &[TokenId]) -> Result<Self, ScorerError> {
        Self::from_logits(tokens.iter().map(|&t| (t, 0.0)))
    }

    /// All mass on `token`.
    pub fn certain(token: TokenId) -> Self {
        Self {
            logprobs: vec![(token, 0.0)],
        }
    }

    /// Keeps only ids in the ascending `mask` and renormalizes.
    pub fn restrict(&self, mask: &[TokenId]) -> Result<Self, ScorerError> {
        Self::from_logits(
            self.logprobs
                .iter()
                .copied()
                .filter(|(t, _)| mask.binary_search(t).is_ok()),
        )
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = (TokenId, f64)> + '_ {
        self.logprobs.iter().copied()
    }

    pub fn support(&self) -> impl ExactSizeIterator<Item = TokenId> + '_ {
        self.logprobs.iter().map(|&(t, _)| t)
    }

    pub fn len(&self) -> usize {
        self.logprobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logprobs.is_empty()
    }

    pub fn get(&self, token: TokenId) -> Option<f64> {
        self.logprobs
            .binary_search_by_key(&token, |&(t, _)| t)
            .ok()
            .map(|i| self.logprobs[i].1)
    }

    /// Highest log-probability; ties go to the smallest id.
    pub fn argmax(&self) -> TokenId {
        let mut best = self.logprobs[0];
        for &(t, x) in &self.logprobs[1..] {
            if x > best.1 {
                best = (t, x);
            }
        }
        best.0
    }

    pub fn log_sum_exp(&self) -> f64 {
        let max = self.logprobs.iter().map(|&(_, x)| x).fold(f64::NEG_INFINITY, f64::max);
        max + self.logprobs.iter().map(|&(_, x)| (x - max).exp()).sum::<f64>().ln()
    }

    pub fn is_normalized(&self) -> bool {
        self.log_sum_exp().abs() <= NORM_TOLERANCE
    }
}

pub trait Scorer: Send + Sync {
    fn score(&self, req: &ScoreRequest<'_>) -> Result<ScoreResponse, ScorerError>;

    /// Whether calls leave the process; used to split latency accounting.
    fn is_remote(&self) -> bool {
        false
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn score(&self, req: &ScoreRequest<'_>) -> Result<ScoreResponse, ScorerError> {
        (**self).score(req)
    }

    fn is_remote(&self) -> bool {
        (**self).is_remote()
    }
}

impl<S: Scorer + ?Sized> Scorer for Box<S> {
    fn score(&self, req: &ScoreRequest<'_>) -> Result<ScoreResponse, ScorerError> {
        (**self).score(req)
    }

    fn is_remote(&self) -> bool {
        (**self).is_remote()
    }
}

impl<S: Scorer + ?Sized> Scorer for std::sync::Arc<S> {
    fn score(&self, req: &ScoreRequest<'_>) -> Result<ScoreResponse, ScorerError> {
        (**self).score(req)
    }

    fn is_remote(&self) -> bool {
        (**self).is_remote()
    }
}
