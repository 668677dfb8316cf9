use std::collections::{HashMap, HashSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ScoreRequest, ScoreResponse, Scorer, ScorerError, DEFAULT_TIMEOUT_MS};
use crate::tokenizer::TokenId;

#[derive(Serialize)]
struct WireRequest<'a> {
    context_ids: &'a [TokenId],
    mask_ids: Option<&'a [TokenId]>,
}

#[derive(Deserialize)]
struct WireResponse {
    logprobs: HashMap<String, f64>,
}

/// HTTP client for an external model.
///
/// One JSON POST per decoding step. The server may return scores over any
/// superset of the mask; they are restricted to the mask and renormalized.
/// Errors are surfaced, never retried.
pub struct RemoteScorer {
    url: String,
    timeout_ms: u64,
    agent: ureq::Agent,
}

impl RemoteScorer {
    pub fn new(url: impl Into<String>) -> Self {
        Self::with_timeout(url, DEFAULT_TIMEOUT_MS)
    }

    pub fn with_timeout(url: impl Into<String>, timeout_ms: u64) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(timeout_ms)))
            .http_status_as_error(true)
            .build()
            .into();
        Self {
            url: url.into(),
            timeout_ms,
            agent,
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn map_err(&self, e: ureq::Error) -> ScorerError {
        match e {
            ureq::Error::Timeout(_) => ScorerError::Timeout(self.timeout_ms),
            ureq::Error::Json(e) => ScorerError::Protocol(format!("malformed response: {e}")),
            ureq::Error::StatusCode(code) if (400..500).contains(&code) => {
                ScorerError::Protocol(format!("server rejected request with status {code}"))
            }
            other => ScorerError::Unavailable(other.to_string()),
        }
    }
}

impl Scorer for RemoteScorer {
    fn score(&self, req: &ScoreRequest<'_>) -> Result<ScoreResponse, ScorerError> {
        req.check()?;
        let body = WireRequest {
            context_ids: req.context,
            mask_ids: req.mask,
        };
        let wire: WireResponse = self
            .agent
            .post(&self.url)
            .send_json(&body)
            .and_then(|mut r| r.body_mut().read_json())
            .map_err(|e| self.map_err(e))?;
        let mut scores = Vec::with_capacity(wire.logprobs.len());
        for (k, v) in wire.logprobs {
            let id: TokenId = k
                .parse()
                .map_err(|_| ScorerError::Protocol(format!("token key {k:?} is not an id")))?;
            scores.push((id, v));
        }
        if let Some(mask) = req.mask {
            let returned: HashSet<TokenId> = scores.iter().map(|&(id, _)| id).collect();
            if let Some(&missing) = mask.iter().find(|t| !returned.contains(t)) {
                return Err(ScorerError::Protocol(format!(
                    "response omits allowed token {missing}"
                )));
            }
        }
        let resp = ScoreResponse::from_logits(scores)?;
        match req.mask {
            Some(mask) => resp.restrict(mask),
            None => Ok(resp),
        }
    }

    fn is_remote(&self) -> bool {
        true
    }
}
