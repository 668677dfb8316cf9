use std::collections::HashMap;

use super::{ScoreRequest, ScoreResponse, Scorer, ScorerError};
use crate::tokenizer::{TokenId, SEPARATOR_ID};

/// Replays fixed token scripts.
///
/// The script for a request is chosen by its prompt, falling back to a
/// default script. Position `i` of the generated history gets all mass on
/// `script[i]`; past the end of the script the separator (end of sequence)
/// is certain.
#[derive(Debug, Clone, Default)]
pub struct OracleScorer {
    by_prompt: HashMap<Vec<TokenId>, Vec<TokenId>>,
    fallback: Option<Vec<TokenId>>,
}

impl OracleScorer {
    /// One script for every prompt.
    pub fn new(script: Vec<TokenId>) -> Self {
        Self {
            by_prompt: HashMap::new(),
            fallback: Some(script),
        }
    }

    pub fn with_script(mut self, prompt: Vec<TokenId>, script: Vec<TokenId>) -> Self {
        self.by_prompt.insert(prompt, script);
        self
    }

    fn script_for(&self, prompt: &[TokenId]) -> Option<&[TokenId]> {
        self.by_prompt
            .get(prompt)
            .or(self.fallback.as_ref())
            .map(Vec::as_slice)
    }
}

impl Scorer for OracleScorer {
    fn score(&self, req: &ScoreRequest<'_>) -> Result<ScoreResponse, ScorerError> {
        req.check()?;
        let script = self
            .script_for(req.prompt())
            .ok_or_else(|| ScorerError::Unavailable("no script for prompt".into()))?;
        let pos = req.generated().len();
        let token = script.get(pos).copied().unwrap_or(SEPARATOR_ID);
        if let Some(mask) = req.mask {
            if mask.binary_search(&token).is_err() {
                return Err(ScorerError::Protocol(format!(
                    "scripted token {token} at position {pos} is not allowed"
                )));
            }
        }
        Ok(ScoreResponse::certain(token))
    }
}
