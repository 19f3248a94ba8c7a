use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{logit_clamp, Reward, RewardError, RewardKind};
use crate::http::{JsonClient, RetryPolicy};
use crate::tokens::{Prompt, Sequence, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub source: String,
    pub hypothesis: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub score: f64,
}

/// Reward backed by an external scorer returning values in `[0, 1]`.
///
/// With a clamp bound configured the score goes through [`logit_clamp`];
/// without one it is returned as is.
#[derive(Debug, Clone)]
pub struct RemoteScorer {
    client: JsonClient,
    vocab: Vocab,
    clamp_eps: Option<f64>,
}

impl RemoteScorer {
    pub fn new(
        endpoint: impl Into<String>,
        vocab: Vocab,
        clamp_eps: Option<f64>,
        timeout: Duration,
        retry: RetryPolicy,
    ) -> Result<Self, RewardError> {
        if let Some(eps) = clamp_eps {
            logit_clamp(0.5, eps)?;
        }
        Ok(Self {
            client: JsonClient::new(endpoint, timeout, retry),
            vocab,
            clamp_eps,
        })
    }

    /// Raw score in `[0, 1]`, before any transform.
    pub fn raw_score(&self, prompt: &Prompt, y: &Sequence) -> Result<f64, RewardError> {
        let req = ScoreRequest {
            source: prompt.render(&self.vocab),
            hypothesis: self.vocab.render(y),
        };
        let resp: ScoreResponse = self.client.post(&req)?;
        if !(0.0..=1.0).contains(&resp.score) {
            return Err(RewardError::ScoreOutOfRange(resp.score));
        }
        Ok(resp.score)
    }
}

impl Reward for RemoteScorer {
    fn kind(&self) -> RewardKind {
        RewardKind::RemoteScorer
    }

    fn score(&self, prompt: &Prompt, y: &Sequence) -> Result<f64, RewardError> {
        let s = self.raw_score(prompt, y)?;
        match self.clamp_eps {
            Some(eps) => logit_clamp(s, eps),
            None => Ok(s),
        }
    }
}
