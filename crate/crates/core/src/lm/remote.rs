use std::time::Duration;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{check_temperature, BackendKind, Continuation, LanguageModel, LmError};
use crate::http::{JsonClient, RemoteError, RetryPolicy};
use crate::tokens::{Prompt, Sequence, TokenId, Vocab};

/// Body POSTed to a remote LM server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteLmRequest {
    pub prompt: String,
    pub prefix_tokens: Vec<String>,
    pub temperature: f64,
    pub max_tokens: usize,
    /// When present the server must score exactly these tokens instead of
    /// sampling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forced_tokens: Option<Vec<String>>,
}

/// Server reply: the continuation and one logprob per token plus a trailing
/// EOS logprob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteLmResponse {
    pub tokens: Vec<String>,
    pub token_logprobs: Vec<f64>,
}

/// Language model served over HTTP. Sampling randomness lives on the server;
/// the local random stream is not consumed.
#[derive(Debug, Clone)]
pub struct RemoteLm {
    client: JsonClient,
    vocab: Vocab,
    max_len: usize,
}

impl RemoteLm {
    pub fn new(
        endpoint: impl Into<String>,
        vocab: Vocab,
        max_len: usize,
        timeout: Duration,
        retry: RetryPolicy,
    ) -> Self {
        Self {
            client: JsonClient::new(endpoint, timeout, retry),
            vocab,
            max_len,
        }
    }

    pub fn endpoint(&self) -> &str {
        self.client.endpoint()
    }

    fn request(
        &self,
        prompt: &Prompt,
        prefix: &[TokenId],
        temperature: f64,
        forced: Option<&[TokenId]>,
    ) -> Result<Continuation, LmError> {
        check_temperature(temperature)?;
        if prompt.is_empty() {
            return Err(LmError::EmptyPrompt);
        }
        self.vocab.check(prefix)?;
        if prefix.len() > self.max_len {
            return Err(LmError::TooLong {
                len: prefix.len(),
                max: self.max_len,
            });
        }
        let budget = self.max_len - prefix.len();
        let body = RemoteLmRequest {
            prompt: prompt.render(&self.vocab),
            prefix_tokens: self.vocab.decode(prefix),
            temperature,
            max_tokens: forced.map_or(budget, <[TokenId]>::len),
            forced_tokens: forced.map(|f| self.vocab.decode(f)),
        };
        let resp: RemoteLmResponse = self.client.post(&body)?;
        self.validate(resp, budget, forced)
    }

    fn validate(
        &self,
        resp: RemoteLmResponse,
        budget: usize,
        forced: Option<&[TokenId]>,
    ) -> Result<Continuation, LmError> {
        let violation = |m: String| LmError::Remote(RemoteError::Contract(m));
        if resp.token_logprobs.len() != resp.tokens.len() + 1 {
            return Err(violation(format!(
                "expected {} logprobs for {} tokens plus EOS, got {}",
                resp.tokens.len() + 1,
                resp.tokens.len(),
                resp.token_logprobs.len()
            )));
        }
        if resp.tokens.len() > budget {
            return Err(violation(format!(
                "{} tokens returned with a budget of {budget}",
                resp.tokens.len()
            )));
        }
        if let Some(bad) = resp
            .token_logprobs
            .iter()
            .find(|lp| !lp.is_finite() || **lp > 1e-9)
        {
            return Err(violation(format!("invalid log-probability {bad}")));
        }
        let tokens = resp
            .tokens
            .iter()
            .map(|s| match self.vocab.id(s) {
                Some(id) if id != self.vocab.eos() => Ok(id),
                _ => Err(violation(format!("token {s:?} is not a content token"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(f) = forced {
            if tokens != f {
                return Err(violation("scored tokens differ from the forced tokens".into()));
            }
        }
        Ok(Continuation {
            tokens: Sequence::new(tokens),
            token_logprobs: resp.token_logprobs,
        })
    }
}

impl LanguageModel for RemoteLm {
    fn kind(&self) -> BackendKind {
        BackendKind::Remote
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn base_distribution(&self, _: &Prompt, _: &[TokenId]) -> Result<Vec<f64>, LmError> {
        Err(LmError::Unsupported(BackendKind::Remote))
    }

    fn sample_continuation(
        &self,
        prompt: &Prompt,
        prefix: &[TokenId],
        temperature: f64,
        _rng: &mut dyn RngCore,
    ) -> Result<Continuation, LmError> {
        self.request(prompt, prefix, temperature, None)
    }

    fn continuation_logprobs(
        &self,
        prompt: &Prompt,
        prefix: &[TokenId],
        suffix: &[TokenId],
        temperature: f64,
    ) -> Result<Vec<f64>, LmError> {
        self.vocab.check(suffix)?;
        if prefix.len() + suffix.len() > self.max_len {
            return Err(LmError::TooLong {
                len: prefix.len() + suffix.len(),
                max: self.max_len,
            });
        }
        Ok(self
            .request(prompt, prefix, temperature, Some(suffix))?
            .token_logprobs)
    }
}
