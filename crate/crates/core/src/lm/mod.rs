//! Autoregressive language models.
//!
//! Every backend exposes the same contract: a next-token distribution over
//! the full vocabulary (EOS included), ancestral sampling of continuations
//! and scoring of given continuations. All probabilities are handled in log
//! space. A prefix that already holds `max_len` tokens can only be followed
//! by EOS, so every model defines a proper distribution over sequences of
//! length at most `max_len`.

mod ngram;
mod remote;
mod tabular;

use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http::RemoteError;
use crate::math::{log_sum_exp, sample_categorical};
use crate::tokens::{Prompt, Sequence, TokenId, Vocab, VocabError};

pub use ngram::{fit_ngram, NgramLm};
pub use remote::{RemoteLm, RemoteLmRequest, RemoteLmResponse};
pub use tabular::{PositionalLm, TabularLm, MAX_TABLE_ROWS};

#[derive(Debug, Error)]
pub enum LmError {
    #[error("prefix of length {0} is at the maximum length; only EOS may follow")]
    AtMaxLength(usize),
    #[error("sequence of length {len} exceeds the maximum length {max}")]
    TooLong { len: usize, max: usize },
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("{0} backend does not support this operation")]
    Unsupported(BackendKind),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("cannot fit a model on an empty corpus")]
    EmptyCorpus,
    #[error("remote backends need a non-empty prompt")]
    EmptyPrompt,
    #[error(transparent)]
    Remote(#[from] RemoteError),
}

impl LmError {
    /// Whether retrying the same request might succeed.
    pub fn is_retriable(&self) -> bool {
        matches!(self, LmError::Remote(e) if e.is_retriable())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Tabular,
    Ngram,
    Remote,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Tabular => "tabular",
            BackendKind::Ngram => "ngram",
            BackendKind::Remote => "remote",
        })
    }
}

/// A sampled (or scored) continuation.
///
/// `token_logprobs` holds one entry per token plus a trailing entry for the
/// terminating EOS, all at the temperature the continuation was drawn at.
#[derive(Debug, Clone, PartialEq)]
pub struct Continuation {
    pub tokens: Sequence,
    pub token_logprobs: Vec<f64>,
}

impl Continuation {
    pub fn logprob(&self) -> f64 {
        self.token_logprobs.iter().sum()
    }
}

pub trait LanguageModel: Send + Sync {
    fn kind(&self) -> BackendKind;

    fn vocab(&self) -> &Vocab;

    /// Longest sequence the model can emit.
    fn max_len(&self) -> usize;

    /// Untempered next-token probabilities over the full vocabulary.
    ///
    /// Only called with `prefix.len() < max_len()`.
    fn base_distribution(&self, prompt: &Prompt, prefix: &[TokenId]) -> Result<Vec<f64>, LmError>;

    /// Temperature-adjusted next-token distribution, `p^(1/τ)` renormalized.
    fn next_token_distribution(
        &self,
        prompt: &Prompt,
        prefix: &[TokenId],
        temperature: f64,
    ) -> Result<Vec<f64>, LmError> {
        check_temperature(temperature)?;
        if prefix.len() >= self.max_len() {
            return Err(LmError::AtMaxLength(prefix.len()));
        }
        let base = self.base_distribution(prompt, prefix)?;
        Ok(apply_temperature(&base, temperature))
    }

    /// Draws tokens after `prefix` until EOS or `max_len`.
    fn sample_continuation(
        &self,
        prompt: &Prompt,
        prefix: &[TokenId],
        temperature: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Continuation, LmError> {
        check_temperature(temperature)?;
        let max = self.max_len();
        if prefix.len() > max {
            return Err(LmError::TooLong {
                len: prefix.len(),
                max,
            });
        }
        let eos = self.vocab().eos() as usize;
        let mut context = prefix.to_vec();
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        loop {
            if context.len() >= max {
                logprobs.push(0.0);
                break;
            }
            let dist = self.next_token_distribution(prompt, &context, temperature)?;
            let t = sample_categorical(&dist, rng);
            logprobs.push(dist[t].ln());
            if t == eos {
                break;
            }
            tokens.push(t as TokenId);
            context.push(t as TokenId);
        }
        Ok(Continuation {
            tokens: tokens.into(),
            token_logprobs: logprobs,
        })
    }

    /// Per-token log-probabilities of `suffix` (plus EOS) following `prefix`.
    fn continuation_logprobs(
        &self,
        prompt: &Prompt,
        prefix: &[TokenId],
        suffix: &[TokenId],
        temperature: f64,
    ) -> Result<Vec<f64>, LmError> {
        check_temperature(temperature)?;
        self.vocab().check(prefix)?;
        self.vocab().check(suffix)?;
        let max = self.max_len();
        let total = prefix.len() + suffix.len();
        if total > max {
            return Err(LmError::TooLong { len: total, max });
        }
        let eos = self.vocab().eos() as usize;
        let mut context = prefix.to_vec();
        let mut out = Vec::with_capacity(suffix.len() + 1);
        for &t in suffix {
            let dist = self.next_token_distribution(prompt, &context, temperature)?;
            out.push(dist[t as usize].ln());
            context.push(t);
        }
        if context.len() >= max {
            out.push(0.0);
        } else {
            let dist = self.next_token_distribution(prompt, &context, temperature)?;
            out.push(dist[eos].ln());
        }
        Ok(out)
    }
}

/// `log p(y | x)` at temperature `τ`, including the terminating EOS.
pub fn sequence_logprob(
    lm: &dyn LanguageModel,
    y: &[TokenId],
    prompt: &Prompt,
    temperature: f64,
) -> Result<f64, LmError> {
    Ok(lm
        .continuation_logprobs(prompt, &[], y, temperature)?
        .iter()
        .sum())
}

pub(crate) fn check_temperature(t: f64) -> Result<(), LmError> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(LmError::InvalidTemperature(t))
    }
}

/// Raises every probability to `1/τ` and renormalizes.
pub fn apply_temperature(probs: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 1.0 {
        let z: f64 = probs.iter().sum();
        return probs.iter().map(|p| p / z).collect();
    }
    let scaled: Vec<f64> = probs.iter().map(|p| p.ln() / temperature).collect();
    let z = log_sum_exp(&scaled);
    scaled.iter().map(|s| (s - z).exp()).collect()
}

/// Checks that a row is a probability vector of the right size and returns
/// it renormalized to sum exactly to one.
pub(crate) fn validate_row(row: Vec<f64>, size: usize) -> Result<Vec<f64>, LmError> {
    if row.len() != size {
        return Err(LmError::InvalidModel(format!(
            "distribution has {} entries, vocabulary has {size}",
            row.len()
        )));
    }
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(LmError::InvalidModel(
            "probabilities must be finite and non-negative".into(),
        ));
    }
    let z: f64 = row.iter().sum();
    if (z - 1.0).abs() > 1e-6 {
        return Err(LmError::InvalidModel(format!(
            "distribution sums to {z}, expected 1"
        )));
    }
    Ok(row.into_iter().map(|p| p / z).collect())
}
