use crate::lm::{Continuation, LanguageModel, LmError};
use crate::tokens::{Prompt, Sequence};

/// A chain state: the sequence together with its per-token log-probabilities
/// (EOS last) at `temperature`, and the reward once it has been computed.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub sequence: Sequence,
    pub token_logprobs: Vec<f64>,
    pub temperature: f64,
    pub reward: Option<f64>,
}

impl Hypothesis {
    pub fn from_continuation(c: Continuation, temperature: f64) -> Self {
        Self {
            sequence: c.tokens,
            token_logprobs: c.token_logprobs,
            temperature,
            reward: None,
        }
    }

    /// Scores an arbitrary sequence with the model.
    pub fn score(
        lm: &dyn LanguageModel,
        prompt: &Prompt,
        sequence: Sequence,
        temperature: f64,
    ) -> Result<Self, LmError> {
        let token_logprobs = lm.continuation_logprobs(prompt, &[], &sequence, temperature)?;
        Ok(Self {
            sequence,
            token_logprobs,
            temperature,
            reward: None,
        })
    }

    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }

    /// `log p_LM,τ(y | x)` including EOS.
    pub fn lm_logprob(&self) -> f64 {
        self.token_logprobs.iter().sum()
    }

    /// `log p_LM,τ(y_{≥i} | y_{<i}, x)` for a 1-based index `i`.
    pub fn suffix_logprob(&self, index: usize) -> f64 {
        self.token_logprobs[index - 1..].iter().sum()
    }

    pub fn with_reward(mut self, reward: f64) -> Self {
        self.reward = Some(reward);
        self
    }
}
