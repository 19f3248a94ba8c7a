use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::lm::{sequence_logprob, LanguageModel};
use crate::reward::{Reward, RewardError};
use crate::tokens::{Prompt, Sequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetVariant {
    /// `π(y) ∝ exp(r(x, y) / β)`
    Plain,
    /// `π(y) ∝ p_LM(y | x) exp(r(x, y) / β)`
    KlRegularized,
}

/// Unnormalized Gibbs target over sequences. The partition function is never
/// computed here.
#[derive(Clone)]
pub struct GibbsTarget {
    pub reward: Arc<dyn Reward>,
    pub beta: f64,
    pub variant: TargetVariant,
}

impl GibbsTarget {
    pub fn new(reward: Arc<dyn Reward>, beta: f64, variant: TargetVariant) -> Result<Self, RewardError> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(RewardError::InvalidParams(format!(
                "beta must be positive and finite, got {beta}"
            )));
        }
        Ok(Self {
            reward,
            beta,
            variant,
        })
    }

    pub fn plain(reward: Arc<dyn Reward>, beta: f64) -> Result<Self, RewardError> {
        Self::new(reward, beta, TargetVariant::Plain)
    }

    pub fn kl_regularized(reward: Arc<dyn Reward>, beta: f64) -> Result<Self, RewardError> {
        Self::new(reward, beta, TargetVariant::KlRegularized)
    }

    /// Unnormalized log-density. The LM likelihood (temperature 1) enters
    /// only for the KL-regularized variant.
    pub fn log_density(
        &self,
        lm: &dyn LanguageModel,
        prompt: &Prompt,
        y: &Sequence,
    ) -> Result<f64, RewardError> {
        let r = self.reward.score(prompt, y)?;
        Ok(match self.variant {
            TargetVariant::Plain => r / self.beta,
            TargetVariant::KlRegularized => sequence_logprob(lm, y, prompt, 1.0)? + r / self.beta,
        })
    }
}

impl std::fmt::Debug for GibbsTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GibbsTarget")
            .field("reward", &self.reward.kind())
            .field("beta", &self.beta)
            .field("variant", &self.variant)
            .finish()
    }
}
