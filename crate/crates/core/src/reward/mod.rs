//! Sequence-level rewards that define the Gibbs energy.

mod remote;

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http::RemoteError;
use crate::lm::{sequence_logprob, LanguageModel, LmError};
use crate::tokens::{Prompt, Sequence};

pub use remote::{RemoteScorer, ScoreRequest, ScoreResponse};

/// Clamp bound used wherever a bounded score is turned into a logit and no
/// other bound is configured.
pub const DEFAULT_CLAMP_EPS: f64 = 1e-2;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("score {0} is outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("invalid reward parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Remote(#[from] RemoteError),
}

impl RewardError {
    pub fn is_retriable(&self) -> bool {
        match self {
            RewardError::Lm(e) => e.is_retriable(),
            RewardError::Remote(e) => e.is_retriable(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    LengthGaussian,
    LogitClampedScore,
    KlRegularized,
    RemoteScorer,
    Constant,
}

impl fmt::Display for RewardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RewardKind::LengthGaussian => "length_gaussian",
            RewardKind::LogitClampedScore => "logit_clamped_score",
            RewardKind::KlRegularized => "kl_regularized",
            RewardKind::RemoteScorer => "remote_scorer",
            RewardKind::Constant => "constant",
        };
        f.write_str(s)
    }
}

/// A reward `r(x, y)`. Implementations must be deterministic and return
/// finite values for every valid input.
pub trait Reward: Send + Sync {
    fn kind(&self) -> RewardKind;
    fn score(&self, prompt: &Prompt, y: &Sequence) -> Result<f64, RewardError>;
}

/// `logit(clamp(s, ε, 1 - ε))`
pub fn logit_clamp(s: f64, eps: f64) -> Result<f64, RewardError> {
    if !(eps > 0.0 && eps < 0.5) {
        return Err(RewardError::InvalidParams(format!(
            "clamp bound must lie in (0, 0.5), got {eps}"
        )));
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(RewardError::ScoreOutOfRange(s));
    }
    let p = s.clamp(eps, 1.0 - eps);
    Ok((p / (1.0 - p)).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthGaussianParams {
    pub mu: f64,
    pub sigma: f64,
    pub clamp_eps: f64,
}

impl Default for LengthGaussianParams {
    fn default() -> Self {
        Self {
            mu: 7.5,
            sigma: 3.75,
            clamp_eps: DEFAULT_CLAMP_EPS,
        }
    }
}

impl LengthGaussianParams {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(RewardError::InvalidParams(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !self.mu.is_finite() {
            return Err(RewardError::InvalidParams("mu must be finite".into()));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(RewardError::InvalidParams(format!(
                "clamp_eps must lie in (0, 0.5), got {}",
                self.clamp_eps
            )));
        }
        Ok(())
    }
}

/// Logit of the clamped Gaussian density of the sequence length.
pub fn length_gaussian_reward(len: usize, params: &LengthGaussianParams) -> f64 {
    let z = (len as f64 - params.mu) / params.sigma;
    let log_pdf = -0.5 * z * z - (params.sigma * (2.0 * PI).sqrt()).ln();
    let eps = params.clamp_eps;
    let p = if log_pdf <= eps.ln() {
        eps
    } else {
        log_pdf.exp().min(1.0 - eps)
    };
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone)]
pub struct LengthGaussian {
    params: LengthGaussianParams,
}

impl LengthGaussian {
    pub fn new(params: LengthGaussianParams) -> Result<Self, RewardError> {
        params.validate()?;
        Ok(Self { params })
    }

    pub fn params(&self) -> &LengthGaussianParams {
        &self.params
    }
}

impl Reward for LengthGaussian {
    fn kind(&self) -> RewardKind {
        RewardKind::LengthGaussian
    }

    fn score(&self, _prompt: &Prompt, y: &Sequence) -> Result<f64, RewardError> {
        Ok(length_gaussian_reward(y.len(), &self.params))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantReward(pub f64);

impl Reward for ConstantReward {
    fn kind(&self) -> RewardKind {
        RewardKind::Constant
    }

    fn score(&self, _: &Prompt, _: &Sequence) -> Result<f64, RewardError> {
        Ok(self.0)
    }
}

type ScoreFn = dyn Fn(&Prompt, &Sequence) -> f64 + Send + Sync;

/// Wraps a local scorer with values in `[0, 1]` behind [`logit_clamp`].
pub struct LogitClampedScore {
    scorer: Box<ScoreFn>,
    eps: f64,
}

impl LogitClampedScore {
    pub fn new<F>(scorer: F, eps: f64) -> Result<Self, RewardError>
    where
        F: Fn(&Prompt, &Sequence) -> f64 + Send + Sync + 'static,
    {
        logit_clamp(0.5, eps)?;
        Ok(Self {
            scorer: Box::new(scorer),
            eps,
        })
    }
}

impl Reward for LogitClampedScore {
    fn kind(&self) -> RewardKind {
        RewardKind::LogitClampedScore
    }

    fn score(&self, prompt: &Prompt, y: &Sequence) -> Result<f64, RewardError> {
        logit_clamp((self.scorer)(prompt, y), self.eps)
    }
}

/// `r̃(x, y) = log p_LM(y | x) + r(x, y) / β`, with the likelihood taken at
/// temperature 1.
pub struct KlRegularized {
    lm: Arc<dyn LanguageModel>,
    base: Arc<dyn Reward>,
    beta: f64,
}

impl KlRegularized {
    pub fn new(
        lm: Arc<dyn LanguageModel>,
        base: Arc<dyn Reward>,
        beta: f64,
    ) -> Result<Self, RewardError> {
        if !(beta > 0.0) {
            return Err(RewardError::InvalidParams(format!(
                "beta must be positive, got {beta}"
            )));
        }
        Ok(Self { lm, base, beta })
    }
}

/// Convenience constructor matching the operation name.
pub fn kl_regularized_reward(
    lm: Arc<dyn LanguageModel>,
    base: Arc<dyn Reward>,
    beta: f64,
) -> Result<KlRegularized, RewardError> {
    KlRegularized::new(lm, base, beta)
}

impl Reward for KlRegularized {
    fn kind(&self) -> RewardKind {
        RewardKind::KlRegularized
    }

    fn score(&self, prompt: &Prompt, y: &Sequence) -> Result<f64, RewardError> {
        let lp = sequence_logprob(self.lm.as_ref(), y, prompt, 1.0)?;
        Ok(lp + self.base.score(prompt, y)? / self.beta)
    }
}
