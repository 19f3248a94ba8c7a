//! Turns a validated config into engine objects.

use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use quest_core::engine::{ChainConfig, GibbsTarget};
use quest_core::http::RetryPolicy;
use quest_core::lm::{LanguageModel, NgramLm, PositionalLm, RemoteLm, TabularLm};
use quest_core::proposal::{IndexDistribution, ProposalKind, ProposalSpec};
use quest_core::reward::{ConstantReward, LengthGaussian, LengthGaussianParams, RemoteScorer, Reward};
use quest_core::{Prompt, Vocab};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{
    resolve_endpoint, ExperimentConfig, HttpConfig, LmConfig, ProposalKindConfig, RewardConfig, Variant,
    LM_ENDPOINT_ENV, SCORER_ENDPOINT_ENV,
};

/// Everything a command needs to sample.
pub struct Experiment {
    pub lm: Box<dyn LanguageModel>,
    pub reward: Arc<dyn Reward>,
    pub target: GibbsTarget,
    pub spec: ProposalSpec,
    pub prompt: Prompt,
}

fn vocab(symbols: &[String]) -> Result<Vocab> {
    Vocab::from_content(symbols.iter().cloned()).context("building the vocabulary")
}

fn timeout(http: &HttpConfig) -> (Duration, RetryPolicy) {
    (
        Duration::from_millis(http.timeout_ms),
        RetryPolicy {
            max_retries: http.max_retries,
            backoff_ms: http.backoff_ms,
        },
    )
}

pub fn build_lm(cfg: &LmConfig) -> Result<Box<dyn LanguageModel>> {
    Ok(match cfg {
        LmConfig::TabularRandom {
            vocab: v,
            max_len,
            seed,
            concentration,
            eos_concentration,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            Box::new(TabularLm::random(vocab(v)?, *max_len, *concentration, *eos_concentration, &mut rng)?)
        }
        LmConfig::TabularUniform { vocab: v, max_len } => Box::new(TabularLm::uniform(vocab(v)?, *max_len)?),
        LmConfig::Geometric {
            vocab: v,
            max_len,
            eos_prob,
        } => Box::new(PositionalLm::geometric(vocab(v)?, *max_len, *eos_prob)?),
        LmConfig::FixedLength { vocab: v, length } => Box::new(PositionalLm::fixed_length(vocab(v)?, *length)?),
        LmConfig::Ngram {
            corpus,
            order,
            smoothing,
            max_len,
        } => {
            let text = std::fs::read_to_string(corpus)
                .with_context(|| format!("reading corpus {}", corpus.display()))?;
            Box::new(NgramLm::from_text(&text, *order, *smoothing, *max_len)?)
        }
        LmConfig::Remote {
            endpoint,
            vocab: v,
            max_len,
            http,
        } => {
            let url = resolve_endpoint(endpoint.as_deref(), LM_ENDPOINT_ENV).context("no LM endpoint")?;
            let (t, retry) = timeout(http);
            Box::new(RemoteLm::new(url, vocab(v)?, *max_len, t, retry))
        }
    })
}

pub fn build_reward(cfg: &RewardConfig, vocab: &Vocab) -> Result<Arc<dyn Reward>> {
    Ok(match cfg {
        RewardConfig::LengthGaussian { mu, sigma, clamp_eps } => Arc::new(LengthGaussian::new(LengthGaussianParams {
            mu: *mu,
            sigma: *sigma,
            clamp_eps: *clamp_eps,
        })?),
        RewardConfig::Constant { value } => Arc::new(ConstantReward(*value)),
        RewardConfig::RemoteScorer {
            endpoint,
            clamp_eps,
            http,
        } => {
            let url =
                resolve_endpoint(endpoint.as_deref(), SCORER_ENDPOINT_ENV).context("no scorer endpoint")?;
            let (t, retry) = timeout(http);
            Arc::new(RemoteScorer::new(url, vocab.clone(), *clamp_eps, t, retry)?)
        }
    })
}

pub fn build_target(cfg: &ExperimentConfig, reward: Arc<dyn Reward>, beta: f64) -> Result<GibbsTarget> {
    Ok(match cfg.target.variant {
        Variant::Plain => GibbsTarget::plain(reward, beta)?,
        Variant::KlRegularized => GibbsTarget::kl_regularized(reward, beta)?,
    })
}

pub fn proposal_spec(cfg: &ExperimentConfig) -> Result<ProposalSpec> {
    let index = if cfg.proposal.index_weights.is_empty() {
        IndexDistribution::Uniform
    } else {
        IndexDistribution::custom(cfg.proposal.index_weights.clone())?
    };
    Ok(ProposalSpec {
        kind: match cfg.proposal.kind {
            ProposalKindConfig::SuffixResample => ProposalKind::SuffixResample,
            ProposalKindConfig::TokenUniform => ProposalKind::TokenUniform,
            ProposalKindConfig::TokenFullConditional => ProposalKind::TokenFullConditional,
        },
        index,
        temperature: cfg.chain.temperature,
        top_k: cfg.proposal.top_k,
    })
}

pub fn chain_config(cfg: &ExperimentConfig, seed: u64) -> ChainConfig {
    ChainConfig {
        steps: cfg.chain.steps,
        burn_in: cfg.chain.burn_in,
        seed,
        record_rejected: cfg.chain.record_rejected,
    }
}

/// Seeds of the configured chains: `seed, seed + 1, ...`.
pub fn chain_seeds(cfg: &ExperimentConfig) -> Vec<u64> {
    (0..cfg.chain.n_chains as u64)
        .map(|k| cfg.chain.seed.wrapping_add(k))
        .collect()
}

pub fn build(cfg: &ExperimentConfig) -> Result<Experiment> {
    let lm = build_lm(&cfg.lm)?;
    let reward = build_reward(&cfg.reward, lm.vocab())?;
    let target = build_target(cfg, reward.clone(), cfg.target.beta)?;
    let prompt = if cfg.prompt.is_empty() {
        Prompt::empty()
    } else {
        Prompt::Text(cfg.prompt.clone())
    };
    Ok(Experiment {
        lm,
        reward,
        target,
        spec: proposal_spec(cfg)?,
        prompt,
    })
}
