//! Proposal kernels.
//!
//! The suffix-resample kernel keeps the prefix before a sampled index and
//! regenerates the rest from the language model. Two single-token kernels
//! serve as baselines: a uniform token replacement and a full-conditional
//! replacement over the top-k tokens.
//!
//! Indices are 1-based: index `i` keeps `y[..i-1]`, so `i = 1` regenerates
//! the whole sequence. An empty state always uses `i = 1`.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypothesis::Hypothesis;
use crate::lm::{LanguageModel, LmError};
use crate::math::{sample_categorical, softmax};
use crate::reward::RewardError;
use crate::target::GibbsTarget;
use crate::tokens::{Prompt, Sequence, TokenId, Vocab};

#[derive(Debug, Error)]
pub enum ProposalError {
    #[error("token-level proposals need a non-empty state")]
    EmptyState,
    #[error("invalid proposal configuration: {0}")]
    InvalidSpec(String),
    #[error("state log-probabilities were computed at temperature {state}, proposal uses {proposal}")]
    TemperatureMismatch { state: f64, proposal: f64 },
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

/// `q(i | n)` over positions `1..=n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexDistribution {
    Uniform,
    /// Position `i` gets weight `w[i-1]` (zero past the end), renormalized
    /// over `1..=n`.
    Weights(Vec<f64>),
}

impl IndexDistribution {
    pub fn custom(weights: Vec<f64>) -> Result<Self, ProposalError> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(ProposalError::InvalidSpec(
                "index weights must be finite and non-negative".into(),
            ));
        }
        if weights.first().is_none_or(|&w| w <= 0.0) {
            return Err(ProposalError::InvalidSpec(
                "the first index weight must be positive".into(),
            ));
        }
        Ok(IndexDistribution::Weights(weights))
    }

    pub fn validate(&self) -> Result<(), ProposalError> {
        match self {
            IndexDistribution::Uniform => Ok(()),
            IndexDistribution::Weights(w) => Self::custom(w.clone()).map(|_| ()),
        }
    }

    /// `q(i | n)`. For `n = 0` the only index is 1.
    pub fn prob(&self, i: usize, n: usize) -> f64 {
        if n == 0 {
            return if i == 1 { 1.0 } else { 0.0 };
        }
        if i == 0 || i > n {
            return 0.0;
        }
        match self {
            IndexDistribution::Uniform => 1.0 / n as f64,
            IndexDistribution::Weights(w) => {
                let total: f64 = w.iter().take(n).sum();
                w.get(i - 1).copied().unwrap_or(0.0) / total
            }
        }
    }

    pub fn log_prob(&self, i: usize, n: usize) -> f64 {
        self.prob(i, n).ln()
    }

    /// Probabilities for `i = 1..=max(n, 1)`.
    pub fn probs(&self, n: usize) -> Vec<f64> {
        (1..=n.max(1)).map(|i| self.prob(i, n)).collect()
    }
}

/// Draws `i ∈ {1, …, n}`; an empty state forces `i = 1`.
pub fn sample_index(dist: &IndexDistribution, n: usize, rng: &mut dyn RngCore) -> usize {
    if n <= 1 {
        return 1;
    }
    match dist {
        IndexDistribution::Uniform => rng.random_range(1..=n),
        IndexDistribution::Weights(_) => sample_categorical(&dist.probs(n), rng) + 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalKind {
    SuffixResample,
    TokenUniform,
    TokenFullConditional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSpec {
    pub kind: ProposalKind,
    pub index: IndexDistribution,
    /// LM temperature used both to sample and to score proposals.
    pub temperature: f64,
    /// Vocabulary truncation for the full-conditional kernel.
    pub top_k: usize,
}

impl ProposalSpec {
    pub fn suffix(temperature: f64) -> Self {
        Self {
            kind: ProposalKind::SuffixResample,
            index: IndexDistribution::Uniform,
            temperature,
            top_k: 1,
        }
    }

    pub fn validate(&self) -> Result<(), ProposalError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ProposalError::InvalidSpec(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.kind == ProposalKind::TokenFullConditional && self.top_k == 0 {
            return Err(ProposalError::InvalidSpec("top_k must be at least 1".into()));
        }
        self.index.validate()
    }
}

/// A proposed move.
///
/// For the suffix kernel `forward_logprob` is `log q(y | yᵗ, x, i)`, the
/// index probability excluded, and `reverse_logprob` is the density of
/// regenerating the old suffix, `-inf` when index `i` cannot be drawn from
/// the candidate. The token kernels fold the position choice into both
/// terms; since they preserve length the index ratio is one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalOutcome {
    pub candidate: Sequence,
    pub index: usize,
    pub forward_logprob: f64,
    pub reverse_logprob: f64,
    /// Per-token log-probabilities of the candidate when the kernel knows
    /// them without re-scoring.
    pub candidate_token_logprobs: Option<Vec<f64>>,
    pub tokens_generated: usize,
}

impl ProposalOutcome {
    pub fn into_hypothesis(self, temperature: f64) -> Option<Hypothesis> {
        let logprobs = self.candidate_token_logprobs?;
        Some(Hypothesis {
            sequence: self.candidate,
            token_logprobs: logprobs,
            temperature,
            reward: None,
        })
    }
}

/// Keeps `current[..i-1]` and samples the remainder from the model.
pub fn propose_suffix(
    lm: &dyn LanguageModel,
    current: &Hypothesis,
    prompt: &Prompt,
    spec: &ProposalSpec,
    rng: &mut dyn RngCore,
) -> Result<ProposalOutcome, ProposalError> {
    let i = sample_index(&spec.index, current.len(), rng);
    propose_suffix_at(lm, current, prompt, spec, i, rng)
}

/// [`propose_suffix`] with a fixed index.
pub fn propose_suffix_at(
    lm: &dyn LanguageModel,
    current: &Hypothesis,
    prompt: &Prompt,
    spec: &ProposalSpec,
    index: usize,
    rng: &mut dyn RngCore,
) -> Result<ProposalOutcome, ProposalError> {
    if current.temperature != spec.temperature {
        return Err(ProposalError::TemperatureMismatch {
            state: current.temperature,
            proposal: spec.temperature,
        });
    }
    let n = current.len();
    if index == 0 || index > n.max(1) {
        return Err(ProposalError::InvalidSpec(format!(
            "index {index} out of range for a state of length {n}"
        )));
    }
    let prefix = &current.sequence[..index - 1];
    let cont = lm.sample_continuation(prompt, prefix, spec.temperature, rng)?;
    let candidate = Sequence::concat(prefix, &cont.tokens);
    let forward = cont.logprob();
    let reverse = if spec.index.prob(index, candidate.len()) > 0.0 {
        current.suffix_logprob(index)
    } else {
        f64::NEG_INFINITY
    };
    let mut logprobs = current.token_logprobs[..index - 1].to_vec();
    logprobs.extend_from_slice(&cont.token_logprobs);
    Ok(ProposalOutcome {
        candidate,
        index,
        forward_logprob: forward,
        reverse_logprob: reverse,
        candidate_token_logprobs: Some(logprobs),
        tokens_generated: cont.tokens.len(),
    })
}

/// Replaces one uniformly chosen position with a uniformly chosen content
/// token (possibly the same one).
pub fn propose_token_uniform(
    current: &Sequence,
    vocab: &Vocab,
    rng: &mut dyn RngCore,
) -> Result<ProposalOutcome, ProposalError> {
    let n = current.len();
    if n == 0 {
        return Err(ProposalError::EmptyState);
    }
    let i = rng.random_range(1..=n);
    let content: Vec<TokenId> = vocab.content_ids().collect();
    let v = content[rng.random_range(0..content.len())];
    let mut tokens = current.to_vec();
    tokens[i - 1] = v;
    let lp = -((n * content.len()) as f64).ln();
    Ok(ProposalOutcome {
        candidate: tokens.into(),
        index: i,
        forward_logprob: lp,
        reverse_logprob: lp,
        candidate_token_logprobs: None,
        tokens_generated: 1,
    })
}

/// The `k` most likely content tokens after `prefix` at temperature 1,
/// ties broken by token id.
pub fn top_k_tokens(
    lm: &dyn LanguageModel,
    prompt: &Prompt,
    prefix: &[TokenId],
    k: usize,
) -> Result<Vec<TokenId>, LmError> {
    let dist = lm.next_token_distribution(prompt, prefix, 1.0)?;
    let eos = lm.vocab().eos();
    let mut ids: Vec<TokenId> = lm.vocab().content_ids().collect();
    ids.sort_by(|&a, &b| {
        dist[b as usize]
            .total_cmp(&dist[a as usize])
            .then(a.cmp(&b))
    });
    ids.retain(|&t| t != eos);
    ids.truncate(k);
    Ok(ids)
}

/// Normalized replacement table at position `i` (1-based): candidate tokens
/// and their probabilities `∝ π̃(y_{<i}, v, y_{>i})`.
pub fn full_conditional_table(
    lm: &dyn LanguageModel,
    target: &GibbsTarget,
    current: &Sequence,
    prompt: &Prompt,
    index: usize,
    k: usize,
) -> Result<(Vec<TokenId>, Vec<f64>), ProposalError> {
    let candidates = top_k_tokens(lm, prompt, &current[..index - 1], k)?;
    let mut tokens = current.to_vec();
    let log_w = candidates
        .iter()
        .map(|&v| {
            tokens[index - 1] = v;
            target.log_density(lm, prompt, &Sequence::from(tokens.as_slice()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((candidates, softmax(&log_w)))
}

/// Single-site update from the target's full conditional restricted to the
/// top-k tokens under the model.
pub fn propose_token_full_conditional(
    lm: &dyn LanguageModel,
    target: &GibbsTarget,
    current: &Sequence,
    prompt: &Prompt,
    spec: &ProposalSpec,
    rng: &mut dyn RngCore,
) -> Result<ProposalOutcome, ProposalError> {
    let n = current.len();
    if n == 0 {
        return Err(ProposalError::EmptyState);
    }
    if spec.top_k == 0 {
        return Err(ProposalError::InvalidSpec("top_k must be at least 1".into()));
    }
    let i = sample_index(&spec.index, n, rng);
    let (cands, probs) = full_conditional_table(lm, target, current, prompt, i, spec.top_k)?;
    let pick = sample_categorical(&probs, rng);
    let log_q_i = spec.index.log_prob(i, n);
    let old = current[i - 1];
    let reverse = match cands.iter().position(|&t| t == old) {
        Some(j) => log_q_i + probs[j].ln(),
        None => f64::NEG_INFINITY,
    };
    let mut tokens = current.to_vec();
    tokens[i - 1] = cands[pick];
    Ok(ProposalOutcome {
        candidate: tokens.into(),
        index: i,
        forward_logprob: log_q_i + probs[pick].ln(),
        reverse_logprob: reverse,
        candidate_token_logprobs: None,
        tokens_generated: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::TabularLm;
    use crate::reward::{ConstantReward, LengthGaussian, LengthGaussianParams, LogitClampedScore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn abc() -> Vocab {
        Vocab::from_content(["a", "b", "c"]).unwrap()
    }

    #[test]
    fn index_probabilities() {
        let u = IndexDistribution::Uniform;
        assert_eq!(u.probs(4), vec![0.25; 4]);
        assert_eq!(u.prob(1, 0), 1.0);
        assert_eq!(u.prob(2, 0), 0.0);
        assert_eq!(u.prob(5, 4), 0.0);
        let w = IndexDistribution::custom(vec![2.0, 1.0, 1.0]).unwrap();
        assert_eq!(w.probs(2), vec![2.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(w.probs(5), vec![0.5, 0.25, 0.25, 0.0, 0.0]);
        assert!(IndexDistribution::custom(vec![0.0, 1.0]).is_err());
        assert!(IndexDistribution::custom(vec![]).is_err());
        assert!(IndexDistribution::custom(vec![1.0, -1.0]).is_err());
    }

    #[test]
    fn single_position_always_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in [0, 1] {
            for _ in 0..20 {
                assert_eq!(sample_index(&IndexDistribution::Uniform, n, &mut rng), 1);
            }
        }
    }

    #[test]
    fn suffix_preserves_prefix_and_caches_logprobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lm = TabularLm::random(abc(), 5, 1.0, 0.5, &mut rng).unwrap();
        let spec = ProposalSpec::suffix(0.8);
        let start = lm
            .sample_continuation(&Prompt::empty(), &[], 0.8, &mut rng)
            .unwrap();
        let mut cur = Hypothesis::from_continuation(start, 0.8);
        for _ in 0..2000 {
            let out = propose_suffix(&lm, &cur, &Prompt::empty(), &spec, &mut rng).unwrap();
            assert_eq!(&out.candidate[..out.index - 1], &cur.sequence[..out.index - 1]);
            assert!(out.forward_logprob.is_finite());
            let fresh = Hypothesis::score(&lm, &Prompt::empty(), out.candidate.clone(), 0.8).unwrap();
            let cached = out.clone().into_hypothesis(0.8).unwrap();
            for (a, b) in cached.token_logprobs.iter().zip(&fresh.token_logprobs) {
                assert!((a - b).abs() < 1e-9);
            }
            // forward density is the suffix density under the candidate's own cache
            assert!((cached.suffix_logprob(out.index) - out.forward_logprob).abs() < 1e-9);
            if out.reverse_logprob.is_finite() {
                assert!(out.index <= out.candidate.len().max(1));
            } else {
                assert!(out.index > out.candidate.len().max(1));
            }
            cur = cached;
        }
    }

    #[test]
    fn suffix_rejects_temperature_mismatch() {
        let lm = TabularLm::uniform(abc(), 3).unwrap();
        let cur = Hypothesis::score(&lm, &Prompt::empty(), vec![0].into(), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            propose_suffix(&lm, &cur, &Prompt::empty(), &ProposalSpec::suffix(0.5), &mut rng),
            Err(ProposalError::TemperatureMismatch { .. })
        ));
    }

    #[test]
    fn deterministic_lm_regenerates_its_path() {
        let lm = TabularLm::deterministic(abc(), &[1, 2, 0]).unwrap();
        let cur = Hypothesis::score(&lm, &Prompt::empty(), vec![1, 2, 0].into(), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let out =
                propose_suffix(&lm, &cur, &Prompt::empty(), &ProposalSpec::suffix(1.0), &mut rng)
                    .unwrap();
            assert_eq!(out.candidate.tokens(), &[1, 2, 0]);
            assert_eq!(out.forward_logprob, 0.0);
        }
    }

    #[test]
    fn empty_state_regenerates_everything() {
        let lm = TabularLm::uniform(abc(), 3).unwrap();
        let cur = Hypothesis::score(&lm, &Prompt::empty(), Sequence::empty(), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out =
            propose_suffix(&lm, &cur, &Prompt::empty(), &ProposalSpec::suffix(1.0), &mut rng)
                .unwrap();
        assert_eq!(out.index, 1);
        assert!(out.reverse_logprob.is_finite());
    }

    #[test]
    fn token_uniform_is_symmetric() {
        let v = abc();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cur: Sequence = vec![0, 1, 2, 0].into();
        let mut saw_identity = false;
        for _ in 0..500 {
            let out = propose_token_uniform(&cur, &v, &mut rng).unwrap();
            assert_eq!(out.forward_logprob, out.reverse_logprob);
            assert!((out.forward_logprob - (1.0f64 / 12.0).ln()).abs() < 1e-12);
            let diffs = (0..4).filter(|&j| out.candidate[j] != cur[j]).count();
            assert!(diffs <= 1);
            saw_identity |= out.candidate == cur;
        }
        assert!(saw_identity);
        assert!(matches!(
            propose_token_uniform(&Sequence::empty(), &v, &mut rng),
            Err(ProposalError::EmptyState)
        ));
    }

    #[test]
    fn full_conditional_top1_is_deterministic_given_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let lm = TabularLm::random(abc(), 4, 1.0, 1.0, &mut rng).unwrap();
        let reward = Arc::new(LengthGaussian::new(LengthGaussianParams::default()).unwrap());
        let target = GibbsTarget::plain(reward, 0.5).unwrap();
        let mut spec = ProposalSpec::suffix(1.0);
        spec.kind = ProposalKind::TokenFullConditional;
        spec.top_k = 1;
        let cur: Sequence = vec![2, 2, 1].into();
        for _ in 0..50 {
            let out =
                propose_token_full_conditional(&lm, &target, &cur, &Prompt::empty(), &spec, &mut rng)
                    .unwrap();
            let best = top_k_tokens(&lm, &Prompt::empty(), &cur[..out.index - 1], 1).unwrap();
            assert_eq!(out.candidate[out.index - 1], best[0]);
            for j in 0..3 {
                if j != out.index - 1 {
                    assert_eq!(out.candidate[j], cur[j]);
                }
            }
        }
    }

    #[test]
    fn full_conditional_flattens_as_beta_grows() {
        // token-dependent score so the table is not trivially uniform
        let lm = TabularLm::uniform(abc(), 3).unwrap();
        let cur: Sequence = vec![0, 1].into();
        let mut last_spread = f64::INFINITY;
        for beta in [0.1, 1.0, 10.0, 1e9] {
            let target = GibbsTarget::plain(Arc::new(first_token_scorer()), beta).unwrap();
            let (_, probs) =
                full_conditional_table(&lm, &target, &cur, &Prompt::empty(), 1, 3).unwrap();
            let spread = probs.iter().cloned().fold(0.0, f64::max)
                - probs.iter().cloned().fold(1.0, f64::min);
            assert!(spread <= last_spread);
            last_spread = spread;
        }
        assert!(last_spread < 1e-8);

        // constant reward gives an exactly uniform table
        let target = GibbsTarget::plain(Arc::new(ConstantReward(3.0)), 0.5).unwrap();
        let (_, probs) = full_conditional_table(&lm, &target, &cur, &Prompt::empty(), 2, 3).unwrap();
        for p in probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    fn first_token_scorer() -> LogitClampedScore {
        LogitClampedScore::new(|_, y: &Sequence| [0.2, 0.5, 0.9][y[0] as usize], 0.01).unwrap()
    }
}
