//! Exact enumeration over small state spaces, used to verify the sampler.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rand::RngCore;
use rayon::prelude::*;
use thiserror::Error;

use crate::engine::MoveTerms;
use crate::hypothesis::Hypothesis;
use crate::lm::{LanguageModel, LmError};
use crate::math::{log_sum_exp, sample_categorical, softmax};
use crate::proposal::{full_conditional_table, ProposalError, ProposalKind, ProposalSpec};
use crate::reward::RewardError;
use crate::target::{GibbsTarget, TargetVariant};
use crate::tokens::{Prompt, Sequence, TokenId, Vocab};

pub const MAX_ENUMERATED_STATES: usize = 10_000_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("state space has {states} sequences, above the enumeration limit of {limit}")]
    TooManyStates { states: u128, limit: usize },
    #[error("enumeration length {l_max} does not match the model's maximum length {model_max}")]
    LengthMismatch { l_max: usize, model_max: usize },
    #[error("no samples to resample from")]
    EmptySamples,
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Proposal(#[from] ProposalError),
    #[error("csv export failed: {0}")]
    Csv(#[from] csv::Error),
}

/// `Σ_{l=0}^{l_max} c^l`, or `None` on overflow.
pub fn state_count(content_len: usize, l_max: usize) -> Option<u128> {
    let c = content_len as u128;
    let mut total: u128 = 0;
    let mut level: u128 = 1;
    for _ in 0..=l_max {
        total = total.checked_add(level)?;
        level = level.checked_mul(c)?;
    }
    Some(total)
}

fn guard(content_len: usize, l_max: usize) -> Result<usize, OracleError> {
    match state_count(content_len, l_max) {
        Some(n) if n <= MAX_ENUMERATED_STATES as u128 => Ok(n as usize),
        other => Err(OracleError::TooManyStates {
            states: other.unwrap_or(u128::MAX),
            limit: MAX_ENUMERATED_STATES,
        }),
    }
}

/// Every sequence of content tokens of length `0..=l_max`, in lexicographic
/// order (a prefix sorts before its extensions).
pub fn enumerate_sequences(vocab: &Vocab, l_max: usize) -> Result<Vec<Sequence>, OracleError> {
    let content: Vec<TokenId> = vocab.content_ids().collect();
    let count = guard(content.len(), l_max)?;
    let mut out = Vec::with_capacity(count);
    let mut stack = vec![Vec::<TokenId>::new()];
    while let Some(seq) = stack.pop() {
        if seq.len() < l_max {
            for &t in content.iter().rev() {
                let mut next = seq.clone();
                next.push(t);
                stack.push(next);
            }
        }
        out.push(Sequence::new(seq));
    }
    Ok(out)
}

/// A target distribution computed by brute force.
#[derive(Debug, Clone)]
pub struct EnumeratedDistribution {
    pub states: Vec<Sequence>,
    pub log_weights: Vec<f64>,
    pub log_z: f64,
    pub probabilities: Vec<f64>,
    /// `log p_LM(y | x)` at temperature 1.
    pub lm_logprobs: Vec<f64>,
    pub rewards: Vec<f64>,
}

impl EnumeratedDistribution {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn to_map(&self) -> BTreeMap<Sequence, f64> {
        self.states
            .iter()
            .cloned()
            .zip(self.probabilities.iter().copied())
            .collect()
    }

    /// Writes `sequence,logprob_lm,reward,target_probability` rows.
    pub fn write_csv<W: Write>(&self, out: W, vocab: &Vocab) -> Result<(), OracleError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sequence", "logprob_lm", "reward", "target_probability"])?;
        for k in 0..self.states.len() {
            w.write_record([
                vocab.render(&self.states[k]),
                self.lm_logprobs[k].to_string(),
                self.rewards[k].to_string(),
                self.probabilities[k].to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

fn check_length(lm: &dyn LanguageModel, l_max: usize) -> Result<(), OracleError> {
    if l_max != lm.max_len() {
        return Err(OracleError::LengthMismatch {
            l_max,
            model_max: lm.max_len(),
        });
    }
    Ok(())
}

/// Normalized target over all sequences up to `l_max`, which must equal the
/// model's maximum length so that the support is exhausted.
pub fn exact_target(
    lm: &dyn LanguageModel,
    prompt: &Prompt,
    target: &GibbsTarget,
    l_max: usize,
) -> Result<EnumeratedDistribution, OracleError> {
    check_length(lm, l_max)?;
    let states = enumerate_sequences(lm.vocab(), l_max)?;
    let scored = states
        .par_iter()
        .map(|y| -> Result<(f64, f64), OracleError> {
            let lp = crate::lm::sequence_logprob(lm, y, prompt, 1.0)?;
            let r = target.reward.score(prompt, y)?;
            Ok((lp, r))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (lm_logprobs, rewards): (Vec<f64>, Vec<f64>) = scored.into_iter().unzip();
    let log_weights: Vec<f64> = lm_logprobs
        .iter()
        .zip(&rewards)
        .map(|(&lp, &r)| match target.variant {
            TargetVariant::Plain => r / target.beta,
            TargetVariant::KlRegularized => lp + r / target.beta,
        })
        .collect();
    let log_z = log_sum_exp(&log_weights);
    let probabilities = log_weights.iter().map(|w| (w - log_z).exp()).collect();
    Ok(EnumeratedDistribution {
        states,
        log_weights,
        log_z,
        probabilities,
        lm_logprobs,
        rewards,
    })
}

/// Outcome of [`detailed_balance_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceReport {
    pub max_violation: f64,
    /// States `(a, b)` and index of the largest violation.
    pub worst: Option<(Sequence, Sequence, usize)>,
    pub transitions_checked: usize,
    pub tolerance: f64,
}

impl BalanceReport {
    pub fn passed(&self) -> bool {
        self.max_violation < self.tolerance
    }
}

/// One transition component `a → b` through index `i`, with the densities of
/// both directions.
struct Transition {
    to: usize,
    index: usize,
    forward: f64,
    backward: f64,
}

/// Enumerated kernel of one proposal under an acceptance rule.
struct Kernel<'a> {
    lm: &'a dyn LanguageModel,
    prompt: &'a Prompt,
    target: &'a GibbsTarget,
    spec: &'a ProposalSpec,
    dist: EnumeratedDistribution,
    position: HashMap<Sequence, usize>,
    /// Cumulative per-token log-probabilities at the proposal temperature,
    /// `cum[k]` covering the first `k` tokens; the last entry includes EOS.
    cum: Vec<Vec<f64>>,
    content: Vec<TokenId>,
    l_max: usize,
}

impl<'a> Kernel<'a> {
    fn new(
        lm: &'a dyn LanguageModel,
        prompt: &'a Prompt,
        target: &'a GibbsTarget,
        spec: &'a ProposalSpec,
        l_max: usize,
    ) -> Result<Self, OracleError> {
        spec.validate()?;
        let dist = exact_target(lm, prompt, target, l_max)?;
        let cum = dist
            .states
            .par_iter()
            .map(|y| -> Result<Vec<f64>, OracleError> {
                let lps = lm.continuation_logprobs(prompt, &[], y, spec.temperature)?;
                let mut acc = vec![0.0];
                for lp in lps {
                    acc.push(acc.last().unwrap() + lp);
                }
                Ok(acc)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let position = dist
            .states
            .iter()
            .enumerate()
            .map(|(k, s)| (s.clone(), k))
            .collect();
        Ok(Self {
            lm,
            prompt,
            target,
            spec,
            dist,
            position,
            cum,
            content: lm.vocab().content_ids().collect(),
            l_max,
        })
    }

    fn total(&self, k: usize) -> f64 {
        *self.cum[k].last().unwrap()
    }

    fn subtree_size(&self, prefix_len: usize) -> usize {
        state_count(self.content.len(), self.l_max - prefix_len).unwrap() as usize
    }

    /// Off-diagonal transitions out of state `a`, each paired with the
    /// reverse proposal density.
    fn transitions(&self, a: usize) -> Result<Vec<Transition>, OracleError> {
        let state = &self.dist.states[a];
        let n = state.len();
        let q = &self.spec.index;
        let mut out = Vec::new();
        match self.spec.kind {
            ProposalKind::SuffixResample => {
                for i in 1..=n.max(1) {
                    let qa = q.prob(i, n);
                    if qa == 0.0 {
                        continue;
                    }
                    // states sharing `state[..i-1]` form one contiguous block
                    let start = self.position[&Sequence::from(&state[..i - 1])];
                    let end = start + self.subtree_size(i - 1);
                    for b in start..end {
                        if b == a {
                            continue;
                        }
                        let nb = self.dist.states[b].len();
                        let forward = qa.ln() + self.total(b) - self.cum[b][i - 1];
                        let backward = q.log_prob(i, nb) + self.total(a) - self.cum[a][i - 1];
                        out.push(Transition {
                            to: b,
                            index: i,
                            forward,
                            backward,
                        });
                    }
                }
            }
            ProposalKind::TokenUniform => {
                let lp = -((n * self.content.len()) as f64).ln();
                for i in 1..=n {
                    for &v in &self.content {
                        if state[i - 1] == v {
                            continue;
                        }
                        let mut t = state.to_vec();
                        t[i - 1] = v;
                        out.push(Transition {
                            to: self.position[&Sequence::new(t)],
                            index: i,
                            forward: lp,
                            backward: lp,
                        });
                    }
                }
            }
            ProposalKind::TokenFullConditional => {
                for i in 1..=n {
                    let qi = q.prob(i, n);
                    if qi == 0.0 {
                        continue;
                    }
                    let (cands, probs) = full_conditional_table(
                        self.lm,
                        self.target,
                        state,
                        self.prompt,
                        i,
                        self.spec.top_k,
                    )?;
                    for (v, p) in cands.iter().zip(&probs) {
                        if state[i - 1] == *v {
                            continue;
                        }
                        let mut t = state.to_vec();
                        t[i - 1] = *v;
                        let b = Sequence::new(t);
                        let (back_cands, back_probs) = full_conditional_table(
                            self.lm,
                            self.target,
                            &b,
                            self.prompt,
                            i,
                            self.spec.top_k,
                        )?;
                        let backward = match back_cands.iter().position(|&x| x == state[i - 1]) {
                            Some(j) => qi.ln() + back_probs[j].ln(),
                            None => f64::NEG_INFINITY,
                        };
                        out.push(Transition {
                            to: self.position[&b],
                            index: i,
                            forward: qi.ln() + p.ln(),
                            backward,
                        });
                    }
                }
            }
        }
        Ok(out)
    }

    /// Acceptance probabilities of `a → b` and `b → a` for one component.
    fn alphas<F>(&self, a: usize, t: &Transition, accept: &F) -> (f64, f64)
    where
        F: Fn(&MoveTerms) -> f64,
    {
        let (sa, sb) = (&self.dist.states[a], &self.dist.states[t.to]);
        let (ra, rb) = (self.dist.rewards[a], self.dist.rewards[t.to]);
        // the suffix kernel's densities exclude the index probability
        let (fwd, bwd) = match self.spec.kind {
            ProposalKind::SuffixResample => (
                t.forward - self.spec.index.log_prob(t.index, sa.len()),
                t.backward - self.spec.index.log_prob(t.index, sb.len()),
            ),
            _ => (t.forward, t.backward),
        };
        // an undrawable reverse index gives -inf - -inf
        let reverse_seen = |lp: f64| if lp.is_nan() { f64::NEG_INFINITY } else { lp };
        let ab = MoveTerms {
            index: t.index,
            current_len: sa.len(),
            candidate_len: sb.len(),
            current_reward: ra,
            candidate_reward: rb,
            forward_logprob: fwd,
            reverse_logprob: reverse_seen(bwd),
        };
        let ba = MoveTerms {
            index: t.index,
            current_len: sb.len(),
            candidate_len: sa.len(),
            current_reward: rb,
            candidate_reward: ra,
            forward_logprob: reverse_seen(bwd),
            reverse_logprob: fwd,
        };
        (accept(&ab), accept(&ba))
    }
}

/// Checks `π(a) P_i(a→b) = π(b) P_i(b→a)` for every index component and every
/// pair of states the proposal connects. `accept` is the acceptance rule
/// under test, normally [`crate::engine::acceptance`].
pub fn detailed_balance_check<F>(
    lm: &dyn LanguageModel,
    prompt: &Prompt,
    target: &GibbsTarget,
    spec: &ProposalSpec,
    l_max: usize,
    tolerance: f64,
    accept: F,
) -> Result<BalanceReport, OracleError>
where
    F: Fn(&MoveTerms) -> f64,
{
    let kernel = Kernel::new(lm, prompt, target, spec, l_max)?;
    let pi = &kernel.dist.probabilities;
    let mut report = BalanceReport {
        max_violation: 0.0,
        worst: None,
        transitions_checked: 0,
        tolerance,
    };
    for a in 0..kernel.dist.len() {
        for t in kernel.transitions(a)? {
            let (alpha_ab, alpha_ba) = kernel.alphas(a, &t, &accept);
            let flow_ab = pi[a] * t.forward.exp() * alpha_ab;
            let flow_ba = pi[t.to] * t.backward.exp() * alpha_ba;
            let v = (flow_ab - flow_ba).abs();
            report.transitions_checked += 1;
            if v > report.max_violation {
                report.max_violation = v;
                report.worst = Some((
                    kernel.dist.states[a].clone(),
                    kernel.dist.states[t.to].clone(),
                    t.index,
                ));
            }
        }
    }
    Ok(report)
}

/// `max_y |Σ_{y'} π(y') P(y' → y) − π(y)|` for the full kernel, rejection
/// mass included.
pub fn stationarity_residual<F>(
    lm: &dyn LanguageModel,
    prompt: &Prompt,
    target: &GibbsTarget,
    spec: &ProposalSpec,
    l_max: usize,
    accept: F,
) -> Result<f64, OracleError>
where
    F: Fn(&MoveTerms) -> f64,
{
    let kernel = Kernel::new(lm, prompt, target, spec, l_max)?;
    let pi = &kernel.dist.probabilities;
    let mut inflow = vec![0.0; pi.len()];
    for a in 0..pi.len() {
        let mut leave = 0.0;
        for t in kernel.transitions(a)? {
            let (alpha, _) = kernel.alphas(a, &t, &accept);
            let p = t.forward.exp() * alpha;
            inflow[t.to] += pi[a] * p;
            leave += p;
        }
        inflow[a] += pi[a] * (1.0 - leave);
    }
    Ok(inflow
        .iter()
        .zip(pi)
        .map(|(f, p)| (f - p).abs())
        .fold(0.0, f64::max))
}

/// Unique samples (first-occurrence order) and their resampling
/// probabilities `∝ π̃(y)`.
pub fn truncated_gibbs_weights(
    samples: &[Hypothesis],
    target: &GibbsTarget,
    lm: &dyn LanguageModel,
    prompt: &Prompt,
) -> Result<(Vec<Hypothesis>, Vec<f64>), OracleError> {
    if samples.is_empty() {
        return Err(OracleError::EmptySamples);
    }
    let mut seen = HashMap::new();
    let mut unique = Vec::new();
    for h in samples {
        if !seen.contains_key(&h.sequence) {
            seen.insert(h.sequence.clone(), unique.len());
            unique.push(h.clone());
        }
    }
    let log_w = unique
        .iter()
        .map(|h| target.log_density(lm, prompt, &h.sequence))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((unique, softmax(&log_w)))
}

/// Resamples `count` hypotheses with replacement from the unique elements
/// of `samples`, weighted by the unnormalized target.
pub fn truncated_gibbs_resample(
    samples: &[Hypothesis],
    target: &GibbsTarget,
    lm: &dyn LanguageModel,
    prompt: &Prompt,
    rng: &mut dyn RngCore,
    count: usize,
) -> Result<Vec<Hypothesis>, OracleError> {
    let (unique, probs) = truncated_gibbs_weights(samples, target, lm, prompt)?;
    Ok((0..count)
        .map(|_| unique[sample_categorical(&probs, rng)].clone())
        .collect())
}

/// Relative frequencies of each distinct sequence.
pub fn empirical_distribution<'s, I>(samples: I) -> BTreeMap<Sequence, f64>
where
    I: IntoIterator<Item = &'s Sequence>,
{
    let mut counts: BTreeMap<Sequence, f64> = BTreeMap::new();
    let mut total = 0.0;
    for s in samples {
        *counts.entry(s.clone()).or_default() += 1.0;
        total += 1.0;
    }
    for v in counts.values_mut() {
        *v /= total;
    }
    counts
}

/// `½ Σ |p(s) − q(s)|`, states missing from one side counting as zero.
pub fn tv_distance(p: &BTreeMap<Sequence, f64>, q: &BTreeMap<Sequence, f64>) -> f64 {
    let mut sum = 0.0;
    for (s, a) in p {
        sum += (a - q.get(s).copied().unwrap_or(0.0)).abs();
    }
    for (s, b) in q {
        if !p.contains_key(s) {
            sum += b.abs();
        }
    }
    (0.5 * sum).clamp(0.0, 1.0)
}
