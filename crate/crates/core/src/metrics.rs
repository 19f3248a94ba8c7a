//! Evaluation quantities over hypothesis sets and chain traces.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{ChainTrace, Hypothesis};
use crate::lm::LanguageModel;
use crate::proposal::{
    propose_suffix, propose_token_full_conditional, propose_token_uniform, ProposalError,
    ProposalKind, ProposalSpec,
};
use crate::reward::{Reward, RewardError};
use crate::target::GibbsTarget;
use crate::tokens::{Prompt, Sequence, TokenId};

const MAX_BLEU_ORDER: usize = 4;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("hypothesis set {0} is empty")]
    EmptySet(usize),
    #[error("hypothesis set {0} has fewer than two hypotheses")]
    SingletonSet(usize),
    #[error("BLEU is undefined for an empty sequence")]
    EmptySequence,
    #[error("traces have different lengths: {expected} and {found}")]
    MismatchedSteps { expected: usize, found: usize },
    #[error("number of buckets must be at least 1")]
    NoBuckets,
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Proposal(#[from] ProposalError),
    #[error("csv export failed: {0}")]
    Csv(#[from] csv::Error),
}

/// The hypotheses `Ȳ` produced for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisSet {
    pub prompt: Prompt,
    pub hypotheses: Vec<Sequence>,
    pub reference: Option<Sequence>,
}

impl HypothesisSet {
    pub fn new(prompt: Prompt, hypotheses: Vec<Sequence>) -> Self {
        Self {
            prompt,
            hypotheses,
            reference: None,
        }
    }
}

/// Mean over examples of the mean score over each set.
pub fn mean_quality(dataset: &[HypothesisSet], scorer: &dyn Reward) -> Result<f64, MetricsError> {
    if dataset.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let per_set = dataset
        .iter()
        .enumerate()
        .map(|(k, set)| {
            if set.hypotheses.is_empty() {
                return Err(MetricsError::EmptySet(k));
            }
            let mut sum = 0.0;
            for y in &set.hypotheses {
                sum += scorer.score(&set.prompt, y)?;
            }
            Ok(sum / set.hypotheses.len() as f64)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(per_set.iter().sum::<f64>() / per_set.len() as f64)
}

fn ngram_counts(y: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut counts = HashMap::new();
    for w in y.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Sentence BLEU of `hyp` against one reference.
///
/// Uses orders `1..=min(4, |hyp|, |ref|)`, clipped n-gram precisions, and a
/// brevity penalty `exp(1 - |ref|/|hyp|)` for short hypotheses. A zero
/// precision is replaced by `1 / (2^k · total_n)`, where `k` counts the zero
/// precisions seen so far from order 1 upward and `total_n` is the number of
/// hypothesis n-grams.
pub fn sentence_bleu(hyp: &[TokenId], reference: &[TokenId]) -> Result<f64, MetricsError> {
    if hyp.is_empty() || reference.is_empty() {
        return Err(MetricsError::EmptySequence);
    }
    let orders = MAX_BLEU_ORDER.min(hyp.len()).min(reference.len());
    let mut log_sum = 0.0;
    let mut zero_factor = 1.0;
    for n in 1..=orders {
        let ref_counts = ngram_counts(reference, n);
        let matches: usize = ngram_counts(hyp, n)
            .iter()
            .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
            .sum();
        let total = (hyp.len() + 1 - n) as f64;
        let precision = if matches == 0 {
            zero_factor *= 2.0;
            1.0 / (zero_factor * total)
        } else {
            matches as f64 / total
        };
        log_sum += precision.ln();
    }
    let bp = if hyp.len() < reference.len() {
        (1.0 - reference.len() as f64 / hyp.len() as f64).exp()
    } else {
        1.0
    };
    Ok((bp * (log_sum / orders as f64).exp()).clamp(0.0, 1.0))
}

// Empty sequences only match each other.
fn pair_bleu(a: &[TokenId], b: &[TokenId]) -> f64 {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => sentence_bleu(a, b).unwrap_or(0.0),
    }
}

/// Mean BLEU over ordered pairs of distinct positions in one set.
pub fn set_pairwise_bleu(hypotheses: &[Sequence]) -> f64 {
    let m = hypotheses.len();
    let mut sum = 0.0;
    for j in 0..m {
        for k in 0..m {
            if j != k {
                sum += pair_bleu(&hypotheses[j], &hypotheses[k]);
            }
        }
    }
    sum / (m * (m - 1)) as f64
}

/// One minus the macro average of [`set_pairwise_bleu`].
pub fn pairwise_bleu_diversity(dataset: &[HypothesisSet]) -> Result<f64, MetricsError> {
    if dataset.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    if let Some(k) = dataset.iter().position(|s| s.hypotheses.len() < 2) {
        return Err(MetricsError::SingletonSet(k));
    }
    let per_set: Vec<f64> = dataset
        .par_iter()
        .map(|s| set_pairwise_bleu(&s.hypotheses))
        .collect();
    let mean = per_set.iter().sum::<f64>() / per_set.len() as f64;
    Ok((1.0 - mean).clamp(0.0, 1.0))
}

/// Fraction of the distinct sequences in `a` that also occur in `b`.
pub fn set_overlap(a: &[Sequence], b: &[Sequence]) -> f64 {
    let a: HashSet<&Sequence> = a.iter().collect();
    if a.is_empty() {
        return 0.0;
    }
    let b: HashSet<&Sequence> = b.iter().collect();
    a.iter().filter(|s| b.contains(*s)).count() as f64 / a.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub mean: f64,
    pub std: f64,
}

/// Cross-chain mean and population standard deviation of the canonical
/// reward at every step, step 0 being the initial sample.
pub fn reward_trajectory(traces: &[ChainTrace]) -> Result<Vec<TrajectoryPoint>, MetricsError> {
    let first = traces.first().ok_or(MetricsError::EmptyDataset)?;
    let steps = first.steps.len();
    if let Some(t) = traces.iter().find(|t| t.steps.len() != steps) {
        return Err(MetricsError::MismatchedSteps {
            expected: steps,
            found: t.steps.len(),
        });
    }
    let paths: Vec<Vec<f64>> = traces.iter().map(ChainTrace::rewards).collect();
    Ok((0..=steps)
        .map(|t| {
            let column: Vec<f64> = paths.iter().map(|p| p[t]).collect();
            TrajectoryPoint {
                step: t,
                mean: crate::math::mean(&column),
                std: crate::math::std_dev(&column),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceStats {
    pub acceptance_rate: f64,
    pub accepted_count: usize,
    pub unique_accepted: usize,
    /// Multiplicity → number of distinct accepted sequences with it.
    pub repeats_histogram: BTreeMap<usize, usize>,
}

pub fn acceptance_stats(trace: &ChainTrace) -> AcceptanceStats {
    let mut mult: HashMap<&Sequence, usize> = HashMap::new();
    for s in trace.steps.iter().filter(|s| s.accepted) {
        *mult.entry(&s.state).or_insert(0) += 1;
    }
    let mut repeats_histogram = BTreeMap::new();
    for &m in mult.values() {
        *repeats_histogram.entry(m).or_insert(0) += 1;
    }
    AcceptanceStats {
        acceptance_rate: trace.acceptance_rate(),
        accepted_count: trace.accepted_count(),
        unique_accepted: mult.len(),
        repeats_histogram,
    }
}

/// Histogram of `i / n` over accepted steps, where `n` is the length of the
/// state the index was drawn for. Bucket `b` covers `(b/B, (b+1)/B]`.
pub fn accepted_index_histogram(
    traces: &[ChainTrace],
    n_buckets: usize,
) -> Result<Vec<usize>, MetricsError> {
    if n_buckets == 0 {
        return Err(MetricsError::NoBuckets);
    }
    let mut hist = vec![0; n_buckets];
    for trace in traces {
        let mut prev_len = trace.initial.state.len();
        for s in &trace.steps {
            if s.accepted {
                let n = prev_len.max(1);
                let b = (s.index * n_buckets).div_ceil(n).clamp(1, n_buckets) - 1;
                hist[b] += 1;
            }
            prev_len = s.state.len();
        }
    }
    Ok(hist)
}

/// Tokens sampled by a chain, initial draw included.
pub fn token_cost(trace: &ChainTrace) -> usize {
    trace.token_cost()
}

/// Counts of `values` in `n_bins` equal bins over `[lo, hi]`; values outside
/// the range land in the end bins.
pub fn fixed_histogram(values: &[f64], n_bins: usize, lo: f64, hi: f64) -> Result<Vec<usize>, MetricsError> {
    if n_bins == 0 {
        return Err(MetricsError::NoBuckets);
    }
    let mut hist = vec![0; n_bins];
    let width = (hi - lo) / n_bins as f64;
    for &v in values {
        let b = if width > 0.0 { ((v - lo) / width).floor() } else { 0.0 };
        hist[(b.max(0.0) as usize).min(n_bins - 1)] += 1;
    }
    Ok(hist)
}

/// `r(y') - r(y)` for `count` independent proposals from a fixed state.
pub fn proposal_reward_deltas(
    lm: &dyn LanguageModel,
    prompt: &Prompt,
    target: &GibbsTarget,
    spec: &ProposalSpec,
    state: &Hypothesis,
    count: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>, MetricsError> {
    let base = target.reward.score(prompt, &state.sequence)?;
    let mut cache: HashMap<Sequence, f64> = HashMap::new();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let outcome = match spec.kind {
            ProposalKind::SuffixResample => propose_suffix(lm, state, prompt, spec, rng)?,
            ProposalKind::TokenUniform => propose_token_uniform(&state.sequence, lm.vocab(), rng)?,
            ProposalKind::TokenFullConditional => {
                propose_token_full_conditional(lm, target, &state.sequence, prompt, spec, rng)?
            }
        };
        let r = match cache.get(&outcome.candidate) {
            Some(&r) => r,
            None => {
                let r = target.reward.score(prompt, &outcome.candidate)?;
                cache.insert(outcome.candidate, r);
                r
            }
        };
        out.push(r - base);
    }
    Ok(out)
}

/// Summary of a set of chains for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mean_quality: f64,
    pub mean_diversity: Option<f64>,
    pub acceptance_rate: f64,
    pub unique_accepted: usize,
    pub reward_trajectory: Vec<TrajectoryPoint>,
    pub index_histogram: Vec<usize>,
    pub repeats_histogram: BTreeMap<usize, usize>,
    pub token_cost: usize,
}

/// The per-chain output sets: the initial state and accepted states after
/// burn-in.
pub fn accepted_sets(traces: &[ChainTrace], burn_in: usize, prompt: &Prompt) -> Vec<HypothesisSet> {
    traces
        .iter()
        .map(|t| {
            HypothesisSet::new(
                prompt.clone(),
                t.accepted_samples(burn_in).into_iter().cloned().collect(),
            )
        })
        .collect()
}

impl RunReport {
    /// Quality is the recorded reward averaged over each chain's accepted
    /// set; diversity is reported when every set has two or more members.
    pub fn from_traces(
        traces: &[ChainTrace],
        burn_in: usize,
        prompt: &Prompt,
        n_buckets: usize,
    ) -> Result<Self, MetricsError> {
        let reward_trajectory = reward_trajectory(traces)?;
        let mut quality = Vec::with_capacity(traces.len());
        for t in traces {
            let rewards: Vec<f64> = std::iter::once(t.initial.reward)
                .chain(t.steps.iter().filter(|s| s.accepted).map(|s| s.reward))
                .skip(burn_in)
                .collect();
            if !rewards.is_empty() {
                quality.push(crate::math::mean(&rewards));
            }
        }
        let sets = accepted_sets(traces, burn_in, prompt);
        let mean_diversity = pairwise_bleu_diversity(&sets).ok();

        let mut repeats_histogram = BTreeMap::new();
        let mut unique_accepted = 0;
        let mut accepted = 0;
        let mut steps = 0;
        for t in traces {
            let stats = acceptance_stats(t);
            unique_accepted += stats.unique_accepted;
            accepted += stats.accepted_count;
            steps += t.steps.len();
            for (m, c) in stats.repeats_histogram {
                *repeats_histogram.entry(m).or_insert(0) += c;
            }
        }
        Ok(Self {
            mean_quality: if quality.is_empty() {
                f64::NAN
            } else {
                crate::math::mean(&quality)
            },
            mean_diversity,
            acceptance_rate: if steps == 0 { 0.0 } else { accepted as f64 / steps as f64 },
            unique_accepted,
            reward_trajectory,
            index_histogram: accepted_index_histogram(traces, n_buckets)?,
            repeats_histogram,
            token_cost: traces.iter().map(ChainTrace::token_cost).sum(),
        })
    }
}

pub fn write_trajectory_csv<W: Write>(out: W, points: &[TrajectoryPoint]) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Two-column CSV with the given header.
pub fn write_counts_csv<W, K, V>(out: W, header: [&str; 2], rows: impl IntoIterator<Item = (K, V)>) -> Result<(), MetricsError>
where
    W: Write,
    K: ToString,
    V: ToString,
{
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for (k, v) in rows {
        w.write_record([k.to_string(), v.to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
