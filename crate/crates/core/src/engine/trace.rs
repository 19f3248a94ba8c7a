use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokens::{Sequence, Vocab, VocabError};

#[derive(Debug, Clone, PartialEq)]
pub struct StateRecord {
    pub state: Sequence,
    pub reward: f64,
    pub lm_logprob: f64,
    pub tokens_generated: usize,
}

/// One MH step. `state` is the chain state after the accept/reject decision.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub index: usize,
    pub candidate: Option<Sequence>,
    pub alpha: f64,
    pub accepted: bool,
    pub state: Sequence,
    pub reward: f64,
    pub lm_logprob: f64,
    pub tokens_generated: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainTrace {
    pub seed: u64,
    pub temperature: f64,
    pub initial: StateRecord,
    pub steps: Vec<StepRecord>,
}

impl ChainTrace {
    /// States `y^t` for `t > burn_in`, rejected steps included as repeats.
    pub fn canonical_samples(&self, burn_in: usize) -> Vec<&Sequence> {
        self.steps.iter().skip(burn_in).map(|s| &s.state).collect()
    }

    /// The initial state followed by every accepted candidate, with the first
    /// `burn_in` entries dropped.
    pub fn accepted_samples(&self, burn_in: usize) -> Vec<&Sequence> {
        std::iter::once(&self.initial.state)
            .chain(self.steps.iter().filter(|s| s.accepted).map(|s| &s.state))
            .skip(burn_in)
            .collect()
    }

    /// Rewards `r(y^0), ..., r(y^T)` along the canonical chain.
    pub fn rewards(&self) -> Vec<f64> {
        std::iter::once(self.initial.reward)
            .chain(self.steps.iter().map(|s| s.reward))
            .collect()
    }

    pub fn accepted_count(&self) -> usize {
        self.steps.iter().filter(|s| s.accepted).count()
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.accepted_count() as f64 / self.steps.len() as f64
    }

    /// Tokens sampled from the LM: the initial draw plus every proposal.
    pub fn token_cost(&self) -> usize {
        self.initial.tokens_generated + self.steps.iter().map(|s| s.tokens_generated).sum::<usize>()
    }

    pub fn final_state(&self) -> &Sequence {
        self.steps.last().map_or(&self.initial.state, |s| &s.state)
    }
}

#[derive(Debug, Error)]
pub enum TraceIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed trace line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("trace line {line}: {source}")]
    Vocab {
        line: usize,
        #[source]
        source: VocabError,
    },
    #[error("trace is missing its header line")]
    MissingHeader,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub seed: u64,
    pub temperature: f64,
    pub vocab: Vec<String>,
    pub eos_id: usize,
    #[serde(default)]
    pub config: serde_json::Value,
    pub initial: JsonState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonState {
    pub state_tokens: Vec<String>,
    pub reward: f64,
    pub lm_logprob: f64,
    pub tokens_generated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct JsonStep {
    step: usize,
    index: usize,
    candidate_tokens: Option<Vec<String>>,
    alpha: f64,
    accepted: bool,
    state_tokens: Vec<String>,
    reward: f64,
    lm_logprob: f64,
    tokens_generated: usize,
}

fn decode_symbols(vocab: &Vocab, symbols: &[String], line: usize) -> Result<Sequence, TraceIoError> {
    symbols
        .iter()
        .map(|s| {
            vocab
                .id(s)
                .filter(|&id| vocab.is_content(id))
                .ok_or_else(|| VocabError::UnknownSymbol(s.clone()))
        })
        .collect::<Result<Vec<_>, _>>()
        .map(Sequence::new)
        .map_err(|source| TraceIoError::Vocab { line, source })
}

/// Writes a header line followed by one JSON object per step.
pub fn write_trace_jsonl<W: Write>(
    out: &mut W,
    trace: &ChainTrace,
    vocab: &Vocab,
    config: serde_json::Value,
) -> Result<(), TraceIoError> {
    let header = TraceHeader {
        seed: trace.seed,
        temperature: trace.temperature,
        vocab: vocab.symbols().to_vec(),
        eos_id: vocab.eos() as usize,
        config,
        initial: JsonState {
            state_tokens: vocab.decode(&trace.initial.state),
            reward: trace.initial.reward,
            lm_logprob: trace.initial.lm_logprob,
            tokens_generated: trace.initial.tokens_generated,
        },
    };
    let json = |line: usize, e| TraceIoError::Json { line, source: e };
    serde_json::to_writer(&mut *out, &header).map_err(|e| json(1, e))?;
    out.write_all(b"\n")?;
    for (k, s) in trace.steps.iter().enumerate() {
        let step = JsonStep {
            step: s.step,
            index: s.index,
            candidate_tokens: s.candidate.as_ref().map(|c| vocab.decode(c)),
            alpha: s.alpha,
            accepted: s.accepted,
            state_tokens: vocab.decode(&s.state),
            reward: s.reward,
            lm_logprob: s.lm_logprob,
            tokens_generated: s.tokens_generated,
        };
        serde_json::to_writer(&mut *out, &step).map_err(|e| json(k + 2, e))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a trace written by [`write_trace_jsonl`].
pub fn read_trace_jsonl<R: BufRead>(input: R) -> Result<(TraceHeader, Vocab, ChainTrace), TraceIoError> {
    let mut lines = input.lines().enumerate().filter(|(_, l)| match l {
        Ok(l) => !l.trim().is_empty(),
        Err(_) => true,
    });
    let (_, first) = lines.next().ok_or(TraceIoError::MissingHeader)?;
    let header: TraceHeader =
        serde_json::from_str(&first?).map_err(|source| TraceIoError::Json { line: 1, source })?;
    let vocab = Vocab::new(header.vocab.clone(), header.eos_id)
        .map_err(|source| TraceIoError::Vocab { line: 1, source })?;
    let initial = StateRecord {
        state: decode_symbols(&vocab, &header.initial.state_tokens, 1)?,
        reward: header.initial.reward,
        lm_logprob: header.initial.lm_logprob,
        tokens_generated: header.initial.tokens_generated,
    };
    let mut steps = Vec::new();
    for (k, line) in lines {
        let line_no = k + 1;
        let s: JsonStep = serde_json::from_str(&line?)
            .map_err(|source| TraceIoError::Json { line: line_no, source })?;
        steps.push(StepRecord {
            step: s.step,
            index: s.index,
            candidate: s
                .candidate_tokens
                .as_deref()
                .map(|c| decode_symbols(&vocab, c, line_no))
                .transpose()?,
            alpha: s.alpha,
            accepted: s.accepted,
            state: decode_symbols(&vocab, &s.state_tokens, line_no)?,
            reward: s.reward,
            lm_logprob: s.lm_logprob,
            tokens_generated: s.tokens_generated,
        });
    }
    let trace = ChainTrace {
        seed: header.seed,
        temperature: header.temperature,
        initial,
        steps,
    };
    Ok((header, vocab, trace))
}
