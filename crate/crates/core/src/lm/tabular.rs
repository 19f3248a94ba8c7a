use rand::RngCore;
use rand_distr::{Distribution, Gamma};

use super::{validate_row, BackendKind, LanguageModel, LmError};
use crate::tokens::{Prompt, TokenId, Vocab};

/// Upper bound on the number of rows a [`TabularLm`] may hold.
pub const MAX_TABLE_ROWS: usize = 10_000_000;

/// A language model with an explicit next-token distribution for every
/// prefix of length below `max_len`. Ignores the prompt.
#[derive(Debug, Clone)]
pub struct TabularLm {
    vocab: Vocab,
    max_len: usize,
    rows: Vec<Vec<f64>>,
    // offsets[l] = index of the first row for prefixes of length l
    offsets: Vec<usize>,
    // content rank of each token id, None for EOS
    rank: Vec<Option<usize>>,
}

impl TabularLm {
    /// Builds the table by calling `row` once per prefix, shortest first and
    /// lexicographically within a length.
    pub fn from_fn<F>(vocab: Vocab, max_len: usize, mut row: F) -> Result<Self, LmError>
    where
        F: FnMut(&[TokenId]) -> Vec<f64>,
    {
        let base = vocab.content_len();
        let mut offsets = Vec::with_capacity(max_len + 1);
        let mut total = 0usize;
        let mut width = 1usize;
        for _ in 0..max_len {
            offsets.push(total);
            total = total
                .checked_add(width)
                .filter(|&t| t <= MAX_TABLE_ROWS)
                .ok_or_else(|| {
                    LmError::InvalidModel(format!(
                        "table for {base} content tokens and max_len {max_len} exceeds {MAX_TABLE_ROWS} rows"
                    ))
                })?;
            width = width.saturating_mul(base);
        }
        offsets.push(total);

        let content: Vec<TokenId> = vocab.content_ids().collect();
        let mut rank = vec![None; vocab.len()];
        for (r, &t) in content.iter().enumerate() {
            rank[t as usize] = Some(r);
        }

        let mut rows = Vec::with_capacity(total);
        for len in 0..max_len {
            let mut digits = vec![0usize; len];
            loop {
                let prefix: Vec<TokenId> = digits.iter().map(|&d| content[d]).collect();
                rows.push(validate_row(row(&prefix), vocab.len())?);
                if !increment(&mut digits, base) {
                    break;
                }
            }
        }
        Ok(Self {
            vocab,
            max_len,
            rows,
            offsets,
            rank,
        })
    }

    /// Every row uniform over the full vocabulary.
    pub fn uniform(vocab: Vocab, max_len: usize) -> Result<Self, LmError> {
        let p = 1.0 / vocab.len() as f64;
        let size = vocab.len();
        Self::from_fn(vocab, max_len, |_| vec![p; size])
    }

    /// Rows drawn from a Dirichlet distribution with `concentration` on each
    /// content token and `eos_concentration` on EOS.
    pub fn random(
        vocab: Vocab,
        max_len: usize,
        concentration: f64,
        eos_concentration: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Self, LmError> {
        let bad = |c: f64| !(c > 0.0 && c.is_finite());
        if bad(concentration) || bad(eos_concentration) {
            return Err(LmError::InvalidModel(
                "Dirichlet concentrations must be positive".into(),
            ));
        }
        let content = Gamma::new(concentration, 1.0).expect("validated shape");
        let eos_gamma = Gamma::new(eos_concentration, 1.0).expect("validated shape");
        let eos = vocab.eos() as usize;
        let size = vocab.len();
        Self::from_fn(vocab, max_len, |_| {
            let mut w: Vec<f64> = (0..size)
                .map(|t| {
                    let g = if t == eos { &eos_gamma } else { &content };
                    // keep every entry strictly positive
                    g.sample(rng).max(1e-12)
                })
                .collect();
            let z: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= z);
            w
        })
    }

    /// All mass on a single path; unreachable prefixes emit EOS.
    pub fn deterministic(vocab: Vocab, path: &[TokenId]) -> Result<Self, LmError> {
        vocab.check(path)?;
        let size = vocab.len();
        let eos = vocab.eos() as usize;
        let path = path.to_vec();
        Self::from_fn(vocab, path.len(), |prefix| {
            let mut row = vec![0.0; size];
            let next = if path.starts_with(prefix) {
                path.get(prefix.len()).map(|&t| t as usize).unwrap_or(eos)
            } else {
                eos
            };
            row[next] = 1.0;
            row
        })
    }

    fn row_index(&self, prefix: &[TokenId]) -> Result<usize, LmError> {
        let base = self.vocab.content_len();
        let mut idx = 0usize;
        for &t in prefix {
            let r = self
                .rank
                .get(t as usize)
                .copied()
                .flatten()
                .ok_or(crate::tokens::VocabError::InvalidId(t))?;
            idx = idx * base + r;
        }
        Ok(self.offsets[prefix.len()] + idx)
    }
}

/// Advances a big-endian digit counter; false on wrap.
fn increment(digits: &mut [usize], base: usize) -> bool {
    for d in digits.iter_mut().rev() {
        *d += 1;
        if *d < base {
            return true;
        }
        *d = 0;
    }
    false
}

impl LanguageModel for TabularLm {
    fn kind(&self) -> BackendKind {
        BackendKind::Tabular
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn base_distribution(&self, _prompt: &Prompt, prefix: &[TokenId]) -> Result<Vec<f64>, LmError> {
        if prefix.len() >= self.max_len {
            return Err(LmError::AtMaxLength(prefix.len()));
        }
        Ok(self.rows[self.row_index(prefix)?].clone())
    }
}

/// A model whose next-token distribution depends only on the position.
#[derive(Debug, Clone)]
pub struct PositionalLm {
    vocab: Vocab,
    rows: Vec<Vec<f64>>,
}

impl PositionalLm {
    /// One row per position; `max_len` is the number of rows.
    pub fn new(vocab: Vocab, rows: Vec<Vec<f64>>) -> Result<Self, LmError> {
        let size = vocab.len();
        let rows = rows
            .into_iter()
            .map(|r| validate_row(r, size))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { vocab, rows })
    }

    /// Uniform over the full vocabulary at every position.
    pub fn uniform(vocab: Vocab, max_len: usize) -> Result<Self, LmError> {
        let size = vocab.len();
        Self::new(vocab, vec![vec![1.0 / size as f64; size]; max_len])
    }

    /// Every sequence has exactly `length` tokens, drawn uniformly from the
    /// content vocabulary.
    pub fn fixed_length(vocab: Vocab, length: usize) -> Result<Self, LmError> {
        let size = vocab.len();
        let eos = vocab.eos() as usize;
        let p = 1.0 / vocab.content_len() as f64;
        let row: Vec<f64> = (0..size).map(|t| if t == eos { 0.0 } else { p }).collect();
        Self::new(vocab, vec![row; length])
    }

    /// EOS with probability `eos_prob` at every position, content tokens
    /// uniform otherwise; lengths are geometric, truncated at `max_len`.
    pub fn geometric(vocab: Vocab, max_len: usize, eos_prob: f64) -> Result<Self, LmError> {
        if !(0.0..=1.0).contains(&eos_prob) {
            return Err(LmError::InvalidModel(format!(
                "EOS probability must lie in [0, 1], got {eos_prob}"
            )));
        }
        let size = vocab.len();
        let eos = vocab.eos() as usize;
        let p = (1.0 - eos_prob) / vocab.content_len() as f64;
        let row: Vec<f64> = (0..size).map(|t| if t == eos { eos_prob } else { p }).collect();
        Self::new(vocab, vec![row; max_len])
    }
}

impl LanguageModel for PositionalLm {
    fn kind(&self) -> BackendKind {
        BackendKind::Tabular
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn max_len(&self) -> usize {
        self.rows.len()
    }

    fn base_distribution(&self, _prompt: &Prompt, prefix: &[TokenId]) -> Result<Vec<f64>, LmError> {
        self.vocab.check(prefix)?;
        self.rows
            .get(prefix.len())
            .cloned()
            .ok_or(LmError::AtMaxLength(prefix.len()))
    }
}
