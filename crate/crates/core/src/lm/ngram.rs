use std::collections::{BTreeSet, HashMap};

use super::{BackendKind, LanguageModel, LmError};
use crate::tokens::{Prompt, Sequence, TokenId, Vocab};

// Sentence-start padding; never a valid vocabulary id.
const BOS: TokenId = TokenId::MAX;

/// Additively smoothed n-gram model.
///
/// `P(w | h) = (c(h, w) + k) / (c(h) + k |V|)` where `h` is the previous
/// `order - 1` tokens (prompt tokens first, then the prefix, padded with a
/// start symbol) and `|V|` counts EOS.
#[derive(Debug, Clone)]
pub struct NgramLm {
    vocab: Vocab,
    order: usize,
    smoothing: f64,
    max_len: usize,
    counts: HashMap<Vec<TokenId>, (Vec<f64>, f64)>,
}

/// Fits an n-gram model on tokenized sequences over `vocab`.
pub fn fit_ngram(
    corpus: &[Sequence],
    vocab: Vocab,
    order: usize,
    smoothing: f64,
    max_len: usize,
) -> Result<NgramLm, LmError> {
    if order == 0 {
        return Err(LmError::InvalidModel("n-gram order must be at least 1".into()));
    }
    if !(smoothing > 0.0 && smoothing.is_finite()) {
        return Err(LmError::InvalidModel(format!(
            "smoothing must be positive, got {smoothing}"
        )));
    }
    if corpus.is_empty() {
        return Err(LmError::EmptyCorpus);
    }
    let size = vocab.len();
    let eos = vocab.eos();
    let mut counts: HashMap<Vec<TokenId>, (Vec<f64>, f64)> = HashMap::new();
    for seq in corpus {
        vocab.check(seq)?;
        let mut padded = vec![BOS; order - 1];
        padded.extend_from_slice(seq);
        padded.push(eos);
        for w in padded.windows(order) {
            let (ctx, next) = w.split_at(order - 1);
            let entry = counts
                .entry(ctx.to_vec())
                .or_insert_with(|| (vec![0.0; size], 0.0));
            entry.0[next[0] as usize] += 1.0;
            entry.1 += 1.0;
        }
    }
    Ok(NgramLm {
        vocab,
        order,
        smoothing,
        max_len,
        counts,
    })
}

impl NgramLm {
    /// Fits on newline-delimited, whitespace-tokenized text. The vocabulary is
    /// the sorted set of observed words plus EOS.
    pub fn from_text(
        text: &str,
        order: usize,
        smoothing: f64,
        max_len: usize,
    ) -> Result<Self, LmError> {
        let words: BTreeSet<&str> = text.split_whitespace().collect();
        if words.is_empty() {
            return Err(LmError::EmptyCorpus);
        }
        let vocab = Vocab::from_content(words)?;
        let corpus = text
            .lines()
            .map(|l| vocab.encode(l))
            .collect::<Result<Vec<_>, _>>()?;
        fit_ngram(&corpus, vocab, order, smoothing, max_len)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    fn context(&self, prompt: &Prompt, prefix: &[TokenId]) -> Result<Vec<TokenId>, LmError> {
        let k = self.order - 1;
        let prompt_tokens = match prompt {
            Prompt::Tokens(s) => {
                self.vocab.check(s)?;
                s.clone()
            }
            Prompt::Text(t) => self.vocab.encode(t)?,
        };
        let mut history = vec![BOS; k];
        history.extend_from_slice(&prompt_tokens);
        history.extend_from_slice(prefix);
        Ok(history[history.len() - k..].to_vec())
    }
}

impl LanguageModel for NgramLm {
    fn kind(&self) -> BackendKind {
        BackendKind::Ngram
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn base_distribution(&self, prompt: &Prompt, prefix: &[TokenId]) -> Result<Vec<f64>, LmError> {
        self.vocab.check(prefix)?;
        let size = self.vocab.len() as f64;
        let ctx = self.context(prompt, prefix)?;
        let k = self.smoothing;
        Ok(match self.counts.get(&ctx) {
            Some((c, total)) => c.iter().map(|&n| (n + k) / (total + k * size)).collect(),
            None => vec![1.0 / size; self.vocab.len()],
        })
    }
}
