//! Metropolis-Hastings sampling of language model outputs from reward-weighted
//! Gibbs targets, with exact enumeration oracles for small vocabularies.

pub mod engine;
pub mod http;
pub mod hypothesis;
pub mod lm;
pub mod math;
pub mod metrics;
pub mod oracle;
pub mod proposal;
pub mod reward;
pub mod target;
pub mod tokens;

pub use engine::{run_chain, ChainConfig, ChainTrace};
pub use lm::LanguageModel;
pub use tokens::{Prompt, Sequence, TokenId, Vocab};
