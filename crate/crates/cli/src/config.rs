//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LM_ENDPOINT_ENV: &str = "QUEST_LM_ENDPOINT";
pub const SCORER_ENDPOINT_ENV: &str = "QUEST_SCORER_ENDPOINT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub prompt: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub lm: LmConfig,
    pub reward: RewardConfig,
    pub target: TargetConfig,
    #[serde(default)]
    pub proposal: ProposalConfig,
    #[serde(default)]
    pub chain: ChainSection,
    #[serde(default)]
    pub baselines: BaselineConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub compare: CompareConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case", deny_unknown_fields)]
pub enum LmConfig {
    /// Random conditional table over all prefixes.
    TabularRandom {
        vocab: Vec<String>,
        max_len: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "one")]
        concentration: f64,
        #[serde(default = "one")]
        eos_concentration: f64,
    },
    TabularUniform {
        vocab: Vec<String>,
        max_len: usize,
    },
    /// EOS with a fixed probability at every position.
    Geometric {
        vocab: Vec<String>,
        max_len: usize,
        eos_prob: f64,
    },
    /// Every sequence has exactly `length` tokens.
    FixedLength {
        vocab: Vec<String>,
        length: usize,
    },
    Ngram {
        corpus: PathBuf,
        #[serde(default = "two")]
        order: usize,
        #[serde(default = "default_smoothing")]
        smoothing: f64,
        max_len: usize,
    },
    Remote {
        #[serde(default)]
        endpoint: Option<String>,
        vocab: Vec<String>,
        max_len: usize,
        #[serde(default)]
        http: HttpConfig,
    },
}

fn one() -> f64 {
    1.0
}

fn two() -> usize {
    2
}

fn default_smoothing() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpConfig {
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_retries() -> u32 {
    2
}

fn default_backoff_ms() -> u64 {
    200
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            timeout_ms: default_timeout_ms(),
            max_retries: default_retries(),
            backoff_ms: default_backoff_ms(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardConfig {
    LengthGaussian {
        #[serde(default = "default_mu")]
        mu: f64,
        #[serde(default = "default_sigma")]
        sigma: f64,
        #[serde(default = "default_clamp")]
        clamp_eps: f64,
    },
    Constant {
        value: f64,
    },
    RemoteScorer {
        #[serde(default)]
        endpoint: Option<String>,
        /// Logit-clamp bound; omit to use raw scores.
        #[serde(default)]
        clamp_eps: Option<f64>,
        #[serde(default)]
        http: HttpConfig,
    },
}

fn default_mu() -> f64 {
    7.5
}

fn default_sigma() -> f64 {
    3.75
}

fn default_clamp() -> f64 {
    0.01
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Plain,
    KlRegularized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub beta: f64,
    #[serde(default = "default_variant")]
    pub variant: Variant,
}

fn default_variant() -> Variant {
    Variant::Plain
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalKindConfig {
    SuffixResample,
    TokenUniform,
    TokenFullConditional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalConfig {
    #[serde(default = "default_kind")]
    pub kind: ProposalKindConfig,
    /// Unnormalized index weights; empty means uniform.
    #[serde(default)]
    pub index_weights: Vec<f64>,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

fn default_kind() -> ProposalKindConfig {
    ProposalKindConfig::SuffixResample
}

fn default_top_k() -> usize {
    5
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            kind: default_kind(),
            index_weights: Vec::new(),
            top_k: default_top_k(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSection {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub burn_in: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_chains")]
    pub n_chains: usize,
    #[serde(default = "yes")]
    pub record_rejected: bool,
}

fn default_steps() -> usize {
    128
}

fn default_temperature() -> f64 {
    0.8
}

fn default_chains() -> usize {
    4
}

fn yes() -> bool {
    true
}

impl Default for ChainSection {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            burn_in: 0,
            temperature: default_temperature(),
            seed: 0,
            n_chains: default_chains(),
            record_rejected: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    #[serde(default = "default_ancestral")]
    pub ancestral_count: usize,
    #[serde(default = "default_temperatures")]
    pub temperatures: Vec<f64>,
}

fn default_ancestral() -> usize {
    128
}

/// 0.2, 0.3, ..., 1.0
pub fn default_temperatures() -> Vec<f64> {
    (2..=10).map(|k| k as f64 / 10.0).collect()
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            ancestral_count: default_ancestral(),
            temperatures: default_temperatures(),
        }
    }
}

/// Extra chains at each β, summarized in `beta_sweep.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_betas")]
    pub betas: Vec<f64>,
}

pub fn default_betas() -> Vec<f64> {
    vec![0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0]
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            betas: default_betas(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    /// Samples per method in the TV comparison.
    #[serde(default = "default_ancestral")]
    pub samples: usize,
    /// Canonical steps discarded from the convergence chain.
    #[serde(default)]
    pub burn_in: usize,
    /// Ancestral draws fed to the truncated-Gibbs resampler.
    #[serde(default = "default_pool")]
    pub resample_pool: usize,
    /// Length of an extra long chain for a convergence TV; 0 skips it.
    #[serde(default)]
    pub convergence_steps: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_pool() -> usize {
    512
}

fn default_tolerance() -> f64 {
    1e-9
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            samples: default_ancestral(),
            burn_in: 0,
            resample_pool: default_pool(),
            convergence_steps: 0,
            tolerance: default_tolerance(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    /// Proposals per kind for the reward-delta histograms.
    #[serde(default = "default_delta_proposals")]
    pub delta_proposals: usize,
    #[serde(default = "default_buckets")]
    pub index_buckets: usize,
    #[serde(default = "default_buckets")]
    pub histogram_bins: usize,
}

fn default_delta_proposals() -> usize {
    25_000
}

fn default_buckets() -> usize {
    10
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            delta_proposals: default_delta_proposals(),
            index_buckets: default_buckets(),
            histogram_bins: default_buckets(),
        }
    }
}

impl Default for ExperimentConfig {
    /// The toy setup: three content tokens, length-gaussian reward.
    fn default() -> Self {
        Self {
            prompt: String::new(),
            output_dir: default_output_dir(),
            lm: LmConfig::TabularRandom {
                vocab: vec!["a".into(), "b".into(), "c".into()],
                max_len: 5,
                seed: 2024,
                concentration: 10.0,
                eos_concentration: 10.0,
            },
            reward: RewardConfig::LengthGaussian {
                mu: default_mu(),
                sigma: default_sigma(),
                clamp_eps: default_clamp(),
            },
            target: TargetConfig {
                beta: 0.5,
                variant: Variant::Plain,
            },
            proposal: ProposalConfig::default(),
            chain: ChainSection::default(),
            baselines: BaselineConfig::default(),
            sweep: SweepConfig::default(),
            oracle: OracleConfig::default(),
            compare: CompareConfig::default(),
        }
    }
}

fn positive(key: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(key, format!("must be positive, got {v}")))
    }
}

fn at_least_one(key: &str, v: usize) -> Result<(), ConfigError> {
    if v >= 1 {
        Ok(())
    } else {
        Err(invalid(key, "must be at least 1"))
    }
}

fn check_vocab(key: &str, vocab: &[String]) -> Result<(), ConfigError> {
    if vocab.is_empty() {
        return Err(invalid(key, "needs at least one content token"));
    }
    for (k, s) in vocab.iter().enumerate() {
        if s.is_empty() || s.contains(char::is_whitespace) {
            return Err(invalid(key, format!("token {s:?} must be non-empty without whitespace")));
        }
        if vocab[..k].contains(s) {
            return Err(invalid(key, format!("duplicate token {s:?}")));
        }
    }
    Ok(())
}

fn check_endpoint(key: &str, endpoint: Option<&str>, env: &str) -> Result<(), ConfigError> {
    match resolve_endpoint(endpoint, env) {
        Some(url) if url.starts_with("http://") || url.starts_with("https://") => Ok(()),
        Some(url) => Err(invalid(key, format!("{url:?} is not an http(s) URL"))),
        None => Err(invalid(key, format!("no endpoint configured and {env} is unset"))),
    }
}

/// The configured endpoint, falling back to the environment variable.
pub fn resolve_endpoint(endpoint: Option<&str>, env: &str) -> Option<String> {
    endpoint
        .map(str::to_string)
        .or_else(|| std::env::var(env).ok().filter(|s| !s.is_empty()))
}

fn check_http(key: &str, http: &HttpConfig) -> Result<(), ConfigError> {
    if http.timeout_ms == 0 {
        return Err(invalid(&format!("{key}.timeout_ms"), "must be at least 1"));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. Relative corpus paths resolve
    /// against the config's directory and are stored absolute.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: Self = toml::from_str(&text)?;
        if let LmConfig::Ngram { corpus, .. } = &mut cfg.lm {
            if corpus.is_relative() {
                let joined = path.parent().map_or_else(|| corpus.clone(), |dir| dir.join(&*corpus));
                *corpus = std::path::absolute(&joined).unwrap_or(joined);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match &self.lm {
            LmConfig::TabularRandom {
                vocab,
                max_len,
                concentration,
                eos_concentration,
                ..
            } => {
                check_vocab("lm.vocab", vocab)?;
                at_least_one("lm.max_len", *max_len)?;
                positive("lm.concentration", *concentration)?;
                positive("lm.eos_concentration", *eos_concentration)?;
            }
            LmConfig::TabularUniform { vocab, max_len } => {
                check_vocab("lm.vocab", vocab)?;
                at_least_one("lm.max_len", *max_len)?;
            }
            LmConfig::Geometric {
                vocab,
                max_len,
                eos_prob,
            } => {
                check_vocab("lm.vocab", vocab)?;
                at_least_one("lm.max_len", *max_len)?;
                if !(0.0..=1.0).contains(eos_prob) {
                    return Err(invalid("lm.eos_prob", format!("must lie in [0, 1], got {eos_prob}")));
                }
            }
            LmConfig::FixedLength { vocab, length } => {
                check_vocab("lm.vocab", vocab)?;
                at_least_one("lm.length", *length)?;
            }
            LmConfig::Ngram {
                corpus,
                order,
                smoothing,
                max_len,
            } => {
                if !corpus.is_file() {
                    return Err(invalid("lm.corpus", format!("{} does not exist", corpus.display())));
                }
                at_least_one("lm.order", *order)?;
                positive("lm.smoothing", *smoothing)?;
                at_least_one("lm.max_len", *max_len)?;
            }
            LmConfig::Remote {
                endpoint,
                vocab,
                max_len,
                http,
            } => {
                check_endpoint("lm.endpoint", endpoint.as_deref(), LM_ENDPOINT_ENV)?;
                check_vocab("lm.vocab", vocab)?;
                at_least_one("lm.max_len", *max_len)?;
                check_http("lm.http", http)?;
                if self.prompt.is_empty() {
                    return Err(invalid("prompt", "the remote backend needs a non-empty prompt"));
                }
            }
        }
        match &self.reward {
            RewardConfig::LengthGaussian {
                mu,
                sigma,
                clamp_eps,
            } => {
                if !mu.is_finite() {
                    return Err(invalid("reward.mu", "must be finite"));
                }
                positive("reward.sigma", *sigma)?;
                if !(*clamp_eps > 0.0 && *clamp_eps < 0.5) {
                    return Err(invalid("reward.clamp_eps", format!("must lie in (0, 0.5), got {clamp_eps}")));
                }
            }
            RewardConfig::Constant { value } => {
                if !value.is_finite() {
                    return Err(invalid("reward.value", "must be finite"));
                }
            }
            RewardConfig::RemoteScorer {
                endpoint,
                clamp_eps,
                http,
            } => {
                check_endpoint("reward.endpoint", endpoint.as_deref(), SCORER_ENDPOINT_ENV)?;
                if let Some(eps) = clamp_eps {
                    if !(*eps > 0.0 && *eps < 0.5) {
                        return Err(invalid("reward.clamp_eps", format!("must lie in (0, 0.5), got {eps}")));
                    }
                }
                check_http("reward.http", http)?;
            }
        }
        positive("target.beta", self.target.beta)?;

        let w = &self.proposal.index_weights;
        if !w.is_empty() {
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(invalid("proposal.index_weights", "weights must be finite and non-negative"));
            }
            if w[0] <= 0.0 {
                return Err(invalid("proposal.index_weights", "the first weight must be positive"));
            }
        }
        if self.proposal.kind == ProposalKindConfig::TokenFullConditional {
            at_least_one("proposal.top_k", self.proposal.top_k)?;
        }

        at_least_one("chain.steps", self.chain.steps)?;
        if self.chain.burn_in >= self.chain.steps {
            return Err(invalid("chain.burn_in", "must be smaller than chain.steps"));
        }
        positive("chain.temperature", self.chain.temperature)?;
        at_least_one("chain.n_chains", self.chain.n_chains)?;
        if self.target.variant == Variant::KlRegularized {
            if self.chain.temperature != 1.0 {
                return Err(invalid(
                    "chain.temperature",
                    "the kl_regularized target needs temperature 1",
                ));
            }
            if self.proposal.kind != ProposalKindConfig::SuffixResample {
                return Err(invalid(
                    "proposal.kind",
                    "the kl_regularized target needs suffix_resample",
                ));
            }
        }

        if self.baselines.temperatures.is_empty() {
            return Err(invalid("baselines.temperatures", "grid must not be empty"));
        }
        for t in &self.baselines.temperatures {
            positive("baselines.temperatures", *t)?;
        }
        for b in &self.sweep.betas {
            positive("sweep.betas", *b)?;
        }
        at_least_one("oracle.samples", self.oracle.samples)?;
        at_least_one("oracle.resample_pool", self.oracle.resample_pool)?;
        positive("oracle.tolerance", self.oracle.tolerance)?;
        at_least_one("compare.index_buckets", self.compare.index_buckets)?;
        at_least_one("compare.histogram_bins", self.compare.histogram_bins)?;
        Ok(())
    }
}
