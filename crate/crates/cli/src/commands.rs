//! The `run`, `oracle` and `compare` subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use quest_core::engine::{acceptance, ancestral_sample, run_chain, run_parallel_chains, write_trace_jsonl, ChainTrace};
use quest_core::metrics::{
    acceptance_stats, accepted_index_histogram, fixed_histogram, pairwise_bleu_diversity, proposal_reward_deltas,
    reward_trajectory, set_overlap, write_counts_csv, write_trajectory_csv, AcceptanceStats, HypothesisSet,
    RunReport,
};
use quest_core::oracle::{
    detailed_balance_check, empirical_distribution, exact_target, stationarity_residual, truncated_gibbs_resample,
    tv_distance,
};
use quest_core::proposal::{ProposalKind, ProposalSpec};
use quest_core::hypothesis::Hypothesis;
use quest_core::{Sequence, Vocab};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::io::{read_sample_file, read_trace, write_atomic, write_samples};
use crate::setup::{build, build_target, chain_config, chain_seeds, Experiment};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    })
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn echo_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let text = cfg.to_toml_string();
    write_atomic(&dir.join("config.toml"), |w| Ok(w.write_all(text.as_bytes())?))
}

/// Runs the configured chains, writing traces as they finish; a failed
/// chain leaves a `.partial` file and fails the whole call.
fn sample_chains(exp: &Experiment, cfg: &ExperimentConfig, dir: &Path, jobs: usize) -> Result<Vec<ChainTrace>> {
    let seeds = chain_seeds(cfg);
    let results = run_parallel_chains(
        exp.lm.as_ref(),
        &exp.prompt,
        &exp.target,
        &exp.spec,
        &chain_config(cfg, cfg.chain.seed),
        &seeds,
        jobs,
    );
    let header = serde_json::to_value(cfg)?;
    let vocab = exp.lm.vocab();
    let mut traces = Vec::with_capacity(results.len());
    let mut failure = None;
    for (k, res) in results.into_iter().enumerate() {
        let path = dir.join(format!("chain_{k:03}.jsonl"));
        match res {
            Ok(trace) => {
                write_atomic(&path, |mut w| Ok(write_trace_jsonl(&mut w, &trace, vocab, header.clone())?))?;
                traces.push(trace);
            }
            Err(err) => {
                if let Some(partial) = &err.partial {
                    let mut p = path.into_os_string();
                    p.push(".partial");
                    write_atomic(Path::new(&p), |mut w| Ok(write_trace_jsonl(&mut w, partial, vocab, header.clone())?))?;
                }
                failure.get_or_insert(err);
            }
        }
    }
    if let Some(err) = failure {
        return Err(err).context("chain failed");
    }
    Ok(traces)
}

#[derive(Debug, Serialize)]
struct BaselineRow {
    temperature: f64,
    mean_quality: f64,
    mean_diversity: Option<f64>,
}

#[derive(Debug, Serialize)]
struct SweepRow {
    beta: f64,
    mean_quality: f64,
    mean_diversity: Option<f64>,
    acceptance_rate: f64,
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic(path, |w| {
        let mut csv = csv_writer(w);
        for r in rows {
            csv.serialize(r)?;
        }
        csv.flush()?;
        Ok(())
    })
}

fn csv_writer(w: &mut dyn Write) -> csv::Writer<&mut dyn Write> {
    csv::Writer::from_writer(w)
}

fn score_all(exp: &Experiment, hyps: Vec<Hypothesis>) -> Result<Vec<(Sequence, f64, f64)>> {
    hyps.into_iter()
        .map(|h| {
            let r = exp.reward.score(&exp.prompt, &h.sequence)?;
            let lp = h.lm_logprob();
            Ok((h.sequence, lp, r))
        })
        .collect()
}

/// Summary printed by `quest run`.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub chains: usize,
    pub report: RunReport,
}

pub fn run(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<RunSummary> {
    cfg.validate()?;
    prepare_dir(out)?;
    echo_config(cfg, out)?;
    let exp = build(cfg)?;
    let traces = sample_chains(&exp, cfg, out, jobs)?;

    let report = RunReport::from_traces(&traces, cfg.chain.burn_in, &exp.prompt, cfg.compare.index_buckets)?;
    write_json(&out.join("report.json"), &report)?;
    write_atomic(&out.join("trajectory.csv"), |w| Ok(write_trajectory_csv(w, &report.reward_trajectory)?))?;
    write_atomic(&out.join("index_histogram.csv"), |w| {
        Ok(write_counts_csv(w, ["bucket", "count"], report.index_histogram.iter().enumerate())?)
    })?;
    write_atomic(&out.join("repeats.csv"), |w| {
        Ok(write_counts_csv(w, ["multiplicity", "count"], report.repeats_histogram.iter())?)
    })?;

    let vocab = exp.lm.vocab();
    let mut rows = Vec::new();
    for (j, &tau) in cfg.baselines.temperatures.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.chain.seed);
        rng.set_stream(j as u64 + 1);
        let hyps = ancestral_sample(exp.lm.as_ref(), &exp.prompt, tau, cfg.baselines.ancestral_count, &mut rng)?;
        let scored = score_all(&exp, hyps)?;
        write_atomic(&out.join(format!("ancestral_t{tau:.2}.jsonl")), |w| {
            write_samples(w, vocab, tau, &scored)
        })?;
        let set = HypothesisSet::new(exp.prompt.clone(), scored.iter().map(|s| s.0.clone()).collect());
        rows.push(BaselineRow {
            temperature: tau,
            mean_quality: scored.iter().map(|s| s.2).sum::<f64>() / scored.len().max(1) as f64,
            mean_diversity: pairwise_bleu_diversity(&[set]).ok(),
        });
    }
    if !rows.is_empty() {
        write_rows(&out.join("baselines.csv"), &rows)?;
    }

    let mut sweep = Vec::new();
    for &beta in &cfg.sweep.betas {
        let target = build_target(cfg, exp.reward.clone(), beta)?;
        let results = run_parallel_chains(
            exp.lm.as_ref(),
            &exp.prompt,
            &target,
            &exp.spec,
            &chain_config(cfg, cfg.chain.seed),
            &chain_seeds(cfg),
            jobs,
        );
        let traces = results
            .into_iter()
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("sweep chain at beta {beta} failed"))?;
        let r = RunReport::from_traces(&traces, cfg.chain.burn_in, &exp.prompt, cfg.compare.index_buckets)?;
        sweep.push(SweepRow {
            beta,
            mean_quality: r.mean_quality,
            mean_diversity: r.mean_diversity,
            acceptance_rate: r.acceptance_rate,
        });
    }
    if !sweep.is_empty() {
        write_rows(&out.join("beta_sweep.csv"), &sweep)?;
    }

    Ok(RunSummary {
        chains: traces.len(),
        report,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BalanceSummary {
    pub max_violation: f64,
    pub transitions_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Contents of `oracle.json`.
#[derive(Debug, Clone, Serialize)]
pub struct OracleSummary {
    pub states: usize,
    pub log_z: f64,
    pub samples_per_method: usize,
    pub tv_quest: f64,
    pub tv_ancestral: f64,
    pub tv_truncated_gibbs: f64,
    pub tv_convergence: Option<f64>,
    pub detailed_balance: BalanceSummary,
    pub stationarity_residual: f64,
}

pub fn oracle(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<OracleSummary> {
    cfg.validate()?;
    prepare_dir(out)?;
    echo_config(cfg, out)?;
    let exp = build(cfg)?;
    let lm = exp.lm.as_ref();
    let l_max = lm.max_len();
    let exact = exact_target(lm, &exp.prompt, &exp.target, l_max)?;
    write_atomic(&out.join("exact_target.csv"), |w| Ok(exact.write_csv(w, lm.vocab())?))?;
    let pi = exact.to_map();
    let n = cfg.oracle.samples;

    let traces = sample_chains(&exp, cfg, out, jobs)?;
    let quest: Vec<&Sequence> = traces
        .iter()
        .flat_map(|t| t.canonical_samples(cfg.chain.burn_in))
        .take(n)
        .collect();
    let tv_quest = tv_distance(&empirical_distribution(quest.iter().copied()), &pi);

    let tau = exp.spec.temperature;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.chain.seed);
    rng.set_stream(1);
    let anc = ancestral_sample(lm, &exp.prompt, tau, n, &mut rng)?;
    let tv_ancestral = tv_distance(&empirical_distribution(anc.iter().map(|h| &h.sequence)), &pi);

    rng.set_stream(2);
    let pool = ancestral_sample(lm, &exp.prompt, tau, cfg.oracle.resample_pool, &mut rng)?;
    let resampled = truncated_gibbs_resample(&pool, &exp.target, lm, &exp.prompt, &mut rng, n)?;
    let tv_truncated_gibbs = tv_distance(&empirical_distribution(resampled.iter().map(|h| &h.sequence)), &pi);

    let tv_convergence = if cfg.oracle.convergence_steps > 0 {
        let mut c = chain_config(cfg, cfg.chain.seed);
        c.steps = cfg.oracle.convergence_steps;
        c.burn_in = cfg.oracle.burn_in.min(c.steps - 1);
        let trace = run_chain(lm, &exp.prompt, &exp.target, &exp.spec, &c).context("convergence chain failed")?;
        let samples = trace.canonical_samples(c.burn_in);
        Some(tv_distance(&empirical_distribution(samples), &pi))
    } else {
        None
    };

    let index = exp.spec.index.clone();
    let accept = |m: &_| acceptance(m, &exp.target, &index);
    let balance = detailed_balance_check(lm, &exp.prompt, &exp.target, &exp.spec, l_max, cfg.oracle.tolerance, accept)?;
    let residual = stationarity_residual(lm, &exp.prompt, &exp.target, &exp.spec, l_max, accept)?;

    let summary = OracleSummary {
        states: exact.len(),
        log_z: exact.log_z,
        samples_per_method: n,
        tv_quest,
        tv_ancestral,
        tv_truncated_gibbs,
        tv_convergence,
        detailed_balance: BalanceSummary {
            max_violation: balance.max_violation,
            transitions_checked: balance.transitions_checked,
            tolerance: balance.tolerance,
            passed: balance.passed(),
        },
        stationarity_residual: residual,
    };
    write_json(&out.join("oracle.json"), &summary)?;
    Ok(summary)
}

/// Inputs of `quest compare`.
#[derive(Debug, Clone)]
pub struct CompareArgs {
    pub traces: Vec<PathBuf>,
    pub baselines: Vec<PathBuf>,
    pub out: PathBuf,
    pub burn_in: usize,
    pub config: Option<ExperimentConfig>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceStats {
    pub file: String,
    pub seed: u64,
    pub token_cost: usize,
    #[serde(flatten)]
    pub stats: AcceptanceStats,
}

#[derive(Debug, Clone, Serialize)]
pub struct OverlapRow {
    pub trace: String,
    pub baseline: String,
    pub overlap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeltaSummary {
    pub proposal: String,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub mean_abs: f64,
    pub nonzero_fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareSummary {
    pub traces: Vec<TraceStats>,
    pub overlaps: Vec<OverlapRow>,
    pub reward_deltas: Vec<DeltaSummary>,
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn same_schema(a: &Vocab, b: &Vocab) -> bool {
    a.symbols() == b.symbols() && a.eos() == b.eos()
}

fn kind_name(kind: ProposalKind) -> &'static str {
    match kind {
        ProposalKind::SuffixResample => "suffix_resample",
        ProposalKind::TokenUniform => "token_uniform",
        ProposalKind::TokenFullConditional => "token_full_conditional",
    }
}

pub fn compare(args: &CompareArgs) -> Result<CompareSummary> {
    if args.traces.is_empty() {
        bail!("compare needs at least one trace");
    }
    prepare_dir(&args.out)?;
    let mut vocab: Option<Vocab> = None;
    let mut check = |v: &Vocab, p: &Path| -> Result<()> {
        match &vocab {
            None => vocab = Some(v.clone()),
            Some(first) if !same_schema(first, v) => {
                bail!("schema mismatch: {} uses a different vocabulary", p.display())
            }
            Some(_) => {}
        }
        Ok(())
    };

    let mut traces = Vec::new();
    for p in &args.traces {
        let (v, t) = read_trace(p)?;
        check(&v, p)?;
        traces.push(t);
    }
    let mut baselines = Vec::new();
    for p in &args.baselines {
        let f = read_sample_file(p)?;
        check(f.vocab(), p)?;
        baselines.push(f.sequences(args.burn_in));
    }
    let vocab = vocab.expect("at least one trace");

    let n_buckets = args.config.as_ref().map_or(10, |c| c.compare.index_buckets);
    let n_bins = args.config.as_ref().map_or(10, |c| c.compare.histogram_bins);

    let mut overlaps = Vec::new();
    for (tp, t) in args.traces.iter().zip(&traces) {
        let mine: Vec<Sequence> = t.accepted_samples(args.burn_in).into_iter().cloned().collect();
        for (bp, b) in args.baselines.iter().zip(&baselines) {
            overlaps.push(OverlapRow {
                trace: file_name(tp),
                baseline: file_name(bp),
                overlap: set_overlap(&mine, b),
            });
        }
    }
    write_rows(&args.out.join("overlap.csv"), &overlaps)?;
    let values: Vec<f64> = overlaps.iter().map(|o| o.overlap).collect();
    let hist = fixed_histogram(&values, n_bins, 0.0, 1.0)?;
    write_atomic(&args.out.join("overlap_histogram.csv"), |w| {
        Ok(write_counts_csv(w, ["bin", "count"], hist.iter().enumerate())?)
    })?;

    let trajectory = reward_trajectory(&traces)?;
    write_atomic(&args.out.join("trajectory.csv"), |w| Ok(write_trajectory_csv(w, &trajectory)?))?;
    let index_hist = accepted_index_histogram(&traces, n_buckets)?;
    write_atomic(&args.out.join("index_histogram.csv"), |w| {
        Ok(write_counts_csv(w, ["bucket", "count"], index_hist.iter().enumerate())?)
    })?;

    let mut repeats: BTreeMap<usize, usize> = BTreeMap::new();
    let stats: Vec<TraceStats> = args
        .traces
        .iter()
        .zip(&traces)
        .map(|(p, t)| {
            let s = acceptance_stats(t);
            for (&m, &c) in &s.repeats_histogram {
                *repeats.entry(m).or_insert(0) += c;
            }
            TraceStats {
                file: file_name(p),
                seed: t.seed,
                token_cost: t.token_cost(),
                stats: s,
            }
        })
        .collect();
    write_atomic(&args.out.join("repeats.csv"), |w| {
        Ok(write_counts_csv(w, ["multiplicity", "count"], repeats.iter())?)
    })?;

    let reward_deltas = match &args.config {
        Some(cfg) => reward_delta_study(cfg, &vocab, &traces, &args.out)?,
        None => Vec::new(),
    };

    let summary = CompareSummary {
        traces: stats,
        overlaps,
        reward_deltas,
    };
    write_json(&args.out.join("compare.json"), &summary)?;
    Ok(summary)
}

#[derive(Serialize)]
struct DeltaRow<'a> {
    proposal: &'a str,
    delta: f64,
}

/// Reward deltas of many proposals from one state, for each proposal kind.
fn reward_delta_study(
    cfg: &ExperimentConfig,
    vocab: &Vocab,
    traces: &[ChainTrace],
    out: &Path,
) -> Result<Vec<DeltaSummary>> {
    cfg.validate()?;
    let exp = build(cfg)?;
    if !same_schema(exp.lm.vocab(), vocab) {
        bail!("schema mismatch: the config's model uses a different vocabulary than the traces");
    }
    let lm = exp.lm.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.chain.seed);
    let tau = exp.spec.temperature;
    let state = traces
        .iter()
        .flat_map(|t| std::iter::once(&t.initial.state).chain(t.steps.iter().map(|s| &s.state)))
        .find(|s| !s.is_empty())
        .cloned();
    let state = match state {
        Some(s) => Hypothesis::score(lm, &exp.prompt, s, tau)?,
        None => loop {
            let h = ancestral_sample(lm, &exp.prompt, tau, 1, &mut rng)?.remove(0);
            if !h.is_empty() {
                break h;
            }
        },
    };

    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for (k, kind) in [
        ProposalKind::SuffixResample,
        ProposalKind::TokenUniform,
        ProposalKind::TokenFullConditional,
    ]
    .into_iter()
    .enumerate()
    {
        let spec = ProposalSpec { kind, ..exp.spec.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.chain.seed);
        rng.set_stream(k as u64 + 1);
        let deltas = proposal_reward_deltas(
            lm,
            &exp.prompt,
            &exp.target,
            &spec,
            &state,
            cfg.compare.delta_proposals,
            &mut rng,
        )?;
        let n = deltas.len().max(1) as f64;
        let mean = deltas.iter().sum::<f64>() / n;
        let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
        summaries.push(DeltaSummary {
            proposal: kind_name(kind).into(),
            count: deltas.len(),
            mean,
            std: var.sqrt(),
            mean_abs: deltas.iter().map(|d| d.abs()).sum::<f64>() / n,
            nonzero_fraction: deltas.iter().filter(|d| **d != 0.0).count() as f64 / n,
        });
        rows.extend(deltas.into_iter().map(|delta| DeltaRow {
            proposal: kind_name(kind),
            delta,
        }));
    }
    write_rows(&out.join("reward_delta.csv"), &rows)?;
    write_rows(&out.join("reward_delta_summary.csv"), &summaries)?;
    Ok(summaries)
}
