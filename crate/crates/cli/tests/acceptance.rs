//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p quest-cli --test acceptance -- --nocapture`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;

use quest_core::engine::{
    acceptance, acceptance_plain, acceptance_rlhf, ancestral_sample, run_chain, run_parallel_chains,
    write_trace_jsonl, ChainConfig, GibbsTarget, MoveTerms,
};
use quest_core::hypothesis::Hypothesis;
use quest_core::lm::{fit_ngram, sequence_logprob, LanguageModel, NgramLm, PositionalLm, TabularLm};
use quest_core::metrics::{pairwise_bleu_diversity, proposal_reward_deltas, reward_trajectory, sentence_bleu, HypothesisSet};
use quest_core::oracle::{
    detailed_balance_check, empirical_distribution, enumerate_sequences, exact_target, truncated_gibbs_resample,
    tv_distance,
};
use quest_core::proposal::{propose_suffix, IndexDistribution, ProposalKind, ProposalSpec};
use quest_core::reward::{KlRegularized, LengthGaussian, LengthGaussianParams, Reward};
use quest_core::{Prompt, Sequence, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use tempfile::TempDir;

fn report(n: u32, name: &str, passed: bool, detail: String) {
    let verdict = if passed { "PASS" } else { "FAIL" };
    println!("criterion {n:>2} {verdict}  {name}: {detail}");
    assert!(passed, "criterion {n} failed: {detail}");
}

const BETA: f64 = 0.5;
const L_MAX: usize = 5;

fn abc() -> Vocab {
    Vocab::from_content(["a", "b", "c"]).unwrap()
}

/// Three content tokens, lengths up to 5, 364 sequences.
fn small_lm() -> TabularLm {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    TabularLm::random(abc(), L_MAX, 10.0, 10.0, &mut rng).unwrap()
}

fn length_reward() -> Arc<LengthGaussian> {
    Arc::new(LengthGaussian::new(LengthGaussianParams::default()).unwrap())
}

fn plain_target(beta: f64) -> GibbsTarget {
    GibbsTarget::plain(length_reward(), beta).unwrap()
}

fn empty() -> Prompt {
    Prompt::empty()
}

#[test]
fn criterion_01_exact_target_convergence() {
    let lm = small_lm();
    let target = plain_target(BETA);
    let exact = exact_target(&lm, &empty(), &target, L_MAX).unwrap();
    let mut cfg = ChainConfig::new(200_000, 7);
    cfg.burn_in = 10_000;
    let trace = run_chain(&lm, &empty(), &target, &ProposalSpec::suffix(1.0), &cfg).unwrap();
    let tv = tv_distance(&empirical_distribution(trace.canonical_samples(cfg.burn_in)), &exact.to_map());
    report(
        1,
        "exact-target convergence",
        exact.len() == 364 && tv <= 0.05,
        format!("{} states, TV = {tv:.4} (limit 0.05)", exact.len()),
    );
}

#[test]
fn criterion_02_detailed_balance() {
    let lm = small_lm();
    let target = plain_target(BETA);
    let spec = ProposalSpec::suffix(1.0);
    let exact_rule = detailed_balance_check(&lm, &empty(), &target, &spec, L_MAX, 1e-9, |m| {
        acceptance(m, &target, &spec.index)
    })
    .unwrap();
    let corrupted = detailed_balance_check(&lm, &empty(), &target, &spec, L_MAX, 1e-9, |m| {
        (acceptance(m, &target, &spec.index) * 1.01).min(1.0)
    })
    .unwrap();
    report(
        2,
        "detailed balance",
        exact_rule.passed() && !corrupted.passed(),
        format!(
            "max violation {:.2e} over {} transitions (limit 1e-9); corrupted rule {:.2e} (must fail)",
            exact_rule.max_violation, exact_rule.transitions_checked, corrupted.max_violation
        ),
    );
}

#[test]
fn criterion_03_kl_equivalence() {
    let lm = Arc::new(small_lm());
    let base = length_reward();
    let tilde = KlRegularized::new(lm.clone(), base.clone(), BETA).unwrap();
    let spec = ProposalSpec::suffix(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut max_diff: f64 = 0.0;
    let mut pairs = 0;
    while pairs < 1000 {
        let current = ancestral_sample(lm.as_ref(), &empty(), 1.0, 1, &mut rng).unwrap().remove(0);
        let outcome = propose_suffix(lm.as_ref(), &current, &empty(), &spec, &mut rng).unwrap();
        let y = &current.sequence;
        let y2 = &outcome.candidate;
        let plain = MoveTerms::new(
            &outcome,
            y,
            tilde.score(&empty(), y).unwrap(),
            tilde.score(&empty(), y2).unwrap(),
        );
        let rlhf = MoveTerms::new(&outcome, y, base.score(&empty(), y).unwrap(), base.score(&empty(), y2).unwrap());
        let a = acceptance_plain(&plain, 1.0, &spec.index);
        let b = acceptance_rlhf(&rlhf, BETA, &spec.index);
        max_diff = max_diff.max((a - b).abs());
        pairs += 1;
    }

    // The chain targets p_LM · exp(r / β); the reference is exp(r̃) built
    // from the regularized reward with the plain rule.
    let reference = exact_target(lm.as_ref(), &empty(), &GibbsTarget::plain(Arc::new(tilde), 1.0).unwrap(), L_MAX)
        .unwrap()
        .to_map();
    let kl = GibbsTarget::kl_regularized(base, BETA).unwrap();
    let mut cfg = ChainConfig::new(200_000, 8);
    cfg.burn_in = 10_000;
    let trace = run_chain(lm.as_ref(), &empty(), &kl, &spec, &cfg).unwrap();
    let tv = tv_distance(&empirical_distribution(trace.canonical_samples(cfg.burn_in)), &reference);
    report(
        3,
        "KL-regularized equivalence",
        max_diff <= 1e-9 && tv <= 0.05,
        format!("max |α_plain(r̃) - α_rlhf(r)| = {max_diff:.2e} over {pairs} pairs (limit 1e-9); chain TV = {tv:.4} (limit 0.05)"),
    );
}

/// One content token, so sequences are identified by their length.
fn toy_task() -> PositionalLm {
    PositionalLm::geometric(Vocab::from_content(["w"]).unwrap(), 15, 0.3).unwrap()
}

#[test]
fn criterion_04_toy_task_ordering() {
    let lm = toy_task();
    let target = plain_target(BETA);
    let exact = exact_target(&lm, &empty(), &target, 15).unwrap().to_map();
    let spec = ProposalSpec::suffix(1.0);
    let mut held = 0;
    let mut sums = [0.0; 3];
    for seed in 0..10u64 {
        let trace = run_chain(&lm, &empty(), &target, &spec, &ChainConfig::new(128, seed)).unwrap();
        let tq = tv_distance(&empirical_distribution(trace.canonical_samples(0)), &exact);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let anc = ancestral_sample(&lm, &empty(), 1.0, 128, &mut rng).unwrap();
        let ta = tv_distance(&empirical_distribution(anc.iter().map(|h| &h.sequence)), &exact);
        let pool = ancestral_sample(&lm, &empty(), 1.0, 512, &mut rng).unwrap();
        let resampled = truncated_gibbs_resample(&pool, &target, &lm, &empty(), &mut rng, 128).unwrap();
        let tg = tv_distance(&empirical_distribution(resampled.iter().map(|h| &h.sequence)), &exact);
        if tq < ta && tg < ta {
            held += 1;
        }
        sums[0] += tq;
        sums[1] += ta;
        sums[2] += tg;
    }
    report(
        4,
        "toy-task ordering",
        held >= 9,
        format!(
            "ordering held in {held}/10 seeds (need 9); mean TV quest {:.3}, ancestral {:.3}, truncated-Gibbs {:.3}",
            sums[0] / 10.0,
            sums[1] / 10.0,
            sums[2] / 10.0
        ),
    );
}

#[test]
fn criterion_05_reward_trajectory() {
    let lm = small_lm();
    let target = plain_target(BETA);
    let seeds: Vec<u64> = (0..32).collect();
    let traces: Vec<_> = run_parallel_chains(&lm, &empty(), &target, &ProposalSpec::suffix(1.0), &ChainConfig::new(128, 0), &seeds, 4)
        .into_iter()
        .map(Result::unwrap)
        .collect();
    let traj = reward_trajectory(&traces).unwrap();
    let (first, last) = (traj[1], traj[128]);
    let n = traces.len() as f64;
    let se = (first.std.powi(2) / n + last.std.powi(2) / n).sqrt();
    report(
        5,
        "reward trajectory",
        last.mean - first.mean > 2.0 * se && last.std < first.std,
        format!(
            "step 1 mean {:.4} std {:.4}; step 128 mean {:.4} std {:.4}; gain {:.4} vs 2 SE = {:.4}",
            first.mean,
            first.std,
            last.mean,
            last.std,
            last.mean - first.mean,
            2.0 * se
        ),
    );
}

#[test]
fn criterion_06_beta_and_acceptance() {
    let lm = small_lm();
    let seeds: Vec<u64> = (0..32).collect();
    let rate = |beta: f64| {
        let traces: Vec<_> = run_parallel_chains(
            &lm,
            &empty(),
            &plain_target(beta),
            &ProposalSpec::suffix(1.0),
            &ChainConfig::new(128, 0),
            &seeds,
            4,
        )
        .into_iter()
        .map(Result::unwrap)
        .collect();
        let accepted: usize = traces.iter().map(|t| t.accepted_count()).sum();
        let steps: usize = traces.iter().map(|t| t.steps.len()).sum();
        accepted as f64 / steps as f64
    };
    let (hot, cold) = (rate(1.0), rate(0.01));
    let inside = |r: f64| r > 0.0 && r < 1.0;
    report(
        6,
        "beta vs acceptance",
        hot > cold && inside(hot) && inside(cold),
        format!("acceptance {hot:.4} at beta 1.0, {cold:.4} at beta 0.01"),
    );
}

#[test]
fn criterion_07_proposal_ablation() {
    let lm = small_lm();
    let target = plain_target(BETA);
    let state = Hypothesis::score(&lm, &empty(), abc().encode("a b").unwrap(), 1.0).unwrap();
    let mut fractions = BTreeMap::new();
    for (k, kind) in [ProposalKind::SuffixResample, ProposalKind::TokenUniform, ProposalKind::TokenFullConditional]
        .into_iter()
        .enumerate()
    {
        let spec = ProposalSpec {
            kind,
            index: IndexDistribution::Uniform,
            temperature: 1.0,
            top_k: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(70 + k as u64);
        let deltas = proposal_reward_deltas(&lm, &empty(), &target, &spec, &state, 25_000, &mut rng).unwrap();
        let positive = deltas.iter().filter(|d| **d > 0.0).count() as f64 / deltas.len() as f64;
        fractions.insert(format!("{kind:?}"), positive);
    }
    let suffix = fractions["SuffixResample"];
    let passed = suffix > fractions["TokenUniform"] && suffix > fractions["TokenFullConditional"];
    report(
        7,
        "proposal ablation",
        passed,
        format!(
            "positive-delta fraction: suffix {:.4}, token-uniform {:.4}, token-full-conditional {:.4}",
            suffix, fractions["TokenUniform"], fractions["TokenFullConditional"]
        ),
    );
}

#[test]
fn criterion_08_token_cost() {
    const N: usize = 64;
    const T: usize = 128;
    let lm = PositionalLm::fixed_length(abc(), N).unwrap();
    let target = plain_target(BETA);
    let seeds: Vec<u64> = (0..100).collect();
    let traces: Vec<_> = run_parallel_chains(&lm, &empty(), &target, &ProposalSpec::suffix(1.0), &ChainConfig::new(T, 0), &seeds, 4)
        .into_iter()
        .map(Result::unwrap)
        .collect();
    let mean = traces.iter().map(|t| t.token_cost() as f64).sum::<f64>() / traces.len() as f64;
    let law = (T as f64 + 1.0) / 2.0 * N as f64;
    let rel = (mean - law).abs() / law;
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let anc: usize = ancestral_sample(&lm, &empty(), 1.0, 128, &mut rng)
        .unwrap()
        .iter()
        .map(Hypothesis::len)
        .sum();
    report(
        8,
        "token-cost law",
        rel <= 0.05 && anc == 128 * N,
        format!(
            "mean chain cost {mean:.1} vs {law:.1} (relative gap {:.2}%, limit 5%); ancestral {anc} tokens, expected {}",
            rel * 100.0,
            128 * N
        ),
    );
}

fn total_mass(lm: &dyn LanguageModel, tau: f64) -> f64 {
    enumerate_sequences(lm.vocab(), lm.max_len())
        .unwrap()
        .iter()
        .map(|y| sequence_logprob(lm, y, &empty(), tau).unwrap().exp())
        .sum()
}

/// Pearson statistic and degrees of freedom, pooling cells with expected
/// count below 5.
fn chi_square(counts: &HashMap<Sequence, usize>, exact: &[(Sequence, f64)], n: usize) -> (f64, usize) {
    let (mut stat, mut cells) = (0.0, 0);
    let (mut po, mut pe) = (0.0, 0.0);
    for (y, p) in exact {
        let e = p * n as f64;
        let o = counts.get(y).copied().unwrap_or(0) as f64;
        if e < 5.0 {
            po += o;
            pe += e;
        } else {
            stat += (o - e).powi(2) / e;
            cells += 1;
        }
    }
    if pe > 0.0 {
        stat += (po - pe).powi(2) / pe;
        cells += 1;
    }
    (stat, cells - 1)
}

#[test]
fn criterion_09_sampler_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let tab = small_lm();
    let pos = PositionalLm::geometric(abc(), 4, 0.3).unwrap();
    let corpus: Vec<Sequence> = ["a b", "b c c", "a", "c a b a"].iter().map(|t| abc().encode(t).unwrap()).collect();
    let ngram: NgramLm = fit_ngram(&corpus, abc(), 2, 0.1, 4).unwrap();
    let models: [&dyn LanguageModel; 3] = [&tab, &pos, &ngram];
    let mut worst_mass: f64 = 0.0;
    for lm in models {
        for tau in [1.0, 0.6, 1.5] {
            worst_mass = worst_mass.max((total_mass(lm, tau) - 1.0).abs());
        }
    }

    let mut self_bleu_ok = true;
    let mut diversity_ok = true;
    for _ in 0..200 {
        let len = rng.random_range(1..12);
        let y: Vec<u32> = (0..len).map(|_| rng.random_range(0..3)).collect();
        self_bleu_ok &= (sentence_bleu(&y, &y).unwrap() - 1.0).abs() < 1e-12;
        let set: Vec<Sequence> = (0..4)
            .map(|_| Sequence::new((0..rng.random_range(1..8)).map(|_| rng.random_range(0..3)).collect()))
            .collect();
        let d = pairwise_bleu_diversity(&[HypothesisSet::new(empty(), set)]).unwrap();
        diversity_ok &= (0.0..=1.0).contains(&d);
    }

    let n = 100_000;
    let tau = 0.8;
    let exact: Vec<(Sequence, f64)> = enumerate_sequences(tab.vocab(), L_MAX)
        .unwrap()
        .into_iter()
        .map(|y| {
            let p = sequence_logprob(&tab, &y, &empty(), tau).unwrap().exp();
            (y, p)
        })
        .collect();
    let mut counts = HashMap::new();
    for h in ancestral_sample(&tab, &empty(), tau, n, &mut rng).unwrap() {
        *counts.entry(h.sequence).or_insert(0) += 1;
    }
    let (stat, dof) = chi_square(&counts, &exact, n);
    let critical = ChiSquared::new(dof as f64).unwrap().inverse_cdf(1.0 - 1e-3);

    report(
        9,
        "sampler primitives",
        worst_mass < 1e-6 && self_bleu_ok && diversity_ok && stat < critical,
        format!(
            "max |mass - 1| = {worst_mass:.1e}; BLEU(y,y)=1: {self_bleu_ok}; diversity in [0,1]: {diversity_ok}; chi2 = {stat:.1} < {critical:.1} (dof {dof}, 100k draws)"
        ),
    );
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .filter(|(name, _)| name.ends_with(".jsonl"))
        .collect()
}

#[test]
fn criterion_10_determinism() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("cfg.toml");
    fs::write(
        &cfg,
        "[lm]\nbackend = \"tabular_random\"\nvocab = [\"a\", \"b\", \"c\"]\nmax_len = 5\nseed = 3\n[reward]\nkind = \"length_gaussian\"\n[target]\nbeta = 0.5\n[chain]\nsteps = 200\nn_chains = 8\nseed = 5\n[sweep]\nbetas = []\n",
    )
    .unwrap();
    let out = tmp.path().join("out");
    let run = |jobs: &str| {
        let res = Command::new(env!("CARGO_BIN_EXE_quest"))
            .args(["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--jobs", jobs])
            .output()
            .unwrap();
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        let snap = snapshot(&out);
        fs::remove_dir_all(&out).unwrap();
        snap
    };
    let a = run("1");
    let b = run("1");
    let c = run("4");
    let cli_ok = a.len() > 8 && a == b && a == c;

    // Library path: the parallel runner reproduces sequential chains.
    let lm = small_lm();
    let target = plain_target(BETA);
    let spec = ProposalSpec::suffix(0.8);
    let seeds: Vec<u64> = (0..6).collect();
    let encode = |t: &quest_core::ChainTrace| {
        let mut buf = Vec::new();
        write_trace_jsonl(&mut buf, t, lm.vocab(), serde_json::Value::Null).unwrap();
        buf
    };
    let parallel: Vec<Vec<u8>> = run_parallel_chains(&lm, &empty(), &target, &spec, &ChainConfig::new(300, 0), &seeds, 3)
        .iter()
        .map(|r| encode(r.as_ref().unwrap()))
        .collect();
    let sequential: Vec<Vec<u8>> = seeds
        .iter()
        .map(|&s| encode(&run_chain(&lm, &empty(), &target, &spec, &ChainConfig::new(300, s)).unwrap()))
        .collect();
    let lib_ok = parallel == sequential;
    report(
        10,
        "determinism",
        cli_ok && lib_ok,
        format!(
            "{} JSONL files identical across reruns and --jobs 1/4: {cli_ok}; parallel equals sequential: {lib_ok}",
            a.len()
        ),
    );
}
