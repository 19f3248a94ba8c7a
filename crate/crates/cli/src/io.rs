//! Output files: atomic writes and the ancestral sample format.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use quest_core::engine::{read_trace_jsonl, ChainTrace};
use quest_core::{Sequence, Vocab};
use serde::{Deserialize, Serialize};

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let file = File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        let mut w = BufWriter::new(file);
        fill(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleHeader {
    pub kind: String,
    pub temperature: f64,
    pub vocab: Vec<String>,
    pub eos_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleLine {
    pub tokens: Vec<String>,
    pub lm_logprob: f64,
    pub reward: f64,
}

pub const ANCESTRAL_KIND: &str = "ancestral";

pub fn write_samples(
    w: &mut dyn Write,
    vocab: &Vocab,
    temperature: f64,
    samples: &[(Sequence, f64, f64)],
) -> Result<()> {
    let header = SampleHeader {
        kind: ANCESTRAL_KIND.into(),
        temperature,
        vocab: vocab.symbols().to_vec(),
        eos_id: vocab.eos() as usize,
    };
    serde_json::to_writer(&mut *w, &header)?;
    writeln!(w)?;
    for (y, lp, r) in samples {
        let line = SampleLine {
            tokens: vocab.decode(y),
            lm_logprob: *lp,
            reward: *r,
        };
        serde_json::to_writer(&mut *w, &line)?;
        writeln!(w)?;
    }
    Ok(())
}

/// A file of sequences: either ancestral samples or a chain trace.
pub enum SampleFile {
    Ancestral { vocab: Vocab, samples: Vec<Sequence> },
    Trace { vocab: Vocab, trace: Box<ChainTrace> },
}

impl SampleFile {
    pub fn vocab(&self) -> &Vocab {
        match self {
            SampleFile::Ancestral { vocab, .. } | SampleFile::Trace { vocab, .. } => vocab,
        }
    }

    /// Ancestral draws, or the accepted states of a trace.
    pub fn sequences(&self, burn_in: usize) -> Vec<Sequence> {
        match self {
            SampleFile::Ancestral { samples, .. } => samples.clone(),
            SampleFile::Trace { trace, .. } => trace.accepted_samples(burn_in).into_iter().cloned().collect(),
        }
    }
}

pub fn read_trace(path: &Path) -> Result<(Vocab, ChainTrace)> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let (_, vocab, trace) =
        read_trace_jsonl(BufReader::new(file)).with_context(|| format!("reading trace {}", path.display()))?;
    Ok((vocab, trace))
}

pub fn read_sample_file(path: &Path) -> Result<SampleFile> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut lines = BufReader::new(file).lines();
    let first = match lines.next() {
        Some(l) => l?,
        None => bail!("{} is empty", path.display()),
    };
    let probe: serde_json::Value =
        serde_json::from_str(&first).with_context(|| format!("{}: malformed header", path.display()))?;
    if probe.get("kind").and_then(|k| k.as_str()) != Some(ANCESTRAL_KIND) {
        let (vocab, trace) = read_trace(path)?;
        return Ok(SampleFile::Trace {
            vocab,
            trace: Box::new(trace),
        });
    }
    let header: SampleHeader = serde_json::from_value(probe)?;
    let vocab = Vocab::new(header.vocab, header.eos_id)?;
    let mut samples = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: SampleLine =
            serde_json::from_str(&line).with_context(|| format!("{}: line {}", path.display(), k + 2))?;
        let ids = s
            .tokens
            .iter()
            .map(|t| vocab.id(t).filter(|&id| vocab.is_content(id)))
            .collect::<Option<Vec<_>>>()
            .with_context(|| format!("{}: line {} has unknown tokens", path.display(), k + 2))?;
        samples.push(Sequence::new(ids));
    }
    Ok(SampleFile::Ancestral { vocab, samples })
}
