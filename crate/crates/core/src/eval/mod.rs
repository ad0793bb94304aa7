//! Beam-search decoding, corpus BLEU, per-direction evaluation and the
//! source-masking sweep.

mod beam;
mod bleu;

pub use beam::{
    beam_search, default_max_len, exhaustive_search, is_banned, normalized, CachedScorer, Hypothesis, ModelScorer,
    StepScorer,
};
pub use bleu::{bleu4, corpus_stats, BleuStats};

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::LvpM3Model;
use crate::tensor::{Scalar, Tensor};
use crate::text::corpus::wrap;
use crate::text::{mask_source, prefix_target_token, Corpus, Tokenizer};
use crate::vision::{stable_hash, VtokFile};

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOptions {
    pub beam: usize,
    pub alpha: f64,
    /// Overrides [`default_max_len`].
    pub max_len: Option<usize>,
    pub case_sensitive: bool,
    /// Worker threads for decoding distinct sentences; 0 uses all cores.
    pub threads: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            beam: 5,
            alpha: 1.0,
            max_len: None,
            case_sensitive: true,
            threads: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceOutput {
    pub example_id: String,
    pub source: String,
    pub hypothesis: String,
    pub reference: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `pivot-target`, e.g. `en-de`.
    pub direction: String,
    pub bleu: f64,
    pub ratio: Option<f64>,
    pub seed: Option<u64>,
    pub sentences: Vec<SentenceOutput>,
}

/// Accepts `de`, `en-de` or `en2de`; returns the target language.
pub fn parse_direction(direction: &str, pivot: &str) -> Result<String> {
    let (src, tgt) = match direction.split_once(['-', '2']) {
        Some((s, t)) => (s, t),
        None => (pivot, direction),
    };
    if src != pivot || tgt.is_empty() {
        return Err(Error::Language(format!("direction `{direction}` must start from pivot `{pivot}`")));
    }
    Ok(tgt.to_string())
}

/// Translates one tag-prefixed source.
pub fn translate_ids<S: Scalar>(
    model: &LvpM3Model<S>,
    src: &[u32],
    visual: Option<&Tensor<S>>,
    opts: &DecodeOptions,
) -> Result<Hypothesis> {
    let visual = if model.uses_vision() { visual } else { None };
    let mut scorer = ModelScorer::new(model, src, visual)?;
    let max_len = opts.max_len.unwrap_or_else(|| default_max_len(src.len()));
    beam_search(&mut scorer, opts.beam, max_len, opts.alpha)
}

/// Translates raw pivot-language text into `target_lang`.
pub fn translate_text<S: Scalar>(
    model: &LvpM3Model<S>,
    tokenizer: &Tokenizer,
    text: &str,
    target_lang: &str,
    visual: Option<&Tensor<S>>,
    opts: &DecodeOptions,
) -> Result<String> {
    let src = prefix_target_token(&wrap(&tokenizer.encode(text)), target_lang, tokenizer.vocab())?;
    let h = translate_ids(model, &src, visual, opts)?;
    Ok(tokenizer.decode(h.content()))
}

fn worker_count(requested: usize, jobs: usize) -> usize {
    let n = if requested == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        requested
    };
    n.clamp(1, jobs.max(1))
}

/// Runs `f` over `0..n` on scoped threads, preserving order.
fn parallel_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let workers = worker_count(threads, n);
    if workers == 1 {
        return (0..n).map(&f).collect();
    }
    let chunk = n.div_ceil(workers);
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                s.spawn(move || (w * chunk..((w + 1) * chunk).min(n)).map(f).collect::<Result<Vec<T>>>())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("decode worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Source-side masking applied before decoding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Masking {
    pub ratio: f64,
    pub seed: u64,
}

/// Decodes every pivot sentence of `corpus` into `target` and scores the
/// result against that language's lines.
pub fn evaluate<S: Scalar>(
    model: &LvpM3Model<S>,
    tokenizer: &Tokenizer,
    corpus: &Corpus,
    vtok: Option<&VtokFile>,
    target: &str,
    opts: &DecodeOptions,
    masking: Option<Masking>,
) -> Result<EvalReport> {
    let pivot = &corpus.manifest.pivot;
    let sources = &corpus.lines[pivot];
    let references = corpus
        .lines
        .get(target)
        .ok_or_else(|| Error::Language(format!("`{target}` not in corpus")))?;
    if sources.is_empty() {
        return Err(Error::Empty("evaluation corpus"));
    }
    let vtok = if model.uses_vision() {
        let v = vtok.ok_or_else(|| Error::Config(format!("variant `{}` requires a VTOK file", model.variant())))?;
        v.check_width(model.config().d_v)?;
        Some(v)
    } else {
        None
    };
    let vocab = tokenizer.vocab();
    let split = &corpus.manifest.split;
    let sentences = parallel_map(sources.len(), opts.threads, |k| {
        let example_id = format!("{split}:{k}:{pivot}-{target}");
        let mut src = prefix_target_token(&wrap(&tokenizer.encode(&sources[k])), target, vocab)?;
        if let Some(m) = masking {
            src = mask_source(&src, m.ratio, stable_hash(&example_id, m.seed), vocab);
        }
        let visual: Option<Tensor<S>> = match vtok {
            Some(v) => Some(v.get(&corpus.image_ids[k])?.tokens.cast()),
            None => None,
        };
        let h = translate_ids(model, &src, visual.as_ref(), opts)?;
        let source = match masking {
            Some(_) => tokenizer.decode(&src),
            None => normalize(&sources[k]),
        };
        Ok(SentenceOutput {
            example_id,
            source,
            hypothesis: tokenizer.decode(h.content()),
            reference: normalize(&references[k]),
        })
    })?;
    let hyps: Vec<&str> = sentences.iter().map(|s| s.hypothesis.as_str()).collect();
    let refs: Vec<&str> = sentences.iter().map(|s| s.reference.as_str()).collect();
    Ok(EvalReport {
        direction: format!("{pivot}-{target}"),
        bleu: bleu4(&hyps, &refs, opts.case_sensitive)?,
        ratio: masking.map(|m| m.ratio),
        seed: masking.map(|m| m.seed),
        sentences,
    })
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub direction: String,
    pub ratio: f64,
    pub mean_bleu: f64,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub std: f64,
    pub reports: Vec<EvalReport>,
}

/// BLEU after masking each ratio of source content tokens, averaged over seeds.
#[allow(clippy::too_many_arguments)]
pub fn mask_sweep<S: Scalar>(
    model: &LvpM3Model<S>,
    tokenizer: &Tokenizer,
    corpus: &Corpus,
    vtok: Option<&VtokFile>,
    target: &str,
    ratios: &[f64],
    seeds: &[u64],
    opts: &DecodeOptions,
) -> Result<Vec<SweepRow>> {
    if seeds.is_empty() {
        return Err(Error::Empty("seed list"));
    }
    if let Some(r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::Config(format!("masking ratio {r} outside [0, 1]")));
    }
    let mut rows = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let reports = seeds
            .iter()
            .map(|&seed| evaluate(model, tokenizer, corpus, vtok, target, opts, Some(Masking { ratio, seed })))
            .collect::<Result<Vec<_>>>()?;
        let scores: Vec<f64> = reports.iter().map(|r| r.bleu).collect();
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let std = if scores.len() > 1 {
            (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (scores.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        rows.push(SweepRow {
            direction: reports[0].direction.clone(),
            ratio,
            mean_bleu: mean,
            std,
            reports,
        });
    }
    Ok(rows)
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV `direction,ratio,seed,bleu`; ratio and seed are blank when unused.
pub fn write_report_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "direction,ratio,seed,bleu").map_err(io)?;
    for r in reports {
        writeln!(w, "{},{},{},{:.6}", r.direction, opt(r.ratio), opt(r.seed), r.bleu).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// TSV `example_id, source, hypothesis, reference`.
pub fn write_dump_tsv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "example_id\tsource\thypothesis\treference").map_err(io)?;
    for s in &report.sentences {
        writeln!(w, "{}\t{}\t{}\t{}", s.example_id, s.source, s.hypothesis, s.reference).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// CSV `direction,ratio,mean_bleu,std`.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "direction,ratio,mean_bleu,std").map_err(io)?;
    for r in rows {
        writeln!(w, "{},{},{:.6},{:.6}", r.direction, r.ratio, r.mean_bleu, r.std).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests;
