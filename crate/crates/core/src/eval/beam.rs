use std::cmp::Ordering;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::{EncodedSource, LvpM3Model};
use crate::tensor::{Scalar, Tensor};
use crate::text::{BOS, EOS, PAD};

/// Next-token distributions for a set of equal-length prefixes.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;

    /// Log-probabilities of the token following each prefix. Prefixes start
    /// with `BOS`.
    fn log_probs(&mut self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// `BOS …  EOS`.
    pub tokens: Vec<u32>,
    /// Sum of token log-probabilities. A forced `EOS` contributes nothing.
    pub logprob: f64,
    /// `logprob / len^α`, where `len` counts generated tokens including a
    /// sampled `EOS` and excluding a forced one.
    pub score: f64,
    /// Whether `max_len` was reached and `EOS` appended without being chosen.
    pub forced: bool,
}

impl Hypothesis {
    /// Tokens between `BOS` and `EOS`.
    pub fn content(&self) -> &[u32] {
        &self.tokens[1..self.tokens.len() - 1]
    }

    fn generated_len(&self) -> usize {
        self.tokens.len() - if self.forced { 2 } else { 1 }
    }
}

/// Tokens never proposed during search.
pub fn is_banned(token: u32) -> bool {
    token == PAD || token == BOS
}

pub fn normalized(logprob: f64, len: usize, alpha: f64) -> f64 {
    logprob / (len as f64).powf(alpha)
}

/// Higher score first; ties go to the lexicographically smaller token
/// sequence, then to the earlier finish.
fn better(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then_with(|| a.generated_len().cmp(&b.generated_len()))
}

fn finish(tokens: Vec<u32>, logprob: f64, forced: bool, alpha: f64) -> Hypothesis {
    let mut h = Hypothesis {
        tokens,
        logprob,
        score: 0.0,
        forced,
    };
    if forced {
        h.tokens.push(EOS);
    }
    h.score = normalized(logprob, h.generated_len(), alpha);
    h
}

/// Length-normalized beam search. At every step all extensions of the live
/// prefixes are ranked by cumulative log-probability (ties: smaller token
/// sequence first) and the best `beam` are kept; those ending in `EOS` leave
/// the beam as finished. Prefixes still alive after `max_len` tokens are
/// closed with a forced `EOS`.
pub fn beam_search(scorer: &mut dyn StepScorer, beam: usize, max_len: usize, alpha: f64) -> Result<Hypothesis> {
    if beam == 0 || max_len == 0 {
        return Err(Error::Config("beam and max_len must be positive".into()));
    }
    let vocab = scorer.vocab_size() as u32;
    let mut alive: Vec<(Vec<u32>, f64)> = vec![(vec![BOS], 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for t in 1..=max_len {
        let prefixes: Vec<&[u32]> = alive.iter().map(|(p, _)| p.as_slice()).collect();
        let lps = scorer.log_probs(&prefixes)?;
        let mut cands: Vec<(f64, Vec<u32>)> = Vec::new();
        for ((prefix, lp), row) in alive.iter().zip(&lps) {
            if row.len() != vocab as usize {
                return Err(Error::shape("beam_search", &[row.len()], &[vocab as usize]));
            }
            for tok in 0..vocab {
                let s = row[tok as usize];
                if is_banned(tok) || s == f64::NEG_INFINITY {
                    continue;
                }
                if s.is_nan() {
                    return Err(Error::Numeric(format!("NaN log-probability for token {tok}")));
                }
                let mut seq = prefix.clone();
                seq.push(tok);
                cands.push((lp + s, seq));
            }
        }
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(&b.1)));
        cands.truncate(beam);
        alive.clear();
        for (lp, seq) in cands {
            if *seq.last().unwrap() == EOS {
                finished.push(finish(seq, lp, false, alpha));
            } else if t == max_len {
                finished.push(finish(seq, lp, true, alpha));
            } else {
                alive.push((seq, lp));
            }
        }
        if alive.is_empty() {
            break;
        }
    }
    finished.sort_by(better);
    finished
        .into_iter()
        .next()
        .ok_or_else(|| Error::Numeric("every continuation has zero probability".into()))
}

/// Scores every complete output of at most `max_len` tokens and returns the
/// best under the same ordering as [`beam_search`].
pub fn exhaustive_search(scorer: &mut dyn StepScorer, max_len: usize, alpha: f64) -> Result<Hypothesis> {
    let vocab = scorer.vocab_size() as u32;
    let mut best: Option<Hypothesis> = None;
    let mut frontier: Vec<(Vec<u32>, f64)> = vec![(vec![BOS], 0.0)];
    for t in 1..=max_len {
        let mut next = Vec::new();
        for (prefix, lp) in &frontier {
            let row = scorer.log_probs(&[prefix.as_slice()])?.remove(0);
            for tok in (0..vocab).filter(|&v| !is_banned(v)) {
                let s = row[tok as usize];
                if s == f64::NEG_INFINITY {
                    continue;
                }
                let mut seq = prefix.clone();
                seq.push(tok);
                let total = lp + s;
                let done = if tok == EOS {
                    Some(finish(seq.clone(), total, false, alpha))
                } else if t == max_len {
                    Some(finish(seq.clone(), total, true, alpha))
                } else {
                    None
                };
                match done {
                    Some(h) => {
                        if best.as_ref().is_none_or(|b| better(&h, b) == Ordering::Less) {
                            best = Some(h);
                        }
                    }
                    None => next.push((seq, total)),
                }
            }
        }
        frontier = next;
    }
    best.ok_or_else(|| Error::Numeric("no complete output".into()))
}

/// Wraps a scorer, evaluating each distinct prefix once, on its own.
/// Guarantees identical numbers however prefixes are grouped.
pub struct CachedScorer<T> {
    inner: T,
    cache: HashMap<Vec<u32>, Vec<f64>>,
}

impl<T: StepScorer> CachedScorer<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            cache: HashMap::new(),
        }
    }
}

impl<T: StepScorer> StepScorer for CachedScorer<T> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn log_probs(&mut self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(prefixes.len());
        for p in prefixes {
            if !self.cache.contains_key(*p) {
                let row = self.inner.log_probs(&[p])?.remove(0);
                self.cache.insert(p.to_vec(), row);
            }
            out.push(self.cache[*p].clone());
        }
        Ok(out)
    }
}

/// Decodes against one encoded source.
pub struct ModelScorer<'a, S: Scalar> {
    pub model: &'a LvpM3Model<S>,
    pub encoded: EncodedSource<S>,
}

impl<'a, S: Scalar> ModelScorer<'a, S> {
    /// `src` is tag-prefixed; `visual` is `[M_v, d_v]` or `None` for `text_only`.
    pub fn new(model: &'a LvpM3Model<S>, src: &[u32], visual: Option<&Tensor<S>>) -> Result<Self> {
        Ok(Self {
            model,
            encoded: model.encode_for_decoding(src, visual)?,
        })
    }
}

impl<S: Scalar> StepScorer for ModelScorer<'_, S> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn log_probs(&mut self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        self.model.next_log_probs(&self.encoded, prefixes)
    }
}

/// Default decoding budget: twice the source length plus eight.
pub fn default_max_len(src_len: usize) -> usize {
    2 * src_len + 8
}
