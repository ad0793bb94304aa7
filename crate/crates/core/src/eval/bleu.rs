use std::collections::HashMap;

use crate::error::{Error, Result};

/// Clipped n-gram matches and totals for n = 1..4, plus corpus lengths.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [u64; 4],
    pub totals: [u64; 4],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    pub fn add_sentence(&mut self, hyp: &[&str], reference: &[&str]) {
        self.hyp_len += hyp.len() as u64;
        self.ref_len += reference.len() as u64;
        for n in 1..=4 {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            self.totals[n - 1] += hyp.len().saturating_sub(n - 1) as u64;
            self.matches[n - 1] += h
                .iter()
                .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
                .sum::<u64>();
        }
    }

    /// Geometric mean of the four precisions times the brevity penalty,
    /// on a 0–100 scale. Any zero precision gives 0.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches.contains(&0) {
            return 0.0;
        }
        let log_p: f64 = self
            .matches
            .iter()
            .zip(&self.totals)
            .map(|(&m, &t)| (m as f64 / t as f64).ln())
            .sum::<f64>()
            / 4.0;
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        100.0 * bp * log_p.exp()
    }
}

fn ngram_counts<'t, 'a>(tokens: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], u64> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Unsmoothed corpus BLEU over whitespace tokens, one reference per
/// hypothesis.
pub fn bleu4<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R], case_sensitive: bool) -> Result<f64> {
    Ok(corpus_stats(hypotheses, references, case_sensitive)?.score())
}

pub fn corpus_stats<H: AsRef<str>, R: AsRef<str>>(
    hypotheses: &[H],
    references: &[R],
    case_sensitive: bool,
) -> Result<BleuStats> {
    if hypotheses.is_empty() {
        return Err(Error::Empty("BLEU corpus"));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Config(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let norm = |s: &str| if case_sensitive { s.to_string() } else { s.to_lowercase() };
    let mut stats = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        let (h, r) = (norm(h.as_ref()), norm(r.as_ref()));
        let ht: Vec<&str> = h.split_whitespace().collect();
        let rt: Vec<&str> = r.split_whitespace().collect();
        stats.add_sentence(&ht, &rt);
    }
    Ok(stats)
}
