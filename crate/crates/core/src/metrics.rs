//! Corpus BLEU, perplexity, document consistency and paired bootstrap
//! resampling.

use std::collections::HashMap;
use std::hash::Hash;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Clipped n-gram counts of one candidate against one reference.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    /// Clipped matches per order `1..=max_n`.
    pub matched: Vec<usize>,
    /// Candidate n-grams per order.
    pub total: Vec<usize>,
    pub cand_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    fn zeros(max_n: usize) -> Self {
        BleuStats { matched: vec![0; max_n], total: vec![0; max_n], cand_len: 0, ref_len: 0 }
    }

    fn add(&mut self, o: &BleuStats) {
        for n in 0..self.matched.len() {
            self.matched[n] += o.matched[n];
            self.total[n] += o.total[n];
        }
        self.cand_len += o.cand_len;
        self.ref_len += o.ref_len;
    }

    /// Geometric mean of the precisions times the brevity penalty. Unsmoothed:
    /// any zero precision gives zero.
    pub fn score(&self) -> f64 {
        if self.cand_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for (&m, &t) in self.matched.iter().zip(&self.total) {
            if m == 0 || t == 0 {
                return 0.0;
            }
            log_sum += (m as f64 / t as f64).ln();
        }
        let log_p = log_sum / self.matched.len() as f64;
        let (c, r) = (self.cand_len as f64, self.ref_len as f64);
        let log_bp = if c < r { 1.0 - r / c } else { 0.0 };
        (log_p + log_bp).exp()
    }

    pub fn precision(&self, n: usize) -> f64 {
        if self.total[n - 1] == 0 {
            0.0
        } else {
            self.matched[n - 1] as f64 / self.total[n - 1] as f64
        }
    }

    pub fn brevity_penalty(&self) -> f64 {
        let (c, r) = (self.cand_len as f64, self.ref_len as f64);
        if self.cand_len == 0 {
            0.0
        } else if c < r {
            (1.0 - r / c).exp()
        } else {
            1.0
        }
    }
}

fn ngram_counts<T: Eq + Hash>(toks: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

pub fn sentence_stats<T: Eq + Hash>(cand: &[T], reference: &[T], max_n: usize) -> BleuStats {
    let mut s = BleuStats::zeros(max_n);
    s.cand_len = cand.len();
    s.ref_len = reference.len();
    for n in 1..=max_n {
        let rc = ngram_counts(reference, n);
        for (g, c) in ngram_counts(cand, n) {
            s.matched[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
        }
        s.total[n - 1] = cand.len().saturating_sub(n - 1);
    }
    s
}

/// Per-sentence statistics; rejects mismatched corpora and empty references.
pub fn corpus_stats<T: Eq + Hash>(cands: &[Vec<T>], refs: &[Vec<T>], max_n: usize) -> Result<Vec<BleuStats>> {
    if cands.len() != refs.len() {
        return Err(Error::invalid(format!("{} candidates but {} references", cands.len(), refs.len())));
    }
    if max_n == 0 {
        return Err(Error::invalid("BLEU order must be at least 1"));
    }
    if let Some(i) = refs.iter().position(Vec::is_empty) {
        return Err(Error::invalid(format!("reference sentence {} is empty", i + 1)));
    }
    Ok(cands.iter().zip(refs).map(|(c, r)| sentence_stats(c, r, max_n)).collect())
}

pub fn sum_stats<'a>(stats: impl IntoIterator<Item = &'a BleuStats>, max_n: usize) -> BleuStats {
    let mut total = BleuStats::zeros(max_n);
    for s in stats {
        total.add(s);
    }
    total
}

/// Corpus-level BLEU with orders `1..=max_n` and no smoothing.
pub fn bleu_report<T: Eq + Hash>(cands: &[Vec<T>], refs: &[Vec<T>], max_n: usize) -> Result<BleuStats> {
    Ok(sum_stats(&corpus_stats(cands, refs, max_n)?, max_n))
}

pub fn bleu<T: Eq + Hash>(cands: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    Ok(bleu_report(cands, refs, 4)?.score())
}

pub fn bleu1<T: Eq + Hash>(cands: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    Ok(bleu_report(cands, refs, 1)?.score())
}

/// `exp(total_nll / tokens)`.
pub fn perplexity(total_nll: f64, tokens: usize) -> Result<f64> {
    if tokens == 0 {
        return Err(Error::invalid("perplexity over zero tokens"));
    }
    Ok((total_nll / tokens as f64).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Consistency {
    pub consistent: usize,
    pub total: usize,
}

impl Consistency {
    pub fn score(&self) -> f64 {
        self.consistent as f64 / self.total as f64
    }
}

/// Candidate position aligned with source position `i`.
pub fn aligned_index(i: usize, src_len: usize, cand_len: usize) -> usize {
    i * cand_len / src_len
}

/// Translation consistency of repeated source words.
///
/// For every source type occurring at least twice in a document, the
/// occurrence's rendering is the candidate token at the same relative
/// position. A (document, type) pair is consistent when all renderings agree.
/// Each document is a list of `(source, candidate)` sentence pairs. Returns
/// `None` when no type repeats anywhere.
pub fn consistency_score<T: Eq + Hash>(docs: &[Vec<(&[T], &[T])>]) -> Option<Consistency> {
    let mut out = Consistency { consistent: 0, total: 0 };
    for doc in docs {
        let mut renderings: HashMap<&T, Vec<Option<&T>>> = HashMap::new();
        let mut order: Vec<&T> = Vec::new();
        for &(src, cand) in doc {
            for (i, tok) in src.iter().enumerate() {
                let r = if cand.is_empty() { None } else { cand.get(aligned_index(i, src.len(), cand.len())) };
                let e = renderings.entry(tok).or_insert_with(|| {
                    order.push(tok);
                    Vec::new()
                });
                e.push(r);
            }
        }
        for tok in order {
            let rs = &renderings[tok];
            if rs.len() >= 2 {
                out.total += 1;
                if rs.iter().all(|r| r.is_some() && *r == rs[0]) {
                    out.consistent += 1;
                }
            }
        }
    }
    (out.total > 0).then_some(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bootstrap {
    /// Fraction of resamples where system b does not beat system a.
    pub p_value: f64,
    pub resamples: usize,
    /// `metric(b) - metric(a)` on the full sample.
    pub delta: f64,
}

/// Paired bootstrap over `n_items` aligned items. `metric(idx)` returns the
/// scores of systems a and b on the resample `idx`.
pub fn bootstrap_with<F>(n_items: usize, n_resamples: usize, seed: u64, mut metric: F) -> Result<Bootstrap>
where
    F: FnMut(&[usize]) -> (f64, f64),
{
    if n_resamples < 1 {
        return Err(Error::invalid("bootstrap needs at least one resample"));
    }
    if n_items == 0 {
        return Err(Error::invalid("bootstrap over an empty sample"));
    }
    let all: Vec<usize> = (0..n_items).collect();
    let (a, b) = metric(&all);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = vec![0; n_items];
    let mut not_better = 0;
    for _ in 0..n_resamples {
        for v in idx.iter_mut() {
            *v = rng.gen_range(0..n_items);
        }
        let (sa, sb) = metric(&idx);
        if sb <= sa {
            not_better += 1;
        }
    }
    Ok(Bootstrap { p_value: not_better as f64 / n_resamples as f64, resamples: n_resamples, delta: b - a })
}

/// Paired bootstrap significance of the corpus BLEU (orders `1..=max_n`)
/// difference between systems a and b.
pub fn bootstrap_significance<T: Eq + Hash>(
    sys_a: &[Vec<T>],
    sys_b: &[Vec<T>],
    refs: &[Vec<T>],
    max_n: usize,
    n_resamples: usize,
    seed: u64,
) -> Result<Bootstrap> {
    let sa = corpus_stats(sys_a, refs, max_n)?;
    let sb = corpus_stats(sys_b, refs, max_n)?;
    bootstrap_with(refs.len(), n_resamples, seed, |idx| {
        let a = sum_stats(idx.iter().map(|&i| &sa[i]), max_n).score();
        let b = sum_stats(idx.iter().map(|&i| &sb[i]), max_n).score();
        (a, b)
    })
}
