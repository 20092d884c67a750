//! Document decoding by block coordinate descent: start from sentence-level
//! translations, then repeatedly re-translate one sentence at a time given
//! the current translations of all others.

use crate::docnmt::{with_end, DocContext, DocModel};
use crate::error::Result;
use crate::nmt::{strip_end, ContextVectors, Decoder, Hypothesis, SearchConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SearchMode {
    Beam(SearchConfig),
    /// Exact search; exponential in `max_len`.
    Exhaustive(SearchConfig),
}

impl SearchMode {
    fn run(&self, dec: &Decoder<'_>, x: &[usize], ctx: &ContextVectors) -> Result<Hypothesis> {
        match self {
            SearchMode::Beam(s) => dec.beam(x, ctx, s),
            SearchMode::Exhaustive(s) => dec.exhaustive(x, ctx, s),
        }
    }
}

/// One coordinate update.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditRecord {
    pub doc_id: String,
    pub pass: usize,
    pub sentence: usize,
    pub changed: bool,
    /// Log-probability of the previous translation under the context used
    /// for the update.
    pub old_score: f64,
    /// Log-probability of the translation kept after the update.
    pub new_score: f64,
}

impl AuditRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}",
            self.doc_id, self.pass, self.sentence, self.changed as u8, self.old_score, self.new_score
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BcdOutput {
    /// Final token sequences (end token included when produced).
    pub tokens: Vec<Vec<usize>>,
    pub audit: Vec<AuditRecord>,
}

impl BcdOutput {
    pub fn words(&self) -> Vec<Vec<usize>> {
        self.tokens.iter().map(|t| strip_end(t).to_vec()).collect()
    }
}

/// Pass 0 translates every sentence with the sentence-level model; each
/// further pass visits sentences in order and replaces translation `t` by
/// the search result given the others when it scores higher. Source memory
/// is computed once.
pub fn bcd_decode(
    model: &DocModel,
    doc_id: &str,
    src: &[Vec<usize>],
    passes: usize,
    mode: &SearchMode,
) -> Result<BcdOutput> {
    let sent = model.sentence_decoder();
    let mut tokens = Vec::with_capacity(src.len());
    for x in src {
        tokens.push(mode.run(&sent, x, &ContextVectors::default())?.tokens);
    }
    let mut audit = Vec::new();
    if passes == 0 || src.is_empty() {
        return Ok(BcdOutput { tokens, audit });
    }
    let dec = model.decoder();
    let mut dc = DocContext::new(model, src, tokens)?;
    for pass in 1..=passes {
        for (t, s) in src.iter().enumerate() {
            let ctx = dc.context(t)?;
            let old = dc.translation(t).to_vec();
            let old_score = dec.score(s, &old, &ctx)?.score();
            let hyp = mode.run(&dec, s, &ctx)?;
            let changed = hyp.tokens != old && hyp.score > old_score;
            audit.push(AuditRecord {
                doc_id: doc_id.to_string(),
                pass,
                sentence: t,
                changed,
                old_score,
                new_score: if changed { hyp.score } else { old_score },
            });
            if changed {
                dc.set_translation(t, hyp.tokens)?;
            }
        }
    }
    Ok(BcdOutput { tokens: dc.translations().to_vec(), audit })
}

/// Target-memory cells implied by a set of translations (used by tests and
/// diagnostics).
pub fn cells_for(model: &DocModel, src: &[Vec<usize>], tokens: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    let dec = model.sentence_decoder();
    src.iter().zip(tokens).map(|(x, y)| dec.final_state(x, &with_end(y), &ContextVectors::default())).collect()
}
