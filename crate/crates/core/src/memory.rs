//! Memory-network reads and the two document memories.
//!
//! The source memory is hierarchical: a sentence-level bidirectional LSTM,
//! pretrained as a language model, turns each source sentence into a vector;
//! a document-level bidirectional GRU over those vectors yields one cell per
//! sentence. The target memory holds one decoder state per sentence of the
//! current translation.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::corpus::{END, START};
use crate::error::{Error, Result};
use crate::layers::{birnn, Affine, DropoutCtx, DropoutSite, GruParams, LstmParams};
use crate::params::{ParamId, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Source,
    Target,
}

/// `K` cells on a tape, one per document sentence.
#[derive(Clone, Copy, Debug)]
pub struct Memory {
    /// `K x d` cell matrix.
    pub cells: Var,
    pub len: usize,
    pub dim: usize,
    pub origin: Origin,
}

impl Memory {
    pub fn from_cells(tape: &mut Tape<'_>, cells: &[Var], origin: Origin) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::invalid("memory needs at least one cell"));
        }
        let dim = tape.shape(cells[0]).iter().product();
        let m = tape.stack(cells)?;
        Ok(Memory { cells: m, len: cells.len(), dim, origin })
    }

    pub fn from_rows(tape: &mut Tape<'_>, rows: &[Vec<f64>], origin: Origin) -> Result<Self> {
        let vars: Vec<Var> = rows.iter().map(|r| tape.constant_vec(r.clone())).collect::<Result<_>>()?;
        Self::from_cells(tape, &vars, origin)
    }
}

/// Reads memory `m` with query `q`, optionally masking one cell. Returns the
/// attention distribution over cells and the weighted sum of cells.
pub fn mem_read(tape: &mut Tape<'_>, m: &Memory, q: Var, exclude: Option<usize>) -> Result<(Var, Var)> {
    if tape.shape(q) != [m.dim] {
        return Err(Error::Shape { op: "mem_read", shapes: vec![vec![m.len, m.dim], tape.shape(q).to_vec()] });
    }
    let scores = tape.matmul(m.cells, q)?;
    let p = match exclude {
        Some(t) if t >= m.len => {
            return Err(Error::invalid(format!("excluded cell {t} out of range for {} cells", m.len)));
        }
        Some(_) if m.len == 1 => return Err(Error::invalid("memory read with every cell excluded")),
        Some(t) => tape.masked_softmax(scores, t)?,
        None => tape.softmax(scores)?,
    };
    let out = tape.matmul(p, m.cells)?;
    Ok((p, out))
}

/// [`mem_read`] on plain values.
pub fn mem_read_values(cells: &[Vec<f64>], q: &[f64], exclude: Option<usize>) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let m = Memory::from_rows(&mut tape, cells, Origin::Source)?;
    let qv = tape.constant_vec(q.to_vec())?;
    let (p, out) = mem_read(&mut tape, &m, qv, exclude)?;
    Ok((tape.value(p).to_vec(), tape.value(out).to_vec()))
}

/// Sentence-level bidirectional LSTM language model.
#[derive(Clone, Debug)]
pub struct LmParams {
    pub emb: ParamId,
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    pub head_fwd: Affine,
    pub head_bwd: Affine,
    pub vocab: usize,
    pub hidden: usize,
}

impl LmParams {
    /// Output heads start at zero, so an untrained model predicts uniformly.
    pub fn init<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        prefix: &str,
        vocab: usize,
        embed: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        ps.insert_uniform(format!("{prefix}emb"), &[vocab, embed], rng)?;
        LstmParams::init(ps, &format!("{prefix}fwd"), embed, hidden, rng)?;
        LstmParams::init(ps, &format!("{prefix}bwd"), embed, hidden, rng)?;
        Affine::init_zero(ps, &format!("{prefix}head_fwd"), hidden, vocab)?;
        Affine::init_zero(ps, &format!("{prefix}head_bwd"), hidden, vocab)?;
        Self::lookup(ps, prefix)
    }

    pub fn lookup(ps: &ParamSet, prefix: &str) -> Result<Self> {
        let emb = ps.id(&format!("{prefix}emb"))?;
        let fwd = LstmParams::lookup(ps, &format!("{prefix}fwd"))?;
        Ok(LmParams {
            emb,
            vocab: ps.get(emb).shape()[0],
            hidden: fwd.hidden_dim,
            fwd,
            bwd: LstmParams::lookup(ps, &format!("{prefix}bwd"))?,
            head_fwd: Affine::lookup(ps, &format!("{prefix}head_fwd"))?,
            head_bwd: Affine::lookup(ps, &format!("{prefix}head_bwd"))?,
        })
    }

    /// Width of a sentence representation.
    pub fn rep_dim(&self) -> usize {
        2 * self.hidden
    }
}

fn clamp_token(tok: usize, vocab: usize) -> usize {
    if tok < vocab {
        tok
    } else {
        crate::corpus::UNK
    }
}

struct LmRun {
    fwd: Vec<Var>,
    bwd: Vec<Var>,
}

/// Runs both directions over `<s> x </s>`. `fwd[i]` has read the start token
/// and `x[..i]`; `bwd[i]` has read the end token and `x[i..]` reversed.
fn lm_run(tape: &mut Tape<'_>, lm: &LmParams, x: &[usize]) -> Result<LmRun> {
    if x.is_empty() {
        return Err(Error::invalid("cannot run the language model on an empty sentence"));
    }
    let table = tape.param(lm.emb);
    let mut seq = Vec::with_capacity(x.len() + 2);
    for &t in std::iter::once(&START).chain(x).chain(std::iter::once(&END)) {
        seq.push(tape.lookup(table, clamp_token(t, lm.vocab))?);
    }
    let n = seq.len();
    let fwd_in = &seq[..n - 1];
    let bwd_in: Vec<Var> = seq[1..].iter().rev().copied().collect();
    let fwd = crate::layers::unroll(tape, fwd_in, &lm.fwd)?.into_iter().map(|s| s.h).collect();
    let mut bwd: Vec<Var> = crate::layers::unroll(tape, &bwd_in, &lm.bwd)?.into_iter().map(|s| s.h).collect();
    bwd.reverse();
    Ok(LmRun { fwd, bwd })
}

/// Sentence representation `[fwd after x_L ; bwd after x_1]`.
pub fn sentence_rep(tape: &mut Tape<'_>, lm: &LmParams, x: &[usize]) -> Result<Var> {
    let run = lm_run(tape, lm, x)?;
    tape.concat(&[run.fwd[x.len()], run.bwd[0]])
}

/// Summed language-model loss of both directions and the number of
/// predictions made (`2 (L + 1)`).
pub fn lm_nll(tape: &mut Tape<'_>, lm: &LmParams, x: &[usize]) -> Result<(Var, usize)> {
    let run = lm_run(tape, lm, x)?;
    let x: Vec<usize> = x.iter().map(|&t| clamp_token(t, lm.vocab)).collect();
    let mut terms = Vec::with_capacity(2 * (x.len() + 1));
    for (i, &h) in run.fwd.iter().enumerate() {
        let gold = x.get(i).copied().unwrap_or(END);
        let logits = lm.head_fwd.apply(tape, h)?;
        terms.push(tape.cross_entropy(logits, gold)?);
    }
    for (i, &h) in run.bwd.iter().enumerate() {
        let gold = if i == 0 { START } else { x[i - 1] };
        let logits = lm.head_bwd.apply(tape, h)?;
        terms.push(tape.cross_entropy(logits, gold)?);
    }
    let n = terms.len();
    Ok((tape.add_all(&terms)?, n))
}

/// Document-level recurrent network over sentence representations.
#[derive(Clone, Debug)]
pub struct DocRnnParams {
    pub fwd: GruParams,
    pub bwd: GruParams,
}

impl DocRnnParams {
    pub fn init<R: Rng + ?Sized>(ps: &mut ParamSet, input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        GruParams::init(ps, "doc.fwd", input, hidden, rng)?;
        GruParams::init(ps, "doc.bwd", input, hidden, rng)?;
        Self::lookup(ps)
    }

    pub fn lookup(ps: &ParamSet) -> Result<Self> {
        Ok(DocRnnParams { fwd: GruParams::lookup(ps, "doc.fwd")?, bwd: GruParams::lookup(ps, "doc.bwd")? })
    }

    pub fn cell_dim(&self) -> usize {
        2 * self.fwd.hidden_dim
    }
}

/// Source memory from precomputed sentence representations.
pub fn build_source_memory_from_reps(
    tape: &mut Tape<'_>,
    reps: &[Var],
    doc: &DocRnnParams,
    drop: &mut DropoutCtx<'_>,
) -> Result<Memory> {
    let inputs: Vec<Var> = reps.iter().map(|&r| drop.apply(tape, r, DropoutSite::DocRnn)).collect::<Result<_>>()?;
    let states = birnn(tape, &inputs, &doc.fwd, &doc.bwd)?;
    let cells = states.concat(tape)?;
    Memory::from_cells(tape, &cells, Origin::Source)
}

/// Source memory of a document: sentence representations from the language
/// model fed through the document-level bidirectional GRU.
pub fn build_source_memory(
    tape: &mut Tape<'_>,
    sentences: &[Vec<usize>],
    lm: &LmParams,
    doc: &DocRnnParams,
    drop: &mut DropoutCtx<'_>,
) -> Result<Memory> {
    if sentences.is_empty() {
        return Err(Error::invalid("source memory of an empty document"));
    }
    let reps: Vec<Var> = sentences.iter().map(|s| sentence_rep(tape, lm, s)).collect::<Result<_>>()?;
    build_source_memory_from_reps(tape, &reps, doc, drop)
}

/// Source context for sentence `t`; `None` for single-sentence documents.
/// `proj` maps the query into the cell space when their widths differ.
pub fn query_source(tape: &mut Tape<'_>, m: &Memory, h_t: Var, proj: Option<&Affine>, t: usize) -> Result<Option<Var>> {
    if m.len == 1 {
        return Ok(None);
    }
    let q = match proj {
        Some(a) => a.apply(tape, h_t)?,
        None => h_t,
    };
    Ok(Some(mem_read(tape, m, q, Some(t))?.1))
}

/// Target memory whose cells are the given final decoder states.
pub fn build_target_memory(tape: &mut Tape<'_>, states: &[Var]) -> Result<Memory> {
    if states.is_empty() {
        return Err(Error::invalid("target memory needs one decoder state per sentence"));
    }
    Memory::from_cells(tape, states, Origin::Target)
}

/// Target context for sentence `t`, read with query `s_t + W_q h_t`; `None`
/// for single-sentence documents.
pub fn query_target(
    tape: &mut Tape<'_>,
    m: &Memory,
    s_t: Var,
    h_t: Var,
    w_q: ParamId,
    t: usize,
) -> Result<Option<Var>> {
    if m.len == 1 {
        return Ok(None);
    }
    let w = tape.param(w_q);
    let proj = tape.matmul(w, h_t)?;
    let q = tape.add(s_t, proj)?;
    Ok(Some(mem_read(tape, m, q, Some(t))?.1))
}
