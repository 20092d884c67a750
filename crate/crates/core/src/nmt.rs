//! Sentence-level attentional encoder-decoder.
//!
//! Encoder: bidirectional GRU over source embeddings; annotation `h_i` is the
//! concatenation of both directions. Decoder (single layer):
//!
//! ```text
//! a_ji  = v . tanh(W_ae h_i + W_at s_{j-1})      alpha_j = softmax(a_j)
//! c_j   = sum_i alpha_ji h_i
//! s_j   = tanh(W_s s_{j-1} + W_sj E_T[y_{j-1}] + W_sc c_j [+ memory terms])
//! r_j   = tanh(s_j + W_rc c_j + W_rj E_T[y_{j-1}])
//! y_j  ~ softmax(W_y r_j + b_r [+ memory terms])
//! ```
//!
//! With two decoder layers a second GRU consumes `s_j` and its output
//! replaces `s_j` in the readout.

use rand::Rng;

use crate::autodiff::{log_softmax, Tape, Var};
use crate::corpus::{END, START, UNK};
use crate::error::{Error, Result};
use crate::layers::{birnn, gru_step, Affine, DropoutCtx, DropoutSite, GruParams};
use crate::params::{ParamId, ParamSet};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NmtDims {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub align: usize,
    pub decoder_layers: usize,
}

impl NmtDims {
    pub fn annotation(&self) -> usize {
        2 * self.hidden
    }
}

#[derive(Clone, Debug)]
pub struct NmtParams {
    pub dims: NmtDims,
    pub src_emb: ParamId,
    pub tgt_emb: ParamId,
    pub enc_fwd: GruParams,
    pub enc_bwd: GruParams,
    pub init: Affine,
    pub w_s: ParamId,
    pub w_sj: ParamId,
    pub w_sc: ParamId,
    pub w_ae: ParamId,
    pub w_at: ParamId,
    pub v: ParamId,
    pub w_rc: ParamId,
    pub w_rj: ParamId,
    pub w_y: ParamId,
    pub b_r: ParamId,
    pub layer2: Option<GruParams>,
}

impl NmtParams {
    pub fn init<R: Rng + ?Sized>(ps: &mut ParamSet, dims: &NmtDims, rng: &mut R) -> Result<Self> {
        if dims.decoder_layers == 0 || dims.decoder_layers > 2 {
            return Err(Error::invalid("decoder_layers must be 1 or 2"));
        }
        let (e, h, a, ann) = (dims.embed, dims.hidden, dims.align, dims.annotation());
        ps.insert_uniform("src_emb", &[dims.src_vocab, e], rng)?;
        ps.insert_uniform("tgt_emb", &[dims.tgt_vocab, e], rng)?;
        GruParams::init(ps, "enc.fwd", e, h, rng)?;
        GruParams::init(ps, "enc.bwd", e, h, rng)?;
        Affine::init(ps, "dec.init", h, h, rng)?;
        ps.insert_uniform("dec.w_s", &[h, h], rng)?;
        ps.insert_uniform("dec.w_sj", &[h, e], rng)?;
        ps.insert_uniform("dec.w_sc", &[h, ann], rng)?;
        ps.insert_uniform("att.w_ae", &[a, ann], rng)?;
        ps.insert_uniform("att.w_at", &[a, h], rng)?;
        ps.insert_uniform("att.v", &[a], rng)?;
        ps.insert_uniform("out.w_rc", &[h, ann], rng)?;
        ps.insert_uniform("out.w_rj", &[h, e], rng)?;
        ps.insert_uniform("out.w_y", &[dims.tgt_vocab, h], rng)?;
        ps.insert_uniform("out.b_r", &[dims.tgt_vocab], rng)?;
        if dims.decoder_layers == 2 {
            GruParams::init(ps, "dec.layer2", h, h, rng)?;
        }
        Self::lookup(ps)
    }

    pub fn lookup(ps: &ParamSet) -> Result<Self> {
        let src_emb = ps.id("src_emb")?;
        let tgt_emb = ps.id("tgt_emb")?;
        let w_ae = ps.id("att.w_ae")?;
        let w_y = ps.id("out.w_y")?;
        let layer2 = if ps.contains("dec.layer2.w_z") { Some(GruParams::lookup(ps, "dec.layer2")?) } else { None };
        let enc_fwd = GruParams::lookup(ps, "enc.fwd")?;
        let dims = NmtDims {
            src_vocab: ps.get(src_emb).shape()[0],
            tgt_vocab: ps.get(w_y).shape()[0],
            embed: ps.get(src_emb).shape()[1],
            hidden: enc_fwd.hidden_dim,
            align: ps.get(w_ae).shape()[0],
            decoder_layers: if layer2.is_some() { 2 } else { 1 },
        };
        Ok(NmtParams {
            dims,
            src_emb,
            tgt_emb,
            enc_fwd,
            enc_bwd: GruParams::lookup(ps, "enc.bwd")?,
            init: Affine::lookup(ps, "dec.init")?,
            w_s: ps.id("dec.w_s")?,
            w_sj: ps.id("dec.w_sj")?,
            w_sc: ps.id("dec.w_sc")?,
            w_ae,
            w_at: ps.id("att.w_at")?,
            v: ps.id("att.v")?,
            w_rc: ps.id("out.w_rc")?,
            w_rj: ps.id("out.w_rj")?,
            w_y,
            b_r: ps.id("out.b_r")?,
            layer2,
        })
    }
}

/// Projections that inject document context into the decoder.
#[derive(Clone, Debug)]
pub struct MemoryHeads {
    /// Source context into the state update.
    pub w_sm: ParamId,
    /// Target context into the state update.
    pub w_st: ParamId,
    /// Source context into the output layer.
    pub w_ym: ParamId,
    /// Target context into the output layer.
    pub w_yt: ParamId,
    /// Previous sentence's final state into the state update.
    pub w_pt: ParamId,
}

impl MemoryHeads {
    /// Zero-initialized heads, so a fresh document model reproduces its
    /// sentence-level starting point exactly. `src_dim` and `trg_dim` are the
    /// widths of the source and target context vectors.
    pub fn init(ps: &mut ParamSet, dims: &NmtDims, src_dim: usize, trg_dim: usize) -> Result<Self> {
        let (h, v) = (dims.hidden, dims.tgt_vocab);
        ps.insert_zeros("mem.w_sm", &[h, src_dim])?;
        ps.insert_zeros("mem.w_st", &[h, trg_dim])?;
        ps.insert_zeros("mem.w_ym", &[v, src_dim])?;
        ps.insert_zeros("mem.w_yt", &[v, trg_dim])?;
        ps.insert_zeros("mem.w_pt", &[h, trg_dim])?;
        Self::lookup(ps)
    }

    pub fn lookup(ps: &ParamSet) -> Result<Self> {
        Ok(MemoryHeads {
            w_sm: ps.id("mem.w_sm")?,
            w_st: ps.id("mem.w_st")?,
            w_ym: ps.id("mem.w_ym")?,
            w_yt: ps.id("mem.w_yt")?,
            w_pt: ps.id("mem.w_pt")?,
        })
    }

    pub fn ids(&self) -> [ParamId; 5] {
        [self.w_sm, self.w_st, self.w_ym, self.w_yt, self.w_pt]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Integration {
    /// Contexts enter the decoder state recurrence.
    MemToContext,
    /// Contexts enter the pre-softmax logits.
    MemToOutput,
}

/// Per-sentence document context vectors on a tape.
#[derive(Clone, Copy, Debug, Default)]
pub struct MemoryContext {
    pub src: Option<Var>,
    pub trg: Option<Var>,
    pub prev: Option<Var>,
}

impl MemoryContext {
    pub fn is_empty(&self) -> bool {
        self.src.is_none() && self.trg.is_none() && self.prev.is_none()
    }
}

/// How the decoder is conditioned beyond the source sentence.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning<'a> {
    pub heads: Option<&'a MemoryHeads>,
    pub integration: Integration,
    pub ctx: MemoryContext,
}

impl Conditioning<'_> {
    /// Plain sentence-level decoding.
    pub fn none() -> Self {
        Conditioning { heads: None, integration: Integration::MemToContext, ctx: MemoryContext::default() }
    }

    fn validate(&self) -> Result<()> {
        if !self.ctx.is_empty() && self.heads.is_none() {
            return Err(Error::invalid("memory context given without memory projections"));
        }
        if self.ctx.trg.is_some() && self.ctx.prev.is_some() {
            return Err(Error::invalid("previous-target conditioning excludes the target memory"));
        }
        Ok(())
    }
}

/// Source sentence as seen by the decoder.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub annotations: Vec<Var>,
    /// `L x 2h` annotation matrix.
    pub matrix: Var,
    /// `L x align` precomputed `W_ae h_i`.
    pub keys: Var,
    /// Sentence representation `[fwd_L ; bwd_1]`.
    pub summary: Var,
    /// Final backward state (`bwd_1`), used to initialize the decoder.
    pub bwd_final: Var,
}

pub fn encode(tape: &mut Tape<'_>, p: &NmtParams, x: &[usize], drop: &mut DropoutCtx<'_>) -> Result<Encoded> {
    if x.is_empty() {
        return Err(Error::invalid("cannot encode an empty sentence"));
    }
    let table = tape.param(p.src_emb);
    let mut embs = Vec::with_capacity(x.len());
    for &tok in x {
        if tok >= p.dims.src_vocab {
            return Err(Error::invalid(format!(
                "source token id {tok} out of range (vocabulary {})",
                p.dims.src_vocab
            )));
        }
        let e = tape.lookup(table, tok)?;
        embs.push(drop.apply(tape, e, DropoutSite::Encoder)?);
    }
    let states = birnn(tape, &embs, &p.enc_fwd, &p.enc_bwd)?;
    let annotations = states.concat(tape)?;
    let matrix = tape.stack(&annotations)?;
    let w_ae = tape.param(p.w_ae);
    let keys: Vec<Var> = annotations.iter().map(|&h| tape.matmul(w_ae, h)).collect::<Result<_>>()?;
    let keys = tape.stack(&keys)?;
    let summary = states.summary(tape)?;
    Ok(Encoded { annotations, matrix, keys, summary, bwd_final: states.bwd[0] })
}

/// Decoder recurrent state: first-layer state plus optional second layer.
#[derive(Clone, Copy, Debug)]
pub struct DecState {
    pub s: Var,
    pub top: Option<Var>,
}

impl DecState {
    /// The state exposed to the readout and to target memories.
    pub fn output(&self) -> Var {
        self.top.unwrap_or(self.s)
    }
}

pub fn init_state(tape: &mut Tape<'_>, p: &NmtParams, enc: &Encoded) -> Result<DecState> {
    let pre = p.init.apply(tape, enc.bwd_final)?;
    let s = tape.tanh(pre)?;
    let top = p.layer2.as_ref().map(|_| tape.zeros(p.dims.hidden));
    Ok(DecState { s, top })
}

/// Attention weights over source positions and the resulting context vector.
pub fn attend(tape: &mut Tape<'_>, p: &NmtParams, s_prev: Var, enc: &Encoded) -> Result<(Var, Var)> {
    let w_at = tape.param(p.w_at);
    let q = tape.matmul(w_at, s_prev)?;
    let e = tape.add_row(enc.keys, q)?;
    let e = tape.tanh(e)?;
    let v = tape.param(p.v);
    let scores = tape.matmul(e, v)?;
    let alpha = tape.softmax(scores)?;
    let c = tape.matmul(alpha, enc.matrix)?;
    Ok((alpha, c))
}

#[derive(Clone, Copy, Debug)]
pub struct StepOut {
    pub state: DecState,
    pub logits: Var,
    pub alpha: Var,
    pub context: Var,
    pub readout: Var,
}

fn project(tape: &mut Tape<'_>, w: ParamId, x: Var) -> Result<Var> {
    let w = tape.param(w);
    tape.matmul(w, x)
}

/// The state recurrence only (attention + `s_j`), without readout.
fn advance(
    tape: &mut Tape<'_>,
    p: &NmtParams,
    state: DecState,
    emb: Var,
    enc: &Encoded,
    cond: &Conditioning<'_>,
) -> Result<(DecState, Var, Var)> {
    let (alpha, c) = attend(tape, p, state.s, enc)?;
    let mut terms = vec![project(tape, p.w_s, state.s)?, project(tape, p.w_sj, emb)?, project(tape, p.w_sc, c)?];
    if let Some(heads) = cond.heads {
        if cond.integration == Integration::MemToContext {
            if let Some(src) = cond.ctx.src {
                terms.push(project(tape, heads.w_sm, src)?);
            }
            if let Some(trg) = cond.ctx.trg {
                terms.push(project(tape, heads.w_st, trg)?);
            }
        }
        if let Some(prev) = cond.ctx.prev {
            terms.push(project(tape, heads.w_pt, prev)?);
        }
    }
    let pre = tape.add_all(&terms)?;
    let s = tape.tanh(pre)?;
    let top = match (&p.layer2, state.top) {
        (Some(l2), Some(h)) => Some(gru_step(tape, s, h, l2)?),
        _ => None,
    };
    Ok((DecState { s, top }, alpha, c))
}

pub fn decode_step(
    tape: &mut Tape<'_>,
    p: &NmtParams,
    state: DecState,
    y_prev: usize,
    enc: &Encoded,
    cond: &Conditioning<'_>,
    drop: &mut DropoutCtx<'_>,
) -> Result<StepOut> {
    cond.validate()?;
    if y_prev >= p.dims.tgt_vocab {
        return Err(Error::invalid(format!("target token id {y_prev} out of range")));
    }
    let table = tape.param(p.tgt_emb);
    let emb = tape.lookup(table, y_prev)?;
    let (state, alpha, context) = advance(tape, p, state, emb, enc, cond)?;
    let rc = project(tape, p.w_rc, context)?;
    let rj = project(tape, p.w_rj, emb)?;
    let pre = tape.add_all(&[state.output(), rc, rj])?;
    let readout = tape.tanh(pre)?;
    let r = drop.apply(tape, readout, DropoutSite::Decoder)?;
    let wy = project(tape, p.w_y, r)?;
    let b = tape.param(p.b_r);
    let mut logits = tape.add(wy, b)?;
    if let (Some(heads), Integration::MemToOutput) = (cond.heads, cond.integration) {
        if let Some(src) = cond.ctx.src {
            let t = project(tape, heads.w_ym, src)?;
            logits = tape.add(logits, t)?;
        }
        if let Some(trg) = cond.ctx.trg {
            let t = project(tape, heads.w_yt, trg)?;
            logits = tape.add(logits, t)?;
        }
    }
    Ok(StepOut { state, logits, alpha, context, readout })
}

/// Teacher-forced pass over `y` (which must end with the end token).
pub struct Forced {
    pub loss: Var,
    pub steps: Vec<StepOut>,
    pub token_nll: Vec<Var>,
}

pub fn teacher_force(
    tape: &mut Tape<'_>,
    p: &NmtParams,
    enc: &Encoded,
    y: &[usize],
    cond: &Conditioning<'_>,
    drop: &mut DropoutCtx<'_>,
) -> Result<Forced> {
    if y.is_empty() {
        return Err(Error::invalid("empty target sentence"));
    }
    let mut state = init_state(tape, p, enc)?;
    let mut prev = START;
    let mut steps = Vec::with_capacity(y.len());
    let mut token_nll = Vec::with_capacity(y.len());
    for &tok in y {
        let out = decode_step(tape, p, state, prev, enc, cond, drop)?;
        token_nll.push(tape.cross_entropy(out.logits, tok)?);
        steps.push(out);
        state = out.state;
        prev = tok;
    }
    let loss = tape.add_all(&token_nll)?;
    Ok(Forced { loss, steps, token_nll })
}

/// Final decoder state after reading `y` under teacher forcing, computed
/// without readouts.
pub fn final_state(
    tape: &mut Tape<'_>,
    p: &NmtParams,
    enc: &Encoded,
    y: &[usize],
    cond: &Conditioning<'_>,
) -> Result<Var> {
    cond.validate()?;
    let mut state = init_state(tape, p, enc)?;
    let table = tape.param(p.tgt_emb);
    let mut prev = START;
    for &tok in y {
        let emb = tape.lookup(table, prev)?;
        state = advance(tape, p, state, emb, enc, cond)?.0;
        prev = tok;
    }
    Ok(state.output())
}

/// Negative log-likelihood of `y` given `x`.
pub fn nll(
    tape: &mut Tape<'_>,
    p: &NmtParams,
    x: &[usize],
    y: &[usize],
    cond: &Conditioning<'_>,
    drop: &mut DropoutCtx<'_>,
) -> Result<Var> {
    if y.last() != Some(&END) {
        return Err(Error::invalid("target sentence must end with the end token"));
    }
    let enc = encode(tape, p, x, drop)?;
    Ok(teacher_force(tape, p, &enc, y, cond, drop)?.loss)
}

/// Detached context vectors for decoding outside a training tape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContextVectors {
    pub src: Option<Vec<f64>>,
    pub trg: Option<Vec<f64>>,
    pub prev: Option<Vec<f64>>,
}

impl ContextVectors {
    pub fn to_tape(&self, tape: &mut Tape<'_>) -> Result<MemoryContext> {
        let mut put = |v: &Option<Vec<f64>>| v.clone().map(|v| tape.constant_vec(v)).transpose();
        Ok(MemoryContext { src: put(&self.src)?, trg: put(&self.trg)?, prev: put(&self.prev)? })
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_none() && self.trg.is_none() && self.prev.is_none()
    }
}

/// Everything needed to run the decoder for one sentence outside training.
#[derive(Clone, Copy)]
pub struct Decoder<'a> {
    pub params: &'a ParamSet,
    pub nmt: &'a NmtParams,
    pub heads: Option<&'a MemoryHeads>,
    pub integration: Integration,
}

/// Record of one decoded or scored sentence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecoderTrace {
    pub states: Vec<Vec<f64>>,
    pub alphas: Vec<Vec<f64>>,
    pub contexts: Vec<Vec<f64>>,
    pub readouts: Vec<Vec<f64>>,
    pub tokens: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub final_state: Vec<f64>,
}

impl DecoderTrace {
    fn from_steps(tape: &Tape<'_>, steps: &[StepOut], tokens: Vec<usize>, log_probs: Vec<f64>) -> Self {
        let grab = |f: fn(&StepOut) -> Var| steps.iter().map(|s| tape.value(f(s)).to_vec()).collect();
        let states: Vec<Vec<f64>> = grab(|s| s.state.output());
        DecoderTrace {
            final_state: states.last().cloned().unwrap_or_default(),
            alphas: grab(|s| s.alpha),
            contexts: grab(|s| s.context),
            readouts: grab(|s| s.readout),
            states,
            tokens,
            log_probs,
        }
    }

    pub fn score(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SearchConfig {
    pub beam: usize,
    pub max_len: usize,
    /// Whether the unknown token may be generated.
    pub allow_unk: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { beam: 5, max_len: 50, allow_unk: false }
    }
}

impl SearchConfig {
    /// Token ids the search may emit; the start token never is.
    pub fn allowed(&self, vocab: usize) -> Vec<usize> {
        (0..vocab).filter(|&t| t != START && (self.allow_unk || t != UNK)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, including the end token when one was produced.
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities.
    pub score: f64,
    pub trace: DecoderTrace,
}

impl Hypothesis {
    pub fn words(&self) -> &[usize] {
        strip_end(&self.tokens)
    }
}

pub fn strip_end(tokens: &[usize]) -> &[usize] {
    match tokens.last() {
        Some(&END) => &tokens[..tokens.len() - 1],
        _ => tokens,
    }
}

#[derive(Clone)]
struct Partial {
    score: f64,
    state: DecState,
    tokens: Vec<usize>,
    log_probs: Vec<f64>,
    steps: Vec<StepOut>,
}

impl<'a> Decoder<'a> {
    fn prepare(&self, tape: &mut Tape<'a>, x: &[usize], ctx: &ContextVectors) -> Result<(Encoded, MemoryContext)> {
        let enc = encode(tape, self.nmt, x, &mut DropoutCtx::eval())?;
        let mctx = ctx.to_tape(tape)?;
        Ok((enc, mctx))
    }

    fn conditioning(&self, ctx: MemoryContext) -> Conditioning<'_> {
        Conditioning { heads: self.heads, integration: self.integration, ctx }
    }

    /// Teacher-forced log-probability of `tokens` with its trace.
    pub fn score(&self, x: &[usize], tokens: &[usize], ctx: &ContextVectors) -> Result<DecoderTrace> {
        let mut tape = Tape::with_params(self.params);
        let (enc, mctx) = self.prepare(&mut tape, x, ctx)?;
        let cond = self.conditioning(mctx);
        let forced = teacher_force(&mut tape, self.nmt, &enc, tokens, &cond, &mut DropoutCtx::eval())?;
        let lp = forced.token_nll.iter().map(|&v| -tape.scalar(v)).collect();
        Ok(DecoderTrace::from_steps(&tape, &forced.steps, tokens.to_vec(), lp))
    }

    /// Final state after teacher-forcing `tokens` (no readout).
    pub fn final_state(&self, x: &[usize], tokens: &[usize], ctx: &ContextVectors) -> Result<Vec<f64>> {
        let mut tape = Tape::with_params(self.params);
        let (enc, mctx) = self.prepare(&mut tape, x, ctx)?;
        let cond = self.conditioning(mctx);
        let s = final_state(&mut tape, self.nmt, &enc, tokens, &cond)?;
        Ok(tape.value(s).to_vec())
    }

    /// Argmax decoding until the end token or `max_len` tokens.
    pub fn greedy(&self, x: &[usize], ctx: &ContextVectors, search: &SearchConfig) -> Result<Hypothesis> {
        let mut tape = Tape::with_params(self.params);
        let (enc, mctx) = self.prepare(&mut tape, x, ctx)?;
        let cond = self.conditioning(mctx);
        let allowed = search.allowed(self.nmt.dims.tgt_vocab);
        let mut state = init_state(&mut tape, self.nmt, &enc)?;
        let (mut prev, mut tokens, mut lps, mut steps) = (START, Vec::new(), Vec::new(), Vec::new());
        while tokens.len() < search.max_len {
            let out = decode_step(&mut tape, self.nmt, state, prev, &enc, &cond, &mut DropoutCtx::eval())?;
            let lp = log_softmax(tape.value(out.logits));
            let mut best = allowed[0];
            for &t in &allowed[1..] {
                if lp[t] > lp[best] {
                    best = t;
                }
            }
            tokens.push(best);
            lps.push(lp[best]);
            steps.push(out);
            state = out.state;
            prev = best;
            if best == END {
                break;
            }
        }
        let trace = DecoderTrace::from_steps(&tape, &steps, tokens.clone(), lps);
        Ok(Hypothesis { score: trace.score(), tokens, trace })
    }

    /// Exact search over every token sequence of at most `max_len` tokens
    /// that either ends with the end token or reaches `max_len`. Exponential;
    /// meant for tiny vocabularies.
    pub fn exhaustive(&self, x: &[usize], ctx: &ContextVectors, search: &SearchConfig) -> Result<Hypothesis> {
        if search.max_len == 0 {
            return Err(Error::invalid("max length must be at least 1"));
        }
        let mut tape = Tape::with_params(self.params);
        let (enc, mctx) = self.prepare(&mut tape, x, ctx)?;
        let cond = self.conditioning(mctx);
        let allowed = search.allowed(self.nmt.dims.tgt_vocab);
        let start = init_state(&mut tape, self.nmt, &enc)?;
        let mut frontier = vec![Partial { score: 0.0, state: start, tokens: vec![], log_probs: vec![], steps: vec![] }];
        let mut best: Option<Partial> = None;
        for len in 1..=search.max_len {
            let mut next = Vec::new();
            for h in &frontier {
                let prev = h.tokens.last().copied().unwrap_or(START);
                let out = decode_step(&mut tape, self.nmt, h.state, prev, &enc, &cond, &mut DropoutCtx::eval())?;
                let lp = log_softmax(tape.value(out.logits));
                for &t in &allowed {
                    let mut e = h.clone();
                    e.score += lp[t];
                    e.state = out.state;
                    e.tokens.push(t);
                    e.log_probs.push(lp[t]);
                    e.steps.push(out);
                    if t == END || len == search.max_len {
                        if best.as_ref().is_none_or(|b| e.score > b.score) {
                            best = Some(e);
                        }
                    } else {
                        next.push(e);
                    }
                }
            }
            frontier = next;
        }
        let best = best.ok_or_else(|| Error::invalid("exhaustive search produced no hypothesis"))?;
        let trace = DecoderTrace::from_steps(&tape, &best.steps, best.tokens.clone(), best.log_probs);
        Ok(Hypothesis { tokens: best.tokens, score: best.score, trace })
    }

    /// Beam search scored by the unnormalized sum of token log-probabilities.
    ///
    /// Each step keeps the `beam` best extensions overall; extensions that emit
    /// the end token (or reach `max_len`) move to the finished pool. Search
    /// stops early once no live hypothesis can beat the best finished one.
    pub fn beam(&self, x: &[usize], ctx: &ContextVectors, search: &SearchConfig) -> Result<Hypothesis> {
        if search.beam == 0 || search.max_len == 0 {
            return Err(Error::invalid("beam size and max length must be at least 1"));
        }
        let mut tape = Tape::with_params(self.params);
        let (enc, mctx) = self.prepare(&mut tape, x, ctx)?;
        let cond = self.conditioning(mctx);
        let allowed = search.allowed(self.nmt.dims.tgt_vocab);
        let start = init_state(&mut tape, self.nmt, &enc)?;
        let mut live = vec![Partial { score: 0.0, state: start, tokens: vec![], log_probs: vec![], steps: vec![] }];
        let mut finished: Vec<Partial> = Vec::new();

        for len in 1..=search.max_len {
            let mut cands: Vec<(f64, usize, usize, f64, StepOut)> = Vec::new();
            for (hi, h) in live.iter().enumerate() {
                let prev = h.tokens.last().copied().unwrap_or(START);
                let out = decode_step(&mut tape, self.nmt, h.state, prev, &enc, &cond, &mut DropoutCtx::eval())?;
                let lp = log_softmax(tape.value(out.logits));
                for &t in &allowed {
                    cands.push((h.score + lp[t], hi, t, lp[t], out));
                }
            }
            // stable sort keeps (hypothesis, token) order among ties
            cands.sort_by(|a, b| b.0.total_cmp(&a.0));
            cands.truncate(search.beam);
            let mut next = Vec::new();
            for (score, hi, t, lp, out) in cands {
                let mut h = live[hi].clone();
                h.score = score;
                h.state = out.state;
                h.tokens.push(t);
                h.log_probs.push(lp);
                h.steps.push(out);
                if t == END || len == search.max_len {
                    finished.push(h);
                } else {
                    next.push(h);
                }
            }
            live = next;
            let best_done = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if live.iter().all(|h| h.score <= best_done) {
                break;
            }
        }
        let mut best: Option<Partial> = None;
        for h in finished {
            if best.as_ref().is_none_or(|b| h.score > b.score) {
                best = Some(h);
            }
        }
        let best = best.ok_or_else(|| Error::invalid("beam search produced no hypothesis"))?;
        let trace = DecoderTrace::from_steps(&tape, &best.steps, best.tokens.clone(), best.log_probs);
        Ok(Hypothesis { tokens: best.tokens, score: best.score, trace })
    }
}
