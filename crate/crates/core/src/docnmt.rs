//! Document-conditioned translation model.
//!
//! Every parameter the model could use lives in one [`ParamSet`] whatever the
//! configuration, so a sentence-level model trained with memories switched off
//! is directly the starting point of the document model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::corpus::END;
use crate::error::{Error, Result};
use crate::layers::{Affine, DropoutCtx, DropoutPlan};
use crate::memory::{
    build_source_memory_from_reps, build_target_memory, query_source, query_target, sentence_rep, DocRnnParams,
    LmParams, Memory,
};
use crate::nmt::{
    encode, final_state, teacher_force, Conditioning, ContextVectors, Decoder, Hypothesis, Integration, MemoryContext,
    MemoryHeads, NmtDims, NmtParams, SearchConfig,
};
use crate::params::{ParamId, ParamSet};

pub const LM_PREFIX: &str = "lm.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemorySelection {
    None,
    Src,
    Trg,
    Both,
}

impl MemorySelection {
    pub fn uses_src(self) -> bool {
        matches!(self, MemorySelection::Src | MemorySelection::Both)
    }

    pub fn uses_trg(self) -> bool {
        matches!(self, MemorySelection::Trg | MemorySelection::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            MemorySelection::None => "none",
            MemorySelection::Src => "src",
            MemorySelection::Trg => "trg",
            MemorySelection::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => MemorySelection::None,
            "src" => MemorySelection::Src,
            "trg" => MemorySelection::Trg,
            "both" => MemorySelection::Both,
            _ => return Err(Error::invalid(format!("unknown memory selection {s}"))),
        })
    }
}

/// Which sentence representation queries the memories.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuerySource {
    /// Final states of the translation encoder, `[fwd_L ; bwd_1]`.
    Encoder,
    /// The pretrained sentence language model's representation.
    LmRep,
}

impl QuerySource {
    pub fn name(self) -> &'static str {
        match self {
            QuerySource::Encoder => "encoder",
            QuerySource::LmRep => "lm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(QuerySource::Encoder),
            "lm" => Ok(QuerySource::LmRep),
            _ => Err(Error::invalid(format!("unknown query source {s}"))),
        }
    }
}

pub fn integration_name(i: Integration) -> &'static str {
    match i {
        Integration::MemToContext => "context",
        Integration::MemToOutput => "output",
    }
}

pub fn parse_integration(s: &str) -> Result<Integration> {
    match s {
        "context" => Ok(Integration::MemToContext),
        "output" => Ok(Integration::MemToOutput),
        _ => Err(Error::invalid(format!("unknown integration {s}"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DocModelConfig {
    pub integration: Integration,
    pub memories: MemorySelection,
    /// Feed the previous sentence's final decoder state into every state update.
    pub prev_trg: bool,
    pub nmt: NmtDims,
    pub lm_embed: usize,
    pub lm_hidden: usize,
    pub doc_hidden: usize,
    pub dropout: DropoutPlan,
    pub query: QuerySource,
}

impl DocModelConfig {
    /// Sentence-level configuration with every dimension set to `dim` and
    /// alignment width `dim / 2`.
    pub fn sentence_level(src_vocab: usize, tgt_vocab: usize, dim: usize) -> Self {
        DocModelConfig {
            integration: Integration::MemToContext,
            memories: MemorySelection::None,
            prev_trg: false,
            nmt: NmtDims { src_vocab, tgt_vocab, embed: dim, hidden: dim, align: (dim / 2).max(1), decoder_layers: 1 },
            lm_embed: dim,
            lm_hidden: dim,
            doc_hidden: dim,
            dropout: DropoutPlan::default(),
            query: QuerySource::Encoder,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prev_trg && self.memories.uses_trg() {
            return Err(Error::invalid("previous-target conditioning cannot be combined with the target memory"));
        }
        let d = &self.nmt;
        if [d.src_vocab, d.tgt_vocab, d.embed, d.hidden, d.align, self.lm_embed, self.lm_hidden, self.doc_hidden]
            .contains(&0)
        {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if d.src_vocab <= END || d.tgt_vocab <= END {
            return Err(Error::invalid("vocabularies must contain the reserved tokens"));
        }
        for r in [self.dropout.encoder, self.dropout.decoder, self.dropout.doc_rnn] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::invalid(format!("dropout rate {r} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn is_sentence_level(&self) -> bool {
        self.memories == MemorySelection::None && !self.prev_trg
    }

    fn query_dim(&self) -> usize {
        match self.query {
            QuerySource::Encoder => self.nmt.annotation(),
            QuerySource::LmRep => 2 * self.lm_hidden,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DocModel {
    pub cfg: DocModelConfig,
    pub params: ParamSet,
    pub nmt: NmtParams,
    pub heads: MemoryHeads,
    pub lm: LmParams,
    pub doc_rnn: DocRnnParams,
    /// Maps the query into the source cell space when widths differ.
    pub src_query: Option<Affine>,
    /// Projects the source representation into the decoder state space for
    /// the target-memory query.
    pub w_q: ParamId,
}

impl DocModel {
    /// Fresh parameters drawn from `seed`. Translation parameters are drawn
    /// first, so they do not depend on the memory configuration; memory heads
    /// start at zero.
    pub fn new(cfg: DocModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        NmtParams::init(&mut ps, &cfg.nmt, &mut rng)?;
        LmParams::init(&mut ps, LM_PREFIX, cfg.nmt.src_vocab, cfg.lm_embed, cfg.lm_hidden, &mut rng)?;
        DocRnnParams::init(&mut ps, 2 * cfg.lm_hidden, cfg.doc_hidden, &mut rng)?;
        let cell = 2 * cfg.doc_hidden;
        if cfg.query_dim() != cell {
            Affine::init(&mut ps, "mem.src_q", cfg.query_dim(), cell, &mut rng)?;
        }
        ps.insert_uniform("mem.w_q", &[cfg.nmt.hidden, cfg.query_dim()], &mut rng)?;
        MemoryHeads::init(&mut ps, &cfg.nmt, cell, cfg.nmt.hidden)?;
        Self::from_params(cfg, ps)
    }

    pub fn from_params(cfg: DocModelConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        let nmt = NmtParams::lookup(&params)?;
        if nmt.dims != cfg.nmt {
            return Err(Error::invalid(format!("parameters have dims {:?}, config says {:?}", nmt.dims, cfg.nmt)));
        }
        let lm = LmParams::lookup(&params, LM_PREFIX)?;
        let doc_rnn = DocRnnParams::lookup(&params)?;
        let src_query = if params.contains("mem.src_q.w") { Some(Affine::lookup(&params, "mem.src_q")?) } else { None };
        Ok(DocModel {
            heads: MemoryHeads::lookup(&params)?,
            w_q: params.id("mem.w_q")?,
            cfg,
            params,
            nmt,
            lm,
            doc_rnn,
            src_query,
        })
    }

    /// Same parameters under a different memory configuration.
    pub fn reconfigure(self, integration: Integration, memories: MemorySelection, prev_trg: bool) -> Result<Self> {
        let cfg = DocModelConfig { integration, memories, prev_trg, ..self.cfg };
        Self::from_params(cfg, self.params)
    }

    /// Decoder conditioned as configured (contexts supplied per sentence).
    pub fn decoder(&self) -> Decoder<'_> {
        Decoder {
            params: &self.params,
            nmt: &self.nmt,
            heads: if self.cfg.is_sentence_level() { None } else { Some(&self.heads) },
            integration: self.cfg.integration,
        }
    }

    /// Decoder ignoring every document memory.
    pub fn sentence_decoder(&self) -> Decoder<'_> {
        Decoder { heads: None, ..self.decoder() }
    }

    fn needs_lm_reps(&self) -> bool {
        self.cfg.memories.uses_src() || self.cfg.query == QuerySource::LmRep
    }

    fn needs_trg_cells(&self) -> bool {
        self.cfg.memories.uses_trg() || self.cfg.prev_trg
    }

    /// Sentence representations of a source document under the language model.
    pub fn lm_reps(&self, src: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::with_params(&self.params);
        src.iter()
            .map(|s| {
                let r = sentence_rep(&mut tape, &self.lm, s)?;
                Ok(tape.value(r).to_vec())
            })
            .collect()
    }
}

/// Appends the end token unless already present.
pub fn with_end(tokens: &[usize]) -> Vec<usize> {
    let mut v = tokens.to_vec();
    if v.last() != Some(&END) {
        v.push(END);
    }
    v
}

/// One document as seen by the training loss.
#[derive(Clone, Copy, Debug)]
pub struct DocBatch<'d> {
    pub src: &'d [Vec<usize>],
    /// Gold targets, each ending with the end token.
    pub tgt: &'d [Vec<usize>],
    /// Translations whose decoder states fill the target memory.
    pub mem_trg: &'d [Vec<usize>],
    /// Precomputed language-model sentence representations.
    pub lm_reps: Option<&'d [Vec<f64>]>,
}

pub struct DocLoss {
    pub loss: Var,
    pub sentence_losses: Vec<Var>,
    pub tokens: usize,
}

/// Negative pseudo-log-likelihood of a document: each sentence is scored
/// given contexts read from memories with its own cell excluded.
pub fn doc_nll(
    tape: &mut Tape<'_>,
    model: &DocModel,
    batch: &DocBatch<'_>,
    drop: &mut DropoutCtx<'_>,
) -> Result<DocLoss> {
    let k = batch.src.len();
    if k == 0 {
        return Err(Error::invalid("document has no sentences"));
    }
    if batch.tgt.len() != k {
        return Err(Error::invalid(format!("{k} source sentences but {} targets", batch.tgt.len())));
    }
    let cfg = &model.cfg;
    let p = &model.nmt;
    let mut encs = Vec::with_capacity(k);
    for x in batch.src {
        encs.push(encode(tape, p, x, drop)?);
    }
    let reps: Vec<Var> = if model.needs_lm_reps() {
        match batch.lm_reps {
            Some(r) if r.len() == k => r.iter().map(|v| tape.constant_vec(v.clone())).collect::<Result<_>>()?,
            Some(r) => return Err(Error::invalid(format!("{} sentence representations for {k} sentences", r.len()))),
            None => batch.src.iter().map(|s| sentence_rep(tape, &model.lm, s)).collect::<Result<_>>()?,
        }
    } else {
        Vec::new()
    };
    let queries: Vec<Var> = match cfg.query {
        QuerySource::Encoder => encs.iter().map(|e| e.summary).collect(),
        QuerySource::LmRep => reps.clone(),
    };
    let src_mem: Option<Memory> = if cfg.memories.uses_src() && k > 1 {
        Some(build_source_memory_from_reps(tape, &reps, &model.doc_rnn, drop)?)
    } else {
        None
    };
    let cells: Vec<Var> = if model.needs_trg_cells() && k > 1 {
        if batch.mem_trg.len() != k {
            return Err(Error::invalid(format!("{} memory translations for {k} sentences", batch.mem_trg.len())));
        }
        (0..k)
            .map(|t| final_state(tape, p, &encs[t], &with_end(&batch.mem_trg[t]), &Conditioning::none()))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let trg_mem = if cfg.memories.uses_trg() && k > 1 { Some(build_target_memory(tape, &cells)?) } else { None };

    let mut losses = Vec::with_capacity(k);
    let mut tokens = 0;
    for t in 0..k {
        let y = &batch.tgt[t];
        if y.last() != Some(&END) {
            return Err(Error::invalid("target sentence must end with the end token"));
        }
        let mut ctx = MemoryContext::default();
        if let Some(m) = &src_mem {
            ctx.src = query_source(tape, m, queries[t], model.src_query.as_ref(), t)?;
        }
        if let Some(m) = &trg_mem {
            ctx.trg = query_target(tape, m, cells[t], queries[t], model.w_q, t)?;
        }
        if cfg.prev_trg && t > 0 && !cells.is_empty() {
            ctx.prev = Some(cells[t - 1]);
        }
        let cond = Conditioning {
            heads: if cfg.is_sentence_level() { None } else { Some(&model.heads) },
            integration: cfg.integration,
            ctx,
        };
        losses.push(teacher_force(tape, p, &encs[t], y, &cond, drop)?.loss);
        tokens += y.len();
    }
    Ok(DocLoss { loss: tape.add_all(&losses)?, sentence_losses: losses, tokens })
}

/// Detached per-document state for decoding: encoder queries, source cells
/// and the target cells of the current translations.
#[derive(Clone, Debug)]
pub struct DocContext<'m> {
    model: &'m DocModel,
    src: Vec<Vec<usize>>,
    queries: Vec<Vec<f64>>,
    src_cells: Option<Vec<Vec<f64>>>,
    trg_cells: Vec<Vec<f64>>,
    translations: Vec<Vec<usize>>,
}

impl<'m> DocContext<'m> {
    /// `translations` are the current outputs, one per sentence.
    pub fn new(model: &'m DocModel, src: &[Vec<usize>], translations: Vec<Vec<usize>>) -> Result<Self> {
        let k = src.len();
        if k == 0 {
            return Err(Error::invalid("document has no sentences"));
        }
        if translations.len() != k {
            return Err(Error::invalid(format!("{} translations for {k} sentences", translations.len())));
        }
        let mut tape = Tape::with_params(&model.params);
        let mut drop = DropoutCtx::eval();
        let reps = if model.needs_lm_reps() { model.lm_reps(src)? } else { Vec::new() };
        let mut queries = Vec::with_capacity(k);
        for (t, x) in src.iter().enumerate() {
            queries.push(match model.cfg.query {
                QuerySource::Encoder => {
                    let enc = encode(&mut tape, &model.nmt, x, &mut drop)?;
                    tape.value(enc.summary).to_vec()
                }
                QuerySource::LmRep => reps[t].clone(),
            });
        }
        let src_cells = if model.cfg.memories.uses_src() && k > 1 {
            let vars: Vec<Var> = reps.iter().map(|r| tape.constant_vec(r.clone())).collect::<Result<_>>()?;
            let m = build_source_memory_from_reps(&mut tape, &vars, &model.doc_rnn, &mut drop)?;
            let flat = tape.value(m.cells);
            Some(flat.chunks(m.dim).map(<[f64]>::to_vec).collect())
        } else {
            None
        };
        let mut ctx = DocContext { model, src: src.to_vec(), queries, src_cells, trg_cells: Vec::new(), translations };
        if model.needs_trg_cells() && k > 1 {
            ctx.trg_cells = (0..k).map(|t| ctx.cell(t)).collect::<Result<_>>()?;
        }
        Ok(ctx)
    }

    fn cell(&self, t: usize) -> Result<Vec<f64>> {
        self.model.sentence_decoder().final_state(
            &self.src[t],
            &with_end(&self.translations[t]),
            &ContextVectors::default(),
        )
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn source(&self, t: usize) -> &[usize] {
        &self.src[t]
    }

    pub fn translation(&self, t: usize) -> &[usize] {
        &self.translations[t]
    }

    pub fn translations(&self) -> &[Vec<usize>] {
        &self.translations
    }

    pub fn target_cells(&self) -> &[Vec<f64>] {
        &self.trg_cells
    }

    /// Replaces translation `t`; only target cell `t` is recomputed.
    pub fn set_translation(&mut self, t: usize, tokens: Vec<usize>) -> Result<()> {
        self.translations[t] = tokens;
        if !self.trg_cells.is_empty() {
            self.trg_cells[t] = self.cell(t)?;
        }
        Ok(())
    }

    /// Memory contexts for sentence `t`, read with cell `t` excluded.
    pub fn context(&self, t: usize) -> Result<ContextVectors> {
        let model = self.model;
        let cfg = &model.cfg;
        let mut out = ContextVectors::default();
        if self.len() == 1 {
            return Ok(out);
        }
        let mut tape = Tape::with_params(&model.params);
        let q = tape.constant_vec(self.queries[t].clone())?;
        if let Some(cells) = &self.src_cells {
            let m = Memory::from_rows(&mut tape, cells, crate::memory::Origin::Source)?;
            if let Some(c) = query_source(&mut tape, &m, q, model.src_query.as_ref(), t)? {
                out.src = Some(tape.value(c).to_vec());
            }
        }
        if cfg.memories.uses_trg() {
            let m = Memory::from_rows(&mut tape, &self.trg_cells, crate::memory::Origin::Target)?;
            let s = tape.constant_vec(self.trg_cells[t].clone())?;
            if let Some(c) = query_target(&mut tape, &m, s, q, model.w_q, t)? {
                out.trg = Some(tape.value(c).to_vec());
            }
        }
        if cfg.prev_trg && t > 0 {
            out.prev = Some(self.trg_cells[t - 1].clone());
        }
        Ok(out)
    }

    /// Beam-decodes sentence `t` given the other sentences' translations.
    pub fn translate_in_context(&self, t: usize, search: &SearchConfig) -> Result<Hypothesis> {
        let ctx = self.context(t)?;
        self.model.decoder().beam(&self.src[t], &ctx, search)
    }
}
