//! Stage-wise SGD training: sentence language model pretraining, the
//! sentence-level translation model (stage 1) and the document model
//! (stage 2).

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::corpus::Document;
use crate::docnmt::{doc_nll, DocBatch, DocModel, LM_PREFIX};
use crate::error::{Error, Result};
use crate::layers::{DropoutCtx, DropoutPlan};
use crate::memory::{lm_nll, LmParams};
use crate::metrics::perplexity;
use crate::nmt::{nll, Conditioning, ContextVectors, SearchConfig};
use crate::params::{ParamGrads, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Lm,
    One,
    Two,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Lm => "lm",
            Stage::One => "stage1",
            Stage::Two => "stage2",
        }
    }
}

/// Learning rate for a 1-based epoch.
///
/// Stage 1 (and language model pretraining) starts at 0.1 and halves after
/// every epoch past the fourth; stage 2 starts at 0.08 and decays by 0.9 after
/// every epoch past the first. The rate is formed as one division of two
/// integers, so it is the correctly rounded value of the exact decimal (for
/// instance 0.072, where `0.08 * 0.9` would give 0.07200000000000001).
pub fn lr_schedule(stage: Stage, epoch: usize) -> Result<f64> {
    if epoch == 0 {
        return Err(Error::invalid("epochs are numbered from 1"));
    }
    let ratio = |num: u128, den: u128| num as f64 / den as f64;
    Ok(match stage {
        Stage::Lm | Stage::One => {
            let k = epoch.saturating_sub(4).min(120) as u32;
            ratio(1, 10 * 2u128.pow(k))
        }
        Stage::Two => {
            let k = epoch.saturating_sub(1) as u32;
            // numerator and denominator stay below 2^53
            if k <= 13 {
                ratio(8 * 9u128.pow(k), 100 * 10u128.pow(k))
            } else {
                0.08 * 0.9f64.powi(k as i32)
            }
        }
    })
}

/// `p <- p - lr * g` on every trainable tensor with a gradient.
pub fn sgd_step(params: &mut ParamSet, grads: &ParamGrads, lr: f64) -> Result<()> {
    if !grads.all_finite() {
        return Err(Error::Numerical("non-finite gradient; step rejected".into()));
    }
    for id in params.ids().collect::<Vec<_>>() {
        if !params.is_trainable(id) {
            continue;
        }
        if let Some(g) = grads.get(id) {
            params.get_mut(id).data_mut().iter_mut().zip(g).for_each(|(p, d)| *p -= lr * d);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetMemorySource {
    /// Translations produced by the sentence-level model.
    Generated,
    /// Reference translations.
    Gold,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lm_epochs: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Sentences per update in language-model and stage-1 training.
    pub batch_size: usize,
    /// Global gradient-norm clipping threshold.
    pub clip: f64,
    pub stage1_dropout: DropoutPlan,
    pub stage2_dropout: DropoutPlan,
    pub target_memory: TargetMemorySource,
    /// Search used to produce the generated target-memory translations.
    pub search: SearchConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lm_epochs: 3,
            stage1_epochs: 10,
            stage2_epochs: 15,
            batch_size: 1,
            clip: 5.0,
            stage1_dropout: DropoutPlan::default(),
            stage2_dropout: DropoutPlan { encoder: 0.5, decoder: 0.5, doc_rnn: 0.2 },
            target_memory: TargetMemorySource::Generated,
            search: SearchConfig::default(),
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return Err(Error::invalid("clip threshold must be positive"));
        }
        Ok(())
    }

    fn rngs(&self, stage: Stage) -> (ChaCha8Rng, ChaCha8Rng) {
        let tag = match stage {
            Stage::Lm => 0x4c4d,
            Stage::One => 0x5331,
            Stage::Two => 0x5332,
        };
        let base = self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ tag;
        (ChaCha8Rng::seed_from_u64(base), ChaCha8Rng::seed_from_u64(base ^ 0xd0d0))
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    pub split: &'static str,
    pub ppl: f64,
    pub lr: f64,
    /// Updates skipped because of non-finite values.
    pub skipped: usize,
    pub wall_secs: f64,
}

impl EpochLog {
    /// Tab-separated record without the wall time, so it is reproducible.
    pub fn to_line(&self) -> String {
        format!(
            "stage={}\tepoch={}\tsplit={}\tppl={:.6}\tlr={}\tskipped={}",
            self.stage.name(),
            self.epoch,
            self.split,
            self.ppl,
            self.lr,
            self.skipped
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub logs: Vec<EpochLog>,
    /// Epoch of the selected parameters (0 = the starting point).
    pub best_epoch: usize,
    pub best_dev_ppl: Option<f64>,
}

pub type LogSink<'a> = &'a mut dyn FnMut(&EpochLog);

/// Loss and gradients of one update.
fn gradients<F>(params: &ParamSet, f: F) -> Result<(f64, usize, ParamGrads)>
where
    F: for<'a> FnOnce(&mut Tape<'a>) -> Result<(Var, usize)>,
{
    let mut tape = Tape::with_params(params);
    let (loss, n) = f(&mut tape)?;
    let value = tape.scalar(loss);
    let g = tape.backward(loss)?;
    Ok((value, n, tape.param_grads(&g)))
}

struct Epoch {
    nll: f64,
    tokens: usize,
    skipped: usize,
    steps: usize,
}

/// Runs one update: scaled gradient, clipping and an SGD step. Non-finite
/// losses and gradients skip the update.
fn update<F>(params: &mut ParamSet, lr: f64, clip: f64, scale: f64, ep: &mut Epoch, f: F) -> Result<()>
where
    F: for<'a> FnOnce(&mut Tape<'a>) -> Result<(Var, usize)>,
{
    ep.steps += 1;
    match gradients(params, f) {
        Ok((loss, n, mut g)) => {
            g.scale(scale);
            if !g.all_finite() {
                ep.skipped += 1;
                return Ok(());
            }
            g.clip_global_norm(clip);
            sgd_step(params, &g, lr)?;
            ep.nll += loss;
            ep.tokens += n;
            Ok(())
        }
        Err(e) if e.is_numerical() => {
            ep.skipped += 1;
            Ok(())
        }
        Err(e) => Err(e),
    }
}

fn finish_epoch(ep: &Epoch) -> Result<f64> {
    if ep.steps > 0 && ep.skipped == ep.steps {
        return Err(Error::Numerical(format!("all {} updates of the epoch produced non-finite values", ep.steps)));
    }
    perplexity(ep.nll, ep.tokens.max(1))
}

/// A pretrained sentence-level language model in its own parameter set
/// (names without the `lm.` prefix).
#[derive(Clone, Debug)]
pub struct SentenceLm {
    pub params: ParamSet,
    pub lm: LmParams,
    /// Training-set perplexity; entry 0 is the untrained model.
    pub ppl: Vec<f64>,
}

impl SentenceLm {
    pub fn new(vocab: usize, embed: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let lm = LmParams::init(&mut params, "", vocab, embed, hidden, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(SentenceLm { params, lm, ppl: Vec::new() })
    }

    pub fn from_params(params: ParamSet) -> Result<Self> {
        let lm = LmParams::lookup(&params, "")?;
        Ok(SentenceLm { params, lm, ppl: Vec::new() })
    }

    /// Perplexity over `sentences`, counting predictions in both directions.
    pub fn perplexity(&self, sentences: &[&[usize]]) -> Result<f64> {
        let (mut total, mut n) = (0.0, 0);
        for s in sentences {
            let mut tape = Tape::with_params(&self.params);
            let (l, k) = lm_nll(&mut tape, &self.lm, s)?;
            total += tape.scalar(l);
            n += k;
        }
        perplexity(total, n)
    }

    /// Copies the language model into a document model and freezes it there.
    pub fn install(&self, model: &mut DocModel) -> Result<()> {
        let n = model.params.copy_matching(&self.params, LM_PREFIX)?;
        if n != self.params.len() {
            return Err(Error::invalid("language model does not match the document model's shapes"));
        }
        model.params.freeze_prefix(LM_PREFIX);
        Ok(())
    }
}

fn source_sentences(docs: &[Document]) -> Vec<&[usize]> {
    docs.iter().flat_map(|d| d.src.iter().map(Vec::as_slice)).collect()
}

/// Pretrains the sentence language model on source sentences. Records the
/// training perplexity before training and after every epoch.
pub fn pretrain_sentence_lm(
    lm: &mut SentenceLm,
    docs: &[Document],
    cfg: &TrainConfig,
    log: LogSink<'_>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let sents = source_sentences(docs);
    if sents.is_empty() {
        return Err(Error::invalid("language model pretraining on an empty corpus"));
    }
    let (mut order_rng, _) = cfg.rngs(Stage::Lm);
    let mut report = TrainReport::default();
    lm.ppl = vec![lm.perplexity(&sents)?];
    let mut order: Vec<usize> = (0..sents.len()).collect();
    for epoch in 1..=cfg.lm_epochs {
        let start = Instant::now();
        let lr = lr_schedule(Stage::Lm, epoch)?;
        order.shuffle(&mut order_rng);
        let mut ep = Epoch { nll: 0.0, tokens: 0, skipped: 0, steps: 0 };
        let lmp = lm.lm.clone();
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            update(&mut lm.params, lr, cfg.clip, scale, &mut ep, |tape| {
                let mut terms = Vec::with_capacity(batch.len());
                let mut n = 0;
                for &i in batch {
                    let (l, k) = lm_nll(tape, &lmp, sents[i])?;
                    terms.push(l);
                    n += k;
                }
                Ok((tape.add_all(&terms)?, n))
            })?;
        }
        finish_epoch(&ep)?;
        let ppl = lm.perplexity(&sents)?;
        lm.ppl.push(ppl);
        let rec = EpochLog {
            stage: Stage::Lm,
            epoch,
            split: "train",
            ppl,
            lr,
            skipped: ep.skipped,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        log(&rec);
        report.logs.push(rec);
    }
    report.best_epoch = cfg.lm_epochs;
    Ok(report)
}

/// Sentence-level perplexity of a model on the pairs of `docs`.
pub fn sentence_perplexity(model: &DocModel, docs: &[Document]) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0);
    for d in docs {
        for (x, y) in d.src.iter().zip(&d.tgt) {
            let mut tape = Tape::with_params(&model.params);
            let l = nll(&mut tape, &model.nmt, x, y, &Conditioning::none(), &mut DropoutCtx::eval())?;
            total += tape.scalar(l);
            n += y.len();
        }
    }
    perplexity(total, n)
}

fn select_best(best: &mut (f64, usize, ParamSet), dev_ppl: Option<f64>, epoch: usize, params: &ParamSet) {
    match dev_ppl {
        Some(p) if p < best.0 => *best = (p, epoch, params.clone()),
        None => *best = (f64::NAN, epoch, params.clone()),
        _ => {}
    }
}

/// Stage 1: the sentence-level model, i.e. the document model with its
/// memory readings at zero. Keeps the parameters with the lowest dev
/// perplexity (the last epoch's when `dev` is empty).
pub fn train_stage1(
    model: &mut DocModel,
    train: &[Document],
    dev: &[Document],
    cfg: &TrainConfig,
    log: LogSink<'_>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let pairs: Vec<(&[usize], &[usize])> =
        train.iter().flat_map(|d| d.src.iter().zip(&d.tgt).map(|(x, y)| (x.as_slice(), y.as_slice()))).collect();
    if pairs.is_empty() {
        return Err(Error::invalid("stage 1 training on an empty corpus"));
    }
    let (mut order_rng, mut drop_rng) = cfg.rngs(Stage::One);
    let mut report = TrainReport::default();
    let mut best = (f64::INFINITY, 0, model.params.clone());
    if !dev.is_empty() {
        best.0 = sentence_perplexity(model, dev)?;
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let nmt = model.nmt.clone();
    for epoch in 1..=cfg.stage1_epochs {
        let start = Instant::now();
        let lr = lr_schedule(Stage::One, epoch)?;
        order.shuffle(&mut order_rng);
        let mut ep = Epoch { nll: 0.0, tokens: 0, skipped: 0, steps: 0 };
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let drop_rng = &mut drop_rng;
            update(&mut model.params, lr, cfg.clip, scale, &mut ep, |tape| {
                let mut drop = DropoutCtx::train(drop_rng, cfg.stage1_dropout);
                let mut terms = Vec::with_capacity(batch.len());
                let mut n = 0;
                for &i in batch {
                    let (x, y) = pairs[i];
                    terms.push(nll(tape, &nmt, x, y, &Conditioning::none(), &mut drop)?);
                    n += y.len();
                }
                Ok((tape.add_all(&terms)?, n))
            })?;
        }
        let train_ppl = finish_epoch(&ep)?;
        let wall = start.elapsed().as_secs_f64();
        let rec = EpochLog {
            stage: Stage::One,
            epoch,
            split: "train",
            ppl: train_ppl,
            lr,
            skipped: ep.skipped,
            wall_secs: wall,
        };
        log(&rec);
        report.logs.push(rec);
        let dev_ppl = if dev.is_empty() { None } else { Some(sentence_perplexity(model, dev)?) };
        if let Some(p) = dev_ppl {
            let rec = EpochLog {
                stage: Stage::One,
                epoch,
                split: "dev",
                ppl: p,
                lr,
                skipped: 0,
                wall_secs: start.elapsed().as_secs_f64(),
            };
            log(&rec);
            report.logs.push(rec);
        }
        select_best(&mut best, dev_ppl, epoch, &model.params);
    }
    report.best_epoch = best.1;
    report.best_dev_ppl = best.0.is_finite().then_some(best.0);
    model.params = best.2;
    Ok(report)
}

/// Per-document inputs of stage 2 computed once from the sentence-level
/// starting point: translations for the target memory and the frozen
/// language model's sentence representations.
#[derive(Clone, Debug)]
pub struct Stage2Data {
    pub docs: Vec<Document>,
    pub mem_trg: Vec<Vec<Vec<usize>>>,
    pub lm_reps: Vec<Vec<Vec<f64>>>,
}

/// Decodes every source sentence of `docs` with the sentence-level model.
pub fn translate_sentences(
    model: &DocModel,
    docs: &[Document],
    search: &SearchConfig,
    jobs: usize,
) -> Result<Vec<Vec<Vec<usize>>>> {
    let dec = model.sentence_decoder();
    crate::parallel::map_ordered(docs, jobs, |d| {
        d.src
            .iter()
            .map(|x| Ok(dec.beam(x, &ContextVectors::default(), search)?.words().to_vec()))
            .collect::<Result<Vec<_>>>()
    })
}

pub fn prepare_stage2(
    model: &DocModel,
    docs: &[Document],
    source: TargetMemorySource,
    search: &SearchConfig,
    jobs: usize,
) -> Result<Stage2Data> {
    let mem_trg = match source {
        TargetMemorySource::Gold => {
            docs.iter().map(|d| d.tgt.iter().map(|y| crate::nmt::strip_end(y).to_vec()).collect()).collect()
        }
        TargetMemorySource::Generated => translate_sentences(model, docs, search, jobs)?,
    };
    let lm_reps = crate::parallel::map_ordered(docs, jobs, |d| model.lm_reps(&d.src))?;
    Ok(Stage2Data { docs: docs.to_vec(), mem_trg, lm_reps })
}

impl Stage2Data {
    fn batch(&self, i: usize) -> DocBatch<'_> {
        DocBatch {
            src: &self.docs[i].src,
            tgt: &self.docs[i].tgt,
            mem_trg: &self.mem_trg[i],
            lm_reps: Some(&self.lm_reps[i]),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

/// Document-model perplexity (pseudo-likelihood per target token).
pub fn document_perplexity(model: &DocModel, data: &Stage2Data) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0);
    for i in 0..data.docs.len() {
        let mut tape = Tape::with_params(&model.params);
        let l = doc_nll(&mut tape, model, &data.batch(i), &mut DropoutCtx::eval())?;
        total += tape.scalar(l.loss);
        n += l.tokens;
    }
    perplexity(total, n)
}

/// Stage 2: every document-model parameter except the frozen language model,
/// one document per update. Logs the warm-start dev perplexity as epoch 0.
pub fn train_stage2(
    model: &mut DocModel,
    train: &Stage2Data,
    dev: &Stage2Data,
    cfg: &TrainConfig,
    log: LogSink<'_>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("stage 2 training on an empty corpus"));
    }
    if let Some(d) = train.docs.iter().find(|d| d.is_empty()) {
        return Err(Error::invalid(format!("document {} has no sentences", d.id)));
    }
    model.params.freeze_prefix(LM_PREFIX);
    let (mut order_rng, mut drop_rng) = cfg.rngs(Stage::Two);
    let mut report = TrainReport::default();
    let mut best = (f64::INFINITY, 0, model.params.clone());
    if !dev.is_empty() {
        let start = Instant::now();
        let p = document_perplexity(model, dev)?;
        best.0 = p;
        let rec = EpochLog {
            stage: Stage::Two,
            epoch: 0,
            split: "dev",
            ppl: p,
            lr: 0.0,
            skipped: 0,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        log(&rec);
        report.logs.push(rec);
    }
    let mut order: Vec<usize> = (0..train.docs.len()).collect();
    for epoch in 1..=cfg.stage2_epochs {
        let start = Instant::now();
        let lr = lr_schedule(Stage::Two, epoch)?;
        order.shuffle(&mut order_rng);
        let mut ep = Epoch { nll: 0.0, tokens: 0, skipped: 0, steps: 0 };
        // doc_nll reads only the model's structure; values come from the tape
        let mut params = std::mem::take(&mut model.params);
        let mut result = Ok(());
        for &i in &order {
            let scale = 1.0 / train.docs[i].len() as f64;
            let drop_rng = &mut drop_rng;
            let batch = train.batch(i);
            let shape: &DocModel = model;
            result = update(&mut params, lr, cfg.clip, scale, &mut ep, |tape| {
                let mut drop = DropoutCtx::train(drop_rng, cfg.stage2_dropout);
                let l = doc_nll(tape, shape, &batch, &mut drop)?;
                Ok((l.loss, l.tokens))
            });
            if result.is_err() {
                break;
            }
        }
        model.params = params;
        result?;
        let train_ppl = finish_epoch(&ep)?;
        let rec = EpochLog {
            stage: Stage::Two,
            epoch,
            split: "train",
            ppl: train_ppl,
            lr,
            skipped: ep.skipped,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        log(&rec);
        report.logs.push(rec);
        let dev_ppl = if dev.is_empty() { None } else { Some(document_perplexity(model, dev)?) };
        if let Some(p) = dev_ppl {
            let rec = EpochLog {
                stage: Stage::Two,
                epoch,
                split: "dev",
                ppl: p,
                lr,
                skipped: 0,
                wall_secs: start.elapsed().as_secs_f64(),
            };
            log(&rec);
            report.logs.push(rec);
        }
        select_best(&mut best, dev_ppl, epoch, &model.params);
    }
    report.best_epoch = best.1;
    report.best_dev_ppl = best.0.is_finite().then_some(best.0);
    model.params = best.2;
    Ok(report)
}
