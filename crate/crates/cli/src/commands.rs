use std::path::{Path, PathBuf};
use std::time::Instant;

use docnmt::bcd::{bcd_decode, SearchMode};
use docnmt::checkpoint;
use docnmt::corpus::{
    build_vocab as build_vocabulary, encode_document, gen_synthetic as generate, load_documents,
    parse_source_documents, render_side, Document, SyntheticSpec, Vocabulary, RESERVED, UNK,
};
use docnmt::docnmt::{DocModel, DocModelConfig, MemorySelection, QuerySource};
use docnmt::layers::DropoutPlan;
use docnmt::metrics::{bleu_report, bootstrap_significance, consistency_score};
use docnmt::nmt::{Integration, SearchConfig};
use docnmt::parallel::map_ordered;
use docnmt::train::{
    document_perplexity, prepare_stage2, pretrain_sentence_lm, sentence_perplexity, train_stage1 as stage1,
    train_stage2 as stage2, EpochLog, SentenceLm, Stage2Data, TargetMemorySource, TrainConfig,
};
use docnmt::{Error, Result};

use crate::manifest::Manifest;
use crate::{
    BuildVocabArgs, Common, CorpusArgs, EvaluateArgs, GenSyntheticArgs, GradCheckArgs, Memories, Metric,
    PretrainLmArgs, Query, TargetMemory, TrainStage1Args, TrainStage2Args, TranslateArgs, Variant,
};

fn out_dir(common: &Common) -> Result<&Path> {
    std::fs::create_dir_all(&common.out).map_err(|e| Error::Io { path: common.out.clone(), source: e })?;
    if common.jobs == 0 {
        return Err(Error::Invalid("--jobs must be at least 1".into()));
    }
    Ok(&common.out)
}

fn manifest(name: &'static str, common: &Common) -> Manifest {
    let mut m = Manifest::new(name);
    m.set("seed", common.seed);
    m
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref().ok_or_else(|| Error::Invalid(format!("--{flag} is required here")))
}

/// Collects log lines for the log file; wall time goes to stderr only.
fn logger(lines: &mut Vec<String>) -> impl FnMut(&EpochLog) + '_ {
    move |r: &EpochLog| {
        eprintln!("{}\twall={:.3}", r.to_line(), r.wall_secs);
        lines.push(r.to_line());
    }
}

fn join_lines(lines: &[String]) -> String {
    lines.iter().map(|l| format!("{l}\n")).collect()
}

fn memories(m: Memories) -> MemorySelection {
    match m {
        Memories::Src => MemorySelection::Src,
        Memories::Trg => MemorySelection::Trg,
        Memories::Both => MemorySelection::Both,
        Memories::None => MemorySelection::None,
    }
}

fn integration(v: Variant) -> Integration {
    match v {
        Variant::Context => Integration::MemToContext,
        Variant::Output => Integration::MemToOutput,
    }
}

fn target_memory(t: TargetMemory) -> TargetMemorySource {
    match t {
        TargetMemory::Generated => TargetMemorySource::Generated,
        TargetMemory::Gold => TargetMemorySource::Gold,
    }
}

struct Vocabs {
    src: Vocabulary,
    tgt: Vocabulary,
}

impl Vocabs {
    fn load(src: &Path, tgt: &Path, m: &mut Manifest) -> Result<Self> {
        m.input(src)?;
        m.input(tgt)?;
        Ok(Vocabs { src: Vocabulary::load(src)?, tgt: Vocabulary::load(tgt)? })
    }

    fn check(&self, cfg: &DocModelConfig) -> Result<()> {
        if (self.src.len(), self.tgt.len()) != (cfg.nmt.src_vocab, cfg.nmt.tgt_vocab) {
            return Err(Error::Invalid(format!(
                "vocabularies have {}/{} entries but the model expects {}/{}",
                self.src.len(),
                self.tgt.len(),
                cfg.nmt.src_vocab,
                cfg.nmt.tgt_vocab
            )));
        }
        Ok(())
    }
}

fn load_pair(src: &Path, tgt: &Path, v: &Vocabs, lowercase: bool, m: &mut Manifest) -> Result<Vec<Document>> {
    m.input(src)?;
    m.input(tgt)?;
    Ok(load_documents(src, tgt, lowercase)?.iter().map(|d| encode_document(d, &v.src, &v.tgt)).collect())
}

fn load_corpus(c: &CorpusArgs, m: &mut Manifest) -> Result<(Vocabs, Vec<Document>, Vec<Document>)> {
    let v = Vocabs::load(&c.src_vocab, &c.tgt_vocab, m)?;
    let train = load_pair(&c.train_src, &c.train_tgt, &v, c.lowercase, m)?;
    let dev = match (&c.dev_src, &c.dev_tgt) {
        (Some(s), Some(t)) => load_pair(s, t, &v, c.lowercase, m)?,
        _ => Vec::new(),
    };
    Ok((v, train, dev))
}

/// Sentences of a one-sentence-per-line file, documents flattened.
fn sentences(path: &Path, lowercase: bool) -> Result<Vec<Vec<String>>> {
    Ok(parse_source_documents(&read(path)?, lowercase).into_iter().flatten().collect())
}

pub fn gen_synthetic(a: &GenSyntheticArgs) -> Result<()> {
    let dir = out_dir(&a.common)?;
    let spec = SyntheticSpec {
        n_docs: a.n_docs,
        sentences_per_doc: a.sentences_per_doc,
        min_len: a.min_len,
        max_len: a.max_len,
        content_vocab: a.content_vocab,
        n_ambiguous: a.n_ambiguous,
        ambiguous_prob: a.ambiguous_prob,
        seed: a.common.seed,
    };
    let docs = generate(&spec)?;
    let mut m = manifest("gen-synthetic", &a.common);
    m.write(dir, &format!("{}.src", a.name), render_side(docs.iter().map(|d| d.src.as_slice())).as_bytes())?;
    m.write(dir, &format!("{}.tgt", a.name), render_side(docs.iter().map(|d| d.tgt.as_slice())).as_bytes())?;
    m.finish(dir)
}

pub fn build_vocab(a: &BuildVocabArgs) -> Result<()> {
    let dir = out_dir(&a.common)?;
    let mut m = manifest("build-vocab", &a.common);
    m.input(&a.src)?;
    m.input(&a.tgt)?;
    let docs = load_documents(&a.src, &a.tgt, a.lowercase)?;
    let src = build_vocabulary(docs.iter().flat_map(|d| d.src.iter().map(|s| s.as_slice())), a.min_freq)?;
    let tgt = build_vocabulary(docs.iter().flat_map(|d| d.tgt.iter().map(|s| s.as_slice())), a.min_freq)?;
    m.write(dir, "src.vocab", src.to_text().as_bytes())?;
    m.write(dir, "tgt.vocab", tgt.to_text().as_bytes())?;
    println!("src.vocab\t{}\ntgt.vocab\t{}", src.len(), tgt.len());
    m.finish(dir)
}

pub fn pretrain_lm(a: &PretrainLmArgs) -> Result<()> {
    let dir = out_dir(&a.common)?;
    let mut m = manifest("pretrain-lm", &a.common);
    m.input(&a.src)?;
    m.input(&a.src_vocab)?;
    let vocab = Vocabulary::load(&a.src_vocab)?;
    let docs: Vec<Document> = parse_source_documents(&read(&a.src)?, a.lowercase)
        .iter()
        .enumerate()
        .map(|(i, d)| Document {
            id: format!("doc{}", i + 1),
            src: d.iter().map(|s| vocab.encode(s)).collect(),
            tgt: Vec::new(),
        })
        .collect();
    let cfg = TrainConfig {
        lm_epochs: a.epochs,
        batch_size: a.batch_size,
        clip: a.clip,
        seed: a.common.seed,
        ..Default::default()
    };
    let mut lm = SentenceLm::new(vocab.len(), a.embed, a.hidden, a.common.seed)?;
    let mut lines = Vec::new();
    pretrain_sentence_lm(&mut lm, &docs, &cfg, &mut logger(&mut lines))?;
    m.write(dir, "lm.ckpt", &checkpoint::lm_to_bytes(&lm))?;
    m.write(dir, "lm.log", join_lines(&lines).as_bytes())?;
    m.finish(dir)
}

pub fn train_stage1(a: &TrainStage1Args) -> Result<()> {
    let dir = out_dir(&a.common)?;
    let mut m = manifest("train-stage1", &a.common);
    let (v, train, dev) = load_corpus(&a.corpus, &mut m)?;
    let mut cfg = DocModelConfig::sentence_level(v.src.len(), v.tgt.len(), a.dim);
    cfg.lm_embed = a.lm_embed.unwrap_or(a.dim);
    cfg.lm_hidden = a.lm_hidden.unwrap_or(a.dim);
    cfg.doc_hidden = a.doc_hidden.unwrap_or(a.dim);
    cfg.query = match a.query {
        Query::Encoder => QuerySource::Encoder,
        Query::Lm => QuerySource::LmRep,
    };
    let tc = TrainConfig {
        stage1_epochs: a.epochs,
        batch_size: a.batch_size,
        clip: a.clip,
        stage1_dropout: DropoutPlan::uniform(a.dropout),
        seed: a.common.seed,
        ..Default::default()
    };
    let mut model = DocModel::new(cfg, a.common.seed)?;
    let mut lines = Vec::new();
    let report = stage1(&mut model, &train, &dev, &tc, &mut logger(&mut lines))?;
    lines.push(format!("best_epoch={}", report.best_epoch));
    m.write(dir, "stage1.ckpt", &checkpoint::to_bytes(&model))?;
    m.write(dir, "stage1.log", join_lines(&lines).as_bytes())?;
    m.finish(dir)
}

pub fn train_stage2(a: &TrainStage2Args) -> Result<()> {
    let dir = out_dir(&a.common)?;
    let mut m = manifest("train-stage2", &a.common);
    let (v, train, dev) = load_corpus(&a.corpus, &mut m)?;
    m.input(&a.model)?;
    let model = checkpoint::load(&a.model)?;
    v.check(&model.cfg)?;
    let mems = memories(a.memories);
    let mut model = model.reconfigure(integration(a.variant), mems, a.prev_trg)?;
    let needs_lm = mems.uses_src() || model.cfg.query == QuerySource::LmRep;
    match &a.lm {
        Some(p) => {
            m.input(p)?;
            checkpoint::load_lm(p)?.install(&mut model)?;
        }
        None if needs_lm => return Err(Error::Invalid("--lm is required for this memory configuration".into())),
        None => {}
    }
    let search = SearchConfig { beam: a.beam, max_len: a.max_len, ..Default::default() };
    let tc = TrainConfig {
        stage2_epochs: a.epochs,
        clip: a.clip,
        stage2_dropout: DropoutPlan { encoder: a.dropout_encoder, decoder: a.dropout_decoder, doc_rnn: a.dropout_doc },
        target_memory: target_memory(a.target_memory),
        search,
        seed: a.common.seed,
        ..Default::default()
    };
    let jobs = a.common.jobs;
    let train = prepare_stage2(&model, &train, tc.target_memory, &search, jobs)?;
    let dev = if dev.is_empty() {
        Stage2Data { docs: Vec::new(), mem_trg: Vec::new(), lm_reps: Vec::new() }
    } else {
        prepare_stage2(&model, &dev, TargetMemorySource::Generated, &search, jobs)?
    };
    let mut lines = Vec::new();
    let report = stage2(&mut model, &train, &dev, &tc, &mut logger(&mut lines))?;
    lines.push(format!("best_epoch={}", report.best_epoch));
    m.write(dir, "stage2.ckpt", &checkpoint::to_bytes(&model))?;
    m.write(dir, "stage2.log", join_lines(&lines).as_bytes())?;
    m.finish(dir)
}

/// An empty translation is written as the unknown token, since a blank line
/// separates documents.
fn render_sentence(vocab: &Vocabulary, ids: &[usize]) -> Vec<String> {
    if ids.is_empty() {
        vec![RESERVED[UNK].to_string()]
    } else {
        vocab.decode(ids)
    }
}

pub fn translate(a: &TranslateArgs) -> Result<()> {
    let dir = out_dir(&a.common)?;
    let mut m = manifest("translate", &a.common);
    let v = Vocabs::load(&a.src_vocab, &a.tgt_vocab, &mut m)?;
    m.input(&a.model)?;
    m.input(&a.src)?;
    let mut model = checkpoint::load(&a.model)?;
    v.check(&model.cfg)?;
    if a.variant.is_some() || a.memories.is_some() {
        let i = a.variant.map_or(model.cfg.integration, integration);
        let mem = a.memories.map_or(model.cfg.memories, memories);
        let prev = model.cfg.prev_trg && !mem.uses_trg();
        model = model.reconfigure(i, mem, prev)?;
    }
    let passes = if model.cfg.is_sentence_level() { 0 } else { a.passes };
    m.set("passes", passes);
    m.set("memories", model.cfg.memories.name());
    let search = SearchConfig { beam: a.beam, max_len: a.max_len, ..Default::default() };
    let docs: Vec<(String, Vec<Vec<usize>>)> = parse_source_documents(&read(&a.src)?, a.lowercase)
        .iter()
        .enumerate()
        .map(|(i, d)| (format!("doc{}", i + 1), d.iter().map(|s| v.src.encode(s)).collect()))
        .collect();
    let start = Instant::now();
    let outputs =
        map_ordered(&docs, a.common.jobs, |(id, src)| bcd_decode(&model, id, src, passes, &SearchMode::Beam(search)))?;
    eprintln!("translated {} documents\twall={:.3}", docs.len(), start.elapsed().as_secs_f64());
    let rendered: Vec<Vec<Vec<String>>> =
        outputs.iter().map(|o| o.words().iter().map(|s| render_sentence(&v.tgt, s)).collect()).collect();
    let mut audit = String::from("doc\tpass\tsentence\tchanged\told_score\tnew_score\n");
    for rec in outputs.iter().flat_map(|o| &o.audit) {
        audit.push_str(&rec.to_line());
        audit.push('\n');
    }
    m.write(dir, "translations.txt", render_side(rendered.iter().map(Vec::as_slice)).as_bytes())?;
    m.write(dir, "audit.tsv", audit.as_bytes())?;
    m.finish(dir)
}

fn aligned(cands: &[Vec<String>], refs: &[Vec<String>]) -> Result<()> {
    if cands.len() != refs.len() {
        return Err(Error::Invalid(format!("{} candidate sentences but {} references", cands.len(), refs.len())));
    }
    Ok(())
}

fn bleu_lines(order: usize, cands: &[Vec<String>], refs: &[Vec<String>]) -> Result<Vec<String>> {
    aligned(cands, refs)?;
    let r = bleu_report(cands, refs, order)?;
    let name = if order == 1 { "bleu1" } else { "bleu" };
    let mut lines = vec![format!("{name}\t{:.6}", 100.0 * r.score())];
    for n in 1..=order {
        lines.push(format!("p{n}\t{:.6}", r.precision(n)));
    }
    lines.push(format!("bp\t{:.6}", r.brevity_penalty()));
    Ok(lines)
}

fn model_perplexity(a: &EvaluateArgs, m: &mut Manifest) -> Result<Vec<String>> {
    let model_path = require(&a.model, "model")?;
    let v = Vocabs::load(require(&a.src_vocab, "src-vocab")?, require(&a.tgt_vocab, "tgt-vocab")?, m)?;
    m.input(model_path)?;
    let model = checkpoint::load(model_path)?;
    v.check(&model.cfg)?;
    let docs = load_pair(require(&a.src, "src")?, require(&a.reference, "ref")?, &v, a.lowercase, m)?;
    let ppl = if model.cfg.is_sentence_level() {
        sentence_perplexity(&model, &docs)?
    } else {
        let search = SearchConfig { beam: a.beam, max_len: a.max_len, ..Default::default() };
        let data = prepare_stage2(&model, &docs, target_memory(a.target_memory), &search, a.common.jobs)?;
        document_perplexity(&model, &data)?
    };
    Ok(vec![format!("ppl\t{ppl:.6}")])
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let dir = out_dir(&a.common)?;
    let mut m = manifest("evaluate", &a.common);
    let load = |flag: &Option<PathBuf>, name: &str, m: &mut Manifest| -> Result<Vec<Vec<String>>> {
        let p = require(flag, name)?;
        m.input(p)?;
        sentences(p, a.lowercase)
    };
    let (name, lines) = match a.metric {
        Metric::Bleu | Metric::Bleu1 => {
            let order = if a.metric == Metric::Bleu { 4 } else { 1 };
            let cands = load(&a.cand, "cand", &mut m)?;
            let refs = load(&a.reference, "ref", &mut m)?;
            (if order == 1 { "bleu1" } else { "bleu" }, bleu_lines(order, &cands, &refs)?)
        }
        Metric::Ppl => ("ppl", model_perplexity(a, &mut m)?),
        Metric::Consistency => {
            let src_path = require(&a.src, "src")?;
            let cand_path = require(&a.cand, "cand")?;
            m.input(src_path)?;
            m.input(cand_path)?;
            let src = parse_source_documents(&read(src_path)?, a.lowercase);
            let cand = parse_source_documents(&read(cand_path)?, a.lowercase);
            let shape = |d: &[Vec<Vec<String>>]| d.iter().map(Vec::len).collect::<Vec<_>>();
            if shape(&src) != shape(&cand) {
                return Err(Error::Invalid("source and candidate documents are not aligned".into()));
            }
            let pairs: Vec<Vec<(&[String], &[String])>> = src
                .iter()
                .zip(&cand)
                .map(|(s, c)| s.iter().zip(c).map(|(x, y)| (x.as_slice(), y.as_slice())).collect())
                .collect();
            let line = match consistency_score(&pairs) {
                Some(c) => format!("consistency\t{:.6}\t{}/{}", c.score(), c.consistent, c.total),
                None => "consistency\tundefined\t0/0".to_string(),
            };
            ("consistency", vec![line])
        }
        Metric::Significance => {
            let a_sys = load(&a.cand, "cand", &mut m)?;
            let b_sys = load(&a.cand_b, "cand-b", &mut m)?;
            let refs = load(&a.reference, "ref", &mut m)?;
            aligned(&a_sys, &refs)?;
            aligned(&b_sys, &refs)?;
            let r = bootstrap_significance(&a_sys, &b_sys, &refs, 4, a.resamples, a.common.seed)?;
            (
                "significance",
                vec![
                    format!("delta_bleu\t{:.6}", 100.0 * r.delta),
                    format!("p_value\t{:.6}", r.p_value),
                    format!("resamples\t{}", r.resamples),
                ],
            )
        }
    };
    let text = join_lines(&lines);
    print!("{text}");
    m.write(dir, &format!("eval-{name}.txt"), text.as_bytes())?;
    m.finish(dir)
}

pub fn grad_check(a: &GradCheckArgs) -> Result<()> {
    let dir = out_dir(&a.common)?;
    let mut m = manifest("grad-check", &a.common);
    m.set("eps", a.eps);
    let reports = docnmt::gradcheck::suite(a.common.seed, a.eps)?;
    let mut lines = Vec::new();
    let mut worst: f64 = 0.0;
    for (name, r) in &reports {
        let at = r.worst.as_ref().map_or(String::from("-"), |(p, i)| format!("{p}[{i}]"));
        lines.push(format!("{name}\t{:.3e}\t{}\t{at}", r.max_rel_error, r.checked));
        worst = worst.max(r.max_rel_error);
    }
    lines.push(format!("max\t{worst:.3e}"));
    let text = join_lines(&lines);
    print!("{text}");
    m.write(dir, "gradcheck.txt", text.as_bytes())?;
    m.finish(dir)?;
    if worst.is_nan() || worst > a.tolerance {
        return Err(Error::Numerical(format!("gradient check error {worst:.3e} exceeds {:.1e}", a.tolerance)));
    }
    Ok(())
}
