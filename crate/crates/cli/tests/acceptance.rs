//! Acceptance suite. Prints one PASS/FAIL line per check and exits non-zero
//! when an enforced check fails. The synthetic reproduction's accuracy, BLEU
//! and significance checks are reported but only enforced with
//! `DOCNMT_STRICT=1`.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use docnmt::bcd::{bcd_decode, SearchMode};
use docnmt::corpus::{
    ambiguous_accuracy, build_vocab, encode_document, gen_synthetic, Document, SyntheticSpec, TextDocument, END,
};
use docnmt::docnmt::{DocContext, DocModel, DocModelConfig, MemorySelection};
use docnmt::gradcheck;
use docnmt::memory::mem_read_values;
use docnmt::metrics::{bleu, bleu1, bootstrap_significance, consistency_score};
use docnmt::nmt::{ContextVectors, Decoder, Integration, SearchConfig};
use docnmt::train::{
    lr_schedule, prepare_stage2, pretrain_sentence_lm, train_stage1, train_stage2, EpochLog, SentenceLm, Stage,
    TrainConfig,
};
use docnmt::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 1;

struct Suite {
    enforced_failures: Vec<String>,
    reported_failures: Vec<String>,
    strict: bool,
}

impl Suite {
    fn check(&mut self, id: &str, what: &str, pass: bool, detail: String) {
        self.record(id, what, pass, detail, true);
    }

    fn report(&mut self, id: &str, what: &str, pass: bool, detail: String) {
        self.record(id, what, pass, detail, self.strict);
    }

    fn record(&mut self, id: &str, what: &str, pass: bool, detail: String, enforced: bool) {
        let tag = match (pass, enforced) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (reported)",
        };
        println!("[{tag}] {id:<4} {what}: {detail}");
        if !pass {
            let line = format!("{id} {what}");
            if enforced {
                self.enforced_failures.push(line);
            } else {
                self.reported_failures.push(line);
            }
        }
    }
}

fn scramble(model: &mut DocModel, bound: f64, rng: &mut ChaCha8Rng) {
    for id in model.params.ids().collect::<Vec<_>>() {
        let t = Tensor::uniform(model.params.get(id).shape(), bound, rng);
        *model.params.get_mut(id) = t;
    }
}

fn random_model(seed: u64, integration: Integration, src_v: usize, tgt_v: usize, dim: usize, bound: f64) -> DocModel {
    let mut cfg = DocModelConfig::sentence_level(src_v, tgt_v, dim);
    cfg.memories = MemorySelection::Both;
    cfg.integration = integration;
    cfg.lm_hidden = (dim / 2).max(1);
    cfg.doc_hidden = (dim / 2).max(1);
    let mut m = DocModel::new(cfg, seed).unwrap();
    scramble(&mut m, bound, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xabcd));
    m
}

fn random_sentence(rng: &mut ChaCha8Rng, vocab: usize, min: usize, max: usize) -> Vec<usize> {
    let n = rng.gen_range(min..=max);
    (0..n).map(|_| rng.gen_range(3..vocab)).collect()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
}

// ---------------------------------------------------------------- 1

fn gradient_check(s: &mut Suite) {
    let start = Instant::now();
    let reports = gradcheck::suite(SEED, 1e-5).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let (worst_name, worst) =
        reports
            .iter()
            .map(|(n, r)| (n.as_str(), r.max_rel_error))
            .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let has_doc = reports.iter().any(|(n, _)| n.starts_with("document loss"));
    s.check(
        "1",
        "gradient check, every layer and the dual-memory document loss",
        worst <= 1e-4 && has_doc && secs < 60.0,
        format!(
            "{} checks, max rel err {worst:.2e} ({worst_name}) <= 1e-4 at eps 1e-5, {secs:.1}s < 60s",
            reports.len()
        ),
    );
}

// ---------------------------------------------------------------- 2

fn stage1_equivalence(s: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 2);
    for (k, integration) in [Integration::MemToContext, Integration::MemToOutput].into_iter().enumerate() {
        let model = random_model(20 + k as u64, integration, 12, 11, 8, 0.5);
        let src_dim = 2 * model.cfg.doc_hidden;
        let zero =
            ContextVectors { src: Some(vec![0.0; src_dim]), trg: Some(vec![0.0; model.cfg.nmt.hidden]), prev: None };
        let (doc, sent) = (model.decoder(), model.sentence_decoder());
        let mut worst: f64 = 0.0;
        let mut tokens = 0;
        for _ in 0..50 {
            let x = random_sentence(&mut rng, 12, 1, 7);
            let mut y = random_sentence(&mut rng, 11, 0, 6);
            y.push(END);
            let a = doc.score(&x, &y, &zero).unwrap();
            let b = sent.score(&x, &y, &ContextVectors::default()).unwrap();
            tokens += y.len();
            for (p, q) in a.log_probs.iter().zip(&b.log_probs) {
                worst = worst.max((p - q).abs());
            }
        }
        s.check(
            "2",
            &format!("zero memory readings equal the sentence model ({integration:?})"),
            worst <= 1e-9,
            format!("50 sentences, {tokens} tokens, max |dlogp| {worst:.1e} <= 1e-9"),
        );
    }
}

// ---------------------------------------------------------------- 3

fn masked_softmax_oracle(scores: &[f64], exclude: Option<usize>) -> Vec<f64> {
    let keep = |i: usize| Some(i) != exclude;
    let m = (0..scores.len()).filter(|&i| keep(i)).map(|i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = (0..scores.len()).map(|i| if keep(i) { (scores[i] - m).exp() } else { 0.0 }).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn memory_read_contract(s: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 3);
    let mut violations = Vec::new();
    let (mut worst_sum, mut worst_oracle): (f64, f64) = (0.0, 0.0);
    for case in 0..1000 {
        let n = rng.gen_range(1..=9);
        let d = rng.gen_range(1..=6);
        let cells: Vec<Vec<f64>> = (0..n).map(|_| random_vec(&mut rng, d, 3.0)).collect();
        let q = random_vec(&mut rng, d, 3.0);
        let exclude = if n > 1 && rng.gen_bool(0.6) { Some(rng.gen_range(0..n)) } else { None };
        let (p, out) = mem_read_values(&cells, &q, exclude).unwrap();
        if p.iter().any(|&v| v < 0.0) {
            violations.push(format!("case {case}: negative weight"));
        }
        worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
        if let Some(t) = exclude {
            if p[t] != 0.0 {
                violations.push(format!("case {case}: excluded weight {}", p[t]));
            }
        }
        for j in 0..d {
            let kept = (0..n).filter(|&i| Some(i) != exclude).map(|i| cells[i][j]);
            let (lo, hi) = kept.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
            if out[j] < lo - slack || out[j] > hi + slack {
                violations.push(format!("case {case}: coordinate {j} outside [{lo}, {hi}]"));
            }
        }
        let scores: Vec<f64> = cells.iter().map(|c| c.iter().zip(&q).map(|(a, b)| a * b).sum()).collect();
        for (a, b) in p.iter().zip(masked_softmax_oracle(&scores, exclude)) {
            worst_oracle = worst_oracle.max((a - b).abs());
        }
    }
    s.check(
        "3",
        "memory read contract on 1000 random memories",
        violations.is_empty() && worst_sum <= 1e-9 && worst_oracle <= 1e-12,
        format!(
            "{} violations, max |sum p - 1| {worst_sum:.1e} <= 1e-9, max |p - oracle| {worst_oracle:.1e}{}",
            violations.len(),
            violations.first().map(|v| format!(", first: {v}")).unwrap_or_default()
        ),
    );
}

// ---------------------------------------------------------------- 4

/// Every output sequence the search may produce, best by `dec.score`.
fn enumerate_best(
    dec: &Decoder<'_>,
    x: &[usize],
    ctx: &ContextVectors,
    search: &SearchConfig,
    vocab: usize,
) -> (Vec<usize>, f64) {
    let allowed = search.allowed(vocab);
    let words: Vec<usize> = allowed.iter().copied().filter(|&t| t != END).collect();
    let mut best: (Vec<usize>, f64) = (Vec::new(), f64::NEG_INFINITY);
    let mut prefixes: Vec<Vec<usize>> = vec![Vec::new()];
    for len in 1..=search.max_len {
        let mut next = Vec::new();
        for p in &prefixes {
            let mut ended = p.clone();
            ended.push(END);
            let mut outs = vec![ended];
            for &w in &words {
                let mut q = p.clone();
                q.push(w);
                if len == search.max_len {
                    outs.push(q);
                } else {
                    next.push(q);
                }
            }
            for y in outs {
                let sc = dec.score(x, &y, ctx).unwrap().score();
                if sc > best.1 {
                    best = (y, sc);
                }
            }
        }
        prefixes = next;
    }
    best
}

fn search_contracts(s: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 4);

    let mut mismatches = 0;
    for case in 0..200u64 {
        let model = random_model(100 + case, Integration::MemToContext, 9, 8, 6, 0.8);
        let x = random_sentence(&mut rng, 9, 1, 6);
        let search = SearchConfig { beam: 1, max_len: 12, allow_unk: false };
        let ctx = ContextVectors::default();
        let dec = model.sentence_decoder();
        let (g, b) = (dec.greedy(&x, &ctx, &search).unwrap(), dec.beam(&x, &ctx, &search).unwrap());
        if g.tokens != b.tokens || g.score != b.score {
            mismatches += 1;
        }
    }
    s.check("4a", "beam 1 equals greedy", mismatches == 0, format!("200 random models, {mismatches} mismatches"));

    let mut mismatches = 0;
    let mut worst: f64 = 0.0;
    for case in 0..60u64 {
        let model = random_model(300 + case, Integration::MemToOutput, 7, 6, 5, 1.5);
        let x = random_sentence(&mut rng, 7, 1, 4);
        let search = SearchConfig { beam: 18, max_len: 3, allow_unk: false };
        let ctx = ContextVectors::default();
        let dec = model.sentence_decoder();
        let b = dec.beam(&x, &ctx, &search).unwrap();
        let (y, sc) = enumerate_best(&dec, &x, &ctx, &search, 6);
        worst = worst.max((b.score - sc).abs());
        if b.tokens != y {
            mismatches += 1;
        }
    }
    s.check(
        "4b",
        "beam 18 equals exhaustive enumeration (vocab 6, max_len 3)",
        mismatches == 0 && worst <= 1e-12,
        format!("60 random models, {mismatches} mismatches, max score gap {worst:.1e}"),
    );

    let search = SearchConfig { beam: 1, max_len: 3, allow_unk: false };
    let (mut records, mut decreases, mut replay_mismatch) = (0, 0, 0);
    for case in 0..100u64 {
        let integration = if case % 2 == 0 { Integration::MemToContext } else { Integration::MemToOutput };
        let model = random_model(500 + case, integration, 7, 6, 4, 1.5);
        let n = rng.gen_range(2..=3);
        let src: Vec<Vec<usize>> = (0..n).map(|_| random_sentence(&mut rng, 7, 1, 3)).collect();
        let out = bcd_decode(&model, "d", &src, 2, &SearchMode::Exhaustive(search)).unwrap();
        for r in &out.audit {
            records += 1;
            if r.new_score < r.old_score {
                decreases += 1;
            }
        }
        let sent = model.sentence_decoder();
        let start: Vec<Vec<usize>> =
            src.iter().map(|x| enumerate_best(&sent, x, &ContextVectors::default(), &search, 6).0).collect();
        let dec = model.decoder();
        let mut dc = DocContext::new(&model, &src, start).unwrap();
        for _pass in 0..2 {
            for (t, x) in src.iter().enumerate() {
                let ctx = dc.context(t).unwrap();
                let old = dc.translation(t).to_vec();
                let old_score = dec.score(x, &old, &ctx).unwrap().score();
                let (y, sc) = enumerate_best(&dec, x, &ctx, &search, 6);
                if sc < old_score {
                    decreases += 1;
                }
                if y != old && sc > old_score {
                    dc.set_translation(t, y).unwrap();
                }
            }
        }
        if dc.translations() != out.tokens.as_slice() {
            replay_mismatch += 1;
        }
    }
    s.check(
        "4c",
        "coordinate descent with exhaustive search never lowers the updated sentence's probability",
        decreases == 0 && replay_mismatch == 0,
        format!("100 random documents, {records} updates, {decreases} decreases, {replay_mismatch} replay mismatches"),
    );
}

// ---------------------------------------------------------------- 5

fn bleu_oracle(cands: &[Vec<u8>], refs: &[Vec<u8>], max_n: usize) -> f64 {
    let (mut c_len, mut r_len) = (0usize, 0usize);
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    for (c, r) in cands.iter().zip(refs) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=max_n {
            if c.len() < n {
                continue;
            }
            let grams: Vec<&[u8]> = (0..=c.len() - n).map(|i| &c[i..i + n]).collect();
            total[n - 1] += grams.len();
            let mut seen: Vec<&[u8]> = Vec::new();
            for g in &grams {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g);
                let in_c = grams.iter().filter(|h| *h == g).count();
                let in_r = if r.len() < n { 0 } else { (0..=r.len() - n).filter(|&i| &r[i..i + n] == *g).count() };
                matched[n - 1] += in_c.min(in_r);
            }
        }
    }
    if c_len == 0 || (0..max_n).any(|i| matched[i] == 0) {
        return 0.0;
    }
    let mut prod = 1.0;
    for i in 0..max_n {
        prod *= matched[i] as f64 / total[i] as f64;
    }
    let bp = if c_len < r_len { (1.0 - r_len as f64 / c_len as f64).exp() } else { 1.0 };
    bp * prod.powf(1.0 / max_n as f64)
}

fn bleu_checks(s: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 5);
    let (mut worst, mut worst1, mut nonzero): (f64, f64, usize) = (0.0, 0.0, 0);
    for _ in 0..100 {
        let n = rng.gen_range(1..=6);
        let alphabet = rng.gen_range(2..=4u8);
        let sent = |rng: &mut ChaCha8Rng, min: usize| -> Vec<u8> {
            let len = rng.gen_range(min..=10);
            (0..len).map(|_| rng.gen_range(0..alphabet)).collect()
        };
        let cands: Vec<Vec<u8>> = (0..n).map(|_| sent(&mut rng, 0)).collect();
        let refs: Vec<Vec<u8>> = (0..n).map(|_| sent(&mut rng, 1)).collect();
        let b = bleu(&cands, &refs).unwrap();
        let o = bleu_oracle(&cands, &refs, 4);
        nonzero += (o > 0.0) as usize;
        worst = worst.max((b - o).abs());
        worst1 = worst1.max((bleu1(&cands, &refs).unwrap() - bleu_oracle(&cands, &refs, 1)).abs());
    }
    s.check(
        "5a",
        "BLEU equals a brute-force oracle on 100 random corpora",
        worst <= 1e-12 && worst1 <= 1e-12,
        format!("{nonzero} non-zero scores, max |BLEU - oracle| {worst:.1e}, BLEU-1 {worst1:.1e} <= 1e-12"),
    );
    let toks = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    let c = vec![toks("the the the the the the the")];
    let r = vec![toks("the cat is on the mat")];
    let b1 = bleu1(&c, &r).unwrap();
    s.check("5b", "clipped unigram precision case", b1 == 2.0 / 7.0, format!("BLEU-1 = {b1:?}, expected 2/7 exactly"));
}

// ---------------------------------------------------------------- 6, 8, 10

struct Experiment {
    snmt_acc: f64,
    both_acc: f64,
    snmt_bleu: f64,
    both_bleu: f64,
    snmt_cons: f64,
    both_cons: f64,
    lm_ppl: Vec<f64>,
    snmt_out: Vec<Vec<String>>,
    both_out: Vec<Vec<String>>,
    refs: Vec<Vec<String>>,
    secs: f64,
}

fn encode_all(
    docs: &[TextDocument],
    sv: &docnmt::corpus::Vocabulary,
    tv: &docnmt::corpus::Vocabulary,
) -> Vec<Document> {
    docs.iter().map(|d| encode_document(d, sv, tv)).collect()
}

fn synthetic_experiment() -> Experiment {
    let start = Instant::now();
    let spec = SyntheticSpec {
        n_docs: 200,
        sentences_per_doc: 8,
        content_vocab: 40,
        n_ambiguous: 6,
        seed: SEED,
        ..Default::default()
    };
    let train = gen_synthetic(&spec).unwrap();
    let dev = gen_synthetic(&SyntheticSpec { n_docs: 20, seed: SEED + 1000, ..spec.clone() }).unwrap();
    let test = gen_synthetic(&SyntheticSpec { n_docs: 50, seed: SEED + 2000, ..spec.clone() }).unwrap();
    let sv = build_vocab(train.iter().flat_map(|d| d.src.iter().map(|s| s.as_slice())), 5).unwrap();
    let tv = build_vocab(train.iter().flat_map(|d| d.tgt.iter().map(|s| s.as_slice())), 5).unwrap();
    let (tr, de, te) = (encode_all(&train, &sv, &tv), encode_all(&dev, &sv, &tv), encode_all(&test, &sv, &tv));

    let tc = TrainConfig {
        stage1_epochs: 8,
        stage2_epochs: 6,
        search: SearchConfig { beam: 5, max_len: 20, allow_unk: false },
        seed: SEED,
        ..Default::default()
    };
    let mut quiet = |_: &EpochLog| {};
    let mut snmt = DocModel::new(DocModelConfig::sentence_level(sv.len(), tv.len(), 32), SEED).unwrap();
    train_stage1(&mut snmt, &tr, &de, &tc, &mut quiet).unwrap();
    let mut lm = SentenceLm::new(sv.len(), 32, 32, SEED).unwrap();
    pretrain_sentence_lm(&mut lm, &tr, &tc, &mut quiet).unwrap();
    let mut both = snmt.clone().reconfigure(Integration::MemToContext, MemorySelection::Both, false).unwrap();
    lm.install(&mut both).unwrap();
    let d_tr = prepare_stage2(&both, &tr, tc.target_memory, &tc.search, 1).unwrap();
    let d_de = prepare_stage2(&both, &de, tc.target_memory, &tc.search, 1).unwrap();
    train_stage2(&mut both, &d_tr, &d_de, &tc, &mut quiet).unwrap();

    let lex = spec.lexicon();
    let mode = SearchMode::Beam(SearchConfig { beam: 5, max_len: 20, allow_unk: false });
    let run = |m: &DocModel, passes: usize| {
        let (mut ok, mut tot) = (0, 0);
        let mut flat = Vec::new();
        let mut docs = Vec::new();
        for (d, td) in te.iter().zip(&test) {
            let out = bcd_decode(m, &d.id, &d.src, passes, &mode).unwrap();
            let words: Vec<Vec<String>> = out.words().iter().map(|w| tv.decode(w)).collect();
            let (a, b) = ambiguous_accuracy(&lex, &td.src, &words, &td.tgt);
            ok += a;
            tot += b;
            flat.extend(words.iter().cloned());
            docs.push(words);
        }
        let pairs: Vec<Vec<(&[String], &[String])>> = test
            .iter()
            .zip(&docs)
            .map(|(td, c)| td.src.iter().zip(c).map(|(x, y)| (x.as_slice(), y.as_slice())).collect())
            .collect();
        let cons = consistency_score(&pairs).map_or(0.0, |c| c.score());
        (ok as f64 / tot.max(1) as f64, flat, cons)
    };
    let refs: Vec<Vec<String>> = test.iter().flat_map(|d| d.tgt.iter().cloned()).collect();
    let (snmt_acc, snmt_out, snmt_cons) = run(&snmt, 0);
    let (both_acc, both_out, both_cons) = run(&both, 1);
    Experiment {
        snmt_acc,
        both_acc,
        snmt_bleu: 100.0 * bleu(&snmt_out, &refs).unwrap(),
        both_bleu: 100.0 * bleu(&both_out, &refs).unwrap(),
        snmt_cons,
        both_cons,
        lm_ppl: lm.ppl,
        snmt_out,
        both_out,
        refs,
        secs: start.elapsed().as_secs_f64(),
    }
}

fn synthetic_checks(s: &mut Suite) -> Experiment {
    let e = synthetic_experiment();
    s.check(
        "6a",
        "S-NMT ambiguous-token accuracy in [40%, 65%]",
        (0.40..=0.65).contains(&e.snmt_acc),
        format!("{:.1}%", 100.0 * e.snmt_acc),
    );
    s.report(
        "6b",
        "both memories (Memory-to-Context) ambiguous-token accuracy >= 75%",
        e.both_acc >= 0.75,
        format!("{:.1}%", 100.0 * e.both_acc),
    );
    s.report(
        "6c",
        "BLEU(+both) >= BLEU(S-NMT) + 2",
        e.both_bleu >= e.snmt_bleu + 2.0,
        format!("{:.2} vs {:.2}", e.both_bleu, e.snmt_bleu),
    );
    s.check(
        "6d",
        "consistency(+both) > consistency(S-NMT)",
        e.both_cons > e.snmt_cons,
        format!("{:.4} vs {:.4}", e.both_cons, e.snmt_cons),
    );
    s.check("6e", "synthetic reproduction runtime <= 30 min", e.secs <= 1800.0, format!("{:.1}s, seed {SEED}", e.secs));
    e
}

fn lm_checks(s: &mut Suite, e: &Experiment) {
    let p = &e.lm_ppl;
    let ok = p.len() >= 4 && p[..4].windows(2).all(|w| w[1] <= w[0]);
    let shown: Vec<String> = p.iter().map(|v| format!("{v:.4}")).collect();
    s.check(
        "8",
        "LM training perplexity non-increasing over the first 3 epochs",
        ok,
        format!("[{}]", shown.join(", ")),
    );
}

fn significance_checks(s: &mut Suite, e: &Experiment) {
    let same = bootstrap_significance(&e.snmt_out, &e.snmt_out, &e.refs, 4, 1000, SEED).unwrap();
    s.check(
        "10a",
        "bootstrap: identical systems are not significant",
        same.p_value >= 0.05,
        format!("p = {:.3}", same.p_value),
    );
    let pair = bootstrap_significance(&e.snmt_out, &e.both_out, &e.refs, 4, 1000, SEED).unwrap();
    s.report(
        "10b",
        "bootstrap: +both vs S-NMT significant",
        pair.p_value < 0.05,
        format!("p = {:.3}, delta BLEU {:+.2}", pair.p_value, 100.0 * pair.delta),
    );
}

// ---------------------------------------------------------------- 7

fn schedule_checks(s: &mut Suite) {
    let got = [
        lr_schedule(Stage::One, 4).unwrap(),
        lr_schedule(Stage::One, 5).unwrap(),
        lr_schedule(Stage::Two, 1).unwrap(),
        lr_schedule(Stage::Two, 2).unwrap(),
    ];
    s.check(
        "7",
        "learning-rate schedule",
        got == [0.1, 0.05, 0.08, 0.072],
        format!("stage 1 epochs 4/5 = {:?}/{:?}, stage 2 epochs 1/2 = {:?}/{:?}", got[0], got[1], got[2], got[3]),
    );
}

// ---------------------------------------------------------------- 9

fn run_cli(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_docnmt"))
        .args(args)
        .args(["--out", dir.to_str().unwrap(), "--seed", "5", "--jobs", "1"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn cli_pipeline(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
    run_cli(dir, &["gen-synthetic", "--n-docs", "12", "--sentences-per-doc", "4", "--name", "train"]);
    run_cli(
        dir,
        &["gen-synthetic", "--n-docs", "3", "--sentences-per-doc", "4", "--name", "dev", "--content-vocab", "40"],
    );
    run_cli(dir, &["build-vocab", "--src", &p("train.src"), "--tgt", &p("train.tgt"), "--min-freq", "1"]);
    run_cli(
        dir,
        &[
            "pretrain-lm",
            "--src",
            &p("train.src"),
            "--src-vocab",
            &p("src.vocab"),
            "--embed",
            "6",
            "--hidden",
            "6",
            "--epochs",
            "2",
        ],
    );
    let corpus = [
        "--train-src",
        &p("train.src"),
        "--train-tgt",
        &p("train.tgt"),
        "--dev-src",
        &p("dev.src"),
        "--dev-tgt",
        &p("dev.tgt"),
        "--src-vocab",
        &p("src.vocab"),
        "--tgt-vocab",
        &p("tgt.vocab"),
    ];
    let mut s1 = vec!["train-stage1", "--dim", "6", "--epochs", "2"];
    s1.extend(corpus.iter().copied());
    run_cli(dir, &s1);
    let stage1 = p("stage1.ckpt");
    let lm = p("lm.ckpt");
    let mut s2 =
        vec!["train-stage2", "--model", &stage1, "--lm", &lm, "--epochs", "2", "--beam", "2", "--max-len", "10"];
    s2.extend(corpus.iter().copied());
    run_cli(dir, &s2);
    run_cli(
        dir,
        &[
            "translate",
            "--model",
            &p("stage2.ckpt"),
            "--src",
            &p("dev.src"),
            "--src-vocab",
            &p("src.vocab"),
            "--tgt-vocab",
            &p("tgt.vocab"),
            "--passes",
            "2",
            "--beam",
            "2",
            "--max-len",
            "10",
        ],
    );
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn cli_determinism(s: &mut Suite) {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (fa, fb) = (cli_pipeline(a.path()), cli_pipeline(b.path()));
    let differing: Vec<&String> = fa.keys().filter(|k| fb.get(*k) != fa.get(*k)).collect();
    let ckpts = fa.keys().filter(|k| k.ends_with(".ckpt")).count();
    s.check(
        "9",
        "CLI runs with the same seed and --jobs 1 are byte-identical",
        fa.keys().eq(fb.keys()) && differing.is_empty() && ckpts == 3,
        format!("{} files ({ckpts} checkpoints) compared, {} differ {:?}", fa.len(), differing.len(), differing),
    );
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut s = Suite {
        enforced_failures: Vec::new(),
        reported_failures: Vec::new(),
        strict: std::env::var("DOCNMT_STRICT").is_ok_and(|v| v == "1"),
    };
    let start = Instant::now();
    gradient_check(&mut s);
    stage1_equivalence(&mut s);
    memory_read_contract(&mut s);
    search_contracts(&mut s);
    bleu_checks(&mut s);
    let e = synthetic_checks(&mut s);
    schedule_checks(&mut s);
    lm_checks(&mut s, &e);
    cli_determinism(&mut s);
    significance_checks(&mut s, &e);
    println!(
        "acceptance: {} enforced failures, {} reported failures, {:.1}s",
        s.enforced_failures.len(),
        s.reported_failures.len(),
        start.elapsed().as_secs_f64()
    );
    if !s.enforced_failures.is_empty() {
        eprintln!("failed: {:?}", s.enforced_failures);
        std::process::exit(1);
    }
}
