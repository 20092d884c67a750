use std::path::Path;

use docnmt::checkpoint;
use docnmt::corpus::{build_vocab, parse_documents, render_side, TextDocument, Vocabulary};
use docnmt::docnmt::{DocModel, DocModelConfig, MemorySelection};
use docnmt::memory::mem_read_values;
use docnmt::metrics::{aligned_index, bleu, bleu1, consistency_score};
use docnmt::nmt::Integration;
use docnmt::train::{lr_schedule, Stage};
use proptest::prelude::*;

fn word() -> impl Strategy<Value = String> {
    "[a-e]{1,3}"
}

fn sentence(min: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(word(), min..8)
}

fn document() -> impl Strategy<Value = (Vec<Vec<String>>, Vec<Vec<String>>)> {
    (1usize..5).prop_flat_map(|n| (prop::collection::vec(sentence(1), n), prop::collection::vec(sentence(1), n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bleu_is_bounded(c in prop::collection::vec(sentence(0), 1..6), r in prop::collection::vec(sentence(1), 6)) {
        let r = &r[..c.len()];
        let b = bleu(&c, r).unwrap();
        let b1 = bleu1(&c, r).unwrap();
        prop_assert!((0.0..=1.0).contains(&b));
        prop_assert!((0.0..=1.0).contains(&b1));
    }

    #[test]
    fn bleu_of_the_reference_is_one(r in prop::collection::vec(sentence(4), 1..6)) {
        prop_assert!((bleu(&r, &r).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((bleu1(&r, &r).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn corpus_text_round_trips(docs in prop::collection::vec(document(), 1..5)) {
        let docs: Vec<TextDocument> = docs
            .into_iter()
            .enumerate()
            .map(|(i, (src, tgt))| TextDocument { id: format!("doc{}", i + 1), src, tgt })
            .collect();
        let s = render_side(docs.iter().map(|d| d.src.as_slice()));
        let t = render_side(docs.iter().map(|d| d.tgt.as_slice()));
        let back = parse_documents(&s, &t, false, Path::new("s"), Path::new("t")).unwrap();
        prop_assert_eq!(back, docs);
    }

    #[test]
    fn vocabulary_text_round_trips(sents in prop::collection::vec(sentence(1), 1..10), min_freq in 1usize..4) {
        let v = build_vocab(sents.iter().map(|s| s.as_slice()), min_freq).unwrap();
        let back = Vocabulary::from_text(&v.to_text(), Path::new("v")).unwrap();
        prop_assert_eq!(back.len(), v.len());
        for i in 0..v.len() {
            prop_assert_eq!(back.token(i), v.token(i));
            prop_assert_eq!(back.count(i), v.count(i));
        }
        for s in &sents {
            prop_assert_eq!(back.decode(&back.encode(s)).len(), s.len());
        }
    }

    #[test]
    fn memory_reads_are_convex(
        cells in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 3), 2..7),
        q in prop::collection::vec(-50.0f64..50.0, 3),
        ex in 0usize..7,
    ) {
        let exclude = Some(ex % cells.len());
        let (p, out) = mem_read_values(&cells, &q, exclude).unwrap();
        prop_assert_eq!(p[ex % cells.len()], 0.0);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for j in 0..3 {
            let kept: Vec<f64> = (0..cells.len()).filter(|&i| Some(i) != exclude).map(|i| cells[i][j]).collect();
            let lo = kept.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = kept.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out[j] >= lo - 1e-9 && out[j] <= hi + 1e-9);
        }
    }

    #[test]
    fn aligned_positions_stay_in_range(i in 0usize..40, extra in 1usize..40, cand in 1usize..60) {
        let src_len = i + extra;
        prop_assert!(aligned_index(i, src_len, cand) < cand);
    }

    #[test]
    fn consistency_is_a_fraction(docs in prop::collection::vec(prop::collection::vec((sentence(1), sentence(1)), 1..5), 1..4)) {
        let pairs: Vec<Vec<(&[String], &[String])>> =
            docs.iter().map(|d| d.iter().map(|(s, c)| (s.as_slice(), c.as_slice())).collect()).collect();
        if let Some(c) = consistency_score(&pairs) {
            prop_assert!(c.consistent <= c.total);
            prop_assert!((0.0..=1.0).contains(&c.score()));
        }
        let identity: Vec<Vec<(&[String], &[String])>> =
            docs.iter().map(|d| d.iter().map(|(s, _)| (s.as_slice(), s.as_slice())).collect()).collect();
        if let Some(c) = consistency_score(&identity) {
            prop_assert_eq!(c.consistent, c.total);
        }
    }

    #[test]
    fn learning_rates_decay(epoch in 1usize..60) {
        for stage in [Stage::Lm, Stage::One, Stage::Two] {
            let (a, b) = (lr_schedule(stage, epoch).unwrap(), lr_schedule(stage, epoch + 1).unwrap());
            prop_assert!(b <= a && b > 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoints_round_trip(seed in 0u64..1000, dim in 2usize..6, output in any::<bool>(), mem in 0usize..4) {
        let mut cfg = DocModelConfig::sentence_level(9, 7, dim);
        cfg.integration = if output { Integration::MemToOutput } else { Integration::MemToContext };
        cfg.memories = [MemorySelection::None, MemorySelection::Src, MemorySelection::Trg, MemorySelection::Both][mem];
        cfg.doc_hidden = dim + 1;
        let m = DocModel::new(cfg, seed).unwrap();
        let bytes = checkpoint::to_bytes(&m);
        let back = checkpoint::from_bytes(&bytes, Path::new("m")).unwrap();
        prop_assert_eq!(&back.cfg, &m.cfg);
        prop_assert_eq!(&back.params, &m.params);
        prop_assert_eq!(checkpoint::to_bytes(&back), bytes);
    }
}
