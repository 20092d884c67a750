//! Vocabularies, document-aligned parallel corpora and the synthetic
//! document-consistency corpus.
//!
//! On disk a corpus is a pair of UTF-8 files with one sentence per line and a
//! blank line between documents; blank lines must coincide in both files.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const UNK: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const RESERVED: [&str; 3] = ["<unk>", "<s>", "</s>"];

/// Default rare-word threshold: tokens seen fewer times map to `<unk>`.
pub const DEFAULT_MIN_FREQ: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<usize>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_entries(entries: Vec<(String, usize)>) -> Result<Self> {
        let mut v = Vocabulary { tokens: Vec::new(), counts: Vec::new(), index: HashMap::new() };
        for tok in RESERVED {
            v.push(tok.to_string(), 0);
        }
        for (tok, count) in entries {
            if v.index.contains_key(&tok) {
                return Err(Error::invalid(format!("duplicate vocabulary entry {tok}")));
            }
            v.push(tok, count);
        }
        Ok(v)
    }

    fn push(&mut self, tok: String, count: usize) {
        self.index.insert(tok.clone(), self.tokens.len());
        self.tokens.push(tok);
        self.counts.push(count);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn count(&self, id: usize) -> usize {
        self.counts[id]
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// One `token<TAB>count` line per non-reserved entry, in id order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for i in RESERVED.len()..self.len() {
            out.push_str(&format!("{}\t{}\n", self.tokens[i], self.counts[i]));
        }
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fmt = |msg: &str| Error::Format { path: path.to_path_buf(), line: n + 1, msg: msg.to_string() };
            let (tok, count) = line.split_once('\t').ok_or_else(|| fmt("expected token<TAB>count"))?;
            let count = count.trim().parse().map_err(|_| fmt("count is not an integer"))?;
            entries.push((tok.to_string(), count));
        }
        Self::from_entries(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

/// Builds a vocabulary: reserved ids first, then tokens with count at least
/// `min_freq` by descending count, ties broken lexicographically.
pub fn build_vocab<'a, I, S>(sentences: I, min_freq: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a [S]>,
    S: AsRef<str> + 'a,
{
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut seen_any = false;
    for sent in sentences {
        for w in sent {
            seen_any = true;
            *counts.entry(w.as_ref()).or_default() += 1;
        }
    }
    if !seen_any {
        return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_freq && !RESERVED.contains(&t))
        .map(|(t, c)| (t.to_string(), c))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocabulary::from_entries(kept)
}

/// A document as whitespace tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextDocument {
    pub id: String,
    pub src: Vec<Vec<String>>,
    pub tgt: Vec<Vec<String>>,
}

impl TextDocument {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// A document as token ids; every target sentence ends with [`END`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
}

impl Document {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt.iter().map(Vec::len).sum()
    }
}

pub fn encode_document(doc: &TextDocument, src: &Vocabulary, tgt: &Vocabulary) -> Document {
    Document {
        id: doc.id.clone(),
        src: doc.src.iter().map(|s| src.encode(s)).collect(),
        tgt: doc
            .tgt
            .iter()
            .map(|s| {
                let mut ids = tgt.encode(s);
                ids.push(END);
                ids
            })
            .collect(),
    }
}

fn tokenize(line: &str, lowercase: bool) -> Vec<String> {
    line.split_whitespace().map(|w| if lowercase { w.to_lowercase() } else { w.to_string() }).collect()
}

/// Parses aligned source/target texts into documents.
pub fn parse_documents(
    src_text: &str,
    tgt_text: &str,
    lowercase: bool,
    src_path: &Path,
    tgt_path: &Path,
) -> Result<Vec<TextDocument>> {
    let src_lines: Vec<&str> = src_text.lines().collect();
    let tgt_lines: Vec<&str> = tgt_text.lines().collect();
    let trimmed_len = |lines: &[&str]| lines.iter().rposition(|l| !l.trim().is_empty()).map_or(0, |i| i + 1);
    let (ns, nt) = (trimmed_len(&src_lines), trimmed_len(&tgt_lines));
    if ns != nt {
        let line = ns.min(nt) + 1;
        let path = if ns < nt { src_path } else { tgt_path };
        return Err(Error::Format {
            path: path.to_path_buf(),
            line,
            msg: format!("source has {ns} lines but target has {nt}"),
        });
    }
    let mut docs = Vec::new();
    let mut cur = TextDocument { id: String::new(), src: Vec::new(), tgt: Vec::new() };
    for i in 0..ns {
        let (s, t) = (src_lines[i].trim(), tgt_lines[i].trim());
        match (s.is_empty(), t.is_empty()) {
            (true, true) => {
                if !cur.src.is_empty() {
                    cur.id = format!("doc{}", docs.len() + 1);
                    docs.push(std::mem::replace(
                        &mut cur,
                        TextDocument { id: String::new(), src: Vec::new(), tgt: Vec::new() },
                    ));
                }
            }
            (false, false) => {
                cur.src.push(tokenize(s, lowercase));
                cur.tgt.push(tokenize(t, lowercase));
            }
            (src_blank, _) => {
                return Err(Error::Format {
                    path: if src_blank { src_path } else { tgt_path }.to_path_buf(),
                    line: i + 1,
                    msg: "document boundary (blank line) not aligned between source and target".into(),
                });
            }
        }
    }
    if !cur.src.is_empty() {
        cur.id = format!("doc{}", docs.len() + 1);
        docs.push(cur);
    }
    Ok(docs)
}

pub fn load_documents(src_path: &Path, tgt_path: &Path, lowercase: bool) -> Result<Vec<TextDocument>> {
    let s = fs::read_to_string(src_path).map_err(|e| Error::io(src_path, e))?;
    let t = fs::read_to_string(tgt_path).map_err(|e| Error::io(tgt_path, e))?;
    parse_documents(&s, &t, lowercase, src_path, tgt_path)
}

/// Renders one side of a corpus (`side` picks source or target sentences).
pub fn render_side<'a>(docs: impl IntoIterator<Item = &'a [Vec<String>]>) -> String {
    let mut out = String::new();
    for (i, doc) in docs.into_iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for sent in doc {
            out.push_str(&sent.join(" "));
            out.push('\n');
        }
    }
    out
}

pub fn write_documents(docs: &[TextDocument], src_path: &Path, tgt_path: &Path) -> Result<()> {
    let src = render_side(docs.iter().map(|d| d.src.as_slice()));
    let tgt = render_side(docs.iter().map(|d| d.tgt.as_slice()));
    fs::write(src_path, src).map_err(|e| Error::io(src_path, e))?;
    fs::write(tgt_path, tgt).map_err(|e| Error::io(tgt_path, e))
}

/// Source-only documents (for translation input).
pub fn parse_source_documents(text: &str, lowercase: bool) -> Vec<Vec<Vec<String>>> {
    let mut docs = Vec::new();
    let mut cur = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                docs.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push(tokenize(line, lowercase));
        }
    }
    if !cur.is_empty() {
        docs.push(cur);
    }
    docs
}

/// Drops documents with fewer than `min_sentences` sentences.
pub fn filter_min_sentences(docs: Vec<TextDocument>, min_sentences: usize) -> Vec<TextDocument> {
    docs.into_iter().filter(|d| d.len() >= min_sentences).collect()
}

/// Parameters of the synthetic topic-disambiguation corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_docs: usize,
    pub sentences_per_doc: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Number of content types, ambiguous ones included.
    pub content_vocab: usize,
    pub n_ambiguous: usize,
    /// Probability that a non-initial sentence carries an ambiguous token.
    pub ambiguous_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_docs: 200,
            sentences_per_doc: 8,
            min_len: 4,
            max_len: 7,
            content_vocab: 40,
            n_ambiguous: 6,
            ambiguous_prob: 0.6,
            seed: 1,
        }
    }
}

pub const TOPICS: [&str; 2] = ["a", "b"];

/// The fixed bilingual lexicon behind the synthetic corpus.
///
/// Source content type `w{i}` translates to `v{i}`, except the first
/// `n_ambiguous` types, which translate to `v{i}_a` or `v{i}_b` depending on
/// the document topic. Topic markers `topic_a` / `topic_b` translate to
/// themselves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticLexicon {
    pub content_vocab: usize,
    pub n_ambiguous: usize,
}

impl SyntheticLexicon {
    pub fn source(&self, i: usize) -> String {
        format!("w{i}")
    }

    pub fn marker(topic: usize) -> String {
        format!("topic_{}", TOPICS[topic])
    }

    pub fn target(&self, i: usize, topic: usize) -> String {
        if i < self.n_ambiguous {
            format!("v{i}_{}", TOPICS[topic])
        } else {
            format!("v{i}")
        }
    }

    fn content_index(&self, tok: &str) -> Option<usize> {
        tok.strip_prefix('w')?.parse().ok().filter(|&i| i < self.content_vocab)
    }

    pub fn is_ambiguous(&self, tok: &str) -> bool {
        self.content_index(tok).is_some_and(|i| i < self.n_ambiguous)
    }

    /// Topic index named by a marker token.
    pub fn topic_of_marker(tok: &str) -> Option<usize> {
        TOPICS.iter().position(|t| tok.strip_prefix("topic_") == Some(t))
    }

    /// Context-aware translation of one source token.
    pub fn translate(&self, tok: &str, topic: usize) -> Option<String> {
        if Self::topic_of_marker(tok).is_some() {
            return Some(tok.to_string());
        }
        self.content_index(tok).map(|i| self.target(i, topic))
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_docs == 0 || self.sentences_per_doc == 0 || self.min_len == 0 || self.content_vocab == 0 {
            return Err(Error::invalid("synthetic spec counts must be positive"));
        }
        if self.min_len > self.max_len {
            return Err(Error::invalid("synthetic min_len exceeds max_len"));
        }
        if !(self.ambiguous_prob > 0.0 && self.ambiguous_prob <= 1.0) {
            return Err(Error::invalid("ambiguous_prob must lie in (0, 1]"));
        }
        if self.n_ambiguous > self.content_vocab {
            return Err(Error::invalid(format!(
                "{} ambiguous types exceed the content vocabulary of {}",
                self.n_ambiguous, self.content_vocab
            )));
        }
        if self.n_ambiguous == self.content_vocab {
            return Err(Error::invalid("at least one unambiguous content type is required"));
        }
        Ok(())
    }

    pub fn lexicon(&self) -> SyntheticLexicon {
        SyntheticLexicon { content_vocab: self.content_vocab, n_ambiguous: self.n_ambiguous }
    }
}

/// Generates the synthetic corpus; a pure function of `spec`.
///
/// Each document draws a topic uniformly. Its first sentence starts with the
/// topic marker; every later sentence carries, with probability
/// `ambiguous_prob`, one ambiguous token whose translation depends on the
/// topic. Translations are token-for-token, so positions align.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Vec<TextDocument>> {
    spec.validate()?;
    let lex = spec.lexicon();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let plain: Vec<usize> = (spec.n_ambiguous..spec.content_vocab).collect();
    let mut docs = Vec::with_capacity(spec.n_docs);
    for d in 0..spec.n_docs {
        let topic = rng.gen_range(0..TOPICS.len());
        let mut src = Vec::with_capacity(spec.sentences_per_doc);
        let mut tgt = Vec::with_capacity(spec.sentences_per_doc);
        for s in 0..spec.sentences_per_doc {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let mut types: Vec<Option<usize>> =
                (0..len).map(|_| Some(*plain.choose(&mut rng).expect("plain types"))).collect();
            if s == 0 {
                types[0] = None;
            } else if spec.n_ambiguous > 0 && rng.gen::<f64>() < spec.ambiguous_prob {
                let pos = rng.gen_range(0..len);
                types[pos] = Some(rng.gen_range(0..spec.n_ambiguous));
            }
            let (mut ss, mut ts) = (Vec::with_capacity(len), Vec::with_capacity(len));
            for t in types {
                match t {
                    None => {
                        ss.push(SyntheticLexicon::marker(topic));
                        ts.push(SyntheticLexicon::marker(topic));
                    }
                    Some(i) => {
                        ss.push(lex.source(i));
                        ts.push(lex.target(i, topic));
                    }
                }
            }
            src.push(ss);
            tgt.push(ts);
        }
        docs.push(TextDocument { id: format!("doc{}", d + 1), src, tgt });
    }
    Ok(docs)
}

/// Accuracy on ambiguous source tokens, comparing the candidate token at the
/// same position with the reference. Returns `(correct, total)`.
pub fn ambiguous_accuracy(
    lex: &SyntheticLexicon,
    sources: &[Vec<String>],
    candidates: &[Vec<String>],
    references: &[Vec<String>],
) -> (usize, usize) {
    let (mut correct, mut total) = (0, 0);
    for ((src, cand), reference) in sources.iter().zip(candidates).zip(references) {
        for (i, tok) in src.iter().enumerate() {
            if lex.is_ambiguous(tok) {
                total += 1;
                if cand.get(i).is_some() && cand.get(i) == reference.get(i) {
                    correct += 1;
                }
            }
        }
    }
    (correct, total)
}
