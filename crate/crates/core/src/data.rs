//! Corpus ingestion, label vocabulary construction, dataset preparation and
//! a seeded synthetic corpus generator.
//!
//! Corpus files are UTF-8 with one JSON record per line:
//! `{"id": "...", "claims": ["...", ...], "codes": ["G06Q", ...]}`.
//! Code order is significant: the first code is the primary classification.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::codec::{encode, CodecConfig, EncodedSample};
use crate::error::{Error, Result};
use crate::labels::{one_hot, relabel, LabelVocab};
use crate::nn::Rng;

/// Only the first this many claims of a document are used as input text.
pub const MAX_CLAIMS: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub claims: Vec<String>,
    pub codes: Vec<String>,
}

impl Document {
    /// The first [`MAX_CLAIMS`] claims joined by single spaces.
    pub fn text(&self) -> String {
        self.claims.iter().take(MAX_CLAIMS).map(String::as_str).collect::<Vec<_>>().join(" ")
    }
}

/// Line-by-line corpus reader. In strict mode a malformed record is an error;
/// otherwise it is logged, counted and skipped.
pub struct CorpusReader<R> {
    lines: std::io::Lines<R>,
    path: PathBuf,
    line: usize,
    strict: bool,
    skipped: Vec<(usize, String)>,
}

impl CorpusReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>, strict: bool) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path)?;
        Ok(Self::new(BufReader::new(file), path, strict))
    }
}

impl<R: BufRead> CorpusReader<R> {
    pub fn new(reader: R, path: impl Into<PathBuf>, strict: bool) -> Self {
        Self {
            lines: reader.lines(),
            path: path.into(),
            line: 0,
            strict,
            skipped: Vec::new(),
        }
    }

    /// Line numbers and reasons of records skipped so far.
    pub fn skipped(&self) -> &[(usize, String)] {
        &self.skipped
    }

    fn parse(&self, text: &str) -> std::result::Result<Document, String> {
        let doc: Document = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if doc.claims.is_empty() {
            return Err("document has no claims".into());
        }
        if doc.codes.is_empty() {
            return Err("document has no codes".into());
        }
        Ok(doc)
    }
}

impl<R: BufRead> Iterator for CorpusReader<R> {
    type Item = Result<Document>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let text = match self.lines.next()? {
                Ok(t) => t,
                Err(e) => return Some(Err(e.into())),
            };
            self.line += 1;
            if text.trim().is_empty() {
                continue;
            }
            match self.parse(&text) {
                Ok(doc) => return Some(Ok(doc)),
                Err(reason) if self.strict => {
                    return Some(Err(Error::Parse {
                        path: self.path.clone(),
                        line: self.line,
                        reason,
                    }))
                }
                Err(reason) => {
                    log::warn!("{}:{}: skipping record: {reason}", self.path.display(), self.line);
                    self.skipped.push((self.line, reason));
                }
            }
        }
    }
}

/// Reads a whole corpus file in file order.
pub fn load_corpus(path: impl AsRef<Path>, strict: bool) -> Result<Vec<Document>> {
    CorpusReader::open(path, strict)?.collect()
}

pub fn write_corpus(path: impl AsRef<Path>, docs: &[Document]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for doc in docs {
        serde_json::to_writer(&mut out, doc).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Every prefixed label produced by relabeling the training documents.
pub fn build_vocab(docs: &[Document]) -> Result<LabelVocab> {
    let mut labels = HashSet::new();
    for doc in docs {
        labels.extend(relabel(&doc.codes)?);
    }
    LabelVocab::new(labels)
}

/// One-hot target for a document; labels missing from `vocab` are dropped
/// and counted in the second return value.
pub fn encode_target(doc: &Document, vocab: &LabelVocab) -> Result<(Vec<u8>, usize)> {
    let labels = relabel(&doc.codes)?;
    let (known, unknown): (Vec<_>, Vec<_>) = labels.into_iter().partition(|l| vocab.index_of(l).is_some());
    Ok((one_hot(&known, vocab)?, unknown.len()))
}

#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub sample: EncodedSample,
    pub target: Vec<u8>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
    /// Labels dropped because the vocabulary did not contain them.
    pub dropped_labels: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Encodes every document and its target.
pub fn prepare_dataset(docs: &[Document], vocab: &LabelVocab, codec: &CodecConfig) -> Result<Dataset> {
    let mut dataset = Dataset::default();
    for doc in docs {
        let (target, dropped) = encode_target(doc, vocab)?;
        dataset.dropped_labels += dropped;
        dataset.examples.push(Example {
            id: doc.id.clone(),
            sample: encode(&doc.text(), codec),
            target,
        });
    }
    if dataset.dropped_labels > 0 {
        log::warn!("dropped {} labels not present in the vocabulary", dataset.dropped_labels);
    }
    Ok(dataset)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub n_docs: usize,
    pub vocab_size: usize,
    pub tokens_per_doc: usize,
    pub zipf_exponent: f64,
    pub keyword_strength: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 8,
            n_docs: 2400,
            vocab_size: 500,
            tokens_per_doc: 28,
            zipf_exponent: 1.0,
            keyword_strength: 0.9,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::config("n_classes", "need at least two classes"));
        }
        if !(self.zipf_exponent >= 0.0) {
            return Err(Error::config("zipf_exponent", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.keyword_strength) {
            return Err(Error::config("keyword_strength", "must lie in [0, 1]"));
        }
        if self.vocab_size == 0 || self.tokens_per_doc == 0 {
            return Err(Error::config("vocab_size", "vocabulary and documents must be non-empty"));
        }
        Ok(())
    }
}

pub const KEYWORDS_PER_CLASS: usize = 1;
/// Keyword slots of the primary class placed before any other keyword.
pub const LEAD_KEYWORDS: usize = 4;
const MAX_CLASSES_PER_DOC: usize = 3;
const TOKENS_PER_CLAIM: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub docs: Vec<Document>,
    pub class_codes: Vec<String>,
    /// Keywords owned by each class, indexed like `class_codes`.
    pub keywords: Vec<Vec<String>>,
}

fn random_word(rng: &mut Rng, min_len: usize, max_len: usize) -> String {
    let len = rng.random_range(min_len..=max_len);
    (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
}

fn sample_weighted(rng: &mut Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if r < w {
            return i;
        }
        r -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Splits `n` keyword slots among `k` classes: the primary class takes twice
/// the share of each secondary one, so it always holds the most keywords.
fn allocate_keyword_slots(n: usize, k: usize) -> Vec<usize> {
    let weights: Vec<f64> = (0..k).map(|i| if i == 0 { 2.0 } else { 1.0 }).collect();
    let total: f64 = weights.iter().sum();
    let mut counts = vec![0usize; k];
    let mut owners = Vec::with_capacity(n);
    for slot in 0..n {
        let target = |i: usize| weights[i] / total * (slot + 1) as f64 - counts[i] as f64;
        let best = (0..k)
            .max_by(|&a, &b| target(a).partial_cmp(&target(b)).unwrap().then(b.cmp(&a)))
            .expect("k >= 1");
        counts[best] += 1;
        owners.push(best);
    }
    owners
}

/// Generates a labeled corpus where each class owns [`KEYWORDS_PER_CLASS`]
/// distinctive keywords. Every document draws 1 to 3 distinct classes with
/// Zipf-distributed popularity; the first drawn class is its first-listed
/// code. Each token is a keyword with probability `keyword_strength`,
/// otherwise a Zipf-distributed background word. The primary class holds
/// twice the keyword share of each other class and its first
/// [`LEAD_KEYWORDS`] keywords open the document.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = Rng::seed_from_u64(spec.seed);

    let mut class_codes: Vec<String> = Vec::with_capacity(spec.n_classes);
    let mut seen_codes = HashSet::new();
    while class_codes.len() < spec.n_classes {
        let code = format!(
            "{}{:02}{}",
            (b'A' + rng.random_range(0..8u8)) as char,
            rng.random_range(1..100u8),
            (b'A' + rng.random_range(0..26u8)) as char
        );
        if seen_codes.insert(code.clone()) {
            class_codes.push(code);
        }
    }

    let mut used = HashSet::new();
    let mut fresh = |rng: &mut Rng, min_len, max_len| loop {
        let w = random_word(rng, min_len, max_len);
        if used.insert(w.clone()) {
            return w;
        }
    };
    let keywords: Vec<Vec<String>> = (0..spec.n_classes)
        .map(|_| (0..KEYWORDS_PER_CLASS).map(|_| fresh(&mut rng, 5, 8)).collect())
        .collect();
    let background: Vec<String> = (0..spec.vocab_size).map(|_| fresh(&mut rng, 2, 7)).collect();

    let class_weights: Vec<f64> = (1..=spec.n_classes)
        .map(|rank| (rank as f64).powf(-spec.zipf_exponent))
        .collect();
    let word_weights: Vec<f64> = (1..=spec.vocab_size).map(|rank| 1.0 / rank as f64).collect();

    let mut docs = Vec::with_capacity(spec.n_docs);
    for d in 0..spec.n_docs {
        let k = rng.random_range(1..=MAX_CLASSES_PER_DOC.min(spec.n_classes));
        let mut weights = class_weights.clone();
        let mut classes = Vec::with_capacity(k);
        for _ in 0..k {
            let c = sample_weighted(&mut rng, &weights);
            weights[c] = 0.0;
            classes.push(c);
        }

        let is_keyword: Vec<bool> = (0..spec.tokens_per_doc)
            .map(|_| rng.random::<f64>() < spec.keyword_strength)
            .collect();
        let n_keywords = is_keyword.iter().filter(|&&b| b).count();
        let mut owners = allocate_keyword_slots(n_keywords, k);
        // The primary class opens the document, the way a first claim
        // describes the main invention; remaining slots are shuffled.
        let lead = LEAD_KEYWORDS.min(owners.iter().filter(|&&o| o == 0).count());
        owners.sort_by_key(|&o| o != 0);
        let tail = &mut owners[lead..];
        for i in (1..tail.len()).rev() {
            tail.swap(i, rng.random_range(0..=i));
        }
        let mut owners = owners.into_iter();
        let tokens: Vec<&str> = is_keyword
            .iter()
            .map(|&kw| {
                if kw {
                    let class = classes[owners.next().expect("one owner per keyword slot")];
                    keywords[class][rng.random_range(0..KEYWORDS_PER_CLASS)].as_str()
                } else {
                    background[sample_weighted(&mut rng, &word_weights)].as_str()
                }
            })
            .collect();

        docs.push(Document {
            id: format!("syn-{}-{d:06}", spec.seed),
            claims: tokens.chunks(TOKENS_PER_CLAIM).map(|c| c.join(" ")).collect(),
            codes: classes.iter().map(|&c| class_codes[c].clone()).collect(),
        });
    }

    Ok(SyntheticCorpus {
        docs,
        class_codes,
        keywords,
    })
}

/// Bag-of-keywords reference classifier: the class with the most keyword
/// hits is predicted first, every other class with a hit follows.
pub fn keyword_oracle(corpus: &SyntheticCorpus, doc: &Document) -> Vec<String> {
    let owner: HashMap<&str, usize> = corpus
        .keywords
        .iter()
        .enumerate()
        .flat_map(|(c, kws)| kws.iter().map(move |k| (k.as_str(), c)))
        .collect();
    // (hits, first position) per class
    let mut hits: HashMap<usize, (usize, usize)> = HashMap::new();
    for (pos, token) in doc.text().split_whitespace().enumerate() {
        if let Some(&c) = owner.get(token) {
            hits.entry(c).or_insert((0, pos)).0 += 1;
        }
    }
    let mut ranked: Vec<(usize, (usize, usize))> = hits.into_iter().collect();
    ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
    ranked.into_iter().map(|(c, _)| corpus.class_codes[c].clone()).collect()
}
