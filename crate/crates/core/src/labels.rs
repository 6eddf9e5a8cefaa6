//! Position-aware relabeling of classification codes and micro-averaged
//! multilabel metrics.
//!
//! The first-listed code of a document is prefixed `First-`, every other
//! code `Later-`, so a one-hot target still tells the primary
//! classification apart from the secondary ones.

use std::collections::{HashMap, HashSet};

use serde::Serialize;

use crate::error::{Error, Result};

pub const FIRST_PREFIX: &str = "First-";
pub const LATER_PREFIX: &str = "Later-";

/// Prefixes the first code with `First-` and the rest with `Later-`,
/// dropping repeated prefixed codes while keeping first-occurrence order.
pub fn relabel<S: AsRef<str>>(codes: &[S]) -> Result<Vec<String>> {
    let (first, rest) = codes.split_first().ok_or(Error::EmptyCodes)?;
    let mut out = vec![format!("{FIRST_PREFIX}{}", first.as_ref())];
    let mut seen = HashSet::new();
    for code in rest {
        let label = format!("{LATER_PREFIX}{}", code.as_ref());
        if seen.insert(label.clone()) {
            out.push(label);
        }
    }
    Ok(out)
}

/// Splits a prefixed label into (prefix, raw code).
pub fn strip_prefix(label: &str) -> Option<(&'static str, &str)> {
    label
        .strip_prefix(FIRST_PREFIX)
        .map(|code| (FIRST_PREFIX, code))
        .or_else(|| label.strip_prefix(LATER_PREFIX).map(|code| (LATER_PREFIX, code)))
}

/// Lexicographically sorted set of prefixed labels.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelVocab {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelVocab {
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if let Some(bad) = labels.iter().find(|l| strip_prefix(l).is_none()) {
            return Err(Error::config("vocab", format!("label `{bad}` lacks a First-/Later- prefix")));
        }
        labels.sort();
        labels.dedup();
        let index = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        Ok(Self { labels, index })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    /// One label per line.
    pub fn to_text(&self) -> String {
        let mut s = self.labels.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }
}

/// Bit `l` is set iff `vocab.labels()[l]` is in `prefixed`.
pub fn one_hot<S: AsRef<str>>(prefixed: &[S], vocab: &LabelVocab) -> Result<Vec<u8>> {
    let mut bits = vec![0u8; vocab.len()];
    for label in prefixed {
        let label = label.as_ref();
        let i = vocab.index_of(label).ok_or_else(|| Error::UnknownLabel(label.to_string()))?;
        bits[i] = 1;
    }
    Ok(bits)
}

/// Per-label confusion counts.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MetricCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl MetricCounts {
    pub fn new(n_labels: usize) -> Self {
        Self {
            tp: vec![0; n_labels],
            fp: vec![0; n_labels],
            fn_: vec![0; n_labels],
        }
    }

    pub fn n_labels(&self) -> usize {
        self.tp.len()
    }

    pub fn update(&mut self, predicted: &[u8], gold: &[u8]) -> Result<()> {
        if predicted.len() != self.n_labels() || gold.len() != self.n_labels() {
            return Err(Error::DimensionMismatch {
                context: "metric update",
                expected: self.n_labels(),
                actual: if predicted.len() != self.n_labels() { predicted.len() } else { gold.len() },
            });
        }
        for (l, (&p, &g)) in predicted.iter().zip(gold).enumerate() {
            match (p != 0, g != 0) {
                (true, true) => self.tp[l] += 1,
                (true, false) => self.fp[l] += 1,
                (false, true) => self.fn_[l] += 1,
                (false, false) => {}
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricCounts) {
        for (a, b) in self.tp.iter_mut().zip(&other.tp) {
            *a += b;
        }
        for (a, b) in self.fp.iter_mut().zip(&other.fp) {
            *a += b;
        }
        for (a, b) in self.fn_.iter_mut().zip(&other.fn_) {
            *a += b;
        }
    }

    /// (TP, FP, FN) summed over labels.
    pub fn totals(&self) -> (u64, u64, u64) {
        (self.tp.iter().sum(), self.fp.iter().sum(), self.fn_.iter().sum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MicroScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Micro-averaged precision, recall and F1; every 0/0 is taken as 0.
pub fn micro_scores(counts: &MetricCounts) -> MicroScores {
    let (tp, fp, fn_) = counts.totals();
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    // Harmonic mean of precision and recall in one rounding step.
    let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
    MicroScores { precision, recall, f1 }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelStats {
    pub std_total: f64,
    pub std_majors: f64,
    /// Indices into the input, by descending count.
    pub majors: Vec<usize>,
}

fn population_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n == 0 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    (values.map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
}

/// Population standard deviation of the label counts, overall and over the
/// "major" labels: the fewest most frequent labels covering 90% of all counts.
pub fn label_stats(counts: &[u64]) -> Result<LabelStats> {
    if counts.is_empty() {
        return Err(Error::config("counts", "no labels to summarize"));
    }
    let std_total = population_std(counts.iter().map(|&c| c as f64));
    let total: u64 = counts.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut majors = Vec::new();
    let mut covered = 0u64;
    for i in order {
        majors.push(i);
        covered += counts[i];
        // covered >= 0.9 * total, in integers
        if covered * 10 >= total * 9 {
            break;
        }
    }
    let std_majors = population_std(majors.iter().map(|&i| counts[i] as f64));
    Ok(LabelStats {
        std_total,
        std_majors,
        majors,
    })
}
