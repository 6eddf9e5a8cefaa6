//! Subcommands of the `ewe` binary.

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use serde::Serialize;
use serde_json::json;

use ewe::bench::{sweep, to_jsonl};
use ewe::codec::encode;
use ewe::data::{build_vocab, gen_synthetic, load_corpus, prepare_dataset, write_corpus, Document};
use ewe::float::{Float, Precision};
use ewe::labels::{label_stats, micro_scores, relabel, MetricCounts};
use ewe::model::Classifier;
use ewe::nn::Rng;
use ewe::train::{checkpoint, evaluate, train};
use ewe::{Error, Result};

pub use config::AppConfig;

pub const SUBCOMMANDS: &[&str] = &["encode", "train", "eval", "bench", "stats", "relabel", "synth"];

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "EWE_SEED";

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::config(key, "required by this subcommand"))
}

/// Writes `text` to `path`, or to standard output when no path is set.
fn emit(path: &Option<PathBuf>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
        }
    }
    Ok(())
}

fn json_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain data serializes") + "\n"
}

pub fn run(command: &str, cfg: &AppConfig) -> Result<()> {
    match command {
        "encode" => run_encode(cfg),
        "train" => match cfg.precision {
            Precision::Single => run_train::<f32>(cfg),
            Precision::Double => run_train::<f64>(cfg),
        },
        "eval" => run_eval(cfg),
        "bench" => run_bench(cfg),
        "stats" => run_stats(cfg),
        "relabel" => run_relabel(cfg),
        "synth" => run_synth(cfg),
        other => Err(Error::config("subcommand", format!("unknown subcommand {other:?}"))),
    }
}

/// One line per document: `{"id", "u", "v", "mode", "ids", "mask"}` with
/// `ids` as `u` rows of `v` element ids.
fn run_encode(cfg: &AppConfig) -> Result<()> {
    let docs = load_corpus(required(&cfg.corpus, "corpus")?, cfg.strict)?;
    let codec = cfg.codec_config();
    codec.validate()?;
    let mut text = String::new();
    for doc in &docs {
        let sample = encode(&doc.text(), &codec);
        text.push_str(&json_line(&json!({
            "id": doc.id,
            "u": sample.u(),
            "v": sample.v(),
            "mode": sample.mode().as_str(),
            "ids": sample.to_rows(),
            "mask": sample.mask(),
        })));
    }
    log::info!("encoded {} documents", docs.len());
    emit(&cfg.output, &text)
}

fn run_train<T: Float>(cfg: &AppConfig) -> Result<()> {
    let docs = load_corpus(required(&cfg.corpus, "corpus")?, cfg.strict)?;
    let checkpoint_path = required(&cfg.checkpoint, "checkpoint")?;
    let vocab = build_vocab(&docs)?;
    let codec = cfg.codec_config();
    codec.validate()?;
    let train_set = prepare_dataset(&docs, &vocab, &codec)?;
    let validation = match &cfg.test_corpus {
        Some(path) => Some(prepare_dataset(&load_corpus(path, cfg.strict)?, &vocab, &codec)?),
        None => None,
    };
    let model_cfg = cfg.model_config(vocab.len());
    let mut model = Classifier::<T>::new(&model_cfg, &mut Rng::seed_from_u64(cfg.seed))?;
    log::info!(
        "training {} parameters at {} on {} documents, {} labels",
        ewe::nn::Parameters::param_count(&model),
        T::NAME,
        train_set.len(),
        vocab.len()
    );
    let log = train(&mut model, &train_set, validation.as_ref(), &cfg.run_config())?;
    checkpoint::save(checkpoint_path, &model, &codec, &vocab)?;
    if let Some(path) = &cfg.vocab {
        fs::write(path, vocab.to_text())?;
    }
    let text: String = log.epochs.iter().map(json_line).collect();
    if let Some(path) = &cfg.output {
        fs::write(path, text)?;
    }
    Ok(())
}

/// Reads `id<TAB>bits` lines, bits as a string of `0`/`1`.
pub fn read_bits(path: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            reason,
        };
        let (id, bits) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected id<TAB>bits".into()))?;
        let bits = bits
            .trim()
            .chars()
            .map(|ch| match ch {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(parse_err(format!("unexpected bit {other:?}"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        rows.push((id.to_string(), bits));
    }
    Ok(rows)
}

#[derive(Debug, Serialize)]
struct EvalRecord {
    precision: f64,
    recall: f64,
    f1: f64,
    tp: u64,
    fp: u64,
    #[serde(rename = "fn")]
    fn_: u64,
    docs: usize,
}

fn record(counts: &MetricCounts, docs: usize) -> EvalRecord {
    let scores = micro_scores(counts);
    let (tp, fp, fn_) = counts.totals();
    EvalRecord {
        precision: scores.precision,
        recall: scores.recall,
        f1: scores.f1,
        tp,
        fp,
        fn_,
        docs,
    }
}

fn eval_files(predictions: &Path, gold: &Path) -> Result<EvalRecord> {
    let predicted = read_bits(predictions)?;
    let gold_rows: BTreeMap<String, Vec<u8>> = read_bits(gold)?.into_iter().collect();
    let width = predicted.first().map_or(0, |(_, b)| b.len());
    let mut counts = MetricCounts::new(width);
    for (id, bits) in &predicted {
        let truth = gold_rows
            .get(id)
            .ok_or_else(|| Error::config("gold", format!("no gold row for id {id:?}")))?;
        counts.update(bits, truth)?;
    }
    if predicted.len() != gold_rows.len() {
        return Err(Error::config(
            "predictions",
            format!("{} predictions for {} gold rows", predicted.len(), gold_rows.len()),
        ));
    }
    Ok(record(&counts, predicted.len()))
}

fn eval_checkpoint<T: Float>(cfg: &AppConfig, path: &Path) -> Result<EvalRecord> {
    let ckpt = checkpoint::load::<T>(path)?;
    let corpus = cfg
        .test_corpus
        .as_deref()
        .or(cfg.corpus.as_deref())
        .ok_or_else(|| Error::config("test_corpus", "required by this subcommand"))?;
    let dataset = prepare_dataset(&load_corpus(corpus, cfg.strict)?, &ckpt.vocab, &ckpt.codec)?;
    let (counts, _) = evaluate(&ckpt.model, &dataset, cfg.threshold)?;
    if let Some(out) = &cfg.predictions {
        let mut text = String::new();
        for ex in &dataset.examples {
            let probs = ckpt.model.probabilities(&ex.sample)?;
            let bits: String = ewe::train::predict(probs.as_slice().expect("contiguous"), cfg.threshold)
                .iter()
                .map(|b| if *b == 1 { '1' } else { '0' })
                .collect();
            text.push_str(&format!("{}\t{}\n", ex.id, bits));
        }
        fs::write(out, text)?;
    }
    Ok(record(&counts, dataset.len()))
}

/// Scores a prediction file against a gold file, or a checkpoint against a
/// corpus. With a checkpoint, `predictions` (if set) receives the
/// thresholded outputs.
fn run_eval(cfg: &AppConfig) -> Result<()> {
    let rec = match (&cfg.checkpoint, &cfg.predictions, &cfg.gold) {
        (_, Some(p), Some(g)) => eval_files(p, g)?,
        (Some(ckpt), _, _) => match cfg.precision {
            Precision::Single => eval_checkpoint::<f32>(cfg, ckpt)?,
            Precision::Double => eval_checkpoint::<f64>(cfg, ckpt)?,
        },
        _ => {
            return Err(Error::config(
                "checkpoint",
                "eval needs either predictions and gold, or a checkpoint and a corpus",
            ))
        }
    };
    log::info!("micro P {:.4} R {:.4} F1 {:.4}", rec.precision, rec.recall, rec.f1);
    emit(&cfg.output, &json_line(&rec))
}

fn run_bench(cfg: &AppConfig) -> Result<()> {
    let rows = sweep(&cfg.bench_configs());
    for row in &rows {
        if let Err(failure) = row {
            log::warn!("bench config u={} v={} w={} failed: {}", failure.u, failure.v, failure.w, failure.error);
        }
    }
    emit(&cfg.output, &to_jsonl(&rows))
}

#[derive(Debug, Serialize)]
struct StatsRecord {
    docs: usize,
    raw_codes: usize,
    labels: usize,
    std_total: f64,
    std_majors: f64,
    majors: usize,
    counts: BTreeMap<String, u64>,
}

fn run_stats(cfg: &AppConfig) -> Result<()> {
    let docs = load_corpus(required(&cfg.corpus, "corpus")?, cfg.strict)?;
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut raw = std::collections::HashSet::new();
    for doc in &docs {
        raw.extend(doc.codes.iter().cloned());
        for label in relabel(&doc.codes)? {
            *counts.entry(label).or_default() += 1;
        }
    }
    let values: Vec<u64> = counts.values().copied().collect();
    let stats = label_stats(&values)?;
    let rec = StatsRecord {
        docs: docs.len(),
        raw_codes: raw.len(),
        labels: counts.len(),
        std_total: stats.std_total,
        std_majors: stats.std_majors,
        majors: stats.majors.len(),
        counts,
    };
    emit(&cfg.output, &json_line(&rec))
}

fn run_relabel(cfg: &AppConfig) -> Result<()> {
    let docs = load_corpus(required(&cfg.corpus, "corpus")?, cfg.strict)?;
    let relabeled = docs
        .into_iter()
        .map(|doc| {
            Ok(Document {
                codes: relabel(&doc.codes)?,
                ..doc
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_corpus(required(&cfg.output, "output")?, &relabeled)
}

/// Writes a synthetic corpus: the last `synth_test` documents go to
/// `test_corpus` (when set), the rest to `corpus`.
fn run_synth(cfg: &AppConfig) -> Result<()> {
    let corpus = gen_synthetic(&cfg.synthetic_spec())?;
    let split = match &cfg.test_corpus {
        Some(_) if cfg.synth_test >= corpus.docs.len() => {
            return Err(Error::config("synth_test", "leaves no training documents"));
        }
        Some(_) => corpus.docs.len() - cfg.synth_test,
        None => corpus.docs.len(),
    };
    write_corpus(required(&cfg.corpus, "corpus")?, &corpus.docs[..split])?;
    if let Some(path) = &cfg.test_corpus {
        write_corpus(path, &corpus.docs[split..])?;
    }
    if let Some(path) = &cfg.vocab {
        fs::write(path, build_vocab(&corpus.docs)?.to_text())?;
    }
    log::info!("wrote {} training and {} test documents", split, corpus.docs.len() - split);
    Ok(())
}

/// Turns `--key value` / `--key=value` arguments into pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut iter = args.iter();
    while let Some(arg) = iter.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::config(arg.clone(), "expected --key value"))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let value = iter
                    .next()
                    .ok_or_else(|| Error::config(key, "missing value"))?;
                out.push((key.to_string(), value.clone()));
            }
        }
    }
    Ok(out)
}

/// Single-line machine-readable failure record.
pub fn error_record(err: &Error) -> String {
    let mut rec = json!({ "error": err.kind(), "message": err.to_string() });
    if let Error::Config { field, .. } = err {
        rec["field"] = json!(field);
    }
    serde_json::to_string(&rec).expect("json")
}
