use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ewe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ewe"))
        .args(args)
        .env_remove("EWE_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("{e}: {text:?}"))
}

const THREE_DOCS: &str = r#"{"id":"d1","claims":["a"],"codes":["G06Q","G06Q","A01B"]}
{"id":"d2","claims":["b"],"codes":["A01B","G06Q","A01B"]}
{"id":"d3","claims":["c"],"codes":["G06Q","A01B"]}
"#;

#[test]
fn relabel_prefixes_codes() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("three.jsonl");
    let out = dir.path().join("out.jsonl");
    fs::write(&corpus, THREE_DOCS).unwrap();
    let run = ewe(&["relabel", "--corpus", path(&corpus), "--output", path(&out)]);
    assert!(run.status.success(), "{run:?}");
    let codes: Vec<Value> = fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["codes"].clone())
        .collect();
    assert_eq!(codes[0], serde_json::json!(["First-G06Q", "Later-G06Q", "Later-A01B"]));
    assert_eq!(codes[1], serde_json::json!(["First-A01B", "Later-G06Q", "Later-A01B"]));
    assert_eq!(codes[2], serde_json::json!(["First-G06Q", "Later-A01B"]));
}

#[test]
fn stats_counts_prefixed_labels() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("three.jsonl");
    fs::write(&corpus, THREE_DOCS).unwrap();
    let run = ewe(&["stats", "--corpus", path(&corpus)]);
    assert!(run.status.success());
    let rec = json(&run);
    assert_eq!(rec["docs"], 3);
    assert_eq!(rec["raw_codes"], 2);
    assert_eq!(rec["labels"], 4);
    assert_eq!(rec["counts"]["Later-A01B"], 3);
}

#[test]
fn eval_scores_prediction_files() {
    let dir = tempfile::tempdir().unwrap();
    let gold = dir.path().join("gold.tsv");
    let pred = dir.path().join("pred.tsv");
    fs::write(&gold, "a\t0111\nb\t1011\n").unwrap();

    fs::write(&pred, "a\t0111\nb\t1011\n").unwrap();
    let rec = json(&ewe(&["eval", "--predictions", path(&pred), "--gold", path(&gold)]));
    assert_eq!(rec["f1"], 1.0);

    // 4 true positives, 1 false positive, 2 false negatives
    fs::write(&pred, "a\t0110\nb\t1101\n").unwrap();
    let rec = json(&ewe(&["eval", "--predictions", path(&pred), "--gold", path(&gold)]));
    assert_eq!((rec["tp"].as_u64(), rec["fp"].as_u64(), rec["fn"].as_u64()), (Some(4), Some(1), Some(2)));
    assert_eq!(rec["f1"].as_f64().unwrap(), 8.0 / 11.0);
}

#[test]
fn config_errors_are_json_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "v=16\nw=100\n").unwrap();
    let run = ewe(&["stats", "--config", path(&cfg)]);
    assert!(!run.status.success());
    let rec = json(&run);
    assert_eq!(rec["error"], "config");
    assert_eq!(rec["field"], "w");

    let rec = json(&ewe(&["train", "--colour", "blue"]));
    assert_eq!(rec["field"], "colour");
    let rec = json(&ewe(&["train"]));
    assert_eq!(rec["field"], "corpus");
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let c = dir.path().join("c.jsonl");
    let cfg = dir.path().join("s.cfg");
    fs::write(&cfg, "seed=1\nsynth_docs=20\nsynth_test=0\n").unwrap();

    assert!(ewe(&["synth", "--config", path(&cfg), "--seed", "3", "--corpus", path(&a)]).status.success());
    let from_env = Command::new(env!("CARGO_BIN_EXE_ewe"))
        .args(["synth", "--config", path(&cfg), "--corpus", path(&b)])
        .env("EWE_SEED", "3")
        .output()
        .unwrap();
    assert!(from_env.status.success());
    let flag_wins = Command::new(env!("CARGO_BIN_EXE_ewe"))
        .args(["synth", "--config", path(&cfg), "--seed", "1", "--corpus", path(&c)])
        .env("EWE_SEED", "3")
        .output()
        .unwrap();
    assert!(flag_wins.status.success());

    let (a, b, c) = (fs::read(a).unwrap(), fs::read(b).unwrap(), fs::read(c).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn synth_train_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    let d = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    fs::write(
        &cfg,
        format!(
            "u=16\nv=8\nc=4\nlayers=1\nepochs=2\nbatch_size=8\nlr=0.001\n\
             synth_docs=60\nsynth_test=20\ncorpus={}\ntest_corpus={}\ncheckpoint={}\n",
            d("train.jsonl"),
            d("test.jsonl"),
            d("m.ewe")
        ),
    )
    .unwrap();
    let cfg = path(&cfg);

    assert!(ewe(&["synth", "--config", cfg]).status.success());
    assert_eq!(fs::read_to_string(d("test.jsonl")).unwrap().lines().count(), 20);

    let log = d("log.jsonl");
    let run = ewe(&["train", "--config", cfg, "--output", &log]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stdout));
    let epochs: Vec<Value> = fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(epochs.len(), 2);
    assert!(epochs[1]["validation"]["f1"].is_number());

    let preds = d("pred.tsv");
    let rec = json(&ewe(&["eval", "--config", cfg, "--predictions", &preds]));
    assert_eq!(rec["docs"], 20);
    assert_eq!(rec["f1"], epochs[1]["validation"]["f1"]);
    assert_eq!(fs::read_to_string(&preds).unwrap().lines().count(), 20);
}

#[test]
fn bench_records_failures() {
    let run = ewe(&["bench", "--bench_reps", "5", "--bench_warmup", "0", "--bench_grid", "8:3:32:1,8:4:32:1"]);
    assert!(run.status.success());
    let rows: Vec<Value> = String::from_utf8_lossy(&run.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0]["error"].is_string());
    assert_eq!(rows[1]["chars"], 32);
}

#[test]
fn encode_emits_id_grids() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    fs::write(&corpus, r#"{"id":"x","claims":["hi yo"],"codes":["A"]}"#).unwrap();
    let rec = json(&ewe(&["encode", "--corpus", path(&corpus), "--u", "4", "--v", "2", "--c", "2"]));
    assert_eq!(rec["ids"], serde_json::json!([[1, 0], [108, 109], [125, 115], [0, 0]]));
    assert_eq!(rec["mask"], serde_json::json!([true, true, true, false]));
}
