//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::{Rng as _, SeedableRng};

use ewe::bench::{time_interleaved, BenchConfig};
use ewe::codec::{encode_sequence, CodecConfig, CodecMode};
use ewe::data::{build_vocab, gen_synthetic, prepare_dataset, Dataset, SyntheticSpec};
use ewe::embedding::{embedding_param_count, lookup_elements, reshape_materials, unreshape_materials, ElementTable, PoolScope};
use ewe::encoder::{split_heads, MultiHeadAttention};
use ewe::labels::{micro_scores, one_hot, relabel, LabelVocab, MetricCounts};
use ewe::model::{Classifier, ModelConfig, VgramConfig};
use ewe::nn::Rng;
use ewe::train::{evaluate, grad_check, train, RunConfig};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn param_counts() -> Outcome {
    let big = embedding_param_count(48, 128, 16, false);
    let small = embedding_param_count(8, 128, 16, false);
    let k = |n: usize| (n as f64 / 1000.0).round() as usize;
    outcome(
        big == 12_480 && small == 2_080 && k(big) == 12 && k(small) == 2,
        format!("c=48 -> {big} ({}k), c=8 -> {small} ({}k)", k(big), k(small)),
    )
}

fn first_later() -> Outcome {
    let docs: [&[&str]; 3] = [&["G06Q", "G06Q", "A01B"], &["A01B", "G06Q", "A01B"], &["G06Q", "A01B"]];
    let expected = [vec![0u8, 1, 1, 1], vec![1, 0, 1, 1], vec![0, 1, 1, 0]];
    let prefixed: Vec<Vec<String>> = docs.iter().map(|d| relabel(d).unwrap()).collect();
    let vocab = LabelVocab::new(prefixed.iter().flatten().cloned().collect::<std::collections::BTreeSet<_>>()).unwrap();
    let got: Vec<Vec<u8>> = prefixed.iter().map(|p| one_hot(p, &vocab).unwrap()).collect();
    outcome(got == expected, format!("vocab {:?}, one-hot {got:?}", vocab.labels()))
}

fn reshape_bijection() -> Outcome {
    let mut rng = Rng::seed_from_u64(3);
    let mut failures = 0;
    for _ in 0..1000 {
        let (u, v, c) = (rng.random_range(1..=16), rng.random_range(1..=16), rng.random_range(1..=16));
        let e = Array2::from_shape_fn((u * v, c), |_| rng.random::<f32>() - 0.5);
        let m = reshape_materials(e.view(), u, v).unwrap();
        let back = unreshape_materials(m.view(), v).unwrap();
        if m.dim() != (u, v * c) || back != e {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("1000 random (u, v, c) triples, {failures} mismatches"))
}

fn head_alignment() -> Outcome {
    let (u, v, c) = (4, 4, 3);
    let w = v * c;
    let mut rng = Rng::seed_from_u64(4);
    let table = ElementTable::<f64>::new(c, 0.02, &mut rng);
    let sample = encode_sequence("abcd efg hi", &CodecConfig::new(u, v).with_cls(false));
    let elements = lookup_elements(sample.ids(), &table);
    let x = reshape_materials(elements.view(), u, v).unwrap();

    let mut attention = MultiHeadAttention::<f64>::new(w, v, 0.02, &mut rng);
    for proj in [&mut attention.query, &mut attention.key, &mut attention.value] {
        proj.weight = Array2::eye(w);
        proj.bias.fill(0.0);
    }
    let mut mismatches = 0;
    for proj in [&attention.query, &attention.key, &attention.value] {
        let heads = split_heads(proj.forward(x.view()).view(), v).unwrap();
        for n in 0..v {
            for i in 0..u {
                if heads.index_axis(Axis(0), n).row(i) != elements.row(i * v + n) {
                    mismatches += 1;
                }
            }
        }
    }
    outcome(mismatches == 0, format!("u={u} v={v} c={c}, Q/K/V slices checked, {mismatches} mismatches"))
}

fn grad_checks() -> Outcome {
    let start = Instant::now();
    let mut cfg = ModelConfig::elementwise(4, 2, 4, 1, 3);
    cfg.vgram = Some(VgramConfig {
        scope: PoolScope::Sliding,
        window: 2,
    });
    // Larger init so attention is not uniform and every path carries signal.
    cfg.embedder.init_std = 0.2;
    cfg.encoder.init_std = 0.2;
    let sample = encode_sequence("ab c", &CodecConfig::new(4, 2));
    let target = [0u8, 1, 1];
    let single = Classifier::<f32>::new(&cfg, &mut Rng::seed_from_u64(2)).unwrap();
    let double = single.cast::<f64>();
    let r32 = grad_check(&single, &sample, &target, 1e-5, 1e-3).unwrap();
    let r64 = grad_check(&double, &sample, &target, 1e-5, 1e-6).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let names: Vec<&str> = r64.tensors.iter().map(|t| t.name.as_str()).collect();
    let covered = names.iter().any(|n| n.contains("focus")) && names.iter().any(|n| n.contains("scorer"));
    outcome(
        r32.passed() && r64.passed() && covered && secs < 60.0,
        format!(
            "{} tensors, max rel error f32 {:.2e} (< 1e-3), f64 {:.2e} (< 1e-6), {secs:.1}s",
            names.len(),
            r32.max_rel_error,
            r64.max_rel_error
        ),
    )
}

fn metric_oracle() -> Outcome {
    let mut rng = Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for _ in 0..100 {
        let bits = |rng: &mut Rng| -> Vec<Vec<u8>> {
            (0..8).map(|_| (0..6).map(|_| rng.random_range(0..2u8)).collect()).collect()
        };
        let (pred, gold) = (bits(&mut rng), bits(&mut rng));
        let mut counts = MetricCounts::new(6);
        for (p, g) in pred.iter().zip(&gold) {
            counts.update(p, g).unwrap();
        }
        let scores = micro_scores(&counts);

        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for d in 0..8 {
            for l in 0..6 {
                match (pred[d][l], gold[d][l]) {
                    (1, 1) => tp += 1,
                    (1, 0) => fp += 1,
                    (0, 1) => fn_ += 1,
                    _ => {}
                }
            }
        }
        let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let expected = (div(tp, tp + fp), div(tp, tp + fn_), div(2 * tp, 2 * tp + fp + fn_));
        if counts.totals() != (tp, fp, fn_) || (scores.precision, scores.recall, scores.f1) != expected {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("100 random 8x6 instances, {mismatches} mismatches"))
}

struct Corpus {
    train_docs: Vec<ewe::data::Document>,
    test_docs: Vec<ewe::data::Document>,
    vocab: LabelVocab,
}

const SEED: u64 = 7;

fn corpus() -> Corpus {
    let spec = SyntheticSpec {
        n_classes: 8,
        n_docs: 2400,
        zipf_exponent: 1.0,
        keyword_strength: 0.9,
        seed: SEED,
        ..Default::default()
    };
    let mut docs = gen_synthetic(&spec).unwrap().docs;
    let test_docs = docs.split_off(2000);
    let vocab = build_vocab(&docs).unwrap();
    Corpus {
        train_docs: docs,
        test_docs,
        vocab,
    }
}

struct Run {
    f1: f64,
    secs: f64,
    model: Classifier<f32>,
    test: Dataset,
}

/// Trains the u=32, v=8, c=16, L=2, h=8 model for 10 epochs at lr0 = 1e-3.
fn run(corpus: &Corpus, mode: CodecMode, focus: bool, focus_zero_init: bool, vgram: Option<VgramConfig>) -> Run {
    let start = Instant::now();
    let codec = CodecConfig::new(32, 8).with_mode(mode);
    let train_set = prepare_dataset(&corpus.train_docs, &corpus.vocab, &codec).unwrap();
    let test = prepare_dataset(&corpus.test_docs, &corpus.vocab, &codec).unwrap();
    let mut cfg = ModelConfig::elementwise(32, 8, 16, 2, corpus.vocab.len());
    cfg.focus = focus;
    cfg.focus_zero_init = focus_zero_init;
    cfg.vgram = vgram;
    let mut model = Classifier::<f32>::new(&cfg, &mut Rng::seed_from_u64(SEED)).unwrap();
    let run_cfg = RunConfig {
        lr0: 1e-3,
        seed: SEED,
        ..RunConfig::default()
    };
    train(&mut model, &train_set, None, &run_cfg).unwrap();
    let (_, scores) = evaluate(&model, &test, run_cfg.threshold).unwrap();
    Run {
        f1: scores.f1,
        secs: start.elapsed().as_secs_f64(),
        model,
        test,
    }
}

fn end_to_end(corpus: &Corpus) -> (Outcome, Run) {
    let random_focus = run(corpus, CodecMode::Whitespace, true, false, None);
    let zero_focus = run(corpus, CodecMode::Whitespace, true, true, None);
    let detail = format!(
        "held-out micro-F1 {:.4} in {:.0}s (zero-init focus); random-init focus {:.4} in {:.0}s",
        zero_focus.f1, zero_focus.secs, random_focus.f1, random_focus.secs
    );
    (outcome(zero_focus.f1 >= 0.95 && zero_focus.secs < 600.0, detail), zero_focus)
}

fn complexity_parity() -> Outcome {
    let cfg = |v| BenchConfig {
        reps: 10,
        warmup: 2,
        ..BenchConfig::new(128, v, 768, 12)
    };
    let rows = time_interleaved(&[cfg(16), cfg(1)]).unwrap();
    let (wide, flat) = (&rows[0], &rows[1]);
    let ratio = wide.mean_s / flat.mean_s;
    let chars = wide.chars / flat.chars;
    outcome(
        ratio <= 1.10 && chars == 16 && wide.flops == flat.flops,
        format!(
            "v=16 {:.3}s ± {:.3}, v=1 {:.3}s ± {:.3}, latency ratio {ratio:.3} (<= 1.10), chars ratio {chars}",
            wide.mean_s, wide.std_s, flat.mean_s, flat.std_s
        ),
    )
}

fn tokenization_free(corpus: &Corpus) -> Outcome {
    let bytes = run(corpus, CodecMode::ByteStream, true, true, None);
    let vgram = Some(VgramConfig {
        scope: PoolScope::Sliding,
        window: 8,
    });
    let grad = run(corpus, CodecMode::ByteStream, true, true, vgram);

    let mut windows = 0usize;
    let mut worst = 0.0f64;
    for ex in &grad.test.examples {
        let (_, cache) = grad.model.forward(&ex.sample, None).unwrap();
        for alpha in cache.embed.vgram().expect("gradient mode pools").alphas() {
            let sum: f64 = alpha.iter().map(|&a| a as f64).sum();
            worst = worst.max((sum - 1.0).abs());
            windows += 1;
        }
    }
    outcome(
        windows > 0 && worst <= 1e-6 && grad.f1 >= bytes.f1 - 0.05,
        format!(
            "byte_stream F1 {:.4} ({:.0}s), gradient F1 {:.4} ({:.0}s), {windows} alpha vectors, max |sum - 1| {worst:.1e}",
            bytes.f1, bytes.secs, grad.f1, grad.secs
        ),
    )
}

fn focus_ablation(corpus: &Corpus, focus_on: &Run) -> Outcome {
    let off = run(corpus, CodecMode::Whitespace, false, false, None);
    outcome(
        focus_on.f1.is_finite() && off.f1.is_finite(),
        format!("focus on F1 {:.4}, focus off F1 {:.4} ({:.0}s)", focus_on.f1, off.f1, off.secs),
    )
}

fn report(n: usize, name: &str, result: Outcome) -> bool {
    let tag = if result.passed { "PASS" } else { "FAIL" };
    println!("[{tag}] criterion {n}: {name}: {}", result.detail);
    result.passed
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= report(1, "embedding parameter counts", param_counts());
    ok &= report(2, "First/Later one-hot", first_later());
    ok &= report(3, "reshape bijectivity", reshape_bijection());
    ok &= report(4, "head/element alignment", head_alignment());
    ok &= report(5, "gradient checks", grad_checks());
    ok &= report(6, "metric oracle", metric_oracle());

    let corpus = corpus();
    let (result, focus_on) = end_to_end(&corpus);
    ok &= report(7, "end-to-end learning", result);
    ok &= report(8, "complexity parity", complexity_parity());
    ok &= report(9, "tokenization-free modes", tokenization_free(&corpus));
    ok &= report(10, "focus ablation", focus_ablation(&corpus, &focus_on));

    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
