//! Flat `key=value` configuration shared by every subcommand.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use ewe::bench::BenchConfig;
use ewe::codec::{CodecConfig, CodecMode};
use ewe::data::SyntheticSpec;
use ewe::embedding::{EmbedderConfig, PoolScope};
use ewe::encoder::EncoderConfig;
use ewe::float::Precision;
use ewe::model::{ModelConfig, VgramConfig};
use ewe::train::{AdamWConfig, RunConfig};
use ewe::{Error, Result};

/// Every setting a subcommand may read. Width `w = v * c` is derived and
/// heads default to `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct AppConfig {
    pub u: usize,
    pub v: usize,
    pub c: usize,
    pub heads: Option<usize>,
    pub mode: CodecMode,
    pub prepend_cls: bool,

    pub layers: usize,
    pub ffn_dim: Option<usize>,
    pub encoder_dropout: f64,
    pub ln_epsilon: f64,
    pub init_std: f64,

    pub embed_dropout: f64,
    pub focus: bool,
    pub focus_zero_init: bool,
    pub vgram: Option<PoolScope>,
    pub vgram_window: usize,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub threshold: f64,
    pub seed: u64,
    pub precision: Precision,
    pub strict: bool,

    pub corpus: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub gold: Option<PathBuf>,

    pub bench_reps: usize,
    pub bench_warmup: usize,
    /// Sweep entries `u:v:w:L`; empty means the single configured model.
    pub bench_grid: Vec<BenchConfig>,

    pub synth_classes: usize,
    pub synth_docs: usize,
    pub synth_test: usize,
    pub synth_vocab: usize,
    pub synth_tokens: usize,
    pub synth_zipf: f64,
    pub synth_strength: f64,
}

impl Default for AppConfig {
    fn default() -> Self {
        let run = RunConfig::default();
        let adam = AdamWConfig::default();
        let embed = EmbedderConfig::default();
        let synth = SyntheticSpec::default();
        Self {
            u: 128,
            v: 16,
            c: 48,
            heads: None,
            mode: CodecMode::Whitespace,
            prepend_cls: true,
            layers: 12,
            ffn_dim: None,
            encoder_dropout: 0.1,
            ln_epsilon: embed.ln_epsilon,
            init_std: embed.init_std,
            embed_dropout: embed.dropout_rate,
            focus: true,
            focus_zero_init: false,
            vgram: None,
            vgram_window: 2,
            epochs: run.epochs,
            batch_size: run.batch_size,
            lr: run.lr0,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            weight_decay: adam.weight_decay,
            threshold: run.threshold,
            seed: run.seed,
            precision: run.precision,
            strict: false,
            corpus: None,
            test_corpus: None,
            vocab: None,
            checkpoint: None,
            output: None,
            predictions: None,
            gold: None,
            bench_reps: 10,
            bench_warmup: 2,
            bench_grid: Vec::new(),
            synth_classes: synth.n_classes,
            synth_docs: synth.n_docs,
            synth_test: 400,
            synth_vocab: synth.vocab_size,
            synth_tokens: synth.tokens_per_doc,
            synth_zipf: synth.zipf_exponent,
            synth_strength: synth.keyword_strength,
        }
    }
}

const KEYS: &[&str] = &[
    "u", "v", "c", "w", "h", "mode", "prepend_cls", "layers", "ffn_dim", "encoder_dropout", "ln_epsilon",
    "init_std", "embed_dropout", "focus", "focus_zero_init", "vgram", "vgram_window", "epochs", "batch_size", "lr",
    "beta1", "beta2", "adam_eps", "weight_decay", "threshold", "seed", "precision", "strict", "corpus",
    "test_corpus", "vocab", "checkpoint", "output", "predictions", "gold", "bench_reps", "bench_warmup",
    "bench_grid", "synth_classes", "synth_docs", "synth_test", "synth_vocab", "synth_tokens", "synth_zipf",
    "synth_strength",
];

fn canonical(key: &str) -> &str {
    match key {
        "L" => "layers",
        "heads" => "h",
        other => other,
    }
}

/// Reads `key=value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}", n + 1), format!("expected key=value, got {line:?}")))?;
        out.insert(canonical(key.trim()).to_string(), value.trim().to_string());
    }
    Ok(out)
}

fn typed<V: FromStr>(key: &str, raw: &str, expected: &str) -> Result<V> {
    raw.parse()
        .map_err(|_| Error::config(key, format!("expected {expected}, got {raw:?}")))
}

fn parse_grid(raw: &str) -> Result<Vec<BenchConfig>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|entry| {
            let dims: Vec<usize> = entry
                .split(':')
                .map(|d| typed("bench_grid", d, "u:v:w:L entries"))
                .collect::<Result<_>>()?;
            match dims[..] {
                [u, v, w, l] => Ok(BenchConfig::new(u, v, w, l)),
                _ => Err(Error::config("bench_grid", format!("expected u:v:w:L, got {entry:?}"))),
            }
        })
        .collect()
}

impl AppConfig {
    /// Applies the file text first, then `overrides` in order.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = parse_pairs(text)?;
        for (k, v) in overrides {
            pairs.insert(canonical(k).to_string(), v.clone());
        }
        Self::from_pairs(&pairs)
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        if let Some(key) = pairs.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::config(key.clone(), "unknown key"));
        }
        let mut cfg = AppConfig::default();
        let get = |k: &str| pairs.get(k).map(String::as_str);
        macro_rules! set {
            ($field:ident, $what:expr) => {
                if let Some(raw) = get(stringify!($field)) {
                    cfg.$field = typed(stringify!($field), raw, $what)?;
                }
            };
        }
        macro_rules! set_opt {
            ($field:ident, $key:expr, $what:expr) => {
                if let Some(raw) = get($key) {
                    cfg.$field = if raw.is_empty() { None } else { Some(typed($key, raw, $what)?) };
                }
            };
        }
        set!(u, "a positive integer");
        set!(v, "a positive integer");
        set!(c, "a positive integer");
        set_opt!(heads, "h", "a positive integer");
        set!(mode, "whitespace or byte_stream");
        set!(prepend_cls, "true or false");
        set!(layers, "a non-negative integer");
        set_opt!(ffn_dim, "ffn_dim", "a positive integer");
        set!(encoder_dropout, "a number");
        set!(ln_epsilon, "a number");
        set!(init_std, "a number");
        set!(embed_dropout, "a number");
        set!(focus, "true or false");
        set!(focus_zero_init, "true or false");
        if let Some(raw) = get("vgram") {
            cfg.vgram = match raw {
                "" | "none" | "off" => None,
                other => Some(typed("vgram", other, "none, sliding or material_local")?),
            };
        }
        set!(vgram_window, "a positive integer");
        set!(epochs, "a non-negative integer");
        set!(batch_size, "a positive integer");
        set!(lr, "a number");
        set!(beta1, "a number");
        set!(beta2, "a number");
        set!(adam_eps, "a number");
        set!(weight_decay, "a number");
        set!(threshold, "a number");
        set!(seed, "a non-negative integer");
        set!(precision, "f32 or f64");
        set!(strict, "true or false");
        set_opt!(corpus, "corpus", "a path");
        set_opt!(test_corpus, "test_corpus", "a path");
        set_opt!(vocab, "vocab", "a path");
        set_opt!(checkpoint, "checkpoint", "a path");
        set_opt!(output, "output", "a path");
        set_opt!(predictions, "predictions", "a path");
        set_opt!(gold, "gold", "a path");
        set!(bench_reps, "a positive integer");
        set!(bench_warmup, "a non-negative integer");
        if let Some(raw) = get("bench_grid") {
            cfg.bench_grid = parse_grid(raw)?;
        }
        set!(synth_classes, "a positive integer");
        set!(synth_docs, "a positive integer");
        set!(synth_test, "a non-negative integer");
        set!(synth_vocab, "a positive integer");
        set!(synth_tokens, "a positive integer");
        set!(synth_zipf, "a number");
        set!(synth_strength, "a number");

        if let Some(raw) = get("w") {
            let w: usize = typed("w", raw, "a positive integer")?;
            if cfg.v == 0 || w % cfg.v != 0 {
                return Err(Error::config("w", format!("{w} is not divisible by v = {}", cfg.v)));
            }
            if get("c").is_some() && w != cfg.v * cfg.c {
                return Err(Error::config("w", format!("{w} != v * c = {}", cfg.v * cfg.c)));
            }
            cfg.c = w / cfg.v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.u == 0 || self.v == 0 || self.c == 0 {
            return Err(Error::config("u/v/c", "dimensions must be positive"));
        }
        if self.w() % self.heads() != 0 {
            return Err(Error::config("h", format!("w = {} is not divisible by h = {}", self.w(), self.heads())));
        }
        self.run_config().validate()?;
        if !(0.0..1.0).contains(&self.encoder_dropout) {
            return Err(Error::config("encoder_dropout", "must lie in [0, 1)"));
        }
        self.embedder_config().validate()
    }

    pub fn w(&self) -> usize {
        self.v * self.c
    }

    pub fn heads(&self) -> usize {
        self.heads.unwrap_or(self.v)
    }

    pub fn codec_config(&self) -> CodecConfig {
        CodecConfig::new(self.u, self.v)
            .with_mode(self.mode)
            .with_cls(self.prepend_cls)
    }

    pub fn embedder_config(&self) -> EmbedderConfig {
        EmbedderConfig {
            dropout_rate: self.embed_dropout,
            ln_epsilon: self.ln_epsilon,
            init_std: self.init_std,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let mut enc = EncoderConfig::new(self.layers, self.w(), self.heads());
        if let Some(ffn) = self.ffn_dim {
            enc.ffn_dim = ffn;
        }
        enc.dropout_rate = self.encoder_dropout;
        enc.ln_epsilon = self.ln_epsilon;
        enc.init_std = self.init_std;
        enc
    }

    pub fn model_config(&self, n_labels: usize) -> ModelConfig {
        ModelConfig {
            u: self.u,
            v: self.v,
            c: self.c,
            embedder: self.embedder_config(),
            encoder: self.encoder_config(),
            focus: self.focus,
            focus_zero_init: self.focus_zero_init,
            vgram: self.vgram.map(|scope| VgramConfig {
                scope,
                window: self.vgram_window,
            }),
            n_labels,
        }
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.lr,
            adam: AdamWConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
            },
            threshold: self.threshold,
            seed: self.seed,
            precision: self.precision,
        }
    }

    /// The sweep grid, or the configured model when no grid is given.
    pub fn bench_configs(&self) -> Vec<BenchConfig> {
        let base = if self.bench_grid.is_empty() {
            vec![BenchConfig {
                heads: self.heads,
                ..BenchConfig::new(self.u, self.v, self.w(), self.layers)
            }]
        } else {
            self.bench_grid.clone()
        };
        base.into_iter()
            .map(|b| BenchConfig {
                reps: self.bench_reps,
                warmup: self.bench_warmup,
                seed: self.seed,
                ..b
            })
            .collect()
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_classes: self.synth_classes,
            n_docs: self.synth_docs,
            vocab_size: self.synth_vocab,
            tokens_per_doc: self.synth_tokens,
            zipf_exponent: self.synth_zipf,
            keyword_strength: self.synth_strength,
            seed: self.seed,
        }
    }

    /// Canonical text form; `parse(to_text())` reproduces `self`. The derived
    /// width is not written.
    pub fn to_text(&self) -> String {
        fn line(out: &mut String, key: &str, value: impl Display) {
            out.push_str(&format!("{key}={value}\n"));
        }
        fn opt<V: Display>(out: &mut String, key: &str, value: &Option<V>) {
            if let Some(v) = value {
                line(out, key, v);
            }
        }
        fn path(out: &mut String, key: &str, value: &Option<PathBuf>) {
            opt(out, key, &value.as_ref().map(|p| p.display()));
        }
        let mut s = String::new();
        line(&mut s, "u", self.u);
        line(&mut s, "v", self.v);
        line(&mut s, "c", self.c);
        opt(&mut s, "h", &self.heads);
        line(&mut s, "mode", self.mode.as_str());
        line(&mut s, "prepend_cls", self.prepend_cls);
        line(&mut s, "layers", self.layers);
        opt(&mut s, "ffn_dim", &self.ffn_dim);
        line(&mut s, "encoder_dropout", self.encoder_dropout);
        line(&mut s, "ln_epsilon", self.ln_epsilon);
        line(&mut s, "init_std", self.init_std);
        line(&mut s, "embed_dropout", self.embed_dropout);
        line(&mut s, "focus", self.focus);
        line(&mut s, "focus_zero_init", self.focus_zero_init);
        line(&mut s, "vgram", self.vgram.map_or("none", PoolScope::as_str));
        line(&mut s, "vgram_window", self.vgram_window);
        line(&mut s, "epochs", self.epochs);
        line(&mut s, "batch_size", self.batch_size);
        line(&mut s, "lr", self.lr);
        line(&mut s, "beta1", self.beta1);
        line(&mut s, "beta2", self.beta2);
        line(&mut s, "adam_eps", self.adam_eps);
        line(&mut s, "weight_decay", self.weight_decay);
        line(&mut s, "threshold", self.threshold);
        line(&mut s, "seed", self.seed);
        line(&mut s, "precision", self.precision.as_str());
        line(&mut s, "strict", self.strict);
        path(&mut s, "corpus", &self.corpus);
        path(&mut s, "test_corpus", &self.test_corpus);
        path(&mut s, "vocab", &self.vocab);
        path(&mut s, "checkpoint", &self.checkpoint);
        path(&mut s, "output", &self.output);
        path(&mut s, "predictions", &self.predictions);
        path(&mut s, "gold", &self.gold);
        line(&mut s, "bench_reps", self.bench_reps);
        line(&mut s, "bench_warmup", self.bench_warmup);
        if !self.bench_grid.is_empty() {
            let grid: Vec<String> = self
                .bench_grid
                .iter()
                .map(|b| format!("{}:{}:{}:{}", b.u, b.v, b.w, b.layers))
                .collect();
            line(&mut s, "bench_grid", grid.join(","));
        }
        line(&mut s, "synth_classes", self.synth_classes);
        line(&mut s, "synth_docs", self.synth_docs);
        line(&mut s, "synth_test", self.synth_test);
        line(&mut s, "synth_vocab", self.synth_vocab);
        line(&mut s, "synth_tokens", self.synth_tokens);
        line(&mut s, "synth_zipf", self.synth_zipf);
        line(&mut s, "synth_strength", self.synth_strength);
        s
    }
}
