//! Forward-pass latency across (u, v, w) configurations.

use std::time::Instant;

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::codec::{CodecMode, EncodedSample, BYTE_OFFSET};
use crate::embedding::{ElementTable, ElementwiseEmbedding, EmbedderConfig, FocusTables};
use crate::encoder::{attention_flops, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Rng};

pub const MIN_REPS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub u: usize,
    pub v: usize,
    pub w: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    /// Attention heads; `None` means `v`.
    pub heads: Option<usize>,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(u: usize, v: usize, w: usize, layers: usize) -> Self {
        Self {
            u,
            v,
            w,
            layers,
            heads: None,
            reps: 10,
            warmup: 2,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.u == 0 || self.v == 0 || self.w == 0 {
            return Err(Error::config("u/v/w", "dimensions must be positive"));
        }
        if self.w % self.v != 0 {
            return Err(Error::config("w", format!("{} is not divisible by v = {}", self.w, self.v)));
        }
        if self.reps < MIN_REPS {
            return Err(Error::config("reps", format!("need at least {MIN_REPS} timed repetitions")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub u: usize,
    pub v: usize,
    pub w: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    pub mean_s: f64,
    pub std_s: f64,
    /// Characters (elements) covered by one forward pass: `u * v`.
    pub chars: usize,
    pub flops: u64,
}

/// A sweep entry that could not be measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchFailure {
    pub u: usize,
    pub v: usize,
    pub w: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    pub error: String,
}

pub type SweepRow = std::result::Result<BenchResult, BenchFailure>;

fn random_sample(u: usize, v: usize, rng: &mut Rng) -> Result<EncodedSample> {
    let ids = (0..u * v).map(|_| BYTE_OFFSET + rng.random_range(0..256u16)).collect();
    EncodedSample::from_ids(u, v, CodecMode::ByteStream, ids)
}

/// A model and input ready to be timed.
struct Prepared {
    cfg: BenchConfig,
    embedding: ElementwiseEmbedding<f32>,
    encoder: Encoder<f32>,
    sample: EncodedSample,
}

impl Prepared {
    fn new(cfg: &BenchConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::seed_from_u64(cfg.seed);
        let c = cfg.w / cfg.v;
        let encoder_cfg = EncoderConfig::new(cfg.layers, cfg.w, cfg.heads.unwrap_or(cfg.v));
        encoder_cfg.validate()?;
        let embedder = EmbedderConfig::default();
        let embedding = ElementwiseEmbedding {
            table: ElementTable::new(c, embedder.init_std, &mut rng),
            focus: FocusTables::new(cfg.u, cfg.v, c, embedder.init_std, &mut rng),
            scorer: None,
            norm: LayerNorm::new(cfg.w, embedder.ln_epsilon),
            v: cfg.v,
            dropout_rate: embedder.dropout_rate,
        };
        let encoder = Encoder::new(&encoder_cfg, &mut rng);
        let sample = random_sample(cfg.u, cfg.v, &mut rng)?;
        Ok(Self {
            cfg: *cfg,
            embedding,
            encoder,
            sample,
        })
    }

    fn run_once(&self) -> Result<f64> {
        let start = Instant::now();
        let (x, _) = self.embedding.forward(&self.sample, None)?;
        let (out, _) = self.encoder.forward(x.view(), self.sample.mask(), None);
        std::hint::black_box(out[[0, 0]]);
        Ok(start.elapsed().as_secs_f64())
    }

    fn result(&self, times: &[f64]) -> BenchResult {
        let cfg = &self.cfg;
        let (mean_s, std_s) = mean_std(times);
        log::debug!("u={} v={} w={} L={}: {:.4}s ± {:.4}s", cfg.u, cfg.v, cfg.w, cfg.layers, mean_s, std_s);
        BenchResult {
            u: cfg.u,
            v: cfg.v,
            w: cfg.w,
            layers: cfg.layers,
            mean_s,
            std_s,
            chars: cfg.u * cfg.v,
            flops: attention_flops(cfg.u as u64, cfg.w as u64, cfg.layers as u64),
        }
    }
}

/// Times embedding + encoder forward passes at f32 on random byte ids, after
/// `warmup` untimed passes. Runs on the calling thread only.
pub fn time_forward(cfg: &BenchConfig) -> Result<BenchResult> {
    let prepared = Prepared::new(cfg)?;
    for _ in 0..cfg.warmup {
        prepared.run_once()?;
    }
    let times = (0..cfg.reps).map(|_| prepared.run_once()).collect::<Result<Vec<_>>>()?;
    Ok(prepared.result(&times))
}

/// Like [`time_forward`] for several configs, but the timed passes alternate
/// between them so slow drift of the machine hits every config alike. Each
/// config keeps its own `warmup` and `reps`.
pub fn time_interleaved(cfgs: &[BenchConfig]) -> Result<Vec<BenchResult>> {
    let prepared = cfgs.iter().map(Prepared::new).collect::<Result<Vec<_>>>()?;
    for p in &prepared {
        for _ in 0..p.cfg.warmup {
            p.run_once()?;
        }
    }
    let mut times = vec![Vec::new(); prepared.len()];
    let rounds = cfgs.iter().map(|c| c.reps).max().unwrap_or(0);
    for round in 0..rounds {
        for (p, t) in prepared.iter().zip(&mut times) {
            if round < p.cfg.reps {
                t.push(p.run_once()?);
            }
        }
    }
    Ok(prepared.iter().zip(&times).map(|(p, t)| p.result(t)).collect())
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Measures every config in order; a failing config is recorded and the
/// sweep moves on.
pub fn sweep(grid: &[BenchConfig]) -> Vec<SweepRow> {
    grid.iter()
        .map(|cfg| {
            time_forward(cfg).map_err(|e| BenchFailure {
                u: cfg.u,
                v: cfg.v,
                w: cfg.w,
                layers: cfg.layers,
                error: e.to_string(),
            })
        })
        .collect()
}

/// One JSON object per line.
pub fn to_jsonl(rows: &[SweepRow]) -> String {
    rows.iter()
        .map(|row| match row {
            Ok(r) => serde_json::to_string(r),
            Err(f) => serde_json::to_string(f),
        })
        .map(|line| line.expect("plain structs serialize") + "\n")
        .collect()
}

/// Least-squares slope of `ln t` against `ln x`.
pub fn fit_exponent(points: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, t)| (x.ln(), t.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small(u: usize, v: usize) -> BenchConfig {
        BenchConfig {
            reps: 5,
            warmup: 1,
            ..BenchConfig::new(u, v, 32, 1)
        }
    }

    #[test]
    fn result_echoes_config() {
        let r = time_forward(&small(8, 4)).unwrap();
        assert_eq!((r.u, r.v, r.w, r.layers, r.chars), (8, 4, 32, 1, 32));
        assert_eq!(r.flops, attention_flops(8, 32, 1));
        assert!(r.mean_s > 0.0 && r.std_s >= 0.0);
    }

    #[test]
    fn flops_do_not_depend_on_v() {
        let a = time_forward(&small(8, 1)).unwrap();
        let b = time_forward(&small(8, 16)).unwrap();
        assert_eq!(a.flops, b.flops);
        assert_eq!(b.chars / a.chars, 16);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small(8, 3);
        assert!(time_forward(&cfg).is_err());
        cfg.v = 4;
        cfg.reps = 4;
        assert!(time_forward(&cfg).is_err());
    }

    #[test]
    fn sweep_records_failures_and_continues() {
        assert!(sweep(&[]).is_empty());
        let rows = sweep(&[small(8, 3), small(8, 4)]);
        assert!(rows[0].is_err());
        assert!(rows[1].is_ok());
        let text = to_jsonl(&rows);
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert!(lines[0]["error"].as_str().unwrap().contains("divisible"));
        for key in ["u", "v", "w", "L", "mean_s", "std_s", "chars", "flops"] {
            assert!(lines[1].get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn interleaved_matches_config_shapes() {
        let cfgs = [small(8, 1), BenchConfig { reps: 6, ..small(8, 4) }];
        let rows = time_interleaved(&cfgs).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].v, rows[1].v, rows[1].chars), (1, 4, 32));
        assert!(rows.iter().all(|r| r.mean_s > 0.0));
        assert!(time_interleaved(&[small(8, 3)]).is_err());
    }

    #[test]
    fn mean_std_and_exponent() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_abs_diff_eq!(m, 2.0);
        assert_abs_diff_eq!(s, 1.0);
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0].iter().map(|&x| (x, 3.0 * x * x)).collect();
        assert_abs_diff_eq!(fit_exponent(&pts), 2.0, epsilon = 1e-12);
    }
}
