//! The multilabel classifier: elementwise embedding, encoder stack and a
//! pooled classification head.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;

use crate::codec::{EncodedSample, ELEMENT_VOCAB};
use crate::embedding::{ElementTable, ElementwiseEmbedding, EmbedCache, EmbedderConfig, FocusTables, GradScorer, PoolScope};
use crate::encoder::{Encoder, EncoderConfig, LayerCache};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::nn::{join, LayerNorm, Linear, ParamKind, Parameters, Rng};
use crate::train::loss::{bce_grad, bce_loss};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VgramConfig {
    pub scope: PoolScope,
    pub window: usize,
}

/// Everything needed to build a classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Materials per sample; sizes the focus tables.
    pub u: usize,
    pub v: usize,
    pub c: usize,
    pub embedder: EmbedderConfig,
    pub encoder: EncoderConfig,
    pub focus: bool,
    /// Start focus tables at zero instead of random normal.
    pub focus_zero_init: bool,
    pub vgram: Option<VgramConfig>,
    pub n_labels: usize,
}

impl ModelConfig {
    /// `h = v` heads over `w = v*c`.
    pub fn elementwise(u: usize, v: usize, c: usize, layers: usize, n_labels: usize) -> Self {
        Self {
            u,
            v,
            c,
            embedder: EmbedderConfig::default(),
            encoder: EncoderConfig::new(layers, v * c, v),
            focus: true,
            focus_zero_init: false,
            vgram: None,
            n_labels,
        }
    }

    pub fn width(&self) -> usize {
        self.v * self.c
    }

    pub fn validate(&self) -> Result<()> {
        if self.u == 0 || self.v == 0 || self.c == 0 {
            return Err(Error::config("u/v/c", "dimensions must be positive"));
        }
        if self.encoder.hidden != self.width() {
            return Err(Error::config(
                "w",
                format!("hidden width {} must equal v*c = {}", self.encoder.hidden, self.width()),
            ));
        }
        if self.n_labels == 0 {
            return Err(Error::config("n_labels", "need at least one label"));
        }
        if let Some(vg) = self.vgram {
            if vg.window == 0 {
                return Err(Error::config("vgram_window", "must be at least 1"));
            }
        }
        self.embedder.validate()?;
        self.encoder.validate()
    }
}

/// Pooler (tanh dense layer over the first material) and output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<T> {
    pub pooler: Linear<T>,
    pub output: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    first: Array2<T>,
    pooled: Array2<T>,
}

impl<T: Float> ClassifierHead<T> {
    pub fn new(width: usize, n_labels: usize, init_std: f64, rng: &mut Rng) -> Self {
        Self {
            pooler: Linear::new(width, width, init_std, rng),
            output: Linear::new(width, n_labels, init_std, rng),
        }
    }

    pub fn forward(&self, hidden: ArrayView2<T>) -> (Array1<T>, HeadCache<T>) {
        let first = hidden.slice(ndarray::s![0..1, ..]).to_owned();
        let pooled = self.pooler.forward(first.view()).mapv(|x| x.tanh());
        let logits = self.output.forward(pooled.view()).index_axis_move(Axis(0), 0);
        (logits, HeadCache { first, pooled })
    }

    /// Returns the gradient w.r.t. the full hidden matrix of `rows` materials.
    pub fn backward(&self, cache: &HeadCache<T>, dlogits: ArrayView1<T>, rows: usize, grad: &mut ClassifierHead<T>) -> Array2<T> {
        let dlogits = dlogits.insert_axis(Axis(0));
        let mut dpooled = self.output.backward(cache.pooled.view(), dlogits, &mut grad.output);
        dpooled.zip_mut_with(&cache.pooled, |d, &p| *d *= T::one() - p * p);
        let dfirst = self.pooler.backward(cache.first.view(), dpooled.view(), &mut grad.pooler);
        let mut dhidden = Array2::zeros((rows, dfirst.ncols()));
        dhidden.row_mut(0).assign(&dfirst.row(0));
        dhidden
    }
}

impl<T: Float> Parameters<T> for ClassifierHead<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, ArrayViewD<'a, T>)) {
        self.pooler.visit(&join(prefix, "pooler"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ParamKind, ArrayViewMutD<'a, T>),
    ) {
        self.pooler.visit_mut(&join(prefix, "pooler"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }

    fn zeros_like(&self) -> Self {
        Self {
            pooler: self.pooler.zeros_like(),
            output: self.output.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T> {
    pub config: ModelConfig,
    pub embedding: ElementwiseEmbedding<T>,
    pub encoder: Encoder<T>,
    pub head: ClassifierHead<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub embed: EmbedCache<T>,
    pub layers: Vec<LayerCache<T>>,
    pub head: HeadCache<T>,
    rows: usize,
}

impl<T: Float> Classifier<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let init_std = cfg.embedder.init_std;
        let table = ElementTable::new(cfg.c, init_std, rng);
        let focus = match (cfg.focus, cfg.focus_zero_init) {
            (false, _) => FocusTables::disabled(cfg.v, cfg.c),
            (true, true) => FocusTables::zeros(cfg.u, cfg.v, cfg.c),
            (true, false) => FocusTables::new(cfg.u, cfg.v, cfg.c, init_std, rng),
        };
        let scorer = cfg.vgram.map(|vg| GradScorer::new(cfg.c, vg.window, vg.scope, init_std, rng));
        let embedding = ElementwiseEmbedding {
            table,
            focus,
            scorer,
            norm: LayerNorm::new(cfg.width(), cfg.embedder.ln_epsilon),
            v: cfg.v,
            dropout_rate: cfg.embedder.dropout_rate,
        };
        let encoder = Encoder::new(&cfg.encoder, rng);
        let head = ClassifierHead::new(cfg.width(), cfg.n_labels, cfg.encoder.init_std, rng);
        Ok(Self {
            config: cfg.clone(),
            embedding,
            encoder,
            head,
        })
    }

    pub fn n_labels(&self) -> usize {
        self.head.output.output_dim()
    }

    /// Logits for one sample; dropout is active iff `rng` is given.
    pub fn forward(&self, sample: &EncodedSample, mut rng: Option<&mut Rng>) -> Result<(Array1<T>, ForwardCache<T>)> {
        let (x, embed) = self.embedding.forward(sample, rng.as_deref_mut())?;
        let (hidden, layers) = self.encoder.forward(x.view(), sample.mask(), rng);
        let (logits, head) = self.head.forward(hidden.view());
        let rows = hidden.nrows();
        Ok((logits, ForwardCache { embed, layers, head, rows }))
    }

    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: ArrayView1<T>, grad: &mut Classifier<T>) {
        let dhidden = self.head.backward(&cache.head, dlogits, cache.rows, &mut grad.head);
        let dx = self.encoder.backward(&cache.layers, dhidden.view(), &mut grad.encoder);
        self.embedding.backward(&cache.embed, dx.view(), &mut grad.embedding);
    }

    /// Mean BCE of one sample, evaluated without dropout.
    pub fn loss(&self, sample: &EncodedSample, target: &[u8]) -> Result<T> {
        let (logits, _) = self.forward(sample, None)?;
        Ok(bce_loss(logits.view(), target))
    }

    /// Loss of one sample with its gradients accumulated into `grad`.
    pub fn accumulate_grad(&self, sample: &EncodedSample, target: &[u8], rng: Option<&mut Rng>, grad: &mut Classifier<T>) -> Result<T> {
        if target.len() != self.n_labels() {
            return Err(Error::DimensionMismatch {
                context: "target width",
                expected: self.n_labels(),
                actual: target.len(),
            });
        }
        let (logits, cache) = self.forward(sample, rng)?;
        let loss = bce_loss(logits.view(), target);
        let dlogits = bce_grad(logits.view(), target);
        self.backward(&cache, dlogits.view(), grad);
        Ok(loss)
    }

    pub fn probabilities(&self, sample: &EncodedSample) -> Result<Array1<T>> {
        let (logits, _) = self.forward(sample, None)?;
        Ok(logits.mapv(|z| T::one() / (T::one() + (-z).exp())))
    }

    /// Named tensors in visiting order.
    pub fn named_params(&self) -> Vec<(String, ParamKind, ArrayViewD<'_, T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, kind, t| out.push((name, kind, t)));
        out
    }

    /// Converts every tensor to another float type.
    pub fn cast<U: Float>(&self) -> Classifier<U> {
        let mut out = Classifier::<U>::new(&self.config, &mut Rng::seed_from_u64(0)).expect("config already validated");
        let source = self.named_params();
        let mut i = 0;
        out.visit_mut("", &mut |_, _, mut t| {
            t.zip_mut_with(&source[i].2, |d, &s| *d = U::of(s.as_f64()));
            i += 1;
        });
        out
    }
}

impl<T: Float> Parameters<T> for Classifier<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, ArrayViewD<'a, T>)) {
        self.embedding.visit(&join(prefix, "embedding"), f);
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ParamKind, ArrayViewMutD<'a, T>),
    ) {
        self.embedding.visit_mut(&join(prefix, "embedding"), f);
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }

    fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            embedding: self.embedding.zeros_like(),
            encoder: self.encoder.zeros_like(),
            head: self.head.zeros_like(),
        }
    }
}

/// Rows of the element table that received no gradient.
pub fn untouched_element_rows<T: Float>(grad: &Classifier<T>) -> Vec<usize> {
    (0..ELEMENT_VOCAB)
        .filter(|&r| grad.embedding.table.weights.row(r).iter().all(|&x| x == T::zero()))
        .collect()
}
