//! Post-layer-norm transformer encoder.
//!
//! With `h = v` heads over `w = v*c` hidden units, head `n` attends over the
//! `n`-th `c`-wide slice of every material, i.e. over the `n`-th elements.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::nn::{self, gelu, gelu_grad, join, masked_softmax, softmax_backward, LayerNorm, LayerNormCache, Linear, ParamKind, Parameters, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
    pub ln_epsilon: f64,
    pub init_std: f64,
}

impl EncoderConfig {
    /// BERT-style defaults for a given width: `4 * w` feed-forward units.
    pub fn new(layers: usize, hidden: usize, heads: usize) -> Self {
        Self {
            layers,
            hidden,
            heads,
            ffn_dim: 4 * hidden,
            dropout_rate: 0.1,
            ln_epsilon: 1e-12,
            init_std: 0.02,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::config("w", "must be positive"));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::config(
                "h",
                format!("{} heads do not divide hidden width {}", self.heads, self.hidden),
            ));
        }
        if self.ffn_dim == 0 {
            return Err(Error::config("ffn_dim", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        if self.ln_epsilon.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::config("ln_epsilon", "must be positive"));
        }
        Ok(())
    }
}

/// `(u, w)` to `(h, u, w/h)`: head `n` takes columns `n*d .. (n+1)*d`.
pub fn split_heads<T: Float>(x: ArrayView2<T>, heads: usize) -> Result<Array3<T>> {
    let (u, w) = x.dim();
    if heads == 0 || w % heads != 0 {
        return Err(Error::DimensionMismatch {
            context: "split_heads width",
            expected: heads,
            actual: w,
        });
    }
    let d = w / heads;
    let mut out = Array3::zeros((heads, u, d));
    for n in 0..heads {
        out.index_axis_mut(Axis(0), n).assign(&x.slice(s![.., n * d..(n + 1) * d]));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    input: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    context: Array2<T>,
}

impl<T> AttentionCache<T> {
    /// Per-head `(u, u)` attention weights.
    pub fn probs(&self) -> &[Array2<T>] {
        &self.probs
    }
}

impl<T: Float> MultiHeadAttention<T> {
    pub fn new(width: usize, heads: usize, init_std: f64, rng: &mut Rng) -> Self {
        Self {
            query: Linear::new(width, width, init_std, rng),
            key: Linear::new(width, width, init_std, rng),
            value: Linear::new(width, width, init_std, rng),
            output: Linear::new(width, width, init_std, rng),
            heads,
        }
    }

    fn head_dim(&self) -> usize {
        self.query.output_dim() / self.heads
    }

    /// Scaled dot-product attention; keys whose `mask` entry is false are
    /// excluded from every softmax.
    pub fn forward(&self, x: ArrayView2<T>, mask: &[bool]) -> (Array2<T>, AttentionCache<T>) {
        let q = self.query.forward(x);
        let k = self.key.forward(x);
        let v = self.value.forward(x);
        let d = self.head_dim();
        let scale = T::of(1.0 / (d as f64).sqrt());
        let mut context = Array2::zeros(q.raw_dim());
        let mut probs = Vec::with_capacity(self.heads);
        for n in 0..self.heads {
            let cols = s![.., n * d..(n + 1) * d];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t());
            scores *= scale;
            for row in scores.rows_mut() {
                masked_softmax(row, mask);
            }
            context.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let out = self.output.forward(context.view());
        let cache = AttentionCache {
            input: x.to_owned(),
            q,
            k,
            v,
            probs,
            context,
        };
        (out, cache)
    }

    pub fn backward(&self, cache: &AttentionCache<T>, dout: ArrayView2<T>, grad: &mut MultiHeadAttention<T>) -> Array2<T> {
        let dcontext = self.output.backward(cache.context.view(), dout, &mut grad.output);
        let d = self.head_dim();
        let scale = T::of(1.0 / (d as f64).sqrt());
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for n in 0..self.heads {
            let cols = s![.., n * d..(n + 1) * d];
            let p = &cache.probs[n];
            let dctx = dcontext.slice(cols);
            let dp = dctx.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dctx));
            let mut dscores = Array2::zeros(p.raw_dim());
            for ((mut ds, pr), dpr) in dscores.rows_mut().into_iter().zip(p.rows()).zip(dp.rows()) {
                ds.assign(&softmax_backward(pr, dpr));
            }
            dscores *= scale;
            dq.slice_mut(cols).assign(&dscores.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&dscores.t().dot(&cache.q.slice(cols)));
        }
        let x = cache.input.view();
        let mut dx = self.query.backward(x, dq.view(), &mut grad.query);
        dx += &self.key.backward(x, dk.view(), &mut grad.key);
        dx += &self.value.backward(x, dv.view(), &mut grad.value);
        dx
    }
}

impl<T: Float> Parameters<T> for MultiHeadAttention<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, ArrayViewD<'a, T>)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ParamKind, ArrayViewMutD<'a, T>),
    ) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }

    fn zeros_like(&self) -> Self {
        Self {
            query: self.query.zeros_like(),
            key: self.key.zeros_like(),
            value: self.value.zeros_like(),
            output: self.output.zeros_like(),
            heads: self.heads,
        }
    }
}

/// One block: `X = LN(X + Drop(MHA(X)))`, then `X = LN(X + Drop(FFN(X)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T> {
    pub attention: MultiHeadAttention<T>,
    pub attention_norm: LayerNorm<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
    pub ffn_norm: LayerNorm<T>,
}

#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    attention: AttentionCache<T>,
    attention_dropout: Option<Array2<T>>,
    attention_norm: LayerNormCache<T>,
    mid: Array2<T>,
    pre_activation: Array2<T>,
    activation: Array2<T>,
    ffn_dropout: Option<Array2<T>>,
    ffn_norm: LayerNormCache<T>,
}

impl<T> LayerCache<T> {
    pub fn attention(&self) -> &AttentionCache<T> {
        &self.attention
    }
}

impl<T: Float> EncoderLayer<T> {
    pub fn new(cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        Self {
            attention: MultiHeadAttention::new(cfg.hidden, cfg.heads, cfg.init_std, rng),
            attention_norm: LayerNorm::new(cfg.hidden, cfg.ln_epsilon),
            ffn_in: Linear::new(cfg.hidden, cfg.ffn_dim, cfg.init_std, rng),
            ffn_out: Linear::new(cfg.ffn_dim, cfg.hidden, cfg.init_std, rng),
            ffn_norm: LayerNorm::new(cfg.hidden, cfg.ln_epsilon),
        }
    }

    pub fn forward(
        &self,
        x: ArrayView2<T>,
        mask: &[bool],
        dropout_rate: f64,
        mut rng: Option<&mut Rng>,
    ) -> (Array2<T>, LayerCache<T>) {
        let (mut attn, attention) = self.attention.forward(x, mask);
        let attention_dropout = nn::dropout(&mut attn, dropout_rate, rng.as_deref_mut());
        attn += &x;
        let (mid, attention_norm) = self.attention_norm.forward(attn.view());

        let pre_activation = self.ffn_in.forward(mid.view());
        let activation = pre_activation.mapv(gelu);
        let mut ffn = self.ffn_out.forward(activation.view());
        let ffn_dropout = nn::dropout(&mut ffn, dropout_rate, rng);
        ffn += &mid;
        let (out, ffn_norm) = self.ffn_norm.forward(ffn.view());

        let cache = LayerCache {
            attention,
            attention_dropout,
            attention_norm,
            mid,
            pre_activation,
            activation,
            ffn_dropout,
            ffn_norm,
        };
        (out, cache)
    }

    pub fn backward(&self, cache: &LayerCache<T>, dout: ArrayView2<T>, grad: &mut EncoderLayer<T>) -> Array2<T> {
        let dsum = self.ffn_norm.backward(&cache.ffn_norm, dout, &mut grad.ffn_norm);
        let mut dffn = dsum.clone();
        nn::dropout_backward(&mut dffn, cache.ffn_dropout.as_ref());
        let mut dact = self.ffn_out.backward(cache.activation.view(), dffn.view(), &mut grad.ffn_out);
        dact.zip_mut_with(&cache.pre_activation, |d, &z| *d *= gelu_grad(z));
        let mut dmid = self.ffn_in.backward(cache.mid.view(), dact.view(), &mut grad.ffn_in);
        dmid += &dsum;

        let dsum = self.attention_norm.backward(&cache.attention_norm, dmid.view(), &mut grad.attention_norm);
        let mut dattn = dsum.clone();
        nn::dropout_backward(&mut dattn, cache.attention_dropout.as_ref());
        let mut dx = self.attention.backward(&cache.attention, dattn.view(), &mut grad.attention);
        dx += &dsum;
        dx
    }
}

impl<T: Float> Parameters<T> for EncoderLayer<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, ArrayViewD<'a, T>)) {
        self.attention.visit(&join(prefix, "attention"), f);
        self.attention_norm.visit(&join(prefix, "attention_norm"), f);
        self.ffn_in.visit(&join(prefix, "ffn_in"), f);
        self.ffn_out.visit(&join(prefix, "ffn_out"), f);
        self.ffn_norm.visit(&join(prefix, "ffn_norm"), f);
    }

    fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ParamKind, ArrayViewMutD<'a, T>),
    ) {
        self.attention.visit_mut(&join(prefix, "attention"), f);
        self.attention_norm.visit_mut(&join(prefix, "attention_norm"), f);
        self.ffn_in.visit_mut(&join(prefix, "ffn_in"), f);
        self.ffn_out.visit_mut(&join(prefix, "ffn_out"), f);
        self.ffn_norm.visit_mut(&join(prefix, "ffn_norm"), f);
    }

    fn zeros_like(&self) -> Self {
        Self {
            attention: self.attention.zeros_like(),
            attention_norm: self.attention_norm.zeros_like(),
            ffn_in: self.ffn_in.zeros_like(),
            ffn_out: self.ffn_out.zeros_like(),
            ffn_norm: self.ffn_norm.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub layers: Vec<EncoderLayer<T>>,
    pub dropout_rate: f64,
}

impl<T: Float> Encoder<T> {
    pub fn new(cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        Self {
            layers: (0..cfg.layers).map(|_| EncoderLayer::new(cfg, rng)).collect(),
            dropout_rate: cfg.dropout_rate,
        }
    }

    /// Dropout is active iff `rng` is given.
    pub fn forward(&self, x: ArrayView2<T>, mask: &[bool], mut rng: Option<&mut Rng>) -> (Array2<T>, Vec<LayerCache<T>>) {
        let mut hidden = x.to_owned();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, cache) = layer.forward(hidden.view(), mask, self.dropout_rate, rng.as_deref_mut());
            hidden = next;
            caches.push(cache);
        }
        (hidden, caches)
    }

    pub fn backward(&self, caches: &[LayerCache<T>], dout: ArrayView2<T>, grad: &mut Encoder<T>) -> Array2<T> {
        let mut d = dout.to_owned();
        for ((layer, cache), g) in self.layers.iter().zip(caches).zip(grad.layers.iter_mut()).rev() {
            d = layer.backward(cache, d.view(), g);
        }
        d
    }
}

impl<T: Float> Parameters<T> for Encoder<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, ArrayViewD<'a, T>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("layer{i}")), f);
        }
    }

    fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ParamKind, ArrayViewMutD<'a, T>),
    ) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(EncoderLayer::zeros_like).collect(),
            dropout_rate: self.dropout_rate,
        }
    }
}

/// Runs the whole stack; dropout only when `rng` is given.
pub fn encoder_forward<T: Float>(x: ArrayView2<T>, encoder: &Encoder<T>, mask: &[bool], rng: Option<&mut Rng>) -> Array2<T> {
    encoder.forward(x, mask, rng).0
}

/// Multiply-accumulates of the two attention products (`QK^T` and `AV`)
/// over `L` layers, counted as `4 L u^2 w`. Independent of `v`.
pub fn attention_flops(u: u64, w: u64, layers: u64) -> u64 {
    4 * layers * u * u * w
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use crate::nn::Rng;

    fn rng() -> Rng {
        Rng::seed_from_u64(5)
    }

    #[test]
    fn split_heads_examples() {
        let x = array![[1.0, 2.0, 3.0, 4.0]];
        let h = split_heads(x.view(), 2).unwrap();
        assert_eq!(h.index_axis(Axis(0), 0), array![[1.0, 2.0]]);
        assert_eq!(h.index_axis(Axis(0), 1), array![[3.0, 4.0]]);
        let single = split_heads(x.view(), 1).unwrap();
        assert_eq!(single.index_axis(Axis(0), 0), x);
        assert!(split_heads(x.view(), 3).is_err());
    }

    #[test]
    fn single_position_attends_to_itself() {
        let mha = MultiHeadAttention::<f64>::new(4, 2, 0.5, &mut rng());
        let x = array![[0.3, -1.0, 2.0, 0.5]];
        let (out, cache) = mha.forward(x.view(), &[true]);
        for p in cache.probs() {
            assert_eq!(p, &array![[1.0]]);
        }
        let expected = mha.output.forward(mha.value.forward(x.view()).view());
        assert_eq!(out, expected);
    }

    #[test]
    fn identical_rows_attend_uniformly_over_unmasked_keys() {
        let mha = MultiHeadAttention::<f64>::new(6, 3, 0.5, &mut rng());
        let row = array![0.1, 0.2, -0.3, 0.4, 0.5, -0.6];
        let x = ndarray::stack![Axis(0), row, row, row, row];
        let (_, cache) = mha.forward(x.view(), &[true, true, true, false]);
        for p in cache.probs() {
            for r in p.rows() {
                for k in 0..3 {
                    assert_abs_diff_eq!(r[k], 1.0 / 3.0, epsilon = 1e-12);
                }
                assert_eq!(r[3], 0.0);
            }
        }
    }

    #[test]
    fn masked_content_does_not_leak() {
        let mut r = rng();
        let mha = MultiHeadAttention::<f64>::new(4, 2, 0.5, &mut r);
        let x: Array2<f64> = nn::normal_matrix(3, 4, 1.0, &mut r);
        let mut y = x.clone();
        y.row_mut(2).fill(42.0);
        let mask = [true, true, false];
        let (a, _) = mha.forward(x.view(), &mask);
        let (b, _) = mha.forward(y.view(), &mask);
        assert_eq!(a.slice(s![..2, ..]), b.slice(s![..2, ..]));
    }

    #[test]
    fn zero_layers_is_identity() {
        let cfg = EncoderConfig::new(0, 8, 2);
        let enc = Encoder::<f64>::new(&cfg, &mut rng());
        let x: Array2<f64> = nn::normal_matrix(3, 8, 1.0, &mut rng());
        assert_eq!(encoder_forward(x.view(), &enc, &[true; 3], None), x);
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::new(1, 100, 16).validate().is_err());
        assert!(EncoderConfig::new(1, 768, 16).validate().is_ok());
        assert_eq!(EncoderConfig::new(1, 768, 16).head_dim(), 48);
        assert_eq!(EncoderConfig::new(1, 768, 16).ffn_dim, 3072);
    }

    #[test]
    fn flops_examples() {
        assert_eq!(attention_flops(128, 768, 12), 603_979_776);
        assert_eq!(attention_flops(256, 768, 12), 4 * attention_flops(128, 768, 12));
    }

    #[test]
    fn full_size_forward_shape() {
        let cfg = EncoderConfig::new(12, 768, 16);
        let enc = Encoder::<f32>::new(&cfg, &mut rng());
        let x: Array2<f32> = nn::normal_matrix(128, 768, 1.0, &mut rng());
        let y = encoder_forward(x.view(), &enc, &[true; 128], None);
        assert_eq!(y.dim(), (128, 768));
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn layer_backward_matches_finite_differences() {
        let mut r = rng();
        let mut cfg = EncoderConfig::new(1, 8, 2);
        cfg.init_std = 0.5;
        cfg.ln_epsilon = 1e-5;
        let enc = Encoder::<f64>::new(&cfg, &mut r);
        let x: Array2<f64> = nn::normal_matrix(4, 8, 1.0, &mut r);
        let probe: Array2<f64> = nn::normal_matrix(4, 8, 1.0, &mut r);
        let mask = [true, true, true, false];
        let f = |x: &Array2<f64>| (&encoder_forward(x.view(), &enc, &mask, None) * &probe).sum();
        let (_, caches) = enc.forward(x.view(), &mask, None);
        let mut grad = enc.zeros_like();
        let dx = enc.backward(&caches, probe.view(), &mut grad);
        let h = 1e-6;
        for idx in 0..x.len() {
            let (i, j) = (idx / 8, idx % 8);
            let (mut p, mut m) = (x.clone(), x.clone());
            p[[i, j]] += h;
            m[[i, j]] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert_abs_diff_eq!(dx[[i, j]], fd, epsilon = 1e-6);
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(seed in any::<u64>(), u in 1usize..8, valid in 1usize..8) {
            let mut r = Rng::seed_from_u64(seed);
            let mha = MultiHeadAttention::<f32>::new(8, 4, 1.0, &mut r);
            let x: Array2<f32> = nn::normal_matrix(u, 8, 2.0, &mut r);
            let mask: Vec<bool> = (0..u).map(|i| i < valid).collect();
            let (out, cache) = mha.forward(x.view(), &mask);
            prop_assert_eq!(out.dim(), (u, 8));
            for p in cache.probs() {
                for row in p.rows() {
                    prop_assert!((row.sum() - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}
