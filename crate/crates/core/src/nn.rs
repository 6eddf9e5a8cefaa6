//! Building blocks shared by the embedding, encoder and classifier head:
//! dense layers, layer normalization, GELU, dropout and masked softmax, each
//! with a hand-written backward pass.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMut1, ArrayViewMutD, Axis, Zip};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::float::Float;

/// Random stream used for initialization, shuffling and dropout.
pub type Rng = rand_chacha::ChaCha8Rng;

/// How a parameter tensor is treated by the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Embedding,
}

impl ParamKind {
    /// Only dense weights are decayed; embeddings, norms and biases are not.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

/// Uniform access to the trainable tensors of a module.
///
/// Visiting order is fixed, so two instances of the same shape (weights and
/// their gradients, say) yield tensors in matching order.
pub trait Parameters<T: Float> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, ArrayViewD<'a, T>));

    fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ParamKind, ArrayViewMutD<'a, T>),
    );

    /// Same structure, every tensor filled with zeros.
    fn zeros_like(&self) -> Self
    where
        Self: Sized;

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, t| n += t.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn normal_matrix<T: Float>(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Array2<T> {
    let dist = Normal::new(0.0, std).expect("init std must be finite and positive");
    Array2::from_shape_simple_fn((rows, cols), || T::of(dist.sample(rng)))
}

pub(crate) fn normal_vector<T: Float>(len: usize, std: f64, rng: &mut Rng) -> Array1<T> {
    let dist = Normal::new(0.0, std).expect("init std must be finite and positive");
    Array1::from_shape_simple_fn(len, || T::of(dist.sample(rng)))
}

/// Dense layer `y = x W + b` with `W` stored as (in, out).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Float> Linear<T> {
    pub fn new(input: usize, output: usize, init_std: f64, rng: &mut Rng) -> Self {
        Self {
            weight: normal_matrix(input, output, init_std, rng),
            bias: Array1::zeros(output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<T>, dy: ArrayView2<T>, grad: &mut Linear<T>) -> Array2<T> {
        grad.weight += &x.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

impl<T: Float> Parameters<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, ArrayViewD<'a, T>)) {
        f(join(prefix, "weight"), ParamKind::Weight, self.weight.view().into_dyn());
        f(join(prefix, "bias"), ParamKind::Bias, self.bias.view().into_dyn());
    }

    fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ParamKind, ArrayViewMutD<'a, T>),
    ) {
        f(join(prefix, "weight"), ParamKind::Weight, self.weight.view_mut().into_dyn());
        f(join(prefix, "bias"), ParamKind::Bias, self.bias.view_mut().into_dyn());
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.output_dim())
    }
}

/// Row-wise layer normalization with learned scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub eps: T,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    normed: Array2<T>,
    inv_std: Array1<T>,
}

impl<T: Float> LayerNorm<T> {
    pub fn new(width: usize, eps: f64) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            eps: T::of(eps),
        }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let width = T::of(x.ncols() as f64);
        let mut normed = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in normed.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / width;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / width;
            let inv = T::one() / (var + self.eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            *s = inv;
        }
        let mut y = &normed * &self.gamma;
        y += &self.beta;
        (y, LayerNormCache { normed, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: ArrayView2<T>, grad: &mut LayerNorm<T>) -> Array2<T> {
        grad.gamma += &(&dy * &cache.normed).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let width = T::of(dy.ncols() as f64);
        let mut dx = &dy * &self.gamma;
        for ((mut row, xhat), &inv) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.normed.rows())
            .zip(cache.inv_std.iter())
        {
            let mean_d = row.sum() / width;
            let mean_dx = row.iter().zip(xhat.iter()).map(|(&a, &b)| a * b).sum::<T>() / width;
            Zip::from(&mut row)
                .and(&xhat)
                .for_each(|d, &xh| *d = inv * (*d - mean_d - xh * mean_dx));
        }
        dx
    }
}

impl<T: Float> Parameters<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, ArrayViewD<'a, T>)) {
        f(join(prefix, "gamma"), ParamKind::Norm, self.gamma.view().into_dyn());
        f(join(prefix, "beta"), ParamKind::Norm, self.beta.view().into_dyn());
    }

    fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ParamKind, ArrayViewMutD<'a, T>),
    ) {
        f(join(prefix, "gamma"), ParamKind::Norm, self.gamma.view_mut().into_dyn());
        f(join(prefix, "beta"), ParamKind::Norm, self.beta.view_mut().into_dyn());
    }

    fn zeros_like(&self) -> Self {
        Self {
            gamma: Array1::zeros(self.gamma.len()),
            beta: Array1::zeros(self.beta.len()),
            eps: self.eps,
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu<T: Float>(x: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

pub fn gelu_grad<T: Float>(x: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
}

/// Inverted dropout. Returns the scaled keep mask, or `None` when inactive.
pub fn dropout<T: Float>(x: &mut Array2<T>, rate: f64, rng: Option<&mut Rng>) -> Option<Array2<T>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let scale = T::of(1.0 / (1.0 - rate));
    let mask = Array2::from_shape_simple_fn(x.raw_dim(), || {
        if rng.random::<f64>() < rate {
            T::zero()
        } else {
            scale
        }
    });
    *x *= &mask;
    Some(mask)
}

pub fn dropout_backward<T: Float>(dy: &mut Array2<T>, mask: Option<&Array2<T>>) {
    if let Some(mask) = mask {
        *dy *= mask;
    }
}

/// In-place softmax over the entries of `row` whose `keep` flag is set;
/// excluded entries get probability zero. The normalizer is accumulated in
/// `f64`. A row with no admissible entries becomes all zeros.
pub fn masked_softmax<T: Float>(mut row: ArrayViewMut1<T>, keep: &[bool]) {
    debug_assert_eq!(row.len(), keep.len());
    if let Some(slice) = row.as_slice_mut() {
        return masked_softmax_slice(slice, keep);
    }
    let mut buf = row.to_vec();
    masked_softmax_slice(&mut buf, keep);
    row.iter_mut().zip(buf).for_each(|(r, b)| *r = b);
}

fn masked_softmax_slice<T: Float>(row: &mut [T], keep: &[bool]) {
    let mut max = T::neg_infinity();
    for (&v, &k) in row.iter().zip(keep) {
        if k && v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        row.fill(T::zero());
        return;
    }
    let mut total = 0.0;
    for (v, &k) in row.iter_mut().zip(keep) {
        *v = if k { (*v - max).exp() } else { T::zero() };
        total += v.as_f64();
    }
    let inv = T::of(1.0 / total);
    row.iter_mut().for_each(|e| *e *= inv);
}

/// Backward of a softmax row: `dz = p * (dp - <p, dp>)`.
pub fn softmax_backward<T: Float>(probs: ArrayView1<T>, dprobs: ArrayView1<T>) -> Array1<T> {
    let dot = probs.dot(&dprobs);
    Zip::from(&probs).and(&dprobs).map_collect(|&p, &d| p * (d - dot))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(gelu_grad(x), fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn masked_softmax_excludes_masked_entries() {
        let mut row = array![1.0f64, 2.0, 100.0];
        masked_softmax(row.view_mut(), &[true, true, false]);
        assert_eq!(row[2], 0.0);
        assert_abs_diff_eq!(row[0] + row[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(row[1] / row[0], 1f64.exp(), epsilon = 1e-9);
    }

    #[test]
    fn fully_masked_row_is_zero() {
        let mut row = array![1.0f32, 2.0];
        masked_softmax(row.view_mut(), &[false, false]);
        assert_eq!(row, array![0.0f32, 0.0]);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let ln = LayerNorm::<f64>::new(4, 1e-12);
        let x = array![[1.0, 2.0, 3.0, 4.0], [-5.0, 0.0, 5.0, 10.0]];
        let (y, _) = ln.forward(x.view());
        for row in y.rows() {
            assert_abs_diff_eq!(row.sum(), 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(row.mapv(|v| v * v).sum() / 4.0, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = Rng::seed_from_u64(3);
        let mut ln = LayerNorm::<f64>::new(5, 1e-5);
        ln.gamma = normal_vector(5, 1.0, &mut rng);
        ln.beta = normal_vector(5, 1.0, &mut rng);
        let x: Array2<f64> = normal_matrix(3, 5, 1.0, &mut rng);
        let probe: Array2<f64> = normal_matrix(3, 5, 1.0, &mut rng);
        let objective = |x: &Array2<f64>| (&ln.forward(x.view()).0 * &probe).sum();
        let (_, cache) = ln.forward(x.view());
        let mut grad = ln.zeros_like();
        let dx = ln.backward(&cache, probe.view(), &mut grad);
        let h = 1e-6;
        for idx in 0..x.len() {
            let (r, c) = (idx / 5, idx % 5);
            let mut plus = x.clone();
            plus[[r, c]] += h;
            let mut minus = x.clone();
            minus[[r, c]] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            assert_abs_diff_eq!(dx[[r, c]], fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn dropout_is_inactive_without_rng() {
        let mut x = Array2::<f32>::ones((2, 3));
        assert!(dropout(&mut x, 0.5, None).is_none());
        assert_eq!(x, Array2::<f32>::ones((2, 3)));
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut rng = Rng::seed_from_u64(1);
        let mut x = Array2::<f64>::ones((10, 10));
        let mask = dropout(&mut x, 0.5, Some(&mut rng)).unwrap();
        assert!(x.iter().all(|&v| v == 0.0 || v == 2.0));
        assert_eq!(x, mask);
    }
}
