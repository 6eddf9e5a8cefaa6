//! Elementwise embedding.
//!
//! Every element id of a `u x v` sample is looked up in a 260-row table of
//! `c`-dimensional element vectors. The resulting `(u*v, c)` matrix is
//! reshaped into `(u, w)` with `w = v*c`, so each material row is the
//! horizontal concatenation of its `v` element vectors. Optional focus
//! embeddings add a global per-character position vector before the reshape
//! and a per-material position vector after it. In the gradient-based
//! tokenization-free mode each element is first replaced by a softmax
//! weighted sum over a `v`-gram window.

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use serde::{Deserialize, Serialize};

use crate::codec::{EncodedSample, ELEMENT_VOCAB};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::nn::{self, join, masked_softmax, softmax_backward, LayerNorm, LayerNormCache, ParamKind, Parameters, Rng};

/// The 260 x c element matrix: rows 0..4 are specials, row `b + 4` is byte `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementTable<T> {
    pub weights: Array2<T>,
}

impl<T: Float> ElementTable<T> {
    pub fn new(c: usize, init_std: f64, rng: &mut Rng) -> Self {
        Self {
            weights: nn::normal_matrix(ELEMENT_VOCAB, c, init_std, rng),
        }
    }

    pub fn zeros(c: usize) -> Self {
        Self {
            weights: Array2::zeros((ELEMENT_VOCAB, c)),
        }
    }

    pub fn width(&self) -> usize {
        self.weights.ncols()
    }
}

/// Focus embeddings: `global` is indexed by the character position
/// `p = i*v + j` (width `c`), `material` by the material index `i` (width `w`).
#[derive(Debug, Clone, PartialEq)]
pub struct FocusTables<T> {
    pub global: Array2<T>,
    pub material: Array2<T>,
    pub enabled: bool,
}

impl<T: Float> FocusTables<T> {
    pub fn new(u_max: usize, v: usize, c: usize, init_std: f64, rng: &mut Rng) -> Self {
        Self {
            global: nn::normal_matrix(u_max * v, c, init_std, rng),
            material: nn::normal_matrix(u_max, v * c, init_std, rng),
            enabled: true,
        }
    }

    pub fn zeros(u_max: usize, v: usize, c: usize) -> Self {
        Self {
            global: Array2::zeros((u_max * v, c)),
            material: Array2::zeros((u_max, v * c)),
            enabled: true,
        }
    }

    pub fn disabled(v: usize, c: usize) -> Self {
        Self {
            global: Array2::zeros((0, c)),
            material: Array2::zeros((0, v * c)),
            enabled: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoolScope {
    /// Every row of a material becomes the same pooled vector over that material.
    MaterialLocal,
    /// Row `t` pools rows `t .. t + window`, truncated at the end of the sequence.
    #[default]
    Sliding,
}

impl PoolScope {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolScope::MaterialLocal => "material_local",
            PoolScope::Sliding => "sliding",
        }
    }
}

impl std::str::FromStr for PoolScope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "material_local" => Ok(PoolScope::MaterialLocal),
            "sliding" => Ok(PoolScope::Sliding),
            other => Err(format!("unknown pooling scope {other:?}, expected sliding or material_local")),
        }
    }
}

/// Learned scoring vector for soft v-gram pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct GradScorer<T> {
    pub weights: Array1<T>,
    pub window: usize,
    pub scope: PoolScope,
}

impl<T: Float> GradScorer<T> {
    pub fn new(c: usize, window: usize, scope: PoolScope, init_std: f64, rng: &mut Rng) -> Self {
        Self {
            weights: nn::normal_vector(c, init_std, rng),
            window,
            scope,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderConfig {
    pub dropout_rate: f64,
    pub ln_epsilon: f64,
    pub init_std: f64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            dropout_rate: 0.1,
            ln_epsilon: 1e-12,
            init_std: 0.02,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        if self.ln_epsilon.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::config("ln_epsilon", "must be positive"));
        }
        if self.init_std.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::config("init_std", "must be positive"));
        }
        Ok(())
    }
}

/// Row `i*v + j` is the table row of `ids[i*v + j]`.
pub fn lookup_elements<T: Float>(ids: &[u16], table: &ElementTable<T>) -> Array2<T> {
    let mut out = Array2::zeros((ids.len(), table.width()));
    for (mut row, &id) in out.rows_mut().into_iter().zip(ids) {
        row.assign(&table.weights.row(id as usize));
    }
    out
}

/// `(u*v, c)` to `(u, v*c)`: material `i` concatenates element rows `i*v .. i*v + v`.
pub fn reshape_materials<T: Float>(elements: ArrayView2<T>, u: usize, v: usize) -> Result<Array2<T>> {
    if elements.nrows() != u * v {
        return Err(Error::DimensionMismatch {
            context: "reshape_materials rows",
            expected: u * v,
            actual: elements.nrows(),
        });
    }
    let c = elements.ncols();
    let flat: Vec<T> = elements.iter().copied().collect();
    Ok(Array2::from_shape_vec((u, v * c), flat).expect("length checked above"))
}

/// Inverse of [`reshape_materials`].
pub fn unreshape_materials<T: Float>(materials: ArrayView2<T>, v: usize) -> Result<Array2<T>> {
    if v == 0 || materials.ncols() % v != 0 {
        return Err(Error::DimensionMismatch {
            context: "unreshape_materials width",
            expected: v,
            actual: materials.ncols(),
        });
    }
    let c = materials.ncols() / v;
    let flat: Vec<T> = materials.iter().copied().collect();
    Ok(Array2::from_shape_vec((materials.nrows() * v, c), flat).expect("sizes agree"))
}

/// Adds `g[i*v + j]` to every element, reshapes, then adds `f[i]` to every material.
pub fn add_focus<T: Float>(elements: ArrayView2<T>, tables: &FocusTables<T>, u: usize, v: usize) -> Result<Array2<T>> {
    if !tables.enabled {
        return reshape_materials(elements, u, v);
    }
    let n = u * v;
    if tables.global.nrows() < n || tables.global.ncols() != elements.ncols() {
        return Err(Error::DimensionMismatch {
            context: "global focus table rows",
            expected: n,
            actual: tables.global.nrows(),
        });
    }
    if tables.material.nrows() < u || tables.material.ncols() != v * elements.ncols() {
        return Err(Error::DimensionMismatch {
            context: "material focus table rows",
            expected: u,
            actual: tables.material.nrows(),
        });
    }
    let shifted = &elements + &tables.global.slice(s![..n, ..]);
    let mut materials = reshape_materials(shifted.view(), u, v)?;
    materials += &tables.material.slice(s![..u, ..]);
    Ok(materials)
}

/// Pooling windows as (first row, length); output row `t` reads window `sources[t]`.
struct Windows {
    spans: Vec<(usize, usize)>,
    sources: Vec<usize>,
}

fn pooling_windows(rows: usize, v: usize, scorer_window: usize, scope: PoolScope) -> Windows {
    match scope {
        PoolScope::Sliding => {
            let window = scorer_window.max(1);
            Windows {
                spans: (0..rows).map(|t| (t, window.min(rows - t))).collect(),
                sources: (0..rows).collect(),
            }
        }
        PoolScope::MaterialLocal => {
            let v = v.max(1);
            Windows {
                spans: (0..rows.div_ceil(v)).map(|i| (i * v, v.min(rows - i * v))).collect(),
                sources: (0..rows).map(|t| t / v).collect(),
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct VgramCache<T> {
    input: Array2<T>,
    spans: Vec<(usize, usize)>,
    sources: Vec<usize>,
    alphas: Vec<Array1<T>>,
}

impl<T: Float> VgramCache<T> {
    /// Softmax weights of every pooling window, in window order.
    pub fn alphas(&self) -> &[Array1<T>] {
        &self.alphas
    }
}

/// Soft v-gram pooling. `v` is only used by the material-local scope.
pub fn soft_vgram<T: Float>(elements: ArrayView2<T>, scorer: &GradScorer<T>, v: usize) -> (Array2<T>, VgramCache<T>) {
    let rows = elements.nrows();
    let Windows { spans, sources } = pooling_windows(rows, v, scorer.window, scorer.scope);
    let scores = elements.dot(&scorer.weights);
    let mut pooled = Array2::zeros((spans.len(), elements.ncols()));
    let mut alphas = Vec::with_capacity(spans.len());
    for (w, &(start, len)) in spans.iter().enumerate() {
        let mut alpha = scores.slice(s![start..start + len]).to_owned();
        masked_softmax(alpha.view_mut(), &vec![true; len]);
        let window = elements.slice(s![start..start + len, ..]);
        pooled.row_mut(w).assign(&alpha.dot(&window));
        alphas.push(alpha);
    }
    let mut out = Array2::zeros(elements.raw_dim());
    for (mut row, &src) in out.rows_mut().into_iter().zip(&sources) {
        row.assign(&pooled.row(src));
    }
    let cache = VgramCache {
        input: elements.to_owned(),
        spans,
        sources,
        alphas,
    };
    (out, cache)
}

/// Returns `dL/d elements`, accumulating `dL/ds` into `dscorer`.
pub fn soft_vgram_backward<T: Float>(
    scorer: &GradScorer<T>,
    cache: &VgramCache<T>,
    dout: ArrayView2<T>,
    dscorer: &mut Array1<T>,
) -> Array2<T> {
    let mut dpooled = Array2::<T>::zeros((cache.spans.len(), dout.ncols()));
    for (drow, &src) in dout.rows().into_iter().zip(&cache.sources) {
        let mut target = dpooled.row_mut(src);
        target += &drow;
    }
    let mut dinput = Array2::zeros(cache.input.raw_dim());
    for (w, &(start, len)) in cache.spans.iter().enumerate() {
        let alpha = &cache.alphas[w];
        let dp = dpooled.row(w);
        let window = cache.input.slice(s![start..start + len, ..]);
        let dalpha = window.dot(&dp);
        let dscore = softmax_backward(alpha.view(), dalpha.view());
        for k in 0..len {
            let mut drow = dinput.row_mut(start + k);
            drow.scaled_add(alpha[k], &dp);
            drow.scaled_add(dscore[k], &scorer.weights);
            dscorer.scaled_add(dscore[k], &window.row(k));
        }
    }
    dinput
}

/// Embedding parameters: element table, focus tables, optional scorer and
/// the per-material layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementwiseEmbedding<T> {
    pub table: ElementTable<T>,
    pub focus: FocusTables<T>,
    pub scorer: Option<GradScorer<T>>,
    pub norm: LayerNorm<T>,
    pub v: usize,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone)]
pub struct EmbedCache<T> {
    ids: Vec<u16>,
    u: usize,
    vgram: Option<VgramCache<T>>,
    norm: LayerNormCache<T>,
    dropout: Option<Array2<T>>,
}

impl<T> EmbedCache<T> {
    pub fn vgram(&self) -> Option<&VgramCache<T>> {
        self.vgram.as_ref()
    }
}

impl<T: Float> ElementwiseEmbedding<T> {
    /// Output of [`embed`] for one sample plus its backward cache.
    pub fn forward(&self, sample: &EncodedSample, rng: Option<&mut Rng>) -> Result<(Array2<T>, EmbedCache<T>)> {
        if sample.v() != self.v {
            return Err(Error::DimensionMismatch {
                context: "sample v",
                expected: self.v,
                actual: sample.v(),
            });
        }
        let u = sample.u();
        let elements = lookup_elements(sample.ids(), &self.table);
        let (elements, vgram) = match &self.scorer {
            Some(scorer) => {
                let (pooled, cache) = soft_vgram(elements.view(), scorer, self.v);
                (pooled, Some(cache))
            }
            None => (elements, None),
        };
        let materials = add_focus(elements.view(), &self.focus, u, self.v)?;
        let (mut out, norm) = self.norm.forward(materials.view());
        let dropout = nn::dropout(&mut out, self.dropout_rate, rng);
        let cache = EmbedCache {
            ids: sample.ids().to_vec(),
            u,
            vgram,
            norm,
            dropout,
        };
        Ok((out, cache))
    }

    pub fn backward(&self, cache: &EmbedCache<T>, dout: ArrayView2<T>, grad: &mut ElementwiseEmbedding<T>) {
        let mut dout = dout.to_owned();
        nn::dropout_backward(&mut dout, cache.dropout.as_ref());
        let dmaterials = self.norm.backward(&cache.norm, dout.view(), &mut grad.norm);
        if self.focus.enabled {
            let mut df = grad.focus.material.slice_mut(s![..cache.u, ..]);
            df += &dmaterials;
        }
        let delements = unreshape_materials(dmaterials.view(), self.v).expect("widths agree");
        if self.focus.enabled {
            let n = delements.nrows();
            let mut dg = grad.focus.global.slice_mut(s![..n, ..]);
            dg += &delements;
        }
        let delements = match (&self.scorer, &cache.vgram, grad.scorer.as_mut()) {
            (Some(scorer), Some(vc), Some(gs)) => soft_vgram_backward(scorer, vc, delements.view(), &mut gs.weights),
            _ => delements,
        };
        for (row, &id) in delements.axis_iter(Axis(0)).zip(&cache.ids) {
            let mut target = grad.table.weights.row_mut(id as usize);
            target += &row;
        }
    }

    pub fn width(&self) -> usize {
        self.v * self.table.width()
    }
}

/// Looks up, optionally v-gram pools, adds focus, normalizes each material
/// and applies dropout when `rng` is given (training mode).
pub fn embed<T: Float>(sample: &EncodedSample, embedding: &ElementwiseEmbedding<T>, rng: Option<&mut Rng>) -> Result<Array2<T>> {
    embedding.forward(sample, rng).map(|(out, _)| out)
}

/// Element table plus, when enabled, both focus tables.
pub fn embedding_param_count(c: usize, u_max: usize, v: usize, focus_enabled: bool) -> usize {
    let table = ELEMENT_VOCAB * c;
    if focus_enabled {
        table + u_max * v * c + u_max * (v * c)
    } else {
        table
    }
}

impl<T: Float> Parameters<T> for ElementwiseEmbedding<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamKind, ArrayViewD<'a, T>)) {
        f(join(prefix, "elements"), ParamKind::Embedding, self.table.weights.view().into_dyn());
        if self.focus.enabled {
            f(join(prefix, "focus_global"), ParamKind::Embedding, self.focus.global.view().into_dyn());
            f(join(prefix, "focus_material"), ParamKind::Embedding, self.focus.material.view().into_dyn());
        }
        if let Some(scorer) = &self.scorer {
            f(join(prefix, "scorer"), ParamKind::Weight, scorer.weights.view().into_dyn());
        }
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ParamKind, ArrayViewMutD<'a, T>),
    ) {
        f(join(prefix, "elements"), ParamKind::Embedding, self.table.weights.view_mut().into_dyn());
        if self.focus.enabled {
            f(join(prefix, "focus_global"), ParamKind::Embedding, self.focus.global.view_mut().into_dyn());
            f(join(prefix, "focus_material"), ParamKind::Embedding, self.focus.material.view_mut().into_dyn());
        }
        if let Some(scorer) = &mut self.scorer {
            f(join(prefix, "scorer"), ParamKind::Weight, scorer.weights.view_mut().into_dyn());
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }

    fn zeros_like(&self) -> Self {
        let focus = if self.focus.enabled {
            FocusTables {
                global: Array2::zeros(self.focus.global.raw_dim()),
                material: Array2::zeros(self.focus.material.raw_dim()),
                enabled: true,
            }
        } else {
            self.focus.clone()
        };
        Self {
            table: ElementTable::zeros(self.table.width()),
            focus,
            scorer: self.scorer.as_ref().map(|s| GradScorer {
                weights: Array1::zeros(s.weights.len()),
                window: s.window,
                scope: s.scope,
            }),
            norm: self.norm.zeros_like(),
            v: self.v,
            dropout_rate: self.dropout_rate,
        }
    }
}
