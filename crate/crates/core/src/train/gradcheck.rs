//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use crate::codec::EncodedSample;
use crate::error::Result;
use crate::float::Float;
use crate::model::Classifier;
use crate::nn::Parameters;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub len: usize,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||, floor)`.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub analytic_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Fraction of the full gradient norm below which a tensor's error is
/// measured against the full norm instead of its own. Structurally zero
/// gradients (the attention key bias, for one) otherwise divide rounding
/// noise by zero.
pub const NORM_FLOOR: f64 = 1e-4;

fn set_element(model: &mut Classifier<f64>, tensor: usize, element: usize, value: f64) -> f64 {
    let mut index = 0;
    let mut original = 0.0;
    model.visit_mut("", &mut |_, _, mut t| {
        if index == tensor {
            let x = t.iter_mut().nth(element).expect("element in range");
            original = *x;
            *x = value;
        }
        index += 1;
    });
    original
}

/// Compares the analytic loss gradient of every parameter tensor, computed
/// at precision `T`, against `(f(θ+ε) - f(θ-ε)) / 2ε` evaluated in double
/// precision on the same parameter values. Dropout is off.
///
/// Per tensor the error is `||analytic - numeric|| / max(||analytic||,
/// ||numeric||, NORM_FLOOR * ||full gradient||)`.
pub fn grad_check<T: Float>(
    model: &Classifier<T>,
    sample: &EncodedSample,
    target: &[u8],
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut grads = model.zeros_like();
    model.accumulate_grad(sample, target, None, &mut grads)?;
    let analytic: Vec<(String, Vec<f64>)> = grads
        .named_params()
        .into_iter()
        .map(|(name, _, t)| (name, t.iter().map(|x| x.as_f64()).collect()))
        .collect();
    compare(analytic, model.cast::<f64>(), sample, target, epsilon, tolerance)
}

fn compare(
    analytic: Vec<(String, Vec<f64>)>,
    mut probe: Classifier<f64>,
    sample: &EncodedSample,
    target: &[u8],
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let full_norm = analytic.iter().flat_map(|(_, g)| g).map(|x| x * x).sum::<f64>().sqrt();
    let floor = NORM_FLOOR * full_norm;

    let mut tensors = Vec::with_capacity(analytic.len());
    for (ti, (name, exact)) in analytic.into_iter().enumerate() {
        let mut diff_sq = 0.0;
        let mut numeric_sq = 0.0;
        let mut max_abs: f64 = 0.0;
        for (ei, &a) in exact.iter().enumerate() {
            let original = set_element(&mut probe, ti, ei, f64::NAN);
            set_element(&mut probe, ti, ei, original + epsilon);
            let plus = probe.loss(sample, target)?;
            set_element(&mut probe, ti, ei, original - epsilon);
            let minus = probe.loss(sample, target)?;
            set_element(&mut probe, ti, ei, original);
            let numeric = (plus - minus) / (2.0 * epsilon);
            diff_sq += (a - numeric).powi(2);
            numeric_sq += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
        }
        let analytic_norm = exact.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = analytic_norm.max(numeric_sq.sqrt()).max(floor);
        let rel_error = if scale > 0.0 { diff_sq.sqrt() / scale } else { 0.0 };
        tensors.push(TensorCheck {
            name,
            len: exact.len(),
            rel_error,
            max_abs_error: max_abs,
            analytic_norm,
        });
    }
    let max_rel_error = tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        epsilon,
        tolerance,
        tensors,
        max_rel_error,
    })
}
