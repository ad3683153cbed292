//! Desk-scale differentiable task models.
//!
//! Two architectures are supported: softmax regression (linear classifier)
//! and a one-hidden-layer tanh MLP. Parameters live in a flat vector with a
//! documented layout; a per-parameter binary mask forces pruned positions to
//! zero in every evaluation.
//!
//! Evaluation convention for masked models: `loss`, `gradient`, `hessian`
//! and `hvp` all evaluate at the *effective* parameters `params * mask`.
//! Derivatives are reported for every flat position, including masked ones —
//! a masked entry carries the derivative the parameter would have if it
//! rejoined the model at value zero. Only [`sgd_step`] enforces the mask on
//! the parameter values themselves, re-zeroing masked positions after the
//! step.

pub mod data;

use nalgebra::DMatrix;
use thiserror::Error;

pub use data::{
    dirichlet_partition, epoch_batches, generate_synthetic_dataset, lognormal_counts, Batch,
    Dataset, DevicePartition,
};

/// Model and data errors.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("parameter vector length {got} does not match architecture ({expected})")]
    LengthMismatch { got: usize, expected: usize },
    #[error("mask length {got} does not match architecture ({expected})")]
    MaskMismatch { got: usize, expected: usize },
    #[error("dense Hessian refused for {k} parameters (cap {k_max}); use hvp and the Lanczos spectrum instead")]
    HessianTooLarge { k: usize, k_max: usize },
    #[error("invalid data config: {0}")]
    InvalidConfig(String),
    #[error("infeasible partition: {0}")]
    Partition(String),
    #[error("dataset parse error: {0}")]
    Parse(String),
}

/// Task model architecture; maps flat parameter indices to layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum Architecture {
    /// Linear map `classes x dims` plus bias, softmax output.
    Softmax { dims: usize, classes: usize },
    /// `dims -> hidden` tanh layer, then `hidden -> classes` softmax.
    Mlp { dims: usize, hidden: usize, classes: usize },
}

/// One dense layer's slice of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpan {
    /// Flat offset of the weight block (row-major `rows x cols`).
    pub weight_offset: usize,
    pub rows: usize,
    pub cols: usize,
    /// Flat offset of the `rows` bias entries.
    pub bias_offset: usize,
}

impl Architecture {
    pub fn dims(&self) -> usize {
        match *self {
            Architecture::Softmax { dims, .. } | Architecture::Mlp { dims, .. } => dims,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            Architecture::Softmax { classes, .. } | Architecture::Mlp { classes, .. } => classes,
        }
    }

    /// Total flat parameter count K.
    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.rows * l.cols + l.rows).sum()
    }

    /// Layer layout: weights first, then biases, per layer in order.
    pub fn layers(&self) -> Vec<LayerSpan> {
        match *self {
            Architecture::Softmax { dims, classes } => vec![LayerSpan {
                weight_offset: 0,
                rows: classes,
                cols: dims,
                bias_offset: classes * dims,
            }],
            Architecture::Mlp { dims, hidden, classes } => {
                let l1 = LayerSpan { weight_offset: 0, rows: hidden, cols: dims, bias_offset: hidden * dims };
                let o2 = hidden * dims + hidden;
                let l2 = LayerSpan { weight_offset: o2, rows: classes, cols: hidden, bias_offset: o2 + classes * hidden };
                vec![l1, l2]
            }
        }
    }
}

/// Flat model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    /// Validated constructor: length must match `arch`, all values finite.
    pub fn new(arch: &Architecture, values: Vec<f64>) -> Result<Self, ModelError> {
        if values.len() != arch.param_count() {
            return Err(ModelError::LengthMismatch { got: values.len(), expected: arch.param_count() });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite("parameters"));
        }
        Ok(Self { values })
    }

    pub fn zeros(arch: &Architecture) -> Self {
        Self { values: vec![0.0; arch.param_count()] }
    }

    /// Gaussian init, `scale` standard deviation, deterministic under the stream.
    pub fn init(arch: &Architecture, scale: f64, rng: &mut crate::rng::Stream) -> Self {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, scale).expect("valid std");
        Self { values: (0..arch.param_count()).map(|_| normal.sample(rng)).collect() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Effective parameters: masked positions forced to zero.
    pub fn masked(&self, mask: &Mask) -> Vec<f64> {
        self.values
            .iter()
            .zip(mask.bits())
            .map(|(v, &keep)| if keep { *v } else { 0.0 })
            .collect()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        Self { values }
    }
}

/// Per-parameter keep (true) / prune (false) mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    bits: Vec<bool>,
}

impl Mask {
    pub fn ones(k: usize) -> Self {
        Self { bits: vec![true; k] }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn keep(&self, k: usize) -> bool {
        self.bits[k]
    }

    pub fn kept_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Fraction of parameters kept.
    pub fn density(&self) -> f64 {
        if self.bits.is_empty() {
            return 1.0;
        }
        self.kept_count() as f64 / self.bits.len() as f64
    }

    /// Bytes of the serialized bitmap, one bit per parameter.
    pub fn bitmap_bytes(&self) -> u64 {
        (self.bits.len() as u64).div_ceil(8)
    }
}

fn check_shapes(arch: &Architecture, params: &ParamVector, mask: &Mask) -> Result<(), ModelError> {
    let k = arch.param_count();
    if params.len() != k {
        return Err(ModelError::LengthMismatch { got: params.len(), expected: k });
    }
    if mask.len() != k {
        return Err(ModelError::MaskMismatch { got: mask.len(), expected: k });
    }
    if !params.as_slice().iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFinite("parameters"));
    }
    Ok(())
}

/// Per-sample forward pass producing class log-probabilities.
/// `eff` is the effective (masked) flat parameter slice.
fn log_softmax_logits(arch: &Architecture, eff: &[f64], x: &[f64], scratch: &mut Scratch) -> Vec<f64> {
    let logits = forward_logits(arch, eff, x, scratch);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|z| z - log_z).collect()
}

/// Reusable per-sample buffers for the MLP hidden layer.
#[derive(Default)]
struct Scratch {
    hidden: Vec<f64>,
}

fn forward_logits(arch: &Architecture, eff: &[f64], x: &[f64], scratch: &mut Scratch) -> Vec<f64> {
    match *arch {
        Architecture::Softmax { dims, classes } => {
            let mut z = vec![0.0; classes];
            for c in 0..classes {
                let row = &eff[c * dims..(c + 1) * dims];
                let mut acc = 0.0;
                for d in 0..dims {
                    acc += row[d] * x[d];
                }
                z[c] = acc + eff[classes * dims + c];
            }
            z
        }
        Architecture::Mlp { dims, hidden, classes } => {
            let l = arch.layers();
            let (l1, l2) = (l[0], l[1]);
            scratch.hidden.resize(hidden, 0.0);
            for h in 0..hidden {
                let row = &eff[l1.weight_offset + h * dims..l1.weight_offset + (h + 1) * dims];
                let mut acc = 0.0;
                for d in 0..dims {
                    acc += row[d] * x[d];
                }
                scratch.hidden[h] = (acc + eff[l1.bias_offset + h]).tanh();
            }
            let mut z = vec![0.0; classes];
            for c in 0..classes {
                let row = &eff[l2.weight_offset + c * hidden..l2.weight_offset + (c + 1) * hidden];
                let mut acc = 0.0;
                for h in 0..hidden {
                    acc += row[h] * scratch.hidden[h];
                }
                z[c] = acc + eff[l2.bias_offset + c];
            }
            z
        }
    }
}

/// Mean cross-entropy of the masked model over the batch.
pub fn loss(arch: &Architecture, params: &ParamVector, mask: &Mask, batch: &Batch) -> Result<f64, ModelError> {
    check_shapes(arch, params, mask)?;
    let eff = params.masked(mask);
    loss_at(arch, &eff, batch)
}

/// Loss at an explicit effective parameter slice (no mask application).
fn loss_at(arch: &Architecture, eff: &[f64], batch: &Batch) -> Result<f64, ModelError> {
    let mut scratch = Scratch::default();
    let mut total = 0.0;
    for s in 0..batch.len() {
        let lp = log_softmax_logits(arch, eff, batch.x(s), &mut scratch);
        total -= lp[batch.y(s)];
    }
    let out = total / batch.len() as f64;
    if !out.is_finite() {
        return Err(ModelError::NonFinite("loss"));
    }
    Ok(out)
}

/// Exact analytic gradient of the masked loss, reported at all K positions.
pub fn gradient(arch: &Architecture, params: &ParamVector, mask: &Mask, batch: &Batch) -> Result<Vec<f64>, ModelError> {
    check_shapes(arch, params, mask)?;
    let eff = params.masked(mask);
    gradient_at(arch, &eff, batch)
}

/// Loss and gradient in one pass over the batch.
pub fn loss_and_gradient(
    arch: &Architecture,
    params: &ParamVector,
    mask: &Mask,
    batch: &Batch,
) -> Result<(f64, Vec<f64>), ModelError> {
    check_shapes(arch, params, mask)?;
    let eff = params.masked(mask);
    let l = loss_at(arch, &eff, batch)?;
    let g = gradient_at(arch, &eff, batch)?;
    Ok((l, g))
}

fn gradient_at(arch: &Architecture, eff: &[f64], batch: &Batch) -> Result<Vec<f64>, ModelError> {
    let k = eff.len();
    let mut g = vec![0.0; k];
    let mut scratch = Scratch::default();
    let b = batch.len() as f64;
    match *arch {
        Architecture::Softmax { dims, classes } => {
            for s in 0..batch.len() {
                let x = batch.x(s);
                let lp = log_softmax_logits(arch, eff, x, &mut scratch);
                for c in 0..classes {
                    let delta = (lp[c].exp() - if c == batch.y(s) { 1.0 } else { 0.0 }) / b;
                    let row = &mut g[c * dims..(c + 1) * dims];
                    for d in 0..dims {
                        row[d] += delta * x[d];
                    }
                    g[classes * dims + c] += delta;
                }
            }
        }
        Architecture::Mlp { dims, hidden, classes } => {
            let l = arch.layers();
            let (l1, l2) = (l[0], l[1]);
            for s in 0..batch.len() {
                let x = batch.x(s);
                let lp = log_softmax_logits(arch, eff, x, &mut scratch);
                let h = scratch.hidden.clone();
                let mut dh = vec![0.0; hidden];
                for c in 0..classes {
                    let delta = (lp[c].exp() - if c == batch.y(s) { 1.0 } else { 0.0 }) / b;
                    let row = &mut g[l2.weight_offset + c * hidden..l2.weight_offset + (c + 1) * hidden];
                    for j in 0..hidden {
                        row[j] += delta * h[j];
                        dh[j] += delta * eff[l2.weight_offset + c * hidden + j];
                    }
                    g[l2.bias_offset + c] += delta;
                }
                for j in 0..hidden {
                    let da = dh[j] * (1.0 - h[j] * h[j]);
                    let row = &mut g[l1.weight_offset + j * dims..l1.weight_offset + (j + 1) * dims];
                    for d in 0..dims {
                        row[d] += da * x[d];
                    }
                    g[l1.bias_offset + j] += da;
                }
            }
        }
    }
    if !g.iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFinite("gradient"));
    }
    Ok(g)
}

/// Dense K x K Hessian of the masked loss at the effective parameters.
///
/// Softmax regression uses exact analytic second derivatives; the MLP nests
/// central finite differences of the analytic gradient (coordinate step
/// `1e-4 * (1 + |theta_k|)`). Both paths symmetrize `(H + H^T) / 2`.
pub fn hessian(
    arch: &Architecture,
    params: &ParamVector,
    mask: &Mask,
    batch: &Batch,
    k_max: usize,
) -> Result<DMatrix<f64>, ModelError> {
    check_shapes(arch, params, mask)?;
    let k = arch.param_count();
    if k > k_max {
        return Err(ModelError::HessianTooLarge { k, k_max });
    }
    let eff = params.masked(mask);
    let mut h = match *arch {
        Architecture::Softmax { dims, classes } => {
            let mut hm = DMatrix::zeros(k, k);
            let mut scratch = Scratch::default();
            let b = batch.len() as f64;
            // H[(c,d),(c',d')] = mean_s (delta_cc' p_c - p_c p_c') xt_d xt_d'
            // with xt = [x; 1]; flat index (c, d) = c*dims + d for d < dims,
            // and classes*dims + c for the bias slot d = dims.
            let flat = |c: usize, d: usize| if d < dims { c * dims + d } else { classes * dims + c };
            for s in 0..batch.len() {
                let x = batch.x(s);
                let lp = log_softmax_logits(arch, &eff, x, &mut scratch);
                let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
                for c in 0..classes {
                    for c2 in 0..classes {
                        let coef = (if c == c2 { p[c] } else { 0.0 } - p[c] * p[c2]) / b;
                        if coef == 0.0 {
                            continue;
                        }
                        for d in 0..=dims {
                            let xd = if d < dims { x[d] } else { 1.0 };
                            if xd == 0.0 {
                                continue;
                            }
                            let row = flat(c, d);
                            for d2 in 0..=dims {
                                let xd2 = if d2 < dims { x[d2] } else { 1.0 };
                                hm[(row, flat(c2, d2))] += coef * xd * xd2;
                            }
                        }
                    }
                }
            }
            hm
        }
        Architecture::Mlp { .. } => {
            let mut hm = DMatrix::zeros(k, k);
            let mut point = eff.clone();
            for col in 0..k {
                let step = 1e-4 * (1.0 + point[col].abs());
                let orig = point[col];
                point[col] = orig + step;
                let gp = gradient_at(arch, &point, batch)?;
                point[col] = orig - step;
                let gm = gradient_at(arch, &point, batch)?;
                point[col] = orig;
                for row in 0..k {
                    hm[(row, col)] = (gp[row] - gm[row]) / (2.0 * step);
                }
            }
            hm
        }
    };
    // Symmetrize in place.
    for i in 0..k {
        for j in (i + 1)..k {
            let avg = 0.5 * (h[(i, j)] + h[(j, i)]);
            h[(i, j)] = avg;
            h[(j, i)] = avg;
        }
    }
    if !h.iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFinite("hessian"));
    }
    Ok(h)
}

/// Hessian-vector product by central finite differences of the gradient.
///
/// Matrix-free path for architectures too large for [`hessian`].
pub fn hvp(
    arch: &Architecture,
    params: &ParamVector,
    mask: &Mask,
    batch: &Batch,
    v: &[f64],
) -> Result<Vec<f64>, ModelError> {
    check_shapes(arch, params, mask)?;
    if v.len() != params.len() {
        return Err(ModelError::LengthMismatch { got: v.len(), expected: params.len() });
    }
    let vnorm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if vnorm == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let eff = params.masked(mask);
    let theta_norm = eff.iter().map(|a| a * a).sum::<f64>().sqrt();
    let h = 1e-5 * (1.0 + theta_norm) / vnorm;
    let plus: Vec<f64> = eff.iter().zip(v).map(|(t, vi)| t + h * vi).collect();
    let minus: Vec<f64> = eff.iter().zip(v).map(|(t, vi)| t - h * vi).collect();
    let gp = gradient_at(arch, &plus, batch)?;
    let gm = gradient_at(arch, &minus, batch)?;
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
}

/// One SGD step on the masked loss; masked positions are re-zeroed.
pub fn sgd_step(
    arch: &Architecture,
    params: &ParamVector,
    mask: &Mask,
    batch: &Batch,
    lr: f64,
) -> Result<ParamVector, ModelError> {
    let g = gradient(arch, params, mask, batch)?;
    let mut out = params.clone();
    for (k, val) in out.as_mut_slice().iter_mut().enumerate() {
        if mask.keep(k) {
            *val -= lr * g[k];
        } else {
            *val = 0.0;
        }
    }
    if !out.as_slice().iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFinite("sgd step"));
    }
    Ok(out)
}

/// Forward multiply-accumulate FLOPs per sample: 2 per unmasked weight entry
/// (multiply + add). Bias additions are excluded from the count.
pub fn forward_flops(arch: &Architecture, mask: &Mask) -> u64 {
    let mut total = 0u64;
    for l in arch.layers() {
        let kept = (0..l.rows * l.cols).filter(|&e| mask.keep(l.weight_offset + e)).count() as u64;
        total += 2 * kept;
    }
    total
}

/// Forward + backward FLOPs per sample under the mask; the backward pass is
/// counted as twice the forward cost. A dense mask reproduces the nominal
/// architecture cost.
pub fn flops_estimate(arch: &Architecture, mask: &Mask) -> u64 {
    3 * forward_flops(arch, mask)
}

/// Classification accuracy of the masked model over `(features, labels)`.
pub fn accuracy(arch: &Architecture, params: &ParamVector, mask: &Mask, features: &[f64], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let dims = arch.dims();
    let eff = params.masked(mask);
    let mut scratch = Scratch::default();
    let mut correct = 0usize;
    for (s, &y) in labels.iter().enumerate() {
        let z = forward_logits(arch, &eff, &features[s * dims..(s + 1) * dims], &mut scratch);
        let pred = z
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if pred == y {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests;
