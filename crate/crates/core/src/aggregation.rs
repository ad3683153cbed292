//! Dynamic staleness-aware model aggregation.
//!
//! A device merges its post-SGD model with selected cached neighbor models.
//! Each contributor gets a raw importance `s * lambda / (sqrt(dt) * loss)`
//! built from the sender's sample count, a learnable control parameter, the
//! cache staleness, and the sender's reported loss. Importances normalize to
//! aggregation weights, the control parameters descend along an analytic
//! derivative of the local loss, and parameters aggregate per-position with
//! the contributors' masks renormalizing around pruned slots.
//!
//! Floating-point accumulation order is part of the contract: sums over
//! contributors always run self first, then selected neighbors in ascending
//! device order. Reference implementations that follow the same order
//! reproduce results bit-for-bit.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{self, Architecture, Batch, Mask, ModelError, ParamVector};

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("staleness must be >= 1, got {0} (clamp before calling)")]
    InvalidStaleness(f64),
    #[error("sender loss must be > 0, got {0} (clamp before calling)")]
    InvalidLoss(f64),
    #[error("raw importance must be > 0, got {0}")]
    InvalidImportance(f64),
    #[error("device {0} is not part of the current selection")]
    TargetNotSelected(usize),
    #[error("parameter length mismatch: {got} vs {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("a local update needs at least one batch")]
    NoBatches,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A neighbor's last-received model snapshot.
#[derive(Debug, Clone)]
pub struct CachedModel {
    pub sender: usize,
    /// Full-length vector; positions pruned by the sender hold zero.
    pub params: ParamVector,
    pub mask: Mask,
    /// Sender's training loss attached to the diffused model.
    pub sender_loss: f64,
    /// Sender's local sample count s_j.
    pub sender_samples: u64,
    /// Sender's pruning rate p_j, transported for rate aggregation.
    pub sender_rate: f64,
    /// Receiver's completed local-update count when this snapshot arrived.
    pub received_at: u64,
    /// Set once the snapshot has been used in an aggregation.
    pub already_aggregated: bool,
}

/// Staleness-aware raw importance of one contributor.
pub fn importance(samples: u64, lambda: f64, delta_t: f64, loss: f64) -> Result<f64, AggregationError> {
    if !(delta_t >= 1.0) {
        return Err(AggregationError::InvalidStaleness(delta_t));
    }
    if !(loss > 0.0) {
        return Err(AggregationError::InvalidLoss(loss));
    }
    Ok(samples as f64 * lambda / (delta_t.sqrt() * loss))
}

/// Raw importances for one aggregation, in summation order: self first, then
/// selected neighbors ascending by device index.
#[derive(Debug, Clone)]
pub struct RawImportances {
    pub self_device: usize,
    pub self_raw: f64,
    pub neighbors: Vec<(usize, f64)>,
}

impl RawImportances {
    /// Sum of all raw importances in contract order.
    pub fn total(&self) -> f64 {
        let mut t = self.self_raw;
        for &(_, v) in &self.neighbors {
            t += v;
        }
        t
    }

    pub fn get(&self, device: usize) -> Option<f64> {
        if device == self.self_device {
            return Some(self.self_raw);
        }
        self.neighbors.iter().find(|(d, _)| *d == device).map(|&(_, v)| v)
    }
}

/// Normalized aggregation weights over self + selection; sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedWeights {
    pub self_weight: f64,
    /// Ascending device index.
    pub neighbors: Vec<(usize, f64)>,
}

impl NormalizedWeights {
    pub fn self_only() -> Self {
        NormalizedWeights { self_weight: 1.0, neighbors: Vec::new() }
    }

    pub fn sum(&self) -> f64 {
        let mut s = self.self_weight;
        for &(_, w) in &self.neighbors {
            s += w;
        }
        s
    }
}

/// Normalize raw importances into aggregation weights.
///
/// An empty selection degenerates to self-weight 1.
pub fn normalize_weights(raw: &RawImportances) -> Result<NormalizedWeights, AggregationError> {
    if !(raw.self_raw > 0.0) {
        return Err(AggregationError::InvalidImportance(raw.self_raw));
    }
    for &(_, v) in &raw.neighbors {
        if !(v > 0.0) {
            return Err(AggregationError::InvalidImportance(v));
        }
    }
    if raw.neighbors.is_empty() {
        return Ok(NormalizedWeights::self_only());
    }
    let total = raw.total();
    Ok(NormalizedWeights {
        self_weight: raw.self_raw / total,
        neighbors: raw.neighbors.iter().map(|&(d, v)| (d, v / total)).collect(),
    })
}

/// Analytic derivative of the local loss with respect to the control
/// parameter of `target`.
///
/// The raw importance of every other contributor is held fixed; only the
/// target's normalized weight varies with its control parameter (through
/// both the numerator and the normalizing sum), so the derivative
/// factorizes into `sum_others / total^2 * s * (g . m_target) / (sqrt(dt) * loss)`.
pub fn control_gradient(
    gradient: &[f64],
    m_target: &[f64],
    raw: &RawImportances,
    samples: u64,
    delta_t: f64,
    loss: f64,
    target: usize,
) -> Result<f64, AggregationError> {
    if gradient.len() != m_target.len() {
        return Err(AggregationError::LengthMismatch { got: m_target.len(), expected: gradient.len() });
    }
    if !(delta_t >= 1.0) {
        return Err(AggregationError::InvalidStaleness(delta_t));
    }
    if !(loss > 0.0) {
        return Err(AggregationError::InvalidLoss(loss));
    }
    let raw_target = raw.get(target).ok_or(AggregationError::TargetNotSelected(target))?;
    let total = raw.total();
    let sum_others = total - raw_target;
    let mut dot = 0.0;
    for (g, m) in gradient.iter().zip(m_target) {
        dot += g * m;
    }
    let d_raw = samples as f64 / (delta_t.sqrt() * loss);
    Ok(sum_others / (total * total) * dot * d_raw)
}

/// One descent step on a control parameter, clamped into `bounds`.
pub fn update_control(lambda_prev: f64, grad: f64, eta_lambda: f64, bounds: (f64, f64)) -> f64 {
    (lambda_prev - eta_lambda * grad).clamp(bounds.0, bounds.1)
}

/// One weighted, masked contributor to parameter aggregation.
#[derive(Debug, Clone, Copy)]
pub struct WeightedModel<'a> {
    pub params: &'a [f64],
    pub mask: &'a Mask,
    pub weight: f64,
}

/// Per-parameter masked aggregation.
///
/// Position p gets `sum_j w_j * v_j[p] * o_j[p] / sum_j w_j * o_j[p]` over
/// the local model and the selected neighbors. When every contributor is
/// pruned at p the local value is retained unchanged. The caller re-applies
/// the local mask afterwards to obtain the working model.
pub fn aggregate_masked(local: WeightedModel, others: &[WeightedModel]) -> Result<Vec<f64>, AggregationError> {
    let k = local.params.len();
    for m in std::iter::once(&local).chain(others) {
        if m.params.len() != k {
            return Err(AggregationError::LengthMismatch { got: m.params.len(), expected: k });
        }
        if m.mask.len() != k {
            return Err(AggregationError::LengthMismatch { got: m.mask.len(), expected: k });
        }
    }
    let mut out = Vec::with_capacity(k);
    for p in 0..k {
        let mut num = 0.0;
        let mut den = 0.0;
        if local.mask.keep(p) {
            num += local.weight * local.params[p];
            den += local.weight;
        }
        for m in others {
            if m.mask.keep(p) {
                num += m.weight * m.params[p];
                den += m.weight;
            }
        }
        out.push(if den > 0.0 { num / den } else { local.params[p] });
    }
    Ok(out)
}

/// Control parameters start at 1, reducing the initial importance to the
/// static staleness-aware core `s / (sqrt(dt) * loss)`.
pub const LAMBDA_INIT: f64 = 1.0;

/// Persistent per-device control parameters and the latest weights.
#[derive(Debug, Clone)]
pub struct WeightState {
    lambda_self: f64,
    lambda: BTreeMap<usize, f64>,
    last_weights: NormalizedWeights,
}

impl WeightState {
    pub fn new() -> Self {
        WeightState {
            lambda_self: LAMBDA_INIT,
            lambda: BTreeMap::new(),
            last_weights: NormalizedWeights::self_only(),
        }
    }

    pub fn lambda_self(&self) -> f64 {
        self.lambda_self
    }

    pub fn lambda_for(&self, neighbor: usize) -> f64 {
        *self.lambda.get(&neighbor).unwrap_or(&LAMBDA_INIT)
    }

    /// Weights from the most recent aggregation (self-only before the first).
    pub fn last_weights(&self) -> &NormalizedWeights {
        &self.last_weights
    }
}

impl Default for WeightState {
    fn default() -> Self {
        Self::new()
    }
}

/// One selected cached model plus its staleness at read time (clamped >= 1).
#[derive(Debug)]
pub struct SelectedNeighbor<'a> {
    pub cached: &'a CachedModel,
    pub staleness: f64,
}

/// Hyperparameters of a single aggregation round.
#[derive(Debug, Clone, Copy)]
pub struct RoundHyper {
    pub lr: f64,
    pub eta_lambda: f64,
    pub lambda_bounds: (f64, f64),
    /// Lower clamp applied to every loss used in an importance denominator.
    pub loss_floor: f64,
    /// When false the control parameters stay frozen (static weights).
    pub dynamic_weights: bool,
}

/// Inputs of one local update's aggregation.
pub struct RoundInput<'a> {
    pub arch: &'a Architecture,
    /// Whole-model state: kept slots hold the working values, pruned slots
    /// the best-known values from past aggregations.
    pub full_model: &'a ParamVector,
    pub mask: &'a Mask,
    pub own_samples: u64,
    /// SGD minibatches for this update, in execution order.
    pub batches: &'a [Batch],
    /// Selected cached models, ascending sender index.
    pub selected: Vec<SelectedNeighbor<'a>>,
}

/// Outputs of one aggregation round.
#[derive(Debug)]
pub struct RoundOutput {
    /// Whole-model state after aggregation (pruned slots refreshed where a
    /// contributor kept them).
    pub full_model: ParamVector,
    /// `full_model` with the local mask applied.
    pub working_model: ParamVector,
    /// Mean pre-step loss over this update's batches.
    pub epoch_mean_loss: f64,
    /// Loss at the post-SGD model on the last batch ("own current loss").
    pub post_sgd_loss: f64,
    /// Gradient at the post-SGD model on the last batch (drives the control
    /// parameter updates).
    pub gradient_at_post_sgd: Vec<f64>,
    /// Fresh normalized weights over self + selection.
    pub weights: NormalizedWeights,
    /// |1 - sum of normalized weights| for invariant tracking.
    pub weight_sum_error: f64,
}

/// Shared SGD application so the round and [`model::sgd_step`] are
/// bit-identical: `v -= lr * g`, masked slots re-zeroed.
fn apply_sgd(params: &mut ParamVector, mask: &Mask, g: &[f64], lr: f64) {
    for (k, val) in params.as_mut_slice().iter_mut().enumerate() {
        if mask.keep(k) {
            *val -= lr * g[k];
        } else {
            *val = 0.0;
        }
    }
}

/// Key under which the device's own contribution appears in
/// [`RawImportances`]; distinct from any real neighbor index.
const SELF_KEY: usize = usize::MAX;

/// One full local update: SGD epochs, control-parameter and weight updates,
/// then masked aggregation, in that order.
///
/// With an empty selection the round reduces to the plain SGD trajectory:
/// control parameters and weights are untouched.
pub fn aggregation_round(
    input: RoundInput<'_>,
    state: &mut WeightState,
    hyper: &RoundHyper,
) -> Result<RoundOutput, AggregationError> {
    if input.batches.is_empty() {
        return Err(AggregationError::NoBatches);
    }
    debug_assert!(
        input.selected.windows(2).all(|w| w[0].cached.sender < w[1].cached.sender),
        "selection must be ascending by sender"
    );

    // Local SGD over this update's batches.
    let mut work = ParamVector::from(input.full_model.masked(input.mask));
    let mut loss_sum = 0.0;
    for batch in input.batches {
        let (l, g) = model::loss_and_gradient(input.arch, &work, input.mask, batch)?;
        loss_sum += l;
        apply_sgd(&mut work, input.mask, &g, hyper.lr);
    }
    let epoch_mean_loss = loss_sum / input.batches.len() as f64;

    let last_batch = input.batches.last().unwrap();
    let (post_sgd_loss, g_i) = model::loss_and_gradient(input.arch, &work, input.mask, last_batch)?;

    // Whole-model state after SGD: kept slots from the step, pruned slots
    // keep their previous values.
    let mut full_after_sgd = input.full_model.clone();
    for (k, v) in full_after_sgd.as_mut_slice().iter_mut().enumerate() {
        if input.mask.keep(k) {
            *v = work.as_slice()[k];
        }
    }

    if input.selected.is_empty() {
        let working = ParamVector::from(full_after_sgd.masked(input.mask));
        return Ok(RoundOutput {
            full_model: full_after_sgd,
            working_model: working,
            epoch_mean_loss,
            post_sgd_loss,
            gradient_at_post_sgd: g_i,
            weights: NormalizedWeights::self_only(),
            weight_sum_error: 0.0,
        });
    }

    let self_loss = post_sgd_loss.max(hyper.loss_floor);
    let raw_for = |st: &WeightState| -> Result<RawImportances, AggregationError> {
        Ok(RawImportances {
            self_device: SELF_KEY,
            self_raw: importance(input.own_samples, st.lambda_self, 1.0, self_loss)?,
            neighbors: input
                .selected
                .iter()
                .map(|n| {
                    importance(
                        n.cached.sender_samples,
                        st.lambda_for(n.cached.sender),
                        n.staleness,
                        n.cached.sender_loss.max(hyper.loss_floor),
                    )
                    .map(|v| (n.cached.sender, v))
                })
                .collect::<Result<_, _>>()?,
        })
    };

    // Control-parameter descent against the importances of the current
    // parameters; self treated like a neighbor with staleness 1 and its own
    // current loss.
    if hyper.dynamic_weights {
        let raw_old = raw_for(state)?;
        let g_self = control_gradient(
            &g_i,
            work.as_slice(),
            &raw_old,
            input.own_samples,
            1.0,
            self_loss,
            SELF_KEY,
        )?;
        state.lambda_self = update_control(state.lambda_self, g_self, hyper.eta_lambda, hyper.lambda_bounds);
        for n in &input.selected {
            let g_j = control_gradient(
                &g_i,
                n.cached.params.as_slice(),
                &raw_old,
                n.cached.sender_samples,
                n.staleness,
                n.cached.sender_loss.max(hyper.loss_floor),
                n.cached.sender,
            )?;
            let lam = update_control(
                state.lambda_for(n.cached.sender),
                g_j,
                hyper.eta_lambda,
                hyper.lambda_bounds,
            );
            state.lambda.insert(n.cached.sender, lam);
        }
    }

    // Fresh importances and weights under the updated control parameters.
    let weights = normalize_weights(&raw_for(state)?)?;
    let weight_sum_error = (1.0 - weights.sum()).abs();

    // Masked aggregation over self + selection.
    let local = WeightedModel {
        params: full_after_sgd.as_slice(),
        mask: input.mask,
        weight: weights.self_weight,
    };
    let others: Vec<WeightedModel> = input
        .selected
        .iter()
        .zip(&weights.neighbors)
        .map(|(n, &(_, w))| WeightedModel { params: n.cached.params.as_slice(), mask: &n.cached.mask, weight: w })
        .collect();
    let merged = aggregate_masked(local, &others)?;
    let full_model = ParamVector::from(merged);
    let working_model = ParamVector::from(full_model.masked(input.mask));

    state.last_weights = weights.clone();

    Ok(RoundOutput {
        full_model,
        working_model,
        epoch_mean_loss,
        post_sgd_loss,
        gradient_at_post_sgd: g_i,
        weights,
        weight_sum_error,
    })
}

#[cfg(test)]
mod tests;
