//! Adaptive Hessian-aware sparse training.
//!
//! Pruning a parameter set `p` while optimally re-adjusting the kept set `r`
//! has a closed-form second-order loss impact. This module implements that
//! algebra (block form and a per-parameter fast path sharing one matrix
//! factorization per round), blends it with a gradient-disturbance term, and
//! derives pruning rates from the Hessian spectrum: the rate is the smallest
//! eigenvalue index whose forward gap exceeds four times a Lipschitz estimate
//! of the gradient-linearization residual. Rates mix with neighbors' rates
//! through the aggregation weights, and the mask is recomputed from scratch
//! each pruning round so parameters may return.
//!
//! All block solves run through factorizations; matrices are never inverted
//! explicitly except for the one shared full-Hessian factorization that the
//! per-parameter fast path is built on.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::aggregation::NormalizedWeights;
use crate::model::{Mask, ModelError, ParamVector};
use crate::rng::Stream;

#[derive(Debug, Error)]
pub enum PruningError {
    #[error("kept-block solve failed; condition estimate {condition:.3e}")]
    SingularBlock { condition: f64 },
    #[error("Hessian factorization failed; matrix is numerically singular")]
    SingularHessian,
    #[error("eigenvalue list is empty")]
    EmptySpectrum,
    #[error("eigenvalues must be sorted ascending")]
    UnsortedSpectrum,
    #[error("pruning rate must be in [0, 1), got {0}")]
    InvalidRate(f64),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("length mismatch: {got} vs {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("index {0} out of range or duplicated in split")]
    BadSplit(usize),
    #[error("missing pruning rate for neighbor {0}")]
    MissingNeighborRate(usize),
    #[error("operation requires a dense Hessian")]
    DenseRequired,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Dense Hessian or a matrix-free product handle.
pub enum HessianView<'a> {
    Dense(&'a DMatrix<f64>),
    MatrixFree { apply: &'a dyn Fn(&[f64]) -> Vec<f64>, dim: usize },
}

impl<'a> HessianView<'a> {
    pub fn dim(&self) -> usize {
        match self {
            HessianView::Dense(h) => h.nrows(),
            HessianView::MatrixFree { dim, .. } => *dim,
        }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        match self {
            HessianView::Dense(h) => {
                let out = *h * DVector::from_column_slice(v);
                out.iter().copied().collect()
            }
            HessianView::MatrixFree { apply, .. } => apply(v),
        }
    }

    fn dense(&self) -> Result<&DMatrix<f64>, PruningError> {
        match self {
            HessianView::Dense(h) => Ok(h),
            HessianView::MatrixFree { .. } => Err(PruningError::DenseRequired),
        }
    }

    /// Blocks `(pp, pr, rp, rr)` for the given split (dense only).
    pub fn blocks(
        &self,
        split: &Split,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>), PruningError> {
        let h = self.dense()?;
        let take = |rows: &[usize], cols: &[usize]| {
            DMatrix::from_fn(rows.len(), cols.len(), |i, j| h[(rows[i], cols[j])])
        };
        Ok((
            take(&split.pruned, &split.pruned),
            take(&split.pruned, &split.kept),
            take(&split.kept, &split.pruned),
            take(&split.kept, &split.kept),
        ))
    }

    /// Eigenvalues sorted ascending: the full spectrum when dense, otherwise
    /// Ritz values from `lanczos_steps` Lanczos iterations on the product
    /// handle (extremal eigenvalues converge first).
    pub fn ascending_eigenvalues(&self, lanczos_steps: usize, rng: &mut Stream) -> Vec<f64> {
        match self {
            HessianView::Dense(h) => {
                let mut eigs: Vec<f64> = (*h).clone().symmetric_eigenvalues().iter().copied().collect();
                eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
                eigs
            }
            HessianView::MatrixFree { apply, dim } => lanczos_spectrum(apply, *dim, lanczos_steps, rng),
        }
    }
}

/// Shift a symmetric matrix by `eps_rel * mean(|diagonal|) * I`; shared
/// regularization applied once per pruning round before any solve.
pub fn regularize(h: &mut DMatrix<f64>, eps_rel: f64) {
    let k = h.nrows();
    if k == 0 {
        return;
    }
    let eps = eps_rel * (h.trace().abs() / k as f64 + 1e-12);
    for i in 0..k {
        h[(i, i)] += eps;
    }
}

/// Index split into pruned (`p`) and kept (`r`) sets.
#[derive(Debug, Clone)]
pub struct Split {
    pub pruned: Vec<usize>,
    pub kept: Vec<usize>,
}

impl Split {
    /// Build from the pruned set; the kept set is the sorted complement.
    pub fn from_pruned(dim: usize, pruned: &[usize]) -> Result<Self, PruningError> {
        let mut is_pruned = vec![false; dim];
        for &i in pruned {
            if i >= dim || is_pruned[i] {
                return Err(PruningError::BadSplit(i));
            }
            is_pruned[i] = true;
        }
        let mut p: Vec<usize> = pruned.to_vec();
        p.sort_unstable();
        let kept = (0..dim).filter(|&i| !is_pruned[i]).collect();
        Ok(Split { pruned: p, kept })
    }
}

fn gather(v: &[f64], idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

/// Solve `rr * x = rhs`, Cholesky first, LU fallback; singular matrices
/// surface a condition-number estimate.
fn solve_symmetric(rr: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>, PruningError> {
    if rr.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    if let Some(chol) = rr.clone().cholesky() {
        return Ok(chol.solve(rhs));
    }
    rr.clone().lu().solve(rhs).ok_or_else(|| {
        let eigs = rr.clone().symmetric_eigenvalues();
        let max = eigs.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let min = eigs.iter().fold(f64::INFINITY, |a, b| a.min(b.abs()));
        PruningError::SingularBlock { condition: if min > 0.0 { max / min } else { f64::INFINITY } }
    })
}

/// Optimal adjustment of the kept parameters when the pruned set is zeroed:
/// `dm_r = (H_rr)^-1 H_rp m_p - (H_rr)^-1 g_r`, returned in `split.kept`
/// order.
pub fn remaining_adjustment(
    h: &HessianView,
    g: &[f64],
    params: &[f64],
    split: &Split,
) -> Result<Vec<f64>, PruningError> {
    let k = h.dim();
    if g.len() != k || params.len() != k {
        return Err(PruningError::LengthMismatch { got: g.len().min(params.len()), expected: k });
    }
    let (_, _, rp, rr) = h.blocks(split)?;
    let m_p = gather(params, &split.pruned);
    let g_r = gather(g, &split.kept);
    let rhs = &rp * &m_p - &g_r;
    let x = solve_symmetric(&rr, &rhs)?;
    Ok(x.iter().copied().collect())
}

/// Closed-form second-order loss impact of pruning `split.pruned` with the
/// kept block optimally adjusted:
/// `1/2 m_p' H_pp m_p - g_p' m_p - 1/2 m_p' H_pr y1 - 1/2 g_r' y2 + g_r' y1`
/// with `y1 = (H_rr)^-1 H_rp m_p` and `y2 = (H_rr)^-1 g_r`. One factorization
/// of the kept block serves both solves.
pub fn loss_impact(h: &HessianView, g: &[f64], params: &[f64], split: &Split) -> Result<f64, PruningError> {
    let k = h.dim();
    if g.len() != k || params.len() != k {
        return Err(PruningError::LengthMismatch { got: g.len().min(params.len()), expected: k });
    }
    let (pp, pr, rp, rr) = h.blocks(split)?;
    let m_p = gather(params, &split.pruned);
    let g_p = gather(g, &split.pruned);
    let g_r = gather(g, &split.kept);
    let (y1, y2) = if split.kept.is_empty() {
        (DVector::zeros(0), DVector::zeros(0))
    } else {
        let chol = rr.clone().cholesky();
        match chol {
            Some(c) => (c.solve(&(&rp * &m_p)), c.solve(&g_r)),
            None => {
                let lu = rr.clone().lu();
                let a = lu.solve(&(&rp * &m_p));
                let b = lu.solve(&g_r);
                match (a, b) {
                    (Some(a), Some(b)) => (a, b),
                    _ => {
                        let eigs = rr.clone().symmetric_eigenvalues();
                        let max = eigs.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
                        let min = eigs.iter().fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
                        return Err(PruningError::SingularBlock {
                            condition: if min > 0.0 { max / min } else { f64::INFINITY },
                        });
                    }
                }
            }
        }
    };
    let t1 = 0.5 * (&m_p.transpose() * &pp * &m_p)[(0, 0)];
    let t2 = -g_p.dot(&m_p);
    let t3 = -0.5 * (&m_p.transpose() * &pr * &y1)[(0, 0)];
    let t4 = -0.5 * g_r.dot(&y2);
    let t5 = g_r.dot(&y1);
    Ok(t1 + t2 + t3 + t4 + t5)
}

/// Blended pruning score for a candidate set:
/// `(1 - lambda_g) |dF_C| / |f_now| + lambda_g ||H dm||_2 / ||g||_2`
/// where `dm` zeroes the candidates and optimally adjusts the rest.
pub fn blended_score(
    h: &HessianView,
    g: &[f64],
    f_now: f64,
    params: &[f64],
    split: &Split,
    lambda_g: f64,
) -> Result<f64, PruningError> {
    if !(f_now > 0.0) {
        return Err(PruningError::NonPositive("current loss"));
    }
    let g_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    // The exploration term only exists for lambda_g > 0; a pure loss-impact
    // score (lambda_g = 0) is well defined even at a stationary point.
    if lambda_g > 0.0 && !(g_norm > 0.0) {
        return Err(PruningError::NonPositive("gradient norm"));
    }
    let dfc = loss_impact(h, g, params, split)?;
    let dm_r = remaining_adjustment(h, g, params, split)?;
    let mut dm = vec![0.0; h.dim()];
    for &i in &split.pruned {
        dm[i] = -params[i];
    }
    for (slot, &i) in split.kept.iter().enumerate() {
        dm[i] = dm_r[slot];
    }
    let explore = if lambda_g > 0.0 {
        let dg = h.apply(&dm);
        let dg_norm = dg.iter().map(|v| v * v).sum::<f64>().sqrt();
        lambda_g * dg_norm / g_norm
    } else {
        0.0
    };
    Ok((1.0 - lambda_g) * dfc.abs() / f_now.abs() + explore)
}

/// Exploration blend weight: `min(1, g_norm / (c * g_norm_max))`, large while
/// gradients are still big relative to their running maximum.
pub fn lambda_g_schedule(g_norm: f64, g_norm_max: f64, c: f64) -> Result<f64, PruningError> {
    if !(g_norm_max > 0.0) {
        return Err(PruningError::NonPositive("running max gradient norm"));
    }
    if !(c > 0.0) {
        return Err(PruningError::NonPositive("blend hyperparameter"));
    }
    Ok((g_norm / (c * g_norm_max)).clamp(0.0, 1.0))
}

/// Lipschitz estimate of the gradient-linearization residual
/// `r(dm) = H dm - (grad(center + dm) - grad(center))` over random probe
/// pairs inside `radius`: `max ||r(u) - r(v)|| / ||u - v||`.
///
/// Exactly quadratic objectives have residual 0 everywhere, so the estimate
/// vanishes; growth of the estimate signals Hessian instability around the
/// center. Nondecreasing in the probe count under a fixed stream.
pub fn lipschitz_estimate<G>(
    grad_fn: G,
    hess_apply: impl Fn(&[f64]) -> Vec<f64>,
    center: &[f64],
    probes: usize,
    radius: f64,
    rng: &mut Stream,
) -> Result<f64, PruningError>
where
    G: Fn(&[f64]) -> Result<Vec<f64>, ModelError>,
{
    if probes < 2 {
        return Err(PruningError::NonPositive("probe count (need >= 2)"));
    }
    if !(radius > 0.0) {
        return Err(PruningError::NonPositive("probe radius"));
    }
    let dim = center.len();
    let g0 = grad_fn(center)?;
    let mut deltas: Vec<Vec<f64>> = Vec::with_capacity(probes);
    let mut residuals: Vec<Vec<f64>> = Vec::with_capacity(probes);
    for _ in 0..probes {
        let mut d: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let scale = rng.gen_range(0.0..1.0) * radius / norm;
        d.iter_mut().for_each(|v| *v *= scale);
        let shifted: Vec<f64> = center.iter().zip(&d).map(|(c, dv)| c + dv).collect();
        let g1 = grad_fn(&shifted)?;
        let hd = hess_apply(&d);
        let r: Vec<f64> = (0..dim).map(|i| hd[i] - (g1[i] - g0[i])).collect();
        deltas.push(d);
        residuals.push(r);
    }
    let mut best = 0.0f64;
    for i in 0..probes {
        for j in (i + 1)..probes {
            let dist: f64 = deltas[i]
                .iter()
                .zip(&deltas[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if dist < 1e-12 {
                continue;
            }
            let rdist: f64 = residuals[i]
                .iter()
                .zip(&residuals[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            best = best.max(rdist / dist);
        }
    }
    Ok(best)
}

/// Lossless pruning rate from the spectrum: the smallest 1-based index `p`
/// whose forward gap `eigs[p] - eigs[p-1]` exceeds `4 * lipschitz` yields
/// `p / d`; no qualifying gap means no pruning this round.
pub fn lossless_pruning_rate(eigs: &[f64], lipschitz: f64, d: usize) -> Result<f64, PruningError> {
    if eigs.is_empty() {
        return Err(PruningError::EmptySpectrum);
    }
    if eigs.windows(2).any(|w| w[0] > w[1]) {
        return Err(PruningError::UnsortedSpectrum);
    }
    if d == 0 {
        return Err(PruningError::NonPositive("spectrum rank"));
    }
    for p in 1..eigs.len() {
        if eigs[p] - eigs[p - 1] > 4.0 * lipschitz {
            return Ok(p as f64 / d as f64);
        }
    }
    Ok(0.0)
}

/// Neighbor-aware pruning rate: `sum_j w_j p_j + w_self p_own`, clipped to
/// `[0, p_max]`. Every weighted neighbor must report a rate.
pub fn aggregate_pruning_rate(
    own_rate: f64,
    neighbor_rates: &[(usize, f64)],
    weights: &NormalizedWeights,
    p_max: f64,
) -> Result<f64, PruningError> {
    let mut p = weights.self_weight * own_rate;
    for &(device, w) in &weights.neighbors {
        let rate = neighbor_rates
            .iter()
            .find(|(d, _)| *d == device)
            .map(|&(_, r)| r)
            .ok_or(PruningError::MissingNeighborRate(device))?;
        p += w * rate;
    }
    Ok(p.clamp(0.0, p_max))
}

/// Per-round scratch for single-parameter scores: one factorization of the
/// full (regularized) Hessian, its inverse, `w = H^-1 g`, and the diagonals.
/// Every candidate's exact kept-block algebra then reduces to O(K) work via
/// Schur-complement identities on the full inverse.
pub struct ObsScratch {
    inv: DMatrix<f64>,
    h_diag: Vec<f64>,
    w: Vec<f64>,
    inv_diag: Vec<f64>,
    g: Vec<f64>,
    g_dot_w: f64,
    g_norm_sq: f64,
}

impl ObsScratch {
    pub fn new(h: &DMatrix<f64>, g: &[f64]) -> Result<Self, PruningError> {
        let k = h.nrows();
        if g.len() != k {
            return Err(PruningError::LengthMismatch { got: g.len(), expected: k });
        }
        let inv = h.clone().try_inverse().ok_or(PruningError::SingularHessian)?;
        let wv = &inv * DVector::from_column_slice(g);
        let w: Vec<f64> = wv.iter().copied().collect();
        let inv_diag: Vec<f64> = (0..k).map(|i| inv[(i, i)]).collect();
        let h_diag: Vec<f64> = (0..k).map(|i| h[(i, i)]).collect();
        let g_dot_w: f64 = g.iter().zip(&w).map(|(a, b)| a * b).sum();
        let g_norm_sq: f64 = g.iter().map(|v| v * v).sum();
        Ok(ObsScratch { inv, h_diag, w, inv_diag, g: g.to_vec(), g_dot_w, g_norm_sq })
    }

    /// Kept-block quadratic forms for candidate `q` via the inverse-diagonal
    /// identities: alpha = h_q' (H_rr)^-1 h_q, beta = g_r' (H_rr)^-1 g_r,
    /// gamma = g_r' (H_rr)^-1 h_q, with h_q the off-diagonal column.
    fn kept_block_forms(&self, q: usize) -> (f64, f64, f64) {
        let d_q = self.inv_diag[q];
        let h_qq = self.h_diag[q];
        let g_q = self.g[q];
        let w_q = self.w[q];
        let e = 1.0 - h_qq * d_q; // (A h~)_q
        let u = w_q - g_q * d_q; // (A g~)_q
        let alpha = -h_qq * e - e * e / d_q;
        let beta = (self.g_dot_w - 2.0 * g_q * w_q + g_q * g_q * d_q) - u * u / d_q;
        let gamma = -h_qq * u - u * e / d_q;
        (alpha, beta, gamma)
    }

    /// Closed-form loss impact of pruning the single parameter `q`.
    pub fn single_impact(&self, q: usize, value: f64) -> f64 {
        let (alpha, beta, gamma) = self.kept_block_forms(q);
        0.5 * value * value * self.h_diag[q] - self.g[q] * value - 0.5 * value * value * alpha
            - 0.5 * beta
            + value * gamma
    }

    /// Full perturbation vector for candidate `q`: `-value` at `q`, the
    /// optimal kept-block adjustment elsewhere.
    pub fn single_delta_m(&self, q: usize, value: f64) -> Vec<f64> {
        let k = self.inv.nrows();
        let d_q = self.inv_diag[q];
        let h_qq = self.h_diag[q];
        let g_q = self.g[q];
        // A v with v = value * h~ - g~: expands to
        // value e_q - value h_qq a_q - w + g_q a_q.
        let av_q = value - value * h_qq * d_q - self.w[q] + g_q * d_q;
        let c_q = av_q / d_q;
        let mut dm = Vec::with_capacity(k);
        for i in 0..k {
            let a_iq = self.inv[(i, q)];
            let av_i = if i == q { av_q } else { -value * h_qq * a_iq - self.w[i] + g_q * a_iq };
            dm.push(av_i - c_q * a_iq);
        }
        dm[q] = -value;
        dm
    }

    /// Squared norm of the first-order gradient change `H dm` for candidate
    /// `q`. Because `H (A v) = v`, the product collapses to `-g` outside `q`,
    /// so only the `q` entry needs recomputing: `-(value H_qq + c_q)`.
    pub fn single_grad_change_norm_sq(&self, q: usize, value: f64) -> f64 {
        let d_q = self.inv_diag[q];
        let av_q = value - value * self.h_diag[q] * d_q - self.w[q] + self.g[q] * d_q;
        let c_q = av_q / d_q;
        let entry = -(value * self.h_diag[q] + c_q);
        self.g_norm_sq - self.g[q] * self.g[q] + entry * entry
    }
}

/// The mask recomputation decision of one pruning round.
#[derive(Debug, Clone)]
pub struct PruneDecision {
    pub mask: Mask,
    /// Blended score per parameter (the sort key).
    pub scores: Vec<f64>,
    /// Indices masked out, ascending score order.
    pub pruned: Vec<usize>,
    /// Whole model after surgery: pruned slots exactly zero, kept slots
    /// shifted by the optimal adjustment for the final pruned set. The
    /// predicted impact of the round refers to this vector.
    pub adjusted: Vec<f64>,
    /// Closed-form loss impact of the final pruned set.
    pub predicted_impact: f64,
}

/// Recompute the mask from scratch: score every parameter of the whole
/// (unmasked) model as a single-parameter candidate, sort ascending, and
/// prune the first `floor(K * rate)`. Previously masked parameters are
/// re-scored like any other and may return. The kept parameters absorb the
/// optimal adjustment for the chosen set.
pub fn adaptive_prune(
    h: &DMatrix<f64>,
    g: &[f64],
    full_params: &[f64],
    f_now: f64,
    lambda_g: f64,
    rate: f64,
) -> Result<PruneDecision, PruningError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(PruningError::InvalidRate(rate));
    }
    if !(f_now > 0.0) {
        return Err(PruningError::NonPositive("current loss"));
    }
    let k = h.nrows();
    if g.len() != k || full_params.len() != k {
        return Err(PruningError::LengthMismatch { got: g.len().min(full_params.len()), expected: k });
    }
    let g_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if lambda_g > 0.0 && !(g_norm > 0.0) {
        return Err(PruningError::NonPositive("gradient norm"));
    }
    let scratch = ObsScratch::new(h, g)?;
    let mut scores = Vec::with_capacity(k);
    for q in 0..k {
        let value = full_params[q];
        let dfc = scratch.single_impact(q, value);
        let explore = if lambda_g > 0.0 {
            lambda_g * scratch.single_grad_change_norm_sq(q, value).max(0.0).sqrt() / g_norm
        } else {
            0.0
        };
        let s = (1.0 - lambda_g) * dfc.abs() / f_now.abs() + explore;
        if !s.is_finite() {
            return Err(PruningError::NonFinite("pruning score"));
        }
        scores.push(s);
    }
    let n_prune = (k as f64 * rate).floor() as usize;
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    let pruned: Vec<usize> = order[..n_prune].to_vec();
    let mut bits = vec![true; k];
    for &q in &pruned {
        bits[q] = false;
    }

    let view = HessianView::Dense(h);
    let split = Split::from_pruned(k, &pruned)?;
    let (adjusted, predicted_impact) = if pruned.is_empty() {
        (full_params.to_vec(), 0.0)
    } else {
        let dm_r = remaining_adjustment(&view, g, full_params, &split)?;
        let mut adj = full_params.to_vec();
        for &q in &split.pruned {
            adj[q] = 0.0;
        }
        for (slot, &i) in split.kept.iter().enumerate() {
            adj[i] += dm_r[slot];
        }
        (adj, loss_impact(&view, g, full_params, &split)?)
    };
    Ok(PruneDecision { mask: Mask::from_bits(bits), scores, pruned, adjusted, predicted_impact })
}

/// Per-device sparse-training state.
#[derive(Debug, Clone)]
pub struct PruningState {
    /// Current pruning rate p_i.
    pub rate: f64,
    /// Own lossless rate from the last spectral-gap evaluation.
    pub own_rate: f64,
    /// Last Lipschitz estimate.
    pub lipschitz: f64,
    /// Last blend weight.
    pub lambda_g: f64,
    /// Running max of the gradient L2 norm.
    pub grad_norm_max: f64,
    /// Snapshot of the model at registration (drift is logged, not scored).
    pub initial_model: ParamVector,
}

impl PruningState {
    pub fn new(initial_model: ParamVector) -> Self {
        PruningState {
            rate: 0.0,
            own_rate: 0.0,
            lipschitz: 0.0,
            lambda_g: 0.0,
            grad_norm_max: 0.0,
            initial_model,
        }
    }

    pub fn observe_grad_norm(&mut self, norm: f64) {
        self.grad_norm_max = self.grad_norm_max.max(norm);
    }

    /// L2 distance of `current` from the initial snapshot.
    pub fn initial_drift(&self, current: &ParamVector) -> f64 {
        self.initial_model
            .as_slice()
            .iter()
            .zip(current.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Lanczos with full reorthogonalization; returns the Ritz values of the
/// `steps`-dimensional Krylov restriction, sorted ascending.
pub fn lanczos_spectrum(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    dim: usize,
    steps: usize,
    rng: &mut Stream,
) -> Vec<f64> {
    let m = steps.min(dim).max(1);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);

    let mut alphas = Vec::with_capacity(m);
    let mut betas = Vec::with_capacity(m);
    let mut basis: Vec<Vec<f64>> = vec![v.clone()];
    let mut beta_prev = 0.0;
    let mut v_prev = vec![0.0; dim];

    for j in 0..m {
        let mut w = apply(&v);
        if j > 0 {
            for i in 0..dim {
                w[i] -= beta_prev * v_prev[i];
            }
        }
        let alpha: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        alphas.push(alpha);
        for i in 0..dim {
            w[i] -= alpha * v[i];
        }
        // Full reorthogonalization against the stored basis.
        for b in &basis {
            let proj: f64 = w.iter().zip(b).map(|(a, x)| a * x).sum();
            for i in 0..dim {
                w[i] -= proj * b[i];
            }
        }
        let beta = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if j + 1 == m || beta < 1e-12 {
            break;
        }
        betas.push(beta);
        v_prev = v;
        v = w.iter().map(|x| x / beta).collect();
        basis.push(v.clone());
        beta_prev = beta;
    }

    let n = alphas.len();
    let mut tri = DMatrix::zeros(n, n);
    for i in 0..n {
        tri[(i, i)] = alphas[i];
        if i + 1 < n && i < betas.len() {
            tri[(i, i + 1)] = betas[i];
            tri[(i + 1, i)] = betas[i];
        }
    }
    let mut eigs: Vec<f64> = tri.symmetric_eigenvalues().iter().copied().collect();
    eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    eigs
}
