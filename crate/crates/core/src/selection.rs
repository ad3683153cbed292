//! Learned neighbor-model selection.
//!
//! Each device owns a small recurrent scorer: cached neighbor models are
//! visited in ascending device order, a tanh recurrent cell carries context
//! across them, and two fully connected layers emit a per-neighbor keep
//! probability through a sigmoid. A priority converter turns probabilities
//! into a selected subset (independent Bernoulli draws or a 0.5 threshold).
//! The scorer trains online with the score-function policy gradient: the
//! device's training loss is the reward, a moving average of recent losses
//! the baseline, and the update descends `(reward - baseline) * grad log P`
//! of the realized keep/skip actions.
//!
//! Backpropagation through the unrolled pass is exact and hand-written; its
//! correctness is pinned by finite-difference tests.

use std::collections::VecDeque;

use rand::Rng;
use thiserror::Error;

use crate::rng::Stream;

/// Numbers the scorer sees per cached model, already normalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionFeatures {
    /// 1.0 if the snapshot was already aggregated, else 0.0.
    pub already_aggregated: f64,
    /// Staleness divided by the device's running maximum.
    pub staleness: f64,
    /// Sender loss divided by the device's running maximum.
    pub loss_value: f64,
}

impl SelectionFeatures {
    pub const DIM: usize = 3;

    fn as_array(&self) -> [f64; 3] {
        [self.already_aggregated, self.staleness, self.loss_value]
    }

    fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

/// Running per-device feature normalizers (strictly positive).
#[derive(Debug, Clone)]
pub struct SelectionScaler {
    max_staleness: f64,
    max_loss: f64,
}

impl SelectionScaler {
    pub fn new() -> Self {
        SelectionScaler { max_staleness: 1.0, max_loss: 1e-8 }
    }

    pub fn observe(&mut self, staleness: f64, loss: f64) {
        self.max_staleness = self.max_staleness.max(staleness);
        self.max_loss = self.max_loss.max(loss);
    }

    pub fn features(&self, already_aggregated: bool, staleness: f64, loss: f64) -> SelectionFeatures {
        SelectionFeatures {
            already_aggregated: if already_aggregated { 1.0 } else { 0.0 },
            staleness: staleness / self.max_staleness,
            loss_value: loss / self.max_loss,
        }
    }
}

impl Default for SelectionScaler {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("features contain non-finite values")]
    NonFiniteFeatures,
    #[error("actions ({actions}) and features ({features}) are misaligned")]
    ActionMismatch { actions: usize, features: usize },
    #[error("priority network parse error: {0}")]
    Parse(String),
}

/// Probabilities are clamped into [PROB_EPS, 1 - PROB_EPS] so log-probs of
/// both actions stay finite.
const PROB_EPS: f64 = 1e-12;

/// Recurrent priority scorer: tanh cell of size `hidden`, then
/// `hidden -> hidden` tanh and `hidden -> 1` sigmoid per step.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorityNetwork {
    hidden: usize,
    theta: Vec<f64>,
}

// Flat layout: Wx [h x 3], Wh [h x h], b1 [h], W2 [h x h], b2 [h], W3 [h], b3 [1].
impl PriorityNetwork {
    pub fn zeros(hidden: usize) -> Self {
        let n = hidden * SelectionFeatures::DIM + hidden * hidden + hidden + hidden * hidden + hidden + hidden + 1;
        PriorityNetwork { hidden, theta: vec![0.0; n] }
    }

    pub fn init(hidden: usize, scale: f64, rng: &mut Stream) -> Self {
        let mut net = Self::zeros(hidden);
        for v in net.theta.iter_mut() {
            *v = rng.gen_range(-scale..scale);
        }
        net
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.theta
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn wx(&self) -> usize {
        0
    }
    fn wh(&self) -> usize {
        self.hidden * SelectionFeatures::DIM
    }
    fn b1(&self) -> usize {
        self.wh() + self.hidden * self.hidden
    }
    fn w2(&self) -> usize {
        self.b1() + self.hidden
    }
    fn b2(&self) -> usize {
        self.w2() + self.hidden * self.hidden
    }
    fn w3(&self) -> usize {
        self.b2() + self.hidden
    }
    fn b3(&self) -> usize {
        self.w3() + self.hidden
    }

    /// Serialize as a flat vector with a one-line header.
    pub fn save_to_string(&self) -> String {
        let mut s = format!("fedgossip-priority-net v1 in={} hidden={}\n", SelectionFeatures::DIM, self.hidden);
        for v in &self.theta {
            s.push_str(&format!("{v}\n"));
        }
        s
    }

    pub fn load_from_str(text: &str) -> Result<Self, SelectionError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| SelectionError::Parse("empty input".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "fedgossip-priority-net" || parts[1] != "v1" {
            return Err(SelectionError::Parse(format!("bad header: {header}")));
        }
        let parse_kv = |kv: &str, key: &str| -> Result<usize, SelectionError> {
            kv.strip_prefix(&format!("{key}="))
                .ok_or_else(|| SelectionError::Parse(format!("expected {key}=<n>, got {kv}")))?
                .parse::<usize>()
                .map_err(|e| SelectionError::Parse(e.to_string()))
        };
        let in_dim = parse_kv(parts[2], "in")?;
        if in_dim != SelectionFeatures::DIM {
            return Err(SelectionError::Parse(format!("unsupported input dim {in_dim}")));
        }
        let hidden = parse_kv(parts[3], "hidden")?;
        let mut net = Self::zeros(hidden);
        let mut count = 0usize;
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            if i >= net.theta.len() {
                return Err(SelectionError::Parse("too many parameters".into()));
            }
            net.theta[i] = line.trim().parse::<f64>().map_err(|e| SelectionError::Parse(e.to_string()))?;
            count += 1;
        }
        if count != net.theta.len() {
            return Err(SelectionError::Parse(format!(
                "expected {} parameters, got {count}",
                net.theta.len()
            )));
        }
        Ok(net)
    }
}

/// Per-step activations kept for backpropagation.
struct Trace {
    /// Hidden state after each step.
    h: Vec<Vec<f64>>,
    /// FC-layer activation after each step.
    z: Vec<Vec<f64>>,
    /// Unclamped sigmoid outputs.
    p: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn forward_trace(net: &PriorityNetwork, features: &[SelectionFeatures]) -> Trace {
    let h = net.hidden;
    let mut trace = Trace { h: Vec::with_capacity(features.len()), z: Vec::with_capacity(features.len()), p: Vec::with_capacity(features.len()) };
    let mut prev = vec![0.0; h];
    for f in features {
        let x = f.as_array();
        let mut hv = vec![0.0; h];
        for r in 0..h {
            let mut a = net.theta[net.b1() + r];
            for (c, xv) in x.iter().enumerate() {
                a += net.theta[net.wx() + r * SelectionFeatures::DIM + c] * xv;
            }
            for c in 0..h {
                a += net.theta[net.wh() + r * h + c] * prev[c];
            }
            hv[r] = a.tanh();
        }
        let mut zv = vec![0.0; h];
        for r in 0..h {
            let mut a = net.theta[net.b2() + r];
            for c in 0..h {
                a += net.theta[net.w2() + r * h + c] * hv[c];
            }
            zv[r] = a.tanh();
        }
        let mut logit = net.theta[net.b3()];
        for c in 0..h {
            logit += net.theta[net.w3() + c] * zv[c];
        }
        trace.p.push(sigmoid(logit));
        trace.z.push(zv);
        prev = hv.clone();
        trace.h.push(hv);
    }
    trace
}

/// Per-neighbor keep probabilities in (0, 1), neighbors visited in the given
/// order with the recurrent state carried across them.
pub fn priority_forward(net: &PriorityNetwork, features: &[SelectionFeatures]) -> Result<Vec<f64>, SelectionError> {
    if features.iter().any(|f| !f.is_finite()) {
        return Err(SelectionError::NonFiniteFeatures);
    }
    let trace = forward_trace(net, features);
    Ok(trace.p.iter().map(|p| p.clamp(PROB_EPS, 1.0 - PROB_EPS)).collect())
}

/// Exact gradient of `objective = sum_m step_weight[m] applied at logit m`,
/// where `dlogit[m]` is the objective's derivative at step m's logit.
fn backprop(net: &PriorityNetwork, features: &[SelectionFeatures], trace: &Trace, dlogit: &[f64]) -> Vec<f64> {
    let h = net.hidden;
    let mut grad = vec![0.0; net.theta.len()];
    let mut carry = vec![0.0; h]; // dL/dh_m arriving from step m+1
    for m in (0..features.len()).rev() {
        let dl = dlogit[m];
        let z = &trace.z[m];
        let hv = &trace.h[m];
        // Output layer.
        let mut dz = vec![0.0; h];
        for c in 0..h {
            grad[net.w3() + c] += dl * z[c];
            dz[c] = dl * net.theta[net.w3() + c];
        }
        grad[net.b3()] += dl;
        // FC layer.
        let mut dh = carry.clone();
        for r in 0..h {
            let dc = dz[r] * (1.0 - z[r] * z[r]);
            grad[net.b2() + r] += dc;
            for c in 0..h {
                grad[net.w2() + r * h + c] += dc * hv[c];
                dh[c] += dc * net.theta[net.w2() + r * h + c];
            }
        }
        // Recurrent cell.
        let prev: &[f64] = if m == 0 { &[] } else { &trace.h[m - 1] };
        let x = features[m].as_array();
        let mut new_carry = vec![0.0; h];
        for r in 0..h {
            let da = dh[r] * (1.0 - hv[r] * hv[r]);
            grad[net.b1() + r] += da;
            for (c, xv) in x.iter().enumerate() {
                grad[net.wx() + r * SelectionFeatures::DIM + c] += da * xv;
            }
            for c in 0..h {
                let p = if prev.is_empty() { 0.0 } else { prev[c] };
                grad[net.wh() + r * h + c] += da * p;
                new_carry[c] += da * net.theta[net.wh() + r * h + c];
            }
        }
        carry = new_carry;
    }
    grad
}

/// Gradient of the realized actions' total log-probability
/// `sum_m log P(c_m)` with respect to the network parameters.
pub fn grad_log_prob(
    net: &PriorityNetwork,
    features: &[SelectionFeatures],
    actions: &[bool],
) -> Result<Vec<f64>, SelectionError> {
    if actions.len() != features.len() {
        return Err(SelectionError::ActionMismatch { actions: actions.len(), features: features.len() });
    }
    if features.iter().any(|f| !f.is_finite()) {
        return Err(SelectionError::NonFiniteFeatures);
    }
    let trace = forward_trace(net, features);
    let dlogit: Vec<f64> = trace
        .p
        .iter()
        .zip(actions)
        .map(|(p, &c)| if c { 1.0 } else { 0.0 } - p)
        .collect();
    Ok(backprop(net, features, &trace, &dlogit))
}

/// How probabilities become a selected subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConverterMode {
    /// Independent Bernoulli draw per neighbor.
    Sample,
    /// Keep probabilities >= 0.5.
    Threshold,
}

/// Realized selection: chosen positions plus the full action record needed
/// for the policy update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionOutcome {
    /// Positions (into the feature list) that were selected.
    pub selected: Vec<usize>,
    /// Realized keep/skip action per position.
    pub actions: Vec<bool>,
}

/// Convert per-neighbor probabilities into a subset. Empty selections are
/// allowed; the round then falls back to plain SGD.
pub fn select_models(probs: &[f64], mode: ConverterMode, rng: &mut Stream) -> SelectionOutcome {
    let actions: Vec<bool> = probs
        .iter()
        .map(|&p| match mode {
            ConverterMode::Sample => rng.gen_range(0.0..1.0) < p,
            ConverterMode::Threshold => p >= 0.5,
        })
        .collect();
    let selected = actions.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i).collect();
    SelectionOutcome { selected, actions }
}

/// One policy-gradient step: descend
/// `eta_prime * (reward - bias) * grad log P(actions)` with the step's global
/// L2 norm clipped at `grad_clip`.
pub fn reinforce_update(
    net: &mut PriorityNetwork,
    features: &[SelectionFeatures],
    actions: &[bool],
    reward: f64,
    bias: f64,
    eta_prime: f64,
    grad_clip: f64,
) -> Result<(), SelectionError> {
    if features.is_empty() {
        return Ok(());
    }
    let g = grad_log_prob(net, features, actions)?;
    let advantage = reward - bias;
    let mut step: Vec<f64> = g.iter().map(|v| v * advantage).collect();
    let norm = step.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > grad_clip {
        let scale = grad_clip / norm;
        step.iter_mut().for_each(|v| *v *= scale);
    }
    for (t, s) in net.theta.iter_mut().zip(&step) {
        *t -= eta_prime * s;
    }
    Ok(())
}

/// Ring buffer of recent training losses; the mean is the policy baseline.
#[derive(Debug, Clone)]
pub struct RewardTracker {
    window: VecDeque<f64>,
    cap: usize,
}

impl RewardTracker {
    pub fn new(cap: usize) -> Self {
        assert!(cap >= 1);
        RewardTracker { window: VecDeque::with_capacity(cap), cap }
    }

    pub fn push(&mut self, loss: f64) {
        if self.window.len() == self.cap {
            self.window.pop_front();
        }
        self.window.push_back(loss);
    }

    /// Mean of the buffered losses; undefined until the first push.
    pub fn bias(&self) -> Option<f64> {
        if self.window.is_empty() {
            return None;
        }
        Some(self.window.iter().sum::<f64>() / self.window.len() as f64)
    }
}

/// Outcome of heuristic pretraining.
#[derive(Debug, Clone, Copy)]
pub struct PretrainReport {
    pub steps: usize,
    pub final_bce: f64,
    pub converged: bool,
}

/// Supervised warm start from synthetic selection heuristics.
///
/// Generator: sequence lengths 1..=6; `already_aggregated ~ Bernoulli(0.3)`,
/// staleness and loss uniform in [0, 1]. The keep label is 0 for aggregated
/// snapshots and `staleness + loss < 1` otherwise, so the keep region shrinks
/// as either staleness or loss grows. Trains by SGD on binary cross-entropy
/// until the running mean drops below `bce_target` or `step_cap` is reached;
/// the best-so-far parameters are returned either way.
pub fn pretrain_with_heuristics(
    hidden: usize,
    bce_target: f64,
    step_cap: usize,
    rng: &mut Stream,
) -> (PriorityNetwork, PretrainReport) {
    let mut net = PriorityNetwork::init(hidden, 0.1, rng);
    let lr = 0.1;
    let mut running = f64::INFINITY;
    let mut best = (net.clone(), f64::INFINITY);
    let mut steps = 0usize;
    while steps < step_cap {
        steps += 1;
        let len = rng.gen_range(1..=6usize);
        let mut features = Vec::with_capacity(len);
        let mut targets = Vec::with_capacity(len);
        for _ in 0..len {
            let agg = rng.gen_bool(0.3);
            let stale: f64 = rng.gen_range(0.0..1.0);
            let loss: f64 = rng.gen_range(0.0..1.0);
            features.push(SelectionFeatures {
                already_aggregated: if agg { 1.0 } else { 0.0 },
                staleness: stale,
                loss_value: loss,
            });
            targets.push(if agg || stale + loss >= 1.0 { 0.0 } else { 1.0 });
        }
        let trace = forward_trace(&net, &features);
        let mut bce = 0.0;
        let dlogit: Vec<f64> = trace
            .p
            .iter()
            .zip(&targets)
            .map(|(p, &y)| {
                let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                bce -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
                p - y
            })
            .collect();
        bce /= len as f64;
        let grad = backprop(&net, &features, &trace, &dlogit);
        for (t, g) in net.theta.iter_mut().zip(&grad) {
            *t -= lr * g;
        }
        running = if running.is_finite() { 0.98 * running + 0.02 * bce } else { bce };
        if running < best.1 {
            best = (net.clone(), running);
        }
        if running < bce_target {
            return (net, PretrainReport { steps, final_bce: running, converged: true });
        }
    }
    (best.0, PretrainReport { steps, final_bce: best.1, converged: false })
}
