//! Per-device state and the local-update pipeline.
//!
//! A local update runs: feature build, neighbor selection, SGD epochs plus
//! weighted aggregation, adaptive pruning at its cadence, and the policy
//! update. Snapshot semantics for the neighbor cache: arrivals land in a
//! pending slot and become visible only when the in-flight update completes,
//! so an update always reads the cache as of its start time and never a torn
//! or mid-update state.

use std::collections::BTreeMap;

use nalgebra::DVector;

use crate::aggregation::{
    aggregation_round, CachedModel, RoundHyper, RoundInput, SelectedNeighbor, WeightState,
};
use crate::config::RunConfig;
use crate::model::{self, Architecture, Batch, Dataset, Mask, ParamVector};
use crate::pruning::{
    self, adaptive_prune, aggregate_pruning_rate, lambda_g_schedule, lipschitz_estimate,
    lossless_pruning_rate, HessianView, PruningState,
};
use crate::rng::Stream;
use crate::selection::{
    priority_forward, reinforce_update, select_models, PriorityNetwork, RewardTracker,
    SelectionFeatures, SelectionScaler,
};
use crate::sim::event::DiffusionPayload;
use crate::sim::SimError;

/// One neighbor slot: `visible` is what in-flight updates read, `pending`
/// holds the newest arrival until the current update completes.
#[derive(Debug, Clone, Default)]
pub struct CacheSlot {
    pub visible: Option<CachedModel>,
    pub pending: Option<CachedModel>,
}

#[derive(Debug)]
pub struct Device {
    pub index: usize,
    pub speed_factor: f64,
    pub partition: Vec<usize>,
    pub samples: u64,
    /// Whole-model state; pruned slots keep their last aggregated values.
    pub full_model: ParamVector,
    /// `full_model` under the local mask; what trains, evaluates, diffuses.
    pub working: ParamVector,
    pub mask: Mask,
    /// Completed local updates (t_i).
    pub update_count: u64,
    pub cache: BTreeMap<usize, CacheSlot>,
    pub weight_state: WeightState,
    pub policy: Option<PriorityNetwork>,
    pub tracker: RewardTracker,
    pub scaler: SelectionScaler,
    pub pruning: PruningState,
    pub last_train_loss: f64,
    pub bytes_sent: u64,
    pub flops_done: u64,
    pub reaggregation_count: u64,
    pub weight_sum_max_dev: f64,
    batch_rng: Stream,
    select_rng: Stream,
    prune_rng: Stream,
    pub diffuse_rng: Stream,
}

/// Everything a local update needs besides the device itself.
pub struct UpdateContext<'a> {
    pub cfg: &'a RunConfig,
    pub arch: &'a Architecture,
    pub dataset: &'a Dataset,
}

/// Byproducts of one local update.
pub struct UpdateResult {
    pub payload_template: DiffusionPayload,
    pub prune_row: Option<PruneRecord>,
}

pub struct PruneRecord {
    pub round: u64,
    pub p_star: f64,
    pub p_i: f64,
    pub lambda_g: f64,
    pub lipschitz: f64,
    pub density: f64,
    pub predicted_dfc: f64,
    pub realized_dloss: f64,
    pub initial_drift: f64,
}

impl Device {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        index: usize,
        speed_factor: f64,
        partition: Vec<usize>,
        init: ParamVector,
        policy: Option<PriorityNetwork>,
        cfg: &RunConfig,
        batch_rng: Stream,
        select_rng: Stream,
        prune_rng: Stream,
        diffuse_rng: Stream,
    ) -> Self {
        let k = init.len();
        let samples = partition.len() as u64;
        Device {
            index,
            speed_factor,
            partition,
            samples,
            working: init.clone(),
            pruning: PruningState::new(init.clone()),
            full_model: init,
            mask: Mask::ones(k),
            update_count: 0,
            cache: BTreeMap::new(),
            weight_state: WeightState::new(),
            policy,
            tracker: RewardTracker::new(cfg.selection.reward_window),
            scaler: SelectionScaler::new(),
            last_train_loss: f64::NAN,
            bytes_sent: 0,
            flops_done: 0,
            reaggregation_count: 0,
            weight_sum_max_dev: 0.0,
            batch_rng,
            select_rng,
            prune_rng,
            diffuse_rng,
        }
    }

    /// Deposit an arrival; it becomes visible at the next update completion.
    pub fn receive(&mut self, payload: DiffusionPayload) {
        let sender = payload.sender;
        let cached = CachedModel {
            sender,
            params: payload.params,
            mask: payload.mask,
            sender_loss: payload.sender_loss,
            sender_samples: payload.sender_samples,
            sender_rate: payload.sender_rate,
            received_at: self.update_count,
            already_aggregated: false,
        };
        self.cache.entry(sender).or_default().pending = Some(cached);
    }

    /// Promote pending snapshots; called when a local update completes.
    pub fn commit_pending(&mut self) {
        for slot in self.cache.values_mut() {
            if let Some(p) = slot.pending.take() {
                slot.visible = Some(p);
            }
        }
    }

    /// Simulated seconds one local update takes at the current mask.
    pub fn update_duration(&self, cfg: &RunConfig, arch: &Architecture) -> f64 {
        let flops = model::flops_estimate(arch, &self.mask) as f64
            * cfg.training.local_epochs as f64
            * self.samples as f64;
        cfg.sim.time_per_flop * flops * self.speed_factor
    }

    /// FLOPs charged for one local update at the current mask.
    fn update_flops(&self, cfg: &RunConfig, arch: &Architecture) -> u64 {
        model::flops_estimate(arch, &self.mask) * cfg.training.local_epochs as u64 * self.samples as u64
    }

    fn staleness_of(&self, received_at: u64) -> f64 {
        ((self.update_count - received_at.min(self.update_count)) as f64).max(1.0)
    }

    /// Run one full local update; the caller handles scheduling and
    /// diffusion of the returned payload.
    pub fn local_update(&mut self, ctx: &UpdateContext<'_>) -> Result<UpdateResult, SimError> {
        let cfg = ctx.cfg;
        let arch = ctx.arch;
        let t_next = self.update_count + 1;
        let device_index = self.index;
        let err_ctx = move |source: SimError| SimError::DeviceUpdate {
            device: device_index,
            round: t_next,
            source: Box::new(source),
        };

        let flops_this_update = self.update_flops(cfg, arch);

        // Batches for this update: `local_epochs` epochs over the partition.
        let mut batches: Vec<Batch> = Vec::new();
        for _ in 0..cfg.training.local_epochs {
            batches.extend(model::epoch_batches(
                ctx.dataset,
                &self.partition,
                cfg.training.batch_size,
                &mut self.batch_rng,
            ));
        }
        let lr = cfg.training.lr / (1.0 + cfg.training.lr_decay * self.update_count as f64);

        // Selection over the visible cache, ascending sender order.
        let visible: Vec<&CachedModel> = self.cache.values().filter_map(|s| s.visible.as_ref()).collect();
        let mut features: Vec<SelectionFeatures> = Vec::with_capacity(visible.len());
        let mut staleness: Vec<f64> = Vec::with_capacity(visible.len());
        for c in &visible {
            let st = self.staleness_of(c.received_at);
            self.scaler.observe(st, c.sender_loss);
            staleness.push(st);
        }
        for (c, &st) in visible.iter().zip(&staleness) {
            features.push(self.scaler.features(c.already_aggregated, st, c.sender_loss));
        }
        let (selected_pos, actions) = if visible.is_empty() {
            (Vec::new(), Vec::new())
        } else if cfg.selection.enabled {
            let policy = self.policy.as_ref().expect("selection enabled implies a policy");
            let probs = priority_forward(policy, &features).map_err(|e| err_ctx(e.into()))?;
            let outcome = select_models(&probs, cfg.selection.mode, &mut self.select_rng);
            (outcome.selected, outcome.actions)
        } else {
            ((0..visible.len()).collect(), vec![true; visible.len()])
        };

        let selected: Vec<SelectedNeighbor> = selected_pos
            .iter()
            .map(|&pos| SelectedNeighbor { cached: visible[pos], staleness: staleness[pos] })
            .collect();
        let neighbor_rates: Vec<(usize, f64)> =
            selected.iter().map(|s| (s.cached.sender, s.cached.sender_rate)).collect();
        let reused: u64 = selected.iter().filter(|s| s.cached.already_aggregated).count() as u64;

        // SGD + control-parameter update + masked aggregation.
        let hyper = RoundHyper {
            lr,
            eta_lambda: cfg.aggregation.eta_lambda,
            lambda_bounds: (cfg.aggregation.lambda_min, cfg.aggregation.lambda_max),
            loss_floor: cfg.aggregation.loss_floor,
            dynamic_weights: cfg.aggregation.dynamic_weights,
        };
        let out = aggregation_round(
            RoundInput {
                arch,
                full_model: &self.full_model,
                mask: &self.mask,
                own_samples: self.samples,
                batches: &batches,
                selected,
            },
            &mut self.weight_state,
            &hyper,
        )
        .map_err(|e| err_ctx(e.into()))?;
        self.full_model = out.full_model;
        self.working = out.working_model;
        self.last_train_loss = out.epoch_mean_loss;
        self.weight_sum_max_dev = self.weight_sum_max_dev.max(out.weight_sum_error);
        self.reaggregation_count += reused;

        // Mark consumed snapshots.
        let used_senders: Vec<usize> = selected_pos.iter().map(|&p| visible[p].sender).collect();
        for sender in used_senders {
            if let Some(slot) = self.cache.get_mut(&sender) {
                if let Some(v) = slot.visible.as_mut() {
                    v.already_aggregated = true;
                }
            }
        }

        // Adaptive pruning at its cadence.
        let mut prune_row = None;
        if cfg.pruning.enabled && t_next % cfg.pruning.cadence == 0 {
            let row = self
                .pruning_round(ctx, &out.weights, &neighbor_rates, out.epoch_mean_loss, t_next)
                .map_err(err_ctx)?;
            prune_row = Some(row);
        }

        // Policy update with the post-round loss as reward.
        let last_batch = batches.last().expect("validated: at least one batch");
        let reward = model::loss(arch, &self.working, &self.mask, last_batch).map_err(|e| err_ctx(e.into()))?;
        if cfg.selection.enabled && !features.is_empty() {
            let bias = self.tracker.bias().unwrap_or(reward);
            let policy = self.policy.as_mut().expect("selection enabled implies a policy");
            reinforce_update(
                policy,
                &features,
                &actions,
                reward,
                bias,
                cfg.selection.eta_prime,
                cfg.selection.grad_clip,
            )
            .map_err(|e| err_ctx(e.into()))?;
        }
        self.tracker.push(reward);

        self.update_count = t_next;
        self.flops_done += flops_this_update;
        self.commit_pending();

        let payload_template = DiffusionPayload {
            sender: self.index,
            sender_update: self.update_count,
            params: self.working.clone(),
            mask: self.mask.clone(),
            sender_loss: reward,
            sender_samples: self.samples,
            sender_rate: self.pruning.rate,
        };
        Ok(UpdateResult { payload_template, prune_row })
    }

    fn pruning_round(
        &mut self,
        ctx: &UpdateContext<'_>,
        weights: &crate::aggregation::NormalizedWeights,
        neighbor_rates: &[(usize, f64)],
        f_now: f64,
        round: u64,
    ) -> Result<PruneRecord, SimError> {
        let cfg = ctx.cfg;
        let arch = ctx.arch;
        let k = arch.param_count();
        let dense = Mask::ones(k);
        let full_batch = Batch::from_rows(ctx.dataset, &self.partition);

        // Whole-model derivatives at the unmasked state.
        let g = model::gradient(arch, &self.full_model, &dense, &full_batch)?;
        let g_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.pruning.observe_grad_norm(g_norm);
        let lambda_g = lambda_g_schedule(g_norm, self.pruning.grad_norm_max, cfg.pruning.c)?;

        let mut h = model::hessian(arch, &self.full_model, &dense, &full_batch, cfg.pruning.k_max)?;
        pruning::regularize(&mut h, cfg.pruning.eps_rel);

        let center = self.full_model.as_slice().to_vec();
        let grad_fn = |p: &[f64]| model::gradient(arch, &ParamVector::from(p.to_vec()), &dense, &full_batch);
        let h_ref = &h;
        let hess_apply =
            |v: &[f64]| -> Vec<f64> { (h_ref * DVector::from_column_slice(v)).iter().copied().collect() };
        let lipschitz = lipschitz_estimate(
            grad_fn,
            hess_apply,
            &center,
            cfg.pruning.probes,
            cfg.pruning.probe_radius,
            &mut self.prune_rng,
        )?;

        let eigs = HessianView::Dense(&h).ascending_eigenvalues(cfg.pruning.lanczos_steps, &mut self.prune_rng);
        let p_star = lossless_pruning_rate(&eigs, lipschitz, k)?;
        let p_i = aggregate_pruning_rate(p_star, neighbor_rates, weights, cfg.pruning.p_max)?;

        let loss_before = model::loss(arch, &self.full_model, &dense, &full_batch)?;
        let decision = adaptive_prune(&h, &g, self.full_model.as_slice(), f_now, lambda_g, p_i)?;
        let adjusted = ParamVector::new(arch, decision.adjusted.clone())?;
        let realized = model::loss(arch, &adjusted, &dense, &full_batch)? - loss_before;

        self.full_model = adjusted;
        self.mask = decision.mask;
        self.working = ParamVector::from(self.full_model.masked(&self.mask));
        self.pruning.rate = p_i;
        self.pruning.own_rate = p_star;
        self.pruning.lipschitz = lipschitz;
        self.pruning.lambda_g = lambda_g;

        Ok(PruneRecord {
            round,
            p_star,
            p_i,
            lambda_g,
            lipschitz,
            density: self.mask.density(),
            predicted_dfc: decision.predicted_impact,
            realized_dloss: realized,
            initial_drift: self.pruning.initial_drift(&self.full_model),
        })
    }
}
