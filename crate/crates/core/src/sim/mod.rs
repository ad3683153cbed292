//! Deterministic discrete-event simulation engine.
//!
//! Simulated time, not wall time: a device's local update lasts
//! `time_per_flop * flops * epochs * samples * speed_factor` seconds, model
//! transfers last `bytes / bandwidth`. Events process in (time, sequence)
//! order, so runs are bit-reproducible for a fixed configuration and seed.
//! The asynchronous mode interleaves per-device updates and model diffusion;
//! a synchronous-averaging baseline with barrier rounds shares the same
//! data, speed factors, and metrics schema.

pub mod coordinator;
pub mod device;
pub mod event;
pub mod metrics;

use thiserror::Error;

use crate::aggregation::AggregationError;
use crate::config::{ConfigError, RunConfig};
use crate::model::{self, Architecture, Dataset, DevicePartition, Mask, ParamVector};
use crate::pruning::PruningError;
use crate::rng;
use crate::selection::{pretrain_with_heuristics, PriorityNetwork, SelectionError};
use crate::topology::{build_topology, TopologyError, TopologyMatrix};

use coordinator::Coordinator;
use device::{Device, UpdateContext};
use event::{EventKind, EventQueue};
use metrics::{FinalMetrics, MetricsLog, MetricsRow, PruneLogRow, RunSummary, METRICS_SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Pruning(#[from] PruningError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("device {device} local update {round}: {source}")]
    DeviceUpdate { device: usize, round: u64, source: Box<SimError> },
}

/// Mean pairwise L2 distance between working models (masked slots are zero).
pub fn consensus_distance_global(models: &[&ParamVector]) -> f64 {
    let n = models.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = models[i]
                .as_slice()
                .iter()
                .zip(models[j].as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            total += d;
            pairs += 1;
        }
    }
    total / pairs as f64
}

/// Device-side consensus estimate: mean distance from the local model to the
/// visible cached neighbor models.
pub fn consensus_distance_local(local: &ParamVector, cached: &[&ParamVector]) -> f64 {
    if cached.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for c in cached {
        total += local
            .as_slice()
            .iter()
            .zip(c.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
    }
    total / cached.len() as f64
}

/// Speed factors drawn uniform in [1, ratio], then affinely rescaled so the
/// extremes hit 1 and `ratio` exactly.
fn speed_factors(n: usize, ratio: f64, rng: &mut rng::Stream) -> Vec<f64> {
    use rand::Rng;
    if n == 1 || ratio <= 1.0 {
        return vec![1.0; n];
    }
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..=ratio)).collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return raw;
    }
    raw.iter().map(|&u| 1.0 + (u - lo) * (ratio - 1.0) / (hi - lo)).collect()
}

/// Shared setup of both simulation modes.
struct World {
    arch: Architecture,
    dataset: Dataset,
    devices: Vec<Device>,
    topology: Option<TopologyMatrix>,
    coordinator: Coordinator,
}

fn build_world(cfg: &RunConfig) -> Result<World, SimError> {
    cfg.validate()?;
    let arch = cfg.arch();
    let n = cfg.topology.n;
    let seed = cfg.seed;

    let dataset = model::generate_synthetic_dataset(
        cfg.data.classes,
        cfg.data.dims,
        cfg.data.samples,
        cfg.data.spread,
        &mut rng::stream(seed, "data", 0),
    )?;

    let counts = if cfg.data.lognormal_sigma > 0.0 {
        model::lognormal_counts(dataset.n_train(), n, cfg.data.lognormal_sigma, &mut rng::stream(seed, "counts", 0))
    } else {
        vec![(dataset.n_train() / n).max(1); n]
    };
    let partition: DevicePartition =
        model::dirichlet_partition(&dataset, n, cfg.data.alpha, &counts, &mut rng::stream(seed, "partition", 0))?;

    let topology = if n >= 2 { Some(build_topology(cfg.topology.kind, n)?) } else { None };

    let init = ParamVector::init(&arch, 0.1, &mut rng::stream(seed, "init", 0));
    let base_policy = if cfg.selection.enabled {
        Some(if cfg.selection.pretrain {
            pretrain_with_heuristics(
                cfg.selection.hidden,
                cfg.selection.pretrain_bce_target,
                cfg.selection.pretrain_step_cap,
                &mut rng::stream(seed, "pretrain", 0),
            )
            .0
        } else {
            PriorityNetwork::zeros(cfg.selection.hidden)
        })
    } else {
        None
    };

    let factors = speed_factors(n, cfg.sim.speed_ratio, &mut rng::stream(seed, "speed", 0));

    let mut coordinator = Coordinator::new(cfg.sim.heartbeat_timeout);
    let mut devices = Vec::with_capacity(n);
    for i in 0..n {
        let index = coordinator.register(0.0);
        debug_assert_eq!(index, i);
        devices.push(Device::new(
            index,
            factors[i],
            partition.indices[i].clone(),
            init.clone(),
            base_policy.clone(),
            cfg,
            rng::stream(seed, "batches", i as u64),
            rng::stream(seed, "select", i as u64),
            rng::stream(seed, "prune", i as u64),
            rng::stream(seed, "diffuse", i as u64),
        ));
    }

    Ok(World { arch, dataset, devices, topology, coordinator })
}

/// Snapshot of evaluation quantities at one instant.
struct EvalPoint {
    acc_avg: f64,
    consensus: f64,
}

fn evaluate(world: &World, time: f64, rows: &mut Vec<MetricsRow>) -> EvalPoint {
    let ds = &world.dataset;
    let arch = &world.arch;
    let k = arch.param_count();
    let n = world.devices.len();

    // Uniform average of working models, evaluated dense.
    let mut avg = vec![0.0; k];
    for d in &world.devices {
        for (a, v) in avg.iter_mut().zip(d.working.as_slice()) {
            *a += v / n as f64;
        }
    }
    let avg_params = ParamVector::from(avg);
    let acc_avg = model::accuracy(arch, &avg_params, &Mask::ones(k), &ds.test_x, &ds.test_y);

    let models: Vec<&ParamVector> = world.devices.iter().map(|d| &d.working).collect();
    let consensus = consensus_distance_global(&models);

    for d in &world.devices {
        let acc_self = model::accuracy(arch, &d.working, &d.mask, &ds.test_x, &ds.test_y);
        rows.push(MetricsRow {
            sim_time: time,
            device: d.index,
            t_i: d.update_count,
            train_loss: if d.last_train_loss.is_finite() { d.last_train_loss } else { 0.0 },
            test_acc_self: acc_self,
            test_acc_avg: acc_avg,
            density: d.mask.density(),
            consensus_global: consensus,
            bytes_sent_cum: d.bytes_sent,
            flops_cum: d.flops_done,
        });
    }
    EvalPoint { acc_avg, consensus }
}

fn finalize(
    world: &World,
    cfg: &RunConfig,
    mode: &str,
    end_time: f64,
    rows: Vec<MetricsRow>,
    prune_rows: Vec<PruneLogRow>,
    time_to_target: Option<f64>,
    payloads_sent: u64,
    payloads_received: u64,
    last: EvalPoint,
) -> MetricsLog {
    let ds = &world.dataset;
    let n = world.devices.len() as f64;
    let mean_self = world
        .devices
        .iter()
        .map(|d| model::accuracy(&world.arch, &d.working, &d.mask, &ds.test_x, &ds.test_y))
        .sum::<f64>()
        / n;
    let summary = RunSummary {
        schema_version: METRICS_SCHEMA_VERSION,
        seed: cfg.seed,
        mode: mode.to_string(),
        config: cfg.clone(),
        final_metrics: FinalMetrics {
            sim_time: end_time,
            mean_test_acc_self: mean_self,
            test_acc_avg: last.acc_avg,
            consensus_global: last.consensus,
            mean_density: world.devices.iter().map(|d| d.mask.density()).sum::<f64>() / n,
            total_bytes: world.devices.iter().map(|d| d.bytes_sent).sum(),
            total_flops: world.devices.iter().map(|d| d.flops_done).sum(),
        },
        time_to_target,
        target_accuracy: cfg.target_accuracy,
        weight_sum_max_dev: world.devices.iter().map(|d| d.weight_sum_max_dev).fold(0.0, f64::max),
        reaggregation_total: world.devices.iter().map(|d| d.reaggregation_count).sum(),
        payloads_sent,
        payloads_received,
        coordinator_hash: world.coordinator.state_hash(end_time),
        liveness: world.coordinator.liveness(end_time),
    };
    MetricsLog { rows, prune_rows, summary }
}

/// Run the asynchronous decentralized algorithm until every device reaches
/// its update budget or the consensus distance falls below the threshold.
pub fn run_simulation(cfg: &RunConfig) -> Result<MetricsLog, SimError> {
    let mut world = build_world(cfg)?;
    let ctx_arch = world.arch;
    let t_max = cfg.training.max_local_updates;

    let mut queue = EventQueue::new();
    for d in &world.devices {
        queue.push(d.update_duration(cfg, &ctx_arch), EventKind::LocalUpdateDone { device: d.index });
    }
    for d in &world.devices {
        queue.push(cfg.sim.heartbeat_interval, EventKind::Heartbeat { device: d.index });
    }

    let mut rows = Vec::new();
    let mut prune_rows = Vec::new();
    let mut next_eval = cfg.sim.eval_interval;
    let mut last_eval = evaluate(&world, 0.0, &mut rows);
    let mut time_to_target: Option<f64> = None;
    if let Some(target) = cfg.target_accuracy {
        if last_eval.acc_avg >= target {
            time_to_target = Some(0.0);
        }
    }
    let mut stopping = false;
    let mut payloads_sent = 0u64;
    let mut payloads_received = 0u64;
    let mut now = 0.0f64;

    let threshold = cfg.training.consensus_threshold;

    while let Some(ev) = queue.pop() {
        debug_assert!(ev.time >= now, "time went backward");
        // Evaluations between the previous event and this one see the state
        // as of the previous event.
        while next_eval < ev.time {
            last_eval = evaluate(&world, next_eval, &mut rows);
            if time_to_target.is_none() {
                if let Some(target) = cfg.target_accuracy {
                    if last_eval.acc_avg >= target {
                        time_to_target = Some(next_eval);
                    }
                }
            }
            if threshold > 0.0 && last_eval.consensus < threshold {
                stopping = true;
            }
            next_eval += cfg.sim.eval_interval;
        }
        now = ev.time;

        match ev.kind {
            EventKind::LocalUpdateDone { device } => {
                let (result, duration) = {
                    let ctx = UpdateContext { cfg, arch: &ctx_arch, dataset: &world.dataset };
                    let dev = &mut world.devices[device];
                    let result = dev.local_update(&ctx)?;
                    (result, dev.update_duration(cfg, &ctx_arch))
                };
                if let Some(p) = result.prune_row {
                    prune_rows.push(PruneLogRow {
                        round: p.round,
                        device,
                        p_star: p.p_star,
                        p_i: p.p_i,
                        lambda_g: p.lambda_g,
                        lipschitz: p.lipschitz,
                        density: p.density,
                        predicted_dfc: p.predicted_dfc,
                        realized_dloss: p.realized_dloss,
                        initial_drift: p.initial_drift,
                    });
                }
                // Diffuse to one random out-neighbor.
                if let Some(topo) = &world.topology {
                    let dev = &mut world.devices[device];
                    let target = topo.sample_diffusion_target(device, &mut dev.diffuse_rng)?;
                    let payload = result.payload_template;
                    let bytes = payload.byte_size();
                    dev.bytes_sent += bytes;
                    payloads_sent += 1;
                    let delay = if cfg.sim.bandwidth.is_infinite() { 0.0 } else { bytes as f64 / cfg.sim.bandwidth };
                    queue.push(now + delay, EventKind::ModelArrival { to: target, payload });
                }
                if !stopping && world.devices[device].update_count < t_max {
                    queue.push(now + duration, EventKind::LocalUpdateDone { device });
                }
            }
            EventKind::ModelArrival { to, payload } => {
                world.devices[to].receive(payload);
                payloads_received += 1;
            }
            EventKind::Heartbeat { device } => {
                world.coordinator.heartbeat(device, now);
                if !stopping && world.devices[device].update_count < t_max {
                    queue.push(now + cfg.sim.heartbeat_interval, EventKind::Heartbeat { device });
                }
            }
            EventKind::SyncBarrier => unreachable!("no barriers in asynchronous mode"),
        }
    }

    // Final evaluation at the last event time.
    last_eval = evaluate(&world, now, &mut rows);
    if time_to_target.is_none() {
        if let Some(target) = cfg.target_accuracy {
            if last_eval.acc_avg >= target {
                time_to_target = Some(now);
            }
        }
    }
    Ok(finalize(
        &world,
        cfg,
        "async",
        now,
        rows,
        prune_rows,
        time_to_target,
        payloads_sent,
        payloads_received,
        last_eval,
    ))
}

/// Synchronous-averaging comparator: every round, all devices train from the
/// shared global model, a barrier waits for the slowest, and the models
/// average uniformly. Same data, speed factors, and metrics schema as the
/// asynchronous mode; pruning and selection stay off.
pub fn run_sync_baseline(cfg: &RunConfig) -> Result<MetricsLog, SimError> {
    let mut sync_cfg = cfg.clone();
    sync_cfg.selection.enabled = false;
    sync_cfg.pruning.enabled = false;
    sync_cfg.aggregation.dynamic_weights = false;
    let cfg = &sync_cfg;

    let mut world = build_world(cfg)?;
    let arch = world.arch;
    let k = arch.param_count();
    let n = world.devices.len();
    let dense_payload_bytes = {
        let mask = Mask::ones(k);
        4 * k as u64 + mask.bitmap_bytes() + event::PAYLOAD_METADATA_BYTES
    };

    let mut rows = Vec::new();
    let mut next_eval = cfg.sim.eval_interval;
    let mut last_eval = evaluate(&world, 0.0, &mut rows);
    let mut time_to_target: Option<f64> = None;
    if let Some(target) = cfg.target_accuracy {
        if last_eval.acc_avg >= target {
            time_to_target = Some(0.0);
        }
    }
    let mut now = 0.0f64;
    let mut global = world.devices[0].working.clone();
    let threshold = cfg.training.consensus_threshold;

    for _round in 0..cfg.training.max_local_updates {
        // Masks stay dense, so round duration is known before training.
        let round_time = world
            .devices
            .iter()
            .map(|d| d.update_duration(cfg, &arch))
            .fold(0.0f64, f64::max);
        let round_end = now + round_time;
        // Boundaries inside the round see the pre-barrier state.
        while next_eval < round_end {
            last_eval = evaluate(&world, next_eval, &mut rows);
            if time_to_target.is_none() {
                if let Some(target) = cfg.target_accuracy {
                    if last_eval.acc_avg >= target {
                        time_to_target = Some(next_eval);
                    }
                }
            }
            next_eval += cfg.sim.eval_interval;
        }

        // Every device trains from the shared global model.
        let mut results: Vec<ParamVector> = Vec::with_capacity(n);
        {
            let ctx = UpdateContext { cfg, arch: &arch, dataset: &world.dataset };
            for dev in world.devices.iter_mut() {
                dev.full_model = global.clone();
                dev.working = global.clone();
                let result = dev.local_update(&ctx)?;
                dev.bytes_sent += 2 * dense_payload_bytes; // model up + new global down
                results.push(result.payload_template.params);
            }
        }
        now = round_end;

        // Barrier: uniform average becomes the next global model.
        let mut avg = vec![0.0; k];
        for r in &results {
            for (a, v) in avg.iter_mut().zip(r.as_slice()) {
                *a += v / n as f64;
            }
        }
        global = ParamVector::from(avg);
        for dev in world.devices.iter_mut() {
            dev.full_model = global.clone();
            dev.working = global.clone();
        }
        world.coordinator.heartbeat(0, now);
        for d in 1..n {
            world.coordinator.heartbeat(d, now);
        }

        last_eval = evaluate(&world, now, &mut rows);
        if time_to_target.is_none() {
            if let Some(target) = cfg.target_accuracy {
                if last_eval.acc_avg >= target {
                    time_to_target = Some(now);
                }
            }
        }
        if threshold > 0.0 && last_eval.consensus < threshold {
            break;
        }
    }

    Ok(finalize(&world, cfg, "sync", now, rows, Vec::new(), time_to_target, 0, 0, last_eval))
}
