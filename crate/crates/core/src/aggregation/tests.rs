use super::*;
use crate::gradcheck::{fd_partial, rel_err};
use crate::model::{epoch_batches, generate_synthetic_dataset, sgd_step};
use crate::rng;
use rand::Rng;

#[test]
fn importance_direct_substitution() {
    assert_eq!(importance(5, 1.0, 1.0, 1.0).unwrap(), 5.0);
    // Quadrupling staleness halves the importance.
    assert_eq!(importance(5, 1.0, 4.0, 1.0).unwrap(), 2.5);
}

#[test]
fn importance_rejects_bad_domain() {
    assert!(matches!(importance(5, 1.0, 0.5, 1.0), Err(AggregationError::InvalidStaleness(_))));
    assert!(matches!(importance(5, 1.0, 1.0, 0.0), Err(AggregationError::InvalidLoss(_))));
    assert!(matches!(importance(5, 1.0, 1.0, -2.0), Err(AggregationError::InvalidLoss(_))));
}

#[test]
fn importance_monotonicity_grids() {
    // Strictly decreasing in staleness and loss, increasing in samples and lambda.
    let grid: Vec<f64> = (1..=100).map(|i| i as f64 * 0.37 + 1.0).collect();
    let mut prev = f64::INFINITY;
    for &dt in &grid {
        let v = importance(7, 1.3, dt, 0.8).unwrap();
        assert!(v < prev);
        prev = v;
    }
    prev = f64::INFINITY;
    for &loss in &grid {
        let v = importance(7, 1.3, 2.0, loss).unwrap();
        assert!(v < prev);
        prev = v;
    }
    prev = 0.0;
    for s in 1..=100u64 {
        let v = importance(s, 1.3, 2.0, 0.8).unwrap();
        assert!(v > prev);
        prev = v;
    }
    prev = 0.0;
    for &lam in &grid {
        let v = importance(7, lam, 2.0, 0.8).unwrap();
        assert!(v > prev);
        prev = v;
    }
}

fn raw(self_raw: f64, neighbors: &[(usize, f64)]) -> RawImportances {
    RawImportances { self_device: usize::MAX, self_raw, neighbors: neighbors.to_vec() }
}

#[test]
fn normalize_direct_and_degenerate() {
    let w = normalize_weights(&raw(1.0, &[(1, 1.0), (2, 2.0)])).unwrap();
    assert_eq!(w.self_weight, 0.25);
    assert_eq!(w.neighbors, vec![(1, 0.25), (2, 0.5)]);
    assert!((w.sum() - 1.0).abs() < 1e-15);

    let solo = normalize_weights(&raw(3.7, &[])).unwrap();
    assert_eq!(solo.self_weight, 1.0);
    assert!(solo.neighbors.is_empty());
}

#[test]
fn normalize_scale_invariant() {
    let base = normalize_weights(&raw(0.4, &[(1, 1.1), (5, 0.2)])).unwrap();
    for c in [1e-6, 0.5, 3.0, 1e6] {
        let scaled = normalize_weights(&raw(0.4 * c, &[(1, 1.1 * c), (5, 0.2 * c)])).unwrap();
        assert!(rel_err(base.self_weight, scaled.self_weight, 1e-12) < 1e-12);
        for (a, b) in base.neighbors.iter().zip(&scaled.neighbors) {
            assert_eq!(a.0, b.0);
            assert!(rel_err(a.1, b.1, 1e-12) < 1e-12);
        }
    }
}

#[test]
fn normalize_rejects_nonpositive() {
    assert!(normalize_weights(&raw(0.0, &[(1, 1.0)])).is_err());
    assert!(normalize_weights(&raw(1.0, &[(1, -0.5)])).is_err());
}

#[test]
fn control_gradient_zero_gradient_gives_zero() {
    let r = raw(1.0, &[(1, 2.0)]);
    let g = vec![0.0; 4];
    let m = vec![1.0, -2.0, 0.5, 3.0];
    assert_eq!(control_gradient(&g, &m, &r, 3, 2.0, 0.7, 1).unwrap(), 0.0);
}

#[test]
fn control_gradient_rejects_unknown_target() {
    let r = raw(1.0, &[(1, 2.0)]);
    let err = control_gradient(&[0.1], &[0.2], &r, 3, 2.0, 0.7, 9).unwrap_err();
    assert!(matches!(err, AggregationError::TargetNotSelected(9)));
}

#[test]
fn control_gradient_symmetric_for_identical_neighbors() {
    let r = raw(0.8, &[(1, 1.4), (2, 1.4)]);
    let g = vec![0.3, -0.9, 0.15];
    let m = vec![1.0, 2.0, -0.5];
    let d1 = control_gradient(&g, &m, &r, 6, 3.0, 0.5, 1).unwrap();
    let d2 = control_gradient(&g, &m, &r, 6, 3.0, 0.5, 2).unwrap();
    assert_eq!(d1, d2);
}

/// Finite-difference oracle for the control-parameter derivative, evaluated
/// through the same composition the analytic formula differentiates: the
/// target's normalized weight varies with its control parameter while every
/// other contributor's weight stays frozen at the base point, the weighted
/// model average feeds the real loss.
#[test]
fn control_gradient_matches_fd_oracle_50_instances() {
    let arch = Architecture::Softmax { dims: 3, classes: 2 };
    let k = arch.param_count();
    let dense = Mask::ones(k);
    let mut r = rng::stream(31, "ctrl-fd", 0);
    for inst in 0..50 {
        let batch = {
            let x: Vec<f64> = (0..5 * 3).map(|_| r.gen_range(-1.5..1.5)).collect();
            let y: Vec<usize> = (0..5).map(|_| r.gen_range(0..2)).collect();
            Batch::from_raw(3, x, y)
        };
        let models: Vec<Vec<f64>> =
            (0..3).map(|_| (0..k).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let samples: Vec<u64> = (0..3).map(|_| r.gen_range(2..20)).collect();
        let lambdas: Vec<f64> = (0..3).map(|_| r.gen_range(0.5..2.0)).collect();
        let stalenesses: [f64; 3] = [1.0, r.gen_range(1.0..9.0), r.gen_range(1.0..9.0)];
        let losses: Vec<f64> = (0..3).map(|_| r.gen_range(0.2..2.0)).collect();

        let raw_of = |lam1: f64| {
            let mk = |i: usize, lam: f64| samples[i] as f64 * lam / (stalenesses[i].sqrt() * losses[i]);
            (mk(0, lambdas[0]), mk(1, lam1), mk(2, lambdas[2]))
        };
        let (r0, r1, r2) = raw_of(lambdas[1]);
        let total = r0 + r1 + r2;
        let aggregate = |w0: f64, w1: f64, w2: f64| -> Vec<f64> {
            (0..k).map(|p| w0 * models[0][p] + w1 * models[1][p] + w2 * models[2][p]).collect()
        };
        let base = aggregate(r0 / total, r1 / total, r2 / total);
        let g = crate::model::gradient(&arch, &ParamVector::from(base), &dense, &batch).unwrap();

        let analytic = control_gradient(
            &g,
            &models[1],
            &raw(r0, &[(1, r1), (2, r2)]),
            samples[1],
            stalenesses[1],
            losses[1],
            1,
        )
        .unwrap();

        // Frozen-weight composition: only the target's weight tracks lambda.
        let (w0_bar, w2_bar) = (r0 / total, r2 / total);
        let f = |lam: &[f64]| {
            let (_, r1v, _) = raw_of(lam[0]);
            let w1 = r1v / (r1v + r0 + r2);
            let m = aggregate(w0_bar, w1, w2_bar);
            crate::model::loss(&arch, &ParamVector::from(m), &dense, &batch).unwrap()
        };
        let numeric = fd_partial(f, &[lambdas[1]], 0, 1e-5);
        let err = rel_err(analytic, numeric, 1e-10);
        assert!(err <= 1e-4, "instance {inst}: analytic {analytic} vs fd {numeric}, rel err {err}");
    }
}

#[test]
fn update_control_fixed_points_and_clamp() {
    assert_eq!(update_control(1.5, 0.0, 0.1, (1e-3, 1e3)), 1.5);
    assert_eq!(update_control(1.5, 42.0, 0.0, (1e-3, 1e3)), 1.5);
    // At the lower bound a positive gradient keeps the value clamped.
    assert_eq!(update_control(1e-3, 5.0, 1.0, (1e-3, 1e3)), 1e-3);
    assert_eq!(update_control(999.0, -10.0, 1.0, (1e-3, 1e3)), 1e3);
}

#[test]
fn aggregate_masked_worked_example() {
    let masks: Vec<Mask> = (0..3).map(|_| Mask::ones(1)).collect();
    let values = [vec![2.0], vec![1.0], vec![3.0]];
    let local = WeightedModel { params: &values[0], mask: &masks[0], weight: 0.3 };
    let others = [
        WeightedModel { params: &values[1], mask: &masks[1], weight: 0.6 },
        WeightedModel { params: &values[2], mask: &masks[2], weight: 0.1 },
    ];
    let out = aggregate_masked(local, &others).unwrap();
    assert!((out[0] - 1.5).abs() <= 1e-12);
}

#[test]
fn aggregate_masked_single_model_identity() {
    let mask = Mask::ones(4);
    let v = vec![1.0, -2.0, 0.25, 9.0];
    let out = aggregate_masked(WeightedModel { params: &v, mask: &mask, weight: 1.0 }, &[]).unwrap();
    assert_eq!(out, v);
}

#[test]
fn aggregate_masked_renormalizes_around_pruned_contributor() {
    let m_full = Mask::ones(1);
    let m_empty = Mask::from_bits(vec![false]);
    let a = vec![2.0];
    let b = vec![4.0];
    let out = aggregate_masked(
        WeightedModel { params: &a, mask: &m_full, weight: 0.5 },
        &[WeightedModel { params: &b, mask: &m_empty, weight: 0.5 }],
    )
    .unwrap();
    assert_eq!(out[0], 2.0);
}

#[test]
fn aggregate_masked_keeps_local_when_all_pruned() {
    let m_empty = Mask::from_bits(vec![false, false]);
    let a = vec![7.0, -1.0];
    let b = vec![4.0, 2.0];
    let out = aggregate_masked(
        WeightedModel { params: &a, mask: &m_empty, weight: 0.5 },
        &[WeightedModel { params: &b, mask: &m_empty, weight: 0.5 }],
    )
    .unwrap();
    assert_eq!(out, a);
}

#[test]
fn aggregate_masked_is_convex_combination() {
    let mut r = rng::stream(32, "agg-convex", 0);
    for _ in 0..200 {
        let k = 6;
        let vs: Vec<Vec<f64>> = (0..3).map(|_| (0..k).map(|_| r.gen_range(-5.0..5.0)).collect()).collect();
        let ms: Vec<Mask> =
            (0..3).map(|_| Mask::from_bits((0..k).map(|_| r.gen_bool(0.7)).collect())).collect();
        let mut w: Vec<f64> = (0..3).map(|_| r.gen_range(0.01..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        let out = aggregate_masked(
            WeightedModel { params: &vs[0], mask: &ms[0], weight: w[0] },
            &[
                WeightedModel { params: &vs[1], mask: &ms[1], weight: w[1] },
                WeightedModel { params: &vs[2], mask: &ms[2], weight: w[2] },
            ],
        )
        .unwrap();
        for p in 0..k {
            let contributing: Vec<f64> = (0..3).filter(|&j| ms[j].keep(p)).map(|j| vs[j][p]).collect();
            if contributing.is_empty() {
                assert_eq!(out[p], vs[0][p]);
            } else {
                let lo = contributing.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = contributing.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(out[p] >= lo - 1e-12 && out[p] <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn aggregate_masked_rejects_length_mismatch() {
    let mask = Mask::ones(2);
    let short = Mask::ones(1);
    let a = vec![1.0, 2.0];
    let b = vec![3.0];
    let err = aggregate_masked(
        WeightedModel { params: &a, mask: &mask, weight: 0.5 },
        &[WeightedModel { params: &b, mask: &short, weight: 0.5 }],
    )
    .unwrap_err();
    assert!(matches!(err, AggregationError::LengthMismatch { .. }));
}

fn test_hyper() -> RoundHyper {
    RoundHyper {
        lr: 0.05,
        eta_lambda: 0.01,
        lambda_bounds: (1e-3, 1e3),
        loss_floor: 1e-8,
        dynamic_weights: true,
    }
}

#[test]
fn empty_selection_reduces_to_plain_sgd() {
    let arch = Architecture::Softmax { dims: 4, classes: 3 };
    let mut r = rng::stream(33, "round-sgd", 0);
    let ds = generate_synthetic_dataset(3, 4, 120, 1.0, &mut r).unwrap();
    let indices: Vec<usize> = (0..60).collect();
    let batches = epoch_batches(&ds, &indices, 20, &mut rng::stream(33, "round-sgd-b", 0));
    let start = ParamVector::init(&arch, 0.3, &mut rng::stream(33, "round-sgd-p", 0));
    let mask = Mask::ones(arch.param_count());

    let mut state = WeightState::new();
    let out = aggregation_round(
        RoundInput {
            arch: &arch,
            full_model: &start,
            mask: &mask,
            own_samples: 60,
            batches: &batches,
            selected: vec![],
        },
        &mut state,
        &test_hyper(),
    )
    .unwrap();

    // Bitwise identical to chaining the public sgd_step over the same batches.
    let mut reference = start;
    for b in &batches {
        reference = sgd_step(&arch, &reference, &mask, b, 0.05).unwrap();
    }
    assert_eq!(out.working_model.as_slice(), reference.as_slice());
    assert_eq!(out.full_model.as_slice(), reference.as_slice());
    assert_eq!(state.lambda_self(), LAMBDA_INIT);
}

#[test]
fn identical_neighbor_models_make_aggregation_a_noop() {
    let arch = Architecture::Softmax { dims: 4, classes: 3 };
    let k = arch.param_count();
    let mut r = rng::stream(34, "round-noop", 0);
    let ds = generate_synthetic_dataset(3, 4, 120, 1.0, &mut r).unwrap();
    let indices: Vec<usize> = (0..60).collect();
    let batches = epoch_batches(&ds, &indices, 20, &mut rng::stream(34, "round-noop-b", 0));
    let start = ParamVector::init(&arch, 0.3, &mut rng::stream(34, "round-noop-p", 0));
    let mask = Mask::ones(k);

    // Compute the SGD endpoint first; neighbors carry exactly that model.
    let mut sgd_end = start.clone();
    for b in &batches {
        sgd_end = sgd_step(&arch, &sgd_end, &mask, b, 0.05).unwrap();
    }
    let mk_cached = |sender: usize| CachedModel {
        sender,
        params: sgd_end.clone(),
        mask: Mask::ones(k),
        sender_loss: 0.9,
        sender_samples: 17,
        sender_rate: 0.0,
        received_at: 0,
        already_aggregated: false,
    };
    let (c1, c2) = (mk_cached(1), mk_cached(2));
    let mut state = WeightState::new();
    let out = aggregation_round(
        RoundInput {
            arch: &arch,
            full_model: &start,
            mask: &mask,
            own_samples: 60,
            batches: &batches,
            selected: vec![
                SelectedNeighbor { cached: &c1, staleness: 3.0 },
                SelectedNeighbor { cached: &c2, staleness: 1.0 },
            ],
        },
        &mut state,
        &test_hyper(),
    )
    .unwrap();
    // Convex combination of equal points: differences are pure roundoff.
    for (a, b) in out.working_model.as_slice().iter().zip(sgd_end.as_slice()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(out.weight_sum_error <= 1e-12);
}

/// Straight-line transcription of one aggregation round for a fixed
/// two-neighbor setup, written with explicit arithmetic instead of the
/// library's aggregation helpers. Must agree bit-for-bit.
#[test]
fn round_matches_straight_line_reference_bit_for_bit() {
    let arch = Architecture::Softmax { dims: 2, classes: 2 };
    let k = arch.param_count(); // 6
    let mut r = rng::stream(35, "round-ref", 0);
    let ds = generate_synthetic_dataset(2, 2, 60, 1.0, &mut r).unwrap();
    let indices: Vec<usize> = (0..30).collect();
    let batches = epoch_batches(&ds, &indices, 10, &mut rng::stream(35, "round-ref-b", 0));
    let start = ParamVector::init(&arch, 0.4, &mut rng::stream(35, "round-ref-p", 0));
    // Local mask prunes slot 1; neighbor 4 prunes slot 2; neighbor 7 dense.
    let mut bits = vec![true; k];
    bits[1] = false;
    let mask = Mask::from_bits(bits);
    let mut bits4 = vec![true; k];
    bits4[2] = false;
    let n4 = CachedModel {
        sender: 4,
        params: ParamVector::init(&arch, 0.4, &mut rng::stream(35, "round-ref-n4", 0)),
        mask: Mask::from_bits(bits4),
        sender_loss: 0.7,
        sender_samples: 25,
        sender_rate: 0.0,
        received_at: 0,
        already_aggregated: false,
    };
    let n7 = CachedModel {
        sender: 7,
        params: ParamVector::init(&arch, 0.4, &mut rng::stream(35, "round-ref-n7", 0)),
        mask: Mask::ones(k),
        sender_loss: 1.4,
        sender_samples: 40,
        sender_rate: 0.0,
        received_at: 0,
        already_aggregated: false,
    };
    let (dt4, dt7) = (2.0, 5.0);
    let (lr, eta_lambda) = (0.05, 0.02);

    let mut state = WeightState::new();
    let out = aggregation_round(
        RoundInput {
            arch: &arch,
            full_model: &start,
            mask: &mask,
            own_samples: 30,
            batches: &batches,
            selected: vec![
                SelectedNeighbor { cached: &n4, staleness: dt4 },
                SelectedNeighbor { cached: &n7, staleness: dt7 },
            ],
        },
        &mut state,
        &RoundHyper { lr, eta_lambda, lambda_bounds: (1e-3, 1e3), loss_floor: 1e-8, dynamic_weights: true },
    )
    .unwrap();

    // ---- reference: explicit arithmetic, same accumulation order ----
    // Step 1: SGD over the batches.
    let mut w: Vec<f64> = start.as_slice().iter().zip(mask.bits()).map(|(v, &m)| if m { *v } else { 0.0 }).collect();
    for b in &batches {
        let g = crate::model::gradient(&arch, &ParamVector::from(w.clone()), &mask, b).unwrap();
        for p in 0..k {
            if mask.keep(p) {
                w[p] -= lr * g[p];
            } else {
                w[p] = 0.0;
            }
        }
    }
    let last = batches.last().unwrap();
    let self_loss =
        crate::model::loss(&arch, &ParamVector::from(w.clone()), &mask, last).unwrap().max(1e-8);
    let g_i = crate::model::gradient(&arch, &ParamVector::from(w.clone()), &mask, last).unwrap();

    // Step 2: raw importances with lambda = 1.
    let raw_self = 30.0 * 1.0 / (1.0f64.sqrt() * self_loss);
    let raw4 = 25.0 * 1.0 / (dt4.sqrt() * 0.7);
    let raw7 = 40.0 * 1.0 / (dt7.sqrt() * 1.4);
    let total = raw_self + raw4 + raw7;

    // Step 3: control-parameter descent.
    let dot = |m: &[f64]| -> f64 {
        let mut d = 0.0;
        for p in 0..k {
            d += g_i[p] * m[p];
        }
        d
    };
    let lam_self =
        1.0 - eta_lambda * ((raw4 + raw7) / (total * total) * dot(&w) * (30.0 / (1.0f64.sqrt() * self_loss)));
    let lam4 = 1.0
        - eta_lambda
            * ((raw_self + raw7) / (total * total) * dot(n4.params.as_slice()) * (25.0 / (dt4.sqrt() * 0.7)));
    let lam7 = 1.0
        - eta_lambda
            * ((raw_self + raw4) / (total * total) * dot(n7.params.as_slice()) * (40.0 / (dt7.sqrt() * 1.4)));
    let lam_self = lam_self.clamp(1e-3, 1e3);
    let lam4 = lam4.clamp(1e-3, 1e3);
    let lam7 = lam7.clamp(1e-3, 1e3);

    // Step 4: fresh importances and normalized weights.
    let raw_self2 = 30.0 * lam_self / (1.0f64.sqrt() * self_loss);
    let raw42 = 25.0 * lam4 / (dt4.sqrt() * 0.7);
    let raw72 = 40.0 * lam7 / (dt7.sqrt() * 1.4);
    let total2 = raw_self2 + raw42 + raw72;
    let (w_self, w4, w7) = (raw_self2 / total2, raw42 / total2, raw72 / total2);

    // Step 5: masked aggregation; local full state carries pre-round values
    // at the masked slot.
    let mut full_after = start.as_slice().to_vec();
    for p in 0..k {
        if mask.keep(p) {
            full_after[p] = w[p];
        }
    }
    let mut merged = vec![0.0; k];
    for p in 0..k {
        let mut num = 0.0;
        let mut den = 0.0;
        if mask.keep(p) {
            num += w_self * full_after[p];
            den += w_self;
        }
        if n4.mask.keep(p) {
            num += w4 * n4.params.as_slice()[p];
            den += w4;
        }
        if n7.mask.keep(p) {
            num += w7 * n7.params.as_slice()[p];
            den += w7;
        }
        merged[p] = if den > 0.0 { num / den } else { full_after[p] };
    }

    assert_eq!(out.full_model.as_slice(), merged.as_slice(), "full model differs from reference");
    assert_eq!(state.lambda_self(), lam_self);
    assert_eq!(state.lambda_for(4), lam4);
    assert_eq!(state.lambda_for(7), lam7);
    assert_eq!(out.weights.self_weight, w_self);
    assert_eq!(out.weights.neighbors, vec![(4, w4), (7, w7)]);
    for p in 0..k {
        let expect = if mask.keep(p) { merged[p] } else { 0.0 };
        assert_eq!(out.working_model.as_slice()[p], expect);
    }
}

#[test]
fn weight_sums_stay_normalized_across_rounds() {
    let arch = Architecture::Softmax { dims: 3, classes: 2 };
    let k = arch.param_count();
    let mut r = rng::stream(36, "round-sum", 0);
    let ds = generate_synthetic_dataset(2, 3, 120, 1.0, &mut r).unwrap();
    let indices: Vec<usize> = (0..60).collect();
    let mut state = WeightState::new();
    let mut full = ParamVector::init(&arch, 0.3, &mut rng::stream(36, "round-sum-p", 0));
    let mask = Mask::ones(k);
    let mut worst = 0.0f64;
    for round in 0..50u64 {
        let batches = epoch_batches(&ds, &indices, 30, &mut rng::stream(36, "round-sum-b", round));
        let cached: Vec<CachedModel> = (1..=2)
            .map(|j| CachedModel {
                sender: j,
                params: ParamVector::init(&arch, 0.3, &mut rng::stream(36, "round-sum-n", round * 10 + j as u64)),
                mask: Mask::ones(k),
                sender_loss: 0.4 + j as f64 * 0.3,
                sender_samples: 20 + j as u64,
                sender_rate: 0.0,
                received_at: 0,
                already_aggregated: false,
            })
            .collect();
        let out = aggregation_round(
            RoundInput {
                arch: &arch,
                full_model: &full,
                mask: &mask,
                own_samples: 60,
                batches: &batches,
                selected: cached
                    .iter()
                    .map(|c| SelectedNeighbor { cached: c, staleness: 1.0 + c.sender as f64 })
                    .collect(),
            },
            &mut state,
            &test_hyper(),
        )
        .unwrap();
        worst = worst.max(out.weight_sum_error);
        for &(_, wgt) in &out.weights.neighbors {
            assert!((0.0..=1.0).contains(&wgt));
        }
        assert!((0.0..=1.0).contains(&out.weights.self_weight));
        full = out.full_model;
    }
    assert!(worst <= 1e-12, "worst weight-sum deviation {worst}");
}
