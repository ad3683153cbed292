use super::*;
use crate::gradcheck::{fd_gradient, fd_hessian, rel_err, rel_err_vec};
use crate::rng;

fn random_params(arch: &Architecture, seed: u64) -> ParamVector {
    ParamVector::init(arch, 0.5, &mut rng::stream(seed, "test-params", 0))
}

fn random_batch(arch: &Architecture, len: usize, seed: u64) -> Batch {
    use rand::Rng;
    let mut r = rng::stream(seed, "test-batch", 0);
    let dims = arch.dims();
    let x: Vec<f64> = (0..len * dims).map(|_| r.gen_range(-2.0..2.0)).collect();
    let y: Vec<usize> = (0..len).map(|_| r.gen_range(0..arch.classes())).collect();
    Batch::from_raw(dims, x, y)
}

fn random_mask(k: usize, keep_prob: f64, seed: u64) -> Mask {
    use rand::Rng;
    let mut r = rng::stream(seed, "test-mask", 0);
    Mask::from_bits((0..k).map(|_| r.gen_bool(keep_prob)).collect())
}

const ARCHS: [Architecture; 2] = [
    Architecture::Softmax { dims: 4, classes: 3 },
    Architecture::Mlp { dims: 4, hidden: 5, classes: 3 },
];

#[test]
fn zero_params_uniform_softmax_loss_is_ln_classes() {
    for arch in ARCHS {
        let params = ParamVector::zeros(&arch);
        let mask = Mask::ones(arch.param_count());
        let batch = random_batch(&arch, 64, 1);
        let l = loss(&arch, &params, &mask, &batch).unwrap();
        assert!(
            (l - (arch.classes() as f64).ln()).abs() < 1e-12,
            "{arch:?}: {l}"
        );
    }
}

#[test]
fn all_ones_mask_equals_unmasked_path() {
    for arch in ARCHS {
        let params = random_params(&arch, 2);
        let batch = random_batch(&arch, 16, 3);
        let mask = Mask::ones(arch.param_count());
        let l1 = loss(&arch, &params, &mask, &batch).unwrap();
        // Direct evaluation without any masking.
        let l2 = {
            let eff = params.masked(&mask);
            let p2 = ParamVector::new(&arch, eff).unwrap();
            loss(&arch, &p2, &mask, &batch).unwrap()
        };
        assert_eq!(l1, l2);
    }
}

#[test]
fn perturbing_masked_parameter_leaves_loss_unchanged() {
    for arch in ARCHS {
        let k = arch.param_count();
        let params = random_params(&arch, 4);
        let mask = random_mask(k, 0.6, 5);
        let batch = random_batch(&arch, 16, 6);
        let l1 = loss(&arch, &params, &mask, &batch).unwrap();
        let mut perturbed = params.clone();
        for i in 0..k {
            if !mask.keep(i) {
                perturbed.as_mut_slice()[i] += 37.5;
            }
        }
        let l2 = loss(&arch, &perturbed, &mask, &batch).unwrap();
        assert_eq!(l1, l2);
    }
}

#[test]
fn nan_params_surface_numeric_error() {
    let arch = ARCHS[0];
    let mut params = random_params(&arch, 7);
    params.as_mut_slice()[0] = f64::NAN;
    let mask = Mask::ones(arch.param_count());
    let batch = random_batch(&arch, 4, 8);
    assert!(matches!(loss(&arch, &params, &mask, &batch), Err(ModelError::NonFinite(_))));
    assert!(matches!(gradient(&arch, &params, &mask, &batch), Err(ModelError::NonFinite(_))));
}

#[test]
fn gradient_matches_finite_differences_50_instances() {
    for arch in ARCHS {
        for i in 0..50u64 {
            let params = random_params(&arch, 100 + i);
            let mask = if i % 3 == 0 {
                random_mask(arch.param_count(), 0.7, 200 + i)
            } else {
                Mask::ones(arch.param_count())
            };
            let batch = random_batch(&arch, 8, 300 + i);
            let analytic = gradient(&arch, &params, &mask, &batch).unwrap();
            // FD oracle over the effective parameters with a dense mask: this
            // also checks the masked-position convention (would-be gradient of
            // the zeroed parameter).
            let eff = params.masked(&mask);
            let f = |v: &[f64]| {
                let p = ParamVector::from(v.to_vec());
                loss(&arch, &p, &Mask::ones(v.len()), &batch).unwrap()
            };
            let numeric = fd_gradient(f, &eff, 1e-5);
            let err = rel_err_vec(&analytic, &numeric, 1e-8);
            assert!(err <= 1e-5, "{arch:?} instance {i}: rel err {err}");
        }
    }
}

#[test]
fn gradient_small_at_converged_convex_optimum() {
    let arch = Architecture::Softmax { dims: 3, classes: 2 };
    let mask = Mask::ones(arch.param_count());
    let batch = random_batch(&arch, 32, 9);
    let mut params = ParamVector::zeros(&arch);
    // Newton iterations converge fast on the regularized-free convex loss;
    // plain GD with many steps is enough at this scale.
    for _ in 0..20000 {
        params = sgd_step(&arch, &params, &mask, &batch, 0.5).unwrap();
    }
    let g = gradient(&arch, &params, &mask, &batch).unwrap();
    let ginf = g.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    assert!(ginf < 1e-6, "grad inf norm {ginf}");
}

#[test]
fn hessian_softmax_is_psd_and_symmetric() {
    let arch = ARCHS[0];
    let params = random_params(&arch, 11);
    let mask = Mask::ones(arch.param_count());
    let batch = random_batch(&arch, 16, 12);
    let h = hessian(&arch, &params, &mask, &batch, 512).unwrap();
    let ht = h.transpose();
    assert_eq!(h, ht, "symmetrized Hessian must be exactly symmetric");
    let eigs = h.symmetric_eigenvalues();
    for e in eigs.iter() {
        assert!(*e >= -1e-8, "eigenvalue {e}");
    }
}

#[test]
fn hessian_matches_fd_of_loss_oracle() {
    for arch in ARCHS {
        for i in 0..6u64 {
            let params = random_params(&arch, 400 + i);
            let mask = Mask::ones(arch.param_count());
            let batch = random_batch(&arch, 6, 500 + i);
            let h = hessian(&arch, &params, &mask, &batch, 512).unwrap();
            let eff = params.masked(&mask);
            let f = |v: &[f64]| {
                let p = ParamVector::from(v.to_vec());
                loss(&arch, &p, &Mask::ones(v.len()), &batch).unwrap()
            };
            let oracle = fd_hessian(f, &eff, 1e-3);
            let k = arch.param_count();
            let mut num = 0.0f64;
            let mut den = 1e-8f64;
            for r in 0..k {
                for c in 0..k {
                    num = num.max((h[(r, c)] - oracle[r][c]).abs());
                    den = den.max(h[(r, c)].abs());
                }
            }
            assert!(num / den <= 1e-4, "{arch:?} instance {i}: rel err {}", num / den);
        }
    }
}

#[test]
fn hessian_refuses_above_cap() {
    let arch = Architecture::Softmax { dims: 40, classes: 20 };
    let params = ParamVector::zeros(&arch);
    let mask = Mask::ones(arch.param_count());
    let batch = random_batch(&arch, 2, 13);
    let err = hessian(&arch, &params, &mask, &batch, 512).unwrap_err();
    assert!(matches!(err, ModelError::HessianTooLarge { k: 820, k_max: 512 }));
}

#[test]
fn hvp_zero_vector_and_columns_and_linearity() {
    let arch = ARCHS[1];
    let k = arch.param_count();
    let params = random_params(&arch, 14);
    let mask = Mask::ones(k);
    let batch = random_batch(&arch, 8, 15);

    let zero = hvp(&arch, &params, &mask, &batch, &vec![0.0; k]).unwrap();
    assert!(zero.iter().all(|&v| v == 0.0));

    let dense = hessian(&arch, &params, &mask, &batch, 512).unwrap();
    let mut e1 = vec![0.0; k];
    e1[1] = 1.0;
    let col = hvp(&arch, &params, &mask, &batch, &e1).unwrap();
    let dense_col: Vec<f64> = (0..k).map(|r| dense[(r, 1)]).collect();
    assert!(rel_err_vec(&col, &dense_col, 1e-8) <= 1e-4);

    use rand::Rng;
    let mut r = rng::stream(16, "hvp-lin", 0);
    let u: Vec<f64> = (0..k).map(|_| r.gen_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..k).map(|_| r.gen_range(-1.0..1.0)).collect();
    let (a, b) = (0.7, -1.3);
    let combo: Vec<f64> = u.iter().zip(&w).map(|(x, y)| a * x + b * y).collect();
    let lhs = hvp(&arch, &params, &mask, &batch, &combo).unwrap();
    let hu = hvp(&arch, &params, &mask, &batch, &u).unwrap();
    let hw = hvp(&arch, &params, &mask, &batch, &w).unwrap();
    let rhs: Vec<f64> = hu.iter().zip(&hw).map(|(x, y)| a * x + b * y).collect();
    assert!(rel_err_vec(&lhs, &rhs, 1e-8) <= 1e-4);
}

#[test]
fn sgd_zero_lr_is_identity_and_mask_invariant_holds() {
    let arch = ARCHS[0];
    let k = arch.param_count();
    let params = random_params(&arch, 17);
    let mask = random_mask(k, 0.5, 18);
    let batch = random_batch(&arch, 8, 19);
    let frozen = sgd_step(&arch, &params, &mask, &batch, 0.0).unwrap();
    for i in 0..k {
        if mask.keep(i) {
            assert_eq!(frozen.as_slice()[i], params.as_slice()[i]);
        } else {
            assert_eq!(frozen.as_slice()[i], 0.0);
        }
    }
    let mut p = params;
    for _ in 0..100 {
        p = sgd_step(&arch, &p, &mask, &batch, 0.03).unwrap();
    }
    for i in 0..k {
        if !mask.keep(i) {
            assert_eq!(p.as_slice()[i], 0.0, "masked position {i} drifted");
        }
    }
}

#[test]
fn sgd_loss_trend_decreases_on_convex_task() {
    // Monotone trend over an epoch at the configured rate, not per-step.
    let mut r = rng::stream(20, "sgd-trend", 0);
    let ds = generate_synthetic_dataset(4, 8, 400, 1.0, &mut r).unwrap();
    let arch = Architecture::Softmax { dims: 8, classes: 4 };
    let mask = Mask::ones(arch.param_count());
    let mut params = ParamVector::zeros(&arch);
    let all: Vec<usize> = (0..ds.n_train()).collect();
    let full = Batch::from_rows(&ds, &all);
    let start = loss(&arch, &params, &mask, &full).unwrap();
    let mut br = rng::stream(20, "sgd-trend-batches", 1);
    for _ in 0..3 {
        for b in epoch_batches(&ds, &all, 50, &mut br) {
            params = sgd_step(&arch, &params, &mask, &b, 0.03).unwrap();
        }
    }
    let end = loss(&arch, &params, &mask, &full).unwrap();
    assert!(end < start, "loss did not trend down: {start} -> {end}");
}

#[test]
fn flops_hand_counts() {
    let arch = Architecture::Softmax { dims: 32, classes: 10 };
    let k = arch.param_count();
    assert_eq!(forward_flops(&arch, &Mask::ones(k)), 2 * 32 * 10);
    assert_eq!(flops_estimate(&arch, &Mask::ones(k)), 3 * 2 * 32 * 10);
    assert_eq!(forward_flops(&arch, &Mask::from_bits(vec![false; k])), 0);

    // Half the weight entries masked: exactly half the dense MAC cost.
    let mut bits = vec![true; k];
    for i in 0..(32 * 10) {
        if i % 2 == 0 {
            bits[i] = false;
        }
    }
    let half = Mask::from_bits(bits);
    assert_eq!(forward_flops(&arch, &half), 32 * 10);
}

#[test]
fn synthetic_dataset_separable_when_spread_tiny() {
    let mut r = rng::stream(21, "sep", 0);
    let ds = generate_synthetic_dataset(2, 2, 500, 1e-3, &mut r).unwrap();
    let arch = Architecture::Softmax { dims: 2, classes: 2 };
    let mask = Mask::ones(arch.param_count());
    let mut params = ParamVector::zeros(&arch);
    let all: Vec<usize> = (0..ds.n_train()).collect();
    let mut br = rng::stream(21, "sep-batches", 0);
    for _ in 0..30 {
        for b in epoch_batches(&ds, &all, 50, &mut br) {
            params = sgd_step(&arch, &params, &mask, &b, 0.5).unwrap();
        }
    }
    let acc = accuracy(&arch, &params, &mask, &ds.train_x, &ds.train_y);
    assert!(acc > 0.99, "train accuracy {acc}");
}

#[test]
fn dataset_deterministic_under_seed_and_csv_roundtrip() {
    let a = generate_synthetic_dataset(3, 4, 100, 0.5, &mut rng::stream(22, "ds", 0)).unwrap();
    let b = generate_synthetic_dataset(3, 4, 100, 0.5, &mut rng::stream(22, "ds", 0)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.n_test(), 20);
    let csv = a.to_csv();
    let back = Dataset::from_csv(&csv).unwrap();
    assert_eq!(a, back);
}

#[test]
fn dataset_rejects_bad_config() {
    let mut r = rng::stream(23, "bad", 0);
    assert!(generate_synthetic_dataset(1, 4, 100, 0.5, &mut r).is_err());
    assert!(generate_synthetic_dataset(3, 1, 100, 0.5, &mut r).is_err());
    assert!(generate_synthetic_dataset(3, 4, 0, 0.5, &mut r).is_err());
}

/// Mean per-device total-variation distance between device class histograms
/// and the global train histogram.
fn mean_tv_distance(ds: &Dataset, part: &DevicePartition) -> f64 {
    let mut global = vec![0.0; ds.n_classes];
    for &y in &ds.train_y {
        global[y] += 1.0;
    }
    let total: f64 = global.iter().sum();
    global.iter_mut().for_each(|v| *v /= total);
    let mut acc = 0.0;
    for dev in &part.indices {
        let mut hist = vec![0.0; ds.n_classes];
        for &i in dev {
            hist[ds.train_y[i]] += 1.0;
        }
        let s: f64 = hist.iter().sum();
        hist.iter_mut().for_each(|v| *v /= s);
        let tv: f64 = hist.iter().zip(&global).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        acc += tv;
    }
    acc / part.n_devices() as f64
}

#[test]
fn dirichlet_alpha_limits() {
    let ds = generate_synthetic_dataset(5, 4, 4000, 1.0, &mut rng::stream(24, "part-ds", 0)).unwrap();
    // Leave ~20% of the pool unassigned so class pools rarely run dry.
    let counts = vec![ds.n_train() * 8 / 100; 10];

    let iid = dirichlet_partition(&ds, 10, 1e6, &counts, &mut rng::stream(24, "part", 1)).unwrap();
    let skew = dirichlet_partition(&ds, 10, 0.5, &counts, &mut rng::stream(24, "part", 2)).unwrap();

    // Disjointness and exact counts.
    for part in [&iid, &skew] {
        let mut seen = std::collections::HashSet::new();
        for (d, dev) in part.indices.iter().enumerate() {
            assert_eq!(dev.len(), counts[d]);
            for &i in dev {
                assert!(seen.insert(i), "index {i} assigned twice");
            }
        }
    }

    let tv_iid = mean_tv_distance(&ds, &iid);
    let tv_skew = mean_tv_distance(&ds, &skew);
    assert!(tv_skew > tv_iid, "alpha=0.5 TV {tv_skew} should exceed alpha=1e6 TV {tv_iid}");

    // IID limit: every device class histogram within 5 points of global.
    let mut global = vec![0.0; ds.n_classes];
    for &y in &ds.train_y {
        global[y] += 1.0;
    }
    let t: f64 = global.iter().sum();
    global.iter_mut().for_each(|v| *v /= t);
    for dev in &iid.indices {
        let mut hist = vec![0.0; ds.n_classes];
        for &i in dev {
            hist[ds.train_y[i]] += 1.0;
        }
        let s: f64 = hist.iter().sum();
        for (c, h) in hist.iter().enumerate() {
            assert!((h / s - global[c]).abs() < 0.05);
        }
    }
}

#[test]
fn dirichlet_rejects_infeasible_counts() {
    let ds = generate_synthetic_dataset(3, 4, 100, 1.0, &mut rng::stream(25, "ds", 0)).unwrap();
    let err = dirichlet_partition(&ds, 2, 0.5, &[100, 100], &mut rng::stream(25, "p", 0)).unwrap_err();
    assert!(matches!(err, ModelError::Partition(_)));
}

#[test]
fn lognormal_counts_mean_within_3_percent() {
    let total = 100_000usize;
    let n = 100usize;
    let counts = lognormal_counts(total, n, 0.1, &mut rng::stream(26, "counts", 0));
    assert_eq!(counts.len(), n);
    assert!(counts.iter().all(|&c| c >= 1));
    assert!(counts.iter().sum::<usize>() <= total);
    let mean = counts.iter().sum::<usize>() as f64 / n as f64;
    let target = total as f64 / n as f64;
    assert!(
        (mean - target).abs() / target < 0.03,
        "mean {mean} vs target {target}"
    );
}

#[test]
fn epoch_batches_cover_partition_without_replacement() {
    let ds = generate_synthetic_dataset(3, 4, 200, 1.0, &mut rng::stream(27, "ds", 0)).unwrap();
    let indices: Vec<usize> = (0..100).collect();
    let batches = epoch_batches(&ds, &indices, 32, &mut rng::stream(27, "b", 0));
    let total: usize = batches.iter().map(|b| b.len()).sum();
    assert_eq!(total, 100);
    assert!(batches.iter().all(|b| b.len() <= 32));
}

#[test]
fn masked_gradient_matches_unmasked_twin_at_masked_positions() {
    let arch = ARCHS[0];
    let k = arch.param_count();
    let params = random_params(&arch, 28);
    let mask = random_mask(k, 0.5, 29);
    let batch = random_batch(&arch, 8, 30);
    let g_masked = gradient(&arch, &params, &mask, &batch).unwrap();
    // Twin model: same effective parameters, dense mask.
    let twin = ParamVector::from(params.masked(&mask));
    let g_twin = gradient(&arch, &twin, &Mask::ones(k), &batch).unwrap();
    for i in 0..k {
        assert!(
            rel_err(g_masked[i], g_twin[i], 1e-10) < 1e-12,
            "position {i}: {} vs {}",
            g_masked[i],
            g_twin[i]
        );
    }
}
