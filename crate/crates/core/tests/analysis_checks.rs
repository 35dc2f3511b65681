//! Oracle checks for the diagnostics: brute-force neighbor curves, the
//! gradient-decomposition identity, smoothing and tercile contracts.

use std::collections::BTreeMap;
use tabunc::analysis::{
    branch_alignment_curve, branch_mean_and_norms, clean_noisy_ratio_curve, grad_decompose,
    neighbor_consistency, tercile_summary, train_split_curve, uncertainty_plot, NeighborConfig,
};
use tabunc::datagen::{gen_saw, SawConfig};
use tabunc::dataset::{Dataset, DatasetMeta, Split};
use tabunc::loss::LossKind;
use tabunc::matrix::Matrix;
use tabunc::models::{build_net, ModelSpec, Net, TrainedModel, TrainMeta};
use tabunc::optim::HasParams;
use tabunc::rng::StreamRng;
use tabunc::train::{build_and_train, TrainConfig};
use tabunc::uncertainty::UncertaintyEstimate;

fn tiny_saw(seed: u64) -> Dataset {
    gen_saw(
        seed,
        &SawConfig {
            n_train: 300,
            n_val: 80,
            n_test: 80,
            ..Default::default()
        },
    )
    .unwrap()
}

fn quick_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 2e-3,
        max_epochs: 8,
        patience: 2,
        batch_size: 128,
        seed,
        ..Default::default()
    }
}

fn wrap(net: Net, ds: &Dataset) -> TrainedModel {
    TrainedModel {
        spec: net.spec().clone(),
        n_features: ds.n_features(),
        net,
        meta: TrainMeta {
            seed: 0,
            epochs_run: 0,
            best_epoch: 0,
            best_val: f64::NAN,
            diverged: false,
        },
    }
}

/// A hand-built dataset with explicit ground truth.
fn manual_dataset(n: usize, seed: u64, f_const: f64, zero_eps_rows: &[usize]) -> Dataset {
    let mut rng = StreamRng::from_seed(seed);
    let mut x = Matrix::zeros(n, 2);
    for v in x.data_mut() {
        *v = rng.normal();
    }
    let f_true = vec![f_const; n];
    let g_true: Vec<f64> = (0..n).map(|_| rng.uniform(-2.0, 0.5)).collect();
    let mut eps: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    for &r in zero_eps_rows {
        eps[r] = 0.0;
    }
    let y: Vec<f64> = (0..n)
        .map(|i| f_true[i] + g_true[i].exp() * eps[i])
        .collect();
    Dataset {
        x,
        y,
        f_true: Some(f_true),
        g_true: Some(g_true),
        eps: Some(eps),
        splits: vec![Split::Train; n],
        standardization: None,
        meta: DatasetMeta {
            generator: "manual".into(),
            seed,
            extra: BTreeMap::new(),
        },
    }
}

#[test]
fn neighbor_curve_matches_brute_force_oracle() {
    let ds = tiny_saw(1);
    let (model, _) = build_and_train(&ModelSpec::mlp(1, 16, 0.0), &ds, &quick_cfg(1), LossKind::Mse)
        .unwrap();
    let cfg = NeighborConfig {
        k_max: 10,
        max_train: Some(50),
        max_test: Some(10),
        seed: 3,
    };
    let curve = neighbor_consistency(&model, &ds, &cfg).unwrap();
    assert_eq!(curve.len(), 10);

    // Independent O(n^2) oracle over the same deterministic subsample.
    let mut rng = StreamRng::from_seed(3).child("neighbor-subsample");
    let train_rows = {
        let rows = ds.rows_of(Split::Train);
        let picked = rng.subset(rows.len(), 50);
        picked.into_iter().map(|i| rows[i]).collect::<Vec<_>>()
    };
    let test_rows = {
        let rows = ds.rows_of(Split::Test);
        let picked = rng.subset(rows.len(), 10);
        picked.into_iter().map(|i| rows[i]).collect::<Vec<_>>()
    };
    let Net::Mlp(mlp) = &model.net else { panic!() };
    let (tx, ty) = ds.gather(&train_rows);
    let (qx, qy) = ds.gather(&test_rows);
    let tl = mlp.latent_after_first_block(&tx).unwrap();
    let ql = mlp.latent_after_first_block(&qx).unwrap();
    let mut oracle = vec![0.0; 10];
    for t in 0..test_rows.len() {
        let mut d: Vec<(f64, usize)> = (0..train_rows.len())
            .map(|j| {
                let dist: f64 = ql
                    .row(t)
                    .iter()
                    .zip(tl.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (dist, j)
            })
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for k in 0..10 {
            let diff = qy[t] - ty[d[k].1];
            oracle[k] += diff * diff / test_rows.len() as f64;
        }
    }
    for (a, b) in curve.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12, "curve {a} vs oracle {b}");
    }
}

#[test]
fn neighbor_curve_zero_when_targets_constant() {
    let mut ds = tiny_saw(2);
    for y in &mut ds.y {
        *y = 1.5;
    }
    let (model, _) = build_and_train(&ModelSpec::mlp(1, 8, 0.0), &ds, &quick_cfg(2), LossKind::Mse)
        .unwrap();
    let cfg = NeighborConfig {
        k_max: 5,
        max_train: Some(40),
        max_test: Some(10),
        seed: 1,
    };
    let curve = neighbor_consistency(&model, &ds, &cfg).unwrap();
    assert!(curve.iter().all(|&v| v == 0.0));
}

#[test]
fn grad_decompose_identity_and_zero_cases() {
    let ds = manual_dataset(40, 5, 0.25, &[3, 7]);
    let mut rng = StreamRng::from_seed(6).child("init");
    let net = build_net(&ModelSpec::mlp(2, 12, 0.0), 2, &mut rng).unwrap();
    let model = wrap(net, &ds);
    let rows: Vec<usize> = (0..40).collect();
    let entries = grad_decompose(&model, &ds, &rows).unwrap();
    for e in &entries {
        assert!(
            e.identity_defect < 1e-10,
            "row {}: defect {}",
            e.row,
            e.identity_defect
        );
    }
    // eps = 0 rows have exactly zero noisy component.
    for &r in &[3usize, 7] {
        let e = entries.iter().find(|e| e.row == r).unwrap();
        assert_eq!(e.noisy_norm, 0.0);
    }
}

#[test]
fn grad_decompose_clean_zero_when_model_matches_truth() {
    // f_true == 0 everywhere and an all-zero network: phi == f_true.
    let ds = manual_dataset(20, 8, 0.0, &[]);
    let mut rng = StreamRng::from_seed(9).child("init");
    let mut net = build_net(&ModelSpec::mlp(2, 8, 0.0), 2, &mut rng).unwrap();
    net.visit_params(&mut |_, m| {
        for v in m.data_mut() {
            *v = 0.0;
        }
    });
    let model = wrap(net, &ds);
    let rows: Vec<usize> = (0..20).collect();
    let entries = grad_decompose(&model, &ds, &rows).unwrap();
    for e in &entries {
        assert_eq!(e.clean_norm, 0.0);
        assert!(e.noisy_norm > 0.0);
    }
    // All-noise dataset with a zero model: ratio is 0 in every bucket.
    let curve = clean_noisy_ratio_curve(&model, &ds, &rows, 1).unwrap();
    assert_eq!(curve.len(), 1);
    assert_eq!(curve[0].ratio, 0.0);
}

#[test]
fn grad_decompose_requires_ground_truth() {
    let mut ds = tiny_saw(3);
    ds.f_true = None;
    ds.g_true = None;
    ds.eps = None;
    let mut rng = StreamRng::from_seed(1).child("init");
    let net = build_net(&ModelSpec::mlp(1, 8, 0.0), 2, &mut rng).unwrap();
    let model = wrap(net, &ds);
    let err = grad_decompose(&model, &ds, &[0, 1]).unwrap_err();
    assert!(err.to_string().contains("ground truth required"));
}

#[test]
fn grad_decompose_identity_on_tabm() {
    let ds = manual_dataset(25, 10, 0.4, &[]);
    let mut rng = StreamRng::from_seed(11).child("init");
    let net = build_net(&ModelSpec::tabm(2, 8, 0.0, 4), 2, &mut rng).unwrap();
    let model = wrap(net, &ds);
    let rows: Vec<usize> = (0..25).collect();
    for e in grad_decompose(&model, &ds, &rows).unwrap() {
        assert!(e.identity_defect < 1e-10, "defect {}", e.identity_defect);
    }
}

#[test]
fn identical_models_give_zero_delta_plot() {
    let ds = tiny_saw(4);
    let (model, _) = build_and_train(&ModelSpec::mlp(1, 8, 0.0), &ds, &quick_cfg(4), LossKind::Mse)
        .unwrap();
    let est = UncertaintyEstimate::from_ground_truth(&ds, Split::Test).unwrap();
    let plot = uncertainty_plot(&model, &model, &ds, &est, Some(2.0)).unwrap();
    assert!(plot.delta_raw.iter().all(|&v| v == 0.0));
    assert!(plot.delta_smooth.iter().all(|&v| v == 0.0));
    // Sorted ascending by uncertainty and a permutation of the test rows.
    for w in plot.uncertainty.windows(2) {
        assert!(w[0] <= w[1]);
    }
    let mut ids = plot.sample_ids.clone();
    ids.sort_unstable();
    assert_eq!(ids, ds.rows_of(Split::Test));
}

#[test]
fn tercile_summary_orders_monotone_delta() {
    let ds = tiny_saw(5);
    let est = UncertaintyEstimate::from_ground_truth(&ds, Split::Test).unwrap();
    let (model, _) = build_and_train(&ModelSpec::mlp(1, 8, 0.0), &ds, &quick_cfg(5), LossKind::Mse)
        .unwrap();
    let mut plot = uncertainty_plot(&model, &model, &ds, &est, Some(1.0)).unwrap();
    // Replace deltas with the uncertainty rank itself.
    plot.delta_raw = (0..plot.delta_raw.len()).map(|i| i as f64).collect();
    let t = tercile_summary(&plot).unwrap();
    assert!(t.high > t.mid && t.mid > t.low);

    // Constant deltas: all terciles equal that constant.
    plot.delta_raw = vec![0.37; plot.delta_raw.len()];
    let t = tercile_summary(&plot).unwrap();
    for v in [t.low, t.mid, t.high] {
        assert!((v - 0.37).abs() < 1e-14);
    }
}

#[test]
fn train_curve_flat_zero_for_interpolating_model() {
    let mut ds = tiny_saw(6);
    for y in &mut ds.y {
        *y = 2.5;
    }
    ds.f_true = Some(vec![2.5; ds.n_rows()]);
    // A model that predicts exactly 2.5 everywhere: zero weights, head bias.
    let mut rng = StreamRng::from_seed(2).child("init");
    let mut net = build_net(&ModelSpec::mlp(1, 8, 0.0), 2, &mut rng).unwrap();
    net.visit_params(&mut |id, m| {
        for v in m.data_mut() {
            *v = 0.0;
        }
        if id == "seq.l3.b" {
            m.data_mut()[0] = 2.5;
        }
    });
    let model = wrap(net, &ds);
    let est = UncertaintyEstimate::from_ground_truth(&ds, Split::Train).unwrap();
    let curve = train_split_curve(&model, &ds, &est, Some(2.0)).unwrap();
    assert!(curve.mse_raw.iter().all(|&v| v == 0.0));
    assert!(curve.mse_smooth.iter().all(|&v| v == 0.0));
    // The ordering matches the estimate's own sorted order exactly.
    let unc = est.uncertainty();
    let mut order: Vec<usize> = (0..est.sample_ids.len()).collect();
    order.sort_by(|&a, &b| {
        unc[a]
            .total_cmp(&unc[b])
            .then(est.sample_ids[a].cmp(&est.sample_ids[b]))
    });
    let expected: Vec<usize> = order.iter().map(|&i| est.sample_ids[i]).collect();
    assert_eq!(curve.sample_ids, expected);
}

#[test]
fn tied_branches_align_perfectly() {
    let ds = manual_dataset(12, 13, 0.3, &[]);
    let mut rng = StreamRng::from_seed(14).child("init");
    let net = build_net(&ModelSpec::tabm(1, 6, 0.0, 4), 2, &mut rng).unwrap();
    let Net::Tabm(mut tabm) = net else { panic!() };
    for block in &mut tabm.blocks {
        for v in block.r.data_mut() {
            *v = 1.0;
        }
        for v in block.s.data_mut() {
            *v = 1.0;
        }
    }
    let head0 = tabm.heads[0].clone();
    for h in &mut tabm.heads {
        *h = head0.clone();
    }
    let model = wrap(Net::Tabm(tabm), &ds);
    let rows: Vec<usize> = (0..12).collect();
    let buckets = branch_alignment_curve(&model, &ds, &rows, 3).unwrap();
    for b in &buckets {
        assert!((b.clean_ratio - 1.0).abs() < 1e-12, "clean {}", b.clean_ratio);
        assert!((b.noisy_ratio - 1.0).abs() < 1e-12, "noisy {}", b.noisy_ratio);
    }
}

#[test]
fn opposite_gradients_cancel_to_zero_ratio() {
    let v = vec![0.5, -1.0, 2.0];
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    let (num, den) = branch_mean_and_norms(&[v.clone(), neg]);
    assert_eq!(num, 0.0);
    assert!(den > 0.0);
    // And alignment ratios always live in [0, 1].
    let w = vec![1.0, 0.3, -0.2];
    let (num, den) = branch_mean_and_norms(&[v, w]);
    assert!(num / den <= 1.0 + 1e-12);
}

#[test]
fn alignment_ratios_lie_in_unit_interval_for_real_models() {
    let ds = manual_dataset(18, 15, 0.2, &[]);
    let mut rng = StreamRng::from_seed(16).child("init");
    let net = build_net(&ModelSpec::tabm(2, 6, 0.0, 3), 2, &mut rng).unwrap();
    let model = wrap(net, &ds);
    let rows: Vec<usize> = (0..18).collect();
    for b in branch_alignment_curve(&model, &ds, &rows, 2).unwrap() {
        assert!(b.clean_ratio >= 0.0 && b.clean_ratio <= 1.0 + 1e-12);
        assert!(b.noisy_ratio >= 0.0 && b.noisy_ratio <= 1.0 + 1e-12);
    }
}
