//! Synthetic dataset generators with known per-sample noise, plus the
//! feature-dropping transform.
//!
//! Both generators construct targets as `y = f(x) + exp(g(x)) * eps` with
//! `eps ~ N(0, 1)`, and store `f`, `g` and the noise draw so downstream
//! analyses can work with the exact ground truth.

use crate::dataset::{Dataset, DatasetMeta, Split};
use crate::error::{Error, Result};
use crate::layers::{Affine, Layer, Mode, Sequential};
use crate::matrix::Matrix;
use crate::rng::StreamRng;
use std::collections::BTreeMap;

/// Configuration of the MLP-parameterized generator.
#[derive(Debug, Clone)]
pub struct MlpSynthConfig {
    pub n: usize,
    pub d: usize,
    /// Hidden width of the 3-affine-layer clean-target network.
    pub f_hidden: usize,
    /// Hidden width of the 2-affine-layer log-noise network.
    pub g_hidden: usize,
    /// Constant shift applied to the log-noise output.
    pub g_shift: f64,
}

impl Default for MlpSynthConfig {
    fn default() -> Self {
        MlpSynthConfig {
            n: 40_000,
            d: 20,
            f_hidden: 64,
            g_hidden: 10,
            g_shift: -1.0,
        }
    }
}

/// Samples standard-normal features and produces targets from randomly
/// initialized clean-target and log-noise networks. Splits 80/10/10.
pub fn gen_mlp_synthetic(seed: u64, cfg: &MlpSynthConfig) -> Result<Dataset> {
    if cfg.n < 10 || cfg.d < 1 {
        return Err(Error::Usage(format!(
            "gen_mlp_synthetic needs n >= 10 and d >= 1, got n={} d={}",
            cfg.n, cfg.d
        )));
    }
    let root = StreamRng::from_seed(seed).child("mlp-synth");
    let mut feat_rng = root.child("features");
    let mut x = Matrix::zeros(cfg.n, cfg.d);
    for v in x.data_mut() {
        *v = feat_rng.normal();
    }

    let mut f_rng = root.child("f-net");
    let f_net = Sequential::new(vec![
        Layer::Affine(Affine::init(cfg.d, cfg.f_hidden, &mut f_rng)),
        Layer::Relu,
        Layer::Affine(Affine::init(cfg.f_hidden, cfg.f_hidden, &mut f_rng)),
        Layer::Relu,
        Layer::Affine(Affine::init(cfg.f_hidden, 1, &mut f_rng)),
    ]);
    let mut g_rng = root.child("g-net");
    let g_net = Sequential::new(vec![
        Layer::Affine(Affine::init(cfg.d, cfg.g_hidden, &mut g_rng)),
        Layer::Relu,
        Layer::Affine(Affine::init(cfg.g_hidden, 1, &mut g_rng)),
    ]);

    let f_true: Vec<f64> = f_net
        .forward(&x, Mode::Eval, None)?
        .output
        .data()
        .to_vec();
    let g_true: Vec<f64> = g_net
        .forward(&x, Mode::Eval, None)?
        .output
        .data()
        .iter()
        .map(|v| v + cfg.g_shift)
        .collect();

    let mut noise_rng = root.child("noise");
    let eps: Vec<f64> = (0..cfg.n).map(|_| noise_rng.normal()).collect();
    let y: Vec<f64> = (0..cfg.n)
        .map(|i| f_true[i] + g_true[i].exp() * eps[i])
        .collect();

    let n_train = cfg.n * 8 / 10;
    let n_val = cfg.n / 10;
    let splits = (0..cfg.n)
        .map(|i| {
            if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect();

    Ok(Dataset {
        x,
        y,
        f_true: Some(f_true),
        g_true: Some(g_true),
        eps: Some(eps),
        splits,
        standardization: None,
        meta: DatasetMeta {
            generator: "mlp-synth".into(),
            seed,
            extra: BTreeMap::new(),
        },
    })
}

/// Configuration of the saw-like 2D generator.
#[derive(Debug, Clone)]
pub struct SawConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Noise scale is `x2^exponent / denominator` of the second feature.
    pub noise_exponent: f64,
    pub noise_denominator: f64,
}

impl Default for SawConfig {
    fn default() -> Self {
        SawConfig {
            n_train: 80_000,
            n_val: 10_000,
            n_test: 10_000,
            noise_exponent: 6.0,
            noise_denominator: 62_500.0,
        }
    }
}

/// Height of the saw separation line at tooth coordinate `u` in [0, 10],
/// normalized to [0, 1]: five teeth with apexes at u = 1, 3, 5, 7, 9.
fn tooth_height(u: f64) -> f64 {
    let i = (u / 2.0).floor().clamp(0.0, 4.0);
    let apex = 2.0 * i + 1.0;
    (1.0 - (u - apex).abs()).max(0.0)
}

/// Clean target of the saw dataset in tooth coordinates: 1 inside a tooth.
fn saw_clean_target(u: f64, x2: f64) -> f64 {
    if x2 / 10.0 <= tooth_height(u) {
        1.0
    } else {
        0.0
    }
}

/// Samples points uniformly over the (0,0)-(1,10) rectangle (first feature
/// is the tooth coordinate rescaled by 1/10) and adds Gaussian noise whose
/// scale grows as the sixth power of the second coordinate.
pub fn gen_saw(seed: u64, cfg: &SawConfig) -> Result<Dataset> {
    let n = cfg.n_train + cfg.n_val + cfg.n_test;
    if cfg.n_train == 0 || cfg.n_val == 0 || cfg.n_test == 0 {
        return Err(Error::Usage("gen_saw needs non-empty splits".into()));
    }
    let root = StreamRng::from_seed(seed).child("saw");
    let mut feat_rng = root.child("features");
    let mut noise_rng = root.child("noise");
    let mut x = Matrix::zeros(n, 2);
    let mut y = Vec::with_capacity(n);
    let mut f_true = Vec::with_capacity(n);
    let mut g_true = Vec::with_capacity(n);
    let mut eps = Vec::with_capacity(n);
    for i in 0..n {
        let u = feat_rng.uniform(0.0, 10.0);
        let x2 = feat_rng.uniform(0.0, 10.0);
        x.set(i, 0, u / 10.0);
        x.set(i, 1, x2);
        let f = saw_clean_target(u, x2);
        let scale = x2.powf(cfg.noise_exponent) / cfg.noise_denominator;
        let g = scale.ln();
        let e = noise_rng.normal();
        f_true.push(f);
        g_true.push(g);
        eps.push(e);
        y.push(f + g.exp() * e);
    }
    let splits = (0..n)
        .map(|i| {
            if i < cfg.n_train {
                Split::Train
            } else if i < cfg.n_train + cfg.n_val {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect();
    let mut extra = BTreeMap::new();
    extra.insert("noise_exponent".into(), cfg.noise_exponent.to_string());
    extra.insert("noise_denominator".into(), cfg.noise_denominator.to_string());
    Ok(Dataset {
        x,
        y,
        f_true: Some(f_true),
        g_true: Some(g_true),
        eps: Some(eps),
        splits,
        standardization: None,
        meta: DatasetMeta {
            generator: "saw".into(),
            seed,
            extra,
        },
    })
}

/// Clean target of the saw dataset expressed over the stored features
/// (first feature in [0, 1], second in [0, 10]). Used by figure rendering.
pub fn saw_clean_target_features(x1: f64, x2: f64) -> f64 {
    saw_clean_target(x1 * 10.0, x2)
}

/// Keeps a uniformly random subset of `keep` feature columns (original
/// column order preserved); rows, targets, ground truth and splits are
/// unchanged. The kept column indices are recorded in the metadata.
pub fn drop_features(ds: &Dataset, keep: usize, seed: u64) -> Result<Dataset> {
    let d = ds.n_features();
    if keep < 1 || keep > d {
        return Err(Error::Usage(format!(
            "keep must be in [1, {d}], got {keep}"
        )));
    }
    let mut rng = StreamRng::from_seed(seed).child("drop-features");
    let kept = rng.subset(d, keep);
    let x = ds.x.gather_cols(&kept);
    let mut out = ds.clone();
    out.x = x;
    out.meta.extra.insert(
        "kept_columns".into(),
        kept.iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(" "),
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_synth_noise_identity_holds_exactly() {
        let cfg = MlpSynthConfig {
            n: 500,
            ..Default::default()
        };
        let ds = gen_mlp_synthetic(7, &cfg).unwrap();
        assert_eq!(ds.noise_identity_defect(), Some(0.0));
    }

    #[test]
    fn mlp_synth_column_means_within_clt_bound() {
        let ds = gen_mlp_synthetic(0, &MlpSynthConfig::default()).unwrap();
        let n = ds.n_rows() as f64;
        let bound = 4.0 / n.sqrt();
        for j in 0..ds.n_features() {
            let mean = (0..ds.n_rows()).map(|i| ds.x.get(i, j)).sum::<f64>() / n;
            assert!(mean.abs() < bound, "column {j} mean {mean} vs bound {bound}");
        }
    }

    #[test]
    fn mlp_synth_is_deterministic_under_seed() {
        let cfg = MlpSynthConfig {
            n: 200,
            ..Default::default()
        };
        let a = gen_mlp_synthetic(42, &cfg).unwrap();
        let b = gen_mlp_synthetic(42, &cfg).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        assert_eq!(a.g_true, b.g_true);
    }

    #[test]
    fn mlp_synth_default_shape_and_splits() {
        let ds = gen_mlp_synthetic(1, &MlpSynthConfig::default()).unwrap();
        assert_eq!(ds.n_rows(), 40_000);
        assert_eq!(ds.n_features(), 20);
        assert_eq!(ds.split_sizes(), (32_000, 4_000, 4_000));
    }

    #[test]
    fn saw_zero_x2_has_zero_noise() {
        // Interior of the first tooth at x2 = 0: scale 0^6 / 62500 = 0.
        assert_eq!(saw_clean_target(1.0, 0.0), 1.0);
        let scale: f64 = 0.0f64.powf(6.0) / 62_500.0;
        assert_eq!(scale, 0.0);
        // y = f + exp(ln 0) * eps = f exactly.
        assert_eq!(1.0 + scale.ln().exp() * 1.7, 1.0);
    }

    #[test]
    fn saw_noise_scale_at_top_is_sixteen() {
        let scale = 10.0f64.powf(6.0) / 62_500.0;
        assert_eq!(scale, 16.0);
        let cfg = SawConfig::default();
        assert_eq!(10.0f64.powf(cfg.noise_exponent) / cfg.noise_denominator, 16.0);
    }

    #[test]
    fn saw_teeth_cover_half_the_rectangle() {
        let cfg = SawConfig {
            n_train: 60_000,
            n_val: 1_000,
            n_test: 1_000,
            ..Default::default()
        };
        let ds = gen_saw(3, &cfg).unwrap();
        let train = ds.rows_of(Split::Train);
        let frac = train
            .iter()
            .filter(|&&i| ds.f_true.as_ref().unwrap()[i] == 1.0)
            .count() as f64
            / train.len() as f64;
        assert!((frac - 0.5).abs() < 0.01, "tooth fraction {frac}");
    }

    #[test]
    fn saw_geometry_matches_area_integral_oracle() {
        // Monte-Carlo on a deterministic grid: the tent covers half of every
        // vertical strip on average.
        let mut inside = 0usize;
        let mut total = 0usize;
        for iu in 0..1000 {
            let u = (iu as f64 + 0.5) / 100.0; // 0..10
            for iv in 0..100 {
                let x2 = (iv as f64 + 0.5) / 10.0; // 0..10
                total += 1;
                if saw_clean_target(u, x2) == 1.0 {
                    inside += 1;
                }
            }
        }
        let frac = inside as f64 / total as f64;
        assert!((frac - 0.5).abs() < 0.005, "grid fraction {frac}");
    }

    #[test]
    fn saw_identity_and_invariants() {
        let cfg = SawConfig {
            n_train: 2_000,
            n_val: 300,
            n_test: 300,
            ..Default::default()
        };
        let ds = gen_saw(11, &cfg).unwrap();
        assert_eq!(ds.noise_identity_defect(), Some(0.0));
        let f = ds.f_true.as_ref().unwrap();
        assert!(f.iter().all(|&v| v == 0.0 || v == 1.0));
        // exp(g) depends only on x2 and is monotone in it.
        let g = ds.g_true.as_ref().unwrap();
        let mut pairs: Vec<(f64, f64)> = (0..ds.n_rows()).map(|i| (ds.x.get(i, 1), g[i])).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in pairs.windows(2) {
            assert!(w[0].1 <= w[1].1, "exp(g) must be monotone in x2");
        }
    }

    #[test]
    fn drop_features_keeps_rows_targets_splits() {
        let ds = gen_mlp_synthetic(5, &MlpSynthConfig { n: 100, ..Default::default() }).unwrap();
        let dropped = drop_features(&ds, 7, 9).unwrap();
        assert_eq!(dropped.n_features(), 7);
        assert_eq!(dropped.y, ds.y);
        assert_eq!(dropped.splits, ds.splits);
        assert_eq!(dropped.f_true, ds.f_true);
        let again = drop_features(&ds, 7, 9).unwrap();
        assert_eq!(again.x, dropped.x);
        assert_eq!(
            again.meta.extra.get("kept_columns"),
            dropped.meta.extra.get("kept_columns")
        );
    }

    #[test]
    fn drop_features_keep_all_preserves_order() {
        let ds = gen_mlp_synthetic(5, &MlpSynthConfig { n: 50, ..Default::default() }).unwrap();
        let dropped = drop_features(&ds, ds.n_features(), 1).unwrap();
        assert_eq!(dropped.x, ds.x);
    }

    #[test]
    fn drop_features_out_of_range_errors() {
        let ds = gen_mlp_synthetic(5, &MlpSynthConfig { n: 50, ..Default::default() }).unwrap();
        assert!(drop_features(&ds, 0, 1).is_err());
        assert!(drop_features(&ds, 21, 1).is_err());
    }

    #[test]
    fn drop_features_single_column_deterministic() {
        let ds = gen_mlp_synthetic(6, &MlpSynthConfig { n: 50, ..Default::default() }).unwrap();
        let a = drop_features(&ds, 1, 123).unwrap();
        let b = drop_features(&ds, 1, 123).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.x.cols(), 1);
    }
}
