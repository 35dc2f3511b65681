//! Diagnostics: uncertainty plots with Gaussian smoothing, neighbor
//! target-consistency curves, train-split underfitting curves, and the
//! clean/noisy gradient decomposition with its two norm-ratio analyses.

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::loss::squared_errors;
use crate::matrix::Matrix;
use crate::models::{Net, Predictor, TrainedModel};
use crate::rng::StreamRng;
use crate::uncertainty::UncertaintyEstimate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Normalized discrete Gaussian kernel with radius ceil(4 sigma).
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    let radius = (4.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for j in -radius..=radius {
        kernel.push((-(j as f64) * (j as f64) / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = kernel.iter().sum();
    for w in &mut kernel {
        *w /= sum;
    }
    kernel
}

/// Reflect index into [0, n): pattern d c b a | a b c d | d c b a.
fn reflect(mut i: i64, n: i64) -> usize {
    loop {
        if i < 0 {
            i = -1 - i;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Discrete Gaussian convolution with reflect padding. The series is
/// mean-centered before convolving, so a constant series passes through
/// bit-exactly and the global mean of any series is preserved.
pub fn gaussian_smooth(series: &[f64], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 || series.len() <= 1 {
        return series.to_vec();
    }
    let mean = series.iter().sum::<f64>() / series.len() as f64;
    let centered: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let n = centered.len() as i64;
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let j = i + (k as i64 - radius);
                acc += w * centered[reflect(j, n)];
            }
            acc + mean
        })
        .collect()
}

/// Per-sample metric deltas sorted by estimated uncertainty, raw and smoothed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UncertaintyPlot {
    /// Dataset row ids in ascending-uncertainty order.
    pub sample_ids: Vec<usize>,
    pub uncertainty: Vec<f64>,
    /// err(baseline) - err(candidate) per sample.
    pub delta_raw: Vec<f64>,
    pub delta_smooth: Vec<f64>,
    pub base_raw: Vec<f64>,
    pub base_smooth: Vec<f64>,
    pub sigma: f64,
}

/// Smoothing width when none is given: 2% of the evaluated split size.
pub fn default_sigma(n: usize) -> f64 {
    0.02 * n as f64
}

/// Sorts the estimate's samples by ascending uncertainty (ties broken by
/// sample id) and returns the permutation applied to `est.sample_ids`.
fn uncertainty_order(est: &UncertaintyEstimate) -> (Vec<usize>, Vec<f64>) {
    let unc = est.uncertainty();
    let mut order: Vec<usize> = (0..est.sample_ids.len()).collect();
    order.sort_by(|&a, &b| {
        unc[a]
            .total_cmp(&unc[b])
            .then(est.sample_ids[a].cmp(&est.sample_ids[b]))
    });
    (order, unc)
}

/// Builds an uncertainty plot comparing two models on the estimate's split.
pub fn uncertainty_plot(
    baseline: &dyn Predictor,
    candidate: &dyn Predictor,
    ds: &Dataset,
    est: &UncertaintyEstimate,
    sigma: Option<f64>,
) -> Result<UncertaintyPlot> {
    let rows = &est.sample_ids;
    if rows.is_empty() {
        return Err(Error::Usage("estimate covers no samples".into()));
    }
    let expected = ds.rows_of(est.split);
    if *rows != expected {
        return Err(Error::Usage(
            "estimate split does not match the dataset rows; recompute the estimate".into(),
        ));
    }
    let (_, y) = ds.gather(rows);
    let base_pred = baseline.predict_rows(ds, rows)?;
    let cand_pred = candidate.predict_rows(ds, rows)?;
    let base_err = squared_errors(&base_pred, &y);
    let cand_err = squared_errors(&cand_pred, &y);
    let (order, unc) = uncertainty_order(est);
    let sigma = sigma.unwrap_or_else(|| default_sigma(rows.len()));
    let delta_raw: Vec<f64> = order.iter().map(|&i| base_err[i] - cand_err[i]).collect();
    let base_raw: Vec<f64> = order.iter().map(|&i| base_err[i]).collect();
    Ok(UncertaintyPlot {
        sample_ids: order.iter().map(|&i| rows[i]).collect(),
        uncertainty: order.iter().map(|&i| unc[i]).collect(),
        delta_smooth: gaussian_smooth(&delta_raw, sigma),
        base_smooth: gaussian_smooth(&base_raw, sigma),
        delta_raw,
        base_raw,
        sigma,
    })
}

/// Mean raw delta-MSE in each contiguous third of the sorted order.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TercileSummary {
    pub low: f64,
    pub mid: f64,
    pub high: f64,
}

/// Bounds of the three contiguous terciles of n sorted samples.
pub fn tercile_bounds(n: usize) -> (usize, usize) {
    (n / 3, 2 * n / 3)
}

pub fn tercile_summary(plot: &UncertaintyPlot) -> Result<TercileSummary> {
    let n = plot.delta_raw.len();
    if n < 3 {
        return Err(Error::Usage("tercile summary needs at least 3 samples".into()));
    }
    let (a, b) = tercile_bounds(n);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Ok(TercileSummary {
        low: mean(&plot.delta_raw[..a]),
        mid: mean(&plot.delta_raw[a..b]),
        high: mean(&plot.delta_raw[b..]),
    })
}

/// Subsampling knobs for the neighbor-consistency diagnostic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeighborConfig {
    pub k_max: usize,
    /// Cap on train rows used as neighbor pool (deterministic subsample).
    pub max_train: Option<usize>,
    /// Cap on test rows averaged over.
    pub max_test: Option<usize>,
    pub seed: u64,
}

impl Default for NeighborConfig {
    fn default() -> Self {
        NeighborConfig {
            k_max: 64,
            max_train: Some(4000),
            max_test: Some(1000),
            seed: 0,
        }
    }
}

fn subsample(rows: Vec<usize>, cap: Option<usize>, rng: &mut StreamRng) -> Vec<usize> {
    match cap {
        Some(c) if c < rows.len() => {
            let picked = rng.subset(rows.len(), c);
            picked.into_iter().map(|i| rows[i]).collect()
        }
        _ => rows,
    }
}

/// Mean squared difference between each test target and the target of its
/// k-th closest train neighbor, k = 1..=k_max. Distances are Euclidean in
/// the latent space after the model's first block (embedding plus first
/// affine and activation for embedded models; first affine and activation
/// for plain MLPs). Ties break by train row order.
pub fn neighbor_consistency(
    model: &TrainedModel,
    ds: &Dataset,
    cfg: &NeighborConfig,
) -> Result<Vec<f64>> {
    let Net::Mlp(mlp) = &model.net else {
        return Err(Error::Usage(
            "neighbor consistency is defined for MLP-family models".into(),
        ));
    };
    let mut rng = StreamRng::from_seed(cfg.seed).child("neighbor-subsample");
    let train_rows = subsample(ds.rows_of(Split::Train), cfg.max_train, &mut rng);
    let test_rows = subsample(ds.rows_of(Split::Test), cfg.max_test, &mut rng);
    if cfg.k_max == 0 || cfg.k_max > train_rows.len() {
        return Err(Error::Usage(format!(
            "k_max must be in [1, {}], got {}",
            train_rows.len(),
            cfg.k_max
        )));
    }
    let (train_x, train_y) = ds.gather(&train_rows);
    let (test_x, test_y) = ds.gather(&test_rows);
    let train_latent = mlp.latent_after_first_block(&train_x)?;
    let test_latent = mlp.latent_after_first_block(&test_x)?;

    let per_test: Vec<Vec<f64>> = (0..test_rows.len())
        .into_par_iter()
        .map(|t| {
            let q = test_latent.row(t);
            let mut dist: Vec<(f64, usize)> = (0..train_rows.len())
                .map(|j| {
                    let d: f64 = q
                        .iter()
                        .zip(train_latent.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (d, j)
                })
                .collect();
            dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            (0..cfg.k_max)
                .map(|k| {
                    let diff = test_y[t] - train_y[dist[k].1];
                    diff * diff
                })
                .collect()
        })
        .collect();

    let mut curve = vec![0.0; cfg.k_max];
    for row in &per_test {
        for (c, v) in curve.iter_mut().zip(row) {
            *c += v;
        }
    }
    for c in &mut curve {
        *c /= test_rows.len() as f64;
    }
    Ok(curve)
}

/// Per-train-sample squared error of one model, sorted by the estimate's
/// uncertainty and smoothed; exhibits retrieval-head underfitting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainCurve {
    pub sample_ids: Vec<usize>,
    pub uncertainty: Vec<f64>,
    pub mse_raw: Vec<f64>,
    pub mse_smooth: Vec<f64>,
    pub sigma: f64,
}

pub fn train_split_curve(
    model: &dyn Predictor,
    ds: &Dataset,
    est: &UncertaintyEstimate,
    sigma: Option<f64>,
) -> Result<TrainCurve> {
    if est.split != Split::Train {
        return Err(Error::Usage("estimate must cover the train split".into()));
    }
    let rows = &est.sample_ids;
    if *rows != ds.rows_of(Split::Train) {
        return Err(Error::Usage("estimate rows do not match the train split".into()));
    }
    let (_, y) = ds.gather(rows);
    let pred = model.predict_rows(ds, rows)?;
    let err = squared_errors(&pred, &y);
    let (order, unc) = uncertainty_order(est);
    let sigma = sigma.unwrap_or_else(|| default_sigma(rows.len()));
    let mse_raw: Vec<f64> = order.iter().map(|&i| err[i]).collect();
    Ok(TrainCurve {
        sample_ids: order.iter().map(|&i| rows[i]).collect(),
        uncertainty: order.iter().map(|&i| unc[i]).collect(),
        mse_smooth: gaussian_smooth(&mse_raw, sigma),
        mse_raw,
        sigma,
    })
}

/// Per-sample record of the clean/noisy gradient decomposition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradDecompEntry {
    pub row: usize,
    /// True data uncertainty exp(2 g_true).
    pub uncertainty: f64,
    pub clean_norm: f64,
    pub noisy_norm: f64,
    /// Max-abs defect of clean + noisy against the direct MSE gradient.
    pub identity_defect: f64,
}

/// Decomposes the per-sample MSE gradient into its clean component
/// `2 (phi - f_true) dphi/dtheta` and noisy component
/// `-2 exp(g_true) eps dphi/dtheta`, using the stored noise draw. For
/// multi-branch models the per-branch losses are averaged, so each
/// component is the mean of per-branch contributions.
pub fn grad_decompose(
    model: &TrainedModel,
    ds: &Dataset,
    rows: &[usize],
) -> Result<Vec<GradDecompEntry>> {
    let (f_true, g_true, eps) = match (&ds.f_true, &ds.g_true, &ds.eps) {
        (Some(f), Some(g), Some(e)) => (f, g, e),
        _ => return Err(Error::Usage("ground truth required".into())),
    };
    if model.spec.heteroscedastic {
        return Err(Error::Usage(
            "gradient decomposition applies to mean-head models".into(),
        ));
    }
    let k = model.net.parts();
    rows.par_iter()
        .map(|&row| {
            let x = ds.x.gather_rows(&[row]);
            let (outputs, trace) = model.net.forward_parts(&x)?;
            let scale = 1.0 / k as f64;
            let mut up_clean = Matrix::zeros(k, 1);
            let mut up_noisy = Matrix::zeros(k, 1);
            let mut up_full = Matrix::zeros(k, 1);
            let noise = g_true[row].exp() * eps[row];
            for b in 0..k {
                let phi = outputs.get(b, 0);
                up_clean.set(b, 0, 2.0 * (phi - f_true[row]) * scale);
                up_noisy.set(b, 0, -2.0 * noise * scale);
                up_full.set(b, 0, 2.0 * (phi - ds.y[row]) * scale);
            }
            let clean = model.net.backward_parts(&trace, &up_clean)?;
            let noisy = model.net.backward_parts(&trace, &up_noisy)?;
            let full = model.net.backward_parts(&trace, &up_full)?;
            let mut defect = 0.0f64;
            for (id, g_full) in full.iter() {
                let gc = clean.get(id).unwrap();
                let gn = noisy.get(id).unwrap();
                for ((c, n), f) in gc.data().iter().zip(gn.data()).zip(g_full.data()) {
                    defect = defect.max((c + n - f).abs());
                }
            }
            Ok(GradDecompEntry {
                row,
                uncertainty: (2.0 * g_true[row]).exp(),
                clean_norm: clean.sq_norm().sqrt(),
                noisy_norm: noisy.sq_norm().sqrt(),
                identity_defect: defect,
            })
        })
        .collect()
}

/// One uncertainty bucket of the clean/noisy norm-ratio curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatioBucket {
    pub mean_uncertainty: f64,
    pub mean_clean_norm: f64,
    pub mean_noisy_norm: f64,
    /// mean ||clean|| / mean ||noisy||.
    pub ratio: f64,
}

/// Buckets samples by true-uncertainty quantile and reports the ratio of
/// mean clean to mean noisy gradient norms per bucket.
pub fn clean_noisy_ratio_curve(
    model: &TrainedModel,
    ds: &Dataset,
    rows: &[usize],
    buckets: usize,
) -> Result<Vec<RatioBucket>> {
    if buckets == 0 || rows.is_empty() || buckets > rows.len() {
        return Err(Error::Usage(format!(
            "need 1 <= buckets <= samples, got {buckets} buckets over {} samples",
            rows.len()
        )));
    }
    let mut entries = grad_decompose(model, ds, rows)?;
    entries.sort_by(|a, b| a.uncertainty.total_cmp(&b.uncertainty).then(a.row.cmp(&b.row)));
    Ok(bucketize(&entries, buckets)
        .into_iter()
        .map(|chunk| {
            let n = chunk.len() as f64;
            let mean_unc = chunk.iter().map(|e| e.uncertainty).sum::<f64>() / n;
            let mean_clean = chunk.iter().map(|e| e.clean_norm).sum::<f64>() / n;
            let mean_noisy = chunk.iter().map(|e| e.noisy_norm).sum::<f64>() / n;
            RatioBucket {
                mean_uncertainty: mean_unc,
                mean_clean_norm: mean_clean,
                mean_noisy_norm: mean_noisy,
                ratio: if mean_noisy == 0.0 {
                    0.0
                } else {
                    mean_clean / mean_noisy
                },
            }
        })
        .collect())
}

/// Splits sorted entries into `buckets` contiguous quantile chunks.
fn bucketize<T>(entries: &[T], buckets: usize) -> Vec<&[T]> {
    let n = entries.len();
    (0..buckets)
        .map(|b| {
            let lo = b * n / buckets;
            let hi = (b + 1) * n / buckets;
            &entries[lo..hi]
        })
        .collect()
}

/// One bucket of the branch-alignment curve: the norm of the branch-averaged
/// gradient relative to the average per-branch norm, for each component.
/// 1 means perfectly aligned branch gradients, 0 means cancellation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentBucket {
    pub mean_uncertainty: f64,
    pub clean_ratio: f64,
    pub noisy_ratio: f64,
    /// Raw numerator (norm of averaged gradient) and denominator (average
    /// per-branch norm), averaged over the bucket, for each component.
    pub clean_avg_grad_norm: f64,
    pub clean_per_branch_norm: f64,
    pub noisy_avg_grad_norm: f64,
    pub noisy_per_branch_norm: f64,
}

struct AlignmentEntry {
    uncertainty: f64,
    row: usize,
    clean_num: f64,
    clean_den: f64,
    noisy_num: f64,
    noisy_den: f64,
}

fn vec_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Norm of the element-wise mean of the vectors, and the mean of their
/// norms. The ratio of the two is 1 for identical vectors and 0 for
/// perfectly cancelling ones.
pub fn branch_mean_and_norms(grads: &[Vec<f64>]) -> (f64, f64) {
    let k = grads.len();
    let dim = grads[0].len();
    let mut mean = vec![0.0; dim];
    let mut norm_sum = 0.0;
    for g in grads {
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v / k as f64;
        }
        norm_sum += vec_norm(g);
    }
    (vec_norm(&mean), norm_sum / k as f64)
}

/// Per-branch shared-parameter gradients of the clean and noisy components,
/// compared between averaging-then-norm and norm-then-averaging.
pub fn branch_alignment_curve(
    model: &TrainedModel,
    ds: &Dataset,
    rows: &[usize],
    buckets: usize,
) -> Result<Vec<AlignmentBucket>> {
    let Net::Tabm(_) = &model.net else {
        return Err(Error::Usage("branch alignment requires a multi-branch model".into()));
    };
    let k = model.net.parts();
    if k < 2 {
        return Err(Error::Usage("need at least 2 branches".into()));
    }
    if buckets == 0 || rows.is_empty() || buckets > rows.len() {
        return Err(Error::Usage("need 1 <= buckets <= samples".into()));
    }
    let (f_true, g_true, eps) = match (&ds.f_true, &ds.g_true, &ds.eps) {
        (Some(f), Some(g), Some(e)) => (f, g, e),
        _ => return Err(Error::Usage("ground truth required".into())),
    };
    let shared: std::collections::BTreeSet<String> = {
        let mut net = model.net.clone();
        net.shared_param_ids().into_iter().collect()
    };
    let mut entries: Vec<AlignmentEntry> = rows
        .par_iter()
        .map(|&row| {
            let x = ds.x.gather_rows(&[row]);
            let (outputs, trace) = model.net.forward_parts(&x)?;
            let noise = g_true[row].exp() * eps[row];
            let mut clean_grads: Vec<Vec<f64>> = Vec::with_capacity(k);
            let mut noisy_grads: Vec<Vec<f64>> = Vec::with_capacity(k);
            for b in 0..k {
                let mut up = Matrix::zeros(k, 1);
                up.set(b, 0, 1.0);
                let base = model.net.backward_parts(&trace, &up)?;
                let flat = base.flatten_filtered(|id| shared.contains(id));
                let phi = outputs.get(b, 0);
                let c_scale = 2.0 * (phi - f_true[row]);
                let n_scale = -2.0 * noise;
                clean_grads.push(flat.iter().map(|v| v * c_scale).collect());
                noisy_grads.push(flat.iter().map(|v| v * n_scale).collect());
            }
            let (clean_num, clean_den) = branch_mean_and_norms(&clean_grads);
            let (noisy_num, noisy_den) = branch_mean_and_norms(&noisy_grads);
            Ok(AlignmentEntry {
                uncertainty: (2.0 * g_true[row]).exp(),
                row,
                clean_num,
                clean_den,
                noisy_num,
                noisy_den,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| a.uncertainty.total_cmp(&b.uncertainty).then(a.row.cmp(&b.row)));
    let ratio = |num: f64, den: f64| if den == 0.0 { 1.0 } else { num / den };
    Ok(bucketize(&entries, buckets)
        .into_iter()
        .map(|chunk| {
            let n = chunk.len() as f64;
            let mean = |f: &dyn Fn(&AlignmentEntry) -> f64| chunk.iter().map(f).sum::<f64>() / n;
            AlignmentBucket {
                mean_uncertainty: mean(&|e| e.uncertainty),
                clean_ratio: mean(&|e| ratio(e.clean_num, e.clean_den)),
                noisy_ratio: mean(&|e| ratio(e.noisy_num, e.noisy_den)),
                clean_avg_grad_norm: mean(&|e| e.clean_num),
                clean_per_branch_norm: mean(&|e| e.clean_den),
                noisy_avg_grad_norm: mean(&|e| e.noisy_num),
                noisy_per_branch_norm: mean(&|e| e.noisy_den),
            }
        })
        .collect())
}

/// Writes an uncertainty plot as CSV.
pub fn write_plot_csv(
    plot: &UncertaintyPlot,
    path: &std::path::Path,
    comments: &[String],
) -> Result<()> {
    let rows = (0..plot.sample_ids.len()).map(|i| {
        format!(
            "{},{},{},{},{},{}",
            plot.sample_ids[i],
            plot.uncertainty[i],
            plot.delta_raw[i],
            plot.delta_smooth[i],
            plot.base_raw[i],
            plot.base_smooth[i]
        )
    });
    crate::artifact::write_csv(
        path,
        comments,
        "sample_id,uncertainty,delta_mse,delta_mse_smooth,baseline_mse,baseline_mse_smooth",
        rows,
    )
}
