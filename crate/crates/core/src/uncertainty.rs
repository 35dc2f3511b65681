//! Per-sample data-uncertainty estimation.
//!
//! A two-output model (mean, log-scale) is trained with the heteroscedastic
//! Gaussian negative log-likelihood; the predicted data uncertainty of a
//! sample is `exp(2 g_hat)`, which is positive by construction. Predicted
//! log-scales are clamped to [-15, 15] before exponentiation.

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::models::{ModelKind, ModelSpec, TrainedModel};
use crate::stats::{pearson, spearman};
use crate::train::{build_and_train, TrainConfig};
use serde::{Deserialize, Serialize};

const G_CLAMP: f64 = 15.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorMeta {
    pub estimator: String,
    pub seed: u64,
    pub val_nll: f64,
    pub diverged: bool,
}

/// Per-sample predicted mean and log-scale on one split.
#[derive(Debug, Clone)]
pub struct UncertaintyEstimate {
    pub split: Split,
    /// Dataset row ids the estimate covers, in dataset order.
    pub sample_ids: Vec<usize>,
    pub f_hat: Vec<f64>,
    pub g_hat: Vec<f64>,
    pub meta: EstimatorMeta,
}

impl UncertaintyEstimate {
    /// Data-uncertainty values `exp(2 g_hat)`, strictly positive.
    pub fn uncertainty(&self) -> Vec<f64> {
        self.g_hat.iter().map(|g| (2.0 * g).exp()).collect()
    }

    /// Wraps the stored generative ground truth as an estimate, for analyses
    /// that sort by true uncertainty. Rows where the true noise scale is
    /// exactly zero keep their -inf log-scale (uncertainty 0).
    pub fn from_ground_truth(ds: &Dataset, split: Split) -> Result<UncertaintyEstimate> {
        let (f, g) = match (&ds.f_true, &ds.g_true) {
            (Some(f), Some(g)) => (f, g),
            _ => return Err(Error::Usage("ground truth required".into())),
        };
        let sample_ids = ds.rows_of(split);
        Ok(UncertaintyEstimate {
            split,
            f_hat: sample_ids.iter().map(|&i| f[i]).collect(),
            g_hat: sample_ids.iter().map(|&i| g[i]).collect(),
            sample_ids,
            meta: EstimatorMeta {
                estimator: "ground-truth".into(),
                seed: ds.meta.seed,
                val_nll: f64::NAN,
                diverged: false,
            },
        })
    }
}

/// Trains a heteroscedastic estimator of the given kind (MLP by default,
/// MLP-PLR as the alternate) and evaluates it on `split`.
pub fn estimate_uncertainty(
    ds: &Dataset,
    estimator_spec: &ModelSpec,
    cfg: &TrainConfig,
    split: Split,
) -> Result<(UncertaintyEstimate, TrainedModel)> {
    match estimator_spec.kind {
        ModelKind::Mlp | ModelKind::MlpPlr | ModelKind::MlpLrlr => {}
        other => {
            return Err(Error::Usage(format!(
                "uncertainty estimator must be an MLP-family model, got {}",
                other.name()
            )))
        }
    }
    let spec = estimator_spec.clone().with_heteroscedastic();
    let (model, _) = build_and_train(&spec, ds, cfg, LossKind::GaussianNll)?;
    let estimate = evaluate_estimator(&model, ds, split)?;
    Ok((estimate, model))
}

/// Runs a trained heteroscedastic model over a split.
pub fn evaluate_estimator(
    model: &TrainedModel,
    ds: &Dataset,
    split: Split,
) -> Result<UncertaintyEstimate> {
    let sample_ids = ds.rows_of(split);
    let (x, _) = ds.gather(&sample_ids);
    let (f_hat, g_raw) = model.net.predict_het(&x)?;
    let g_hat: Vec<f64> = g_raw.iter().map(|g| g.clamp(-G_CLAMP, G_CLAMP)).collect();
    for (i, g) in g_hat.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::NonFinite {
                what: format!("estimated log-scale at sample {}", sample_ids[i]),
            });
        }
    }
    Ok(UncertaintyEstimate {
        split,
        sample_ids,
        f_hat,
        g_hat,
        meta: EstimatorMeta {
            estimator: model.spec.kind.name().to_string(),
            seed: model.meta.seed,
            val_nll: model.meta.best_val,
            diverged: model.meta.diverged,
        },
    })
}

/// Correlations between two estimates of the same split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgreementReport {
    pub pearson: f64,
    pub spearman: f64,
    /// (log-uncertainty a, log-uncertainty b) scatter points.
    pub points: Vec<(f64, f64)>,
}

/// Pearson and Spearman correlation of log-uncertainties (2 g_hat).
pub fn cross_estimator_agreement(
    a: &UncertaintyEstimate,
    b: &UncertaintyEstimate,
) -> Result<AgreementReport> {
    if a.sample_ids.len() != b.sample_ids.len() {
        return Err(Error::Shape {
            op: "cross_estimator_agreement",
            left: (a.sample_ids.len(), 1),
            right: (b.sample_ids.len(), 1),
        });
    }
    if a.sample_ids != b.sample_ids {
        return Err(Error::Usage(
            "estimates cover different samples; evaluate both on the same split".into(),
        ));
    }
    let la: Vec<f64> = a.g_hat.iter().map(|g| 2.0 * g).collect();
    let lb: Vec<f64> = b.g_hat.iter().map(|g| 2.0 * g).collect();
    Ok(AgreementReport {
        pearson: pearson(&la, &lb),
        spearman: spearman(&la, &lb),
        points: la.into_iter().zip(lb).collect(),
    })
}

/// Writes an estimate as CSV with columns sample_id, f_hat, g_hat, uncertainty.
pub fn write_estimate_csv(
    est: &UncertaintyEstimate,
    path: &std::path::Path,
    comments: &[String],
) -> Result<()> {
    let unc = est.uncertainty();
    let rows = (0..est.sample_ids.len()).map(|i| {
        format!(
            "{},{},{},{}",
            est.sample_ids[i], est.f_hat[i], est.g_hat[i], unc[i]
        )
    });
    crate::artifact::write_csv(path, comments, "sample_id,f_hat,g_hat,uncertainty", rows)
}
