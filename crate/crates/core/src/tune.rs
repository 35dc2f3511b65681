//! Random-search hyperparameter tuning.
//!
//! Each trial samples every hyperparameter independently from its
//! distribution, trains, and records the best validation metric. The search
//! never touches the test split.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::models::{EmbeddingConfig, ModelKind, ModelSpec, TrainedModel};
use crate::rng::StreamRng;
use crate::train::{build_and_train, TrainConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// The search space: layers UniformInt[1,4], width PowersOfTwo[2^7, 2^11],
/// dropout {0, Uniform[0, 0.75]}, weight decay {0, LogUniform[1e-6, 1e-3]},
/// learning rate LogUniform[3e-5, 1e-3], embedding dim {64, 128}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneSpace {
    pub iterations: usize,
    pub layers: (usize, usize),
    /// Width exponents: widths are 2^lo ..= 2^hi.
    pub width_log2: (u32, u32),
    pub dropout_max: f64,
    pub weight_decay_range: (f64, f64),
    pub lr_range: (f64, f64),
    pub embedding_dims: Vec<usize>,
    /// When set, only the optimizer parameters (lr, weight decay) are
    /// sampled and the architecture is taken from this spec verbatim.
    #[serde(default)]
    pub fixed_spec: Option<ModelSpec>,
}

impl Default for TuneSpace {
    fn default() -> Self {
        TuneSpace {
            // Desk-scale default; the full protocol uses 100.
            iterations: 30,
            layers: (1, 4),
            width_log2: (7, 11),
            dropout_max: 0.75,
            weight_decay_range: (1e-6, 1e-3),
            lr_range: (3e-5, 1e-3),
            embedding_dims: vec![64, 128],
            fixed_spec: None,
        }
    }
}

impl TuneSpace {
    /// Learning-rate-only search around a fixed architecture.
    pub fn lr_only(spec: ModelSpec, iterations: usize) -> Self {
        TuneSpace {
            iterations,
            fixed_spec: Some(spec),
            ..Default::default()
        }
    }

    fn sample_spec(&self, kind: ModelKind, rng: &mut StreamRng) -> ModelSpec {
        if let Some(fixed) = &self.fixed_spec {
            return fixed.clone();
        }
        let depth = rng.uniform_int(self.layers.0, self.layers.1);
        let exp = rng.uniform_int(self.width_log2.0 as usize, self.width_log2.1 as usize);
        let width = 1usize << exp;
        let dropout = if rng.bernoulli(0.5) {
            0.0
        } else {
            rng.uniform(0.0, self.dropout_max)
        };
        let mut spec = match kind {
            ModelKind::Mlp => ModelSpec::mlp(depth, width, dropout),
            ModelKind::MlpPlr => ModelSpec::mlp_plr(depth, width, dropout, EmbeddingConfig::default()),
            ModelKind::MlpLrlr => {
                ModelSpec::mlp_lrlr(depth, width, dropout, EmbeddingConfig::default())
            }
            ModelKind::Nca => ModelSpec::nca(depth, width, dropout, Default::default()),
            ModelKind::Tabm => ModelSpec::tabm(depth, width, dropout, 16),
            ModelKind::DeepEnsemble => ModelSpec::deep_ensemble(depth, width, dropout, 5),
        };
        match kind {
            ModelKind::MlpPlr => {
                let emb = spec.embedding.as_mut().unwrap();
                emb.dim = self.embedding_dims[rng.uniform_int(0, self.embedding_dims.len() - 1)];
                emb.sigma = rng.log_uniform(0.01, 10.0);
            }
            ModelKind::MlpLrlr => {
                let emb = spec.embedding.as_mut().unwrap();
                emb.dim = self.embedding_dims[rng.uniform_int(0, self.embedding_dims.len() - 1)];
            }
            _ => {}
        }
        spec
    }

    fn sample_optimizer(&self, base: &TrainConfig, rng: &mut StreamRng) -> TrainConfig {
        let lr = rng.log_uniform(self.lr_range.0, self.lr_range.1);
        let weight_decay = if rng.bernoulli(0.5) {
            0.0
        } else {
            rng.log_uniform(self.weight_decay_range.0, self.weight_decay_range.1)
        };
        TrainConfig {
            lr,
            weight_decay,
            ..base.clone()
        }
    }
}

/// One completed trial, as persisted in the trial log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub spec: ModelSpec,
    pub config: TrainConfig,
    pub val_metric: f64,
    pub epochs_run: usize,
    pub diverged: bool,
}

#[derive(Debug)]
pub struct TuneOutcome {
    /// Index of the winning trial in `trials`.
    pub best: usize,
    pub trials: Vec<Trial>,
    pub best_model: TrainedModel,
}

/// Random search over `space` for a model kind. Trials run in parallel;
/// the trial sequence is a pure function of `seed`.
pub fn tune(
    space: &TuneSpace,
    kind: ModelKind,
    ds: &Dataset,
    seed: u64,
    loss_kind: LossKind,
    base: &TrainConfig,
) -> Result<TuneOutcome> {
    if space.iterations == 0 {
        return Err(Error::Config("tuner needs at least one iteration".into()));
    }
    let root = StreamRng::from_seed(seed).child("tune");
    let results: Vec<(Trial, Option<TrainedModel>)> = (0..space.iterations)
        .into_par_iter()
        .map(|i| {
            let mut trial_rng = root.child_idx(i as u64);
            let config = space.sample_optimizer(base, &mut trial_rng);
            let spec = space.sample_spec(kind, &mut trial_rng);
            let config = TrainConfig {
                seed: trial_rng.child("train-seed").key(),
                ..config
            };
            match build_and_train(&spec, ds, &config, loss_kind) {
                Ok((model, history)) => {
                    let trial = Trial {
                        index: i,
                        spec,
                        config,
                        val_metric: model.meta.best_val,
                        epochs_run: history.len(),
                        diverged: model.meta.diverged,
                    };
                    (trial, Some(model))
                }
                Err(_) => (
                    Trial {
                        index: i,
                        spec,
                        config,
                        val_metric: f64::INFINITY,
                        epochs_run: 0,
                        diverged: true,
                    },
                    None,
                ),
            }
        })
        .collect();

    let mut best: Option<usize> = None;
    for (trial, model) in &results {
        if model.is_none() || trial.diverged || !trial.val_metric.is_finite() {
            continue;
        }
        if best.is_none_or(|b| trial.val_metric < results[b].0.val_metric) {
            best = Some(trial.index);
        }
    }
    let Some(best) = best else {
        let seeds: Vec<String> = results
            .iter()
            .map(|(t, _)| t.config.seed.to_string())
            .collect();
        return Err(Error::NonFinite {
            what: format!("all tuner trials diverged (trial seeds: {})", seeds.join(", ")),
        });
    };
    let mut trials = Vec::with_capacity(results.len());
    let mut best_model = None;
    for (trial, model) in results {
        if trial.index == best {
            best_model = model;
        }
        trials.push(trial);
    }
    Ok(TuneOutcome {
        best,
        trials,
        best_model: best_model.expect("winning trial retains its model"),
    })
}
