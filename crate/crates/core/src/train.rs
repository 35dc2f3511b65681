//! Mini-batch training with early stopping, triplet pretraining of
//! embedders, and deep-ensemble training.

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::layers::Gradients;
use crate::loss::{triplet, LossKind};
use crate::matrix::Matrix;
use crate::models::{
    build_net, DeepEnsemble, EmbedderModule, ModelKind, ModelSpec, Net, TrainMeta, TrainedModel,
};
use crate::optim::{AdamW, HasParams};
use crate::rng::StreamRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 256,
            max_epochs: 1000,
            patience: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience >= self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} must be below max epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Trains `net` with shuffled mini-batches and early stopping on the val
/// split (the training loss kind evaluated on val). Returns the best-val
/// snapshot, never the final epoch's parameters. Divergence (a non-finite
/// val loss or gradient) stops training and flags the metadata.
pub fn train(
    mut net: Net,
    ds: &Dataset,
    cfg: &TrainConfig,
    loss_kind: LossKind,
) -> Result<(TrainedModel, Vec<EpochStat>)> {
    cfg.validate()?;
    let train_rows = ds.rows_of(Split::Train);
    let val_rows = ds.rows_of(Split::Val);
    if train_rows.is_empty() || val_rows.is_empty() {
        return Err(Error::Usage("training needs train and val splits".into()));
    }
    let root = StreamRng::from_seed(cfg.seed);
    let mut shuffle_rng = root.child("shuffle");
    let mut step_rng = root.child("steps");
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);

    if let Net::Nca(nca) = &mut net {
        nca.rebuild_bank(ds)?;
    }
    let mut best_val = net.eval_loss(ds, &val_rows, loss_kind)?;
    let mut best_snapshot = net.snapshot();
    let mut best_epoch = 0usize;
    let mut diverged = false;
    let mut history = Vec::new();
    let mut epochs_run = 0usize;

    let mut order = train_rows.clone();
    'epochs: for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let step = net.train_batch(ds, chunk, &train_rows, loss_kind, &mut step_rng);
            let (loss, grads): (f64, Gradients) = match step {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => {
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                diverged = true;
                break 'epochs;
            }
            if let Err(Error::NonFinite { .. }) = opt.step(&mut net, &grads) {
                diverged = true;
                break 'epochs;
            }
            loss_sum += loss * chunk.len() as f64;
            loss_n += chunk.len();
        }
        if let Net::Nca(nca) = &mut net {
            nca.rebuild_bank(ds)?;
        }
        let val_loss = match net.eval_loss(ds, &val_rows, loss_kind) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => f64::NAN,
            Err(e) => return Err(e),
        };
        history.push(EpochStat {
            epoch,
            train_loss: loss_sum / loss_n.max(1) as f64,
            val_loss,
        });
        if !val_loss.is_finite() {
            diverged = true;
            break;
        }
        if val_loss < best_val {
            best_val = val_loss;
            best_snapshot = net.snapshot();
            best_epoch = epoch;
        } else if epoch - best_epoch > cfg.patience {
            break;
        }
    }

    net.restore(&best_snapshot);
    if let Net::Nca(nca) = &mut net {
        nca.rebuild_bank(ds)?;
    }
    let spec = net.spec().clone();
    Ok((
        TrainedModel {
            spec,
            n_features: ds.n_features(),
            net,
            meta: TrainMeta {
                seed: cfg.seed,
                epochs_run,
                best_epoch,
                best_val,
                diverged,
            },
        },
        history,
    ))
}

/// Builds a fresh network for `spec` and trains it.
pub fn build_and_train(
    spec: &ModelSpec,
    ds: &Dataset,
    cfg: &TrainConfig,
    loss_kind: LossKind,
) -> Result<(TrainedModel, Vec<EpochStat>)> {
    let mut init_rng = StreamRng::from_seed(cfg.seed).child("init");
    let net = build_net(spec, ds.n_features(), &mut init_rng)?;
    train(net, ds, cfg, loss_kind)
}

/// Trains `spec.ensemble_size` members independently (different init and
/// data-order seeds) in parallel. Member predictions are averaged.
pub fn train_deep_ensemble(
    spec: &ModelSpec,
    ds: &Dataset,
    cfg: &TrainConfig,
    loss_kind: LossKind,
) -> Result<DeepEnsemble> {
    if spec.kind != ModelKind::DeepEnsemble {
        return Err(Error::Usage("spec kind must be deep-ensemble".into()));
    }
    spec.validate()?;
    let member_spec = ModelSpec {
        kind: ModelKind::Mlp,
        ..spec.clone()
    };
    let root = StreamRng::from_seed(cfg.seed).child("ensemble");
    let results: Vec<Result<TrainedModel>> = (0..spec.ensemble_size)
        .into_par_iter()
        .map(|m| {
            let member_cfg = TrainConfig {
                seed: root.child_idx(m as u64).key(),
                ..cfg.clone()
            };
            build_and_train(&member_spec, ds, &member_cfg, loss_kind)
                .map(|(model, _)| model)
                .map_err(|e| Error::Usage(format!("ensemble member {m} failed: {e}")))
        })
        .collect();
    let mut members = Vec::with_capacity(spec.ensemble_size);
    for r in results {
        members.push(r?);
    }
    Ok(DeepEnsemble {
        spec: spec.clone(),
        members,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TripletConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Output width of the linear head that is discarded after pretraining.
    pub head_dim: usize,
    pub seed: u64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 256,
            epochs: 30,
            head_dim: 128,
            seed: 0,
        }
    }
}

/// One sampled triplet: anchor, positive and negative train-row ids.
fn sample_triplet(
    anchor: usize,
    train_rows: &[usize],
    y: &[f64],
    rng: &mut StreamRng,
) -> (usize, usize) {
    let pick_other = |rng: &mut StreamRng, banned: &[usize]| loop {
        let r = train_rows[rng.uniform_int(0, train_rows.len() - 1)];
        if !banned.contains(&r) {
            return r;
        }
    };
    let first = pick_other(rng, &[anchor]);
    let second = pick_other(rng, &[anchor, first]);
    let d_first = (y[first] - y[anchor]).abs();
    let d_second = (y[second] - y[anchor]).abs();
    // Positive is the closer target; ties go to the first sampled.
    if d_first <= d_second {
        (first, second)
    } else {
        (second, first)
    }
}

/// Triplet pretraining of an embedder+head module on the train split.
///
/// Each anchor gets two other train rows; the one with the closer target is
/// the positive. Dot-product similarities of (anchor, pos) and (anchor, neg)
/// embeddings feed the two-logit cross-entropy. Returns the embedder with
/// the head discarded, ready to initialize an embedded MLP.
pub fn pretrain_triplet_embedder(
    ds: &Dataset,
    mut module: EmbedderModule,
    cfg: &TripletConfig,
) -> Result<(crate::layers::Sequential, Vec<f64>)> {
    let train_rows = ds.rows_of(Split::Train);
    if train_rows.len() < 3 {
        return Err(Error::Usage(format!(
            "triplet pretraining needs at least 3 train rows, found {}",
            train_rows.len()
        )));
    }
    let root = StreamRng::from_seed(cfg.seed).child("triplet");
    let mut shuffle_rng = root.child("shuffle");
    let mut sample_rng = root.child("sample");
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut order = train_rows.clone();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut pos_rows = Vec::with_capacity(b);
            let mut neg_rows = Vec::with_capacity(b);
            for &anchor in chunk {
                let (p, n) = sample_triplet(anchor, &train_rows, &ds.y, &mut sample_rng);
                debug_assert_eq!(ds.splits[p], Split::Train);
                debug_assert_eq!(ds.splits[n], Split::Train);
                pos_rows.push(p);
                neg_rows.push(n);
            }
            let mut stacked_rows = chunk.to_vec();
            stacked_rows.extend_from_slice(&pos_rows);
            stacked_rows.extend_from_slice(&neg_rows);
            let x = ds.x.gather_rows(&stacked_rows);
            let (emb, trace) = module.forward(&x)?;
            let p = emb.cols();
            let mut upstream = Matrix::zeros(3 * b, p);
            let mut batch_loss = 0.0;
            for i in 0..b {
                let ea = emb.row(i);
                let ep = emb.row(b + i);
                let en = emb.row(2 * b + i);
                let sim_pos: f64 = ea.iter().zip(ep).map(|(a, v)| a * v).sum();
                let sim_neg: f64 = ea.iter().zip(en).map(|(a, v)| a * v).sum();
                let (l, dp, dn) = triplet(sim_pos, sim_neg);
                batch_loss += l;
                let scale = 1.0 / b as f64;
                for k in 0..p {
                    upstream.set(i, k, scale * (dp * ep[k] + dn * en[k]));
                    upstream.set(b + i, k, scale * dp * ea[k]);
                    upstream.set(2 * b + i, k, scale * dn * ea[k]);
                }
            }
            let grads = module.backward(&trace, &upstream)?;
            opt.step(&mut module, &grads)?;
            loss_sum += batch_loss;
            loss_n += b;
        }
        epoch_losses.push(loss_sum / loss_n as f64);
    }
    Ok((module.embedder, epoch_losses))
}

/// Mean similarity of (anchor, pos) and (anchor, neg) pairs on fresh
/// triplets drawn from `split`; the pretraining quality oracle.
pub fn triplet_holdout_margin(
    module: &EmbedderModule,
    ds: &Dataset,
    split: Split,
    n_triplets: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let rows = ds.rows_of(split);
    if rows.len() < 3 {
        return Err(Error::Usage("not enough rows for holdout triplets".into()));
    }
    let mut rng = StreamRng::from_seed(seed).child("triplet-holdout");
    let mut sim_pos_sum = 0.0;
    let mut sim_neg_sum = 0.0;
    for _ in 0..n_triplets {
        let anchor = rows[rng.uniform_int(0, rows.len() - 1)];
        let (p, n) = sample_triplet(anchor, &rows, &ds.y, &mut rng);
        let x = ds.x.gather_rows(&[anchor, p, n]);
        let (emb, _) = module.forward(&x)?;
        let ea = emb.row(0);
        sim_pos_sum += ea.iter().zip(emb.row(1)).map(|(a, v)| a * v).sum::<f64>();
        sim_neg_sum += ea.iter().zip(emb.row(2)).map(|(a, v)| a * v).sum::<f64>();
    }
    Ok((sim_pos_sum / n_triplets as f64, sim_neg_sum / n_triplets as f64))
}

/// Builds an MLP-LRLR (or MLP-PLR) whose embedder is triplet-pretrained on
/// the train split, ready for ordinary training.
pub fn build_triplet_pretrained(
    spec: &ModelSpec,
    ds: &Dataset,
    pre_cfg: &TripletConfig,
) -> Result<Net> {
    let emb = spec
        .embedding
        .as_ref()
        .ok_or_else(|| Error::Usage("triplet pretraining needs an embedded model kind".into()))?;
    let d = ds.n_features();
    let mut rng = StreamRng::from_seed(pre_cfg.seed).child("triplet-init");
    let embedder = match spec.kind {
        ModelKind::MlpLrlr => crate::models::build_lrlr_embedder(d, emb.dim, &mut rng),
        ModelKind::MlpPlr => {
            crate::models::build_plr_embedder(d, emb.n_coeffs, emb.dim, emb.sigma, &mut rng)
        }
        _ => {
            return Err(Error::Usage(
                "triplet pretraining applies to embedded MLP kinds".into(),
            ))
        }
    };
    let module = EmbedderModule::new(embedder, d, pre_cfg.head_dim, &mut rng);
    let (pretrained, _) = pretrain_triplet_embedder(ds, module, pre_cfg)?;
    let mut build_rng = StreamRng::from_seed(pre_cfg.seed).child("backbone-init");
    Ok(Net::Mlp(crate::models::Mlp::build(
        spec,
        d,
        &mut build_rng,
        Some(pretrained),
    )?))
}

/// Mean squared error of a predictor on one split, plus the mean-predictor
/// baseline (target variance on that split).
pub fn test_mse(
    model: &dyn crate::models::Predictor,
    ds: &Dataset,
    split: Split,
) -> Result<(f64, f64)> {
    let rows = ds.rows_of(split);
    let (x, y) = ds.gather(&rows);
    let pred = model.predict(&x)?;
    let mse = crate::loss::squared_errors(&pred, &y).iter().sum::<f64>() / y.len() as f64;
    let (_, var) = ds.target_moments(split);
    Ok((mse, var))
}
