//! The tabular architectures under study: plain MLP, MLPs with periodic
//! (PLR) and learned (LRLR) numerical embeddings, a retrieval-head model,
//! a multi-branch shared-weight model, and a deep-ensemble wrapper.

pub mod mlp;
pub mod nca;
pub mod tabm;

pub use mlp::{build_lrlr_embedder, build_plr_embedder, EmbedderModule, Mlp};
pub use nca::{Nca, NcaBank};
pub use tabm::TabM;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::layers::Gradients;
use crate::loss::LossKind;
use crate::matrix::Matrix;
use crate::optim::HasParams;
use crate::rng::StreamRng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Mlp,
    MlpPlr,
    MlpLrlr,
    Nca,
    Tabm,
    DeepEnsemble,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mlp => "mlp",
            ModelKind::MlpPlr => "mlp-plr",
            ModelKind::MlpLrlr => "mlp-lrlr",
            ModelKind::Nca => "nca",
            ModelKind::Tabm => "tabm",
            ModelKind::DeepEnsemble => "deep-ensemble",
        }
    }
}

/// Numerical embedding configuration (PLR and LRLR kinds).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmbeddingConfig {
    /// Periodic coefficient count per feature (PLR only).
    pub n_coeffs: usize,
    /// Embedding dimension per feature.
    pub dim: usize,
    /// Init scale of the periodic coefficients (PLR only).
    pub sigma: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            n_coeffs: 16,
            dim: 64,
            sigma: 1.0,
        }
    }
}

/// Retrieval-head configuration (NCA kind).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RetrievalConfig {
    pub latent_dim: usize,
    /// Fraction of train rows sampled as candidates per training batch.
    pub candidate_fraction: f64,
    pub temperature_init: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            latent_dim: 128,
            candidate_fraction: 0.3,
            temperature_init: 1.0,
        }
    }
}

/// Architecture description for any zoo member.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub depth: usize,
    pub width: usize,
    pub dropout: f64,
    #[serde(default)]
    pub embedding: Option<EmbeddingConfig>,
    /// Branch count (TabM only).
    #[serde(default = "default_branches")]
    pub branches: usize,
    /// Member count (deep ensemble only).
    #[serde(default = "default_ensemble_size")]
    pub ensemble_size: usize,
    #[serde(default)]
    pub retrieval: Option<RetrievalConfig>,
    /// Two-output (mean, log-scale) head instead of a single mean output.
    #[serde(default)]
    pub heteroscedastic: bool,
}

fn default_branches() -> usize {
    16
}

fn default_ensemble_size() -> usize {
    5
}

impl ModelSpec {
    pub fn mlp(depth: usize, width: usize, dropout: f64) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            depth,
            width,
            dropout,
            embedding: None,
            branches: 16,
            ensemble_size: 5,
            retrieval: None,
            heteroscedastic: false,
        }
    }

    pub fn mlp_plr(depth: usize, width: usize, dropout: f64, emb: EmbeddingConfig) -> Self {
        ModelSpec {
            kind: ModelKind::MlpPlr,
            embedding: Some(emb),
            ..ModelSpec::mlp(depth, width, dropout)
        }
    }

    pub fn mlp_lrlr(depth: usize, width: usize, dropout: f64, emb: EmbeddingConfig) -> Self {
        ModelSpec {
            kind: ModelKind::MlpLrlr,
            embedding: Some(emb),
            ..ModelSpec::mlp(depth, width, dropout)
        }
    }

    pub fn nca(depth: usize, width: usize, dropout: f64, retrieval: RetrievalConfig) -> Self {
        ModelSpec {
            kind: ModelKind::Nca,
            retrieval: Some(retrieval),
            ..ModelSpec::mlp(depth, width, dropout)
        }
    }

    pub fn tabm(depth: usize, width: usize, dropout: f64, branches: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Tabm,
            branches,
            ..ModelSpec::mlp(depth, width, dropout)
        }
    }

    pub fn deep_ensemble(depth: usize, width: usize, dropout: f64, members: usize) -> Self {
        ModelSpec {
            kind: ModelKind::DeepEnsemble,
            ensemble_size: members,
            ..ModelSpec::mlp(depth, width, dropout)
        }
    }

    pub fn with_heteroscedastic(mut self) -> Self {
        self.heteroscedastic = true;
        self
    }

    pub fn out_dim(&self) -> usize {
        if self.heteroscedastic {
            2
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.depth > 4 {
            return Err(Error::Config(format!("depth {} outside [1, 4]", self.depth)));
        }
        if self.width == 0 {
            return Err(Error::Config("width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        match self.kind {
            ModelKind::MlpPlr | ModelKind::MlpLrlr => {
                let emb = self
                    .embedding
                    .as_ref()
                    .ok_or_else(|| Error::Config("embedded MLP needs an embedding config".into()))?;
                if emb.dim == 0 || (self.kind == ModelKind::MlpPlr && emb.n_coeffs == 0) {
                    return Err(Error::Config("embedding dims must be positive".into()));
                }
            }
            ModelKind::Nca => {
                let r = self
                    .retrieval
                    .as_ref()
                    .ok_or_else(|| Error::Config("nca needs a retrieval config".into()))?;
                if !(0.0..=1.0).contains(&r.candidate_fraction) || r.candidate_fraction == 0.0 {
                    return Err(Error::Config("candidate fraction must be in (0, 1]".into()));
                }
            }
            ModelKind::Tabm => {
                if self.branches < 2 {
                    return Err(Error::Config("tabm needs at least 2 branches".into()));
                }
            }
            ModelKind::DeepEnsemble => {
                if self.ensemble_size < 2 {
                    return Err(Error::Config("ensemble needs at least 2 members".into()));
                }
            }
            ModelKind::Mlp => {}
        }
        Ok(())
    }
}

/// A constructed network of any single-model kind.
#[derive(Debug, Clone)]
pub enum Net {
    Mlp(Mlp),
    Nca(Nca),
    Tabm(TabM),
}

impl Net {
    pub fn spec(&self) -> &ModelSpec {
        match self {
            Net::Mlp(m) => &m.spec,
            Net::Nca(m) => &m.spec,
            Net::Tabm(m) => &m.spec,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.spec().out_dim()
    }

    /// Eval-mode predictions (mean head) for a feature matrix.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        match self {
            Net::Mlp(m) => m.predict(x),
            Net::Nca(m) => m.predict(x, None),
            Net::Tabm(m) => m.predict(x),
        }
    }

    /// Eval-mode (mean, log-scale) predictions; requires a heteroscedastic head.
    pub fn predict_het(&self, x: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
        if !self.spec().heteroscedastic {
            return Err(Error::Usage(
                "model has no heteroscedastic head; build the spec with with_heteroscedastic()".into(),
            ));
        }
        match self {
            Net::Mlp(m) => m.predict_het(x),
            Net::Nca(m) => m.predict_het(x, None),
            Net::Tabm(m) => m.predict_het(x),
        }
    }

    /// Loss and parameter gradients for one training batch.
    pub fn train_batch(
        &self,
        ds: &Dataset,
        batch_idx: &[usize],
        train_rows: &[usize],
        loss_kind: LossKind,
        rng: &mut StreamRng,
    ) -> Result<(f64, Gradients)> {
        match self {
            Net::Mlp(m) => m.train_batch(ds, batch_idx, loss_kind, rng),
            Net::Nca(m) => m.train_batch(ds, batch_idx, train_rows, loss_kind, rng),
            Net::Tabm(m) => m.train_batch(ds, batch_idx, loss_kind, rng),
        }
    }

    /// Loss of the given loss kind on arbitrary rows, eval mode.
    pub fn eval_loss(&self, ds: &Dataset, idx: &[usize], loss_kind: LossKind) -> Result<f64> {
        let (x, y) = ds.gather(idx);
        match loss_kind {
            LossKind::Mse => {
                let pred = self.predict(&x)?;
                let (l, _) = crate::loss::mse(&Matrix::column(&pred), &y)?;
                Ok(l)
            }
            LossKind::GaussianNll => {
                let (mu, g) = self.predict_het(&x)?;
                let mut out = Matrix::zeros(y.len(), 2);
                for i in 0..y.len() {
                    out.set(i, 0, mu[i]);
                    out.set(i, 1, g[i]);
                }
                let (l, _) = crate::loss::gaussian_nll(&out, &y)?;
                Ok(l)
            }
        }
    }

    /// Number of additive prediction parts: TabM branch count, otherwise 1.
    pub fn parts(&self) -> usize {
        match self {
            Net::Tabm(m) => m.spec.branches,
            _ => 1,
        }
    }

    /// Eval-mode per-part outputs for one batch plus a reusable trace:
    /// (parts*n) x out for TabM, n x out otherwise. Retrieval models are not
    /// supported here (their prediction is not a pure function of x).
    pub fn forward_parts(&self, x: &Matrix) -> Result<(Matrix, PartsTrace)> {
        match self {
            Net::Mlp(m) => {
                let trace = m.forward_trace_eval(x)?;
                Ok((trace.output.clone(), PartsTrace::Mlp(trace)))
            }
            Net::Tabm(m) => {
                let trace = m.forward_branches_eval(x)?;
                Ok((trace.branch_outputs.clone(), PartsTrace::Tabm(trace)))
            }
            Net::Nca(_) => Err(Error::Usage(
                "gradient decomposition is not defined for retrieval models".into(),
            )),
        }
    }

    /// Parameter gradients for a custom upstream over the per-part outputs.
    pub fn backward_parts(&self, trace: &PartsTrace, upstream: &Matrix) -> Result<Gradients> {
        match (self, trace) {
            (Net::Mlp(m), PartsTrace::Mlp(t)) => m.backward_from(t, upstream),
            (Net::Tabm(m), PartsTrace::Tabm(t)) => m.backward_from(t, upstream),
            _ => Err(Error::Usage("trace does not match model kind".into())),
        }
    }

    /// Parameter ids of tensors shared across parts (all, for single-part models).
    pub fn shared_param_ids(&mut self) -> Vec<String> {
        match self {
            Net::Tabm(m) => m.shared_param_ids(),
            _ => self.param_ids(),
        }
    }
}

/// Saved forward state for `backward_parts`.
#[derive(Debug, Clone)]
pub enum PartsTrace {
    Mlp(crate::layers::SeqTrace),
    Tabm(tabm::TabmTrace),
}

impl HasParams for Net {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        match self {
            Net::Mlp(m) => m.visit_params(f),
            Net::Nca(m) => m.visit_params(f),
            Net::Tabm(m) => m.visit_params(f),
        }
    }
}

/// Builds a freshly initialized network for `spec` over `n_features` inputs.
pub fn build_net(spec: &ModelSpec, n_features: usize, rng: &mut StreamRng) -> Result<Net> {
    spec.validate()?;
    match spec.kind {
        ModelKind::Mlp | ModelKind::MlpPlr | ModelKind::MlpLrlr => {
            Ok(Net::Mlp(Mlp::build(spec, n_features, rng, None)?))
        }
        ModelKind::Nca => Ok(Net::Nca(Nca::build(spec, n_features, rng)?)),
        ModelKind::Tabm => Ok(Net::Tabm(TabM::build(spec, n_features, rng)?)),
        ModelKind::DeepEnsemble => Err(Error::Usage(
            "deep ensembles are trained member-wise; use train::train_deep_ensemble".into(),
        )),
    }
}

/// Training metadata carried by a trained model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val: f64,
    pub diverged: bool,
}

/// A trained network plus its spec and training metadata.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub n_features: usize,
    pub net: Net,
    pub meta: TrainMeta,
}

/// Anything that yields eval-mode mean predictions for a feature matrix.
pub trait Predictor {
    fn predict(&self, x: &Matrix) -> Result<Vec<f64>>;
    fn label(&self) -> String;

    /// Predictions for specific dataset rows. Retrieval models use the row
    /// ids for self-exclusion, so train-split predictions are leave-one-out.
    fn predict_rows(&self, ds: &Dataset, rows: &[usize]) -> Result<Vec<f64>> {
        let (x, _) = ds.gather(rows);
        self.predict(&x)
    }
}

impl Predictor for TrainedModel {
    fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        self.net.predict(x)
    }

    fn predict_rows(&self, ds: &Dataset, rows: &[usize]) -> Result<Vec<f64>> {
        let (x, _) = ds.gather(rows);
        match &self.net {
            Net::Nca(nca) => nca.predict(&x, Some(rows)),
            other => other.predict(&x),
        }
    }

    fn label(&self) -> String {
        self.spec.kind.name().to_string()
    }
}

/// Average of independently trained member networks.
#[derive(Debug)]
pub struct DeepEnsemble {
    pub spec: ModelSpec,
    pub members: Vec<TrainedModel>,
}

impl Predictor for DeepEnsemble {
    fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        if self.members.is_empty() {
            return Err(Error::Usage("empty ensemble".into()));
        }
        let mut acc = vec![0.0; x.rows()];
        for member in &self.members {
            let p = member.predict(x)?;
            for (a, v) in acc.iter_mut().zip(&p) {
                *a += v;
            }
        }
        let k = self.members.len() as f64;
        for a in &mut acc {
            *a /= k;
        }
        Ok(acc)
    }

    fn label(&self) -> String {
        format!("deep-ensemble({})", self.members.len())
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: ModelSpec,
    n_features: usize,
    meta: TrainMeta,
    param_shapes: Vec<(String, usize, usize)>,
}

/// Writes a checkpoint directory: a `spec` JSON file plus one little-endian
/// f64 blob per parameter tensor under `params/`, keyed by parameter id.
pub fn save_model(model: &TrainedModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("params"))?;
    let mut net = model.net.clone();
    let mut shapes = Vec::new();
    let mut blobs: Vec<(String, Vec<u8>)> = Vec::new();
    net.visit_params(&mut |id, m| {
        shapes.push((id.to_string(), m.rows(), m.cols()));
        let mut bytes = Vec::with_capacity(m.len() * 8);
        for v in m.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        blobs.push((id.to_string(), bytes));
    });
    let header = CheckpointHeader {
        spec: model.spec.clone(),
        n_features: model.n_features,
        meta: model.meta.clone(),
        param_shapes: shapes,
    };
    let json = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::Config(format!("checkpoint serialization: {e}")))?;
    fs::write(dir.join("spec"), json)?;
    for (id, bytes) in blobs {
        fs::write(dir.join("params").join(&id), bytes)?;
    }
    Ok(())
}

/// Loads a checkpoint. Retrieval models come back without a candidate bank;
/// call [`Nca::rebuild_bank`] with the training data before predicting.
pub fn load_model(dir: &Path) -> Result<TrainedModel> {
    let json = fs::read_to_string(dir.join("spec"))?;
    let header: CheckpointHeader =
        serde_json::from_str(&json).map_err(|e| Error::Config(format!("checkpoint parse: {e}")))?;
    let mut rng = StreamRng::from_seed(0).child("checkpoint-load");
    let mut net = build_net(&header.spec, header.n_features, &mut rng)?;
    let mut failure: Option<Error> = None;
    net.visit_params(&mut |id, m| {
        if failure.is_some() {
            return;
        }
        let expected: Option<&(String, usize, usize)> =
            header.param_shapes.iter().find(|(pid, _, _)| pid == id);
        let Some((_, rows, cols)) = expected else {
            failure = Some(Error::Config(format!("checkpoint missing parameter {id}")));
            return;
        };
        if (*rows, *cols) != m.shape() {
            failure = Some(Error::Config(format!(
                "checkpoint parameter {id} has shape {}x{}, expected {}x{}",
                rows,
                cols,
                m.rows(),
                m.cols()
            )));
            return;
        }
        match fs::read(dir.join("params").join(id)) {
            Ok(bytes) if bytes.len() == m.len() * 8 => {
                for (i, chunk) in bytes.chunks_exact(8).enumerate() {
                    m.data_mut()[i] = f64::from_le_bytes(chunk.try_into().unwrap());
                }
            }
            Ok(bytes) => {
                failure = Some(Error::Config(format!(
                    "parameter blob {id} has {} bytes, expected {}",
                    bytes.len(),
                    m.len() * 8
                )));
            }
            Err(e) => failure = Some(Error::Io(e)),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(TrainedModel {
        spec: header.spec,
        n_features: header.n_features,
        net,
        meta: header.meta,
    })
}
