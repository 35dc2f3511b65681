//! MLP backbone with optional numerical feature embedders.
//!
//! The backbone is `depth` blocks of affine -> ReLU -> dropout followed by an
//! affine head to 1 output (2 in heteroscedastic mode). An embedder, when
//! present, replaces the raw d-wide input by a d*m-wide one with no other
//! architectural change.

use super::{ModelKind, ModelSpec};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::layers::{Affine, BlockAffine, Gradients, Layer, Mode, Periodic, SeqTrace, Sequential};
use crate::loss::{gaussian_nll, mse, LossKind};
use crate::matrix::Matrix;
use crate::optim::HasParams;
use crate::rng::StreamRng;

/// Per-feature periodic encoding -> affine -> ReLU, concatenated to d*m.
pub fn build_plr_embedder(
    d: usize,
    n_coeffs: usize,
    dim: usize,
    sigma: f64,
    rng: &mut StreamRng,
) -> Sequential {
    Sequential::new(vec![
        Layer::Periodic(Periodic::init(d, n_coeffs, sigma, rng)),
        Layer::BlockAffine(BlockAffine::init(d, 2 * n_coeffs, dim, rng)),
        Layer::Relu,
    ])
}

/// Per-feature affine -> ReLU -> affine -> ReLU, concatenated to d*m.
/// Parameters are not shared across features.
pub fn build_lrlr_embedder(d: usize, dim: usize, rng: &mut StreamRng) -> Sequential {
    Sequential::new(vec![
        Layer::BlockAffine(BlockAffine::init(d, 1, dim, rng)),
        Layer::Relu,
        Layer::BlockAffine(BlockAffine::init(d, dim, dim, rng)),
        Layer::Relu,
    ])
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: ModelSpec,
    pub seq: Sequential,
    /// Index one past the last embedder layer (0 for plain MLPs).
    pub embed_len: usize,
    /// Index one past the ReLU of the first backbone block.
    pub first_block_end: usize,
}

impl Mlp {
    /// Builds the network. `pretrained_embedder` (when given) must match the
    /// embedder architecture the spec describes and is spliced in verbatim.
    pub fn build(
        spec: &ModelSpec,
        n_features: usize,
        rng: &mut StreamRng,
        pretrained_embedder: Option<Sequential>,
    ) -> Result<Mlp> {
        spec.validate()?;
        let mut layers: Vec<Layer> = Vec::new();
        let backbone_in = match spec.kind {
            ModelKind::Mlp => n_features,
            ModelKind::MlpPlr => {
                let emb = spec.embedding.as_ref().unwrap();
                let built = match pretrained_embedder {
                    Some(e) => e,
                    None => build_plr_embedder(n_features, emb.n_coeffs, emb.dim, emb.sigma, rng),
                };
                layers.extend(built.layers);
                n_features * emb.dim
            }
            ModelKind::MlpLrlr => {
                let emb = spec.embedding.as_ref().unwrap();
                let built = match pretrained_embedder {
                    Some(e) => e,
                    None => build_lrlr_embedder(n_features, emb.dim, rng),
                };
                layers.extend(built.layers);
                n_features * emb.dim
            }
            _ => {
                return Err(Error::Usage(format!(
                    "Mlp::build cannot build a {} model",
                    spec.kind.name()
                )))
            }
        };
        let embed_len = layers.len();
        let mut in_dim = backbone_in;
        let mut first_block_end = 0;
        for b in 0..spec.depth {
            layers.push(Layer::Affine(Affine::init(in_dim, spec.width, rng)));
            layers.push(Layer::Relu);
            if b == 0 {
                first_block_end = layers.len();
            }
            layers.push(Layer::Dropout(spec.dropout));
            in_dim = spec.width;
        }
        layers.push(Layer::Affine(Affine::init(in_dim, spec.out_dim(), rng)));
        Ok(Mlp {
            spec: spec.clone(),
            seq: Sequential::new(layers),
            embed_len,
            first_block_end,
        })
    }

    /// The embedder sub-chain (empty for plain MLPs).
    pub fn embedder(&self) -> Sequential {
        Sequential::new(self.seq.layers[..self.embed_len].to_vec())
    }

    pub fn forward_trace_eval(&self, x: &Matrix) -> Result<SeqTrace> {
        self.seq.forward(x, Mode::Eval, None)
    }

    pub fn backward_from(&self, trace: &SeqTrace, upstream: &Matrix) -> Result<Gradients> {
        let mut grads = Gradients::new();
        self.seq.backward(trace, upstream, "seq.", &mut grads)?;
        Ok(grads)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        let out = self.forward_trace_eval(x)?.output;
        Ok((0..out.rows()).map(|i| out.get(i, 0)).collect())
    }

    pub fn predict_het(&self, x: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.forward_trace_eval(x)?.output;
        if out.cols() != 2 {
            return Err(Error::Usage("model head is not heteroscedastic".into()));
        }
        let mu = (0..out.rows()).map(|i| out.get(i, 0)).collect();
        let g = (0..out.rows()).map(|i| out.get(i, 1)).collect();
        Ok((mu, g))
    }

    /// Latent after the first block: embedding (if any) plus the first
    /// backbone affine and its activation, eval mode.
    pub fn latent_after_first_block(&self, x: &Matrix) -> Result<Matrix> {
        let sub = Sequential::new(self.seq.layers[..self.first_block_end].to_vec());
        Ok(sub.forward(x, Mode::Eval, None)?.output)
    }

    pub fn train_batch(
        &self,
        ds: &Dataset,
        batch_idx: &[usize],
        loss_kind: LossKind,
        rng: &mut StreamRng,
    ) -> Result<(f64, Gradients)> {
        let (x, y) = ds.gather(batch_idx);
        let trace = self.seq.forward(&x, Mode::Train, Some(rng))?;
        let (loss, dout) = match loss_kind {
            LossKind::Mse => mse(&trace.output, &y)?,
            LossKind::GaussianNll => gaussian_nll(&trace.output, &y)?,
        };
        let mut grads = Gradients::new();
        self.seq.backward(&trace, &dout, "seq.", &mut grads)?;
        Ok((loss, grads))
    }
}

impl HasParams for Mlp {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.seq.visit_params("seq.", f);
    }
}

/// An embedder plus a linear head, the module trained by triplet
/// pretraining. After pretraining the head is discarded and the embedder
/// initializes the embedding part of an MLP-LRLR (or MLP-PLR) model.
#[derive(Debug, Clone)]
pub struct EmbedderModule {
    pub embedder: Sequential,
    pub head: Affine,
}

impl EmbedderModule {
    pub fn new(embedder: Sequential, in_width: usize, head_dim: usize, rng: &mut StreamRng) -> Self {
        let emb_out = embedder.out_width(in_width);
        EmbedderModule {
            embedder,
            head: Affine::init(emb_out, head_dim, rng),
        }
    }

    /// Embeddings through embedder + head, with the trace needed for backward.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, EmbedderTrace)> {
        let trace = self.embedder.forward(x, Mode::Eval, None)?;
        let out = self.head.forward(&trace.output)?;
        Ok((out, EmbedderTrace { trace }))
    }

    pub fn backward(&self, trace: &EmbedderTrace, upstream: &Matrix) -> Result<Gradients> {
        let mut grads = Gradients::new();
        let (dw, db, dx) = self.head.backward(&trace.trace.output, upstream)?;
        grads.accumulate("head.w", dw);
        grads.accumulate("head.b", db);
        self.embedder.backward(&trace.trace, &dx, "e.", &mut grads)?;
        Ok(grads)
    }

    /// Output dimensionality of the bare embedder (head excluded).
    pub fn embedding_dim(&self) -> usize {
        self.head.in_dim()
    }
}

#[derive(Debug, Clone)]
pub struct EmbedderTrace {
    trace: SeqTrace,
}

impl HasParams for EmbedderModule {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.embedder.visit_params("e.", f);
        f("head.w", &mut self.head.w);
        f("head.b", &mut self.head.b);
    }
}
