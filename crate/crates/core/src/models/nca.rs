//! Retrieval-head model: an MLP encoder followed by a soft kNN head that
//! predicts a similarity-weighted average of training targets.
//!
//! Weights are a row softmax over `-||h(x) - h(x_j)||^2 / tau` with a
//! trainable temperature (parameterized by its log, so it stays positive).
//! During training the candidate set is a fresh random subset of the train
//! split excluding the anchors themselves; at eval time the full encoded
//! train split serves as the candidate bank. A query row that is itself
//! present in the bank is excluded from its own candidates, so train-split
//! predictions are leave-one-out.

use super::ModelSpec;
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::layers::{Affine, Gradients, Layer, Mode, SeqTrace, Sequential};
use crate::loss::{gaussian_nll, mse, LossKind};
use crate::matrix::Matrix;
use crate::optim::HasParams;
use crate::rng::StreamRng;
use std::collections::HashSet;

/// Encoded train candidates retained for eval-time prediction.
#[derive(Debug, Clone)]
pub struct NcaBank {
    pub latents: Matrix,
    pub targets: Vec<f64>,
    pub row_ids: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Nca {
    pub spec: ModelSpec,
    pub encoder: Sequential,
    /// log of the softmax temperature (1 x 1).
    pub tau_log: Matrix,
    /// Log-scale head over the anchor latent, heteroscedastic mode only.
    pub g_head: Option<Affine>,
    pub bank: Option<NcaBank>,
}

/// Saved state of one retrieval forward pass.
#[derive(Debug, Clone)]
pub struct RetrievalTrace {
    anchor_trace: SeqTrace,
    cand_trace: SeqTrace,
    cand_targets: Vec<f64>,
    weights: Matrix,
    dist_sq: Matrix,
    yhat: Vec<f64>,
    tau: f64,
}

impl Nca {
    pub fn build(spec: &ModelSpec, n_features: usize, rng: &mut StreamRng) -> Result<Nca> {
        spec.validate()?;
        let retrieval = spec.retrieval.as_ref().unwrap();
        let mut layers = Vec::new();
        let mut in_dim = n_features;
        for _ in 0..spec.depth {
            layers.push(Layer::Affine(Affine::init(in_dim, spec.width, rng)));
            layers.push(Layer::Relu);
            layers.push(Layer::Dropout(spec.dropout));
            in_dim = spec.width;
        }
        layers.push(Layer::Affine(Affine::init(in_dim, retrieval.latent_dim, rng)));
        let g_head = if spec.heteroscedastic {
            Some(Affine::init(retrieval.latent_dim, 1, rng))
        } else {
            None
        };
        Ok(Nca {
            spec: spec.clone(),
            encoder: Sequential::new(layers),
            tau_log: Matrix::from_vec(1, 1, vec![retrieval.temperature_init.ln()]),
            g_head,
            bank: None,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau_log.get(0, 0).exp()
    }

    /// Encodes rows in eval mode.
    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.encoder.forward(x, Mode::Eval, None)?.output)
    }

    /// Encodes the full train split into the candidate bank.
    pub fn rebuild_bank(&mut self, ds: &Dataset) -> Result<()> {
        let train_rows = ds.rows_of(Split::Train);
        let (x, y) = ds.gather(&train_rows);
        let latents = self.encode(&x)?;
        self.bank = Some(NcaBank {
            latents,
            targets: y,
            row_ids: train_rows,
        });
        Ok(())
    }

    /// Soft-kNN forward over explicit candidates. `exclude` pairs anchor row
    /// ids with candidate row ids so an anchor never retrieves itself.
    pub fn forward_retrieval(
        &self,
        anchor_x: &Matrix,
        cand_x: &Matrix,
        cand_y: &[f64],
        exclude: Option<(&[usize], &[usize])>,
        mode: Mode,
        mut rng: Option<&mut StreamRng>,
    ) -> Result<RetrievalTrace> {
        if cand_y.is_empty() {
            return Err(Error::Usage("empty candidate set".into()));
        }
        let anchor_trace = self.encoder.forward(anchor_x, mode, rng.as_deref_mut())?;
        let cand_trace = self.encoder.forward(cand_x, mode, rng.as_deref_mut())?;
        let a = &anchor_trace.output;
        let c = &cand_trace.output;
        let n = a.rows();
        let m = c.rows();
        let tau = self.tau();
        // Squared distances via ||a||^2 + ||c||^2 - 2 a.c^T.
        let cross = a.matmul_nt(c)?;
        let a_sq: Vec<f64> = (0..n).map(|i| a.row(i).iter().map(|v| v * v).sum()).collect();
        let c_sq: Vec<f64> = (0..m).map(|j| c.row(j).iter().map(|v| v * v).sum()).collect();
        let mut dist_sq = Matrix::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                dist_sq.set(i, j, (a_sq[i] + c_sq[j] - 2.0 * cross.get(i, j)).max(0.0));
            }
        }
        let mut weights = Matrix::zeros(n, m);
        let mut yhat = vec![0.0; n];
        for i in 0..n {
            let excluded_j: Option<Vec<bool>> = exclude.map(|(anchor_ids, cand_ids)| {
                cand_ids.iter().map(|&cj| cj == anchor_ids[i]).collect()
            });
            let mut max_logit = f64::NEG_INFINITY;
            for j in 0..m {
                if excluded_j.as_ref().is_some_and(|e| e[j]) {
                    continue;
                }
                max_logit = max_logit.max(-dist_sq.get(i, j) / tau);
            }
            if max_logit == f64::NEG_INFINITY {
                return Err(Error::Usage(format!(
                    "empty candidate set for anchor {i} after self-exclusion"
                )));
            }
            let mut z = 0.0;
            for j in 0..m {
                if excluded_j.as_ref().is_some_and(|e| e[j]) {
                    continue;
                }
                let w = ((-dist_sq.get(i, j) / tau) - max_logit).exp();
                weights.set(i, j, w);
                z += w;
            }
            let mut acc = 0.0;
            for j in 0..m {
                let w = weights.get(i, j) / z;
                weights.set(i, j, w);
                acc += w * cand_y[j];
            }
            yhat[i] = acc;
        }
        Ok(RetrievalTrace {
            anchor_trace,
            cand_trace,
            cand_targets: cand_y.to_vec(),
            weights,
            dist_sq,
            yhat,
            tau,
        })
    }

    /// Model outputs for a trace: n x 1, or n x 2 with the log-scale head.
    pub fn outputs(&self, trace: &RetrievalTrace) -> Result<Matrix> {
        let n = trace.yhat.len();
        match &self.g_head {
            None => Ok(Matrix::column(&trace.yhat)),
            Some(head) => {
                let g = head.forward(&trace.anchor_trace.output)?;
                let mut out = Matrix::zeros(n, 2);
                for i in 0..n {
                    out.set(i, 0, trace.yhat[i]);
                    out.set(i, 1, g.get(i, 0));
                }
                Ok(out)
            }
        }
    }

    /// Backward through head, softmax and both encoder passes.
    pub fn backward_retrieval(&self, trace: &RetrievalTrace, dout: &Matrix) -> Result<Gradients> {
        let a = &trace.anchor_trace.output;
        let c = &trace.cand_trace.output;
        let n = a.rows();
        let m = c.rows();
        let tau = trace.tau;
        let mut grads = Gradients::new();

        let mut d_anchor_latent = Matrix::zeros(n, a.cols());
        if let Some(head) = &self.g_head {
            if dout.cols() != 2 {
                return Err(Error::Shape {
                    op: "nca backward",
                    left: dout.shape(),
                    right: (n, 2),
                });
            }
            let mut dg = Matrix::zeros(n, 1);
            for i in 0..n {
                dg.set(i, 0, dout.get(i, 1));
            }
            let (dw, db, dx) = head.backward(a, &dg)?;
            grads.accumulate("ghead.w", dw);
            grads.accumulate("ghead.b", db);
            d_anchor_latent.add_assign(&dx);
        }

        // dl_ij = dyhat_i * w_ij * (t_j - yhat_i)
        let mut dl = Matrix::zeros(n, m);
        let mut d_tau = 0.0;
        for i in 0..n {
            let dy = dout.get(i, 0);
            if dy == 0.0 {
                continue;
            }
            for j in 0..m {
                let w = trace.weights.get(i, j);
                if w == 0.0 {
                    continue;
                }
                let v = dy * w * (trace.cand_targets[j] - trace.yhat[i]);
                dl.set(i, j, v);
                d_tau += v * trace.dist_sq.get(i, j) / (tau * tau);
            }
        }
        // tau = exp(tau_log)
        grads.accumulate("tau_log", Matrix::from_vec(1, 1, vec![d_tau * tau]));

        // da_i = (-2/tau) (rowsum_i * a_i - (dl C)_i)
        let dl_c = dl.matmul(c)?;
        for i in 0..n {
            let rowsum: f64 = dl.row(i).iter().sum();
            let dst = d_anchor_latent.row_mut(i);
            for (k, d) in dst.iter_mut().enumerate() {
                *d += (-2.0 / tau) * (rowsum * a.get(i, k) - dl_c.get(i, k));
            }
        }
        // dc_j = (2/tau) ((dl^T A)_j - colsum_j * c_j)
        let dlt_a = dl.matmul_tn(a)?;
        let mut d_cand_latent = Matrix::zeros(m, c.cols());
        let colsums = dl.col_sums();
        for j in 0..m {
            let cs = colsums.get(0, j);
            let dst = d_cand_latent.row_mut(j);
            for (k, d) in dst.iter_mut().enumerate() {
                *d = (2.0 / tau) * (dlt_a.get(j, k) - cs * c.get(j, k));
            }
        }

        self.encoder
            .backward(&trace.anchor_trace, &d_anchor_latent, "enc.", &mut grads)?;
        self.encoder
            .backward(&trace.cand_trace, &d_cand_latent, "enc.", &mut grads)?;
        Ok(grads)
    }

    /// Candidate count for a train split of the given size.
    fn candidate_count(&self, train_size: usize) -> usize {
        let frac = self.spec.retrieval.as_ref().unwrap().candidate_fraction;
        ((train_size as f64 * frac).ceil() as usize).max(1)
    }

    pub fn train_batch(
        &self,
        ds: &Dataset,
        batch_idx: &[usize],
        train_rows: &[usize],
        loss_kind: LossKind,
        rng: &mut StreamRng,
    ) -> Result<(f64, Gradients)> {
        let in_batch: HashSet<usize> = batch_idx.iter().copied().collect();
        let pool: Vec<usize> = train_rows
            .iter()
            .copied()
            .filter(|r| !in_batch.contains(r))
            .collect();
        if pool.is_empty() {
            return Err(Error::Usage("empty candidate set".into()));
        }
        let want = self.candidate_count(train_rows.len()).min(pool.len());
        let picked = rng.subset(pool.len(), want);
        let cand_rows: Vec<usize> = picked.iter().map(|&p| pool[p]).collect();
        let (ax, ay) = ds.gather(batch_idx);
        let (cx, cy) = ds.gather(&cand_rows);
        let trace = self.forward_retrieval(&ax, &cx, &cy, None, Mode::Train, Some(rng))?;
        let out = self.outputs(&trace)?;
        let (loss, dout) = match loss_kind {
            LossKind::Mse => mse(&out, &ay)?,
            LossKind::GaussianNll => gaussian_nll(&out, &ay)?,
        };
        let grads = self.backward_retrieval(&trace, &dout)?;
        Ok((loss, grads))
    }

    /// Query-row chunk size bounding the transient n x bank weight matrix.
    const PREDICT_CHUNK: usize = 512;

    /// Eval-mode prediction against the full candidate bank. `row_ids`, when
    /// given, are the queried rows' dataset ids used for self-exclusion.
    /// Queries run in chunks so memory stays bounded for large banks.
    pub fn predict(&self, x: &Matrix, row_ids: Option<&[usize]>) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(x.rows());
        for start in (0..x.rows()).step_by(Self::PREDICT_CHUNK) {
            let end = (start + Self::PREDICT_CHUNK).min(x.rows());
            let rows: Vec<usize> = (start..end).collect();
            let xc = x.gather_rows(&rows);
            let ids = row_ids.map(|ids| &ids[start..end]);
            let trace = self.bank_trace(&xc, ids)?;
            out.extend_from_slice(&trace.yhat);
        }
        Ok(out)
    }

    pub fn predict_het(&self, x: &Matrix, row_ids: Option<&[usize]>) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut mu = Vec::with_capacity(x.rows());
        let mut g = Vec::with_capacity(x.rows());
        for start in (0..x.rows()).step_by(Self::PREDICT_CHUNK) {
            let end = (start + Self::PREDICT_CHUNK).min(x.rows());
            let rows: Vec<usize> = (start..end).collect();
            let xc = x.gather_rows(&rows);
            let ids = row_ids.map(|ids| &ids[start..end]);
            let trace = self.bank_trace(&xc, ids)?;
            let out = self.outputs(&trace)?;
            if out.cols() != 2 {
                return Err(Error::Usage("model head is not heteroscedastic".into()));
            }
            for i in 0..out.rows() {
                mu.push(out.get(i, 0));
                g.push(out.get(i, 1));
            }
        }
        Ok((mu, g))
    }

    fn bank_trace(&self, x: &Matrix, row_ids: Option<&[usize]>) -> Result<RetrievalTrace> {
        let bank = self.bank.as_ref().ok_or_else(|| {
            Error::Usage("retrieval model has no candidate bank; call rebuild_bank first".into())
        })?;
        // Re-encode the bank inputs is unnecessary: latents are stored. Build
        // a synthetic trace by encoding anchors only and reusing bank latents.
        let anchor_trace = self.encoder.forward(x, Mode::Eval, None)?;
        let a = &anchor_trace.output;
        let n = a.rows();
        let m = bank.latents.rows();
        let tau = self.tau();
        let cross = a.matmul_nt(&bank.latents)?;
        let a_sq: Vec<f64> = (0..n).map(|i| a.row(i).iter().map(|v| v * v).sum()).collect();
        let c_sq: Vec<f64> = (0..m)
            .map(|j| bank.latents.row(j).iter().map(|v| v * v).sum())
            .collect();
        let mut weights = Matrix::zeros(n, m);
        let mut dist_sq = Matrix::zeros(n, m);
        let mut yhat = vec![0.0; n];
        for i in 0..n {
            let self_id = row_ids.map(|ids| ids[i]);
            let mut max_logit = f64::NEG_INFINITY;
            for j in 0..m {
                let d = (a_sq[i] + c_sq[j] - 2.0 * cross.get(i, j)).max(0.0);
                dist_sq.set(i, j, d);
                if Some(bank.row_ids[j]) == self_id {
                    continue;
                }
                max_logit = max_logit.max(-d / tau);
            }
            if max_logit == f64::NEG_INFINITY {
                return Err(Error::Usage("empty candidate set after self-exclusion".into()));
            }
            let mut z = 0.0;
            for j in 0..m {
                if Some(bank.row_ids[j]) == self_id {
                    continue;
                }
                let w = ((-dist_sq.get(i, j) / tau) - max_logit).exp();
                weights.set(i, j, w);
                z += w;
            }
            let mut acc = 0.0;
            for j in 0..m {
                let w = weights.get(i, j) / z;
                weights.set(i, j, w);
                acc += w * bank.targets[j];
            }
            yhat[i] = acc;
        }
        Ok(RetrievalTrace {
            anchor_trace,
            cand_trace: SeqTrace {
                saved: vec![],
                output: bank.latents.clone(),
            },
            cand_targets: bank.targets.clone(),
            weights,
            dist_sq,
            yhat,
            tau,
        })
    }
}

impl HasParams for Nca {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.encoder.visit_params("enc.", f);
        f("tau_log", &mut self.tau_log);
        if let Some(head) = &mut self.g_head {
            f("ghead.w", &mut head.w);
            f("ghead.b", &mut head.b);
        }
    }
}
