//! Randomized finite-difference checking of analytic gradients.
//!
//! The harness perturbs randomly chosen coordinates of every parameter
//! tensor and compares central differences of a scalar loss against the
//! analytic gradient. It is independent of how the analytic gradient was
//! produced, so it doubles as the acceptance gate for every backward pass
//! in the crate.

use crate::layers::Gradients;
use crate::optim::HasParams;
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy)]
pub struct CheckConfig {
    /// Random coordinates checked per parameter tensor (all, if fewer).
    pub coords_per_tensor: usize,
    /// Central-difference step.
    pub step: f64,
    /// Relative-error tolerance.
    pub tol: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            coords_per_tensor: 20,
            step: 1e-5,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub coords_checked: usize,
    pub max_rel_err: f64,
    /// Coordinate with the worst relative error, as "id[index]".
    pub worst: String,
}

impl CheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn add_at(model: &mut dyn HasParams, id: &str, idx: usize, delta: f64) {
    model.visit_params(&mut |pid, m| {
        if pid == id {
            m.data_mut()[idx] += delta;
        }
    });
}

/// Checks `analytic` against central finite differences of `loss`.
///
/// `loss` must be a deterministic function of the model parameters (eval
/// mode, or a fixed dropout mask). Panics on tolerance violation only if
/// the caller asserts on the report; the harness itself just measures.
pub fn finite_difference_check<M: HasParams>(
    model: &mut M,
    mut loss: impl FnMut(&M) -> f64,
    analytic: &Gradients,
    cfg: &CheckConfig,
    rng: &mut StreamRng,
) -> CheckReport {
    let ids = model.param_ids();
    let mut coords_checked = 0;
    let mut max_rel_err: f64 = 0.0;
    let mut worst = String::new();
    for id in &ids {
        let Some(grad) = analytic.get(id) else {
            continue;
        };
        let n = grad.len();
        let picks: Vec<usize> = if n <= cfg.coords_per_tensor {
            (0..n).collect()
        } else {
            rng.subset(n, cfg.coords_per_tensor)
        };
        for idx in picks {
            add_at(model, id, idx, cfg.step);
            let lp = loss(model);
            add_at(model, id, idx, -2.0 * cfg.step);
            let lm = loss(model);
            add_at(model, id, idx, cfg.step);
            let fd = (lp - lm) / (2.0 * cfg.step);
            let an = grad.data()[idx];
            let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-6);
            coords_checked += 1;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = format!("{id}[{idx}]");
            }
        }
    }
    CheckReport {
        coords_checked,
        max_rel_err,
        worst,
    }
}

/// Deterministic eval-mode loss and analytic gradients of a network on a
/// probe batch. Retrieval models need an explicit candidate set; the loss is
/// MSE for mean-head models and Gaussian NLL for heteroscedastic ones.
pub fn net_loss_and_grads(
    net: &crate::models::Net,
    x: &crate::matrix::Matrix,
    y: &[f64],
    candidates: Option<(&crate::matrix::Matrix, &[f64])>,
) -> crate::error::Result<(f64, Gradients)> {
    use crate::error::Error;
    use crate::loss::{gaussian_nll, mse};
    use crate::models::Net;
    match net {
        Net::Mlp(m) => {
            let trace = m.forward_trace_eval(x)?;
            let (loss, dout) = match net.out_dim() {
                1 => mse(&trace.output, y)?,
                _ => gaussian_nll(&trace.output, y)?,
            };
            Ok((loss, m.backward_from(&trace, &dout)?))
        }
        Net::Tabm(m) => {
            let trace = m.forward_branches_eval(x)?;
            let k = m.branches();
            let mut tiled = Vec::with_capacity(k * y.len());
            for _ in 0..k {
                tiled.extend_from_slice(y);
            }
            let (loss, dout) = match net.out_dim() {
                1 => mse(&trace.branch_outputs, &tiled)?,
                _ => gaussian_nll(&trace.branch_outputs, &tiled)?,
            };
            Ok((loss, m.backward_from(&trace, &dout)?))
        }
        Net::Nca(m) => {
            let (cx, cy) = candidates
                .ok_or_else(|| Error::Usage("retrieval model check needs candidates".into()))?;
            let trace =
                m.forward_retrieval(x, cx, cy, None, crate::layers::Mode::Eval, None)?;
            let out = m.outputs(&trace)?;
            let (loss, dout) = match net.out_dim() {
                1 => mse(&out, y)?,
                _ => gaussian_nll(&out, y)?,
            };
            Ok((loss, m.backward_retrieval(&trace, &dout)?))
        }
    }
}

/// Randomized finite-difference check of a full network's backward pass.
pub fn check_net(
    net: &mut crate::models::Net,
    x: &crate::matrix::Matrix,
    y: &[f64],
    candidates: Option<(&crate::matrix::Matrix, &[f64])>,
    cfg: &CheckConfig,
    rng: &mut StreamRng,
) -> crate::error::Result<CheckReport> {
    let (_, analytic) = net_loss_and_grads(net, x, y, candidates)?;
    let loss = |m: &crate::models::Net| {
        net_loss_and_grads(m, x, y, candidates)
            .expect("probe loss must stay evaluable")
            .0
    };
    Ok(finite_difference_check(net, loss, &analytic, cfg, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Affine, Gradients};
    use crate::matrix::Matrix;

    struct Quad {
        a: Affine,
    }

    impl HasParams for Quad {
        fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
            f("a.w", &mut self.a.w);
            f("a.b", &mut self.a.b);
        }
    }

    #[test]
    fn harness_accepts_correct_gradients_and_flags_wrong_ones() {
        let mut rng = StreamRng::from_seed(2);
        let mut model = Quad {
            a: Affine::init(3, 2, &mut rng),
        };
        let x = Matrix::from_rows(&[vec![0.3, -1.2, 0.7], vec![1.1, 0.4, -0.6]]);
        // loss = sum of squared outputs
        let loss = |m: &Quad| {
            let out = m.a.forward(&x).unwrap();
            out.data().iter().map(|v| v * v).sum::<f64>()
        };
        let out = model.a.forward(&x).unwrap();
        let up = out.scale(2.0);
        let (dw, db, _) = model.a.backward(&x, &up).unwrap();
        let mut grads = Gradients::new();
        grads.accumulate("a.w", dw.clone());
        grads.accumulate("a.b", db);
        let report = finite_difference_check(
            &mut model,
            loss,
            &grads,
            &CheckConfig::default(),
            &mut StreamRng::from_seed(3),
        );
        assert!(report.passed(1e-4), "max rel err {}", report.max_rel_err);
        assert_eq!(report.coords_checked, 8);

        // Corrupt one gradient entry and confirm the harness notices.
        let mut bad = Gradients::new();
        let mut dw_bad = dw;
        dw_bad.data_mut()[0] += 1.0;
        bad.accumulate("a.w", dw_bad);
        let report = finite_difference_check(
            &mut model,
            loss,
            &bad,
            &CheckConfig::default(),
            &mut StreamRng::from_seed(3),
        );
        assert!(!report.passed(1e-4));
        assert!(report.worst.starts_with("a.w["), "{}", report.worst);
    }
}
