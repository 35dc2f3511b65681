//! Adaptive-moment optimizer with decoupled weight decay.

use crate::error::{Error, Result};
use crate::layers::Gradients;
use crate::matrix::Matrix;
use std::collections::BTreeMap;

/// Anything exposing named parameter tensors for update and checkpointing.
pub trait HasParams {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Matrix));

    fn param_ids(&mut self) -> Vec<String> {
        let mut ids = Vec::new();
        self.visit_params(&mut |id, _| ids.push(id.to_string()));
        ids
    }

    /// Total number of scalar parameters.
    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, m| n += m.len());
        n
    }

    /// Snapshot of all parameter tensors, keyed by id.
    fn snapshot(&mut self) -> BTreeMap<String, Matrix> {
        let mut map = BTreeMap::new();
        self.visit_params(&mut |id, m| {
            map.insert(id.to_string(), m.clone());
        });
        map
    }

    /// Restores a snapshot taken from the same architecture.
    fn restore(&mut self, snap: &BTreeMap<String, Matrix>) {
        self.visit_params(&mut |id, m| {
            if let Some(saved) = snap.get(id) {
                *m = saved.clone();
            }
        });
    }
}

/// AdamW: adaptive moments (0.9 / 0.999, eps 1e-8) with decoupled decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        assert!(lr >= 0.0, "learning rate must be non-negative");
        assert!(weight_decay >= 0.0);
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter of `model`.
    ///
    /// If any gradient contains a non-finite value, nothing is applied and
    /// the offending parameter id is reported.
    pub fn step(&mut self, model: &mut dyn HasParams, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("gradient of parameter {id}"),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (lr, b1, b2, eps, wd) = (self.lr, self.beta1, self.beta2, self.eps, self.weight_decay);
        let m_map = &mut self.m;
        let v_map = &mut self.v;
        model.visit_params(&mut |id, p| {
            let Some(g) = grads.get(id) else {
                return; // parameter not touched this step
            };
            let m = m_map
                .entry(id.to_string())
                .or_insert_with(|| Matrix::zeros(p.rows(), p.cols()));
            let v = v_map
                .entry(id.to_string())
                .or_insert_with(|| Matrix::zeros(p.rows(), p.cols()));
            let pd = p.data_mut();
            let gd = g.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                md[i] = b1 * md[i] + (1.0 - b1) * gd[i];
                vd[i] = b2 * vd[i] + (1.0 - b2) * gd[i] * gd[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * pd[i]);
            }
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scalar {
        p: Matrix,
    }

    impl HasParams for Scalar {
        fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
            f("p", &mut self.p);
        }
    }

    #[test]
    fn zero_gradients_zero_decay_leave_params_unchanged() {
        let mut model = Scalar {
            p: Matrix::from_vec(1, 1, vec![1.25]),
        };
        let mut opt = AdamW::new(0.1, 0.0);
        let mut grads = Gradients::new();
        grads.accumulate("p", Matrix::zeros(1, 1));
        opt.step(&mut model, &grads).unwrap();
        assert_eq!(model.p.get(0, 0), 1.25);
    }

    #[test]
    fn first_step_moves_by_lr_in_gradient_direction() {
        // Bias-corrected moments give m_hat = g, v_hat = g^2, so the update
        // magnitude is lr up to eps.
        let mut model = Scalar {
            p: Matrix::zeros(1, 1),
        };
        let mut opt = AdamW::new(0.1, 0.0);
        let mut grads = Gradients::new();
        grads.accumulate("p", Matrix::from_vec(1, 1, vec![1.0]));
        opt.step(&mut model, &grads).unwrap();
        let p = model.p.get(0, 0);
        assert!((p + 0.1).abs() < 1e-8, "p = {p}");
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn decoupled_decay_scales_param_when_gradient_is_zero() {
        let mut model = Scalar {
            p: Matrix::from_vec(1, 1, vec![2.0]),
        };
        let lr = 0.05;
        let wd = 0.3;
        let mut opt = AdamW::new(lr, wd);
        let mut grads = Gradients::new();
        grads.accumulate("p", Matrix::zeros(1, 1));
        opt.step(&mut model, &grads).unwrap();
        let expected = 2.0 * (1.0 - lr * wd);
        assert!((model.p.get(0, 0) - expected).abs() < 1e-14);
    }

    #[test]
    fn non_finite_gradient_aborts_and_names_the_parameter() {
        let mut model = Scalar {
            p: Matrix::from_vec(1, 1, vec![1.0]),
        };
        let mut opt = AdamW::new(0.1, 0.0);
        let mut grads = Gradients::new();
        grads.accumulate("p", Matrix::from_vec(1, 1, vec![f64::NAN]));
        let err = opt.step(&mut model, &grads).unwrap_err();
        assert!(err.to_string().contains("p"), "{err}");
        assert_eq!(model.p.get(0, 0), 1.0, "no partial update");
        assert_eq!(opt.step_count(), 0);
    }
}
