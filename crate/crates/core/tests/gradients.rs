//! Finite-difference gradient checks for every full model in the zoo.
//!
//! Each check perturbs at least 20 random coordinates per parameter tensor
//! (step 1e-5) and compares against the analytic backward pass at relative
//! tolerance 1e-4.

use tabunc::gradcheck::{check_net, CheckConfig};
use tabunc::matrix::Matrix;
use tabunc::models::{build_net, EmbeddingConfig, ModelSpec, RetrievalConfig};
use tabunc::rng::StreamRng;

fn probe(rows: usize, cols: usize, seed: u64) -> (Matrix, Vec<f64>) {
    let mut rng = StreamRng::from_seed(seed);
    let mut x = Matrix::zeros(rows, cols);
    for v in x.data_mut() {
        *v = rng.normal();
    }
    let y = (0..rows).map(|_| rng.normal()).collect();
    (x, y)
}

fn run_check(spec: ModelSpec, d: usize, seed: u64) {
    let mut rng = StreamRng::from_seed(seed).child("init");
    let mut net = build_net(&spec, d, &mut rng).unwrap();
    let (x, y) = probe(4, d, seed ^ 0xabc);
    let candidates = probe(7, d, seed ^ 0xdef);
    let cands = match spec.kind {
        tabunc::models::ModelKind::Nca => Some((&candidates.0, &candidates.1[..])),
        _ => None,
    };
    let report = check_net(
        &mut net,
        &x,
        &y,
        cands,
        &CheckConfig::default(),
        &mut StreamRng::from_seed(seed ^ 0x77),
    )
    .unwrap();
    assert!(report.coords_checked >= 20);
    assert!(
        report.passed(1e-4),
        "{} gradients: max rel err {:.3e} at {}",
        spec.kind.name(),
        report.max_rel_err,
        report.worst
    );
}

#[test]
fn mlp_full_model_gradients() {
    run_check(ModelSpec::mlp(2, 16, 0.0), 5, 1);
}

#[test]
fn mlp_heteroscedastic_gradients() {
    run_check(ModelSpec::mlp(2, 16, 0.0).with_heteroscedastic(), 5, 2);
}

#[test]
fn mlp_plr_gradients() {
    let emb = EmbeddingConfig {
        n_coeffs: 4,
        dim: 6,
        sigma: 0.7,
    };
    run_check(ModelSpec::mlp_plr(2, 12, 0.0, emb), 3, 3);
}

#[test]
fn mlp_lrlr_gradients() {
    let emb = EmbeddingConfig {
        dim: 5,
        ..Default::default()
    };
    run_check(ModelSpec::mlp_lrlr(2, 12, 0.0, emb), 3, 4);
}

#[test]
fn nca_encoder_gradients_including_temperature() {
    let spec = ModelSpec::nca(
        1,
        10,
        0.0,
        RetrievalConfig {
            latent_dim: 6,
            candidate_fraction: 0.5,
            temperature_init: 1.0,
        },
    );
    run_check(spec, 4, 5);
}

#[test]
fn nca_heteroscedastic_gradients() {
    let spec = ModelSpec::nca(
        1,
        8,
        0.0,
        RetrievalConfig {
            latent_dim: 5,
            candidate_fraction: 0.5,
            temperature_init: 1.0,
        },
    )
    .with_heteroscedastic();
    run_check(spec, 4, 6);
}

#[test]
fn tabm_gradients_shared_and_per_branch() {
    run_check(ModelSpec::tabm(2, 8, 0.0, 4), 3, 7);
}

#[test]
fn tabm_heteroscedastic_gradients() {
    run_check(ModelSpec::tabm(1, 8, 0.0, 3).with_heteroscedastic(), 3, 8);
}

#[test]
fn embedder_module_with_head_gradients() {
    // The triplet-pretraining module: LRLR embedder plus linear head, with
    // the loss being a fixed linear probe of the output embeddings.
    use tabunc::gradcheck::finite_difference_check;
    use tabunc::models::{build_lrlr_embedder, EmbedderModule};
    use tabunc::optim::HasParams;

    let mut rng = StreamRng::from_seed(9);
    let embedder = build_lrlr_embedder(3, 4, &mut rng);
    let mut module = EmbedderModule::new(embedder, 3, 5, &mut rng);
    let (x, _) = probe(4, 3, 10);
    let (out, trace) = module.forward(&x).unwrap();
    let mut probe_w = Matrix::zeros(out.rows(), out.cols());
    let mut prng = StreamRng::from_seed(11);
    for v in probe_w.data_mut() {
        *v = prng.normal();
    }
    let analytic = module.backward(&trace, &probe_w).unwrap();
    let loss = |m: &EmbedderModule| {
        let (o, _) = m.forward(&x).unwrap();
        o.hadamard(&probe_w).unwrap().data().iter().sum::<f64>()
    };
    let report = finite_difference_check(
        &mut module,
        loss,
        &analytic,
        &CheckConfig::default(),
        &mut StreamRng::from_seed(12),
    );
    assert!(report.passed(1e-4), "max rel err {}", report.max_rel_err);
    let mut ids = Vec::new();
    module.visit_params(&mut |id, _| ids.push(id.to_string()));
    assert!(ids.iter().any(|i| i.starts_with("head.")));
}
