use tabunc::datagen::{gen_saw, SawConfig};
use tabunc::loss::LossKind;
use tabunc::models::ModelSpec;
use tabunc::train::{build_and_train, TrainConfig};
use std::time::Instant;

fn main() {
    let ds = gen_saw(0, &SawConfig { n_train: 16000, n_val: 3000, n_test: 3000, ..Default::default() }).unwrap();
    let cfg = TrainConfig { lr: 1e-3, max_epochs: 3, patience: 1, ..Default::default() };
    for (name, spec) in [
        ("mlp 3x256", ModelSpec::mlp(3, 256, 0.2)),
        ("tabm 3x256 k16", ModelSpec::tabm(3, 256, 0.2, 16)),
        ("nca 1x256 L128", ModelSpec::nca(1, 256, 0.2, Default::default())),
    ] {
        let t = Instant::now();
        let (_, h) = build_and_train(&spec, &ds, &cfg, LossKind::Mse).unwrap();
        println!("{name}: {} epochs in {:.1}s ({:.2}s/epoch)", h.len(), t.elapsed().as_secs_f64(), t.elapsed().as_secs_f64() / h.len() as f64);
    }
}
