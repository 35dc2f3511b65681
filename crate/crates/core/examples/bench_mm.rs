use tabunc::matrix::Matrix;
use tabunc::rng::StreamRng;
use std::time::Instant;

fn main() {
    let mut rng = StreamRng::from_seed(0);
    let mut a = Matrix::zeros(4096, 256);
    for v in a.data_mut() { *v = rng.normal(); }
    let mut a2 = Matrix::zeros(4096, 256);
    for v in a2.data_mut() { *v = rng.normal(); }
    let mut b = Matrix::zeros(256, 256);
    for v in b.data_mut() { *v = rng.normal(); }
    let n = 20;
    let gflop = n as f64 * 2.0 * 4096.0 * 256.0 * 256.0 / 1e9;

    let _ = a.matmul(&b).unwrap();
    let t = Instant::now();
    for _ in 0..n { std::hint::black_box(a.matmul(&b).unwrap()); }
    println!("matmul    (nn): {:.2} GF/s", gflop / t.elapsed().as_secs_f64());

    let t = Instant::now();
    for _ in 0..n { std::hint::black_box(a.matmul_tn(&a2).unwrap()); }
    println!("matmul_tn (dW): {:.2} GF/s", gflop / t.elapsed().as_secs_f64());

    let t = Instant::now();
    for _ in 0..n { std::hint::black_box(a.matmul_nt(&b).unwrap()); }
    println!("matmul_nt (dx): {:.2} GF/s", gflop / t.elapsed().as_secs_f64());
}
