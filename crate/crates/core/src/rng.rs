//! Named, splittable random streams.
//!
//! Every stochastic operation in the crate draws from a [`StreamRng`]. A
//! stream is identified by a root seed plus a path of labels, so independent
//! pipeline stages (init, shuffle, dropout, noise, tuner trials...) get
//! decorrelated, reproducible streams that can be re-derived in isolation.
//! The generator itself is counter-based (ChaCha12), so a stream is a pure
//! function of its key.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// A seedable random stream that can spawn independent child streams by name.
#[derive(Debug, Clone)]
pub struct StreamRng {
    key: u64,
    inner: ChaCha12Rng,
}

impl StreamRng {
    pub fn from_seed(seed: u64) -> Self {
        let key = splitmix64(seed);
        StreamRng {
            key,
            inner: ChaCha12Rng::seed_from_u64(key),
        }
    }

    /// Derives an independent stream for `label`. Derivation depends only on
    /// this stream's key, not on how many values have been drawn from it.
    pub fn child(&self, label: &str) -> Self {
        let key = splitmix64(self.key ^ fnv1a64(label.as_bytes()));
        StreamRng {
            key,
            inner: ChaCha12Rng::seed_from_u64(key),
        }
    }

    /// Derives an independent numbered stream (tuner trial i, ensemble member i...).
    pub fn child_idx(&self, index: u64) -> Self {
        let key = splitmix64(self.key ^ splitmix64(index ^ 0x5bd1e995));
        StreamRng {
            key,
            inner: ChaCha12Rng::seed_from_u64(key),
        }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        rand::Rng::sample(self, rand_distr::StandardNormal)
    }

    /// Uniform draw from [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        rand::Rng::gen_range(self, lo..hi)
    }

    /// Log-uniform draw from [lo, hi).
    pub fn log_uniform(&mut self, lo: f64, hi: f64) -> f64 {
        (self.uniform(lo.ln(), hi.ln())).exp()
    }

    /// Uniform integer from [lo, hi] inclusive.
    pub fn uniform_int(&mut self, lo: usize, hi: usize) -> usize {
        rand::Rng::gen_range(self, lo..=hi)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        rand::Rng::gen_bool(self, p)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        rand::seq::SliceRandom::shuffle(items, self);
    }

    /// A uniformly random size-`k` subset of 0..n, in ascending order.
    pub fn subset(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "subset size {k} exceeds population {n}");
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = self.uniform_int(i, n - 1);
            idx.swap(i, j);
        }
        let mut picked = idx[..k].to_vec();
        picked.sort_unstable();
        picked
    }
}

impl RngCore for StreamRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = StreamRng::from_seed(7);
        let mut b = StreamRng::from_seed(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn children_are_independent_of_parent_position() {
        let parent = StreamRng::from_seed(3);
        let mut moved = parent.clone();
        for _ in 0..10 {
            moved.next_u64();
        }
        let mut c1 = parent.child("init");
        let mut c2 = moved.child("init");
        for _ in 0..20 {
            assert_eq!(c1.next_u64(), c2.next_u64());
        }
    }

    #[test]
    fn distinct_labels_distinct_streams() {
        let root = StreamRng::from_seed(0);
        let a = root.child("shuffle").next_u64();
        let b = root.child("dropout").next_u64();
        assert_ne!(a, b);
    }

    #[test]
    fn subset_is_sorted_and_unique() {
        let mut rng = StreamRng::from_seed(11);
        let s = rng.subset(100, 30);
        assert_eq!(s.len(), 30);
        for w in s.windows(2) {
            assert!(w[0] < w[1]);
        }
    }

    #[test]
    fn normal_has_roughly_unit_variance() {
        let mut rng = StreamRng::from_seed(5);
        let n = 20000;
        let draws: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }
}
