//! Seeded random streams.
//!
//! A root [`Rng`] is a ChaCha8 key derived from a 64-bit seed. Independent
//! consumers (parameter init, episode sampling, data generation, evaluation
//! trials) draw from [`Rng::substream`]s keyed by purpose and index, so the
//! values one consumer sees never depend on how much another consumed.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Init,
    Episodes,
    Data,
    Eval,
    GradCheck,
    Custom(u64),
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Episodes => 2,
            Stream::Data => 3,
            Stream::Eval => 4,
            Stream::GradCheck => 5,
            Stream::Custom(v) => 0x100 ^ v.rotate_left(17),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for `(purpose, index)`, unaffected by draws
    /// already taken from `self`.
    pub fn substream(&self, purpose: Stream, index: u64) -> Rng {
        let id = splitmix64(self.stream ^ splitmix64(purpose.tag()) ^ splitmix64(index).rotate_left(1));
        Self::with_stream(self.seed, id)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.inner);
        mean + std * z
    }

    pub fn normals(&mut self, count: usize, mean: f64, std: f64) -> Vec<f64> {
        (0..count).map(|_| self.normal(mean, std)).collect()
    }

    /// `k` distinct indices from `0..n` in draw order (partial Fisher–Yates).
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} of {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_eq!(a.normal(0.0, 1.0).to_bits(), b.normal(0.0, 1.0).to_bits());
    }

    #[test]
    fn substreams_ignore_parent_consumption() {
        let root = Rng::new(7);
        let mut used = Rng::new(7);
        for _ in 0..10 {
            used.next_u64();
        }
        let mut s1 = root.substream(Stream::Episodes, 3);
        let mut s2 = used.substream(Stream::Episodes, 3);
        assert_eq!(s1.next_u64(), s2.next_u64());
        let mut other = root.substream(Stream::Episodes, 4);
        let mut again = root.substream(Stream::Episodes, 3);
        assert_ne!(other.next_u64(), again.next_u64());
    }

    #[test]
    fn sample_indices_are_distinct() {
        let mut r = Rng::new(1);
        let mut idx = r.sample_indices(20, 20);
        idx.sort_unstable();
        assert_eq!(idx, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn normal_moments() {
        let mut r = Rng::new(9);
        let xs = r.normals(100_000, 1.0, 2.0);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!((mean - 1.0).abs() < 0.03);
        assert!((var.sqrt() - 2.0).abs() < 0.03);
    }
}
