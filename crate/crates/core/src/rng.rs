//! Seeded, splittable random streams.
//!
//! Every random draw in the library flows from a [`Stream`], which wraps a
//! ChaCha8 counter-mode generator. Independent streams are obtained by
//! hashing a master seed together with a path of indices (grid point,
//! trial, purpose), so trials can run in any order or in parallel and
//! still consume exactly the same numbers.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream purposes, mixed into derived seeds so that the graph, the data and
/// the quantizer noise of one trial never share draws.
pub mod purpose {
    pub const GRAPH: u64 = 0x67_7261_7068;
    pub const DATA: u64 = 0x6461_7461;
    pub const QUANTIZER: u64 = 0x71_7561_6e74;
    pub const GOSSIP: u64 = 0x676f_7373_6970;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of a master seed and an index path.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// A deterministic random stream.
#[derive(Debug, Clone)]
pub struct Stream {
    inner: ChaCha8Rng,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Stream for `path` under `master`; equivalent to `Stream::new(derive_seed(master, path))`.
    pub fn derived(master: u64, path: &[u64]) -> Self {
        Stream::new(derive_seed(master, path))
    }

    /// Uniform draw in `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform index in `0..n`. `n` must be positive.
    #[inline]
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}

/// Draws `n` data values i.i.d. from a zero-mean normal with standard deviation `std_dev`.
pub fn normal_data(n: usize, std_dev: f64, stream: &mut Stream) -> Vec<f64> {
    (0..n).map(|_| std_dev * stream.standard_normal()).collect()
}

/// Experiment data: `r_i ~ N(0, N^4)`, i.e. standard deviation `N^2`.
pub fn experiment_data(n: usize, stream: &mut Stream) -> Vec<f64> {
    let sd = (n as f64).powi(2);
    normal_data(n, sd, stream)
}
