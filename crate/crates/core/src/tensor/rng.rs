//! Seeded random streams.
//!
//! A [`SeedStream`] hands out independent ChaCha8 streams keyed by a stream
//! id, so every stochastic call site draws from its own reproducible
//! sequence regardless of what other call sites consume.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id);
        rng
    }

    /// Derives a child key space; `split(a).stream(b)` never collides with
    /// `split(c).stream(d)` for `a != c`.
    pub fn split(&self, id: u64) -> SeedStream {
        let mut rng = self.stream(id ^ 0x9E37_79B9_7F4A_7C15);
        SeedStream { seed: rng.random() }
    }
}

pub fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: Real) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z as Real * std
    })
}

pub fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize, lo: Real, hi: Real) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let u: f64 = rng.random();
        lo + (hi - lo) * u as Real
    })
}
