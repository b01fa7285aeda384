//! Seeded randomness. Every stochastic step in the pipeline draws from a
//! [`SeededRng`] derived from one root seed, so whole runs replay exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Matrix, NumericsError, ParamTensor};

/// Deterministic random stream: identical seed, identical draw sequence.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent child stream from this stream's seed and a
    /// caller-chosen tag. Pure in `(seed, tag)`: it does not consume or
    /// depend on draw state, so derived streams are stable however the
    /// parent is used.
    pub fn derive(&self, tag: u64) -> SeededRng {
        SeededRng::new(splitmix64(self.seed ^ splitmix64(tag)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.gen()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.gen::<f64>()
    }

    /// Standard normal draw.
    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform index in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index range must be non-empty");
        (self.rng.gen::<u64>() % n as u64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    /// Bernoulli draw with success probability `p`.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.rng.gen::<f64>() < p
    }
}

/// Glorot-uniform initialization: draws in `±sqrt(6 / (fan_in + fan_out))`
/// where the fans are the matrix dimensions.
pub fn glorot_init(rows: usize, cols: usize, rng: &mut SeededRng) -> Result<ParamTensor, NumericsError> {
    if rows == 0 || cols == 0 {
        return Err(NumericsError::InvalidArgument(format!(
            "glorot_init requires positive dimensions, got {}x{}",
            rows, cols
        )));
    }
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let value = Matrix::from_fn(rows, cols, |_, _| rng.uniform(-limit, limit));
    Ok(ParamTensor::new(value))
}
