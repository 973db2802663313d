//! Seeded random number generation.
//!
//! Everything stochastic in the crate draws from a ChaCha12 generator so
//! runs are reproducible from a single `u64` seed. Substream derivation
//! keeps independently seeded components decoupled from call order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::numerics::array::DenseArray;

pub type Prng = ChaCha12Rng;

pub fn seeded(seed: u64) -> Prng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Derive an independent stream from a master seed and a label.
pub fn substream(seed: u64, label: &str) -> Prng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha12Rng::seed_from_u64(seed ^ h)
}

pub fn normal_array(shape: Vec<usize>, scale: f64, rng: &mut Prng) -> DenseArray {
    let count: usize = shape.iter().product();
    let data: Vec<f64> = (0..count)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        })
        .collect();
    DenseArray::new(shape, data).expect("normal draws are finite")
}

pub fn normal_vec(count: usize, rng: &mut Prng) -> Vec<f64> {
    (0..count).map(|_| rng.sample(StandardNormal)).collect()
}
