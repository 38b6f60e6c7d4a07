//! Portable random numbers.
//!
//! The generator is xoshiro256++ whose 256-bit state is filled from a `u64`
//! seed by splitmix64 (`rand_xoshiro`'s `seed_from_u64`). Uniform `f64`s take
//! the top 53 bits of one output scaled by 2⁻⁵³. Normal deviates use the
//! Box–Muller transform on two uniforms, discarding the second deviate, so
//! every stream is fully determined by the seed on every platform.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Seed of the `index`-th item drawn from a stream seeded with `seed`.
pub fn item_seed(seed: u64, index: u64) -> u64 {
    seed ^ index
}

/// Uniform in `[0, 1)`.
pub fn unit(rng: &mut Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit(rng)
}

/// Uniform integer in `[lo, hi)`.
pub fn below(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..hi)
}

pub fn bernoulli(rng: &mut Rng, p: f64) -> bool {
    unit(rng) < p
}

pub fn normal(rng: &mut Rng) -> f64 {
    let u1 = 1.0 - unit(rng); // (0, 1]
    let u2 = unit(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// The generator state as text, for checkpoint manifests.
pub fn state_to_string(rng: &Rng) -> String {
    serde_json::to_string(rng).expect("rng state serializes")
}

pub fn state_from_str(s: &str) -> Option<Rng> {
    serde_json::from_str(s).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = seeded(42);
        let mut b = seeded(42);
        for _ in 0..10 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn state_round_trips() {
        let mut a = seeded(3);
        unit(&mut a);
        let mut b = state_from_str(&state_to_string(&a)).unwrap();
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn normal_moments() {
        let mut r = seeded(9);
        let xs: Vec<f64> = (0..20000).map(|_| normal(&mut r)).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(m.abs() < 0.03 && (v - 1.0).abs() < 0.05, "{m} {v}");
    }
}
