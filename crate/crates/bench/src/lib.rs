//! Seeded fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flexattn_core::attention::AttentionWeights;
use flexattn_core::model::Image;
use flexattn_core::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Square `d×d` projections scaled by `1/√d`, with primed copies.
pub fn weights(rng: &mut impl Rng, d: usize, heads: usize) -> AttentionWeights {
    let s = 1.0 / (d as f64).sqrt();
    let mut m = || Matrix::from_fn(d, d, |_, _| rng.gen_range(-s..s));
    let w = AttentionWeights::new(m(), m(), m(), m(), heads).expect("square");
    let (k, v) = (m(), m());
    w.with_primes(k, v).expect("square")
}

pub fn image(rng: &mut impl Rng, side: usize) -> Image {
    Image::new(side, 1, (0..side * side).map(|_| rng.gen()).collect()).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_seeded() {
        let a = matrix(&mut rng(1), 3, 4);
        let b = matrix(&mut rng(1), 3, 4);
        assert!(a.bit_eq(&b));
        assert!(weights(&mut rng(2), 8, 2).is_hierarchical());
        assert_eq!(image(&mut rng(3), 8).pixels.len(), 64);
    }
}
