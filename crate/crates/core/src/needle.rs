//! Synthetic needle VQA: a single small glyph sits in one of eight cells of
//! a noisy image, and the answer is its class.
//!
//! Every glyph is built from `f×f` blocks that are permutations of one fixed
//! multiset of pixel values, `f` being the HR/LR factor. Area-average
//! downsampling by `f` therefore maps every class to the same LR image:
//! only HR tokens carry the answer.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlexError, Result};
use crate::model::Image;

/// LR image side in pixels; the LR grid is 4×4 patches of 4 pixels.
pub const LR_SIDE: usize = 16;
pub const PATCH: usize = 4;
pub const N_CLASSES: usize = 8;
/// Checkerboard of LR patches that may hold the glyph.
pub const CELLS: [(usize, usize); 8] = [
    (0, 0),
    (0, 2),
    (1, 1),
    (1, 3),
    (2, 0),
    (2, 2),
    (3, 1),
    (3, 3),
];
/// Prompt token for cell `i` is `i`; the answer for class `c` is
/// `CLASS_TOKEN_BASE + c`.
pub const CLASS_TOKEN_BASE: usize = 8;
pub const VOCAB: usize = 16;
const NOISE_AMPLITUDE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeedleTask {
    pub image: Image,
    pub target_cell: (usize, usize),
    pub glyph_class: usize,
    pub prompt_ids: Vec<usize>,
    pub label_id: usize,
    /// HR/LR factor the image was rendered for.
    pub factor: usize,
    noise_seed: u64,
}

impl NeedleTask {
    /// Cell index into [`CELLS`].
    pub fn cell_index(&self) -> usize {
        CELLS
            .iter()
            .position(|&c| c == self.target_cell)
            .expect("target is a layout cell")
    }

    /// The same task with another glyph class; background and cell are
    /// unchanged.
    pub fn with_class(&self, class: usize) -> NeedleTask {
        render(self.noise_seed, self.cell_index(), class, self.factor)
    }

    /// Flat LR patch index of the target cell.
    pub fn lr_patch(&self) -> usize {
        self.target_cell.0 * (LR_SIDE / PATCH) + self.target_cell.1
    }
}

/// Per-class glyph: four `f×f` blocks (row-major 2×2), each a permutation
/// of `⌊f²/2⌋` ones and the rest zeros. Deterministic in `(class, f)`;
/// classes are guaranteed distinct.
pub fn glyph(class: usize, f: usize) -> Vec<Vec<f64>> {
    let all = glyph_set(f);
    all[class].clone()
}

fn glyph_set(f: usize) -> Vec<Vec<Vec<f64>>> {
    let n = f * f;
    let base: Vec<f64> = (0..n).map(|i| if i < n / 2 { 1.0 } else { 0.0 }).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6e65_6564_6c65 ^ f as u64);
    let mut out: Vec<Vec<Vec<f64>>> = Vec::with_capacity(N_CLASSES);
    while out.len() < N_CLASSES {
        let g: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut b = base.clone();
                b.shuffle(&mut rng);
                b
            })
            .collect();
        if !out.contains(&g) {
            out.push(g);
        }
    }
    out
}

fn render(noise_seed: u64, cell: usize, class: usize, f: usize) -> NeedleTask {
    let side = LR_SIDE * f;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let pixels: Vec<f64> = (0..side * side)
        .map(|_| rng.gen::<f64>() * NOISE_AMPLITUDE)
        .collect();
    let mut image = Image::new(side, 1, pixels).expect("sized above");
    let (cr, cc) = CELLS[cell];
    let cell_px = PATCH * f;
    for (bi, block) in glyph(class, f).iter().enumerate() {
        let (br, bc) = (bi / 2, bi % 2);
        for (k, &v) in block.iter().enumerate() {
            let r = cr * cell_px + f + br * f + k / f;
            let c = cc * cell_px + f + bc * f + k % f;
            image.set(r, c, 0, v);
        }
    }
    NeedleTask {
        image,
        target_cell: (cr, cc),
        glyph_class: class,
        prompt_ids: vec![cell],
        label_id: CLASS_TOKEN_BASE + class,
        factor: f,
        noise_seed,
    }
}

/// Task `index` of the stream `seed` at HR/LR factor `f`.
pub fn gen_task(seed: u64, index: u64, f: usize) -> NeedleTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let cell = rng.gen_range(0..CELLS.len());
    let class = rng.gen_range(0..N_CLASSES);
    let noise_seed = rng.gen();
    render(noise_seed, cell, class, f)
}

/// `count` tasks at the default factor 4 (64-pixel HR images).
pub fn gen_needle(seed: u64, count: usize) -> Result<Vec<NeedleTask>> {
    gen_needle_at(seed, count, 4)
}

pub fn gen_needle_at(seed: u64, count: usize, factor: usize) -> Result<Vec<NeedleTask>> {
    if count == 0 {
        return Err(FlexError::Config("count must be at least 1".into()));
    }
    if factor == 0 {
        return Err(FlexError::Config("factor must be at least 1".into()));
    }
    Ok((0..count as u64)
        .map(|i| gen_task(seed, i, factor))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::downsample;

    #[test]
    fn deterministic() {
        assert_eq!(gen_needle(3, 5).unwrap(), gen_needle(3, 5).unwrap());
        assert_ne!(gen_needle(3, 5).unwrap(), gen_needle(4, 5).unwrap());
        assert!(gen_needle(0, 0).is_err());
    }

    #[test]
    fn classes_vanish_under_downsampling() {
        for f in [2, 3, 4] {
            let t = gen_task(9, 1, f);
            let base = downsample(&t.image, f).unwrap();
            for c in 0..N_CLASSES {
                let other = t.with_class(c);
                assert_eq!(other.glyph_class, c);
                let lr = downsample(&other.image, f).unwrap();
                assert!(lr
                    .pixels
                    .iter()
                    .zip(&base.pixels)
                    .all(|(a, b)| a.to_bits() == b.to_bits()));
                if c != t.glyph_class {
                    assert_ne!(other.image, t.image);
                }
            }
        }
    }

    #[test]
    fn glyphs_share_a_multiset() {
        for f in [2, 3, 4] {
            let mut sorted: Vec<Vec<u64>> = (0..N_CLASSES)
                .map(|c| {
                    let mut v: Vec<u64> =
                        glyph(c, f).concat().iter().map(|x| x.to_bits()).collect();
                    v.sort_unstable();
                    v
                })
                .collect();
            sorted.dedup();
            assert_eq!(sorted.len(), 1);
        }
    }

    #[test]
    fn class_histogram_is_uniform() {
        // Pearson chi-square, 7 degrees of freedom; p = 0.001 at 24.32.
        let n = 8000;
        let mut counts = [0usize; N_CLASSES];
        for t in gen_needle(17, n).unwrap() {
            counts[t.glyph_class] += 1;
        }
        let e = n as f64 / N_CLASSES as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 24.32, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn prompt_and_label() {
        let t = gen_task(1, 0, 4);
        assert_eq!(t.prompt_ids, vec![t.cell_index()]);
        assert_eq!(t.label_id, CLASS_TOKEN_BASE + t.glyph_class);
        assert_eq!(t.image.side, 64);
        assert!(t.label_id < VOCAB);
    }
}
