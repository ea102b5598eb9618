//! High-resolution token selection: read the last token's attention over the
//! low-resolution image tokens, keep the top fraction of patches, lift the
//! patch mask to the high-resolution grid by block replication, and gather
//! the matching HR tokens.
//!
//! Random and center selection are provided as ablation baselines.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMap;
use crate::error::{FlexError, Result};
use crate::tensor::{ops, Matrix};

/// Square grid of image patches, indexed row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub side: usize,
}

impl PatchGrid {
    pub fn new(side: usize) -> Self {
        Self { side }
    }

    /// The grid whose patch count is `n`, if `n` is a perfect square.
    pub fn from_count(n: usize) -> Result<Self> {
        let side = (n as f64).sqrt().round() as usize;
        if side * side != n {
            return Err(FlexError::Config(format!(
                "{n} image tokens do not form a square patch grid"
            )));
        }
        Ok(Self { side })
    }

    pub fn patch_count(&self) -> usize {
        self.side * self.side
    }
}

/// Binary patch mask plus its sorted flat indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionMask {
    pub grid: PatchGrid,
    pub bits: Vec<bool>,
    pub indices: Vec<usize>,
    pub ratio: f64,
}

impl SelectionMask {
    /// Mask with exactly `indices` set. Indices may arrive unsorted or
    /// repeated.
    pub fn from_indices(grid: PatchGrid, indices: &[usize]) -> Result<Self> {
        let n = grid.patch_count();
        let mut bits = vec![false; n];
        for &i in indices {
            if i >= n {
                return Err(FlexError::Shape(format!(
                    "patch index {i} outside a {0}x{0} grid",
                    grid.side
                )));
            }
            bits[i] = true;
        }
        Ok(Self::from_bits(grid, bits))
    }

    fn from_bits(grid: PatchGrid, bits: Vec<bool>) -> Self {
        let indices: Vec<usize> = bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect();
        let ratio = if bits.is_empty() {
            0.0
        } else {
            indices.len() as f64 / bits.len() as f64
        };
        Self {
            grid,
            bits,
            indices,
            ratio,
        }
    }

    pub fn empty(grid: PatchGrid) -> Self {
        Self::from_bits(grid, vec![false; grid.patch_count()])
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StrategyKind {
    AttentionMap,
    Random { seed: u64 },
    Center,
}

/// How LR patches are chosen, and what fraction of them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionStrategy {
    #[serde(flatten)]
    pub kind: StrategyKind,
    pub ratio: f64,
}

impl SelectionStrategy {
    pub const DEFAULT_RATIO: f64 = 0.1;

    pub fn attention_map(ratio: f64) -> Self {
        Self {
            kind: StrategyKind::AttentionMap,
            ratio,
        }
    }

    pub fn random(seed: u64, ratio: f64) -> Self {
        Self {
            kind: StrategyKind::Random { seed },
            ratio,
        }
    }

    pub fn center(ratio: f64) -> Self {
        Self {
            kind: StrategyKind::Center,
            ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(FlexError::Config(format!(
                "selection ratio {} is outside (0, 1]",
                self.ratio
            )));
        }
        Ok(())
    }

    /// Patches kept out of `n`: `ceil(ratio * n)`. A `1e-9` slack absorbs
    /// products like `0.07 * 100 = 7.000000000000001`.
    pub fn budget(&self, n: usize) -> usize {
        let k = (self.ratio * n as f64 - 1e-9).ceil();
        (k.max(0.0) as usize).min(n)
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            StrategyKind::AttentionMap => "attention_map",
            StrategyKind::Random { .. } => "random",
            StrategyKind::Center => "center",
        }
    }
}

impl Default for SelectionStrategy {
    fn default() -> Self {
        Self::attention_map(Self::DEFAULT_RATIO)
    }
}

/// The last token's attention over the first `n_i` keys (the LR image
/// tokens) of `map`.
pub fn extract_image_attention(map: &AttentionMap, n_i: usize) -> Result<Vec<f64>> {
    if map.values.rows() == 0 {
        return Err(FlexError::EmptyInput("attention map has no rows".into()));
    }
    image_attention_from_row(map.last_row(), n_i)
}

/// Same slice rule applied to a single map row, e.g. a decode-time row over
/// `[cached tokens ++ HR keys]`.
pub fn image_attention_from_row(row: &[f64], n_i: usize) -> Result<Vec<f64>> {
    if n_i > row.len() {
        return Err(FlexError::Shape(format!(
            "{n_i} image tokens requested from a map row of length {}",
            row.len()
        )));
    }
    Ok(row[..n_i].to_vec())
}

/// Sum-to-one normalisation of an attention vector; a zero vector is
/// returned unchanged.
pub fn normalize(attn: &[f64]) -> Vec<f64> {
    let s: f64 = attn.iter().sum();
    if s > 0.0 {
        attn.iter().map(|v| v / s).collect()
    } else {
        attn.to_vec()
    }
}

/// Indices of the `k` largest values, ties going to the lower index,
/// returned in ascending index order.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    let k = k.min(values.len());
    if k == 0 {
        return Vec::new();
    }
    let cmp = |a: &usize, b: &usize| values[*b].total_cmp(&values[*a]).then(a.cmp(b));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
    }
    let mut out = order[..k].to_vec();
    out.sort_unstable();
    out
}

/// `k` patches closest to the grid centre by Euclidean distance between
/// patch centres, ties to the lower index.
fn center_k(grid: PatchGrid, k: usize) -> Vec<usize> {
    let s = grid.side as i64;
    // Twice the offset of a patch centre from the grid centre, so the
    // squared distance stays integral.
    let d2 = |i: usize| {
        let (r, c) = ((i as i64) / s, (i as i64) % s);
        (2 * r + 1 - s).pow(2) + (2 * c + 1 - s).pow(2)
    };
    let mut order: Vec<usize> = (0..grid.patch_count()).collect();
    order.sort_by_key(|&i| (d2(i), i));
    let mut out = order[..k.min(order.len())].to_vec();
    out.sort_unstable();
    out
}

/// Binarises LR patch scores into a selection mask.
///
/// `rng` is consulted only by the random strategy.
pub fn build_lr_mask(
    attn: &[f64],
    grid: PatchGrid,
    strategy: &SelectionStrategy,
    rng: &mut dyn RngCore,
) -> Result<SelectionMask> {
    strategy.validate()?;
    let sq = PatchGrid::from_count(attn.len())?;
    if sq != grid {
        return Err(FlexError::Config(format!(
            "{} attention values for a {1}x{1} grid",
            attn.len(),
            grid.side
        )));
    }
    let n = grid.patch_count();
    let k = strategy.budget(n);
    let indices = match strategy.kind {
        StrategyKind::AttentionMap => {
            if let Some(bad) = attn.iter().find(|v| !v.is_finite()) {
                return Err(FlexError::Contract(format!(
                    "non-finite attention value {bad} in selection input"
                )));
            }
            top_k(attn, k)
        }
        StrategyKind::Random { .. } => {
            let mut idx = rand::seq::index::sample(rng, n, k).into_vec();
            idx.sort_unstable();
            idx
        }
        StrategyKind::Center => center_k(grid, k),
    };
    SelectionMask::from_indices(grid, &indices)
}

/// Nearest-neighbour block replication of an LR mask onto a grid `factor`
/// times finer.
pub fn upsample_mask(lr: &SelectionMask, factor: usize) -> Result<SelectionMask> {
    if factor == 0 {
        return Err(FlexError::Config(
            "upsample factor must be at least 1".into(),
        ));
    }
    let side = lr.grid.side * factor;
    let grid = PatchGrid::new(side);
    let mut bits = vec![false; side * side];
    for &i in &lr.indices {
        let (r, c) = (i / lr.grid.side, i % lr.grid.side);
        for dr in 0..factor {
            for dc in 0..factor {
                bits[(r * factor + dr) * side + c * factor + dc] = true;
            }
        }
    }
    Ok(SelectionMask::from_bits(grid, bits))
}

/// Rows of `f_hr` at the mask's indices, in ascending index order.
pub fn gather_tokens(f_hr: &Matrix, hr_mask: &SelectionMask) -> Result<(Matrix, Vec<usize>)> {
    if hr_mask.grid.patch_count() != f_hr.rows() {
        return Err(FlexError::Shape(format!(
            "mask over {} patches applied to {} HR tokens",
            hr_mask.grid.patch_count(),
            f_hr.rows()
        )));
    }
    let rows = ops::gather_rows(f_hr, &hr_mask.indices)?;
    Ok((rows, hr_mask.indices.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn extract_takes_last_row_prefix() {
        let map = AttentionMap {
            values: Matrix::from_rows(&[[1.0, 0.0, 0.0, 0.0, 0.0], [0.4, 0.1, 0.3, 0.2, 0.0]]),
            heads_averaged: 1,
            causal: true,
        };
        assert_eq!(
            extract_image_attention(&map, 4).unwrap(),
            vec![0.4, 0.1, 0.3, 0.2]
        );
        assert!(matches!(
            extract_image_attention(&map, 6),
            Err(FlexError::Shape(_))
        ));
        let uniform = AttentionMap {
            values: Matrix::filled(3, 3, 1.0 / 3.0),
            heads_averaged: 1,
            causal: false,
        };
        let v = extract_image_attention(&uniform, 2).unwrap();
        assert_eq!(v[0], v[1]);
    }

    #[test]
    fn top_half_of_four() {
        let m = build_lr_mask(
            &[0.4, 0.1, 0.3, 0.2],
            PatchGrid::new(2),
            &SelectionStrategy::attention_map(0.5),
            &mut rng(),
        )
        .unwrap();
        assert_eq!(m.bits, vec![true, false, true, false]);
        assert_eq!(m.indices, vec![0, 2]);
        assert_eq!(m.ratio, 0.5);
    }

    #[test]
    fn full_ratio_selects_everything() {
        let g = PatchGrid::new(3);
        let attn = [0.5, 0.0, 0.1, 0.0, 0.2, 0.0, 0.0, 0.1, 0.1];
        for s in [
            SelectionStrategy::attention_map(1.0),
            SelectionStrategy::random(9, 1.0),
            SelectionStrategy::center(1.0),
        ] {
            let m = build_lr_mask(&attn, g, &s, &mut rng()).unwrap();
            assert!(m.bits.iter().all(|&b| b), "{s:?}");
        }
    }

    #[test]
    fn uniform_ties_go_to_lowest_index() {
        let m = build_lr_mask(
            &[0.25; 4],
            PatchGrid::new(2),
            &SelectionStrategy::attention_map(0.25),
            &mut rng(),
        )
        .unwrap();
        assert_eq!(m.indices, vec![0]);
    }

    #[test]
    fn non_square_input_is_a_config_error() {
        let r = build_lr_mask(
            &[0.2; 5],
            PatchGrid::new(2),
            &SelectionStrategy::default(),
            &mut rng(),
        );
        assert!(matches!(r, Err(FlexError::Config(_))));
    }

    #[test]
    fn center_picks_middle_patches() {
        // 3x3: the middle patch is strictly closest.
        let m = build_lr_mask(
            &[0.0; 9],
            PatchGrid::new(3),
            &SelectionStrategy::center(0.1),
            &mut rng(),
        )
        .unwrap();
        assert_eq!(m.indices, vec![4]);
        // 4x4: four central patches tie; lowest indices win.
        let m = build_lr_mask(
            &[0.0; 16],
            PatchGrid::new(4),
            &SelectionStrategy::center(0.125),
            &mut rng(),
        )
        .unwrap();
        assert_eq!(m.indices, vec![5, 6]);
    }

    #[test]
    fn random_is_pure_given_seed() {
        let g = PatchGrid::new(4);
        let s = SelectionStrategy::random(3, 0.25);
        let a = build_lr_mask(&[0.0; 16], g, &s, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = build_lr_mask(&[0.0; 16], g, &s, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn upsample_examples() {
        let lr = SelectionMask::from_indices(PatchGrid::new(2), &[0, 2]).unwrap();
        let hr = upsample_mask(&lr, 2).unwrap();
        assert_eq!(hr.indices, vec![0, 1, 4, 5, 8, 9, 12, 13]);
        assert_eq!(upsample_mask(&lr, 1).unwrap(), lr);
        let all = SelectionMask::from_indices(PatchGrid::new(2), &[0, 1, 2, 3]).unwrap();
        assert!(upsample_mask(&all, 3).unwrap().bits.iter().all(|&b| b));
        assert!(upsample_mask(&lr, 0).is_err());
    }

    #[test]
    fn gather_examples() {
        let f = Matrix::from_fn(4, 3, |i, j| (i * 10 + j) as f64);
        let g = PatchGrid::new(2);
        let all = SelectionMask::from_indices(g, &[0, 1, 2, 3]).unwrap();
        assert_eq!(gather_tokens(&f, &all).unwrap().0, f);
        let (none, idx) = gather_tokens(&f, &SelectionMask::empty(g)).unwrap();
        assert_eq!(none.shape(), (0, 3));
        assert!(idx.is_empty());
        let (two, _) =
            gather_tokens(&f, &SelectionMask::from_indices(g, &[2, 0]).unwrap()).unwrap();
        assert_eq!(two, Matrix::from_rows(&[f.row(0), f.row(2)]));
        assert!(gather_tokens(&Matrix::zeros(5, 3), &all).is_err());
    }

    #[test]
    fn budget_handles_float_products() {
        assert_eq!(SelectionStrategy::attention_map(0.07).budget(100), 7);
        assert_eq!(SelectionStrategy::attention_map(0.1).budget(576), 58);
        assert_eq!(SelectionStrategy::attention_map(0.1).budget(16), 2);
        assert!(SelectionStrategy::attention_map(0.0).validate().is_err());
        assert!(SelectionStrategy::attention_map(1.5).validate().is_err());
    }

    #[test]
    fn strategy_serde_shape() {
        let s = SelectionStrategy::random(4, 0.1);
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(j, r#"{"kind":"random","seed":4,"ratio":0.1}"#);
        assert_eq!(serde_json::from_str::<SelectionStrategy>(&j).unwrap(), s);
    }
}
