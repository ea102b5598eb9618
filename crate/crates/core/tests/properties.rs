use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flexattn_core::attention::{hierarchical_self_attention, self_attention};
use flexattn_core::cost::{attention_core, flex_layer_flops, total, CostConfig, CostEncoder};
use flexattn_core::selection::{build_lr_mask, top_k, upsample_mask, PatchGrid, SelectionStrategy};
use flexattn_core::selftest::random_weights;
use flexattn_core::{FlopCounter, Matrix};

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn layer(m: usize) -> CostConfig {
    CostConfig {
        n_image: 16,
        n_text: 4,
        m,
        n_hr: 256,
        d_model: 16,
        heads: 2,
        ffn_inner: 64,
        n_sa: 1,
        n_fa: 1,
        vocab: 16,
        encoder: CostEncoder::None,
        output_len: 1,
        pre_ln: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn full_map_rows_sum_to_one_and_truncation_is_a_prefix(
        seed in any::<u64>(),
        n in 1usize..10,
        m in 0usize..10,
        heads in prop::sample::select(vec![1usize, 2, 4]),
        causal in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 8;
        let w = random_weights(&mut rng, d, heads, true);
        let h = random_matrix(&mut rng, n, d);
        let s = random_matrix(&mut rng, m, d);
        let out = hierarchical_self_attention(&h, &s, &w, causal, &mut FlopCounter::new()).unwrap();
        prop_assert_eq!(out.map_full.values.rows(), n);
        prop_assert_eq!(out.map_full.values.cols(), n + m);
        for (i, sum) in out.map_full.row_sums().into_iter().enumerate() {
            prop_assert!((sum - 1.0).abs() <= 1e-9, "row {} sums to {}", i, sum);
        }
        for i in 0..n {
            prop_assert_eq!(out.map_trunc.values.row(i), &out.map_full.values.row(i)[..n]);
            let t: f64 = out.map_trunc.values.row(i).iter().sum();
            prop_assert!(t <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn no_hr_tokens_reduces_to_self_attention(
        seed in any::<u64>(),
        n in 1usize..10,
        causal in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 8;
        let w = random_weights(&mut rng, d, 2, true);
        let h = random_matrix(&mut rng, n, d);
        let empty = Matrix::zeros(0, d);
        let hier = hierarchical_self_attention(&h, &empty, &w, causal, &mut FlopCounter::new()).unwrap();
        let (plain, map) = self_attention(&h, &w, causal, &mut FlopCounter::new()).unwrap();
        prop_assert!(hier.out.max_abs_diff(&plain) <= 1e-12);
        prop_assert!(hier.map_full.values.max_abs_diff(&map.values) <= 1e-12);
    }

    #[test]
    fn top_k_matches_a_full_sort(
        values in prop::collection::vec(prop::sample::select(vec![0.0, 0.25, 0.5, 1.0]), 0..40),
        k in 0usize..45,
    ) {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
        let mut expected: Vec<usize> = order.into_iter().take(k).collect();
        expected.sort_unstable();
        prop_assert_eq!(top_k(&values, k), expected);
    }

    #[test]
    fn budget_is_the_ceiling_and_monotone(n in 1usize..2000, a in 1u32..=1000, b in 1u32..=1000) {
        let (lo, hi) = (a.min(b), a.max(b));
        let s_lo = SelectionStrategy::attention_map(f64::from(lo) / 1000.0);
        let s_hi = SelectionStrategy::attention_map(f64::from(hi) / 1000.0);
        prop_assert!(s_lo.budget(n) <= s_hi.budget(n));
        let k = s_hi.budget(n);
        // Exact rational ceiling of hi·n/1000.
        prop_assert_eq!(k, (hi as usize * n).div_ceil(1000));
        prop_assert!(k >= 1 && k <= n);
    }

    #[test]
    fn selection_masks_have_budget_size_and_upsample_by_factor_squared(
        seed in any::<u64>(),
        side in 1usize..9,
        factor in 1usize..5,
        ratio in 0.01f64..=1.0,
        kind in 0usize..3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = PatchGrid::new(side);
        let n = grid.patch_count();
        let attn: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let strategy = match kind {
            0 => SelectionStrategy::attention_map(ratio),
            1 => SelectionStrategy::random(seed, ratio),
            _ => SelectionStrategy::center(ratio),
        };
        let lr = build_lr_mask(&attn, grid, &strategy, &mut rng).unwrap();
        prop_assert_eq!(lr.len(), strategy.budget(n));
        prop_assert!(lr.indices.windows(2).all(|p| p[0] < p[1]));
        let hr = upsample_mask(&lr, factor).unwrap();
        prop_assert_eq!(hr.len(), lr.len() * factor * factor);
        let hr_side = side * factor;
        for &i in &hr.indices {
            let parent = (i / hr_side / factor) * side + (i % hr_side) / factor;
            prop_assert!(lr.indices.contains(&parent));
        }
    }

    #[test]
    fn layer_cost_grows_with_m(a in 0usize..256, b in 0usize..256) {
        let (lo, hi) = (a.min(b), a.max(b));
        let c_lo = flex_layer_flops(&layer(lo));
        let c_hi = flex_layer_flops(&layer(hi));
        prop_assert!(attention_core(&c_lo).total() <= attention_core(&c_hi).total());
        prop_assert!(total(&c_lo).total() <= total(&c_hi).total());
    }
}
