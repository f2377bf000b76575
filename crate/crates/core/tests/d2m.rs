use g3d_core::attention::{ffn_value, FfnParams};
use g3d_core::d2m::{
    coarse_decouple_value, d2m_forward_value, inverted_attention_value,
    reverse_cross_attention_value, D2MConfig, D2MParams, SimilarityMode,
};
use g3d_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup(m: usize, mode: SimilarityMode, seed: u64) -> (Tensor<f64>, D2MParams<Tensor<f64>>) {
    let cfg = D2MConfig {
        queries: m,
        width: 8,
        heads: 2,
        ffn_hidden: 12,
        similarity: mode,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = D2MParams::init(&cfg, &mut rng).unwrap();
    (Tensor::uniform(vec![5, 8], 1.0, &mut rng), p)
}

#[test]
fn swapping_branch_parameters_swaps_outputs() {
    for mode in [SimilarityMode::ScaledDot, SimilarityMode::Cosine] {
        for seed in 0..10 {
            let (text, p) = setup(3, mode, seed);
            let (a2, a3) = d2m_forward_value(&text, &p).unwrap();
            let (b2, b3) = d2m_forward_value(&text, &p.swap_branches()).unwrap();
            assert_eq!(a2, b3);
            assert_eq!(a3, b2);
        }
    }
}

#[test]
fn single_query_reduces_to_residual_ffn() {
    for mode in [SimilarityMode::ScaledDot, SimilarityMode::Cosine] {
        let (text, p) = setup(1, mode, 4);
        let c = coarse_decouple_value(&text, &p).unwrap();
        let (t2, t3) = d2m_forward_value(&text, &p).unwrap();
        let closed =
            |q: &Tensor<f64>, f: &FfnParams<Tensor<f64>>| q.add(&ffn_value(q, f).unwrap()).unwrap();
        assert!(
            t2.max_abs_diff(&closed(&c.coarse_2d, &p.refine_ffn_2d))
                .unwrap()
                < 1e-12
        );
        assert!(
            t3.max_abs_diff(&closed(&c.coarse_3d, &p.refine_ffn_3d))
                .unwrap()
                < 1e-12
        );
    }
}

/// q = [[1, 2], [0, 1]], k = [[1, 0], [1, 1]]: q·kᵀ = [[1, 3], [0, 1]].
#[test]
fn two_by_two_hand_case() {
    let q = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
    let k = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
    let r2 = 2f64.sqrt();
    let softmax2 = |a: f64, b: f64| [a.exp() / (a.exp() + b.exp()), b.exp() / (a.exp() + b.exp())];
    let row0 = softmax2(1.0 - 1.0 / r2, 1.0 - 3.0 / r2);
    let row1 = softmax2(1.0, 1.0 - 1.0 / r2);
    let w = inverted_attention_value(&q, &k, SimilarityMode::ScaledDot).unwrap();
    let hand = Tensor::from_rows(&[row0.to_vec(), row1.to_vec()]).unwrap();
    assert!(w.max_abs_diff(&hand).unwrap() < 1e-12);

    // identity refinement: out = q + W·q
    let out =
        reverse_cross_attention_value(&q, &k, &FfnParams::identity(2), SimilarityMode::ScaledDot)
            .unwrap();
    let hand_out = Tensor::from_rows(&[
        vec![1.0 + row0[0], 2.0 + 2.0 * row0[0] + row0[1]],
        vec![row1[0], 1.0 + 2.0 * row1[0] + row1[1]],
    ])
    .unwrap();
    assert!(out.max_abs_diff(&hand_out).unwrap() < 1e-12);

    // cosine: |q0| = √5, |q1| = 1, |k0| = 1, |k1| = √2
    let cos = [[1.0 / 5f64.sqrt(), 3.0 / 10f64.sqrt()], [0.0, 1.0 / r2]];
    let w = inverted_attention_value(&q, &k, SimilarityMode::Cosine).unwrap();
    let hand = Tensor::from_rows(&[
        softmax2(1.0 - cos[0][0], 1.0 - cos[0][1]).to_vec(),
        softmax2(1.0 - cos[1][0], 1.0 - cos[1][1]).to_vec(),
    ])
    .unwrap();
    assert!(w.max_abs_diff(&hand).unwrap() < 1e-12);
}

#[test]
fn inversion_favors_the_least_similar_key() {
    let q = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
    let k = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
    let w = inverted_attention_value(&q, &k, SimilarityMode::Cosine).unwrap();
    // row 0 has similarities (1, -1); row 1 is orthogonal to both keys
    let e2 = 2f64.exp();
    assert!((w.at(0, 1) - e2 / (1.0 + e2)).abs() < 1e-15);
    assert_eq!(w.row(1), &[0.5, 0.5]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn output_shape_ignores_token_count(seed in any::<u64>(), tokens in 1usize..12, m in 1usize..5) {
        let (_, p) = setup(m, SimilarityMode::ScaledDot, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let text = Tensor::uniform(vec![tokens, 8], 1.0, &mut rng);
        let (a, b) = d2m_forward_value(&text, &p).unwrap();
        prop_assert_eq!(a.shape(), &[m, 8][..]);
        prop_assert_eq!(b.shape(), &[m, 8][..]);
        prop_assert!(a.all_finite() && b.all_finite());
    }

    #[test]
    fn inverted_maps_are_distributions(seed in any::<u64>(), m in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::uniform(vec![m, 8], 3.0, &mut rng);
        let b = Tensor::uniform(vec![m, 8], 3.0, &mut rng);
        for mode in [SimilarityMode::ScaledDot, SimilarityMode::Cosine] {
            let w = inverted_attention_value(&a, &b, mode).unwrap();
            for r in 0..m {
                prop_assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
