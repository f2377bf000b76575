mod common;

use g3d_core::attention::{attention_weights, mhca_value, mhsa_value, AttentionParams};
use g3d_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn mhca_and_mhsa_match_naive_loops() {
    for seed in 0..100 {
        let (q, kv, p) = common::attention_case(seed);
        let fast = mhca_value(&q, &kv, &p).unwrap();
        let slow = common::naive_mhca(&q, &kv, &p);
        assert!(
            fast.max_abs_diff(&slow).unwrap() < 1e-10,
            "mhca seed {seed}"
        );

        let fast = mhsa_value(&kv, &p).unwrap();
        let slow = common::naive_mhca(&kv, &kv, &p);
        assert!(
            fast.max_abs_diff(&slow).unwrap() < 1e-10,
            "mhsa seed {seed}"
        );
    }
}

#[test]
fn rejects_width_not_divisible_by_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(AttentionParams::<Tensor<f64>>::init(6, 4, &mut rng).is_err());
}

fn permute_rows(t: &Tensor<f64>, order: &[usize]) -> Tensor<f64> {
    Tensor::from_rows(&order.iter().map(|&r| t.row(r).to_vec()).collect::<Vec<_>>()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>()) {
        let (q, kv, p) = common::attention_case(seed);
        for w in attention_weights(&q, &kv, &p).unwrap() {
            prop_assert_eq!(w.shape(), &[q.rows(), kv.rows()][..]);
            for r in 0..w.rows() {
                let s: f64 = w.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(w.row(r).iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn key_order_does_not_matter(seed in any::<u64>(), rot in 0usize..6) {
        let (q, kv, p) = common::attention_case(seed);
        let n = kv.rows();
        let order: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let a = mhca_value(&q, &kv, &p).unwrap();
        let b = mhca_value(&q, &permute_rows(&kv, &order), &p).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn self_attention_is_permutation_equivariant(seed in any::<u64>(), rot in 0usize..6) {
        let (_, x, p) = common::attention_case(seed);
        let n = x.rows();
        let order: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let a = permute_rows(&mhsa_value(&x, &p).unwrap(), &order);
        let b = mhsa_value(&permute_rows(&x, &order), &p).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }
}
