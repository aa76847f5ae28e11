mod common;

use proptest::prelude::*;
use wcond::adapters::*;
use wcond::linalg::{expm, singular_values};
use wcond::spectral::{entropy_of_spectrum, stable_rank};
use wcond::Matrix;

fn matrix(max: usize) -> impl Strategy<Value = Matrix> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-10.0f64..10.0, r * c).prop_map(move |d| Matrix::from_vec(r, c, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn singular_values_match_nalgebra(a in matrix(12)) {
        let ours = singular_values(&a).unwrap();
        let theirs = common::na_singular_values(&a);
        let scale = theirs[0].max(1e-300);
        for (x, y) in ours.iter().zip(&theirs) {
            prop_assert!((x - y).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn stable_rank_bounded_by_rank(a in matrix(10)) {
        prop_assume!(a.frobenius_norm() > 1e-6);
        let sr = stable_rank(&a).unwrap();
        prop_assert!(sr >= 1.0 - 1e-12);
        prop_assert!(sr <= a.rows().min(a.cols()) as f64 + 1e-9);
    }

    #[test]
    fn entropy_within_log_count(s in proptest::collection::vec(0.0f64..5.0, 1..20)) {
        prop_assume!(s.iter().any(|&v| v > 1e-3));
        let h = entropy_of_spectrum(&s).unwrap();
        prop_assert!(h >= -1e-15 && h <= (s.len() as f64).ln() + 1e-12);
        prop_assert!((h - common::oracle_entropy(&s)).abs() <= 1e-12);
    }

    #[test]
    fn expm_of_skew_is_orthogonal(d in proptest::collection::vec(-1.0f64..1.0, 16)) {
        let g = Matrix::from_vec(4, 4, d).unwrap();
        let j = g.sub(&g.transpose()).unwrap();
        let q = expm(&j).unwrap();
        let gram = q.matmul_tn(&q).unwrap();
        prop_assert!(gram.max_abs_diff(&Matrix::identity(4)).unwrap() <= 1e-13);
    }

    #[test]
    fn merged_weight_matches_definition(
        method_idx in 0usize..6, m in 2usize..12, n in 2usize..12, r in 1usize..4, rp in 1usize..3, seed in any::<u64>()
    ) {
        let method = AdapterMethod::ALL[method_idx];
        let cfg = AdapterConfig::new(method, r.min(m).min(n)).with_rotation_rank(rp.min(n));
        let state = common::random_state(&cfg, m, n, seed);
        let ours = common::to_na(&merged_weight(&state, &cfg).unwrap());
        let oracle = common::oracle_merged(&state, &cfg);
        prop_assert!((&ours - &oracle).norm() <= 1e-12 * oracle.norm().max(1.0));
    }

    #[test]
    fn skew_generator_is_skew(n in 2usize..16, rp in 1usize..4, seed in any::<u64>()) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let dp = common::gauss(n, rp, 1.0, &mut rng);
        let cp = common::gauss(n, rp, 1.0, &mut rng);
        let s = sora_skew(&dp, &cp).unwrap();
        prop_assert!(s.skew_defect() == 0.0);
        prop_assert!(s.frobenius_norm() <= 2.0 * dp.frobenius_norm() * cp.frobenius_norm() * (1.0 + 1e-14));
    }
}
