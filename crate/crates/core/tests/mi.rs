use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semfwi::mi::*;
use semfwi::verify::chain_rule_mi;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn bound_never_exceeds_mi(seed in 0u64..1_000_000, nz in 1usize..5, ny in 1usize..5, ns in 1usize..5, zeros in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let joint = Table3::random(nz, ny, ns, zeros, &mut rng);
        let q = Table3::random_decoder(nz, ny, ns, &mut rng);
        let mi = conditional_mi_discrete(&joint).unwrap();
        let lb = mi_lower_bound_discrete(&joint, &q).unwrap();
        prop_assert!(mi >= -1e-15);
        prop_assert!(lb <= mi + 1e-12);
        prop_assert!((mi - lb - expected_kl(&joint, &q).unwrap()).abs() <= 1e-10);
        prop_assert!((mi - chain_rule_mi(&joint)).abs() <= 1e-10);
        let tight = mi_lower_bound_discrete(&joint, &joint.posterior()).unwrap();
        prop_assert!((tight - mi).abs() <= 1e-12);
    }
}

#[test]
fn decoder_rows_must_be_distributions() {
    let joint = Table3::new(2, 1, 1, vec![0.5, 0.5]).unwrap();
    let q = Table3::new(2, 1, 1, vec![0.6, 0.6]).unwrap();
    assert!(matches!(mi_lower_bound_discrete(&joint, &q), Err(semfwi::Error::NotNormalized(_))));
    let bad = Table3::new(2, 1, 1, vec![0.5]);
    assert!(bad.is_err());
}
