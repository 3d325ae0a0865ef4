use proptest::prelude::*;
use waal_core::train::{
    adversarial_value, bias_coefficient, bias_coefficient_with, coefficient_consistency, hdiv_adversarial_value, mu_prime,
    prediction_loss, BiasConvention, SplitCounts,
};

#[test]
fn worked_coefficients() {
    assert!((bias_coefficient(9.0, 1.0).unwrap() - 4.0 / 81.0).abs() <= 1e-15);
    assert!((bias_coefficient(9.0, 1.0).unwrap() - 0.05).abs() <= 5e-3);
    assert_eq!(bias_coefficient(3.0, 3.0).unwrap(), 0.0);
    assert!((bias_coefficient(4.0, 0.0).unwrap() - 0.25).abs() <= 1e-15);
    assert!(bias_coefficient(0.0, 0.0).is_err());
    assert!((bias_coefficient_with(9.0, 1.0, BiasConvention::FullPool).unwrap() - 4.0 / 9.0).abs() <= 1e-15);
    assert!((mu_prime(0.01, 9.0).unwrap() - 0.009).abs() <= 1e-15);
    assert_eq!(mu_prime(0.4, 1.0).unwrap(), 0.2);
    assert!(coefficient_consistency(SplitCounts::new(1000, 9000, 1000).unwrap()).unwrap() <= 1e-12);
    assert!(coefficient_consistency(SplitCounts::new(10, 10, 10).unwrap()).unwrap() <= 1e-12);
}

#[test]
fn worked_objective_values() {
    let ln2 = 2f64.ln();
    let uniform = ndarray::arr2(&[[0.5, 0.5]]);
    assert!((prediction_loss(uniform.view(), &[1]).unwrap() - ln2).abs() <= 1e-15);
    let skew = ndarray::arr2(&[[0.25, 0.75]]);
    assert!((prediction_loss(skew.view(), &[0]).unwrap() - 1.3863).abs() <= 1e-4);
    let v = adversarial_value(&[0.8, 0.8], &[0.3, 0.3], 0.009, 0.0494).unwrap();
    assert!((v - 0.009 * (0.8 - 0.0494 * 0.3)).abs() <= 1e-15);
    assert!((v - 0.007067).abs() <= 1e-6);
    assert_eq!(adversarial_value(&[1.0], &[0.0], 0.3, 0.5).unwrap(), 0.3);
    assert!((hdiv_adversarial_value(&[0.9], &[0.2], 1.0) - 0.3285).abs() <= 1e-4);
    assert!((hdiv_adversarial_value(&[0.5], &[0.5], 1.0) - 2.0 * ln2).abs() <= 1e-12);
}

proptest! {
    #[test]
    fn consistency_holds_on_random_counts(l in 1usize..5000, u in 0usize..50_000, b in 0usize..5000) {
        prop_assume!(b <= u && u > 0);
        prop_assert!(coefficient_consistency(SplitCounts::new(l, u, b).unwrap()).unwrap() <= 1e-12);
    }

    #[test]
    fn bias_coefficient_decreases_in_alpha(gamma in 0.01..100.0f64, t1 in 0.0..1.0f64, t2 in 0.0..1.0f64) {
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        prop_assume!(hi - lo > 1e-9);
        let c_lo = bias_coefficient(gamma, lo * gamma).unwrap();
        let c_hi = bias_coefficient(gamma, hi * gamma).unwrap();
        prop_assert!(c_hi >= 0.0);
        prop_assert!(c_lo > c_hi);
    }
}
