use pixguide::gradcheck::{composition_fixture, composition_trial, op_cases};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_matches_finite_differences() {
    for case in op_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let worst = (0..100)
            .map(|_| (case.trial)(&mut rng).unwrap())
            .fold(0.0f64, f64::max);
        assert!(
            worst < 1e-5,
            "{}: worst relative error {worst:e}",
            case.name
        );
    }
}

#[test]
fn unet_and_classifier_composition_matches_finite_differences() {
    let (net, clf) = composition_fixture(3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let worst = (0..100)
        .map(|_| composition_trial(&net, &clf, &mut rng).unwrap())
        .fold(0.0f64, f64::max);
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}
