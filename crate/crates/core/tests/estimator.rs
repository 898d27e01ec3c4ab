mod common;

use common::{model, ukf_vs_kf};
use gpmpc::estimator::{EstimatorSettings, Ukf};
use gpmpc::linmodel::{StateMatrix, StateVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn matches_linear_kalman_filter() {
    for seed in 0..10 {
        let err = ukf_vs_kf(seed, 300);
        assert!(err < 1e-8, "seed {seed}: {err}");
    }
}

#[test]
fn exact_model_without_noise_tracks_state() {
    let m = model();
    let settings = EstimatorSettings {
        q_diag: vec![0.0; 12],
        p0_diag: Some(vec![0.0; 12]),
        disturbance_var: 0.0,
        ..Default::default()
    };
    let ukf = Ukf::new(settings.to_config(0.0, 122.0, &m.bd_kis).unwrap()).unwrap();
    let mut est = ukf.initial_state();
    let mut x = StateVector::zeros();
    for k in 0..200 {
        let u = 5.0 * (k as f64 / 20.0).sin();
        x = m.propagate(&x, u, 0.0, if k == 50 { 3000.0 } else { 0.0 });
        est = ukf
            .predict(&est, u, if k == 50 { 3000.0 } else { 0.0 }, 0.0, &m)
            .unwrap();
        est = ukf.update(&est, 122.0 + m.output(&x), &m).unwrap();
        assert!((est.x_hat - x).amax() < 1e-9 * (1.0 + x.amax()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn covariance_stays_symmetric(seed in 0u64..1000, y in 60.0f64..300.0) {
        let m = model();
        let ukf = Ukf::new(
            EstimatorSettings::default().to_config(2.0, 122.0, &m.bd_kis).unwrap(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut est = ukf.initial_state();
        for _ in 0..20 {
            est = ukf.predict(&est, rng.random_range(-20.0..50.0), 0.0, 0.0, &m).unwrap();
            est = ukf.update(&est, y + rng.random_range(-5.0..5.0), &m).unwrap();
            prop_assert_eq!(est.p, est.p.transpose());
            prop_assert!(est.p.diagonal().iter().all(|v| *v >= -1e-12));
        }
    }

    #[test]
    fn disturbance_column_enters_q(var in 0.0f64..1.0) {
        let m = model();
        let base = EstimatorSettings { disturbance_var: 0.0, ..Default::default() };
        let with = EstimatorSettings { disturbance_var: var, ..Default::default() };
        let q0 = base.to_config(2.0, 122.0, &m.bd_kis).unwrap().q_proc;
        let q1 = with.to_config(2.0, 122.0, &m.bd_kis).unwrap().q_proc;
        let expect: StateMatrix = m.bd_kis * m.bd_kis.transpose() * var;
        prop_assert!((q1 - q0 - expect).amax() < 1e-12);
    }
}
