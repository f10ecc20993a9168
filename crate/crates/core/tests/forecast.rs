use inclino_core::forecast::{forecast_states, KinematicNoiseFit};
use inclino_core::model::{ModelMatrices, StateGaussian, StateLayout};
use nalgebra::{DMatrix, DVector};

fn zero_fit() -> KinematicNoiseFit {
    KinematicNoiseFit {
        sigma_alpha: 0.0,
        raw_sigma_alpha: 0.0,
        residual_norm: 0.0,
        dt_fit: 1.0,
        clamped: false,
    }
}

// one depth at 2 m: state is [qA, qB, vA, vB]
fn setup(p0: DMatrix<f64>) -> (StateLayout, ModelMatrices, StateGaussian) {
    let layout = StateLayout::new(vec![2.0]).unwrap();
    let model = ModelMatrices::kinematic(&layout, 1.0, 0.1, DMatrix::zeros(4, 4)).unwrap();
    let last = StateGaussian::new(DVector::from_vec(vec![3.0, -1.0, 0.5, 0.25]), p0, 40).unwrap();
    (layout, model, last)
}

#[test]
fn exact_start_gives_measurement_width_bands() {
    let (layout, model, last) = setup(DMatrix::zeros(4, 4));
    let b = forecast_states(&last, &layout, &zero_fit(), 1.0, 2.0, &model).unwrap();
    assert_eq!(b.predictive_obs.len(), 2);
    // R = (0.1 * 2)^2; nothing else contributes
    for (j, p) in b.predictive_obs.iter().enumerate() {
        let k = (j + 1) as f64;
        assert!((p.mean[0] - (3.0 + 0.5 * k)).abs() < 1e-12);
        assert!((p.mean[1] - (-1.0 + 0.25 * k)).abs() < 1e-12);
        assert!((p.std_dev(0) - 0.2).abs() < 1e-12);
        assert!((p.std_dev(1) - 0.2).abs() < 1e-12);
        assert!(p.covariance[(0, 1)].abs() < 1e-15);
    }
}

#[test]
fn two_steps_by_hand() {
    #[rustfmt::skip]
    let p0 = DMatrix::from_row_slice(4, 4, &[
        0.04,  0.0,   0.002,  0.0,
        0.0,   0.09,  0.0,   -0.003,
        0.002, 0.0,   0.0009, 0.0,
        0.0,  -0.003, 0.0,    0.0004,
    ]);
    let (layout, model, last) = setup(p0);
    let b = forecast_states(&last, &layout, &zero_fit(), 1.0, 2.0, &model).unwrap();
    // var(q + k v) = pqq + 2k pqv + k^2 pvv, plus R = 0.04
    let a = |k: f64| 0.04 + 2.0 * k * 0.002 + k * k * 0.0009;
    let bb = |k: f64| 0.09 - 2.0 * k * 0.003 + k * k * 0.0004;
    for (j, p) in b.predictive_obs.iter().enumerate() {
        let k = (j + 1) as f64;
        assert!((p.covariance[(0, 0)] - (a(k) + 0.04)).abs() < 1e-14);
        assert!((p.covariance[(1, 1)] - (bb(k) + 0.04)).abs() < 1e-14);
    }
    let s = &b.states[1];
    // cov(q + 2v, v) = pqv + 2 pvv
    assert!((s.covariance[(0, 2)] - (0.002 + 2.0 * 0.0009)).abs() < 1e-14);
    assert!((s.covariance[(2, 2)] - 0.0009).abs() < 1e-14);
    assert!((s.covariance[(1, 3)] - (-0.003 + 2.0 * 0.0004)).abs() < 1e-14);
}
