//! Filter and smoother against direct conditioning of the stacked Gaussian.

use chrono::{TimeZone, Utc};
use inclino_core::filter::{kalman_forward, rts_smooth};
use inclino_core::grid::{remap, GriddedObservations, Observation};
use inclino_core::model::{ModelMatrices, StateGaussian, StateLayout};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Joint {
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
    log_likelihood: f64,
}

fn power(f: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    (0..k).fold(DMatrix::identity(f.nrows(), f.ncols()), |acc, _| f * acc)
}

/// Posterior of every state given all observations, computed in one shot.
fn condition_stacked(
    m0: &DVector<f64>,
    p0: &DMatrix<f64>,
    f: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    obs: &[Option<(Vec<f64>, Vec<bool>)>],
) -> Joint {
    let n = m0.len();
    let m = r.nrows();
    let t = obs.len();
    let mut mu = DVector::zeros(n * t);
    let mut sigma = DMatrix::zeros(n * t, n * t);
    for i in 0..t {
        mu.rows_mut(i * n, n).copy_from(&(power(f, i) * m0));
        for j in 0..t {
            let mut c = power(f, i) * p0 * power(f, j).transpose();
            for l in 1..=i.min(j) {
                c += power(f, i - l) * q * power(f, j - l).transpose();
            }
            sigma.view_mut((i * n, j * n), (n, n)).copy_from(&c);
        }
    }
    // stacked rows (step, row) that are observed
    let mut picks = Vec::new();
    let mut z = Vec::new();
    for (k, o) in obs.iter().enumerate() {
        if let Some((values, mask)) = o {
            for row in 0..m {
                if mask[row] {
                    picks.push((k, row));
                    z.push(values[row]);
                }
            }
        }
    }
    let p = picks.len();
    let mut a = DMatrix::zeros(p, n * t);
    let mut rb = DMatrix::zeros(p, p);
    for (i, &(k, row)) in picks.iter().enumerate() {
        a[(i, k * n + row)] = 1.0;
        for (j, &(k2, row2)) in picks.iter().enumerate() {
            if k == k2 {
                rb[(i, j)] = r[(row, row2)];
            }
        }
    }
    let z = DVector::from_vec(z);
    let s = &a * &sigma * a.transpose() + rb;
    let s_inv = s.clone().try_inverse().unwrap();
    let gain = &sigma * a.transpose() * &s_inv;
    let resid = &z - &a * &mu;
    let post_mu = &mu + &gain * &resid;
    let post_sigma = &sigma - &gain * &a * &sigma;
    let log_likelihood = -0.5
        * (p as f64 * (2.0 * std::f64::consts::PI).ln()
            + s.determinant().ln()
            + (resid.transpose() * &s_inv * &resid)[(0, 0)]);
    Joint {
        means: (0..t)
            .map(|k| post_mu.rows(k * n, n).into_owned())
            .collect(),
        covs: (0..t)
            .map(|k| post_sigma.view((k * n, k * n), (n, n)).into_owned())
            .collect(),
        log_likelihood,
    }
}

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-300)
}

fn grid_of(obs: &[Option<(Vec<f64>, Vec<bool>)>], dt: f64) -> GriddedObservations {
    let readings: Vec<(f64, Observation)> = obs
        .iter()
        .enumerate()
        .filter_map(|(k, o)| {
            o.as_ref().map(|(v, mask)| {
                (
                    k as f64 * dt,
                    Observation::masked(DVector::from_vec(v.clone()), mask.clone()).unwrap(),
                )
            })
        })
        .collect();
    remap(
        Utc.with_ymd_and_hms(2022, 6, 1, 0, 0, 0).unwrap(),
        &readings,
        dt,
    )
    .unwrap()
}

type Steps = Vec<Option<(Vec<f64>, Vec<bool>)>>;

fn random_instance(rng: &mut ChaCha8Rng) -> (ModelMatrices, StateGaussian, Steps) {
    let n_depths = rng.random_range(1..=2);
    let steps = rng.random_range(2..=6);
    let dt = rng.random_range(0.25..2.0);
    let layout = StateLayout::new((1..=n_depths).map(|d| d as f64 * 1.5).collect()).unwrap();
    let dim = layout.dim_state();
    let b = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-0.3..0.3));
    let q = &b * b.transpose() + DMatrix::identity(dim, dim) * 0.05;
    let model = ModelMatrices::kinematic(&layout, dt, rng.random_range(0.1..0.6), q).unwrap();
    let c = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-0.5..0.5));
    let p0 = &c * c.transpose() + DMatrix::identity(dim, dim);
    let m0 = DVector::from_fn(dim, |_, _| rng.random_range(-2.0..2.0));
    let prior = StateGaussian::new(m0, p0, 0).unwrap();
    let m = layout.dim_obs();
    let obs = (0..steps)
        .map(|k| {
            // first and last steps observed so the grid spans all steps
            if k != 0 && k != steps - 1 && rng.random_bool(0.25) {
                return None;
            }
            let mut mask: Vec<bool> = (0..m).map(|_| rng.random_bool(0.8)).collect();
            mask[0] = true;
            Some(((0..m).map(|_| rng.random_range(-3.0..3.0)).collect(), mask))
        })
        .collect();
    (model, prior, obs)
}

#[test]
fn smoother_matches_stacked_conditioning() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let (model, prior, obs) = random_instance(&mut rng);
        let grid = grid_of(&obs, model.dt);
        assert_eq!(grid.len(), obs.len());
        let trace = kalman_forward(&grid, &model, &prior, None).unwrap();
        let smoothed = rts_smooth(&trace, &model).unwrap();
        let joint = condition_stacked(
            &prior.mean,
            &prior.covariance,
            &model.f,
            &model.q,
            &model.r,
            &obs,
        );
        for k in 0..obs.len() {
            let s = &smoothed.states[k];
            let em = (&s.mean - &joint.means[k]).amax() / joint.means[k].amax().max(1e-300);
            assert!(em <= 1e-8, "mean at step {k}: {em:e}");
            let ec = rel_err(&s.covariance, &joint.covs[k]);
            assert!(ec <= 1e-8, "covariance at step {k}: {ec:e}");
        }
        let ell = (trace.log_likelihood - joint.log_likelihood).abs()
            / joint.log_likelihood.abs().max(1.0);
        assert!(
            ell <= 1e-8,
            "log-likelihood {} vs {}",
            trace.log_likelihood,
            joint.log_likelihood
        );
    }
}

#[test]
fn filtered_state_matches_conditioning_on_prefix() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let (model, prior, obs) = random_instance(&mut rng);
        let grid = grid_of(&obs, model.dt);
        let trace = kalman_forward(&grid, &model, &prior, None).unwrap();
        for k in 0..obs.len() {
            let joint = condition_stacked(
                &prior.mean,
                &prior.covariance,
                &model.f,
                &model.q,
                &model.r,
                &obs[..=k],
            );
            let filt = trace.steps[k].filtered();
            assert!(rel_err(&filt.covariance, &joint.covs[k]) <= 1e-8);
            assert!((&filt.mean - &joint.means[k]).amax() <= 1e-8 * joint.means[k].amax().max(1.0));
        }
    }
}

#[test]
fn zero_process_noise_matches_batch_least_squares() {
    // with Q = 0 every state is F^k x_0, so the smoother reduces to a
    // regularised least-squares fit of the initial state
    let layout = StateLayout::new(vec![2.0]).unwrap();
    let dt = 0.5;
    let model = ModelMatrices::kinematic(&layout, dt, 0.2, DMatrix::zeros(4, 4)).unwrap();
    let p0 = DMatrix::from_diagonal(&DVector::from_vec(vec![9.0, 4.0, 0.5, 0.25]));
    let m0 = DVector::from_vec(vec![0.3, -0.1, 0.0, 0.02]);
    let prior = StateGaussian::new(m0.clone(), p0.clone(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let obs: Vec<Option<(Vec<f64>, Vec<bool>)>> = (0..8)
        .map(|k| {
            let t = k as f64 * dt;
            Some((
                vec![
                    0.4 + 0.2 * t + rng.random_range(-0.4..0.4),
                    -0.2 + 0.05 * t + rng.random_range(-0.4..0.4),
                ],
                vec![true, true],
            ))
        })
        .collect();
    let grid = grid_of(&obs, dt);
    let trace = kalman_forward(&grid, &model, &prior, None).unwrap();
    let smoothed = rts_smooth(&trace, &model).unwrap();

    let r_inv = model.r.clone().try_inverse().unwrap();
    let p0_inv = p0.clone().try_inverse().unwrap();
    let mut info = p0_inv.clone();
    let mut rhs = &p0_inv * &m0;
    for (k, o) in obs.iter().enumerate() {
        let (v, _) = o.as_ref().unwrap();
        let a = &model.h * power(&model.f, k);
        info += a.transpose() * &r_inv * &a;
        rhs += a.transpose() * &r_inv * DVector::from_vec(v.clone());
    }
    let cov0 = info.try_inverse().unwrap();
    let x0 = &cov0 * rhs;
    for (k, s) in smoothed.states.iter().enumerate() {
        let fk = power(&model.f, k);
        let mean = &fk * &x0;
        let cov = &fk * &cov0 * fk.transpose();
        assert!(
            (&s.mean - &mean).amax() <= 1e-8 * mean.amax().max(1.0),
            "step {k}"
        );
        assert!(rel_err(&s.covariance, &cov) <= 1e-8, "step {k}");
        // all smoothed states lie on one kinematic line
        if k > 0 {
            let prev = &smoothed.states[k - 1].mean;
            assert!((&s.mean - &model.f * prev).amax() <= 1e-8 * s.mean.amax().max(1.0));
        }
    }
}
