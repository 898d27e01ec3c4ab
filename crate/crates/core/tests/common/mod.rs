//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use gpmpc::estimator::{EstimatorSettings, Ukf};
use gpmpc::linmodel::{discretize, ContinuousModel, DiscreteModel, StateMatrix, StateVector};
use gpmpc::mpc::BoxQp;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Matrix exponential by Taylor series with scaling and squaring.
pub fn taylor_expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let norm = m.iter().map(|v| v.abs()).fold(0.0, f64::max) * m.nrows() as f64;
    let mut s = 0u32;
    while norm / 2f64.powi(s as i32) > 0.1 {
        s += 1;
    }
    let a = m / 2f64.powi(s as i32);
    let n = m.nrows();
    let mut sum = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..30 {
        term = &term * &a / k as f64;
        sum += &term;
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

/// Textbook linear Kalman filter on the discrete model.
pub struct LinearKf {
    pub x: StateVector,
    pub p: StateMatrix,
    pub q: StateMatrix,
    pub r: f64,
    pub offset: f64,
}

impl LinearKf {
    pub fn predict(&mut self, m: &DiscreteModel, u: f64, meal: f64) {
        self.x = m.ad * self.x + m.bd * u + m.bd_meal * meal;
        self.p = m.ad * self.p * m.ad.transpose() + self.q;
    }

    pub fn update(&mut self, m: &DiscreteModel, y: f64) {
        let c = m.cd;
        let s = (c * self.p * c.transpose())[0] + self.r;
        let k = self.p * c.transpose() / s;
        let innov = y - self.offset - (c * self.x)[0];
        self.x += k * innov;
        let i_kc = StateMatrix::identity() - k * c;
        self.p = i_kc * self.p * i_kc.transpose() + k * k.transpose() * self.r;
    }
}

/// Global minimizer of a strictly convex box QP with at most one equality, by
/// visiting every assignment of free / lower / upper to each coordinate.
pub fn enumerate_qp(qp: &BoxQp) -> Option<(DVector<f64>, f64)> {
    let n = qp.f.len();
    let mut best: Option<(DVector<f64>, f64)> = None;
    for code in 0..3usize.pow(n as u32) {
        let mut state = vec![0u8; n];
        let mut c = code;
        for s in state.iter_mut() {
            *s = (c % 3) as u8;
            c /= 3;
        }
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 0).collect();
        let mut x = DVector::zeros(n);
        for i in 0..n {
            match state[i] {
                1 => x[i] = qp.lb[i],
                2 => x[i] = qp.ub[i],
                _ => {}
            }
        }
        let nf = free.len();
        let has_eq = qp.eq.is_some();
        let dim = nf + usize::from(has_eq);
        if dim > 0 {
            let mut k = DMatrix::zeros(dim, dim);
            let mut rhs = DVector::zeros(dim);
            for (a, &i) in free.iter().enumerate() {
                for (b, &j) in free.iter().enumerate() {
                    k[(a, b)] = qp.h[(i, j)];
                }
                let mut r = -qp.f[i];
                for j in 0..n {
                    if state[j] != 0 {
                        r -= qp.h[(i, j)] * x[j];
                    }
                }
                rhs[a] = r;
            }
            if let Some((row, b)) = &qp.eq {
                for (a, &i) in free.iter().enumerate() {
                    k[(a, nf)] = row[i];
                    k[(nf, a)] = row[i];
                }
                let fixed: f64 = (0..n)
                    .filter(|&j| state[j] != 0)
                    .map(|j| row[j] * x[j])
                    .sum();
                rhs[nf] = b - fixed;
            }
            let Some(sol) = k.lu().solve(&rhs) else {
                continue;
            };
            for (a, &i) in free.iter().enumerate() {
                x[i] = sol[a];
            }
        }
        let tol = 1e-9;
        if (0..n).any(|i| x[i] < qp.lb[i] - tol || x[i] > qp.ub[i] + tol) {
            continue;
        }
        if let Some((row, b)) = &qp.eq {
            if (row.dot(&x) - b).abs() > 1e-8 * (1.0 + b.abs()) {
                continue;
            }
        }
        let cost = 0.5 * x.dot(&(&qp.h * &x)) + qp.f.dot(&x) + qp.c;
        if best.as_ref().is_none_or(|(_, c)| cost < *c) {
            best = Some((x, cost));
        }
    }
    best
}

/// Random strictly convex box QP of size `n`, optionally with one equality
/// that is feasible inside the box.
pub fn random_qp(rng: &mut impl Rng, n: usize, with_eq: bool) -> BoxQp {
    let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let h = &g * g.transpose() + DMatrix::identity(n, n) * rng.random_range(0.05..1.0);
    let f = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
    let lb = DVector::from_fn(n, |_, _| rng.random_range(-2.0..0.0));
    let ub = DVector::from_fn(n, |i, _| lb[i] + rng.random_range(0.1..3.0));
    let eq = with_eq.then(|| {
        let a = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let inside = DVector::from_fn(n, |i, _| rng.random_range(lb[i]..ub[i]));
        let b = a.dot(&inside);
        (a, b)
    });
    BoxQp {
        h,
        f,
        c: rng.random_range(-1.0..1.0),
        lb,
        ub,
        eq,
    }
}

pub fn model() -> DiscreteModel {
    discretize(&ContinuousModel::nominal(0.1), 5.0).unwrap()
}

/// Runs the UKF and the reference KF side by side on one random trajectory
/// and returns the largest scaled state discrepancy.
pub fn ukf_vs_kf(seed: u64, steps: usize) -> f64 {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let settings = EstimatorSettings {
        disturbance_var: rng.random_range(0.0..0.5),
        ..Default::default()
    };
    let cfg = settings.to_config(2.0, 122.0, &m.bd_kis).unwrap();
    let ukf = Ukf::new(cfg.clone()).unwrap();
    let mut kf = LinearKf {
        x: cfg.x0,
        p: cfg.p0,
        q: cfg.q_proc,
        r: cfg.r_meas,
        offset: 122.0,
    };
    let mut est = ukf.initial_state();
    let mut x = StateVector::from_fn(|_, _| rng.random_range(-5.0..5.0));
    let mut worst: f64 = 0.0;
    for k in 0..steps {
        let u: f64 = rng.random_range(-20.0..60.0);
        let meal = if k % 50 < 3 {
            rng.random_range(0.0..4000.0)
        } else {
            0.0
        };
        let w = StateVector::from_fn(|i, _| {
            cfg.q_proc[(i, i)].sqrt() * rng.sample::<f64, _>(StandardNormal)
        });
        x = m.propagate(&x, u, 0.0, meal) + w;
        let y = 122.0 + m.output(&x) + 2.0 * rng.sample::<f64, _>(StandardNormal);

        est = ukf.predict(&est, u, meal, 0.0, &m).unwrap();
        kf.predict(&m, u, meal);
        est = ukf.update(&est, y, &m).unwrap();
        kf.update(&m, y);

        let scale = 1.0 + kf.x.amax();
        worst = worst.max((est.x_hat - kf.x).amax() / scale);
        let p_scale = 1.0 + kf.p.amax();
        worst = worst.max((est.p - kf.p).amax() / p_scale);
    }
    worst
}
