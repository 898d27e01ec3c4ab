//! Gaussian-process regression of the sensitivity disturbance.
//!
//! The covariance is a periodic kernel (one-day period) damped by an
//! exponential kernel that lets old data fade. Observation noise `σ_n²` sits on
//! the training diagonal only. The Cholesky factor is maintained
//! incrementally: appending a sample and dropping the oldest one both cost
//! `O(n²)`, which keeps a week-long window affordable at every control step.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelParams {
    /// Signal scale.
    pub theta: f64,
    /// Period, min.
    pub lambda: f64,
    /// Periodic length scale.
    pub l_p: f64,
    /// Fading length scale, min.
    pub l_e: f64,
    /// Observation noise standard deviation.
    pub sigma_n: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams {
            theta: 0.071,
            lambda: 1440.0,
            l_p: 0.549,
            l_e: 4.1e4,
            sigma_n: 0.2,
        }
    }
}

impl KernelParams {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.theta, self.lambda, self.l_p, self.l_e, self.sigma_n]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "kernel hyperparameters must be positive: {self:?}"
            )))
        }
    }

    pub fn prior_variance(&self) -> f64 {
        self.theta * self.theta
    }
}

pub fn kernel_periodic(t: f64, t2: f64, l_p: f64, lambda: f64) -> f64 {
    let s = (PI * (t - t2) / lambda).sin();
    (-2.0 * s * s / (l_p * l_p)).exp()
}

pub fn kernel_exponential(t: f64, t2: f64, l_e: f64) -> f64 {
    (-(t - t2).abs() / l_e).exp()
}

/// Composite covariance; `same_point` adds the observation noise.
pub fn kernel_composite(t: f64, t2: f64, same_point: bool, p: &KernelParams) -> f64 {
    let k = p.prior_variance()
        * kernel_exponential(t, t2, p.l_e)
        * kernel_periodic(t, t2, p.l_p, p.lambda);
    if same_point {
        k + p.sigma_n * p.sigma_n
    } else {
        k
    }
}

#[derive(Debug, Clone)]
pub struct GpModel {
    params: KernelParams,
    train_t: Vec<f64>,
    train_y: Vec<f64>,
    /// Lower factor of `K + (σ_n² + jitter) I`, stored by rows.
    chol: Vec<Vec<f64>>,
    jitter: f64,
    alpha: Vec<f64>,
}

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

impl GpModel {
    /// Prior-only model.
    pub fn new(params: KernelParams) -> Result<Self> {
        params.validate()?;
        Ok(GpModel {
            params,
            train_t: Vec::new(),
            train_y: Vec::new(),
            chol: Vec::new(),
            jitter: 0.0,
            alpha: Vec::new(),
        })
    }

    /// Factorizes the full training covariance over `points` `(t, y)`.
    pub fn fit<I>(points: I, params: KernelParams) -> Result<Self>
    where
        I: IntoIterator<Item = (f64, f64)>,
    {
        let mut gp = Self::new(params)?;
        for (t, y) in points {
            if !(t.is_finite() && y.is_finite()) {
                return Err(Error::Domain(format!(
                    "non-finite training sample ({t}, {y})"
                )));
            }
            gp.train_t.push(t);
            gp.train_y.push(y);
        }
        gp.refactor(0.0)?;
        Ok(gp)
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.train_t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_t.is_empty()
    }

    pub fn train_t(&self) -> &[f64] {
        &self.train_t
    }

    pub fn train_y(&self) -> &[f64] {
        &self.train_y
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    fn cov(&self, i: usize, j: usize) -> f64 {
        kernel_composite(self.train_t[i], self.train_t[j], false, &self.params)
    }

    fn diag_extra(&self) -> f64 {
        self.params.sigma_n * self.params.sigma_n + self.jitter
    }

    /// Noise-free training covariance `K`.
    pub fn kernel_matrix(&self) -> DMatrix<f64> {
        let n = self.len();
        DMatrix::from_fn(n, n, |i, j| self.cov(i, j))
    }

    /// Dense copy of the cached factor.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        let n = self.len();
        DMatrix::from_fn(n, n, |i, j| if j <= i { self.chol[i][j] } else { 0.0 })
    }

    /// Rebuilds the factor from scratch, escalating the jitter on failure.
    fn refactor(&mut self, min_jitter: f64) -> Result<()> {
        let mut jitter = min_jitter;
        loop {
            self.jitter = jitter;
            if self.try_factor() {
                self.solve_alpha();
                return Ok(());
            }
            jitter = if jitter == 0.0 {
                JITTER_START
            } else {
                jitter * 10.0
            };
            if jitter > JITTER_MAX * (1.0 + 1e-9) {
                return Err(Error::Numerical(
                    "training covariance not positive definite after maximal jitter".into(),
                ));
            }
        }
    }

    fn try_factor(&mut self) -> bool {
        let n = self.len();
        let extra = self.diag_extra();
        let mut l: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let mut row = vec![0.0; i + 1];
            for j in 0..i {
                let s = self.cov(i, j) - dot(&row[..j], &l[j][..j]);
                row[j] = s / l[j][j];
            }
            let d2 = self.cov(i, i) + extra - dot(&row[..i], &row[..i]);
            if !(d2 > 0.0) {
                return false;
            }
            row[i] = d2.sqrt();
            l.push(row);
        }
        self.chol = l;
        true
    }

    /// `L z = b`.
    fn forward(&self, b: &[f64]) -> Vec<f64> {
        let mut z = b.to_vec();
        for i in 0..z.len() {
            let row = &self.chol[i];
            let s = z[i] - dot(&row[..i], &z[..i]);
            z[i] = s / row[i];
        }
        z
    }

    /// `Lᵀ x = z`.
    fn backward(&self, z: &[f64]) -> Vec<f64> {
        let mut x = z.to_vec();
        for i in (0..x.len()).rev() {
            x[i] /= self.chol[i][i];
            let xi = x[i];
            for (k, lik) in self.chol[i][..i].iter().enumerate() {
                x[k] -= lik * xi;
            }
        }
        x
    }

    fn solve_alpha(&mut self) {
        let z = self.forward(&self.train_y);
        self.alpha = self.backward(&z);
    }

    /// Appends one training sample.
    pub fn push(&mut self, t: f64, y: f64) -> Result<()> {
        if !(t.is_finite() && y.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite training sample ({t}, {y})"
            )));
        }
        let kvec: Vec<f64> = self
            .train_t
            .iter()
            .map(|&ti| kernel_composite(ti, t, false, &self.params))
            .collect();
        self.train_t.push(t);
        self.train_y.push(y);
        let mut row = self.forward(&kvec);
        let d2 = self.params.prior_variance() + self.diag_extra() - dot(&row, &row);
        if d2 > 0.0 {
            row.push(d2.sqrt());
            self.chol.push(row);
            self.solve_alpha();
            Ok(())
        } else {
            let j = self.jitter.max(JITTER_START);
            self.refactor(j)
        }
    }

    /// Drops the oldest training sample via a rank-one update of the trailing
    /// factor.
    pub fn pop_front(&mut self) -> Result<()> {
        if self.is_empty() {
            return Ok(());
        }
        self.train_t.remove(0);
        self.train_y.remove(0);
        let old = std::mem::take(&mut self.chol);
        let mut v: Vec<f64> = old.iter().skip(1).map(|r| r[0]).collect();
        let mut l: Vec<Vec<f64>> = old
            .into_iter()
            .skip(1)
            .map(|mut r| {
                r.remove(0);
                r
            })
            .collect();
        let m = l.len();
        for k in 0..m {
            let lkk = l[k][k];
            let r = lkk.hypot(v[k]);
            let c = r / lkk;
            let s = v[k] / lkk;
            l[k][k] = r;
            for i in k + 1..m {
                l[i][k] = (l[i][k] + s * v[i]) / c;
                v[i] = c * v[i] - s * l[i][k];
            }
        }
        if l.iter()
            .enumerate()
            .all(|(i, r)| r[i].is_finite() && r[i] > 0.0)
        {
            self.chol = l;
            self.solve_alpha();
            Ok(())
        } else {
            let j = self.jitter;
            self.refactor(j)
        }
    }

    fn cross(&self, tq: f64) -> Vec<f64> {
        self.train_t
            .iter()
            .map(|&ti| kernel_composite(tq, ti, false, &self.params))
            .collect()
    }

    /// Posterior means only.
    pub fn predict_mean(&self, queries: &[f64]) -> Vec<f64> {
        queries
            .iter()
            .map(|&tq| dot(&self.cross(tq), &self.alpha))
            .collect()
    }

    /// Posterior means and latent-function variances at `queries`.
    pub fn predict(&self, queries: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let prior = self.params.prior_variance();
        queries
            .iter()
            .map(|&tq| {
                let k = self.cross(tq);
                let mean = dot(&k, &self.alpha);
                let v = self.forward(&k);
                let var = (prior - dot(&v, &v)).clamp(0.0, prior);
                (mean, var)
            })
            .unzip()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Prediction trace `t_min,mean,variance`.
pub fn write_prediction_csv(path: &Path, t: &[f64], mean: &[f64], var: &[f64]) -> Result<()> {
    let mut out = String::from("t_min,mean,variance\n");
    for ((t, m), v) in t.iter().zip(mean).zip(var) {
        out.push_str(&format!("{t:.16e},{m:.16e},{v:.16e}\n"));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn periodic_kernel_values() {
        let p = KernelParams::default();
        assert_eq!(kernel_periodic(100.0, 100.0, p.l_p, p.lambda), 1.0);
        assert_abs_diff_eq!(
            kernel_periodic(0.0, 1440.0, p.l_p, p.lambda),
            1.0,
            epsilon = 1e-12
        );
        let half = kernel_periodic(0.0, 720.0, 0.549, 1440.0);
        assert_abs_diff_eq!(half, (-2.0 / (0.549f64 * 0.549)).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(half, 1.31e-3, epsilon = 0.01e-3);
    }

    #[test]
    fn exponential_kernel_values() {
        assert_eq!(kernel_exponential(5.0, 5.0, 4.1e4), 1.0);
        assert_abs_diff_eq!(
            kernel_exponential(0.0, 4320.0, 4.1e4),
            0.900,
            epsilon = 1e-3
        );
        let mut prev = 1.0;
        for d in 1..50 {
            let k = kernel_exponential(0.0, d as f64 * 300.0, 4.1e4);
            assert!(k < prev);
            prev = k;
        }
    }

    #[test]
    fn composite_kernel_values() {
        let p = KernelParams::default();
        assert_abs_diff_eq!(
            kernel_composite(3.0, 3.0, true, &p),
            0.045041,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            kernel_composite(3.0, 3.0, false, &p),
            0.005041,
            epsilon = 1e-15
        );
        assert!(kernel_composite(0.0, 333.0, false, &p) <= 0.045041);
    }

    #[test]
    fn empty_model_is_prior() {
        let gp = GpModel::fit(std::iter::empty(), KernelParams::default()).unwrap();
        let (m, v) = gp.predict(&[0.0, 100.0, 5000.0]);
        assert!(m.iter().all(|x| *x == 0.0));
        assert!(v.iter().all(|x| (*x - 0.005041).abs() < 1e-15));
    }

    #[test]
    fn single_point_closed_form() {
        let p = KernelParams::default();
        let gp = GpModel::fit([(60.0, 0.3)], p).unwrap();
        let (m, _) = gp.predict(&[60.0]);
        let expect = 0.3 * 0.005041 / 0.045041;
        assert_abs_diff_eq!(m[0], expect, epsilon = 1e-14);
    }

    #[test]
    fn interpolation_limit() {
        let p = KernelParams {
            sigma_n: 1e-5,
            ..Default::default()
        };
        let pts: Vec<_> = (0..20)
            .map(|i| (i as f64 * 37.0, 0.05 * (i as f64).sin()))
            .collect();
        let gp = GpModel::fit(pts.iter().copied(), p).unwrap();
        let (m, _) = gp.predict(&[pts[7].0]);
        assert_abs_diff_eq!(m[0], pts[7].1, epsilon = 1e-4);
    }

    #[test]
    fn incremental_matches_batch() {
        let p = KernelParams::default();
        let pts: Vec<_> = (0..60)
            .map(|i| (i as f64 * 25.0, 0.1 * (i as f64 * 0.3).cos()))
            .collect();
        let mut inc = GpModel::new(p).unwrap();
        for &(t, y) in &pts {
            inc.push(t, y).unwrap();
        }
        for _ in 0..10 {
            inc.pop_front().unwrap();
        }
        let batch = GpModel::fit(pts[10..].iter().copied(), p).unwrap();
        assert!((inc.cholesky_factor() - batch.cholesky_factor()).amax() < 1e-10);
        let q = [1500.0, 1600.0, 2000.0];
        let (mi, vi) = inc.predict(&q);
        let (mb, vb) = batch.predict(&q);
        for k in 0..3 {
            assert_abs_diff_eq!(mi[k], mb[k], epsilon = 1e-10);
            assert_abs_diff_eq!(vi[k], vb[k], epsilon = 1e-10);
        }
        assert_eq!(inc.predict_mean(&q), mi);
    }

    #[test]
    fn rejects_bad_params() {
        let p = KernelParams {
            l_p: 0.0,
            ..Default::default()
        };
        assert!(GpModel::new(p).is_err());
        assert!(GpModel::fit([(f64::NAN, 0.0)], KernelParams::default()).is_err());
    }
}
