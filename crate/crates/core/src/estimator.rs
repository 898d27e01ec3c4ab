//! Unscented Kalman filter over the discrete nominal model.
//!
//! The transition and measurement maps are the linear ones of
//! [`DiscreteModel`], so the filter reproduces a linear Kalman filter up to
//! round-off. The sigma-point machinery stays in place so a nonlinear
//! transition can be substituted without touching the callers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linmodel::{DiscreteModel, StateMatrix, StateVector, N_STATES};

const N_SIGMA: usize = 2 * N_STATES + 1;

#[derive(Debug, Clone, PartialEq)]
pub struct UkfConfig {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    pub q_proc: StateMatrix,
    /// mg²/dl².
    pub r_meas: f64,
    pub x0: StateVector,
    pub p0: StateMatrix,
    /// mg/dl offset added to `Cd x` by the measurement map.
    pub fasting_glucose: f64,
    /// Feed the learned disturbance through `Bd_kIS` in the prediction step.
    pub use_gp_disturbance: bool,
}

/// Serializable estimator settings; matrices are given by their diagonals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSettings {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    pub q_diag: Vec<f64>,
    /// Defaults to the CGM noise variance.
    pub r_meas: Option<f64>,
    /// Defaults to `q_diag`.
    pub p0_diag: Option<Vec<f64>>,
    pub use_gp_disturbance: bool,
    /// Variance of a random-walk sensitivity disturbance, added to `Q_proc`
    /// along the discretized disturbance column.
    pub disturbance_var: f64,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        // glucose subsystem (states 1–4) and the gut chain (11–12) carry the
        // unmodeled sensitivity and meal effects
        let mut q_diag = vec![1e-4; N_STATES];
        for i in [0, 1, 2, 3, 10, 11] {
            q_diag[i] = 1e-2;
        }
        EstimatorSettings {
            alpha: 1.0,
            beta: 2.0,
            kappa: 0.0,
            q_diag,
            r_meas: None,
            p0_diag: None,
            use_gp_disturbance: false,
            disturbance_var: 0.1,
        }
    }
}

impl EstimatorSettings {
    /// `bd_kis` is the discretized disturbance column that `disturbance_var`
    /// is spread along.
    pub fn to_config(
        &self,
        cgm_noise_sd: f64,
        fasting_glucose: f64,
        bd_kis: &StateVector,
    ) -> Result<UkfConfig> {
        let diag = |v: &[f64], what: &str| -> Result<StateMatrix> {
            if v.len() != N_STATES || v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::Config(format!(
                    "{what} must hold {N_STATES} non-negative values"
                )));
            }
            Ok(StateMatrix::from_diagonal(&StateVector::from_column_slice(
                v,
            )))
        };
        if !(self.disturbance_var.is_finite() && self.disturbance_var >= 0.0) {
            return Err(Error::Config("disturbance_var must be non-negative".into()));
        }
        let q_proc =
            diag(&self.q_diag, "q_diag")? + bd_kis * bd_kis.transpose() * self.disturbance_var;
        let p0 = match &self.p0_diag {
            Some(p) => diag(p, "p0_diag")?,
            None => q_proc,
        };
        let cfg = UkfConfig {
            alpha: self.alpha,
            beta: self.beta,
            kappa: self.kappa,
            q_proc,
            r_meas: self
                .r_meas
                .unwrap_or_else(|| (cgm_noise_sd * cgm_noise_sd).max(1e-6)),
            x0: StateVector::zeros(),
            p0,
            fasting_glucose,
            use_gp_disturbance: self.use_gp_disturbance,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl UkfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if self.lambda() + N_STATES as f64 <= 0.0 {
            return Err(Error::Config("n + lambda must be positive".into()));
        }
        if !(self.r_meas > 0.0 && self.r_meas.is_finite()) {
            return Err(Error::Config(
                "measurement variance must be positive".into(),
            ));
        }
        if (self.q_proc - self.q_proc.transpose()).amax() > 0.0
            || (self.p0 - self.p0.transpose()).amax() > 0.0
        {
            return Err(Error::Config("Q_proc and P0 must be symmetric".into()));
        }
        Ok(())
    }

    fn lambda(&self) -> f64 {
        self.alpha * self.alpha * (N_STATES as f64 + self.kappa) - N_STATES as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UkfState {
    pub x_hat: StateVector,
    pub p: StateMatrix,
    pub t: f64,
}

#[derive(Debug, Clone)]
pub struct Ukf {
    cfg: UkfConfig,
    spread: f64,
    wm: [f64; N_SIGMA],
    wc: [f64; N_SIGMA],
}

impl Ukf {
    pub fn new(cfg: UkfConfig) -> Result<Self> {
        cfg.validate()?;
        let n = N_STATES as f64;
        let lambda = cfg.lambda();
        let mut wm = [0.5 / (n + lambda); N_SIGMA];
        let mut wc = wm;
        wm[0] = lambda / (n + lambda);
        wc[0] = wm[0] + 1.0 - cfg.alpha * cfg.alpha + cfg.beta;
        Ok(Ukf {
            spread: n + lambda,
            cfg,
            wm,
            wc,
        })
    }

    pub fn config(&self) -> &UkfConfig {
        &self.cfg
    }

    pub fn mean_weights(&self) -> &[f64] {
        &self.wm
    }

    pub fn covariance_weights(&self) -> &[f64] {
        &self.wc
    }

    pub fn initial_state(&self) -> UkfState {
        UkfState {
            x_hat: self.cfg.x0,
            p: self.cfg.p0,
            t: 0.0,
        }
    }

    fn sigma_points(&self, state: &UkfState) -> Result<[StateVector; N_SIGMA]> {
        let scaled = state.p * self.spread;
        let root = factor_with_jitter(&scaled)?;
        let mut pts = [state.x_hat; N_SIGMA];
        for i in 0..N_STATES {
            let col = root.column(i);
            pts[1 + i] += col;
            pts[1 + N_STATES + i] -= col;
        }
        Ok(pts)
    }

    /// Time update over one sample with insulin deviation `u`, announced meal
    /// rate `meal_rate` and learned disturbance `gp_dist`. The disturbance is
    /// ignored unless the configuration enables it.
    pub fn predict(
        &self,
        state: &UkfState,
        u: f64,
        meal_rate: f64,
        gp_dist: f64,
        model: &DiscreteModel,
    ) -> Result<UkfState> {
        let dist = if self.cfg.use_gp_disturbance {
            gp_dist
        } else {
            0.0
        };
        let pts = self.sigma_points(state)?;
        let prop = pts.map(|x| model.propagate(&x, u, dist, meal_rate));
        let mean = weighted_mean(&prop, &self.wm);
        let mut p = self.cfg.q_proc;
        for (x, w) in prop.iter().zip(self.wc) {
            let d = x - mean;
            p += d * d.transpose() * w;
        }
        Ok(UkfState {
            x_hat: mean,
            p: symmetrize(p),
            t: state.t + model.ts,
        })
    }

    /// Measurement update with a CGM reading `y` (mg/dl).
    pub fn update(&self, state: &UkfState, y: f64, model: &DiscreteModel) -> Result<UkfState> {
        if !y.is_finite() {
            return Err(Error::Domain(format!("non-finite measurement {y}")));
        }
        let pts = self.sigma_points(state)?;
        let ys = pts.map(|x| self.cfg.fasting_glucose + model.output(&x));
        let x_mean = weighted_mean(&pts, &self.wm);
        let y_mean: f64 = ys.iter().zip(self.wm).map(|(v, w)| v * w).sum();
        let mut pyy = self.cfg.r_meas;
        let mut pxy = StateVector::zeros();
        for ((x, yi), w) in pts.iter().zip(ys).zip(self.wc) {
            let dy = yi - y_mean;
            pyy += w * dy * dy;
            pxy += (x - x_mean) * (w * dy);
        }
        if !(pyy > 0.0) {
            return Err(Error::Numerical(format!("innovation variance {pyy}")));
        }
        let gain = pxy / pyy;
        let x_hat = x_mean + gain * (y - y_mean);
        let p = state.p - gain * gain.transpose() * pyy;
        Ok(UkfState {
            x_hat,
            p: symmetrize(p),
            t: state.t,
        })
    }
}

fn weighted_mean(pts: &[StateVector; N_SIGMA], w: &[f64; N_SIGMA]) -> StateVector {
    pts.iter()
        .zip(w)
        .fold(StateVector::zeros(), |acc, (x, wi)| acc + x * *wi)
}

fn symmetrize(p: StateMatrix) -> StateMatrix {
    (p + p.transpose()) * 0.5
}

/// Lower Cholesky factor, escalating a diagonal jitter from 1e-12 to 1e-6 when
/// the matrix is only semidefinite.
fn factor_with_jitter(m: &StateMatrix) -> Result<StateMatrix> {
    if let Some(c) = m.cholesky() {
        return Ok(c.l());
    }
    let mut jitter = 1e-12;
    while jitter <= 1e-6 {
        if let Some(c) = (m + StateMatrix::identity() * jitter).cholesky() {
            return Ok(c.l());
        }
        jitter *= 10.0;
    }
    Err(Error::Numerical(
        "state covariance is not positive semidefinite".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linmodel::{discretize, ContinuousModel};
    use approx::assert_abs_diff_eq;

    fn setup() -> (Ukf, DiscreteModel) {
        let cfg = EstimatorSettings::default()
            .to_config(2.0, 122.0, &StateVector::zeros())
            .unwrap();
        let model = discretize(&ContinuousModel::nominal(0.1), 5.0).unwrap();
        (Ukf::new(cfg).unwrap(), model)
    }

    #[test]
    fn weights_sum_to_one() {
        for (alpha, kappa) in [(1.0, 0.0), (1e-3, 0.0), (0.5, 3.0), (1.0, -3.0)] {
            let mut cfg = EstimatorSettings::default()
                .to_config(2.0, 122.0, &StateVector::zeros())
                .unwrap();
            cfg.alpha = alpha;
            cfg.kappa = kappa;
            let ukf = Ukf::new(cfg).unwrap();
            let s: f64 = ukf.mean_weights().iter().sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_innovation_leaves_estimate() {
        let (ukf, model) = setup();
        let mut s = ukf.initial_state();
        s.x_hat[0] = 12.0;
        s.x_hat[3] = -1.5;
        let y = 122.0 + model.output(&s.x_hat);
        let post = ukf.update(&s, y, &model).unwrap();
        assert!((post.x_hat - s.x_hat).amax() < 1e-12);
        assert!(post.p.trace() <= s.p.trace());
    }

    #[test]
    fn degenerate_covariance_follows_model() {
        let mut cfg = EstimatorSettings::default()
            .to_config(0.0, 122.0, &StateVector::zeros())
            .unwrap();
        cfg.q_proc = StateMatrix::zeros();
        cfg.p0 = StateMatrix::zeros();
        let ukf = Ukf::new(cfg).unwrap();
        let model = discretize(&ContinuousModel::nominal(0.1), 5.0).unwrap();
        let mut s = ukf.initial_state();
        let mut x = StateVector::zeros();
        for k in 0..100 {
            let u = 10.0 * ((k as f64) * 0.1).sin();
            let meal = if k == 10 { 1000.0 } else { 0.0 };
            x = model.propagate(&x, u, 0.0, meal);
            s = ukf.predict(&s, u, meal, 0.0, &model).unwrap();
            s = ukf.update(&s, 122.0 + model.output(&x), &model).unwrap();
            assert!((s.x_hat - x).amax() < 1e-6 * (1.0 + x.amax()));
        }
    }

    #[test]
    fn disturbance_flag() {
        let (ukf, model) = setup();
        let s = ukf.initial_state();
        let off = ukf.predict(&s, 0.0, 0.0, 1.0, &model).unwrap();
        assert!(off.x_hat.amax() < 1e-15);
        let mut cfg = ukf.config().clone();
        cfg.use_gp_disturbance = true;
        let on = Ukf::new(cfg)
            .unwrap()
            .predict(&s, 0.0, 0.0, 1.0, &model)
            .unwrap();
        assert!((on.x_hat - model.bd_kis).amax() < 1e-12);
    }

    #[test]
    fn covariance_stays_symmetric() {
        let (ukf, model) = setup();
        let mut s = ukf.initial_state();
        for k in 0..200 {
            s = ukf.predict(&s, 1.0, 0.0, 0.0, &model).unwrap();
            s = ukf.update(&s, 122.0 + (k % 7) as f64, &model).unwrap();
            assert_eq!(s.p, s.p.transpose());
            assert!(s.p.diagonal().min() >= -1e-12);
        }
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = EstimatorSettings::default()
            .to_config(2.0, 122.0, &StateVector::zeros())
            .unwrap();
        cfg.r_meas = 0.0;
        assert!(Ukf::new(cfg).is_err());
        let mut s = EstimatorSettings::default();
        s.q_diag.pop();
        assert!(s.to_config(2.0, 122.0, &StateVector::zeros()).is_err());
    }
}
