//! Linearized 12-state insulin-glucose model.
//!
//! States are deviations from the basal linearization point. State 1 is the
//! blood glucose deviation in mg/dl, states 9–10 form the subcutaneous insulin
//! route fed by the pump and states 11–12 form the gastro-intestinal chain that
//! feeds glucose into state 1. The insulin sensitivity `k_IS` scales a single
//! entry of `A`: row 4, column 5 (1-based).

use nalgebra::{DMatrix, RowSVector, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_STATES: usize = 12;

pub type StateVector = SVector<f64, N_STATES>;
pub type StateMatrix = SMatrix<f64, N_STATES, N_STATES>;
pub type OutputRow = RowSVector<f64, N_STATES>;

/// Zero-based row of the sensitivity-dependent entry.
pub const IS_ROW: usize = 3;
/// Zero-based column of the sensitivity-dependent entry.
pub const IS_COL: usize = 4;
/// Zero-based index of the gut compartment that feeds blood glucose.
pub const GUT_OUT: usize = 10;
/// Zero-based index of the gut compartment that receives ingested carbohydrate.
pub const GUT_IN: usize = 11;

#[rustfmt::skip]
const A_NOMINAL: [[f64; N_STATES]; N_STATES] = [
    [-0.70,    0.32,  0.38,  0.0,   0.0,     0.0,    0.0,    0.0,   0.0,    0.0,    0.024,  0.0],
    [ 0.50,   -0.56,  0.0,   0.0,  -0.010,   5.11,  -5.63,   5.62,  0.0,   -0.030,  0.0,    0.0],
    [ 1.45,    0.0,  -2.75,  1.30,  0.0,     0.0,    0.0,    0.0,   0.0,    0.0,    0.0,    0.0],
    [ 0.0,     0.0,   0.20, -0.20, -0.025,   0.0,    0.0,    0.0,   0.0,    0.0,    0.0,    0.0],
    [ 0.0,     0.0,   0.0,   0.0,  -0.091,   0.0,    0.0,    0.0,   0.0,    0.075,  0.0,    0.0],
    [-0.0009,  0.0,   0.0,   0.0,  -0.0005, -0.08,   0.0,    0.0,   0.0,   -0.0015, 0.0,    0.0],
    [ 0.0,     0.0,   0.0,   0.0,   0.0,     0.007, -0.015,  0.0,   0.0,    0.0,    0.0,    0.0],
    [ 0.0,     0.0,   0.0,   0.0,  -0.0009,  0.0,    0.0,   -0.04,  0.0,   -0.0028, 0.0,    0.0],
    [ 0.0,     0.0,   0.0,   0.0,   0.0,     0.0,    0.0,    0.0,  -0.025,  0.0,    0.0,    0.0],
    [ 0.0,     0.0,   0.0,   0.0,   0.0,     0.0,    0.0,    0.0,   0.011, -0.011,  0.0,    0.0],
    [ 0.0,     0.0,   0.0,   0.0,   0.0,     0.0,    0.0,    0.0,   0.0,    0.0,   -0.078,  0.0078],
    [ 0.0,     0.0,   0.0,   0.0,   0.0,     0.0,    0.0,    0.0,   0.0,    0.0,    0.0,   -0.0077],
];

const B_INSULIN: [f64; N_STATES] = [
    0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0216, 0.0014, 0.0, 0.0,
];

/// Continuous-time model `ẋ = A(k_IS) x + B u + B_meal m`.
///
/// `a_hat` holds the matrix at nominal sensitivity; `is_coeff` is its
/// `(IS_ROW, IS_COL)` entry, which is what `k_IS` multiplies.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousModel {
    pub a_hat: StateMatrix,
    pub b_insulin: StateVector,
    pub b_meal: StateVector,
    pub c: OutputRow,
    pub is_row: usize,
    pub is_col: usize,
    pub is_coeff: f64,
}

impl Default for ContinuousModel {
    fn default() -> Self {
        Self::nominal(1.0)
    }
}

impl ContinuousModel {
    /// The published model, with meals entering the last gut state scaled by
    /// `meal_gain` (state units per mg/min).
    pub fn nominal(meal_gain: f64) -> Self {
        let a_hat = StateMatrix::from_fn(|i, j| A_NOMINAL[i][j]);
        let mut b_meal = StateVector::zeros();
        b_meal[GUT_IN] = meal_gain;
        let mut c = OutputRow::zeros();
        c[0] = 1.0;
        ContinuousModel {
            a_hat,
            b_insulin: StateVector::from_column_slice(&B_INSULIN),
            b_meal,
            c,
            is_row: IS_ROW,
            is_col: IS_COL,
            is_coeff: A_NOMINAL[IS_ROW][IS_COL],
        }
    }

    /// `A(k_IS)`. Zero is allowed (the entry vanishes); negative or
    /// non-finite sensitivities are rejected.
    pub fn build_a(&self, k_is: f64) -> Result<StateMatrix> {
        check_kis(k_is)?;
        let mut a = self.a_hat;
        a[(self.is_row, self.is_col)] = self.is_coeff * k_is;
        Ok(a)
    }

    /// Splits `A(k_IS)` into the nominal part and the sensitivity part.
    pub fn split_a(&self, k_is: f64) -> Result<(StateMatrix, StateMatrix)> {
        let a_kis = self.build_a(k_is)? - self.a_hat;
        Ok((self.a_hat, a_kis))
    }

    /// Unit vector through which the sensitivity disturbance enters.
    pub fn b_kis(&self) -> StateVector {
        let mut b = StateVector::zeros();
        b[self.is_row] = 1.0;
        b
    }

    /// Steady state of the nominal model under a constant insulin rate.
    pub fn equilibrium(&self, insulin: f64) -> Result<StateVector> {
        let lu = self.a_hat.lu();
        lu.solve(&(-self.b_insulin * insulin))
            .ok_or_else(|| Error::Config("nominal A is singular".into()))
    }

    /// Multiplies every nonzero entry of `A` by its own factor; used by the
    /// plant to introduce model mismatch.
    pub fn perturbed(&self, factors: &StateMatrix) -> Self {
        let mut out = self.clone();
        out.a_hat.component_mul_assign(factors);
        out.is_coeff = out.a_hat[(self.is_row, self.is_col)];
        out
    }
}

fn check_kis(k_is: f64) -> Result<()> {
    if !k_is.is_finite() || k_is < 0.0 {
        return Err(Error::Domain(format!(
            "insulin sensitivity must be finite and non-negative, got {k_is}"
        )));
    }
    Ok(())
}

/// Zero-order-hold discretization of the nominal model.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteModel {
    pub ad: StateMatrix,
    pub bd: StateVector,
    pub bd_kis: StateVector,
    pub bd_meal: StateVector,
    pub cd: OutputRow,
    pub ts: f64,
    pub is_row: usize,
}

/// Exact ZOH discretization at sample time `ts` (minutes).
///
/// The insulin, disturbance and meal inputs are stacked into one augmented
/// generator and exponentiated together, so `bd_kis` is the ZOH image of the
/// unit vector `e_{i*}` under the nominal `A`.
pub fn discretize(model: &ContinuousModel, ts: f64) -> Result<DiscreteModel> {
    if !ts.is_finite() || ts <= 0.0 {
        return Err(Error::Domain(format!(
            "sample time must be finite and positive, got {ts}"
        )));
    }
    let n = N_STATES;
    let mut gen = DMatrix::<f64>::zeros(n + 3, n + 3);
    gen.view_mut((0, 0), (n, n)).copy_from(&model.a_hat);
    gen.view_mut((0, n), (n, 1)).copy_from(&model.b_insulin);
    gen.view_mut((0, n + 1), (n, 1)).copy_from(&model.b_kis());
    gen.view_mut((0, n + 2), (n, 1)).copy_from(&model.b_meal);
    let phi = (gen * ts).exp();
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix exponential overflowed".into()));
    }
    let ad = StateMatrix::from_fn(|i, j| phi[(i, j)]);
    let col = |c: usize| StateVector::from_fn(|i, _| phi[(i, c)]);
    Ok(DiscreteModel {
        ad,
        bd: col(n),
        bd_kis: col(n + 1),
        bd_meal: col(n + 2),
        cd: model.c,
        ts,
        is_row: model.is_row,
    })
}

impl DiscreteModel {
    /// One nominal step `Ad x + Bd u + Bd_kIS d + Bd_meal m`.
    pub fn propagate(&self, x: &StateVector, u: f64, dist: f64, meal: f64) -> StateVector {
        self.ad * x + self.bd * u + self.bd_kis * dist + self.bd_meal * meal
    }

    pub fn output(&self, x: &StateVector) -> f64 {
        (self.cd * x)[0]
    }
}

/// Diurnal insulin-sensitivity curve `k_IS(t)`, `t` in minutes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InsulinSensitivityProfile {
    Constant {
        #[serde(default = "one")]
        value: f64,
    },
    /// `1 + amplitude · sin(2π (t − phase) / period)`.
    Sinusoid {
        #[serde(default = "default_amplitude")]
        amplitude: f64,
        #[serde(default = "default_period")]
        period: f64,
        #[serde(default)]
        phase: f64,
    },
    /// Periodic linear interpolation through `(time of period, value)` pairs.
    PiecewiseLinear {
        #[serde(default = "default_period")]
        period: f64,
        breakpoints: Vec<(f64, f64)>,
    },
}

fn one() -> f64 {
    1.0
}
fn default_amplitude() -> f64 {
    0.3
}
fn default_period() -> f64 {
    1440.0
}

impl Default for InsulinSensitivityProfile {
    fn default() -> Self {
        InsulinSensitivityProfile::Constant { value: 1.0 }
    }
}

impl InsulinSensitivityProfile {
    pub fn sinusoid(amplitude: f64) -> Self {
        InsulinSensitivityProfile::Sinusoid {
            amplitude,
            period: 1440.0,
            phase: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self {
            Self::Constant { value } => {
                if !(value.is_finite() && *value > 0.0) {
                    return bad(format!(
                        "constant sensitivity must be positive, got {value}"
                    ));
                }
            }
            Self::Sinusoid {
                amplitude,
                period,
                phase,
            } => {
                if !(amplitude.is_finite() && amplitude.abs() < 1.0) {
                    return bad(format!(
                        "sinusoid amplitude must lie in (-1, 1), got {amplitude}"
                    ));
                }
                if !(period.is_finite() && *period > 0.0 && phase.is_finite()) {
                    return bad("sinusoid period must be positive and phase finite".into());
                }
            }
            Self::PiecewiseLinear {
                period,
                breakpoints,
            } => {
                if !(period.is_finite() && *period > 0.0) {
                    return bad("piecewise period must be positive".into());
                }
                if breakpoints.is_empty() {
                    return bad("piecewise profile needs at least one breakpoint".into());
                }
                for w in breakpoints.windows(2) {
                    if w[1].0 <= w[0].0 {
                        return bad("piecewise breakpoints must have increasing times".into());
                    }
                }
                for &(t, v) in breakpoints {
                    if !(0.0..*period).contains(&t) || !(v.is_finite() && v > 0.0) {
                        return bad(format!("invalid breakpoint ({t}, {v})"));
                    }
                }
            }
        }
        Ok(())
    }

    /// `k_IS(t)`.
    pub fn kis_at(&self, t: f64) -> f64 {
        match self {
            Self::Constant { value } => *value,
            Self::Sinusoid {
                amplitude,
                period,
                phase,
            } => 1.0 + amplitude * (std::f64::consts::TAU * (t - phase) / period).sin(),
            Self::PiecewiseLinear {
                period,
                breakpoints,
            } => piecewise(breakpoints, *period, t),
        }
    }
}

fn piecewise(bp: &[(f64, f64)], period: f64, t: f64) -> f64 {
    let tau = t.rem_euclid(period);
    let n = bp.len();
    if n == 1 {
        return bp[0].1;
    }
    // segment [bp[i], bp[i+1]] with wrap-around from the last to the first
    let next = bp.iter().position(|&(bt, _)| bt > tau).unwrap_or(n);
    let (t0, v0, t1, v1) = if next == 0 {
        let (lt, lv) = bp[n - 1];
        (lt - period, lv, bp[0].0, bp[0].1)
    } else if next == n {
        let (ft, fv) = bp[0];
        (bp[n - 1].0, bp[n - 1].1, ft + period, fv)
    } else {
        (bp[next - 1].0, bp[next - 1].1, bp[next].0, bp[next].1)
    };
    v0 + (v1 - v0) * (tau - t0) / (t1 - t0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn one_based(a: &StateMatrix, i: usize, j: usize) -> f64 {
        a[(i - 1, j - 1)]
    }

    #[test]
    fn published_entries() {
        let m = ContinuousModel::default();
        let a = m.build_a(1.0).unwrap();
        assert_eq!(one_based(&a, 4, 5), -0.025);
        assert_eq!(one_based(&a, 1, 1), -0.70);
        assert_eq!(one_based(&a, 2, 6), 5.11);
        assert_eq!(m.b_insulin[8], 0.0216);
        assert_eq!(m.b_insulin[9], 0.0014);
    }

    #[test]
    fn kis_scales_single_entry() {
        let m = ContinuousModel::default();
        let a1 = m.build_a(1.0).unwrap();
        let a0 = m.build_a(0.0).unwrap();
        assert_eq!(one_based(&a0, 4, 5), 0.0);
        assert_abs_diff_eq!(
            one_based(&m.build_a(1.2).unwrap(), 4, 5),
            -0.030,
            epsilon = 1e-15
        );
        for k in [0.0, 0.3, 0.7, 1.3, 2.0] {
            let a = m.build_a(k).unwrap();
            let diffs = a.iter().zip(a1.iter()).filter(|(x, y)| x != y).count();
            assert_eq!(diffs, if k == 1.0 { 0 } else { 1 });
        }
    }

    #[test]
    fn rejects_bad_kis() {
        let m = ContinuousModel::default();
        assert!(matches!(m.build_a(-0.1), Err(Error::Domain(_))));
        assert!(matches!(m.build_a(f64::NAN), Err(Error::Domain(_))));
        assert!(matches!(m.split_a(f64::INFINITY), Err(Error::Domain(_))));
    }

    #[test]
    fn split_recombines() {
        let m = ContinuousModel::default();
        let (a_hat, a_kis) = m.split_a(1.0).unwrap();
        assert_eq!(a_kis, StateMatrix::zeros());
        assert_eq!(a_hat, m.build_a(1.0).unwrap());
        let (_, up) = m.split_a(1.3).unwrap();
        assert_abs_diff_eq!(up[(3, 4)], -0.0075, epsilon = 1e-15);
        assert_eq!(up.iter().filter(|v| **v != 0.0).count(), 1);
        let (a_hat, down) = m.split_a(0.7).unwrap();
        assert_abs_diff_eq!(down[(3, 4)], 0.0075, epsilon = 1e-15);
        assert_eq!(a_hat + down, m.build_a(0.7).unwrap());
    }

    #[test]
    fn output_selects_glucose() {
        let m = ContinuousModel::default();
        for i in 0..N_STATES {
            let mut x = StateVector::zeros();
            x[i] = 1.0;
            assert_eq!((m.c * x)[0], if i == 0 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn scalar_zoh_closed_form() {
        // embed ẋ = -0.1 x + u into the gut-in slot, which is decoupled upstream
        let mut m = ContinuousModel::nominal(0.0);
        m.a_hat = StateMatrix::zeros();
        m.a_hat[(0, 0)] = -0.1;
        m.b_insulin = StateVector::zeros();
        m.b_insulin[0] = 1.0;
        let d = discretize(&m, 5.0).unwrap();
        assert_abs_diff_eq!(d.ad[(0, 0)], (-0.5f64).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(d.bd[0], (1.0 - (-0.5f64).exp()) / 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(d.ad[(0, 0)], 0.60653, epsilon = 1e-5);
        assert_abs_diff_eq!(d.bd[0], 3.9347, epsilon = 1e-4);
    }

    #[test]
    fn small_step_limit() {
        let m = ContinuousModel::default();
        let d = discretize(&m, 1e-9).unwrap();
        assert!((d.ad - StateMatrix::identity()).amax() < 1e-8);
        assert!(d.bd.amax() < 1e-9);
    }

    #[test]
    fn disturbance_column_sparsity() {
        let d = discretize(&ContinuousModel::default(), 5.0).unwrap();
        assert!(d.bd_kis[IS_ROW] > 0.0);
        let c = ContinuousModel::default().b_kis();
        assert_eq!(c.iter().filter(|v| **v != 0.0).count(), 1);
    }

    #[test]
    fn rejects_bad_ts() {
        let m = ContinuousModel::default();
        assert!(discretize(&m, 0.0).is_err());
        assert!(discretize(&m, f64::NAN).is_err());
        assert!(discretize(&m, -5.0).is_err());
    }

    #[test]
    fn profiles() {
        let c = InsulinSensitivityProfile::default();
        assert_eq!(c.kis_at(0.0), 1.0);
        assert_eq!(c.kis_at(12345.0), 1.0);
        let s = InsulinSensitivityProfile::sinusoid(0.3);
        assert_abs_diff_eq!(s.kis_at(360.0), 1.3, epsilon = 1e-12);
        for t in [0.0, 17.0, 500.0, 1439.0] {
            assert_abs_diff_eq!(s.kis_at(t), s.kis_at(t + 1440.0), epsilon = 1e-12);
        }
        let p = InsulinSensitivityProfile::PiecewiseLinear {
            period: 1440.0,
            breakpoints: vec![(0.0, 1.0), (360.0, 1.4), (1080.0, 0.8)],
        };
        p.validate().unwrap();
        assert_abs_diff_eq!(p.kis_at(180.0), 1.2, epsilon = 1e-12);
        assert_abs_diff_eq!(p.kis_at(1260.0), 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(p.kis_at(1260.0 + 2880.0), 0.9, epsilon = 1e-12);
        assert!(InsulinSensitivityProfile::sinusoid(1.2).validate().is_err());
    }
}
