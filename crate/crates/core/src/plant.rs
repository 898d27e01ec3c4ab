//! Surrogate virtual patient.
//!
//! The plant integrates the same linear model the controller uses, but with the
//! true time-varying sensitivity. In deviation coordinates the sensitivity term
//! acts on the absolute value of state 5, so a sensitivity change moves the
//! patient away from basal even at `x = 0`:
//!
//! ```text
//! ẋ = Â x + B u + B_meal m(t) + e_{i*} · c (k_IS(t) − 1) (x_5 + x_basal,5)
//! ```

use nalgebra::SMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linmodel::{ContinuousModel, InsulinSensitivityProfile, StateMatrix, StateVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatientParams {
    /// mg/dl; the controller reference.
    pub fasting_glucose: f64,
    /// mU/min.
    pub u_basal: f64,
    /// Linearization point. When absent it is the nominal equilibrium under
    /// `u_basal`.
    pub x_basal: Option<Vec<f64>>,
    /// mg/dl.
    pub cgm_noise_sd: f64,
    /// min.
    pub cgm_period: f64,
    /// RK4 step, min.
    pub integrator_step: f64,
    /// State units of gut state 12 per mg/min of carbohydrate.
    pub meal_gain: f64,
    /// Rectangular meal pulse length, min.
    pub meal_duration: f64,
    /// Half-width of the uniform relative perturbation applied to every
    /// nonzero entry of `A` (0 disables model mismatch).
    pub perturbation: f64,
}

impl Default for PatientParams {
    fn default() -> Self {
        PatientParams {
            fasting_glucose: 122.0,
            u_basal: 20.4,
            x_basal: None,
            cgm_noise_sd: 2.0,
            cgm_period: 5.0,
            integrator_step: 0.1,
            meal_gain: 0.1,
            meal_duration: 15.0,
            perturbation: 0.0,
        }
    }
}

impl PatientParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.u_basal > 0.0 && self.u_basal.is_finite()) {
            return bad("u_basal must be positive");
        }
        if !(self.cgm_period > 0.0 && self.cgm_period.is_finite()) {
            return bad("cgm_period must be positive");
        }
        if !(self.integrator_step > 0.0 && self.integrator_step <= self.cgm_period) {
            return bad("integrator_step must lie in (0, cgm_period]");
        }
        if !(self.cgm_noise_sd >= 0.0 && self.cgm_noise_sd.is_finite()) {
            return bad("cgm_noise_sd must be non-negative");
        }
        if !(self.meal_gain >= 0.0 && self.meal_duration > 0.0) {
            return bad("meal_gain must be non-negative and meal_duration positive");
        }
        if !(0.0..1.0).contains(&self.perturbation) {
            return bad("perturbation must lie in [0, 1)");
        }
        if let Some(xb) = &self.x_basal {
            if xb.len() != crate::linmodel::N_STATES || xb.iter().any(|v| !v.is_finite()) {
                return bad("x_basal must hold 12 finite values");
            }
        }
        Ok(())
    }
}

/// A carbohydrate intake delivered as a rectangular pulse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Meal {
    /// min.
    pub start: f64,
    /// g.
    pub grams: f64,
    /// min.
    pub duration: f64,
}

impl Meal {
    /// mg/min while active.
    pub fn rate(&self) -> f64 {
        self.grams * 1000.0 / self.duration
    }

    pub fn is_active(&self, t: f64) -> bool {
        t >= self.start && t < self.start + self.duration
    }

    pub fn end(&self) -> f64 {
        self.start + self.duration
    }
}

/// Sum of active meal rates at `t`, mg/min.
pub fn meal_rate(meals: &[Meal], t: f64) -> f64 {
    meals
        .iter()
        .filter(|m| m.is_active(t))
        .map(Meal::rate)
        .sum()
}

/// Average meal rate over `[t0, t1)`, mg/min.
pub fn mean_meal_rate(meals: &[Meal], t0: f64, t1: f64) -> f64 {
    debug_assert!(t1 > t0);
    let mass: f64 = meals
        .iter()
        .map(|m| {
            let overlap = (m.end().min(t1) - m.start.max(t0)).max(0.0);
            overlap * m.rate()
        })
        .sum();
    mass / (t1 - t0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub t: f64,
    pub x: StateVector,
    pub pending_meals: Vec<Meal>,
}

impl PlantState {
    pub fn meal_rate(&self, t: f64) -> f64 {
        meal_rate(&self.pending_meals, t)
    }
}

#[derive(Debug, Clone)]
pub struct Plant {
    model: ContinuousModel,
    params: PatientParams,
    x_basal: StateVector,
    profile: InsulinSensitivityProfile,
}

impl Plant {
    /// `perturbation_seed` only matters when `params.perturbation > 0`.
    pub fn new(
        params: PatientParams,
        profile: InsulinSensitivityProfile,
        perturbation_seed: u64,
    ) -> Result<Self> {
        params.validate()?;
        profile.validate()?;
        let nominal = ContinuousModel::nominal(params.meal_gain);
        let x_basal = match &params.x_basal {
            Some(v) => StateVector::from_column_slice(v),
            None => nominal.equilibrium(params.u_basal)?,
        };
        let model = if params.perturbation > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(perturbation_seed);
            let w = params.perturbation;
            let factors: StateMatrix =
                SMatrix::from_fn(|_, _| 1.0 + w * (2.0 * rng.random::<f64>() - 1.0));
            nominal.perturbed(&factors)
        } else {
            nominal
        };
        Ok(Plant {
            model,
            params,
            x_basal,
            profile,
        })
    }

    pub fn params(&self) -> &PatientParams {
        &self.params
    }

    pub fn model(&self) -> &ContinuousModel {
        &self.model
    }

    pub fn x_basal(&self) -> &StateVector {
        &self.x_basal
    }

    pub fn profile(&self) -> &InsulinSensitivityProfile {
        &self.profile
    }

    pub fn initial_state(&self, mut meals: Vec<Meal>) -> PlantState {
        meals.sort_by(|a, b| a.start.total_cmp(&b.start));
        PlantState {
            t: 0.0,
            x: StateVector::zeros(),
            pending_meals: meals,
        }
    }

    /// Continuous-time sensitivity disturbance entering row `i*` at `(t, x)`.
    pub fn sensitivity_input(&self, t: f64, x: &StateVector) -> f64 {
        let k = self.profile.kis_at(t);
        let col = self.model.is_col;
        self.model.is_coeff * (k - 1.0) * (x[col] + self.x_basal[col])
    }

    fn derivative(&self, t: f64, x: &StateVector, u: f64, meal: f64) -> StateVector {
        let mut dx = self.model.a_hat * x + self.model.b_insulin * u + self.model.b_meal * meal;
        dx[self.model.is_row] += self.sensitivity_input(t, x);
        dx
    }

    /// Advances the patient by `dt` minutes under insulin deviation `u`.
    pub fn step(&self, state: &PlantState, u: f64, dt: f64) -> Result<PlantState> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Domain(format!(
                "plant step must be positive, got {dt}"
            )));
        }
        if !u.is_finite() || u + self.params.u_basal < 0.0 {
            return Err(Error::Domain(format!(
                "total insulin {} mU/min is negative",
                u + self.params.u_basal
            )));
        }
        let n = (dt / self.params.integrator_step - 1e-9).ceil().max(1.0) as usize;
        let h = dt / n as f64;
        let meals = &state.pending_meals;
        let mut x = state.x;
        for i in 0..n {
            let t = state.t + i as f64 * h;
            // meal pulses are held at their substep-midpoint value so onsets
            // on the substep grid integrate exactly
            let m = meal_rate(meals, t + 0.5 * h);
            let k1 = self.derivative(t, &x, u, m);
            let k2 = self.derivative(t + 0.5 * h, &(x + k1 * (0.5 * h)), u, m);
            let k3 = self.derivative(t + 0.5 * h, &(x + k2 * (0.5 * h)), u, m);
            let k4 = self.derivative(t + h, &(x + k3 * h), u, m);
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("plant state diverged".into()));
        }
        let t = state.t + dt;
        Ok(PlantState {
            t,
            x,
            pending_meals: meals.iter().copied().filter(|m| m.end() > t).collect(),
        })
    }

    /// Noise-free blood glucose, mg/dl.
    pub fn glucose(&self, state: &PlantState) -> f64 {
        self.params.fasting_glucose + (self.model.c * state.x)[0]
    }
}

/// CGM with additive i.i.d. Gaussian noise and its own seeded stream.
#[derive(Debug, Clone)]
pub struct CgmSensor {
    rng: ChaCha8Rng,
    sd: f64,
}

impl CgmSensor {
    pub fn new(sd: f64, seed: u64) -> Self {
        CgmSensor {
            rng: ChaCha8Rng::seed_from_u64(seed),
            sd,
        }
    }

    /// Draws one reading. A standard normal is consumed even when `sd == 0` so
    /// streams stay aligned across noise levels.
    pub fn measure(&mut self, plant: &Plant, state: &PlantState) -> f64 {
        let z: f64 = self.rng.sample(StandardNormal);
        plant.glucose(state) + self.sd * z
    }
}
