use std::hash::{DefaultHasher, Hash, Hasher};

use rayon::prelude::*;

use super::config::{ControllerKind, GlucoseSignal, ScenarioConfig};
use super::metrics::{compute_metrics, RunMetrics};
use crate::distlearn::{
    extract_point, gut_appearance, postprocess, DiscardReason, TrainingBuffer, TrainingPoint,
};
use crate::error::{Error, Result};
use crate::estimator::Ukf;
use crate::gp::GpModel;
use crate::linmodel::{discretize, ContinuousModel, DiscreteModel, StateVector, GUT_OUT};
use crate::mpc::{Mpc, SolveStatus};
use crate::plant::{mean_meal_rate, CgmSensor, Plant};

/// One control period. The command in `insulin` is held over `[t, t + Ts)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRow {
    pub t: f64,
    pub glucose_true: f64,
    pub cgm: f64,
    /// Absolute pump rate, mU/min.
    pub insulin: f64,
    /// GP posterior at `t`; NaN for the baseline controller.
    pub gp_mean: f64,
    pub gp_var: f64,
    /// Disturbance sample extracted at `t`, absent on the first step.
    pub train_u: Option<f64>,
    pub train_discard: Option<DiscardReason>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpDiagnostic {
    pub t: f64,
    pub status: SolveStatus,
    pub j_star: f64,
    pub iterations: usize,
    pub u_command: f64,
    /// Estimated gut glucose appearance, mg/min.
    pub appearance: f64,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub controller: ControllerKind,
    pub ts: f64,
    pub rows: Vec<StepRow>,
    pub diagnostics: Vec<QpDiagnostic>,
    /// Buffer contents when the run ended.
    pub buffer: TrainingBuffer,
    pub metrics: RunMetrics,
}

impl RunRecord {
    /// Hash over the bit patterns of every recorded value.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for r in &self.rows {
            for v in [r.t, r.glucose_true, r.cgm, r.insulin, r.gp_mean, r.gp_var] {
                v.to_bits().hash(&mut h);
            }
            r.train_u.map(f64::to_bits).hash(&mut h);
            r.train_discard.map(|d| d.as_str()).hash(&mut h);
        }
        h.finish()
    }

    pub fn glucose(&self, signal: GlucoseSignal) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| match signal {
                GlucoseSignal::True => r.glucose_true,
                GlucoseSignal::Cgm => r.cgm,
            })
            .collect()
    }

    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.t).collect()
    }

    pub fn insulin(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.insulin).collect()
    }

    pub fn training_points(&self) -> Vec<TrainingPoint> {
        self.rows
            .iter()
            .filter_map(|r| {
                Some(TrainingPoint {
                    t: r.t,
                    u_kis: r.train_u?,
                    discarded: r.train_discard?,
                })
            })
            .collect()
    }
}

/// Per-step hook for tests that need the hidden plant state.
pub trait StepObserver {
    fn observe(&mut self, step: usize, plant_x: &StateVector, estimate: &StateVector);
}

impl StepObserver for () {
    fn observe(&mut self, _: usize, _: &StateVector, _: &StateVector) {}
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunRecord> {
    run_scenario_observed(cfg, &mut ())
}

pub fn run_scenario_observed(
    cfg: &ScenarioConfig,
    observer: &mut dyn StepObserver,
) -> Result<RunRecord> {
    cfg.validate()?;
    let ts = cfg.mpc.ts;
    let nominal = ContinuousModel::nominal(cfg.patient.meal_gain);
    let model: DiscreteModel = discretize(&nominal, ts)?;
    let transfer = nominal.a_hat[(0, GUT_OUT)];
    let plant = Plant::new(
        cfg.patient.clone(),
        cfg.insulin_sensitivity.clone(),
        cfg.perturbation_seed,
    )?;
    let mut sensor = CgmSensor::new(cfg.patient.cgm_noise_sd, cfg.seed);
    let ukf = Ukf::new(cfg.estimator.to_config(
        cfg.patient.cgm_noise_sd,
        cfg.patient.fasting_glucose,
        &model.bd_kis,
    )?)?;
    let mpc = Mpc::new(cfg.mpc.clone(), model.clone())?;
    let announced = cfg.announced_meals();
    let learning_gp = cfg.controller == ControllerKind::GpMpc;
    let horizon = cfg.mpc.horizon;

    let mut plant_state = plant.initial_state(cfg.plant_meals());
    let mut est = ukf.initial_state();
    let mut buffer = TrainingBuffer::from_config(&cfg.learning);
    let mut gp = GpModel::new(cfg.gp)?;
    let mut prev: Option<(StateVector, f64, f64)> = None;
    let mut warm: Option<Vec<f64>> = None;

    let steps = cfg.steps();
    let mut rows = Vec::with_capacity(steps);
    let mut diagnostics = Vec::with_capacity(steps);

    for k in 0..steps {
        let t = k as f64 * ts;
        let wrap = |e: Error| Error::Step {
            step: k,
            source: Box::new(e),
        };
        let glucose_true = plant.glucose(&plant_state);
        let cgm = sensor.measure(&plant, &plant_state);

        if let Some((_, u_prev, d_prev)) = prev {
            let meal = mean_meal_rate(&announced, t - ts, t);
            est = ukf
                .predict(&est, u_prev, meal, d_prev, &model)
                .map_err(wrap)?;
        }
        est = ukf.update(&est, cgm, &model).map_err(wrap)?;
        observer.observe(k, &plant_state.x, &est.x_hat);

        let appearance = gut_appearance(&est.x_hat, transfer, cfg.learning.distribution_volume);
        let mut train = None;
        if let Some((x_prev, u_prev, _)) = prev {
            let u_kis = extract_point(&est.x_hat, &x_prev, u_prev, &model).map_err(wrap)?;
            let point = postprocess(TrainingPoint::new(t, u_kis), appearance, &cfg.learning);
            let evicted = buffer.push(point).map_err(wrap)?;
            if learning_gp {
                for _ in evicted.iter().filter(|p| p.is_retained()) {
                    gp.pop_front().map_err(wrap)?;
                }
                if point.is_retained() {
                    gp.push(point.t, point.u_kis).map_err(wrap)?;
                }
            }
            train = Some(point);
        }

        let (preview, gp_mean, gp_var) = if learning_gp {
            let (m, v) = gp.predict(&[t]);
            let preview = if cfg.force_zero_preview {
                vec![0.0; horizon]
            } else {
                let q: Vec<f64> = (1..=horizon).map(|j| t + j as f64 * ts).collect();
                gp.predict_mean(&q)
            };
            (preview, m[0], v[0])
        } else {
            (vec![0.0; horizon], f64::NAN, f64::NAN)
        };

        let (cmd, sol) = mpc
            .control_step(&est.x_hat, &preview, warm.as_deref())
            .map_err(wrap)?;
        let u = cmd - cfg.mpc.u_basal;
        let mut shifted = sol.u_seq[1..].to_vec();
        shifted.push(*sol.u_seq.last().expect("horizon is nonzero"));
        warm = Some(shifted);

        rows.push(StepRow {
            t,
            glucose_true,
            cgm,
            insulin: cmd,
            gp_mean,
            gp_var,
            train_u: train.map(|p| p.u_kis),
            train_discard: train.map(|p| p.discarded),
        });
        diagnostics.push(QpDiagnostic {
            t,
            status: sol.status,
            j_star: sol.j_star,
            iterations: sol.iterations,
            u_command: cmd,
            appearance,
        });

        plant_state = plant.step(&plant_state, u, ts).map_err(wrap)?;
        prev = Some((est.x_hat, u, preview[0]));
    }

    let times: Vec<f64> = rows.iter().map(|r| r.t).collect();
    let glucose: Vec<f64> = rows
        .iter()
        .map(|r| match cfg.metrics_signal {
            GlucoseSignal::True => r.glucose_true,
            GlucoseSignal::Cgm => r.cgm,
        })
        .collect();
    let metrics = RunMetrics {
        day_and_night: compute_metrics(&times, &glucose, None)?,
        overnight: compute_metrics(&times, &glucose, Some(&cfg.overnight))?,
    };

    Ok(RunRecord {
        controller: cfg.controller,
        ts,
        rows,
        diagnostics,
        buffer,
        metrics,
    })
}

/// Runs independent scenarios in parallel; results keep the input order.
pub fn run_batch(cfgs: &[ScenarioConfig]) -> Vec<Result<RunRecord>> {
    cfgs.par_iter().map(run_scenario).collect()
}
