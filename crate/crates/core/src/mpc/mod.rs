//! Disturbance-preview MPC.
//!
//! Each step solves a finite-horizon problem over the insulin deviations
//! `u_0..u_{N-1}`: quadratic cost on the glucose deviation and on the distance
//! of each input from the steady-state input that rejects the previewed
//! disturbance, pump limits as box bounds, and `y_N = 0` as a hard equality
//! or a heavy terminal penalty. States are eliminated (condensed) so the
//! solver only sees the N inputs.

pub mod qp;

use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linmodel::{DiscreteModel, StateMatrix, StateVector, N_STATES};
pub use qp::{BoxQp, QpSolution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalMode {
    Hard,
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    /// min.
    pub ts: f64,
    pub q: f64,
    pub r: f64,
    /// mU/min.
    pub u_max: f64,
    /// mU/min.
    pub u_basal: f64,
    pub terminal: TerminalMode,
    /// Terminal penalty in multiples of `q`, used in soft mode and when a hard
    /// terminal constraint turns out infeasible.
    pub terminal_weight: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 30,
            ts: 5.0,
            q: 1.0,
            r: 10.0,
            u_max: 100.0,
            u_basal: 20.4,
            terminal: TerminalMode::Soft,
            terminal_weight: 1e4,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least one step".into()));
        }
        if !(self.q > 0.0 && self.r > 0.0 && self.ts > 0.0 && self.terminal_weight > 0.0) {
            return Err(Error::Config(
                "Q, R, Ts and terminal weight must be positive".into(),
            ));
        }
        if !(0.0 < self.u_basal && self.u_basal < self.u_max) {
            return Err(Error::Config("need 0 < u_basal < u_max".into()));
        }
        Ok(())
    }

    pub fn lower_bound(&self) -> f64 {
        -self.u_basal
    }

    pub fn upper_bound(&self) -> f64 {
        self.u_max - self.u_basal
    }
}

/// Steady state `(x_ss, u_ss)` that holds `y = 0` against a constant
/// disturbance `u_kis`.
pub fn steady_state_target(u_kis: f64, model: &DiscreteModel) -> Result<(StateVector, f64)> {
    let n = N_STATES;
    let mut m = SMatrix::<f64, 13, 13>::zeros();
    m.fixed_view_mut::<12, 12>(0, 0)
        .copy_from(&(model.ad - StateMatrix::identity()));
    m.fixed_view_mut::<12, 1>(0, n).copy_from(&model.bd);
    m.fixed_view_mut::<1, 12>(n, 0).copy_from(&model.cd);
    let mut rhs = SVector::<f64, 13>::zeros();
    rhs.fixed_rows_mut::<12>(0)
        .copy_from(&(-model.bd_kis * u_kis));
    let sol = m
        .lu()
        .solve(&rhs)
        .filter(|s| s.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Config("steady-state target system is singular".into()))?;
    Ok((StateVector::from_fn(|i, _| sol[i]), sol[n]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CftocProblem {
    pub x0: StateVector,
    pub dist_preview: Vec<f64>,
    pub targets: Vec<(StateVector, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    SoftFallback,
    Infeasible,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::SoftFallback => "soft-fallback",
            SolveStatus::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CftocSolution {
    /// Insulin deviations, mU/min.
    pub u_seq: Vec<f64>,
    pub j_star: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub kkt_residual: f64,
}

/// Condensed problem plus what is needed to soften the terminal row.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedQp {
    pub qp: BoxQp,
    /// `y_N = terminal_row · u + terminal_free`.
    pub terminal_row: DVector<f64>,
    pub terminal_free: f64,
    pub mode: TerminalMode,
    /// Penalty applied if the hard row has to be softened.
    pub fallback_weight: f64,
}

#[derive(Debug, Clone)]
pub struct Mpc {
    cfg: MpcConfig,
    model: DiscreteModel,
    /// Row k: `Cd Ad^k`, k = 0..=N.
    free_resp: DMatrix<f64>,
    /// Row k, column j: effect of `u_j` on `y_k`.
    input_resp: DMatrix<f64>,
    /// Same for the disturbance.
    dist_resp: DMatrix<f64>,
    unit_target: (StateVector, f64),
}

impl Mpc {
    pub fn new(cfg: MpcConfig, model: DiscreteModel) -> Result<Self> {
        cfg.validate()?;
        if (model.ts - cfg.ts).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "model sampled at {} min but controller expects {}",
                model.ts, cfg.ts
            )));
        }
        let n = cfg.horizon;
        let mut free_resp = DMatrix::zeros(n + 1, N_STATES);
        let mut markov_u = vec![0.0; n];
        let mut markov_d = vec![0.0; n];
        let mut row = model.cd;
        for k in 0..=n {
            free_resp.row_mut(k).copy_from(&row);
            if k < n {
                markov_u[k] = (row * model.bd)[0];
                markov_d[k] = (row * model.bd_kis)[0];
            }
            row *= model.ad;
        }
        let toeplitz =
            |h: &[f64]| DMatrix::from_fn(n + 1, n, |k, j| if j < k { h[k - 1 - j] } else { 0.0 });
        let unit_target = steady_state_target(1.0, &model)?;
        Ok(Mpc {
            input_resp: toeplitz(&markov_u),
            dist_resp: toeplitz(&markov_d),
            free_resp,
            cfg,
            model,
            unit_target,
        })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn model(&self) -> &DiscreteModel {
        &self.model
    }

    /// Assembles the problem for state `x0` and disturbance preview.
    pub fn problem(&self, x0: &StateVector, preview: &[f64]) -> Result<CftocProblem> {
        if preview.len() != self.cfg.horizon {
            return Err(Error::Config(format!(
                "preview has {} values, horizon is {}",
                preview.len(),
                self.cfg.horizon
            )));
        }
        if preview.iter().any(|d| !d.is_finite()) || x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite state or preview".into()));
        }
        let (xs, us) = self.unit_target;
        Ok(CftocProblem {
            x0: *x0,
            dist_preview: preview.to_vec(),
            targets: preview.iter().map(|&d| (xs * d, us * d)).collect(),
        })
    }

    /// Condensed QP in the insulin deviations.
    pub fn build_qp(&self, problem: &CftocProblem) -> Result<CondensedQp> {
        let n = self.cfg.horizon;
        if problem.dist_preview.len() != n || problem.targets.len() != n {
            return Err(Error::Config(
                "problem length does not match horizon".into(),
            ));
        }
        let (q, r) = (self.cfg.q, self.cfg.r);
        let d = DVector::from_column_slice(&problem.dist_preview);
        let x0 = DVector::from_column_slice(problem.x0.as_slice());
        let y_free: DVector<f64> = &self.free_resp * x0 + &self.dist_resp * d;
        let u_ss = DVector::from_iterator(n, problem.targets.iter().map(|t| t.1));

        let gamma = self.input_resp.rows(0, n);
        let yf = y_free.rows(0, n);
        let mut h = gamma.transpose() * gamma * (2.0 * q);
        for i in 0..n {
            h[(i, i)] += 2.0 * r;
        }
        let mut f = gamma.transpose() * yf * (2.0 * q) - &u_ss * (2.0 * r);
        let mut c = q * yf.norm_squared() + r * u_ss.norm_squared();

        let terminal_row = self.input_resp.row(n).transpose();
        let terminal_free = y_free[n];
        let weight = self.cfg.terminal_weight * q;
        let eq = match self.cfg.terminal {
            TerminalMode::Hard => Some((terminal_row.clone(), -terminal_free)),
            TerminalMode::Soft => {
                add_terminal_penalty(&mut h, &mut f, &mut c, &terminal_row, terminal_free, weight);
                None
            }
        };
        let qp = BoxQp {
            h,
            f,
            c,
            lb: DVector::from_element(n, self.cfg.lower_bound()),
            ub: DVector::from_element(n, self.cfg.upper_bound()),
            eq,
        };
        Ok(CondensedQp {
            qp,
            terminal_row,
            terminal_free,
            mode: self.cfg.terminal,
            fallback_weight: weight,
        })
    }

    /// Predicted outputs `y_0..y_N` for an input sequence.
    pub fn predict_outputs(&self, problem: &CftocProblem, u: &[f64]) -> Vec<f64> {
        let x0 = DVector::from_column_slice(problem.x0.as_slice());
        let d = DVector::from_column_slice(&problem.dist_preview);
        let u = DVector::from_column_slice(u);
        let y = &self.free_resp * x0 + &self.dist_resp * d + &self.input_resp * u;
        y.iter().copied().collect()
    }

    /// First-move pump command (absolute, mU/min) and the full solution.
    pub fn control_step(
        &self,
        x_hat: &StateVector,
        preview: &[f64],
        warm: Option<&[f64]>,
    ) -> Result<(f64, CftocSolution)> {
        let problem = self.problem(x_hat, preview)?;
        let cqp = self.build_qp(&problem)?;
        let sol = solve_qp(&cqp, warm)?;
        let cmd = (self.cfg.u_basal + sol.u_seq[0]).clamp(0.0, self.cfg.u_max);
        Ok((cmd, sol))
    }
}

fn add_terminal_penalty(
    h: &mut DMatrix<f64>,
    f: &mut DVector<f64>,
    c: &mut f64,
    row: &DVector<f64>,
    free: f64,
    weight: f64,
) {
    *h += row * row.transpose() * (2.0 * weight);
    *f += row * (2.0 * weight * free);
    *c += weight * free * free;
}

/// Solves the condensed problem; an infeasible hard terminal row is replaced by
/// its penalty and flagged.
pub fn solve_qp(cqp: &CondensedQp, warm: Option<&[f64]>) -> Result<CftocSolution> {
    let (sol, status) = if cqp.qp.is_feasible() {
        (qp::solve(&cqp.qp, warm)?, SolveStatus::Optimal)
    } else {
        let mut soft = cqp.qp.clone();
        soft.eq = None;
        add_terminal_penalty(
            &mut soft.h,
            &mut soft.f,
            &mut soft.c,
            &cqp.terminal_row,
            cqp.terminal_free,
            cqp.fallback_weight,
        );
        (qp::solve(&soft, warm)?, SolveStatus::SoftFallback)
    };
    Ok(CftocSolution {
        u_seq: sol.x.iter().copied().collect(),
        j_star: sol.cost,
        status,
        iterations: sol.iterations,
        kkt_residual: sol.kkt_residual,
    })
}
