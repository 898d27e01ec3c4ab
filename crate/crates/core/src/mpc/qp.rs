//! Primal active-set solver for strictly convex QPs with box bounds and at
//! most one linear equality:
//!
//! ```text
//! minimize   ½ xᵀ H x + fᵀ x + c
//! subject to lb ≤ x ≤ ub,   aᵀ x = b
//! ```
//!
//! Horizons here are a few dozen variables, so every iteration solves the
//! reduced KKT system densely.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BoxQp {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub c: f64,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
    pub eq: Option<(DVector<f64>, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bound {
    Free,
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub cost: f64,
    pub iterations: usize,
    /// Multiplier of the equality, if present.
    pub eq_multiplier: Option<f64>,
    /// Bound multipliers: positive on active lower bounds, negative on active
    /// upper bounds, zero elsewhere. `H x + f + a ν − μ = 0`.
    pub bound_multipliers: DVector<f64>,
    /// Infinity norm of the stationarity residual.
    pub kkt_residual: f64,
}

impl BoxQp {
    pub fn dim(&self) -> usize {
        self.f.len()
    }

    pub fn cost(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.f.dot(x) + self.c
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        if self.h.shape() != (n, n) || self.lb.len() != n || self.ub.len() != n {
            return Err(Error::Config("QP dimensions are inconsistent".into()));
        }
        if let Some((a, b)) = &self.eq {
            if a.len() != n || !b.is_finite() {
                return Err(Error::Config("equality row has the wrong length".into()));
            }
        }
        if self.lb.iter().zip(self.ub.iter()).any(|(l, u)| !(l <= u)) {
            return Err(Error::Config("lower bound above upper bound".into()));
        }
        Ok(())
    }

    /// Range of `aᵀx` over the box, as (min, max, argmin, argmax).
    fn eq_range(&self, a: &DVector<f64>) -> (f64, f64, DVector<f64>, DVector<f64>) {
        let lo = DVector::from_fn(self.dim(), |i, _| {
            if a[i] >= 0.0 {
                self.lb[i]
            } else {
                self.ub[i]
            }
        });
        let hi = DVector::from_fn(self.dim(), |i, _| {
            if a[i] >= 0.0 {
                self.ub[i]
            } else {
                self.lb[i]
            }
        });
        (a.dot(&lo), a.dot(&hi), lo, hi)
    }

    /// Whether the equality can be met inside the box.
    pub fn is_feasible(&self) -> bool {
        match &self.eq {
            None => true,
            Some((a, b)) => {
                let (lo, hi, _, _) = self.eq_range(a);
                let tol = 1e-9 * (1.0 + b.abs());
                *b >= lo - tol && *b <= hi + tol
            }
        }
    }

    fn initial_point(&self, warm: Option<&[f64]>) -> Result<DVector<f64>> {
        let n = self.dim();
        let mut x = DVector::from_fn(n, |i, _| {
            let v = warm.and_then(|w| w.get(i).copied()).unwrap_or(0.0);
            v.clamp(self.lb[i], self.ub[i])
        });
        if let Some((a, b)) = &self.eq {
            if !self.is_feasible() {
                return Err(Error::Numerical(
                    "equality constraint cannot be met inside the box".into(),
                ));
            }
            let (_, _, lo, hi) = self.eq_range(a);
            let gap = b - a.dot(&x);
            let target = if gap > 0.0 { hi } else { lo };
            let dir = target - &x;
            let slope = a.dot(&dir);
            if gap != 0.0 && slope != 0.0 {
                let s = (gap / slope).clamp(0.0, 1.0);
                x += dir * s;
                for i in 0..n {
                    x[i] = x[i].clamp(self.lb[i], self.ub[i]);
                }
            }
        }
        Ok(x)
    }
}

/// Solves `qp`, optionally starting from `warm`.
pub fn solve(qp: &BoxQp, warm: Option<&[f64]>) -> Result<QpSolution> {
    qp.validate()?;
    let n = qp.dim();
    let mut x = qp.initial_point(warm)?;
    let mut state: Vec<Bound> = (0..n)
        .map(|i| {
            if x[i] <= qp.lb[i] {
                Bound::Lower
            } else if x[i] >= qp.ub[i] {
                Bound::Upper
            } else {
                Bound::Free
            }
        })
        .collect();
    let max_iter = 50 * n + 100;
    let eq = qp.eq.as_ref();

    for iter in 1..=max_iter {
        let g = &qp.h * &x + &qp.f;
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == Bound::Free).collect();
        let (p_free, nu) = reduced_step(qp, &x, &g, &free, &state)?;

        let p_norm = p_free.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = 1.0 + x.amax();
        if p_norm <= 1e-12 * scale {
            // stationary on the working set: check bound multipliers
            let nu_v = nu.unwrap_or(0.0);
            let grad = |i: usize| g[i] + eq.map_or(0.0, |(a, _)| a[i] * nu_v);
            let tol = 1e-10 * (1.0 + g.amax());
            let worst = (0..n)
                .filter_map(|i| match state[i] {
                    Bound::Free => None,
                    Bound::Lower => Some((i, grad(i))),
                    Bound::Upper => Some((i, -grad(i))),
                })
                .filter(|(i, _)| qp.lb[*i] < qp.ub[*i])
                .min_by(|a, b| a.1.total_cmp(&b.1));
            match worst {
                Some((i, lam)) if lam < -tol => {
                    state[i] = Bound::Free;
                    continue;
                }
                _ => {
                    let mu = DVector::from_fn(n, |i, _| match state[i] {
                        Bound::Free => 0.0,
                        _ => grad(i),
                    });
                    let kkt = free.iter().fold(0.0f64, |m, &i| m.max(grad(i).abs()));
                    return Ok(QpSolution {
                        cost: qp.cost(&x),
                        x,
                        iterations: iter,
                        eq_multiplier: eq.map(|_| nu_v),
                        bound_multipliers: mu,
                        kkt_residual: kkt,
                    });
                }
            }
        }

        // ratio test along p
        let mut alpha = 1.0;
        let mut blocking = None;
        for (k, &i) in free.iter().enumerate() {
            let pi = p_free[k];
            if pi < 0.0 {
                let a = (qp.lb[i] - x[i]) / pi;
                if a < alpha {
                    alpha = a.max(0.0);
                    blocking = Some((i, Bound::Lower));
                }
            } else if pi > 0.0 {
                let a = (qp.ub[i] - x[i]) / pi;
                if a < alpha {
                    alpha = a.max(0.0);
                    blocking = Some((i, Bound::Upper));
                }
            }
        }
        for (k, &i) in free.iter().enumerate() {
            x[i] += alpha * p_free[k];
        }
        if let Some((i, side)) = blocking {
            x[i] = if side == Bound::Lower {
                qp.lb[i]
            } else {
                qp.ub[i]
            };
            state[i] = side;
        }
    }
    Err(Error::Numerical(format!(
        "active-set QP did not converge in {max_iter} iterations"
    )))
}

/// Newton step on the free variables keeping the working set and the
/// equality; returns the step and the equality multiplier.
fn reduced_step(
    qp: &BoxQp,
    x: &DVector<f64>,
    g: &DVector<f64>,
    free: &[usize],
    state: &[Bound],
) -> Result<(Vec<f64>, Option<f64>)> {
    let m = free.len();
    let h_ff = DMatrix::from_fn(m, m, |r, c| qp.h[(free[r], free[c])]);
    let g_f = DVector::from_fn(m, |r, _| g[free[r]]);
    let eq_row = qp.eq.as_ref().map(|(a, b)| {
        let a_f = DVector::from_fn(m, |r, _| a[free[r]]);
        (a, a_f, b - a.dot(x))
    });
    match eq_row {
        Some((a, a_f, resid)) if a_f.amax() > 1e-14 * a.amax() => {
            let mut kkt = DMatrix::zeros(m + 1, m + 1);
            kkt.view_mut((0, 0), (m, m)).copy_from(&h_ff);
            kkt.view_mut((0, m), (m, 1)).copy_from(&a_f);
            kkt.view_mut((m, 0), (1, m)).copy_from(&a_f.transpose());
            let mut rhs = DVector::zeros(m + 1);
            rhs.rows_mut(0, m).copy_from(&(-g_f));
            rhs[m] = resid;
            let sol = kkt
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::Numerical("singular KKT system".into()))?;
            Ok((sol.rows(0, m).iter().copied().collect(), Some(sol[m])))
        }
        Some((a, _, _)) => {
            // the equality does not involve any free variable; its multiplier
            // is whatever keeps the most active bounds dual feasible
            let p = newton(&h_ff, &g_f)?;
            Ok((p, Some(interval_multiplier(a, g, state))))
        }
        None => Ok((newton(&h_ff, &g_f)?, None)),
    }
}

fn newton(h_ff: &DMatrix<f64>, g_f: &DVector<f64>) -> Result<Vec<f64>> {
    if g_f.is_empty() {
        return Ok(Vec::new());
    }
    let chol = h_ff
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("Hessian is not positive definite".into()))?;
    Ok(chol.solve(&(-g_f)).iter().copied().collect())
}

fn interval_multiplier(a: &DVector<f64>, g: &DVector<f64>, state: &[Bound]) -> f64 {
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for (i, s) in state.iter().enumerate() {
        if a[i] == 0.0 {
            continue;
        }
        // lower: g + aν ≥ 0, upper: g + aν ≤ 0
        let root = -g[i] / a[i];
        let lower_bound = match s {
            Bound::Free => continue,
            Bound::Lower => a[i] > 0.0,
            Bound::Upper => a[i] < 0.0,
        };
        if lower_bound {
            lo = lo.max(root);
        } else {
            hi = hi.min(root);
        }
    }
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => 0.5 * (lo + hi),
        (true, false) => lo,
        (false, true) => hi,
        (false, false) => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn qp2(eq: Option<(DVector<f64>, f64)>) -> BoxQp {
        BoxQp {
            h: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            f: DVector::from_vec(vec![-1.0, -1.0]),
            c: 0.0,
            lb: DVector::from_vec(vec![-10.0, -10.0]),
            ub: DVector::from_vec(vec![10.0, 10.0]),
            eq,
        }
    }

    #[test]
    fn interior_optimum_is_newton_point() {
        let qp = qp2(None);
        let sol = solve(&qp, None).unwrap();
        let expect = qp.h.clone().lu().solve(&(-&qp.f)).unwrap();
        assert!((sol.x - expect).amax() < 1e-12);
    }

    #[test]
    fn active_bound() {
        let mut qp = qp2(None);
        qp.ub = DVector::from_vec(vec![0.1, 10.0]);
        let sol = solve(&qp, None).unwrap();
        assert_abs_diff_eq!(sol.x[0], 0.1, epsilon = 1e-15);
        // x1 minimizes with x0 fixed: x1 = (1 - 0.5*0.1) / 1
        assert_abs_diff_eq!(sol.x[1], 0.95, epsilon = 1e-12);
        assert!(sol.bound_multipliers[0] < 0.0);
    }

    #[test]
    fn equality_and_infeasibility() {
        let a = DVector::from_vec(vec![1.0, 1.0]);
        let sol = solve(&qp2(Some((a.clone(), 3.0))), None).unwrap();
        assert_abs_diff_eq!(sol.x.sum(), 3.0, epsilon = 1e-12);
        assert!(sol.kkt_residual < 1e-10);
        let bad = qp2(Some((a, 30.0)));
        assert!(!bad.is_feasible());
        assert!(solve(&bad, None).is_err());
    }

    #[test]
    fn warm_start_reaches_same_point() {
        let mut qp = qp2(None);
        qp.lb = DVector::from_vec(vec![0.6, -10.0]);
        let cold = solve(&qp, None).unwrap();
        let warm = solve(&qp, Some(&[5.0, -3.0])).unwrap();
        assert!((cold.x - warm.x).amax() < 1e-12);
    }
}
