//! Generation cost, consumption utility, and the welfare problems built on
//! them.
//!
//! Everything here minimises: welfare `W = U - C` is maximised by minimising
//! `-W`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, GridError, Result};
use crate::plant::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelfareWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for WelfareWeights {
    fn default() -> Self {
        WelfareWeights {
            alpha: 1e6,
            beta: 1e-6,
            gamma: 1.0,
        }
    }
}

impl WelfareWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w > 0.0 && w.is_finite()) {
                return Err(GridError::param(
                    format!("weights.{name}"),
                    format!("must be strictly positive, got {w}"),
                ));
            }
        }
        Ok(())
    }
}

/// Quadratic generation cost `sum I_s^2 / (2 pi_c)`.
pub fn cost(i_s: &[f64], pi_c: &[f64]) -> Result<f64> {
    check_len("pi_c", i_s.len(), pi_c.len())?;
    let mut total = 0.0;
    for (i, (&current, &pc)) in i_s.iter().zip(pi_c).enumerate() {
        if !(pc > 0.0) {
            return Err(GridError::param(format!("pi_c[{i}]"), format!("must be positive, got {pc}")));
        }
        total += current * current / (2.0 * pc);
    }
    Ok(total)
}

/// Quadratic consumption utility `-sum I_l^2 (1 - u_l)^2 / (2 pi_u)`.
///
/// A zero `pi_u` is only admissible for a load served in full.
pub fn utility(u_l: &[f64], i_l: &[f64], pi_u: &[f64]) -> Result<f64> {
    check_len("I_l", u_l.len(), i_l.len())?;
    check_len("pi_u", u_l.len(), pi_u.len())?;
    let mut total = 0.0;
    for (i, ((&u, &demand), &pu)) in u_l.iter().zip(i_l).zip(pi_u).enumerate() {
        let shortfall = demand * (1.0 - u);
        if pu > 0.0 {
            total -= shortfall * shortfall / (2.0 * pu);
        } else if pu == 0.0 && shortfall == 0.0 {
            continue;
        } else {
            return Err(GridError::param(
                format!("pi_u[{i}]"),
                format!("utility undefined for pi_u = {pu} with u_l = {u}"),
            ));
        }
    }
    Ok(total)
}

/// Optimum of the pure welfare problem (no control effort, no voltage
/// term, no box constraints).
#[derive(Debug, Clone, PartialEq)]
pub struct IdealWelfareSolution {
    pub lambda_opt: f64,
    pub i_s_opt: DVector<f64>,
    pub u_l_opt: DVector<f64>,
}

impl IdealWelfareSolution {
    /// Per-prosumer curtailed current `I_l (1 - u_l)`.
    pub fn curtailment(&self, i_l: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            i_l.len(),
            i_l.iter().zip(self.u_l_opt.iter()).map(|(d, u)| d * (1.0 - u)),
        )
    }
}

pub fn ideal_welfare_optimum(i_l: &[f64], pi_c: &[f64], pi_u: &[f64]) -> Result<IdealWelfareSolution> {
    let n = i_l.len();
    check_len("pi_c", n, pi_c.len())?;
    check_len("pi_u", n, pi_u.len())?;
    if let Some(i) = pi_u.iter().position(|&p| !(p >= 0.0)) {
        return Err(GridError::param(format!("pi_u[{i}]"), "must be nonnegative"));
    }
    let denom: f64 = pi_c.iter().sum::<f64>() + pi_u.iter().sum::<f64>();
    if !(denom > 0.0) {
        return Err(GridError::Degenerate(
            "sum of capacity and flexibility coefficients is zero".into(),
        ));
    }
    let lambda_opt = i_l.iter().sum::<f64>() / denom;
    let i_s_opt = DVector::from_iterator(n, pi_c.iter().map(|pc| pc * lambda_opt));
    let u_l_opt = DVector::from_iterator(
        n,
        i_l.iter().zip(pi_u).map(|(&d, &pu)| (d - lambda_opt * pu) / d),
    );
    Ok(IdealWelfareSolution {
        lambda_opt,
        i_s_opt,
        u_l_opt,
    })
}

/// Decision variables of the psycho-social-physical problem.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub u_s: DVector<f64>,
    pub u_l: DVector<f64>,
    pub i_s: DVector<f64>,
    pub v: DVector<f64>,
}

/// `-alpha W(u_l, I_s) + beta/2 |u_s|^2 + gamma/2 |V - V_d|^2`.
pub fn objective_value(point: &OperatingPoint, grid: &Grid, weights: &WelfareWeights) -> Result<f64> {
    let n = grid.n();
    for (what, v) in [("u_s", &point.u_s), ("u_l", &point.u_l), ("I_s", &point.i_s), ("V", &point.v)] {
        check_len(what, n, v.len())?;
    }
    let params = grid.prosumers();
    let pi_c: Vec<f64> = params.iter().map(|p| p.pi_c).collect();
    let pi_u: Vec<f64> = params.iter().map(|p| p.pi_u).collect();
    let i_l: Vec<f64> = params.iter().map(|p| p.i_l).collect();
    let welfare = utility(point.u_l.as_slice(), &i_l, &pi_u)? - cost(point.i_s.as_slice(), &pi_c)?;
    let deviation: f64 = params
        .iter()
        .zip(point.v.iter())
        .map(|(p, v)| (v - p.v_d).powi(2))
        .sum();
    Ok(-weights.alpha * welfare
        + 0.5 * weights.beta * point.u_s.norm_squared()
        + 0.5 * weights.gamma * deviation)
}

/// `min 1/2 x^T H x + g^T x  s.t.  A x = b,  lower <= x <= upper`.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
}

impl QpProblem {
    pub fn unconstrained_bounds(dim: usize) -> (Vec<Option<f64>>, Vec<Option<f64>>) {
        (vec![None; dim], vec![None; dim])
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundActivity {
    Free,
    AtLower,
    AtUpper,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers of `A x = b`, sign convention `H x + g + A^T nu + ... = 0`.
    pub eq_multipliers: DVector<f64>,
    /// Nonnegative multiplier of whichever bound is active (zero if free).
    pub bound_multipliers: DVector<f64>,
    pub activity: Vec<BoundActivity>,
    pub objective: f64,
}

/// Largest number of box-constrained variables the enumeration accepts.
pub const ORACLE_MAX_BOXED: usize = 12;

/// Solves a small strictly convex QP by enumerating every activity pattern
/// of the box constraints and solving the KKT system of each.
///
/// Exponential in the number of boxed variables; meant as an independent
/// reference for tiny instances, not as a solver.
pub fn brute_force_qp_oracle(problem: &QpProblem) -> Result<QpSolution> {
    let dim = problem.linear.len();
    check_len("hessian rows", dim, problem.hessian.nrows())?;
    check_len("hessian cols", dim, problem.hessian.ncols())?;
    check_len("constraint cols", dim, problem.eq_matrix.ncols())?;
    check_len("constraint rhs", problem.eq_matrix.nrows(), problem.eq_rhs.len())?;
    check_len("lower bounds", dim, problem.lower.len())?;
    check_len("upper bounds", dim, problem.upper.len())?;

    let boxed: Vec<usize> = (0..dim)
        .filter(|&i| problem.lower[i].is_some() || problem.upper[i].is_some())
        .collect();
    if boxed.len() > ORACLE_MAX_BOXED {
        return Err(GridError::Data(format!(
            "oracle enumerates at most {ORACLE_MAX_BOXED} boxed variables, got {}",
            boxed.len()
        )));
    }

    let scale = problem.hessian.amax().max(problem.linear.amax()).max(1.0);
    let tol = 1e-9;
    let mut best: Option<QpSolution> = None;
    let patterns = 3usize.pow(boxed.len() as u32);
    'pattern: for code in 0..patterns {
        let mut activity = vec![BoundActivity::Free; dim];
        let mut rest = code;
        for &i in &boxed {
            activity[i] = match rest % 3 {
                0 => BoundActivity::Free,
                1 if problem.lower[i].is_some() => BoundActivity::AtLower,
                2 if problem.upper[i].is_some() => BoundActivity::AtUpper,
                _ => continue 'pattern,
            };
            rest /= 3;
        }
        let Some(candidate) = solve_pattern(problem, &activity) else {
            continue;
        };
        for i in 0..dim {
            let xi = candidate.x[i];
            let slack_tol = tol * xi.abs().max(1.0);
            match activity[i] {
                BoundActivity::Free => {
                    if problem.lower[i].is_some_and(|lo| xi < lo - slack_tol)
                        || problem.upper[i].is_some_and(|hi| xi > hi + slack_tol)
                    {
                        continue 'pattern;
                    }
                }
                _ => {
                    if candidate.bound_multipliers[i] < -tol * scale {
                        continue 'pattern;
                    }
                }
            }
        }
        let better = best.as_ref().is_none_or(|b| candidate.objective < b.objective);
        if better {
            best = Some(candidate);
        }
    }
    best.ok_or_else(|| GridError::Infeasible("no activity pattern satisfies the KKT conditions".into()))
}

fn solve_pattern(problem: &QpProblem, activity: &[BoundActivity]) -> Option<QpSolution> {
    let dim = problem.linear.len();
    let n_eq = problem.eq_matrix.nrows();
    let fixed: Vec<(usize, f64)> = activity
        .iter()
        .enumerate()
        .filter_map(|(i, a)| match a {
            BoundActivity::Free => None,
            BoundActivity::AtLower => Some((i, problem.lower[i].unwrap())),
            BoundActivity::AtUpper => Some((i, problem.upper[i].unwrap())),
        })
        .collect();
    let size = dim + n_eq + fixed.len();
    let mut kkt = DMatrix::zeros(size, size);
    let mut rhs = DVector::zeros(size);
    kkt.view_mut((0, 0), (dim, dim)).copy_from(&problem.hessian);
    kkt.view_mut((0, dim), (dim, n_eq))
        .copy_from(&problem.eq_matrix.transpose());
    kkt.view_mut((dim, 0), (n_eq, dim)).copy_from(&problem.eq_matrix);
    rhs.rows_mut(0, dim).copy_from(&(-&problem.linear));
    rhs.rows_mut(dim, n_eq).copy_from(&problem.eq_rhs);
    for (j, &(i, value)) in fixed.iter().enumerate() {
        kkt[(i, dim + n_eq + j)] = 1.0;
        kkt[(dim + n_eq + j, i)] = 1.0;
        rhs[dim + n_eq + j] = value;
    }
    let lu = kkt.lu();
    if !lu.is_invertible() {
        return None;
    }
    let sol = lu.solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let x = sol.rows(0, dim).into_owned();
    let eq_multipliers = sol.rows(dim, n_eq).into_owned();
    let mut bound_multipliers = DVector::zeros(dim);
    for (j, &(i, _)) in fixed.iter().enumerate() {
        let mu = sol[dim + n_eq + j];
        // H x + g + A^T nu + mu e_i = 0; lower bound needs mu <= 0, upper mu >= 0
        bound_multipliers[i] = match activity[i] {
            BoundActivity::AtLower => -mu,
            _ => mu,
        };
    }
    let objective = problem.objective(&x);
    Some(QpSolution {
        x,
        eq_multipliers,
        bound_multipliers,
        activity: activity.to_vec(),
        objective,
    })
}

/// Reduced form of the pure welfare problem over `x = [I_s, u_l]`.
///
/// Of the steady-state constraints only the total current balance
/// `1^T I_s = 1^T I_l u_l` restricts `(I_s, u_l)`: the remaining ones fix
/// `u_s` and `V` (up to a constant) and do not enter the objective.
/// Requires every `pi_u > 0`.
pub fn ideal_welfare_qp(i_l: &[f64], pi_c: &[f64], pi_u: &[f64]) -> Result<QpProblem> {
    let n = i_l.len();
    check_len("pi_c", n, pi_c.len())?;
    check_len("pi_u", n, pi_u.len())?;
    let mut hessian = DMatrix::zeros(2 * n, 2 * n);
    let mut linear = DVector::zeros(2 * n);
    let mut eq = DMatrix::zeros(1, 2 * n);
    for i in 0..n {
        if !(pi_c[i] > 0.0 && pi_u[i] > 0.0) {
            return Err(GridError::param(
                format!("prosumers[{i}]"),
                "welfare QP needs strictly positive pi_c and pi_u",
            ));
        }
        hessian[(i, i)] = 1.0 / pi_c[i];
        let k = i_l[i] * i_l[i] / pi_u[i];
        hessian[(n + i, n + i)] = k;
        linear[n + i] = -k;
        eq[(0, i)] = 1.0;
        eq[(0, n + i)] = -i_l[i];
    }
    let (lower, upper) = QpProblem::unconstrained_bounds(2 * n);
    Ok(QpProblem {
        hessian,
        linear,
        eq_matrix: eq,
        eq_rhs: DVector::zeros(1),
        lower,
        upper,
    })
}

/// Psycho-social-physical problem over `x = [u_s, u_l, I_s, V]` with the
/// steady-state equalities
/// `u_s - R_s I_s - V = 0` and `-I_l u_l + I_s - L V = 0`,
/// optionally with `u_l in [u_l_min, 1]` and `V in [V_min, V_max]`.
///
/// The equality multipliers returned by the oracle are `[lambda_a, lambda_b]`
/// in the controller's sign convention.
pub fn welfare_qp(grid: &Grid, weights: &WelfareWeights, load_box: bool, voltage_band: bool) -> Result<QpProblem> {
    weights.validate()?;
    let n = grid.n();
    let lap = grid.laplacian();
    let dim = 4 * n;
    let (us, ul, is, v) = (0, n, 2 * n, 3 * n);
    let mut hessian = DMatrix::zeros(dim, dim);
    let mut linear = DVector::zeros(dim);
    let mut eq = DMatrix::zeros(2 * n, dim);
    let (mut lower, mut upper) = QpProblem::unconstrained_bounds(dim);
    for (i, p) in grid.prosumers().iter().enumerate() {
        if !(p.pi_u > 0.0) {
            return Err(GridError::param(format!("prosumers[{i}].pi_u"), "welfare QP needs pi_u > 0"));
        }
        let k = weights.alpha * p.i_l * p.i_l / p.pi_u;
        hessian[(us + i, us + i)] = weights.beta;
        hessian[(ul + i, ul + i)] = k;
        linear[ul + i] = -k;
        hessian[(is + i, is + i)] = weights.alpha / p.pi_c;
        hessian[(v + i, v + i)] = weights.gamma;
        linear[v + i] = -weights.gamma * p.v_d;

        eq[(i, us + i)] = 1.0;
        eq[(i, is + i)] = -p.r_s;
        eq[(i, v + i)] = -1.0;

        eq[(n + i, ul + i)] = -p.i_l;
        eq[(n + i, is + i)] = 1.0;
        for j in 0..n {
            eq[(n + i, v + j)] = -lap[(i, j)];
        }
        if load_box {
            lower[ul + i] = Some(p.u_l_min);
            upper[ul + i] = Some(1.0);
        }
        if voltage_band {
            lower[v + i] = Some(p.v_min);
            upper[v + i] = Some(p.v_max);
        }
    }
    Ok(QpProblem {
        hessian,
        linear,
        eq_matrix: eq,
        eq_rhs: DVector::zeros(2 * n),
        lower,
        upper,
    })
}

impl OperatingPoint {
    /// Splits a `[u_s, u_l, I_s, V]` vector as laid out by [`welfare_qp`].
    pub fn from_stacked(x: &DVector<f64>, n: usize) -> Self {
        OperatingPoint {
            u_s: x.rows(0, n).into_owned(),
            u_l: x.rows(n, n).into_owned(),
            i_s: x.rows(2 * n, n).into_owned(),
            v: x.rows(3 * n, n).into_owned(),
        }
    }
}
