//! Closed-loop simulation, convergence detection and run certificates.
//!
//! The interconnected plant and controller form an affine system
//! `M x' = A x + b` whose time scales span roughly sixteen decades: the
//! load-input gradient `alpha I_l^2 / pi_u` reaches `1e9`, while the slowest
//! dual modes decay at a rate near `1e-7`. The integrator is therefore
//! backward Euler in increment form with a geometrically growing step,
//! `(M - h A) dx = h (A x + b)`. Backward Euler contracts the rate in the
//! `M`-weighted norm whenever `A` is skew plus negative semidefinite, which
//! is exactly the structure of the interconnection, so the closed-loop
//! storage `S_cl` cannot grow from one step to the next in the absence of
//! projections.
//!
//! Inequality constraints are enforced by an active set refreshed within
//! each step: a variable that would leave its box is pinned to the bound,
//! and a pinned variable is released as soon as its unprojected rate points
//! back inside.

use std::fmt;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{
    complementary_slackness, interconnect, loss_penalty_identity, ConstraintMode,
    ControllerGains, ControllerState, KktResidual, CONTROLLER_BLOCKS,
};
use crate::error::{check_len, GridError, Result};
use crate::network::GridTopology;
use crate::plant::{Grid, GridInput, GridState, LineParams, PassivitySample, ProsumerParams};
use crate::psychosocial::{
    flexibility_level, tune_pi_u, ApplianceModel, FlexibilitySpread, ValueProfile, NON_ADOPTER_PI_U,
};
use crate::welfare::ideal_welfare_optimum;

/// Controller block offsets inside the stacked state.
pub mod block {
    pub const U_S: usize = 0;
    pub const U_L: usize = 1;
    pub const I_S: usize = 2;
    pub const V: usize = 3;
    pub const LAMBDA_A: usize = 4;
    pub const LAMBDA_B: usize = 5;
    pub const ETA_LO: usize = 6;
    pub const ETA_HI: usize = 7;
}

/// Index map of the stacked closed-loop state
/// `[I_s, I, V, u_s*, u_l*, I_s*, V*, lambda_a, lambda_b, eta_lo, eta_hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateLayout {
    pub n: usize,
    pub m: usize,
}

impl StateLayout {
    pub fn dim(&self) -> usize {
        self.plant_dim() + CONTROLLER_BLOCKS * self.n
    }

    pub fn plant_dim(&self) -> usize {
        2 * self.n + self.m
    }

    pub fn i_s(&self, i: usize) -> usize {
        i
    }

    pub fn i(&self, k: usize) -> usize {
        self.n + k
    }

    pub fn v(&self, i: usize) -> usize {
        self.n + self.m + i
    }

    pub fn ctrl(&self, block: usize, i: usize) -> usize {
        self.plant_dim() + block * self.n + i
    }

    pub fn ctrl_range(&self, block: usize) -> Range<usize> {
        let start = self.ctrl(block, 0);
        start..start + self.n
    }
}

/// Physical and controller state together.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopState {
    pub grid: GridState,
    pub controller: ControllerState,
}

impl ClosedLoopState {
    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.grid.i_s.len();
        let m = self.grid.i.len();
        let layout = StateLayout { n, m };
        let mut x = DVector::zeros(layout.dim());
        x.rows_mut(0, n).copy_from(&self.grid.i_s);
        x.rows_mut(n, m).copy_from(&self.grid.i);
        x.rows_mut(n + m, n).copy_from(&self.grid.v);
        x.rows_mut(layout.plant_dim(), CONTROLLER_BLOCKS * n)
            .copy_from(&self.controller.to_vector());
        x
    }

    pub fn from_vector(x: &DVector<f64>, layout: StateLayout) -> Result<Self> {
        check_len("closed-loop vector", layout.dim(), x.len())?;
        let (n, m) = (layout.n, layout.m);
        Ok(ClosedLoopState {
            grid: GridState {
                i_s: x.rows(0, n).into_owned(),
                i: x.rows(n, m).into_owned(),
                v: x.rows(n + m, n).into_owned(),
            },
            controller: ControllerState::from_vector(&x.rows(layout.plant_dim(), CONTROLLER_BLOCKS * n).into_owned(), n)?,
        })
    }

    /// Cold start: voltages and their estimates at `V_d`, source estimates at
    /// `V_d`, loads fully served, everything else zero.
    pub fn cold_start(grid: &Grid) -> Self {
        let n = grid.n();
        let v_d = grid.prosumer_vec(|p| p.v_d);
        let mut grid_state = GridState::zeros(n, grid.m());
        grid_state.v = v_d.clone();
        let mut controller = ControllerState::zeros(n);
        controller.v = v_d.clone();
        controller.u_s = v_d;
        controller.u_l = DVector::from_element(n, 1.0);
        ClosedLoopState {
            grid: grid_state,
            controller,
        }
    }
}

/// Affine closed-loop model `M x' = A x + b` of the interconnection.
///
/// Internally the load block holds the curtailment `d = 1 - u_l*` rather
/// than `u_l*`. Its gradient coefficient `alpha I_l^2 / pi_u` can exceed
/// `1e10`, so one unit in the last place of `u_l*` near 1 already moves the
/// rate by about `1e-6`; `d` is resolved far more finely where it matters.
/// `a`, `b` and every vector called `internal` use these coordinates.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub grid: Grid,
    pub gains: ControllerGains,
    pub mode: ConstraintMode,
    pub layout: StateLayout,
    pub mass: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// How the plant sees one load input: through the controller variable, or
/// held at a saturation value of the `[0, 1]` clamp.
type Saturation = Option<f64>;

impl ClosedLoop {
    pub fn new(grid: &Grid, gains: &ControllerGains, mode: ConstraintMode) -> Result<Self> {
        gains.validate()?;
        for (i, p) in grid.prosumers().iter().enumerate() {
            if !(p.pi_u > 0.0) {
                return Err(GridError::param(
                    format!("prosumers[{i}].pi_u"),
                    "the controller needs pi_u > 0 (use a small floor for non-adopters)",
                ));
            }
        }
        let (n, m) = (grid.n(), grid.m());
        let layout = StateLayout { n, m };
        let dim = layout.dim();
        let w = gains.weights;
        let mut mass = DVector::zeros(dim);
        let mut a = DMatrix::zeros(dim, dim);
        let mut b = DVector::zeros(dim);
        let lap = grid.laplacian();
        let taus = gains.block_taus();
        let c = |blk: usize, i: usize| layout.ctrl(blk, i);
        use block::*;

        for (i, p) in grid.prosumers().iter().enumerate() {
            let (is, v) = (layout.i_s(i), layout.v(i));
            mass[is] = p.l_s;
            mass[v] = p.c;
            for (blk, tau) in taus.iter().enumerate() {
                mass[c(blk, i)] = *tau;
            }

            a[(is, is)] = -p.r_s;
            a[(is, v)] = -1.0;
            a[(is, c(U_S, i))] = 1.0;

            a[(v, is)] = 1.0;
            a[(v, c(U_L, i))] = -p.i_l;

            let us = c(U_S, i);
            a[(us, us)] = -w.beta;
            a[(us, c(LAMBDA_A, i))] = -1.0;
            a[(us, is)] = -1.0;

            let ul = c(U_L, i);
            let k = w.alpha * p.i_l * p.i_l / p.pi_u;
            a[(ul, ul)] = -k;
            b[ul] = k;
            a[(ul, c(LAMBDA_B, i))] = p.i_l;
            a[(ul, v)] = p.i_l;

            let iss = c(I_S, i);
            a[(iss, iss)] = -w.alpha / p.pi_c;
            a[(iss, c(LAMBDA_A, i))] = p.r_s;
            a[(iss, c(LAMBDA_B, i))] = -1.0;

            let vs = c(V, i);
            a[(vs, vs)] = -w.gamma;
            b[vs] = w.gamma * p.v_d;
            a[(vs, c(LAMBDA_A, i))] = 1.0;

            let la = c(LAMBDA_A, i);
            a[(la, us)] = 1.0;
            a[(la, iss)] = -p.r_s;
            a[(la, vs)] = -1.0;

            let lb = c(LAMBDA_B, i);
            a[(lb, ul)] = -p.i_l;
            a[(lb, iss)] = 1.0;

            for j in 0..n {
                let l = lap[(i, j)];
                if l != 0.0 {
                    a[(vs, c(LAMBDA_B, j))] += l;
                    a[(lb, c(V, j))] -= l;
                }
            }

            if mode.voltage_band {
                let (lo, hi) = (c(ETA_LO, i), c(ETA_HI, i));
                a[(vs, lo)] = 1.0;
                a[(vs, hi)] = -1.0;
                a[(lo, vs)] = -1.0;
                b[lo] = p.v_min;
                a[(hi, vs)] = 1.0;
                b[hi] = -p.v_max;
            }
        }
        for (k, (&(pos, neg), line)) in grid.topology().edges().iter().zip(grid.lines()).enumerate() {
            let ik = layout.i(k);
            mass[ik] = line.l;
            a[(ik, ik)] = -line.r;
            a[(ik, layout.v(pos))] = -1.0;
            a[(ik, layout.v(neg))] = 1.0;
            a[(layout.v(pos), ik)] = 1.0;
            a[(layout.v(neg), ik)] = -1.0;
        }
        // switch the load block to curtailment d = 1 - u_l*
        for i in 0..n {
            let ul = c(U_L, i);
            b += a.column(ul);
            a.row_mut(ul).neg_mut();
            b[ul] = -b[ul];
            a.column_mut(ul).neg_mut();
        }
        Ok(ClosedLoop {
            grid: grid.clone(),
            gains: *gains,
            mode,
            layout,
            mass,
            a,
            b,
        })
    }

    fn effective(&self, saturation: &[Saturation]) -> (DMatrix<f64>, DVector<f64>) {
        let mut a = self.a.clone();
        let mut b = self.b.clone();
        for (i, sat) in saturation.iter().enumerate() {
            if let Some(s) = sat {
                let v = self.layout.v(i);
                let ul = self.layout.ctrl(block::U_L, i);
                let i_l = self.grid.prosumers()[i].i_l;
                a[(v, ul)] = 0.0;
                b[v] += i_l * (1.0 - s);
            }
        }
        (a, b)
    }

    fn saturation_of(&self, x: &DVector<f64>) -> Vec<Saturation> {
        (0..self.layout.n)
            .map(|i| {
                let d = x[self.layout.ctrl(block::U_L, i)];
                if d > 1.0 {
                    Some(0.0)
                } else if d < 0.0 {
                    Some(1.0)
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn to_internal(&self, state: &ClosedLoopState) -> DVector<f64> {
        let mut x = state.to_vector();
        self.flip_load_block(&mut x);
        x
    }

    pub fn from_internal(&self, x: &DVector<f64>) -> Result<ClosedLoopState> {
        let mut y = x.clone();
        self.flip_load_block(&mut y);
        ClosedLoopState::from_vector(&y, self.layout)
    }

    fn flip_load_block(&self, x: &mut DVector<f64>) {
        for k in self.layout.ctrl_range(block::U_L) {
            x[k] = 1.0 - x[k];
        }
    }

    /// Unprojected closed-loop rate `M^-1 (A x + b)` of a stacked physical
    /// state, including the plant's load clamp.
    pub fn rate(&self, state: &DVector<f64>) -> DVector<f64> {
        let mut x = state.clone();
        self.flip_load_block(&mut x);
        let (a, b) = self.effective(&self.saturation_of(&x));
        let mut r = self.residual(&a, &b, &x).component_div(&self.mass);
        for k in self.layout.ctrl_range(block::U_L) {
            r[k] = -r[k];
        }
        r
    }

    /// `A x + b`, with the rows that cancel large terms at equilibrium
    /// evaluated in grouped form: the curtailment row as
    /// `-(k d + I_l (lambda_b + V))` and the Laplacian of `lambda_b` as
    /// sums of neighbour differences. Near the optimum these rows are
    /// differences of terms around `1e9`, and the plain product loses the
    /// last digits the convergence test relies on.
    fn residual(&self, a: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        let mut r = a * x + b;
        let layout = self.layout;
        let lap = self.grid.laplacian();
        let w = self.gains.weights;
        use block::*;
        for (i, p) in self.grid.prosumers().iter().enumerate() {
            let c = |blk: usize, j: usize| x[layout.ctrl(blk, j)];
            let k = w.alpha * p.i_l * p.i_l / p.pi_u;
            r[layout.ctrl(U_L, i)] = -(k * c(U_L, i) + p.i_l * (c(LAMBDA_B, i) + x[layout.v(i)]));

            let mut lap_lb = 0.0;
            for j in 0..layout.n {
                if j != i && lap[(i, j)] != 0.0 {
                    lap_lb -= lap[(i, j)] * (c(LAMBDA_B, i) - c(LAMBDA_B, j));
                }
            }
            let mut vs = -w.gamma * (c(V, i) - p.v_d) + c(LAMBDA_A, i) + lap_lb;
            if self.mode.voltage_band {
                vs += c(ETA_LO, i) - c(ETA_HI, i);
            }
            r[layout.ctrl(V, i)] = vs;
        }
        r
    }

    /// Closed-loop storage `1/2 x'^T M x'` split into plant and controller
    /// parts.
    pub fn storage(&self, rate: &DVector<f64>) -> (f64, f64) {
        let p = self.layout.plant_dim();
        let mut plant = 0.0;
        let mut ctrl = 0.0;
        for (k, (r, mass)) in rate.iter().zip(self.mass.iter()).enumerate() {
            let e = 0.5 * mass * r * r;
            if k < p {
                plant += e;
            } else {
                ctrl += e;
            }
        }
        (plant, ctrl)
    }

    /// Internal equilibrium with the given variables held fixed, by a direct
    /// solve with residual refinement.
    pub(crate) fn equilibrium(&self, pinned: &[(usize, f64)], saturation: &[Saturation]) -> Result<DVector<f64>> {
        let (a0, b0) = self.effective(saturation);
        let (mut a, mut b) = (a0.clone(), b0.clone());
        self.freeze_inactive_band(&mut a, &mut b);
        for &(k, value) in pinned {
            a.row_mut(k).fill(0.0);
            a[(k, k)] = 1.0;
            b[k] = -value;
        }
        let lu = a.clone().lu();
        let singular = || GridError::Numeric("closed-loop equilibrium system is singular".into());
        let mut x = lu.solve(&(-&b)).ok_or_else(singular)?;
        // refinement against the grouped residual
        for _ in 0..3 {
            let mut r = self.residual(&a0, &b0, &x);
            if !self.mode.voltage_band {
                for blk in [block::ETA_LO, block::ETA_HI] {
                    for k in self.layout.ctrl_range(blk) {
                        r[k] = x[k];
                    }
                }
            }
            for &(k, value) in pinned {
                r[k] = x[k] - value;
            }
            x -= lu.solve(&r).ok_or_else(singular)?;
        }
        Ok(x)
    }

    /// With the band off the `eta` rows are identically zero; pin them so the
    /// direct solve stays well posed.
    fn freeze_inactive_band(&self, a: &mut DMatrix<f64>, b: &mut DVector<f64>) {
        if self.mode.voltage_band {
            return;
        }
        for blk in [block::ETA_LO, block::ETA_HI] {
            for k in self.layout.ctrl_range(blk) {
                a.row_mut(k).fill(0.0);
                a[(k, k)] = 1.0;
                b[k] = 0.0;
            }
        }
    }

    /// Cold-start equilibrium of the unconstrained loop.
    pub fn unconstrained_equilibrium(&self) -> Result<ClosedLoopState> {
        let x = self.equilibrium(&[], &vec![None; self.layout.n])?;
        self.from_internal(&x)
    }

    /// KKT residual of an internal state, read off the controller rows of
    /// `A x + b`; agrees with [`kkt_residual`] evaluated with the plant ports.
    pub fn kkt_internal(&self, x: &DVector<f64>) -> KktResidual {
        let (a, b) = self.effective(&self.saturation_of(x));
        let r = self.residual(&a, &b, x);
        let layout = self.layout;
        let block_max = |blk: usize| layout.ctrl_range(blk).map(|k| r[k].abs()).fold(0.0, f64::max);
        use block::*;
        let mut out = KktResidual {
            source_input: block_max(U_S),
            generation: block_max(I_S),
            voltage: block_max(V),
            filter_balance: block_max(LAMBDA_A),
            current_balance: block_max(LAMBDA_B),
            ..KktResidual::default()
        };
        for (i, p) in self.grid.prosumers().iter().enumerate() {
            let k = layout.ctrl(U_L, i);
            let (d, grad) = (x[k], r[k]);
            let load = if self.mode.load_box {
                let d_max = 1.0 - p.u_l_min;
                out.inequality = out.inequality.max(d - d_max).max(-d);
                if d >= d_max {
                    (-grad).max(0.0)
                } else if d <= 0.0 {
                    grad.max(0.0)
                } else {
                    grad.abs()
                }
            } else {
                grad.abs()
            };
            out.load_input = out.load_input.max(load);
            if self.mode.voltage_band {
                for blk in [ETA_LO, ETA_HI] {
                    let k = layout.ctrl(blk, i);
                    let projected = if x[k] > 0.0 { r[k].abs() } else { r[k].max(0.0) };
                    out.inequality = out.inequality.max(projected).max(-x[k]);
                }
            }
        }
        out.max = out.breakdown().iter().fold(0.0, |acc, (_, v)| acc.max(*v));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegrationSettings {
    /// First step length.
    pub step: f64,
    /// Factor applied to the step after every accepted step.
    pub growth: f64,
    pub max_step: f64,
    /// Simulated time after which the run stops unconverged.
    pub horizon: f64,
    /// Convergence threshold on the infinity norm of the projected rate.
    pub tolerance: f64,
    /// Number of consecutive sub-tolerance steps that count as converged.
    pub consecutive: usize,
    /// Record every `decimation`-th step (the last one is always kept).
    pub decimation: usize,
    /// State infinity norm treated as divergence.
    pub divergence: f64,
    pub max_steps: usize,
}

impl Default for IntegrationSettings {
    fn default() -> Self {
        IntegrationSettings {
            step: 1e-5,
            growth: 1.05,
            max_step: 1e7,
            horizon: 1e10,
            tolerance: 1e-6,
            consecutive: 100,
            decimation: 1,
            divergence: 1e9,
            max_steps: 100_000,
        }
    }
}

impl IntegrationSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("step", self.step),
            ("max_step", self.max_step),
            ("horizon", self.horizon),
            ("tolerance", self.tolerance),
            ("divergence", self.divergence),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GridError::param(format!("integration.{name}"), format!("must be positive, got {v}")));
            }
        }
        if !(self.growth >= 1.0 && self.growth.is_finite()) {
            return Err(GridError::param("integration.growth", format!("must be at least 1, got {}", self.growth)));
        }
        if self.max_step < self.step {
            return Err(GridError::param("integration.max_step", "must not be below the initial step"));
        }
        for (name, v) in [
            ("consecutive", self.consecutive),
            ("decimation", self.decimation),
            ("max_steps", self.max_steps),
        ] {
            if v == 0 {
                return Err(GridError::param(format!("integration.{name}"), "must be at least 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSample {
    pub t: f64,
    pub grid: GridState,
    pub controller: ControllerState,
    /// Plant storage `S`.
    pub plant_storage: f64,
    /// Controller storage `S_c`.
    pub controller_storage: f64,
    /// `S_cl = S + S_c`.
    pub total_storage: f64,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventKind {
    PinLoad { node: usize, value: f64 },
    ReleaseLoad { node: usize },
    PinBand { node: usize, upper: bool },
    ReleaseBand { node: usize, upper: bool },
    Saturate { node: usize, value: f64 },
    Unsaturate { node: usize },
    ActiveSetUnsettled,
    Converged,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimEvent {
    pub t: f64,
    pub step: usize,
    pub kind: EventKind,
}

impl fmt::Display for SimEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t={:e} step={} ", self.t, self.step)?;
        match self.kind {
            EventKind::PinLoad { node, value } => write!(f, "u_l*[{node}] pinned at {value}"),
            EventKind::ReleaseLoad { node } => write!(f, "u_l*[{node}] released"),
            EventKind::PinBand { node, upper } => {
                write!(f, "eta_{}[{node}] pinned at 0", if upper { "hi" } else { "lo" })
            }
            EventKind::ReleaseBand { node, upper } => {
                write!(f, "eta_{}[{node}] released", if upper { "hi" } else { "lo" })
            }
            EventKind::Saturate { node, value } => write!(f, "plant load input {node} saturated at {value}"),
            EventKind::Unsaturate { node } => write!(f, "plant load input {node} back in range"),
            EventKind::ActiveSetUnsettled => write!(f, "active set did not settle within the step"),
            EventKind::Converged => write!(f, "converged"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Converged,
    HorizonReached,
    StepLimit,
}

#[derive(Debug, Clone)]
pub struct SimTrace {
    pub layout: StateLayout,
    pub samples: Vec<TraceSample>,
    pub events: Vec<SimEvent>,
    pub outcome: Outcome,
    pub steps: usize,
    /// Steps where `S_cl` rose by more than `LYAPUNOV_TOL` relative.
    pub lyapunov_violations: usize,
    /// Largest relative rise of `S_cl` over one step.
    pub worst_lyapunov_rise: f64,
    pub final_state: ClosedLoopState,
    /// Final state in the integrator's coordinates (see [`ClosedLoop`]).
    pub final_internal: DVector<f64>,
    /// Infinity norm of the projected rate at the final state.
    pub final_rate_norm: f64,
    pub convergence_time: Option<f64>,
    /// Pinned variables at the end of the run.
    pub active_set: Vec<(usize, f64)>,
}

impl SimTrace {
    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| s.t)
    }

    pub fn converged(&self) -> bool {
        self.outcome == Outcome::Converged
    }
}

/// Relative tolerance on per-step increases of `S_cl`.
pub const LYAPUNOV_TOL: f64 = 1e-9;

/// Bound on active-set refinements within one step.
const ACTIVE_SET_ITERS: usize = 50;

/// An integration that stopped on a failure, with everything recorded up to
/// that point.
#[derive(Debug)]
pub struct IntegrationError {
    pub error: GridError,
    pub prefix: Box<SimTrace>,
}

impl fmt::Display for IntegrationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} after {} recorded samples", self.error, self.prefix.samples.len())
    }
}

impl std::error::Error for IntegrationError {}

impl From<IntegrationError> for GridError {
    fn from(e: IntegrationError) -> Self {
        e.error
    }
}

struct Stepper<'a> {
    cl: &'a ClosedLoop,
    lower: Vec<Option<f64>>,
    upper: Vec<Option<f64>>,
    pinned: Vec<Option<f64>>,
    saturation: Vec<Saturation>,
}

impl<'a> Stepper<'a> {
    fn new(cl: &'a ClosedLoop) -> Self {
        let layout = cl.layout;
        let dim = layout.dim();
        let mut lower = vec![None; dim];
        let mut upper = vec![None; dim];
        for (i, p) in cl.grid.prosumers().iter().enumerate() {
            if cl.mode.load_box {
                let k = layout.ctrl(block::U_L, i);
                lower[k] = Some(0.0);
                upper[k] = Some(1.0 - p.u_l_min);
            }
            if cl.mode.voltage_band {
                lower[layout.ctrl(block::ETA_LO, i)] = Some(0.0);
                lower[layout.ctrl(block::ETA_HI, i)] = Some(0.0);
            }
        }
        Stepper {
            cl,
            lower,
            upper,
            pinned: vec![None; dim],
            saturation: vec![None; layout.n],
        }
    }

    fn event_for(&self, k: usize, pin: Option<f64>) -> EventKind {
        let layout = self.cl.layout;
        let base = layout.plant_dim();
        let blk = (k - base) / layout.n;
        let node = (k - base) % layout.n;
        match (blk, pin) {
            (block::U_L, Some(d)) => EventKind::PinLoad { node, value: 1.0 - d },
            (block::U_L, None) => EventKind::ReleaseLoad { node },
            (_, Some(_)) => EventKind::PinBand {
                node,
                upper: blk == block::ETA_HI,
            },
            (_, None) => EventKind::ReleaseBand {
                node,
                upper: blk == block::ETA_HI,
            },
        }
    }

    /// Pins every bounded variable of `x` that lies outside its box.
    fn pin_violations(&mut self, x: &DVector<f64>, events: &mut Vec<EventKind>) -> bool {
        let mut changed = false;
        for k in 0..x.len() {
            if self.pinned[k].is_some() {
                continue;
            }
            let target = match (self.lower[k], self.upper[k]) {
                (Some(lo), _) if x[k] < lo => Some(lo),
                (_, Some(hi)) if x[k] > hi => Some(hi),
                _ => None,
            };
            if target.is_some() {
                self.pinned[k] = target;
                events.push(self.event_for(k, target));
                changed = true;
            }
        }
        changed
    }

    /// Releases pinned variables whose rate points back into the box.
    fn release_inward(&mut self, rate: &DVector<f64>, events: &mut Vec<EventKind>) -> bool {
        let mut changed = false;
        for k in 0..rate.len() {
            let Some(value) = self.pinned[k] else { continue };
            let at_lower = self.lower[k] == Some(value);
            let inward = if at_lower { rate[k] > 0.0 } else { rate[k] < 0.0 };
            if inward {
                self.pinned[k] = None;
                events.push(self.event_for(k, None));
                changed = true;
            }
        }
        changed
    }

    fn update_saturation(&mut self, x: &DVector<f64>, events: &mut Vec<EventKind>) -> bool {
        let next = self.cl.saturation_of(x);
        let mut changed = false;
        for (node, (old, new)) in self.saturation.iter().zip(&next).enumerate() {
            if old != new {
                events.push(match new {
                    Some(value) => EventKind::Saturate { node, value: *value },
                    None => EventKind::Unsaturate { node },
                });
                changed = true;
            }
        }
        self.saturation = next;
        changed
    }

    fn projected_rate(&self, a: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let raw = self.cl.residual(a, b, x).component_div(&self.cl.mass);
        let mut projected = raw.clone();
        for (k, pin) in self.pinned.iter().enumerate() {
            if pin.is_some() {
                projected[k] = 0.0;
            }
        }
        (raw, projected)
    }

    /// One backward Euler step of length `h`, refining the active set until
    /// it is consistent with the new state.
    fn step(&mut self, x: &DVector<f64>, h: f64, events: &mut Vec<EventKind>) -> Result<(DVector<f64>, DVector<f64>)> {
        let dim = x.len();
        let mut settled = false;
        let mut result = None;
        for _ in 0..ACTIVE_SET_ITERS {
            let (a, b) = self.cl.effective(&self.saturation);
            let mut k_mat = DMatrix::from_diagonal(&self.cl.mass) - &a * h;
            let mut rhs = self.cl.residual(&a, &b, x) * h;
            for k in 0..dim {
                if let Some(value) = self.pinned[k] {
                    k_mat.row_mut(k).fill(0.0);
                    k_mat[(k, k)] = 1.0;
                    rhs[k] = value - x[k];
                }
            }
            let dx = k_mat
                .lu()
                .solve(&rhs)
                .ok_or_else(|| GridError::Numeric("implicit step matrix is singular".into()))?;
            let mut xn = x + dx;
            for (k, pin) in self.pinned.iter().enumerate() {
                if let Some(value) = pin {
                    xn[k] = *value;
                }
            }
            let (raw, projected) = self.projected_rate(&a, &b, &xn);
            let mut changed = self.release_inward(&raw, events);
            changed |= self.pin_violations(&xn, events);
            changed |= self.update_saturation(&xn, events);
            result = Some((xn, projected));
            if !changed {
                settled = true;
                break;
            }
        }
        if !settled {
            events.push(EventKind::ActiveSetUnsettled);
            // the last solve used a stale active set; report the rate the
            // current one assigns to it
            let (xn, _) = result.take().unwrap();
            let (a, b) = self.cl.effective(&self.saturation);
            let (_, projected) = self.projected_rate(&a, &b, &xn);
            result = Some((xn, projected));
        }
        Ok(result.unwrap())
    }

    fn active_set(&self) -> Vec<(usize, f64)> {
        self.pinned
            .iter()
            .enumerate()
            .filter_map(|(k, p)| p.map(|v| (k, v)))
            .collect()
    }
}

fn sample_at(cl: &ClosedLoop, t: f64, x: &DVector<f64>, rate: &DVector<f64>) -> Result<TraceSample> {
    let state = cl.from_internal(x)?;
    let (plant_storage, controller_storage) = cl.storage(rate);
    Ok(TraceSample {
        t,
        grid: state.grid,
        controller: state.controller,
        plant_storage,
        controller_storage,
        total_storage: plant_storage + controller_storage,
        kkt_residual: cl.kkt_internal(x).max,
    })
}

/// Integrates the closed loop from `initial` (cold start when `None`).
pub fn integrate(
    cl: &ClosedLoop,
    settings: &IntegrationSettings,
    initial: Option<&ClosedLoopState>,
) -> std::result::Result<SimTrace, IntegrationError> {
    let fail = |error: GridError| IntegrationError {
        error,
        prefix: Box::new(empty_trace(cl)),
    };
    settings.validate().map_err(fail)?;
    let start = initial.cloned().unwrap_or_else(|| ClosedLoopState::cold_start(&cl.grid));
    let mut x = cl.to_internal(&start);
    if x.len() != cl.layout.dim() {
        return Err(fail(GridError::Dimension {
            what: "initial state",
            expected: cl.layout.dim(),
            got: x.len(),
        }));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(fail(GridError::Numeric("initial state is not finite".into())));
    }

    let mut stepper = Stepper::new(cl);
    let mut pending = Vec::new();
    stepper.pin_violations(&x, &mut pending);
    stepper.update_saturation(&x, &mut pending);
    // pinned variables start exactly on their bound
    for (k, pin) in stepper.pinned.iter().enumerate() {
        if let Some(v) = pin {
            x[k] = *v;
        }
    }

    let mut trace = empty_trace(cl);
    let mut t = 0.0;
    let (a, b) = cl.effective(&stepper.saturation);
    let (_, rate) = stepper.projected_rate(&a, &b, &x);
    let mut prev_storage = {
        let (p, c) = cl.storage(&rate);
        p + c
    };
    trace.events.extend(pending.drain(..).map(|kind| SimEvent { t, step: 0, kind }));
    match sample_at(cl, t, &x, &rate) {
        Ok(s) => trace.samples.push(s),
        Err(e) => return Err(fail(e)),
    }

    let mut h = settings.step;
    let mut calm = 0usize;
    let mut step = 0usize;
    let mut last_rate = rate;
    let outcome = loop {
        if step >= settings.max_steps {
            break Outcome::StepLimit;
        }
        if t >= settings.horizon {
            break Outcome::HorizonReached;
        }
        step += 1;
        let (xn, rate) = match stepper.step(&x, h, &mut pending) {
            Ok(r) => r,
            Err(e) => {
                return Err(IntegrationError {
                    error: e,
                    prefix: Box::new(trace),
                })
            }
        };
        t += h;
        trace
            .events
            .extend(pending.drain(..).map(|kind| SimEvent { t, step, kind }));
        if xn.iter().any(|v| !v.is_finite()) {
            return Err(IntegrationError {
                error: GridError::Numeric(format!("non-finite state at t = {t:e}")),
                prefix: Box::new(trace),
            });
        }
        let norm = xn.amax();
        if norm > settings.divergence {
            return Err(IntegrationError {
                error: GridError::Divergence { time: t, norm, steps: step },
                prefix: Box::new(trace),
            });
        }
        let (p, c) = cl.storage(&rate);
        let storage = p + c;
        let rise = (storage - prev_storage) / prev_storage.max(1.0);
        if rise > LYAPUNOV_TOL {
            trace.lyapunov_violations += 1;
        }
        trace.worst_lyapunov_rise = trace.worst_lyapunov_rise.max(rise);
        prev_storage = storage;

        let rate_norm = rate.amax();
        calm = if rate_norm < settings.tolerance { calm + 1 } else { 0 };
        let done = calm >= settings.consecutive;
        x = xn;
        if step % settings.decimation == 0 || done {
            match sample_at(cl, t, &x, &rate) {
                Ok(s) => trace.samples.push(s),
                Err(e) => {
                    return Err(IntegrationError {
                        error: e,
                        prefix: Box::new(trace),
                    })
                }
            }
        }
        last_rate = rate;
        if done {
            trace.convergence_time = Some(t);
            trace.events.push(SimEvent {
                t,
                step,
                kind: EventKind::Converged,
            });
            break Outcome::Converged;
        }
        h = (h * settings.growth).min(settings.max_step);
    };
    if trace.samples.last().is_some_and(|s| s.t != t) {
        match sample_at(cl, t, &x, &last_rate) {
            Ok(s) => trace.samples.push(s),
            Err(e) => return Err(fail(e)),
        }
    }
    trace.outcome = outcome;
    trace.steps = step;
    trace.final_rate_norm = last_rate.amax();
    trace.active_set = stepper.active_set();
    trace.final_state = cl.from_internal(&x).map_err(fail)?;
    trace.final_internal = x;
    Ok(trace)
}

fn empty_trace(cl: &ClosedLoop) -> SimTrace {
    let (n, m) = (cl.layout.n, cl.layout.m);
    SimTrace {
        layout: cl.layout,
        samples: Vec::new(),
        events: Vec::new(),
        outcome: Outcome::StepLimit,
        steps: 0,
        lyapunov_violations: 0,
        worst_lyapunov_rise: f64::NEG_INFINITY,
        final_state: ClosedLoopState {
            grid: GridState::zeros(n, m),
            controller: ControllerState::zeros(n),
        },
        final_internal: DVector::zeros(0),
        final_rate_norm: f64::NAN,
        convergence_time: None,
        active_set: Vec::new(),
    }
}

/// Plant-only backward Euler run under a prescribed input sequence, for
/// dissipation checks. `inputs[k]` is held over step `k`.
pub fn simulate_plant(grid: &Grid, initial: &GridState, inputs: &[GridInput], step: f64) -> Result<Vec<PassivitySample>> {
    if inputs.is_empty() {
        return Err(GridError::Data("no inputs".into()));
    }
    let (n, m) = (grid.n(), grid.m());
    let dim = 2 * n + m;
    let stack = |s: &GridState| {
        let mut x = DVector::zeros(dim);
        x.rows_mut(0, n).copy_from(&s.i_s);
        x.rows_mut(n, m).copy_from(&s.i);
        x.rows_mut(n + m, n).copy_from(&s.v);
        x
    };
    let unstack = |x: &DVector<f64>| GridState {
        i_s: x.rows(0, n).into_owned(),
        i: x.rows(n, m).into_owned(),
        v: x.rows(n + m, n).into_owned(),
    };
    let zero_input = GridInput {
        u_s: DVector::zeros(n),
        u_l: DVector::zeros(n),
    };
    let f0 = stack(&grid.grid_derivative(&GridState::zeros(n, m), &zero_input)?);
    let mut jac = DMatrix::zeros(dim, dim);
    for j in 0..dim {
        let mut e = DVector::zeros(dim);
        e[j] = 1.0;
        let f = stack(&grid.grid_derivative(&unstack(&e), &zero_input)?);
        jac.set_column(j, &(f - &f0));
    }
    let system = (DMatrix::identity(dim, dim) - &jac * step).lu();
    let mut x = stack(initial);
    let mut samples = vec![PassivitySample {
        t: 0.0,
        input: inputs[0].clone(),
        rate: grid.grid_derivative(initial, &inputs[0])?,
    }];
    for (k, input) in inputs.iter().enumerate() {
        let f = stack(&grid.grid_derivative(&unstack(&x), input)?);
        let dx = system
            .solve(&(f * step))
            .ok_or_else(|| GridError::Numeric("plant step matrix is singular".into()))?;
        x += dx;
        let state = unstack(&x);
        samples.push(PassivitySample {
            t: (k + 1) as f64 * step,
            input: input.clone(),
            rate: grid.grid_derivative(&state, input)?,
        });
    }
    Ok(samples)
}

/// A closed interval of a drawn parameter, in SI units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite()) {
            return Err(GridError::param(field, "interval bounds must be finite"));
        }
        if self.lo > self.hi {
            return Err(GridError::param(field, format!("inverted interval [{}, {}]", self.lo, self.hi)));
        }
        Ok(())
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

/// Intervals for the randomly drawn electrical parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterRanges {
    pub r_s: Interval,
    pub l_s: Interval,
    pub c: Interval,
    pub i_l: Interval,
    pub r_line: Interval,
    pub l_line: Interval,
}

impl Default for ParameterRanges {
    fn default() -> Self {
        ParameterRanges {
            r_s: Interval::new(1e-3, 2e-3),
            l_s: Interval::new(1.8e-3, 3e-3),
            c: Interval::new(1.7e-3, 2.5e-3),
            i_l: Interval::new(6.0, 14.0),
            r_line: Interval::new(50e-3, 100e-3),
            l_line: Interval::new(2e-6, 3e-6),
        }
    }
}

/// Drawn electrical data of every prosumer and line.
#[derive(Debug, Clone, PartialEq)]
pub struct ElectricalDraw {
    pub r_s: Vec<f64>,
    pub l_s: Vec<f64>,
    pub c: Vec<f64>,
    pub i_l: Vec<f64>,
    pub lines: Vec<LineParams>,
}

/// Random number stream dedicated to one drawn field, so that fixing one
/// field does not shift the draws of the others.
pub fn field_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform independent draws for `n` prosumers and `m` lines.
pub fn draw_parameters(ranges: &ParameterRanges, n: usize, m: usize, seed: u64) -> Result<ElectricalDraw> {
    let fields = [
        ("ranges.R_s", ranges.r_s),
        ("ranges.L_s", ranges.l_s),
        ("ranges.C", ranges.c),
        ("ranges.I_l", ranges.i_l),
        ("ranges.R", ranges.r_line),
        ("ranges.L", ranges.l_line),
    ];
    for (name, iv) in fields {
        iv.validate(name)?;
    }
    let draw = |iv: Interval, stream: u64, count: usize| {
        let mut rng = field_rng(seed, stream);
        (0..count).map(|_| iv.draw(&mut rng)).collect::<Vec<f64>>()
    };
    let r = draw(ranges.r_line, 5, m);
    let l = draw(ranges.l_line, 6, m);
    Ok(ElectricalDraw {
        r_s: draw(ranges.r_s, 1, n),
        l_s: draw(ranges.l_s, 2, n),
        c: draw(ranges.c, 3, n),
        i_l: draw(ranges.i_l, 4, n),
        lines: r.into_iter().zip(l).map(|(r, l)| LineParams { r, l }).collect(),
    })
}

/// `1^T Pi_c V`.
pub fn average_voltage(v: &DVector<f64>, pi_c: &DVector<f64>) -> Result<f64> {
    check_len("pi_c", v.len(), pi_c.len())?;
    let total = pi_c.sum();
    if (total - 1.0).abs() > crate::plant::PI_C_SUM_TOL {
        return Err(GridError::param("pi_c", format!("weights must sum to 1, got {total}")));
    }
    Ok(pi_c.dot(v))
}

/// Where the acceptable flexibility share comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaSource {
    /// The technical ceiling itself.
    Psi,
    Fixed(f64),
    /// Estimated from a community value profile.
    Profile(ValueProfile),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlexibilityConfig {
    pub psi: f64,
    pub lambda: LambdaSource,
    pub adopters: Vec<bool>,
    /// Explicit coefficients; bypasses the tuning rule when present.
    pub pi_u: Option<Vec<f64>>,
    pub spread: FlexibilitySpread,
    pub appliances: Vec<ApplianceModel>,
    /// Lower bound of `u_l` for adopters; `1 - psi` when `None`.
    pub u_l_min: Option<f64>,
}

/// One electrical quantity given either per element or as a draw interval.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamSpec {
    Fixed(f64),
    Range(Interval),
    List(Vec<f64>),
}

impl ParamSpec {
    fn resolve(&self, field: &str, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        match self {
            ParamSpec::Fixed(v) => Ok(vec![*v; count]),
            ParamSpec::Range(iv) => {
                iv.validate(field)?;
                Ok((0..count).map(|_| iv.draw(rng)).collect())
            }
            ParamSpec::List(values) => {
                if values.len() != count {
                    return Err(GridError::param(
                        field,
                        format!("expected {count} values, got {}", values.len()),
                    ));
                }
                Ok(values.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElectricalSpec {
    pub r_s: ParamSpec,
    pub l_s: ParamSpec,
    pub c: ParamSpec,
    pub i_l: ParamSpec,
    pub r_line: ParamSpec,
    pub l_line: ParamSpec,
}

impl From<ParameterRanges> for ElectricalSpec {
    fn from(r: ParameterRanges) -> Self {
        ElectricalSpec {
            r_s: ParamSpec::Range(r.r_s),
            l_s: ParamSpec::Range(r.l_s),
            c: ParamSpec::Range(r.c),
            i_l: ParamSpec::Range(r.i_l),
            r_line: ParamSpec::Range(r.r_line),
            l_line: ParamSpec::Range(r.l_line),
        }
    }
}

impl ElectricalSpec {
    /// Resolves every field; a field given as an interval uses the same
    /// stream as [`draw_parameters`].
    pub fn resolve(&self, n: usize, m: usize, seed: u64) -> Result<ElectricalDraw> {
        let get = |spec: &ParamSpec, field: &str, stream: u64, count: usize| {
            spec.resolve(field, count, &mut field_rng(seed, stream))
        };
        let r = get(&self.r_line, "lines.R", 5, m)?;
        let l = get(&self.l_line, "lines.L", 6, m)?;
        Ok(ElectricalDraw {
            r_s: get(&self.r_s, "prosumers.R_s", 1, n)?,
            l_s: get(&self.l_s, "prosumers.L_s", 2, n)?,
            c: get(&self.c, "prosumers.C", 3, n)?,
            i_l: get(&self.i_l, "prosumers.I_l", 4, n)?,
            lines: r.into_iter().zip(l).map(|(r, l)| LineParams { r, l }).collect(),
        })
    }
}

/// Complete, validated description of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub topology: GridTopology,
    pub electrical: ElectricalSpec,
    pub seed: u64,
    pub v_d: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Capacity coefficients; uniform `1/n` when `None`.
    pub pi_c: Option<Vec<f64>>,
    pub gains: ControllerGains,
    pub flexibility: FlexibilityConfig,
    pub constraints: ConstraintMode,
    pub integration: IntegrationSettings,
}

/// The grid and flexibility data a configuration resolves to.
#[derive(Debug, Clone)]
pub struct ResolvedScenario {
    pub grid: Grid,
    pub lambda: f64,
    pub pi_u: Vec<f64>,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.gains.validate()?;
        self.integration.validate()?;
        if !(self.v_min < self.v_d && self.v_d < self.v_max) {
            return Err(GridError::param("grid.V_d", "need V_min < V_d < V_max"));
        }
        let f = &self.flexibility;
        if !(0.0..=1.0).contains(&f.psi) {
            return Err(GridError::param("flexibility.psi", format!("must lie in [0, 1], got {}", f.psi)));
        }
        check_len("flexibility.adopters", self.topology.n(), f.adopters.len())?;
        if let Some(u) = f.u_l_min {
            if !(0.0..=1.0).contains(&u) {
                return Err(GridError::param("flexibility.u_l_min", format!("must lie in [0, 1], got {u}")));
            }
        }
        Ok(())
    }

    /// Draws parameters, estimates flexibility and tunes `pi_u`.
    pub fn resolve(&self) -> Result<ResolvedScenario> {
        self.validate()?;
        let n = self.topology.n();
        let m = self.topology.m();
        let draw = self.electrical.resolve(n, m, self.seed)?;
        let f = &self.flexibility;
        let lambda = match f.lambda {
            LambdaSource::Psi => f.psi,
            LambdaSource::Fixed(l) => l,
            LambdaSource::Profile(profile) => flexibility_level(&f.appliances, &profile, f.psi)?.lambda,
        };
        let pi_u = match &f.pi_u {
            Some(explicit) => {
                check_len("flexibility.pi_u", n, explicit.len())?;
                explicit.clone()
            }
            None => tune_pi_u(lambda, &f.adopters, &f.spread, self.seed)?,
        };
        let pi_c = match &self.pi_c {
            Some(p) => {
                check_len("grid.pi_c", n, p.len())?;
                p.clone()
            }
            None => vec![1.0 / n as f64; n],
        };
        let u_l_min = f.u_l_min.unwrap_or(1.0 - f.psi);
        let prosumers = (0..n)
            .map(|i| ProsumerParams {
                r_s: draw.r_s[i],
                l_s: draw.l_s[i],
                c: draw.c[i],
                i_l: draw.i_l[i],
                pi_c: pi_c[i],
                pi_u: pi_u[i],
                v_d: self.v_d,
                v_min: self.v_min,
                v_max: self.v_max,
                u_l_min: if f.adopters[i] { u_l_min } else { 1.0 },
            })
            .collect();
        let grid = Grid::new(self.topology.clone(), prosumers, draw.lines)?;
        Ok(ResolvedScenario { grid, lambda, pi_u })
    }
}

/// Tolerance on voltage-band compliance of the steady state.
pub const BAND_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct RunCertificate {
    pub converged: bool,
    pub convergence_time: Option<f64>,
    pub steps: usize,
    pub steady: GridState,
    pub controller: ControllerState,
    pub kkt: KktResidual,
    pub plant_residual: f64,
    pub final_rate_norm: f64,
    pub band_compliant: bool,
    pub v_min_observed: f64,
    pub v_max_observed: f64,
    pub complementarity: f64,
    pub reduction_amps: f64,
    pub reduction_percent: f64,
    /// Curtailment share of the unconstrained welfare optimum.
    pub analytic_reduction_percent: f64,
    pub total_demand: f64,
    pub average_voltage: f64,
    pub lyapunov_violations: usize,
    pub loss_identity_gap: f64,
    pub lambda: f64,
    pub pi_u: Vec<f64>,
}

pub fn certify(cl: &ClosedLoop, trace: &SimTrace, lambda: f64) -> Result<RunCertificate> {
    let grid = &cl.grid;
    let state = &trace.final_state;
    let (input, _) = interconnect(grid, &state.grid, &state.controller)?;
    let kkt = cl.kkt_internal(&trace.final_internal);
    let plant_residual = grid.steady_state_residual(&state.grid, &input)?;
    let v = &state.grid.v;
    let v_min_observed = v.min();
    let v_max_observed = v.max();
    let band_compliant = grid
        .prosumers()
        .iter()
        .zip(v.iter())
        .all(|(p, &vi)| vi >= p.v_min - BAND_TOL && vi <= p.v_max + BAND_TOL);
    let i_l = grid.prosumer_vec(|p| p.i_l);
    let total_demand = i_l.sum();
    let served = i_l.dot(&input.applied_u_l());
    let pi_c = grid.prosumer_vec(|p| p.pi_c);
    let pi_u = grid.prosumer_vec(|p| p.pi_u);
    let ideal = ideal_welfare_optimum(i_l.as_slice(), pi_c.as_slice(), pi_u.as_slice())?;
    let analytic = ideal.curtailment(i_l.as_slice()).sum() / total_demand * 100.0;
    let loss_identity_gap = match loss_penalty_identity(grid, &state.grid, &input) {
        Ok(id) => id.gap,
        Err(_) => f64::NAN,
    };
    Ok(RunCertificate {
        converged: trace.converged(),
        convergence_time: trace.convergence_time,
        steps: trace.steps,
        steady: state.grid.clone(),
        controller: state.controller.clone(),
        kkt,
        plant_residual,
        final_rate_norm: trace.final_rate_norm,
        band_compliant,
        v_min_observed,
        v_max_observed,
        complementarity: complementary_slackness(grid, &state.controller),
        reduction_amps: total_demand - served,
        reduction_percent: 100.0 * (1.0 - served / total_demand),
        analytic_reduction_percent: analytic,
        total_demand,
        average_voltage: average_voltage(v, &pi_c)?,
        lyapunov_violations: trace.lyapunov_violations,
        loss_identity_gap,
        lambda,
        pi_u: pi_u.iter().copied().collect(),
    })
}

/// The four reference scenarios, or a configuration taken as is.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scenario {
    /// All technically available flexibility is accepted.
    MaxFlexibility,
    /// Neutral community profile.
    Neutral,
    /// Strongly self-transcendent, weakly self-enhancing community.
    ProSocial,
    /// Weakly self-transcendent, strongly self-enhancing community.
    SelfInterested,
    Custom,
}

impl Scenario {
    pub fn from_number(k: u8) -> Result<Self> {
        match k {
            1 => Ok(Scenario::MaxFlexibility),
            2 => Ok(Scenario::Neutral),
            3 => Ok(Scenario::ProSocial),
            4 => Ok(Scenario::SelfInterested),
            _ => Err(GridError::param("scenario", format!("unknown scenario {k}, expected 1 to 4"))),
        }
    }

    pub fn lambda_source(&self) -> Option<LambdaSource> {
        match self {
            Scenario::MaxFlexibility => Some(LambdaSource::Psi),
            Scenario::Neutral => Some(LambdaSource::Profile(ValueProfile::new(0.0, 0.0))),
            Scenario::ProSocial => Some(LambdaSource::Profile(ValueProfile::new(2.0, -1.0))),
            Scenario::SelfInterested => Some(LambdaSource::Profile(ValueProfile::new(-1.0, 2.0))),
            Scenario::Custom => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub certificate: RunCertificate,
    pub trace: SimTrace,
    pub closed_loop: ClosedLoop,
}

pub fn run_scenario(scenario: Scenario, base: &ScenarioConfig) -> std::result::Result<ScenarioRun, IntegrationError> {
    let mut config = base.clone();
    if let Some(source) = scenario.lambda_source() {
        config.flexibility.lambda = source;
    }
    run_config(&config, None)
}

/// Resolves, integrates and certifies one configuration.
pub fn run_config(
    config: &ScenarioConfig,
    initial: Option<&ClosedLoopState>,
) -> std::result::Result<ScenarioRun, IntegrationError> {
    let prepared = config.resolve().and_then(|r| {
        let cl = ClosedLoop::new(&r.grid, &config.gains, config.constraints)?;
        Ok((r, cl))
    });
    let (resolved, cl) = prepared.map_err(|error| IntegrationError {
        error,
        prefix: Box::new(placeholder_trace()),
    })?;
    let trace = integrate(&cl, &config.integration, initial)?;
    let certificate = certify(&cl, &trace, resolved.lambda).map_err(|error| IntegrationError {
        error,
        prefix: Box::new(trace.clone()),
    })?;
    Ok(ScenarioRun {
        certificate,
        trace,
        closed_loop: cl,
    })
}

fn placeholder_trace() -> SimTrace {
    SimTrace {
        layout: StateLayout { n: 0, m: 0 },
        samples: Vec::new(),
        events: Vec::new(),
        outcome: Outcome::StepLimit,
        steps: 0,
        lyapunov_violations: 0,
        worst_lyapunov_rise: f64::NEG_INFINITY,
        final_state: ClosedLoopState {
            grid: GridState::zeros(0, 0),
            controller: ControllerState::zeros(0),
        },
        final_internal: DVector::zeros(0),
        final_rate_norm: f64::NAN,
        convergence_time: None,
        active_set: Vec::new(),
    }
}

/// Default settings of the ten-prosumer ring study.
pub fn reference_config(seed: u64) -> ScenarioConfig {
    let n = 10;
    ScenarioConfig {
        name: "reference".into(),
        topology: GridTopology::ring(n).expect("ring of ten is valid"),
        electrical: ParameterRanges::default().into(),
        seed,
        v_d: 380.0,
        v_min: 379.3,
        v_max: 380.7,
        pi_c: None,
        gains: ControllerGains::default(),
        flexibility: FlexibilityConfig {
            psi: 0.5,
            lambda: LambdaSource::Psi,
            adopters: vec![true; n],
            pi_u: None,
            spread: FlexibilitySpread::default(),
            appliances: crate::psychosocial::default_appliances(),
            u_l_min: None,
        },
        constraints: ConstraintMode::FULL,
        integration: IntegrationSettings::default(),
    }
}

/// Floor used for non-adopters, re-exported for configuration defaults.
pub const NON_ADOPTER_FLOOR: f64 = NON_ADOPTER_PI_U;
