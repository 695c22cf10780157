//! Distributed primal-dual controller.
//!
//! Each prosumer runs a copy of the gradient/ascent dynamics of the
//! Lagrangian
//!
//! ```text
//! -alpha W + beta/2 |u_s|^2 + gamma/2 |V - V_d|^2
//!   + lambda_a^T (u_s - R_s I_s - V) + lambda_b^T (-I_l u_l + I_s - L V)
//!   + eta_lo^T (V_min - V) + eta_hi^T (V - V_max)
//! ```
//!
//! and exchanges `lambda_b` and `V*` with its neighbours only. The ports
//! `nu_s = -I_s` and `nu_l = I_l V` close the loop with the physical grid.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, GridError, Result};
use crate::plant::{Grid, GridInput, GridState};
use crate::welfare::{OperatingPoint, WelfareWeights};

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub u_s: DVector<f64>,
    pub u_l: DVector<f64>,
    pub i_s: DVector<f64>,
    pub v: DVector<f64>,
    pub lambda_a: DVector<f64>,
    pub lambda_b: DVector<f64>,
    /// Multipliers of `V* >= V_min`.
    pub eta_lo: DVector<f64>,
    /// Multipliers of `V* <= V_max`.
    pub eta_hi: DVector<f64>,
}

/// Number of per-node blocks in a [`ControllerState`].
pub const CONTROLLER_BLOCKS: usize = 8;

impl ControllerState {
    pub fn zeros(n: usize) -> Self {
        let z = DVector::zeros(n);
        ControllerState {
            u_s: z.clone(),
            u_l: z.clone(),
            i_s: z.clone(),
            v: z.clone(),
            lambda_a: z.clone(),
            lambda_b: z.clone(),
            eta_lo: z.clone(),
            eta_hi: z,
        }
    }

    pub fn n(&self) -> usize {
        self.u_s.len()
    }

    pub fn blocks(&self) -> [&DVector<f64>; CONTROLLER_BLOCKS] {
        [
            &self.u_s,
            &self.u_l,
            &self.i_s,
            &self.v,
            &self.lambda_a,
            &self.lambda_b,
            &self.eta_lo,
            &self.eta_hi,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut DVector<f64>; CONTROLLER_BLOCKS] {
        [
            &mut self.u_s,
            &mut self.u_l,
            &mut self.i_s,
            &mut self.v,
            &mut self.lambda_a,
            &mut self.lambda_b,
            &mut self.eta_lo,
            &mut self.eta_hi,
        ]
    }

    /// Stacks the blocks in declaration order.
    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.n();
        let mut out = DVector::zeros(CONTROLLER_BLOCKS * n);
        for (b, block) in self.blocks().into_iter().enumerate() {
            out.rows_mut(b * n, n).copy_from(block);
        }
        out
    }

    pub fn from_vector(x: &DVector<f64>, n: usize) -> Result<Self> {
        check_len("controller vector", CONTROLLER_BLOCKS * n, x.len())?;
        let mut s = ControllerState::zeros(n);
        for (b, block) in s.blocks_mut().into_iter().enumerate() {
            block.copy_from(&x.rows(b * n, n));
        }
        Ok(s)
    }

    pub fn amax(&self) -> f64 {
        self.blocks().iter().fold(0.0, |acc, b| acc.max(b.amax()))
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    pub fn operating_point(&self) -> OperatingPoint {
        OperatingPoint {
            u_s: self.u_s.clone(),
            u_l: self.u_l.clone(),
            i_s: self.i_s.clone(),
            v: self.v.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerGains {
    pub tau_s: f64,
    pub tau_l: f64,
    pub tau_i: f64,
    pub tau_v: f64,
    pub tau_a: f64,
    pub tau_b: f64,
    /// Time constant of the voltage-band multipliers.
    pub tau_eta: f64,
    pub weights: WelfareWeights,
}

impl Default for ControllerGains {
    fn default() -> Self {
        ControllerGains {
            tau_s: 1.0,
            tau_l: 1.0,
            tau_i: 1.0,
            tau_v: 1.0,
            tau_a: 1.0,
            tau_b: 1.0,
            tau_eta: 1.0,
            weights: WelfareWeights::default(),
        }
    }
}

impl ControllerGains {
    pub fn validate(&self) -> Result<()> {
        for (name, tau) in self.named_taus() {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(GridError::param(format!("gains.{name}"), format!("must be positive, got {tau}")));
            }
        }
        self.weights.validate()
    }

    fn named_taus(&self) -> [(&'static str, f64); 7] {
        [
            ("tau_s", self.tau_s),
            ("tau_l", self.tau_l),
            ("tau_I", self.tau_i),
            ("tau_V", self.tau_v),
            ("tau_a", self.tau_a),
            ("tau_b", self.tau_b),
            ("tau_eta", self.tau_eta),
        ]
    }

    /// Time constants in [`ControllerState`] block order.
    pub fn block_taus(&self) -> [f64; CONTROLLER_BLOCKS] {
        [
            self.tau_s,
            self.tau_l,
            self.tau_i,
            self.tau_v,
            self.tau_a,
            self.tau_b,
            self.tau_eta,
            self.tau_eta,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerPorts {
    pub nu_s: DVector<f64>,
    pub nu_l: DVector<f64>,
}

impl ControllerPorts {
    pub fn zeros(n: usize) -> Self {
        ControllerPorts {
            nu_s: DVector::zeros(n),
            nu_l: DVector::zeros(n),
        }
    }
}

/// Which inequality constraints the controller enforces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintMode {
    /// `u_l* in [u_l_min, 1]` by rate projection.
    pub load_box: bool,
    /// `V* in [V_min, V_max]` through the `eta` multipliers.
    pub voltage_band: bool,
}

impl ConstraintMode {
    pub const UNCONSTRAINED: ConstraintMode = ConstraintMode {
        load_box: false,
        voltage_band: false,
    };
    pub const FULL: ConstraintMode = ConstraintMode {
        load_box: true,
        voltage_band: true,
    };
}

impl Default for ConstraintMode {
    fn default() -> Self {
        ConstraintMode::FULL
    }
}

fn check_controller(grid: &Grid, cstate: &ControllerState) -> Result<()> {
    let n = grid.n();
    for (what, block) in [
        ("u_s*", &cstate.u_s),
        ("u_l*", &cstate.u_l),
        ("I_s*", &cstate.i_s),
        ("V*", &cstate.v),
        ("lambda_a", &cstate.lambda_a),
        ("lambda_b", &cstate.lambda_b),
        ("eta_lo", &cstate.eta_lo),
        ("eta_hi", &cstate.eta_hi),
    ] {
        check_len(what, n, block.len())?;
    }
    Ok(())
}

fn check_ports(grid: &Grid, ports: &ControllerPorts) -> Result<()> {
    check_len("nu_s", grid.n(), ports.nu_s.len())?;
    check_len("nu_l", grid.n(), ports.nu_l.len())
}

/// Gradients of the Lagrangian, before division by the time constants and
/// before any projection. Primal blocks hold `dL/dx` (the rate is minus
/// this), dual blocks hold `dL/dlambda` (the rate is plus this).
fn lagrangian_gradients(
    grid: &Grid,
    weights: &WelfareWeights,
    mode: ConstraintMode,
    cstate: &ControllerState,
    ports: &ControllerPorts,
) -> ControllerState {
    let n = grid.n();
    let lap = grid.laplacian();
    let lap_lambda_b = lap * &cstate.lambda_b;
    let lap_v = lap * &cstate.v;
    let mut g = ControllerState::zeros(n);
    for (i, p) in grid.prosumers().iter().enumerate() {
        let (us, ul, is, v) = (cstate.u_s[i], cstate.u_l[i], cstate.i_s[i], cstate.v[i]);
        let (la, lb) = (cstate.lambda_a[i], cstate.lambda_b[i]);
        g.u_s[i] = weights.beta * us + la - ports.nu_s[i];
        g.u_l[i] = -weights.alpha * p.i_l * p.i_l / p.pi_u * (1.0 - ul) - p.i_l * lb - ports.nu_l[i];
        g.i_s[i] = weights.alpha / p.pi_c * is - p.r_s * la + lb;
        g.v[i] = weights.gamma * (v - p.v_d) - la - lap_lambda_b[i];
        g.lambda_a[i] = us - p.r_s * is - v;
        g.lambda_b[i] = -p.i_l * ul + is - lap_v[i];
        if mode.voltage_band {
            g.v[i] += cstate.eta_hi[i] - cstate.eta_lo[i];
            g.eta_lo[i] = p.v_min - v;
            g.eta_hi[i] = v - p.v_max;
        }
    }
    g
}

/// Unprojected controller vector field. With the voltage band disabled the
/// `eta` blocks are frozen.
pub fn controller_derivative(
    grid: &Grid,
    gains: &ControllerGains,
    mode: ConstraintMode,
    cstate: &ControllerState,
    ports: &ControllerPorts,
) -> Result<ControllerState> {
    check_controller(grid, cstate)?;
    check_ports(grid, ports)?;
    let g = lagrangian_gradients(grid, &gains.weights, mode, cstate, ports);
    Ok(ControllerState {
        u_s: -g.u_s / gains.tau_s,
        u_l: -g.u_l / gains.tau_l,
        i_s: -g.i_s / gains.tau_i,
        v: -g.v / gains.tau_v,
        lambda_a: g.lambda_a / gains.tau_a,
        lambda_b: g.lambda_b / gains.tau_b,
        eta_lo: g.eta_lo / gains.tau_eta,
        eta_hi: g.eta_hi / gains.tau_eta,
    })
}

/// Zeroes rate components that would carry `u_l*` out of `[u_l_min, 1]` or
/// an `eta` below zero. An exactly-zero rate at a bound counts as interior.
pub fn project_box(grid: &Grid, mode: ConstraintMode, cstate: &ControllerState, rate: &ControllerState) -> ControllerState {
    let mut out = rate.clone();
    for (i, p) in grid.prosumers().iter().enumerate() {
        if mode.load_box {
            let u = cstate.u_l[i];
            let r = rate.u_l[i];
            if (u <= p.u_l_min && r < 0.0) || (u >= 1.0 && r > 0.0) {
                out.u_l[i] = 0.0;
            }
        }
        if mode.voltage_band {
            if cstate.eta_lo[i] <= 0.0 && rate.eta_lo[i] < 0.0 {
                out.eta_lo[i] = 0.0;
            }
            if cstate.eta_hi[i] <= 0.0 && rate.eta_hi[i] < 0.0 {
                out.eta_hi[i] = 0.0;
            }
        }
    }
    out
}

/// Per-condition largest violation of the optimality conditions.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResidual {
    /// `beta u_s + lambda_a - nu_s`.
    pub source_input: f64,
    /// Projected stationarity in `u_l`.
    pub load_input: f64,
    /// `alpha/pi_c I_s - R_s lambda_a + lambda_b`.
    pub generation: f64,
    /// `gamma (V - V_d) - lambda_a - L lambda_b - eta_lo + eta_hi`.
    pub voltage: f64,
    /// `u_s - R_s I_s - V`.
    pub filter_balance: f64,
    /// `-I_l u_l + I_s - L V`.
    pub current_balance: f64,
    /// Box and band violations, negative multipliers, and projected
    /// multiplier rates.
    pub inequality: f64,
    pub max: f64,
}

impl KktResidual {
    pub fn breakdown(&self) -> [(&'static str, f64); 7] {
        [
            ("source_input", self.source_input),
            ("load_input", self.load_input),
            ("generation", self.generation),
            ("voltage", self.voltage),
            ("filter_balance", self.filter_balance),
            ("current_balance", self.current_balance),
            ("inequality", self.inequality),
        ]
    }
}

/// Residual of the optimality conditions at `cstate`, including the port
/// penalty when `ports` is given.
///
/// At a bound of `u_l*` only the outward-pointing part of the gradient
/// counts; with the band on, a positive `eta` must sit on its bound and a
/// zero `eta` must see a satisfied bound.
pub fn kkt_residual(
    grid: &Grid,
    weights: &WelfareWeights,
    mode: ConstraintMode,
    cstate: &ControllerState,
    ports: Option<&ControllerPorts>,
) -> Result<KktResidual> {
    check_controller(grid, cstate)?;
    let zero = ControllerPorts::zeros(grid.n());
    let ports = ports.unwrap_or(&zero);
    check_ports(grid, ports)?;
    let g = lagrangian_gradients(grid, weights, mode, cstate, ports);
    let mut r = KktResidual {
        source_input: g.u_s.amax(),
        generation: g.i_s.amax(),
        voltage: g.v.amax(),
        filter_balance: g.lambda_a.amax(),
        current_balance: g.lambda_b.amax(),
        ..KktResidual::default()
    };
    for (i, p) in grid.prosumers().iter().enumerate() {
        let u = cstate.u_l[i];
        let grad = g.u_l[i];
        let load = if mode.load_box {
            r.inequality = r.inequality.max(p.u_l_min - u).max(u - 1.0);
            if u <= p.u_l_min {
                (-grad).max(0.0)
            } else if u >= 1.0 {
                grad.max(0.0)
            } else {
                grad.abs()
            }
        } else {
            grad.abs()
        };
        r.load_input = r.load_input.max(load);
        if mode.voltage_band {
            for (eta, slack_grad) in [(cstate.eta_lo[i], g.eta_lo[i]), (cstate.eta_hi[i], g.eta_hi[i])] {
                let projected = if eta > 0.0 { slack_grad.abs() } else { slack_grad.max(0.0) };
                r.inequality = r.inequality.max(projected).max(-eta);
            }
        }
    }
    r.max = r.breakdown().iter().fold(0.0, |acc, (_, v)| acc.max(*v));
    Ok(r)
}

/// Largest `|eta_lo (V* - V_min)|` or `|eta_hi (V_max - V*)|`.
pub fn complementary_slackness(grid: &Grid, cstate: &ControllerState) -> f64 {
    grid.prosumers()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let lo = cstate.eta_lo[i] * (cstate.v[i] - p.v_min);
            let hi = cstate.eta_hi[i] * (p.v_max - cstate.v[i]);
            lo.abs().max(hi.abs())
        })
        .fold(0.0, f64::max)
}

/// `u = u*` (load input clamped to `[0, 1]`), `nu_s = -I_s`, `nu_l = I_l V`.
pub fn interconnect(grid: &Grid, gstate: &GridState, cstate: &ControllerState) -> Result<(GridInput, ControllerPorts)> {
    check_controller(grid, cstate)?;
    check_len("I_s", grid.n(), gstate.i_s.len())?;
    check_len("V", grid.n(), gstate.v.len())?;
    let i_l = grid.prosumer_vec(|p| p.i_l);
    let input = GridInput {
        u_s: cstate.u_s.clone(),
        u_l: cstate.u_l.map(|u| u.clamp(0.0, 1.0)),
    };
    let ports = ControllerPorts {
        nu_s: -&gstate.i_s,
        nu_l: i_l.component_mul(&gstate.v),
    };
    Ok((input, ports))
}

/// `S_c = 1/2 sum tau x_c_dot^2`.
pub fn controller_storage(rate: &ControllerState, gains: &ControllerGains) -> f64 {
    let taus = gains.block_taus();
    0.5 * rate
        .blocks()
        .iter()
        .zip(taus)
        .map(|(b, tau)| tau * b.norm_squared())
        .sum::<f64>()
}

/// Both sides of the steady-state power balance
/// `I_s^T u_s - V^T I_l u_l = I_s^T R_s I_s + V^T L V`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossIdentity {
    pub lhs: f64,
    pub rhs: f64,
    /// `|lhs - rhs|` relative to the largest of the delivered power, the
    /// consumed power and the losses.
    pub gap: f64,
}

/// Plant residual above which [`loss_penalty_identity`] refuses a state.
pub const STEADY_STATE_PRECONDITION: f64 = 1e-6;

pub fn loss_penalty_identity(grid: &Grid, gstate: &GridState, input: &GridInput) -> Result<LossIdentity> {
    let residual = grid.steady_state_residual(gstate, input)?;
    if residual > STEADY_STATE_PRECONDITION {
        return Err(GridError::Data(format!(
            "loss identity needs a steady state, plant residual is {residual:e}"
        )));
    }
    let u_l = input.applied_u_l();
    let r_s = grid.prosumer_vec(|p| p.r_s);
    let i_l = grid.prosumer_vec(|p| p.i_l);
    let delivered = gstate.i_s.dot(&input.u_s);
    let consumed = gstate.v.dot(&i_l.component_mul(&u_l));
    let lhs = delivered - consumed;
    let rhs = gstate.i_s.dot(&r_s.component_mul(&gstate.i_s)) + gstate.v.dot(&(grid.laplacian() * &gstate.v));
    let scale = delivered.abs().max(consumed.abs()).max(rhs.abs());
    let gap = if scale > 0.0 { (lhs - rhs).abs() / scale } else { 0.0 };
    Ok(LossIdentity { lhs, rhs, gap })
}
