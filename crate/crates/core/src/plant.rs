//! Physical model of the DC grid: filter/source branch, RL lines and shunt
//! capacitors at every point of common coupling.
//!
//! ```text
//! L_s dI_s/dt = -R_s I_s - V + u_s
//! L   dI/dt   = -R I - B^T V
//! C   dV/dt   = I_s + B I - I_l u_l
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, GridError, Result};
use crate::network::GridTopology;

/// Tolerance on the capacity-coefficient normalisation `sum(pi_c) = 1`.
pub const PI_C_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProsumerParams {
    /// Filter resistance (ohm).
    pub r_s: f64,
    /// Filter inductance (H).
    pub l_s: f64,
    /// Shunt capacitance (F).
    pub c: f64,
    /// Load current demand (A).
    pub i_l: f64,
    /// Capacity coefficient of the generation cost.
    pub pi_c: f64,
    /// Flexibility coefficient of the consumption utility.
    pub pi_u: f64,
    /// Desired voltage (V).
    pub v_d: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Lower bound of the load control input. `1` pins the load at full demand.
    pub u_l_min: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineParams {
    /// Line resistance (ohm).
    pub r: f64,
    /// Line inductance (H).
    pub l: f64,
}

impl ProsumerParams {
    fn validate(&self, i: usize) -> Result<()> {
        let positive = [
            ("R_s", self.r_s),
            ("L_s", self.l_s),
            ("C", self.c),
            ("I_l", self.i_l),
            ("pi_c", self.pi_c),
            ("V_d", self.v_d),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(GridError::param(
                    format!("prosumers[{i}].{name}"),
                    format!("must be positive and finite, got {value}"),
                ));
            }
        }
        if !(self.pi_u >= 0.0 && self.pi_u.is_finite()) {
            return Err(GridError::param(
                format!("prosumers[{i}].pi_u"),
                format!("must be nonnegative, got {}", self.pi_u),
            ));
        }
        if !(self.v_min < self.v_d && self.v_d < self.v_max) {
            return Err(GridError::param(
                format!("prosumers[{i}].V_d"),
                format!(
                    "need V_min < V_d < V_max, got {} < {} < {}",
                    self.v_min, self.v_d, self.v_max
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.u_l_min) {
            return Err(GridError::param(
                format!("prosumers[{i}].u_l_min"),
                format!("must lie in [0, 1], got {}", self.u_l_min),
            ));
        }
        Ok(())
    }
}

impl LineParams {
    fn validate(&self, k: usize) -> Result<()> {
        for (name, value) in [("R", self.r), ("L", self.l)] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(GridError::param(
                    format!("lines[{k}].{name}"),
                    format!("must be positive and finite, got {value}"),
                ));
            }
        }
        Ok(())
    }
}

/// Generated currents, line currents and PCC voltages. Also used for the
/// time derivative of the same quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    pub i_s: DVector<f64>,
    pub i: DVector<f64>,
    pub v: DVector<f64>,
}

impl GridState {
    pub fn zeros(n: usize, m: usize) -> Self {
        GridState {
            i_s: DVector::zeros(n),
            i: DVector::zeros(m),
            v: DVector::zeros(n),
        }
    }

    pub fn amax(&self) -> f64 {
        self.i_s.amax().max(self.i.amax()).max(self.v.amax())
    }

    pub fn is_finite(&self) -> bool {
        self.i_s
            .iter()
            .chain(self.i.iter())
            .chain(self.v.iter())
            .all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridInput {
    pub u_s: DVector<f64>,
    pub u_l: DVector<f64>,
}

impl GridInput {
    /// The load input the plant actually applies: loads cannot draw a
    /// negative or above-nominal share of their demand.
    pub fn applied_u_l(&self) -> DVector<f64> {
        self.u_l.map(|u| u.clamp(0.0, 1.0))
    }
}

/// Topology plus electrical parameters, with the derived network matrices.
/// Immutable once built.
#[derive(Debug, Clone)]
pub struct Grid {
    topo: GridTopology,
    prosumers: Vec<ProsumerParams>,
    lines: Vec<LineParams>,
    incidence: DMatrix<f64>,
    laplacian: DMatrix<f64>,
}

fn collect(values: impl Iterator<Item = f64>) -> DVector<f64> {
    DVector::from_vec(values.collect())
}

impl Grid {
    pub fn new(
        topo: GridTopology,
        prosumers: Vec<ProsumerParams>,
        lines: Vec<LineParams>,
    ) -> Result<Self> {
        check_len("prosumer parameters", topo.n(), prosumers.len())?;
        check_len("line parameters", topo.m(), lines.len())?;
        for (i, p) in prosumers.iter().enumerate() {
            p.validate(i)?;
        }
        for (k, l) in lines.iter().enumerate() {
            l.validate(k)?;
        }
        let pi_c_sum: f64 = prosumers.iter().map(|p| p.pi_c).sum();
        if (pi_c_sum - 1.0).abs() > PI_C_SUM_TOL {
            return Err(GridError::param(
                "prosumers.pi_c",
                format!("capacity coefficients must sum to 1, got {pi_c_sum}"),
            ));
        }
        let resistances: Vec<f64> = lines.iter().map(|l| l.r).collect();
        let laplacian = topo.weighted_laplacian(&resistances)?;
        let incidence = topo.incidence_matrix();
        Ok(Grid {
            topo,
            prosumers,
            lines,
            incidence,
            laplacian,
        })
    }

    pub fn topology(&self) -> &GridTopology {
        &self.topo
    }

    pub fn n(&self) -> usize {
        self.topo.n()
    }

    pub fn m(&self) -> usize {
        self.topo.m()
    }

    pub fn prosumers(&self) -> &[ProsumerParams] {
        &self.prosumers
    }

    pub fn lines(&self) -> &[LineParams] {
        &self.lines
    }

    pub fn incidence(&self) -> &DMatrix<f64> {
        &self.incidence
    }

    pub fn laplacian(&self) -> &DMatrix<f64> {
        &self.laplacian
    }

    /// Same electrical data with different flexibility coefficients.
    pub fn with_pi_u(&self, pi_u: &[f64]) -> Result<Self> {
        check_len("pi_u", self.n(), pi_u.len())?;
        let prosumers = self
            .prosumers
            .iter()
            .zip(pi_u)
            .map(|(p, &u)| ProsumerParams { pi_u: u, ..*p })
            .collect();
        Grid::new(self.topo.clone(), prosumers, self.lines.clone())
    }

    pub fn prosumer_vec(&self, f: impl Fn(&ProsumerParams) -> f64) -> DVector<f64> {
        collect(self.prosumers.iter().map(f))
    }

    pub fn line_vec(&self, f: impl Fn(&LineParams) -> f64) -> DVector<f64> {
        collect(self.lines.iter().map(f))
    }

    fn check_state(&self, state: &GridState) -> Result<()> {
        check_len("I_s", self.n(), state.i_s.len())?;
        check_len("I", self.m(), state.i.len())?;
        check_len("V", self.n(), state.v.len())
    }

    fn check_input(&self, input: &GridInput) -> Result<()> {
        check_len("u_s", self.n(), input.u_s.len())?;
        check_len("u_l", self.n(), input.u_l.len())
    }

    /// Right-hand side of the plant dynamics.
    pub fn grid_derivative(&self, state: &GridState, input: &GridInput) -> Result<GridState> {
        self.check_state(state)?;
        self.check_input(input)?;
        let u_l = input.applied_u_l();
        let b = &self.incidence;
        let bt_v = b.transpose() * &state.v;
        let b_i = b * &state.i;
        let mut rate = GridState::zeros(self.n(), self.m());
        for (i, p) in self.prosumers.iter().enumerate() {
            rate.i_s[i] = (-p.r_s * state.i_s[i] - state.v[i] + input.u_s[i]) / p.l_s;
            rate.v[i] = (state.i_s[i] + b_i[i] - p.i_l * u_l[i]) / p.c;
        }
        for (k, line) in self.lines.iter().enumerate() {
            rate.i[k] = (-line.r * state.i[k] - bt_v[k]) / line.l;
        }
        Ok(rate)
    }

    /// Unique equilibrium of the plant for a constant input.
    pub fn steady_state(&self, input: &GridInput) -> Result<GridState> {
        self.check_input(input)?;
        let n = self.n();
        let u_l = input.applied_u_l();
        let r_s = self.prosumer_vec(|p| p.r_s);
        let i_l = self.prosumer_vec(|p| p.i_l);
        let load = i_l.component_mul(&u_l);

        let mut lhs = DMatrix::identity(n, n);
        for i in 0..n {
            for j in 0..n {
                lhs[(i, j)] += r_s[i] * self.laplacian[(i, j)];
            }
        }
        let rhs = &input.u_s - r_s.component_mul(&load);
        let v = lhs
            .lu()
            .solve(&rhs)
            .ok_or_else(|| GridError::Numeric("I + R_s L is singular".into()))?;
        let i_s = &self.laplacian * &v + &load;
        let r_inv = self.line_vec(|l| 1.0 / l.r);
        let i = -(self.incidence.transpose() * &v).component_mul(&r_inv);
        let state = GridState { i_s, i, v };
        if !state.is_finite() {
            return Err(GridError::Numeric("steady state is not finite".into()));
        }
        Ok(state)
    }

    /// Largest violation of the steady-state relations
    /// `V = u_s - R_s I_s`, `I = -R^-1 B^T V`, `I_s = -B I + I_l u_l`,
    /// relative to `max(1, |state|_inf)`.
    pub fn steady_state_residual(&self, state: &GridState, input: &GridInput) -> Result<f64> {
        self.check_state(state)?;
        self.check_input(input)?;
        let u_l = input.applied_u_l();
        let b = &self.incidence;
        let bt_v = b.transpose() * &state.v;
        let b_i = b * &state.i;
        let mut worst: f64 = 0.0;
        for (i, p) in self.prosumers.iter().enumerate() {
            worst = worst.max((state.v[i] + p.r_s * state.i_s[i] - input.u_s[i]).abs());
            worst = worst.max((state.i_s[i] + b_i[i] - p.i_l * u_l[i]).abs());
        }
        for (k, line) in self.lines.iter().enumerate() {
            worst = worst.max((state.i[k] + bt_v[k] / line.r).abs());
        }
        Ok(worst / state.amax().max(1.0))
    }

    /// `S = 1/2 xdot^T diag(L_s, L, C) xdot`.
    pub fn storage_value(&self, rate: &GridState) -> f64 {
        let mut s = 0.0;
        for (i, p) in self.prosumers.iter().enumerate() {
            s += p.l_s * rate.i_s[i].powi(2) + p.c * rate.v[i].powi(2);
        }
        for (k, line) in self.lines.iter().enumerate() {
            s += line.l * rate.i[k].powi(2);
        }
        0.5 * s
    }

    /// Passivity output `y = [dI_s/dt, -I_l dV/dt]`.
    pub fn passivity_output(&self, rate: &GridState) -> (DVector<f64>, DVector<f64>) {
        let i_l = self.prosumer_vec(|p| p.i_l);
        (rate.i_s.clone(), -rate.v.component_mul(&i_l))
    }

    /// Checks `S(t_k) - S(t_0) <= int_0^t_k u_dot^T y dt` along a sampled
    /// trajectory, step by step and cumulatively.
    ///
    /// The supply over a step is `(u_{k+1} - u_k)^T y_{k+1}`, the rule under
    /// which the implicit integrator satisfies the inequality exactly.
    pub fn dissipation_check(
        &self,
        samples: &[PassivitySample],
        tolerance: f64,
    ) -> Result<DissipationReport> {
        if samples.is_empty() {
            return Err(GridError::Data("dissipation check needs at least one sample".into()));
        }
        let storage: Vec<f64> = samples.iter().map(|s| self.storage_value(&s.rate)).collect();
        let scale = storage.iter().fold(1.0_f64, |acc, s| acc.max(s.abs()));
        let mut report = DissipationReport {
            supply_integral: 0.0,
            storage_delta: 0.0,
            margin: 0.0,
            step_margin: f64::INFINITY,
            violations: Vec::new(),
        };
        for k in 1..samples.len() {
            let (prev, cur) = (&samples[k - 1], &samples[k]);
            let (y_s, y_l) = self.passivity_output(&cur.rate);
            let du_s = &cur.input.u_s - &prev.input.u_s;
            let du_l = cur.input.applied_u_l() - prev.input.applied_u_l();
            let supply = du_s.dot(&y_s) + du_l.dot(&y_l);
            let step_margin = supply - (storage[k] - storage[k - 1]);
            report.supply_integral += supply;
            report.storage_delta = storage[k] - storage[0];
            let margin = report.supply_integral - report.storage_delta;
            report.step_margin = report.step_margin.min(step_margin);
            if k == 1 || margin < report.margin {
                report.margin = margin;
            }
            if step_margin < -tolerance * scale {
                report.violations.push(k);
            }
        }
        if samples.len() == 1 {
            report.step_margin = 0.0;
        }
        Ok(report)
    }
}

/// One recorded point of a trajectory: the input in force and the plant
/// rate at that instant.
#[derive(Debug, Clone)]
pub struct PassivitySample {
    pub t: f64,
    pub input: GridInput,
    pub rate: GridState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DissipationReport {
    /// Integrated supply `int u_dot^T y dt` over the whole segment.
    pub supply_integral: f64,
    /// `S(t_end) - S(t_0)`.
    pub storage_delta: f64,
    /// Smallest cumulative slack `supply - storage increase`.
    pub margin: f64,
    /// Smallest per-step slack.
    pub step_margin: f64,
    /// Sample indices whose step slack fell below `-tolerance * scale`.
    pub violations: Vec<usize>,
}

impl DissipationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn prosumer(i_l: f64, pi_c: f64) -> ProsumerParams {
        ProsumerParams {
            r_s: 1.5e-3,
            l_s: 2.4e-3,
            c: 2.1e-3,
            i_l,
            pi_c,
            pi_u: 0.05,
            v_d: 380.0,
            v_min: 379.3,
            v_max: 380.7,
            u_l_min: 0.5,
        }
    }

    pub(crate) fn random_grid(rng: &mut ChaCha8Rng, topo: GridTopology) -> Grid {
        let n = topo.n();
        let prosumers = (0..n)
            .map(|_| ProsumerParams {
                r_s: rng.random_range(1e-3..2e-3),
                l_s: rng.random_range(1.8e-3..3e-3),
                c: rng.random_range(1.7e-3..2.5e-3),
                i_l: rng.random_range(6.0..14.0),
                pi_c: 1.0 / n as f64,
                pi_u: rng.random_range(0.01..0.1),
                ..prosumer(10.0, 1.0 / n as f64)
            })
            .collect();
        let lines = (0..topo.m())
            .map(|_| LineParams {
                r: rng.random_range(0.05..0.1),
                l: rng.random_range(2e-6..3e-6),
            })
            .collect();
        Grid::new(topo, prosumers, lines).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> DVector<f64> {
        DVector::from_fn(len, |_, _| rng.random_range(lo..hi))
    }

    #[test]
    fn zero_state_rates_by_hand() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = random_grid(&mut rng, GridTopology::ring(4).unwrap());
        let input = GridInput {
            u_s: DVector::from_element(4, 380.0),
            u_l: DVector::zeros(4),
        };
        let rate = grid.grid_derivative(&GridState::zeros(4, 4), &input).unwrap();
        for (i, p) in grid.prosumers().iter().enumerate() {
            assert!((rate.i_s[i] - 380.0 / p.l_s).abs() < 1e-9);
        }
        assert_eq!(rate.i.amax(), 0.0);
        assert_eq!(rate.v.amax(), 0.0);
    }

    #[test]
    fn derivative_matches_componentwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let topo = GridTopology::new(5, vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (1, 3)]).unwrap();
        let grid = random_grid(&mut rng, topo.clone());
        for _ in 0..20 {
            let state = GridState {
                i_s: random_vec(&mut rng, 5, -20.0, 20.0),
                i: random_vec(&mut rng, 6, -10.0, 10.0),
                v: random_vec(&mut rng, 5, 370.0, 390.0),
            };
            let input = GridInput {
                u_s: random_vec(&mut rng, 5, 370.0, 390.0),
                u_l: random_vec(&mut rng, 5, 0.0, 1.0),
            };
            let rate = grid.grid_derivative(&state, &input).unwrap();
            // naive loop over nodes and edges
            for i in 0..5 {
                let p = grid.prosumers()[i];
                let mut line_in = 0.0;
                for (k, &(a, b)) in topo.edges().iter().enumerate() {
                    if a == i {
                        line_in += state.i[k];
                    }
                    if b == i {
                        line_in -= state.i[k];
                    }
                }
                let dis = (-p.r_s * state.i_s[i] - state.v[i] + input.u_s[i]) / p.l_s;
                let dv = (state.i_s[i] + line_in - p.i_l * input.u_l[i]) / p.c;
                assert!((rate.i_s[i] - dis).abs() <= 1e-12 * dis.abs().max(1.0));
                assert!((rate.v[i] - dv).abs() <= 1e-12 * dv.abs().max(1.0));
            }
            for (k, &(a, b)) in topo.edges().iter().enumerate() {
                let line = grid.lines()[k];
                let di = (-line.r * state.i[k] - (state.v[a] - state.v[b])) / line.l;
                assert!((rate.i[k] - di).abs() <= 1e-12 * di.abs().max(1.0));
            }
        }
    }

    #[test]
    fn derivative_rejects_wrong_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let grid = random_grid(&mut rng, GridTopology::ring(3).unwrap());
        let input = GridInput {
            u_s: DVector::zeros(3),
            u_l: DVector::zeros(2),
        };
        let err = grid.grid_derivative(&GridState::zeros(3, 3), &input).unwrap_err();
        assert!(matches!(err, GridError::Dimension { .. }));
    }

    #[test]
    fn isolated_node_steady_state_by_hand() {
        let topo = GridTopology::new(1, vec![]).unwrap();
        let p = ProsumerParams {
            r_s: 0.001,
            i_l: 10.0,
            ..prosumer(10.0, 1.0)
        };
        let grid = Grid::new(topo, vec![p], vec![]).unwrap();
        let input = GridInput {
            u_s: DVector::from_element(1, 380.0),
            u_l: DVector::from_element(1, 1.0),
        };
        let ss = grid.steady_state(&input).unwrap();
        assert!((ss.v[0] - 379.99).abs() < 1e-12);
        assert!((ss.i_s[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_pair_has_no_line_current() {
        let topo = GridTopology::new(2, vec![(0, 1)]).unwrap();
        let p = prosumer(10.0, 0.5);
        let grid = Grid::new(topo, vec![p, p], vec![LineParams { r: 0.07, l: 2.5e-6 }]).unwrap();
        let input = GridInput {
            u_s: DVector::from_element(2, 380.0),
            u_l: DVector::from_element(2, 0.8),
        };
        let ss = grid.steady_state(&input).unwrap();
        assert!(ss.i[0].abs() < 1e-12);
    }

    #[test]
    fn steady_state_is_an_equilibrium_and_balances_current() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = random_grid(&mut rng, GridTopology::ring(10).unwrap());
        let input = GridInput {
            u_s: random_vec(&mut rng, 10, 379.0, 381.0),
            u_l: random_vec(&mut rng, 10, 0.5, 1.0),
        };
        let ss = grid.steady_state(&input).unwrap();
        let rate = grid.grid_derivative(&ss, &input).unwrap();
        // rates are divided by microhenry line inductances, so compare the
        // storage of the rate instead of its raw size
        let storage = grid.storage_value(&rate);
        assert!(storage < 1e-20, "storage of rate {storage}");
        assert!(grid.steady_state_residual(&ss, &input).unwrap() < 1e-9);
        let demand: f64 = grid
            .prosumers()
            .iter()
            .zip(input.u_l.iter())
            .map(|(p, u)| p.i_l * u)
            .sum();
        assert!((ss.i_s.sum() - demand).abs() < 1e-9 * demand);
    }

    #[test]
    fn steady_state_is_orientation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let topo = GridTopology::ring(6).unwrap();
        let grid = random_grid(&mut rng, topo.clone());
        let flipped = Grid::new(
            topo.with_flipped_edge(2).with_flipped_edge(4),
            grid.prosumers().to_vec(),
            grid.lines().to_vec(),
        )
        .unwrap();
        let input = GridInput {
            u_s: random_vec(&mut rng, 6, 379.0, 381.0),
            u_l: random_vec(&mut rng, 6, 0.5, 1.0),
        };
        let a = grid.steady_state(&input).unwrap();
        let b = flipped.steady_state(&input).unwrap();
        assert!((&a.v - &b.v).amax() < 1e-10);
        assert!((&a.i_s - &b.i_s).amax() < 1e-10);
        for k in 0..6 {
            let sign = if k == 2 || k == 4 { -1.0 } else { 1.0 };
            assert!((a.i[k] - sign * b.i[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn derivative_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let grid = random_grid(&mut rng, GridTopology::ring(4).unwrap());
        let mk = |rng: &mut ChaCha8Rng| {
            (
                GridState {
                    i_s: random_vec(rng, 4, -5.0, 5.0),
                    i: random_vec(rng, 4, -5.0, 5.0),
                    v: random_vec(rng, 4, 375.0, 385.0),
                },
                GridInput {
                    u_s: random_vec(rng, 4, 375.0, 385.0),
                    u_l: random_vec(rng, 4, 0.2, 0.8),
                },
            )
        };
        let (x1, u1) = mk(&mut rng);
        let (x2, u2) = mk(&mut rng);
        let t = 0.3;
        let mix = GridState {
            i_s: &x1.i_s * t + &x2.i_s * (1.0 - t),
            i: &x1.i * t + &x2.i * (1.0 - t),
            v: &x1.v * t + &x2.v * (1.0 - t),
        };
        let umix = GridInput {
            u_s: &u1.u_s * t + &u2.u_s * (1.0 - t),
            u_l: &u1.u_l * t + &u2.u_l * (1.0 - t),
        };
        let r1 = grid.grid_derivative(&x1, &u1).unwrap();
        let r2 = grid.grid_derivative(&x2, &u2).unwrap();
        let rm = grid.grid_derivative(&mix, &umix).unwrap();
        let scale = r1.amax().max(r2.amax());
        assert!((&rm.i_s - (&r1.i_s * t + &r2.i_s * (1.0 - t))).amax() < 1e-12 * scale);
        assert!((&rm.i - (&r1.i * t + &r2.i * (1.0 - t))).amax() < 1e-12 * scale);
        assert!((&rm.v - (&r1.v * t + &r2.v * (1.0 - t))).amax() < 1e-12 * scale);
    }

    #[test]
    fn storage_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let grid = random_grid(&mut rng, GridTopology::ring(3).unwrap());
        assert_eq!(grid.storage_value(&GridState::zeros(3, 3)), 0.0);
        let rate = GridState {
            i_s: random_vec(&mut rng, 3, -100.0, 100.0),
            i: random_vec(&mut rng, 3, -100.0, 100.0),
            v: random_vec(&mut rng, 3, -100.0, 100.0),
        };
        let mut naive = 0.0;
        for i in 0..3 {
            let p = grid.prosumers()[i];
            naive += 0.5 * p.l_s * rate.i_s[i] * rate.i_s[i];
            naive += 0.5 * p.c * rate.v[i] * rate.v[i];
            naive += 0.5 * grid.lines()[i].l * rate.i[i] * rate.i[i];
        }
        assert!((grid.storage_value(&rate) - naive).abs() < 1e-12 * naive);
    }

    #[test]
    fn pi_c_normalisation_enforced() {
        let topo = GridTopology::new(2, vec![(0, 1)]).unwrap();
        let err = Grid::new(
            topo,
            vec![prosumer(10.0, 0.5), prosumer(10.0, 0.6)],
            vec![LineParams { r: 0.07, l: 2.5e-6 }],
        )
        .unwrap_err();
        assert!(matches!(err, GridError::Parameter { ref field, .. } if field == "prosumers.pi_c"));
    }

    #[test]
    fn negative_filter_resistance_names_the_field() {
        let topo = GridTopology::new(1, vec![]).unwrap();
        let p = ProsumerParams {
            r_s: -1e-3,
            ..prosumer(10.0, 1.0)
        };
        let err = Grid::new(topo, vec![p], vec![]).unwrap_err();
        assert!(matches!(err, GridError::Parameter { ref field, .. } if field == "prosumers[0].R_s"));
    }

    #[test]
    fn equilibrium_segment_has_zero_supply_and_storage() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid = random_grid(&mut rng, GridTopology::ring(4).unwrap());
        let input = GridInput {
            u_s: DVector::from_element(4, 380.0),
            u_l: DVector::from_element(4, 0.7),
        };
        let ss = grid.steady_state(&input).unwrap();
        let rate = grid.grid_derivative(&ss, &input).unwrap();
        let samples: Vec<_> = (0..5)
            .map(|k| PassivitySample {
                t: k as f64,
                input: input.clone(),
                rate: rate.clone(),
            })
            .collect();
        let report = grid.dissipation_check(&samples, 1e-12).unwrap();
        assert!(report.supply_integral.abs() < 1e-12);
        assert!(report.storage_delta.abs() < 1e-12);
        assert!(report.passed());
        assert!(grid.dissipation_check(&[], 1e-9).is_err());
    }
}
