//! Independent cross-checks of the closed forms against brute-force
//! references, runnable from the command line.

use std::fmt;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::controller::{kkt_residual, loss_penalty_identity, ConstraintMode, ControllerState};
use crate::error::Result;
use crate::network::GridTopology;
use crate::plant::{Grid, GridInput, LineParams, ProsumerParams};
use crate::psychosocial::{default_appliances, flexibility_level, tune_pi_u, FlexibilitySpread, ValueProfile};
use crate::welfare::{
    brute_force_qp_oracle, ideal_welfare_optimum, ideal_welfare_qp, welfare_qp, IdealWelfareSolution,
    OperatingPoint, WelfareWeights,
};

/// Relative agreement required between closed form and enumeration.
pub const LEMMA_TOL: f64 = 1e-8;
pub const LAMBDA_TOL: f64 = 1e-5;
pub const PI_U_SUM_TOL: f64 = 1e-12;
pub const LOSS_TOL: f64 = 1e-8;
pub const KKT_TOL: f64 = 1e-8;

/// Community flexibility levels of the three value profiles.
pub const PROFILE_LEVELS: [(&str, f64, f64, f64); 3] = [
    ("neutral", 0.0, 0.0, 0.30798),
    ("pro-social", 2.0, -1.0, 0.35917),
    ("self-interested", -1.0, 2.0, 0.31183),
];

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheck {
    pub name: &'static str,
    pub seed: Option<u64>,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OracleReport {
    pub checks: Vec<OracleCheck>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &OracleCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let seed = c.seed.map(|s| format!("seed {s}")).unwrap_or_default();
            writeln!(
                f,
                "{:<4} {:<22} {:<9} {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                seed,
                c.detail
            )?;
        }
        let failed = self.failures().count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

fn rel_gap(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(f64::MIN_POSITIVE)
}

/// Random small instance `(I_l, pi_c, pi_u)` with `n <= 5`.
pub fn lemma_instance(seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=5);
    let i_l: Vec<f64> = (0..n).map(|_| rng.random_range(6.0..14.0)).collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let pi_c = raw.iter().map(|r| r / total).collect();
    let pi_u = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    (i_l, pi_c, pi_u)
}

/// Compares a closed form of the ideal optimum with the enumerated QP
/// solution on the instance drawn from `seed`.
pub fn lemma_check<F>(seed: u64, closed_form: F) -> OracleCheck
where
    F: Fn(&[f64], &[f64], &[f64]) -> Result<IdealWelfareSolution>,
{
    let (i_l, pi_c, pi_u) = lemma_instance(seed);
    let outcome = (|| -> Result<(f64, f64, f64)> {
        let closed = closed_form(&i_l, &pi_c, &pi_u)?;
        let qp = ideal_welfare_qp(&i_l, &pi_c, &pi_u)?;
        let sol = brute_force_qp_oracle(&qp)?;
        let n = i_l.len();
        let i_s = sol.x.rows(0, n).into_owned();
        let u_l = sol.x.rows(n, n).into_owned();
        // stationarity in I_s reads I_s / pi_c + nu = 0, so lambda = -nu
        let lambda = -sol.eq_multipliers[0];
        Ok((
            (closed.lambda_opt - lambda).abs() / lambda.abs(),
            rel_gap(&closed.i_s_opt, &i_s),
            rel_gap(&closed.u_l_opt, &u_l),
        ))
    })();
    match outcome {
        Ok((dl, di, du)) => OracleCheck {
            name: "lemma-1",
            seed: Some(seed),
            passed: dl <= LEMMA_TOL && di <= LEMMA_TOL && du <= LEMMA_TOL,
            detail: format!("n={} lambda {dl:.1e}, I_s {di:.1e}, u_l {du:.1e}", i_l.len()),
        },
        Err(e) => OracleCheck {
            name: "lemma-1",
            seed: Some(seed),
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn flexibility_checks() -> Vec<OracleCheck> {
    let models = default_appliances();
    PROFILE_LEVELS
        .iter()
        .map(|&(label, stv, sev, expected)| {
            match flexibility_level(&models, &ValueProfile::new(stv, sev), 0.5) {
                Ok(est) => OracleCheck {
                    name: "flexibility-level",
                    seed: None,
                    passed: (est.lambda - expected).abs() <= LAMBDA_TOL,
                    detail: format!("{label}: {:.6} vs {expected}", est.lambda),
                },
                Err(e) => OracleCheck {
                    name: "flexibility-level",
                    seed: None,
                    passed: false,
                    detail: e.to_string(),
                },
            }
        })
        .collect()
}

fn pi_u_sum_check(seed: u64) -> OracleCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambda = rng.random_range(0.05..0.6);
    let n = rng.random_range(2..=12);
    let adopters: Vec<bool> = (0..n).map(|i| i == 0 || rng.random_bool(0.8)).collect();
    let result = tune_pi_u(lambda, &adopters, &FlexibilitySpread::default(), seed);
    match result {
        Ok(pi_u) => {
            let target = 1.0 / (1.0 - lambda) - 1.0;
            let gap = (pi_u.iter().sum::<f64>() - target).abs();
            OracleCheck {
                name: "pi_u-sum",
                seed: Some(seed),
                passed: gap <= PI_U_SUM_TOL,
                detail: format!("lambda={lambda:.4} gap {gap:.1e}"),
            }
        }
        Err(e) => OracleCheck {
            name: "pi_u-sum",
            seed: Some(seed),
            passed: false,
            detail: e.to_string(),
        },
    }
}

/// Random grid with electrical data from the usual ranges.
pub fn random_grid(seed: u64, n: usize) -> Result<Grid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topology = GridTopology::ring(n)?;
    let prosumers = (0..n)
        .map(|_| ProsumerParams {
            r_s: rng.random_range(1e-3..2e-3),
            l_s: rng.random_range(1.8e-3..3e-3),
            c: rng.random_range(1.7e-3..2.5e-3),
            i_l: rng.random_range(6.0..14.0),
            pi_c: 1.0 / n as f64,
            pi_u: rng.random_range(0.05..0.5),
            v_d: 380.0,
            v_min: 379.3,
            v_max: 380.7,
            u_l_min: 0.5,
        })
        .collect();
    let lines = (0..topology.m())
        .map(|_| LineParams {
            r: rng.random_range(0.05..0.1),
            l: rng.random_range(2e-6..3e-6),
        })
        .collect();
    Grid::new(topology, prosumers, lines)
}

/// The enumerated optimum of the full problem, with its multipliers, is a
/// KKT point of the controller's Lagrangian.
fn controller_kkt_check(seed: u64) -> OracleCheck {
    let outcome = (|| -> Result<f64> {
        let grid = random_grid(seed, 3)?;
        let weights = WelfareWeights {
            alpha: 10.0,
            beta: 1e-3,
            gamma: 1.0,
        };
        let sol = brute_force_qp_oracle(&welfare_qp(&grid, &weights, false, false)?)?;
        let n = grid.n();
        let point = OperatingPoint::from_stacked(&sol.x, n);
        let mut c = ControllerState::zeros(n);
        c.u_s = point.u_s;
        c.u_l = point.u_l;
        c.i_s = point.i_s;
        c.v = point.v;
        c.lambda_a = sol.eq_multipliers.rows(0, n).into_owned();
        c.lambda_b = sol.eq_multipliers.rows(n, n).into_owned();
        let r = kkt_residual(&grid, &weights, ConstraintMode::UNCONSTRAINED, &c, None)?;
        Ok(r.max / c.amax().max(1.0))
    })();
    match outcome {
        Ok(r) => OracleCheck {
            name: "controller-kkt",
            seed: Some(seed),
            passed: r <= KKT_TOL,
            detail: format!("relative residual {r:.1e}"),
        },
        Err(e) => OracleCheck {
            name: "controller-kkt",
            seed: Some(seed),
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn loss_identity_check(seed: u64) -> OracleCheck {
    let outcome = (|| -> Result<f64> {
        let grid = random_grid(seed, 5)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        let input = GridInput {
            u_s: DVector::from_fn(5, |_, _| rng.random_range(379.0..381.0)),
            u_l: DVector::from_fn(5, |_, _| rng.random_range(0.5..1.0)),
        };
        let state = grid.steady_state(&input)?;
        Ok(loss_penalty_identity(&grid, &state, &input)?.gap)
    })();
    match outcome {
        Ok(gap) => OracleCheck {
            name: "loss-identity",
            seed: Some(seed),
            passed: gap <= LOSS_TOL,
            detail: format!("relative gap {gap:.1e}"),
        },
        Err(e) => OracleCheck {
            name: "loss-identity",
            seed: Some(seed),
            passed: false,
            detail: e.to_string(),
        },
    }
}

/// Every check on the seed set `seeds`.
pub fn run_oracle_suite_with(seeds: impl IntoIterator<Item = u64> + Clone) -> OracleReport {
    let mut checks = Vec::new();
    checks.extend(seeds.clone().into_iter().map(|s| lemma_check(s, ideal_welfare_optimum)));
    checks.extend(flexibility_checks());
    checks.extend(seeds.clone().into_iter().map(pi_u_sum_check));
    checks.extend(seeds.clone().into_iter().take(10).map(controller_kkt_check));
    checks.extend(seeds.into_iter().take(10).map(loss_identity_check));
    OracleReport { checks }
}

/// The default suite over seeds `0..50`.
pub fn run_oracle_suite() -> OracleReport {
    run_oracle_suite_with(0..50)
}
