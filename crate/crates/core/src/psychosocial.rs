//! Flexibility estimation from household value orientations.
//!
//! Each appliance carries a linear adoption model in the community's
//! standardized self-transcendence (STV) and self-enhancement (SEV) scores.
//! The consumption-weighted adoption, capped by the technical ceiling `psi`,
//! is the share of demand the community accepts to curtail.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GridError, Result};

/// Tolerance on `sum(omega) = 1`.
pub const OMEGA_SUM_TOL: f64 = 1e-9;

/// Flexibility coefficient given to prosumers that do not take part in
/// demand response. Small but nonzero, since the controller divides by it.
pub const NON_ADOPTER_PI_U: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplianceModel {
    pub name: String,
    pub mu: f64,
    pub theta: f64,
    pub epsilon: f64,
    pub omega: f64,
}

impl ApplianceModel {
    pub fn new(name: &str, mu: f64, theta: f64, epsilon: f64, omega: f64) -> Self {
        ApplianceModel {
            name: name.to_string(),
            mu,
            theta,
            epsilon,
            omega,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueProfile {
    pub stv: f64,
    pub sev: f64,
}

impl ValueProfile {
    pub fn new(stv: f64, sev: f64) -> Self {
        ValueProfile { stv, sev }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlexibilityEstimate {
    pub rho: Vec<f64>,
    pub psi: f64,
    pub lambda: f64,
}

/// Default appliance coefficients.
pub fn default_appliances() -> Vec<ApplianceModel> {
    vec![
        ApplianceModel::new("refrigerator", 0.548, 0.066, 0.049, 0.05),
        ApplianceModel::new("fridge", 0.532, 0.070, 0.044, 0.05),
        ApplianceModel::new("dish washer", 0.614, 0.077, 0.028, 0.01),
        ApplianceModel::new("washing machine", 0.664, 0.074, 0.033, 0.02),
        ApplianceModel::new("tumble dryer", 0.607, 0.071, 0.026, 0.02),
        ApplianceModel::new("thermostat", 0.624, 0.071, 0.039, 0.85),
    ]
}

/// Mean survey score (1 to 5 scale) for each appliance, keyed by the
/// appliance name used in [`default_appliances`]. The survey asked about a
/// "freezer", listed as "fridge" in the coefficient table.
pub const SURVEY_MEANS: [(&str, f64); 6] = [
    ("thermostat", 3.50),
    ("refrigerator", 3.19),
    ("fridge", 3.13),
    ("dish washer", 3.45),
    ("washing machine", 3.66),
    ("tumble dryer", 3.43),
];

/// Population statistics of a raw value scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleStats {
    pub mean: f64,
    pub sd: f64,
}

pub const STV_STATS: ScaleStats = ScaleStats { mean: 4.80, sd: 1.36 };
pub const SEV_STATS: ScaleStats = ScaleStats { mean: 3.22, sd: 1.23 };

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ApplianceFile {
    appliance: Vec<ApplianceModel>,
}

/// Parses an appliance table of `[[appliance]]` entries with fields
/// `name`, `mu`, `theta`, `epsilon`, `omega`.
pub fn parse_appliance_table(text: &str) -> Result<Vec<ApplianceModel>> {
    let file: ApplianceFile =
        toml::from_str(text).map_err(|e| GridError::Data(format!("appliance table: {e}")))?;
    validate_appliances(&file.appliance)?;
    Ok(file.appliance)
}

pub fn validate_appliances(models: &[ApplianceModel]) -> Result<()> {
    if models.is_empty() {
        return Err(GridError::param("appliances", "table is empty"));
    }
    for (j, m) in models.iter().enumerate() {
        if !(0.0..=1.0).contains(&m.mu) {
            return Err(GridError::param(format!("appliances[{j}].mu"), format!("must lie in [0, 1], got {}", m.mu)));
        }
        if !(0.0..=1.0).contains(&m.omega) {
            return Err(GridError::param(
                format!("appliances[{j}].omega"),
                format!("must lie in [0, 1], got {}", m.omega),
            ));
        }
        if !(m.theta.is_finite() && m.epsilon.is_finite()) {
            return Err(GridError::param(format!("appliances[{j}]"), "coefficients must be finite"));
        }
    }
    let total: f64 = models.iter().map(|m| m.omega).sum();
    if (total - 1.0).abs() > OMEGA_SUM_TOL {
        return Err(GridError::param(
            "appliances.omega",
            format!("consumption weights must sum to 1, got {total}"),
        ));
    }
    Ok(())
}

/// `clamp(mu + theta STV + epsilon SEV, 0, 1)`.
pub fn adoption_likelihood(model: &ApplianceModel, profile: &ValueProfile) -> f64 {
    (model.mu + model.theta * profile.stv + model.epsilon * profile.sev).clamp(0.0, 1.0)
}

/// `Lambda = psi * sum_j omega_j rho_j`.
pub fn flexibility_level(models: &[ApplianceModel], profile: &ValueProfile, psi: f64) -> Result<FlexibilityEstimate> {
    validate_appliances(models)?;
    if !(0.0..=1.0).contains(&psi) {
        return Err(GridError::param("flexibility.psi", format!("must lie in [0, 1], got {psi}")));
    }
    if !(profile.stv.is_finite() && profile.sev.is_finite()) {
        return Err(GridError::param("flexibility.profile", "scores must be finite"));
    }
    let rho: Vec<f64> = models.iter().map(|m| adoption_likelihood(m, profile)).collect();
    let weighted: f64 = models.iter().zip(&rho).map(|(m, r)| m.omega * r).sum();
    Ok(FlexibilityEstimate {
        rho,
        psi,
        lambda: psi * weighted,
    })
}

/// Total flexibility `sum(pi_u) = 1 / (1 - Lambda) - 1` that makes the
/// unconstrained welfare optimum curtail a share `Lambda` of demand when
/// `sum(pi_c) = 1`.
pub fn pi_u_total(lambda: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(GridError::param(
            "flexibility.lambda",
            format!("must lie in [0, 1), got {lambda}"),
        ));
    }
    Ok(1.0 / (1.0 - lambda) - 1.0)
}

/// Distribution of the relative flexibility across adopting prosumers.
/// Draws are normal with the given mean and standard deviation, truncated
/// to positive values; only their ratios matter after renormalisation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlexibilitySpread {
    pub mean: f64,
    pub sd: f64,
}

impl Default for FlexibilitySpread {
    fn default() -> Self {
        FlexibilitySpread {
            mean: SEV_STATS.mean,
            sd: SEV_STATS.sd,
        }
    }
}

/// Per-prosumer flexibility coefficients summing to [`pi_u_total`].
///
/// Non-adopters receive [`NON_ADOPTER_PI_U`]; adopters share the rest in
/// proportion to seeded truncated-normal draws. When the target does not
/// exceed the non-adopter floor (e.g. `Lambda = 0`) every entry sits at the
/// floor and the sum is left above the target.
pub fn tune_pi_u(lambda: f64, adopters: &[bool], spread: &FlexibilitySpread, seed: u64) -> Result<Vec<f64>> {
    let target = pi_u_total(lambda)?;
    let n = adopters.len();
    if n == 0 {
        return Err(GridError::param("flexibility.adopters", "no prosumers"));
    }
    if !(spread.mean > 0.0 && spread.sd >= 0.0 && spread.mean.is_finite() && spread.sd.is_finite()) {
        return Err(GridError::param(
            "flexibility.spread",
            format!("need mean > 0 and sd >= 0, got mean {} sd {}", spread.mean, spread.sd),
        ));
    }
    let n_adopt = adopters.iter().filter(|&&a| a).count();
    let floor_total = NON_ADOPTER_PI_U * (n - n_adopt) as f64;
    let share = target - floor_total;
    if n_adopt == 0 || share <= NON_ADOPTER_PI_U * n_adopt as f64 {
        if n_adopt == 0 && target > floor_total {
            return Err(GridError::param(
                "flexibility.adopters",
                "positive flexibility requested but no prosumer adopts",
            ));
        }
        return Ok(vec![NON_ADOPTER_PI_U; n]);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(spread.mean, spread.sd)
        .map_err(|e| GridError::param("flexibility.spread", e.to_string()))?;
    let mut raw = vec![0.0; n];
    for (i, &adopts) in adopters.iter().enumerate() {
        if !adopts {
            continue;
        }
        raw[i] = loop {
            let x = normal.sample(&mut rng);
            if x > 0.0 {
                break x;
            }
        };
    }
    let raw_total: f64 = raw.iter().sum();
    Ok(adopters
        .iter()
        .zip(&raw)
        .map(|(&adopts, &r)| if adopts { share * r / raw_total } else { NON_ADOPTER_PI_U })
        .collect())
}

/// Maps a 1-to-5 Likert score to `[0, 1]`.
pub fn survey_transform(raw: f64) -> Result<f64> {
    if !(1.0..=5.0).contains(&raw) {
        return Err(GridError::Data(format!("survey score {raw} outside [1, 5]")));
    }
    Ok((raw - 1.0) / 4.0)
}

pub fn standardize(scores: &[f64], mean: f64, sd: f64) -> Result<Vec<f64>> {
    if !(sd > 0.0 && sd.is_finite()) {
        return Err(GridError::Data(format!("standard deviation must be positive, got {sd}")));
    }
    Ok(scores.iter().map(|x| (x - mean) / sd).collect())
}

/// Standardizes a population against its own sample mean and standard
/// deviation (denominator `n - 1`).
pub fn standardize_population(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.len() < 2 {
        return Err(GridError::Data("need at least two scores to standardize".into()));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    standardize(scores, mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn by_name(name: &str) -> ApplianceModel {
        default_appliances().into_iter().find(|m| m.name == name).unwrap()
    }

    #[test]
    fn likelihood_examples() {
        let t = by_name("thermostat");
        assert!((adoption_likelihood(&t, &ValueProfile::default()) - 0.624).abs() < 1e-12);
        assert!((adoption_likelihood(&t, &ValueProfile::new(2.0, -1.0)) - 0.727).abs() < 1e-12);
        let r = by_name("refrigerator");
        assert!((adoption_likelihood(&r, &ValueProfile::new(-1.0, 2.0)) - 0.580).abs() < 1e-12);
    }

    #[test]
    fn likelihood_is_clamped() {
        let t = by_name("thermostat");
        assert_eq!(adoption_likelihood(&t, &ValueProfile::new(30.0, 0.0)), 1.0);
        assert_eq!(adoption_likelihood(&t, &ValueProfile::new(-30.0, 0.0)), 0.0);
    }

    #[test]
    fn likelihood_increases_with_both_scores() {
        for m in default_appliances() {
            let base = adoption_likelihood(&m, &ValueProfile::default());
            assert!(adoption_likelihood(&m, &ValueProfile::new(0.5, 0.0)) > base);
            assert!(adoption_likelihood(&m, &ValueProfile::new(0.0, 0.5)) > base);
        }
    }

    #[test]
    fn flexibility_level_examples() {
        let apps = default_appliances();
        let f = flexibility_level(&apps, &ValueProfile::default(), 0.5).unwrap();
        assert!((f.lambda - 0.30798).abs() < 1e-12);
        let f = flexibility_level(&apps, &ValueProfile::new(2.0, -1.0), 0.5).unwrap();
        assert!((f.lambda - 0.35917).abs() < 1e-12);
        let f = flexibility_level(&apps, &ValueProfile::new(-1.0, 2.0), 0.5).unwrap();
        assert!((f.lambda - 0.31183).abs() < 1e-12);
        let f = flexibility_level(&apps, &ValueProfile::new(2.0, -1.0), 0.0).unwrap();
        assert_eq!(f.lambda, 0.0);
        assert!(f.lambda <= f.psi);
    }

    #[test]
    fn weight_sum_is_checked() {
        let mut apps = default_appliances();
        apps[0].omega = 0.06;
        let err = flexibility_level(&apps, &ValueProfile::default(), 0.5).unwrap_err();
        assert!(matches!(err, GridError::Parameter { ref field, .. } if field == "appliances.omega"));
        assert!(flexibility_level(&default_appliances(), &ValueProfile::default(), 1.5).is_err());
    }

    #[test]
    fn pi_u_sum_identity() {
        assert!((pi_u_total(0.5).unwrap() - 1.0).abs() < 1e-15);
        let pi = tune_pi_u(0.5, &[true; 10], &FlexibilitySpread::default(), 7).unwrap();
        assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let pi = tune_pi_u(0.30798, &[true; 10], &FlexibilitySpread::default(), 42).unwrap();
        assert!((pi.iter().sum::<f64>() - (1.0 / 0.69202 - 1.0)).abs() < 1e-12);
        assert!((pi.iter().sum::<f64>() - 0.44504).abs() < 1e-5);
        assert!(pi.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn zero_lambda_gives_floor() {
        let pi = tune_pi_u(0.0, &[true; 4], &FlexibilitySpread::default(), 1).unwrap();
        assert_eq!(pi, vec![NON_ADOPTER_PI_U; 4]);
    }

    #[test]
    fn non_adopters_sit_at_floor() {
        let adopters = [true, false, true, true, false];
        let pi = tune_pi_u(0.3, &adopters, &FlexibilitySpread::default(), 3).unwrap();
        assert_eq!(pi[1], NON_ADOPTER_PI_U);
        assert_eq!(pi[4], NON_ADOPTER_PI_U);
        assert!((pi.iter().sum::<f64>() - pi_u_total(0.3).unwrap()).abs() < 1e-12);
        assert!(tune_pi_u(0.3, &[false; 3], &FlexibilitySpread::default(), 3).is_err());
    }

    #[test]
    fn tuning_is_seeded() {
        let s = FlexibilitySpread::default();
        let a = tune_pi_u(0.3, &[true; 10], &s, 11).unwrap();
        let b = tune_pi_u(0.3, &[true; 10], &s, 11).unwrap();
        let c = tune_pi_u(0.3, &[true; 10], &s, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn full_flexibility_is_rejected() {
        assert!(tune_pi_u(1.0, &[true; 3], &FlexibilitySpread::default(), 0).is_err());
        assert!(pi_u_total(-0.1).is_err());
    }

    #[test]
    fn survey_transform_examples() {
        assert!((survey_transform(3.50).unwrap() - 0.625).abs() < 1e-15);
        assert!((survey_transform(3.19).unwrap() - 0.5475).abs() < 1e-15);
        assert_eq!(survey_transform(1.0).unwrap(), 0.0);
        assert!(matches!(survey_transform(5.5), Err(GridError::Data(_))));
        assert!(survey_transform(0.0).is_err());
    }

    #[test]
    fn standardize_examples() {
        assert_eq!(standardize(&[4.80], STV_STATS.mean, STV_STATS.sd).unwrap(), vec![0.0]);
        let z = standardize(&[4.45], SEV_STATS.mean, SEV_STATS.sd).unwrap();
        assert!((z[0] - 1.0).abs() < 1e-12);
        assert!(standardize(&[1.0], 0.0, 0.0).is_err());
        assert!(standardize_population(&[2.0, 2.0, 2.0]).is_err());
        let z = standardize_population(&[1.0, 2.0, 3.0, 6.0]).unwrap();
        let mean: f64 = z.iter().sum::<f64>() / 4.0;
        let var: f64 = z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn appliance_table_parses() {
        let text = r#"
[[appliance]]
name = "heater"
mu = 0.5
theta = 0.1
epsilon = 0.02
omega = 0.4

[[appliance]]
name = "boiler"
mu = 0.6
theta = 0.05
epsilon = 0.01
omega = 0.6
"#;
        let apps = parse_appliance_table(text).unwrap();
        assert_eq!(apps.len(), 2);
        let f = flexibility_level(&apps, &ValueProfile::default(), 1.0).unwrap();
        assert!((f.lambda - 0.56).abs() < 1e-12);
        assert!(parse_appliance_table("[[appliance]]\nname = \"x\"\nmu = 0.5\n").is_err());
    }
}
