//! Scenario files.
//!
//! A scenario is a TOML document with the tables `grid`, `prosumers`,
//! `lines`, `flexibility` and the optional `weights`, `gains`,
//! `constraints`, `integration` and `output`. Unknown keys are rejected.
//!
//! Electrical quantities are plain numbers in SI units or strings with a
//! unit suffix such as `"1.5 mohm"`, `"2 mH"`, `"2.2 mF"`, `"3 uH"`,
//! `"10 A"` or `"380 V"`. A per-element quantity takes one of three forms:
//! a single value shared by every element, an array with one value per
//! element, or a table `{ min = .., max = .. }` drawn uniformly with the
//! scenario seed.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::controller::{ConstraintMode, ControllerGains};
use crate::error::{GridError, Result};
use crate::network::GridTopology;
use crate::psychosocial::{default_appliances, parse_appliance_table, FlexibilitySpread, ValueProfile};
use crate::sim::{
    ElectricalSpec, FlexibilityConfig, IntegrationSettings, Interval, LambdaSource, ParamSpec, ScenarioConfig,
};
use crate::welfare::WelfareWeights;

const PRESETS: [&str; 4] = [
    include_str!("../presets/scenario1.toml"),
    include_str!("../presets/scenario2.toml"),
    include_str!("../presets/scenario3.toml"),
    include_str!("../presets/scenario4.toml"),
];

/// Text of a shipped preset, numbered 1 to 4.
pub fn preset_text(k: u8) -> Result<&'static str> {
    match k {
        1..=4 => Ok(PRESETS[k as usize - 1]),
        _ => Err(GridError::param("preset", format!("unknown preset {k}, expected 1 to 4"))),
    }
}

pub fn preset_config(k: u8) -> Result<LoadedConfig> {
    parse_config_str(preset_text(k)?, None, &[])
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OutputOptions {
    pub dir: Option<PathBuf>,
    pub plot: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub scenario: ScenarioConfig,
    pub output: OutputOptions,
}

/// Reads, overrides and validates a scenario file. Relative paths inside
/// the file resolve against its directory.
pub fn parse_config(path: &Path, overrides: &[String]) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| GridError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_str(&text, path.parent(), overrides)
}

pub fn parse_config_str(text: &str, base_dir: Option<&Path>, overrides: &[String]) -> Result<LoadedConfig> {
    let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| GridError::Parse(e.to_string()))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let file: FileConfig = toml::Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| GridError::Parse(e.to_string()))?;
    file.into_config(base_dir)
}

/// Applies one `key.path=value` override. The value is read as a TOML value
/// and taken as a bare string when it is not one.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| GridError::Parse(format!("override `{assignment}` is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() {
        return Err(GridError::Parse(format!("override `{assignment}` has an empty key")));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = doc;
    for (depth, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            GridError::Parse(format!("override `{key}`: `{}` is not a table", parts[..=depth].join(".")))
        })?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dim {
    Resistance,
    Inductance,
    Capacitance,
    Current,
    Voltage,
}

impl Dim {
    fn units(self) -> &'static [(&'static str, f64)] {
        match self {
            Dim::Resistance => &[("mohm", 1e-3), ("ohm", 1.0)],
            Dim::Inductance => &[("uH", 1e-6), ("mH", 1e-3), ("H", 1.0)],
            Dim::Capacitance => &[("uF", 1e-6), ("mF", 1e-3), ("F", 1.0)],
            Dim::Current => &[("A", 1.0)],
            Dim::Voltage => &[("V", 1.0)],
        }
    }
}

/// Reads a number in SI units or a string with a unit suffix.
fn quantity(value: &toml::Value, field: &str, dim: Dim) -> Result<f64> {
    match value {
        toml::Value::Float(x) => Ok(*x),
        toml::Value::Integer(x) => Ok(*x as f64),
        toml::Value::String(s) => {
            let s = s.trim();
            let split = s
                .find(|c: char| c.is_ascii_alphabetic() && c != 'e' && c != 'E')
                .ok_or_else(|| GridError::param(field, format!("`{s}` has no unit")))?;
            let (num, unit) = s.split_at(split);
            let unit = unit.trim();
            let scale = dim
                .units()
                .iter()
                .find(|(u, _)| *u == unit)
                .map(|(_, f)| *f)
                .ok_or_else(|| {
                    let allowed: Vec<&str> = dim.units().iter().map(|(u, _)| *u).collect();
                    GridError::param(field, format!("unit `{unit}` not one of {}", allowed.join(", ")))
                })?;
            let x: f64 = num
                .trim()
                .parse()
                .map_err(|_| GridError::param(field, format!("`{num}` is not a number")))?;
            Ok(x * scale)
        }
        other => Err(GridError::param(field, format!("expected a quantity, got {}", other.type_str()))),
    }
}

fn positive(x: f64, field: &str) -> Result<f64> {
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(GridError::param(field, format!("must be positive, got {x}")))
    }
}

fn param_spec(value: &toml::Value, field: &str, dim: Dim) -> Result<ParamSpec> {
    let spec = match value {
        toml::Value::Array(items) => ParamSpec::List(
            items
                .iter()
                .enumerate()
                .map(|(k, v)| positive(quantity(v, &format!("{field}[{k}]"), dim)?, &format!("{field}[{k}]")))
                .collect::<Result<_>>()?,
        ),
        toml::Value::Table(t) => {
            for key in t.keys() {
                if key != "min" && key != "max" {
                    return Err(GridError::param(format!("{field}.{key}"), "unknown key (expected min, max)"));
                }
            }
            let get = |k: &str| {
                let path = format!("{field}.{k}");
                let v = t.get(k).ok_or_else(|| GridError::param(&path, "missing"))?;
                positive(quantity(v, &path, dim)?, &path)
            };
            let iv = Interval::new(get("min")?, get("max")?);
            iv.validate(field)?;
            ParamSpec::Range(iv)
        }
        v => ParamSpec::Fixed(positive(quantity(v, field, dim)?, field)?),
    };
    Ok(spec)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    name: Option<String>,
    #[serde(default)]
    seed: u64,
    grid: GridSection,
    prosumers: ProsumerSection,
    lines: LineSection,
    flexibility: FlexSection,
    #[serde(default)]
    weights: WeightsSection,
    #[serde(default)]
    gains: GainsSection,
    #[serde(default)]
    constraints: ConstraintSection,
    #[serde(default)]
    integration: IntegrationSettings,
    #[serde(default)]
    output: OutputSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
struct GridSection {
    topology: String,
    nodes: Option<usize>,
    edges: Option<Vec<[usize; 2]>>,
    V_d: toml::Value,
    V_min: toml::Value,
    V_max: toml::Value,
    pi_c: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
struct ProsumerSection {
    R_s: toml::Value,
    L_s: toml::Value,
    C: toml::Value,
    I_l: toml::Value,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
struct LineSection {
    R: toml::Value,
    L: toml::Value,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlexSection {
    psi: f64,
    /// `psi`, `profile` or `fixed`.
    source: String,
    lambda: Option<f64>,
    #[serde(default)]
    stv: f64,
    #[serde(default)]
    sev: f64,
    adopters: Option<Vec<bool>>,
    pi_u: Option<Vec<f64>>,
    u_l_min: Option<f64>,
    spread_mean: Option<f64>,
    spread_sd: Option<f64>,
    appliance_table: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct WeightsSection {
    alpha: f64,
    beta: f64,
    gamma: f64,
}

impl Default for WeightsSection {
    fn default() -> Self {
        let w = WelfareWeights::default();
        WeightsSection {
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GainsSection {
    tau_s: f64,
    tau_l: f64,
    tau_i: f64,
    tau_v: f64,
    tau_a: f64,
    tau_b: f64,
    tau_eta: f64,
}

impl Default for GainsSection {
    fn default() -> Self {
        let g = ControllerGains::default();
        GainsSection {
            tau_s: g.tau_s,
            tau_l: g.tau_l,
            tau_i: g.tau_i,
            tau_v: g.tau_v,
            tau_a: g.tau_a,
            tau_b: g.tau_b,
            tau_eta: g.tau_eta,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ConstraintSection {
    load_box: bool,
    voltage_band: bool,
}

impl Default for ConstraintSection {
    fn default() -> Self {
        ConstraintSection {
            load_box: true,
            voltage_band: true,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputSection {
    dir: Option<PathBuf>,
    #[serde(default)]
    plot: bool,
}

impl FileConfig {
    fn into_config(self, base_dir: Option<&Path>) -> Result<LoadedConfig> {
        let g = &self.grid;
        let topology = match g.topology.as_str() {
            "ring" => {
                if g.edges.is_some() {
                    return Err(GridError::param("grid.edges", "not allowed with a ring topology"));
                }
                let n = g.nodes.ok_or_else(|| GridError::param("grid.nodes", "required for a ring"))?;
                GridTopology::ring(n)?
            }
            "edges" => {
                let n = g.nodes.ok_or_else(|| GridError::param("grid.nodes", "required"))?;
                let edges = g
                    .edges
                    .as_ref()
                    .ok_or_else(|| GridError::param("grid.edges", "required for an edge-list topology"))?;
                GridTopology::new(n, edges.iter().map(|e| (e[0], e[1])).collect())?
            }
            other => {
                return Err(GridError::param(
                    "grid.topology",
                    format!("`{other}` is not one of ring, edges"),
                ))
            }
        };
        let n = topology.n();

        let electrical = ElectricalSpec {
            r_s: param_spec(&self.prosumers.R_s, "prosumers.R_s", Dim::Resistance)?,
            l_s: param_spec(&self.prosumers.L_s, "prosumers.L_s", Dim::Inductance)?,
            c: param_spec(&self.prosumers.C, "prosumers.C", Dim::Capacitance)?,
            i_l: param_spec(&self.prosumers.I_l, "prosumers.I_l", Dim::Current)?,
            r_line: param_spec(&self.lines.R, "lines.R", Dim::Resistance)?,
            l_line: param_spec(&self.lines.L, "lines.L", Dim::Inductance)?,
        };

        let f = &self.flexibility;
        let lambda = match f.source.as_str() {
            "psi" => LambdaSource::Psi,
            "profile" => LambdaSource::Profile(ValueProfile::new(f.stv, f.sev)),
            "fixed" => LambdaSource::Fixed(
                f.lambda
                    .ok_or_else(|| GridError::param("flexibility.lambda", "required when source = \"fixed\""))?,
            ),
            other => {
                return Err(GridError::param(
                    "flexibility.source",
                    format!("`{other}` is not one of psi, profile, fixed"),
                ))
            }
        };
        if f.lambda.is_some() && !matches!(lambda, LambdaSource::Fixed(_)) {
            return Err(GridError::param("flexibility.lambda", "only used when source = \"fixed\""));
        }
        let appliances = match &f.appliance_table {
            Some(rel) => {
                let path = base_dir.map(|d| d.join(rel)).unwrap_or_else(|| rel.clone());
                let text = std::fs::read_to_string(&path).map_err(|source| GridError::Io { path, source })?;
                parse_appliance_table(&text)?
            }
            None => default_appliances(),
        };
        let default_spread = FlexibilitySpread::default();
        let spread = FlexibilitySpread {
            mean: f.spread_mean.unwrap_or(default_spread.mean),
            sd: f.spread_sd.unwrap_or(default_spread.sd),
        };

        let w = &self.weights;
        let weights = WelfareWeights {
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
        };
        weights.validate()?;
        let gs = &self.gains;
        let gains = ControllerGains {
            tau_s: gs.tau_s,
            tau_l: gs.tau_l,
            tau_i: gs.tau_i,
            tau_v: gs.tau_v,
            tau_a: gs.tau_a,
            tau_b: gs.tau_b,
            tau_eta: gs.tau_eta,
            weights,
        };

        let scenario = ScenarioConfig {
            name: self.name.clone().unwrap_or_else(|| "scenario".into()),
            topology,
            electrical,
            seed: self.seed,
            v_d: positive(quantity(&g.V_d, "grid.V_d", Dim::Voltage)?, "grid.V_d")?,
            v_min: positive(quantity(&g.V_min, "grid.V_min", Dim::Voltage)?, "grid.V_min")?,
            v_max: positive(quantity(&g.V_max, "grid.V_max", Dim::Voltage)?, "grid.V_max")?,
            pi_c: g.pi_c.clone(),
            gains,
            flexibility: FlexibilityConfig {
                psi: f.psi,
                lambda,
                adopters: f.adopters.clone().unwrap_or_else(|| vec![true; n]),
                pi_u: f.pi_u.clone(),
                spread,
                appliances,
                u_l_min: f.u_l_min,
            },
            constraints: ConstraintMode {
                load_box: self.constraints.load_box,
                voltage_band: self.constraints.voltage_band,
            },
            integration: self.integration,
        };
        // resolving draws the parameters and builds the grid, which runs
        // every remaining domain check
        scenario.resolve()?;
        Ok(LoadedConfig {
            scenario,
            output: OutputOptions {
                dir: self.output.dir.clone(),
                plot: self.output.plot,
            },
        })
    }
}
