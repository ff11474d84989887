//! Experiment configuration: a TOML file with nested tables, strict keys and
//! command-line overrides of the form `section.key=value`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::forward::{
    ControlBox, ControlProcess, ForwardError, InitialPath, NoiseEnsemble, Problem, TimeGrid,
};
use crate::measures::{Atom, MeasureError, RegularMeasure};
use crate::spectral::{CoefficientSpec, Model, OperatorKind, OperatorSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Parse(String),
    #[error("{}{keys}: {message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Invalid {
        keys: String,
        line: Option<usize>,
        message: String,
    },
    #[error("malformed override `{0}`; expected key=value")]
    Override(String),
    #[error("unknown scenario `{0}`; run `list-scenarios` for the registry")]
    UnknownScenario(String),
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Scalar,
    HeatDirichlet,
    HeatNeumann,
    Wave,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub modes: usize,
    /// Coefficient of the scalar generator; only for `kind = "scalar"`.
    #[serde(default)]
    pub a: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dt: f64,
    pub horizon: f64,
    pub delay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    /// One value per mode, or a single value used for every mode.
    pub x0: Vec<f64>,
    #[serde(default)]
    pub slope: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    #[serde(default)]
    pub lo: Option<f64>,
    #[serde(default)]
    pub hi: Option<f64>,
    /// Constant starting control.
    pub initial: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensityConfig {
    /// `cells` defaults to twice the time grid resolution over `[a, b]`.
    Uniform {
        mass: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cells: Option<usize>,
    },
    Linear {
        start: f64,
        end: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cells: Option<usize>,
    },
    /// `scale sum_{i <= i_max} 2^{-i} delta_{b - (b - a)/i}`.
    TruncatedGeometric { scale: f64, i_max: usize },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureConfig {
    /// `[location, mass]` pairs.
    #[serde(default)]
    pub atoms: Vec<[f64; 2]>,
    #[serde(default)]
    pub density: Option<DensityConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasuresConfig {
    pub mu_f: MeasureConfig,
    pub mu_l: MeasureConfig,
    pub mu_h: MeasureConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Constant,
    Ramp,
    #[default]
    Cosine,
}

/// Numerical knobs of the scenarios. Anything left out takes the documented default.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioParams {
    #[serde(default)]
    pub rhos: Option<Vec<f64>>,
    #[serde(default)]
    pub direction: Option<Direction>,
    /// Probe control `w` for the remainder study.
    #[serde(default)]
    pub target: Option<f64>,
    #[serde(default)]
    pub levels: Option<Vec<usize>>,
    #[serde(default)]
    pub refinements: Option<usize>,
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default)]
    pub betas: Option<Vec<f64>>,
    #[serde(default)]
    pub step: Option<f64>,
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub max_iter: Option<usize>,
    #[serde(default)]
    pub dump_paths: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: String,
    pub seed: u64,
    /// Monte Carlo sample size `M`.
    pub paths: usize,
    #[serde(default)]
    pub output: Option<PathBuf>,
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub coefficients: CoefficientSpec,
    pub initial: InitialConfig,
    pub control: ControlConfig,
    pub measures: MeasuresConfig,
    #[serde(default)]
    pub params: ScenarioParams,
}

/// Parsed config together with its source text, for line references.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub source: String,
}

impl LoadedConfig {
    pub fn from_path(path: &Path, overrides: &[String]) -> Result<Self> {
        let source = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_str(&source, overrides)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn from_str(source: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = source
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: ExperimentConfig = if overrides.is_empty() {
            toml::from_str(source).map_err(|e| ConfigError::Parse(e.to_string()))?
        } else {
            value
                .try_into()
                .map_err(|e: toml::de::Error| ConfigError::Parse(format!("after overrides: {e}")))?
        };
        let loaded = Self {
            config,
            source: source.to_string(),
        };
        loaded.validate()?;
        Ok(loaded)
    }

    fn invalid(&self, keys: &str, message: impl Into<String>) -> ConfigError {
        let first = keys.split(',').next().unwrap_or(keys).trim();
        ConfigError::Invalid {
            keys: keys.to_string(),
            line: key_line(&self.source, first),
            message: message.into(),
        }
    }

    /// Checks everything a run needs without running it.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        if !crate::scenarios::is_registered(&c.scenario) {
            return Err(ConfigError::UnknownScenario(c.scenario.clone()));
        }
        if c.paths == 0 {
            return Err(self.invalid("paths", "must be positive"));
        }
        self.problem()?;
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        let g = self.config.grid;
        TimeGrid::new(g.dt, g.horizon, g.delay).map_err(|e| match e {
            ForwardError::Grid { keys, message } => self.invalid(&keys, message),
            other => self.invalid("grid", other.to_string()),
        })
    }

    pub fn operator(&self) -> Result<OperatorSpec> {
        let m = &self.config.model;
        let kind = match (m.kind, m.a) {
            (ModelKind::Scalar, Some(a)) => OperatorKind::Scalar { a },
            (ModelKind::Scalar, None) => {
                return Err(self.invalid("model.a", "required for kind = \"scalar\""))
            }
            (_, Some(_)) => {
                return Err(self.invalid("model.a", "only allowed for kind = \"scalar\""))
            }
            (ModelKind::HeatDirichlet, None) => OperatorKind::HeatDirichlet,
            (ModelKind::HeatNeumann, None) => OperatorKind::HeatNeumann,
            (ModelKind::Wave, None) => OperatorKind::Wave,
        };
        OperatorSpec::new(kind, m.modes).map_err(|e| self.invalid("model.modes", e.to_string()))
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(self.operator()?, self.config.coefficients)
            .map_err(|e| self.invalid("coefficients", e.to_string()))
    }

    fn measure(&self, name: &str, a: f64, b: f64) -> Result<RegularMeasure> {
        let mc = match name {
            "mu_f" => &self.config.measures.mu_f,
            "mu_l" => &self.config.measures.mu_l,
            _ => &self.config.measures.mu_h,
        };
        let key = format!("measures.{name}");
        let dt = self.config.grid.dt;
        build_measure(mc, a, b, dt).map_err(|e| self.invalid(&key, e.to_string()))
    }

    pub fn problem(&self) -> Result<Problem> {
        let grid = self.grid()?;
        let model = self.model()?;
        let dim = model.state_dim();
        let (d, t) = (grid.delay, grid.horizon);
        let mu_f = self.measure("mu_f", -d, 0.0)?;
        let mu_l = self.measure("mu_l", -d, 0.0)?;
        let mu_h = self.measure("mu_h", t - d, t)?;
        let ic = &self.config.initial;
        let x0 = broadcast(&ic.x0, dim).ok_or_else(|| {
            self.invalid(
                "initial.x0",
                format!("expected 1 or {dim} values, got {}", ic.x0.len()),
            )
        })?;
        let slope = match &ic.slope {
            None => None,
            Some(s) => Some(broadcast(s, dim).ok_or_else(|| {
                self.invalid(
                    "initial.slope",
                    format!("expected 1 or {dim} values, got {}", s.len()),
                )
            })?),
        };
        let cc = self.config.control;
        let bounds = ControlBox {
            lo: cc.lo.unwrap_or(f64::NEG_INFINITY),
            hi: cc.hi.unwrap_or(f64::INFINITY),
        };
        if bounds.lo > bounds.hi || bounds.lo.is_nan() || bounds.hi.is_nan() {
            return Err(self.invalid("control.lo, control.hi", "empty control box"));
        }
        if !bounds.contains(cc.initial) {
            return Err(self.invalid("control.initial", "outside the control box"));
        }
        Problem::new(
            model,
            grid,
            mu_f,
            mu_l,
            mu_h,
            InitialPath { x0, slope },
            bounds,
        )
        .map_err(|e| match e {
            ForwardError::MeasureSupport { name, .. } => {
                self.invalid(&format!("measures.{name}"), e.to_string())
            }
            other => self.invalid("model", other.to_string()),
        })
    }

    pub fn initial_control(&self, problem: &Problem) -> ControlProcess {
        ControlProcess::constant(
            problem.grid.steps,
            problem.control_dim(),
            self.config.control.initial,
        )
    }

    pub fn noise(&self, problem: &Problem) -> Option<NoiseEnsemble> {
        problem.stochastic().then(|| {
            NoiseEnsemble::new(
                self.config.seed,
                self.config.paths,
                problem.model.noise_dim(),
                problem.grid.dt,
            )
        })
    }

    /// SHA-256 of the effective configuration, canonically serialized.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(&self.config).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn broadcast(v: &[f64], dim: usize) -> Option<Vec<f64>> {
    match v.len() {
        1 => Some(vec![v[0]; dim]),
        n if n == dim => Some(v.to_vec()),
        _ => None,
    }
}

/// Atoms plus an optional density on `[a, b]`; repeated atom locations merge.
/// Densities without an explicit cell count get `2 (b - a) / dt` cells.
pub fn build_measure(
    mc: &MeasureConfig,
    a: f64,
    b: f64,
    dt: f64,
) -> Result<RegularMeasure, MeasureError> {
    let default_cells = || match 2.0 * (b - a) / dt {
        c if c.is_finite() && c >= 1.0 => c.round() as usize,
        _ => 1,
    };
    let mut atoms: Vec<(f64, f64)> = mc.atoms.iter().map(|p| (p[0], p[1])).collect();
    let mut density = None;
    let mut tail = 0.0;
    match mc.density {
        None => {}
        Some(DensityConfig::Uniform { mass, cells }) => {
            density = Some(
                RegularMeasure::uniform(a, b, mass, cells.unwrap_or_else(default_cells))?
                    .density()
                    .clone(),
            );
        }
        Some(DensityConfig::Linear { start, end, cells }) => {
            density = Some(
                RegularMeasure::linear_density(
                    a,
                    b,
                    start,
                    end,
                    cells.unwrap_or_else(default_cells),
                )?
                .density()
                .clone(),
            );
        }
        Some(DensityConfig::TruncatedGeometric { scale, i_max }) => {
            let g = RegularMeasure::truncated_geometric(a, b, scale, i_max)?;
            atoms.extend(g.atoms().iter().map(|x| (x.location, x.mass)));
            tail = g.tail_mass();
        }
    }
    if atoms.iter().any(|(l, m)| !l.is_finite() || !m.is_finite()) {
        return Err(MeasureError::NonFinite);
    }
    atoms.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut merged: Vec<Atom> = Vec::new();
    for (location, mass) in atoms {
        match merged.last_mut() {
            Some(last) if last.location == location => last.mass += mass,
            _ => merged.push(Atom { location, mass }),
        }
    }
    let mut m = RegularMeasure::new(a, b, merged, density)?;
    if tail > 0.0 {
        m = m.with_tail_mass(tail);
    }
    Ok(m)
}

/// Sets a dotted key in the table; the value is read as a TOML literal and
/// falls back to a string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::Override(spec.to_string()));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Override(format!("{spec}: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// 1-based line where a dotted key is assigned (or its table opened).
pub fn key_line(source: &str, dotted: &str) -> Option<usize> {
    let (table, leaf) = match dotted.rsplit_once('.') {
        Some((t, l)) => (t, l),
        None => ("", dotted),
    };
    let mut current = String::new();
    let mut table_line = None;
    for (i, line) in source.lines().enumerate() {
        let l = line.trim();
        if let Some(h) = l.strip_prefix('[') {
            current = h
                .trim_start_matches('[')
                .trim_end_matches(']')
                .trim()
                .to_string();
            if current == dotted {
                return Some(i + 1);
            }
            if current == table {
                table_line = Some(i + 1);
            }
            continue;
        }
        if let Some((k, _)) = l.split_once('=') {
            let k = k.trim();
            let full = if current.is_empty() {
                k.to_string()
            } else {
                format!("{current}.{k}")
            };
            if full == dotted || (current == table && k == leaf) {
                return Some(i + 1);
            }
            if full == table {
                table_line = Some(i + 1);
            }
        }
    }
    table_line
}

#[cfg(test)]
pub(crate) const SCALAR_LQ: &str = r#"
scenario = "gradient_check"
seed = 7
paths = 1

[model]
kind = "scalar"
modes = 1
a = 0.0

[grid]
dt = 0.01
horizon = 1.0
delay = 0.25

[coefficients]
drift = { family = "affine", b = 0.5, c = 1.0 }
running = { q = 1.0, r = 1.0 }
terminal = { family = "quadratic", m = 1.0 }
diffusion = { family = "constant", sigma = 0.0 }

[initial]
x0 = [1.0]

[control]
initial = 0.0

[measures.mu_f]
atoms = [[-0.25, 1.0]]

[measures.mu_l]
atoms = [[0.0, 0.5], [-0.25, 0.5]]

[measures.mu_h]
atoms = [[1.0, 0.5]]
density = { family = "uniform", mass = 0.5, cells = 16 }
"#;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_builds() {
        let c = LoadedConfig::from_str(SCALAR_LQ, &[]).unwrap();
        let p = c.problem().unwrap();
        assert_eq!(p.grid.delay_steps, 25);
        assert!((p.mu_h.total_mass() - 1.0).abs() < 1e-12);
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let src = SCALAR_LQ.replace("a = 0.0", "a = 0.0\nalpha = 1.0");
        assert!(matches!(
            LoadedConfig::from_str(&src, &[]),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn bad_ratio_names_keys_and_line() {
        let src = SCALAR_LQ.replace("delay = 0.25", "delay = 0.255");
        match LoadedConfig::from_str(&src, &[]) {
            Err(ConfigError::Invalid { keys, line, .. }) => {
                assert!(
                    keys.contains("grid.delay") && keys.contains("grid.dt"),
                    "{keys}"
                );
                let l = line.unwrap();
                assert_eq!(src.lines().nth(l - 1).unwrap().trim(), "delay = 0.255");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_apply_and_change_hash() {
        let a = LoadedConfig::from_str(SCALAR_LQ, &[]).unwrap();
        let b = LoadedConfig::from_str(
            SCALAR_LQ,
            &["grid.dt=0.005".into(), "coefficients.drift.b=0.2".into()],
        )
        .unwrap();
        assert_eq!(b.config.grid.dt, 0.005);
        assert_ne!(a.hash(), b.hash());
        assert!(LoadedConfig::from_str(SCALAR_LQ, &["nonsense".into()]).is_err());
        assert!(matches!(
            LoadedConfig::from_str(SCALAR_LQ, &["scenario=bogus".into()]),
            Err(ConfigError::UnknownScenario(_))
        ));
    }

    #[test]
    fn measure_outside_support_is_invalid() {
        let src = SCALAR_LQ.replace("atoms = [[-0.25, 1.0]]", "atoms = [[-0.5, 1.0]]");
        match LoadedConfig::from_str(&src, &[]) {
            Err(ConfigError::Invalid { keys, .. }) => assert_eq!(keys, "measures.mu_f"),
            other => panic!("{other:?}"),
        }
    }
}
