//! Scenario files: TOML with an explicit schema version.
//!
//! ```toml
//! schema = 1
//!
//! [equation]
//! kind = "second-order"      # second-order | wave | factored | weak
//! a = ["2 + 0.3*sin(x1)"]    # row-major d x d
//! sigma = "1"
//!
//! [grid]
//! d = 1
//! length = 62.83185307179586
//! n = 256
//!
//! [noise]
//! measure = "white-noise"
//! seed = 7
//! n_paths = 1000
//! dt = 0.01
//!
//! [probe]
//! t = [1.0]
//! x = [[0.0]]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EquationKind {
    /// d_t^2 u - sum a_jk d_j d_k u - sum b_j d_j u - c u = f with expression coefficients.
    SecondOrder,
    /// d_t^2 u - speed^2 Laplace u = f.
    Wave,
    /// Constant coefficients, principal symbol prod (tau - c_j xi), d = 1, order 2..4.
    Factored,
    /// d_t^2 u - t^k d_x^2 u + c t^{k rho} d_x u = f, d = 1.
    Weak,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Engine {
    /// Factorization, eikonal phases and E_N.
    #[default]
    Pipeline,
    /// Closed-form wave multipliers (wave equation only).
    ClosedForm,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquationConfig {
    pub kind: EquationKind,
    #[serde(default)]
    pub a: Vec<String>,
    #[serde(default)]
    pub b: Vec<String>,
    #[serde(default)]
    pub c: Option<String>,
    #[serde(default)]
    pub speed: Option<f64>,
    #[serde(default)]
    pub speeds: Vec<f64>,
    #[serde(default)]
    pub c0: Option<f64>,
    #[serde(default)]
    pub k: Option<u32>,
    #[serde(default)]
    pub coupling: Option<f64>,
    #[serde(default = "zero_expr")]
    pub sigma: String,
    #[serde(default = "zero_expr")]
    pub gamma: String,
    /// d_t^l u(0, x), l = 0 .. n-1, as expressions over x1..x3. Missing entries are 0.
    #[serde(default)]
    pub initial: Vec<String>,
}

fn zero_expr() -> String {
    "0".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub d: usize,
    pub length: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasureConfig {
    /// white-noise | lebesgue | riesz | bessel | delta0 | zero | atoms
    pub measure: String,
    #[serde(default)]
    pub eta: Option<f64>,
    /// [[xi_1, .., xi_d, mass], ...] for `atoms`.
    #[serde(default)]
    pub atoms: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseConfig {
    #[serde(flatten)]
    pub measure: MeasureConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
}

fn default_paths() -> usize {
    1000
}

fn default_dt() -> f64 {
    0.01
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_truncation")]
    pub truncation: usize,
    #[serde(default = "default_nodes")]
    pub quad_nodes: usize,
    #[serde(default = "default_panels")]
    pub panels: usize,
    /// Requested horizon; the achieved one may be smaller.
    pub t_bar: f64,
    #[serde(default)]
    pub engine: Engine,
    /// Dyson levels for the weak example; absent means the resummed series.
    #[serde(default)]
    pub levels: Option<usize>,
}

fn default_truncation() -> usize {
    4
}

fn default_nodes() -> usize {
    8
}

fn default_panels() -> usize {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub t: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    /// Shift probes for the sup over eta; default from the grid.
    #[serde(default)]
    pub eta: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckConfig {
    /// Exponents nu for the spectral-measure integral.
    #[serde(default)]
    pub nu: Vec<f64>,
    /// Equation orders n, checked with nu = n - 1.
    #[serde(default)]
    pub orders: Vec<usize>,
    /// Measures to tabulate; default is the noise measure.
    #[serde(default)]
    pub measures: Vec<MeasureConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out")]
    pub dir: String,
    #[serde(default = "default_formats")]
    pub formats: Vec<String>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: default_out(), formats: default_formats() }
    }
}

fn default_out() -> String {
    "out".into()
}

fn default_formats() -> Vec<String> {
    vec!["csv".into(), "json".into()]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema: u32,
    pub equation: EquationConfig,
    pub grid: GridConfig,
    pub noise: NoiseConfig,
    pub solver: SolverConfig,
    pub probe: ProbeConfig,
    #[serde(default)]
    pub check: CheckConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ScenarioConfig {
    pub fn from_toml(src: &str) -> Result<ScenarioConfig> {
        let cfg: ScenarioConfig = toml::from_str(src).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(ScenarioConfig, String)> {
        let src = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok((ScenarioConfig::from_toml(&src)?, src))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Order n of the equation.
    pub fn order(&self) -> usize {
        match self.equation.kind {
            EquationKind::Factored => self.equation.speeds.len(),
            _ => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema != SCHEMA_VERSION {
            return bad(format!("schema version {} is not supported (expected {SCHEMA_VERSION})", self.schema));
        }
        let d = self.grid.d;
        if !(1..=3).contains(&d) {
            return bad(format!("grid.d must be 1, 2 or 3, got {d}"));
        }
        if !(self.grid.length > 0.0) || self.grid.n < 4 || self.grid.n % 2 != 0 {
            return bad("grid.length must be positive and grid.n even and at least 4".into());
        }
        let e = &self.equation;
        match e.kind {
            EquationKind::SecondOrder => {
                if e.a.len() != d * d {
                    return bad(format!("equation.a needs {} entries for d={d}", d * d));
                }
                if !e.b.is_empty() && e.b.len() != d {
                    return bad(format!("equation.b needs {d} entries"));
                }
            }
            EquationKind::Wave => {}
            EquationKind::Factored => {
                if !(2..=4).contains(&e.speeds.len()) {
                    return bad("equation.speeds must list 2 to 4 root speeds".into());
                }
                if d != 1 {
                    return bad("factored equations are one-dimensional".into());
                }
            }
            EquationKind::Weak => {
                if e.k.is_none() || e.coupling.is_none() {
                    return bad("weak equations need equation.k and equation.coupling".into());
                }
                if d != 1 {
                    return bad("the weak equation is one-dimensional".into());
                }
            }
        }
        if self.solver.engine == Engine::ClosedForm && e.kind != EquationKind::Wave {
            return bad("solver.engine = \"closed-form\" is only available for the wave equation".into());
        }
        if e.initial.len() > self.order() {
            return bad(format!("{} initial data for order {}", e.initial.len(), self.order()));
        }
        if !(self.solver.t_bar > 0.0) {
            return bad("solver.t_bar must be positive".into());
        }
        if self.probe.t.is_empty() || self.probe.x.is_empty() {
            return bad("probe.t and probe.x must be non-empty".into());
        }
        if self.probe.x.iter().any(|x| x.len() != d) {
            return bad(format!("probe.x points must have {d} coordinates"));
        }
        if let Some(eta) = &self.probe.eta {
            if eta.is_empty() || eta.iter().any(|p| p.len() != d) {
                return bad(format!("probe.eta must be a non-empty list of {d}-vectors"));
            }
        }
        if self.noise.n_paths == 0 || !(self.noise.dt > 0.0) {
            return bad("noise.n_paths and noise.dt must be positive".into());
        }
        if let Some(f) = self.output.formats.iter().find(|f| !matches!(f.as_str(), "csv" | "json")) {
            return bad(format!("unknown output format '{f}' (csv, json)"));
        }
        for src in e.a.iter().chain(&e.b).chain(e.c.iter()).chain([&e.sigma, &e.gamma]).chain(&e.initial) {
            crate::expr::Expr::parse(src, &["t", "x1", "x2", "x3"])?;
        }
        Ok(())
    }
}

/// Hex SHA-256 of the configuration text.
pub fn config_hash(src: &str) -> String {
    let digest = Sha256::digest(src.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const WAVE: &str = r#"
schema = 1
[equation]
kind = "wave"
sigma = "1"
[grid]
d = 1
length = 62.83185307179586
n = 256
[noise]
measure = "white-noise"
seed = 3
[solver]
t_bar = 1.0
[probe]
t = [1.0]
x = [[0.0]]
"#;

    #[test]
    fn parses_minimal_file() {
        let c = ScenarioConfig::from_toml(WAVE).unwrap();
        assert_eq!(c.noise.n_paths, 1000);
        assert_eq!(c.solver.engine, Engine::Pipeline);
        assert_eq!(c.order(), 2);
        let again = ScenarioConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again.noise.seed, 3);
    }

    #[test]
    fn rejects_bad_schema_and_expressions() {
        assert!(matches!(ScenarioConfig::from_toml(&WAVE.replace("schema = 1", "schema = 9")), Err(Error::Config(_))));
        assert!(ScenarioConfig::from_toml(&WAVE.replace("sigma = \"1\"", "sigma = \"1 +\"")).is_err());
        assert!(ScenarioConfig::from_toml(&WAVE.replace("kind = \"wave\"", "kind = \"wave\"\nbogus = 1")).is_err());
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(config_hash("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
