//! Scenario drivers behind the command-line subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::config::{config_hash, Engine, EquationKind, GridConfig, MeasureConfig, ScenarioConfig, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::factorization::{Coefficient, HyperbolicOperator};
use crate::grid::{Field, Grid};
use crate::propagator::{assemble_solution_ops, fundamental_solution, PropagatorOptions};
use crate::stochastic::{
    dalang_integral, eta_probes, random_field_solution, AdmissibilityOptions, CoefficientPair, ShellOptions, SimulationOptions,
    SourceKernel, SpaceTime, SpectralMeasure,
};
use crate::wave::WaveKernel;
use crate::weak::{build_weak_system, WeakHypConfig, WeakKernel};

/// Version of the CSV column sets.
pub const CSV_VERSION: u32 = 1;

pub const SIMULATE_COLUMNS: [&str; 9] = ["t", "x", "mean", "variance", "std_error", "n_paths", "I0", "A1_verdict", "A3_verdict"];
pub const CHECK_COLUMNS: [&str; 9] = ["measure", "d", "nu", "n", "eta", "value", "verdict", "sup", "sup_verdict"];
pub const EIKONAL_COLUMNS: [&str; 6] = ["root", "t", "s", "x", "xi", "phi"];

/// Shift probes drawn at random when the config lists none.
const RANDOM_PROBES: usize = 8;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub override_admissibility: bool,
    /// Recorded in the manifest only.
    pub threads: usize,
}

pub fn build_grid(g: &GridConfig) -> Result<Arc<Grid>> {
    Grid::new(g.d, g.length, g.n)
}

pub fn build_measure(m: &MeasureConfig, d: usize) -> Result<SpectralMeasure> {
    let eta = || m.eta.ok_or_else(|| Error::Config(format!("measure '{}' needs eta", m.measure)));
    match m.measure.as_str() {
        "white-noise" | "lebesgue" => Ok(SpectralMeasure::white_noise(d)),
        "riesz" => SpectralMeasure::riesz(d, eta()?),
        "bessel" => SpectralMeasure::bessel(d, eta()?),
        "delta0" => Ok(SpectralMeasure::delta0(d)),
        "zero" => Ok(SpectralMeasure::zero(d)),
        "atoms" => {
            let atoms = m
                .atoms
                .iter()
                .map(|a| {
                    if a.len() != d + 1 {
                        return Err(Error::Config(format!("atoms need {d} coordinates and a mass, got {a:?}")));
                    }
                    Ok((a[..d].to_vec(), a[d]))
                })
                .collect::<Result<Vec<_>>>()?;
            SpectralMeasure::atoms(d, atoms)
        }
        other => Err(Error::Config(format!(
            "unknown measure '{other}' (white-noise, lebesgue, riesz, bessel, delta0, zero, atoms)"
        ))),
    }
}

pub fn build_operator(cfg: &ScenarioConfig) -> Result<HyperbolicOperator> {
    let e = &cfg.equation;
    let d = cfg.grid.d;
    match e.kind {
        EquationKind::SecondOrder => {
            let a = e.a.iter().map(|s| Coefficient::from_expr(s)).collect::<Result<Vec<_>>>()?;
            let b = if e.b.is_empty() {
                (0..d).map(|_| Coefficient::constant(0.0)).collect()
            } else {
                e.b.iter().map(|s| Coefficient::from_expr(s)).collect::<Result<Vec<_>>>()?
            };
            let c = match &e.c {
                Some(s) => Coefficient::from_expr(s)?,
                None => Coefficient::constant(0.0),
            };
            HyperbolicOperator::second_order(d, a, b, c)
        }
        EquationKind::Wave => Ok(HyperbolicOperator::wave(d, e.speed.unwrap_or(1.0))),
        EquationKind::Factored => HyperbolicOperator::factored_1d(&e.speeds, e.c0.unwrap_or(0.0)),
        EquationKind::Weak => Err(Error::Unsupported("the weak equation has its own reduction; use build_kernel".into())),
    }
}

pub fn weak_config(cfg: &ScenarioConfig) -> Result<WeakHypConfig> {
    let e = &cfg.equation;
    let k = e.k.ok_or_else(|| Error::Config("weak equations need equation.k".into()))?;
    let c = e.coupling.ok_or_else(|| Error::Config("weak equations need equation.coupling".into()))?;
    WeakHypConfig { k, c, t_max: cfg.solver.t_bar.min(1.0) }.validated()
}

fn propagator_options(cfg: &ScenarioConfig) -> PropagatorOptions {
    PropagatorOptions { truncation: cfg.solver.truncation, quad_nodes: cfg.solver.quad_nodes, panels: cfg.solver.panels }
}

/// Source kernel for the configured equation and engine.
pub fn build_kernel(cfg: &ScenarioConfig, grid: &Arc<Grid>) -> Result<Box<dyn SourceKernel>> {
    let e = &cfg.equation;
    if e.kind == EquationKind::Weak {
        let sys = build_weak_system(weak_config(cfg)?)?;
        return Ok(Box::new(WeakKernel::new(Arc::new(sys), grid, cfg.solver.levels)?));
    }
    if cfg.solver.engine == Engine::ClosedForm {
        if e.speed.unwrap_or(1.0) != 1.0 {
            return Err(Error::Config("the closed-form wave engine is for unit speed".into()));
        }
        return Ok(Box::new(WaveKernel::new(grid, cfg.solver.t_bar)));
    }
    let op = build_operator(cfg)?;
    let prop = fundamental_solution(&op, grid, cfg.solver.t_bar, propagator_options(cfg))?;
    Ok(Box::new(assemble_solution_ops(prop)))
}

pub fn build_coefficients(cfg: &ScenarioConfig) -> Result<CoefficientPair> {
    let sigma = SpaceTime::from_expr(&cfg.equation.sigma)?;
    let gamma = SpaceTime::from_expr(&cfg.equation.gamma)?;
    let mut pair = CoefficientPair::new(sigma, gamma);
    pair.tags = vec![format!("sigma={}", cfg.equation.sigma), format!("gamma={}", cfg.equation.gamma)];
    Ok(pair)
}

/// d_t^l u(0), l = 0 .. n-1; empty when no initial data are given.
pub fn build_initial(cfg: &ScenarioConfig, grid: &Arc<Grid>) -> Result<Vec<Field>> {
    if cfg.equation.initial.iter().all(|s| s.trim() == "0") {
        return Ok(vec![]);
    }
    let mut out = Vec::with_capacity(cfg.order());
    for l in 0..cfg.order() {
        let src = cfg.equation.initial.get(l).map(String::as_str).unwrap_or("0");
        let e = Expr::parse(src, &["t", "x1", "x2", "x3"])?;
        out.push(Field::from_real_fn(grid, |x| {
            let mut v = [0.0; 4];
            v[1..1 + x.len()].copy_from_slice(x);
            e.eval(&v)
        }));
    }
    Ok(out)
}

/// Shortest round-trip text; exponent form outside [1e-4, 1e15).
pub fn fmt_float(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || !a.is_finite() || (1e-4..1e15).contains(&a) {
        v.to_string()
    } else {
        format!("{v:e}")
    }
}

fn fmt_point(x: &[f64]) -> String {
    x.iter().map(|&v| fmt_float(v)).collect::<Vec<_>>().join(";")
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateRow {
    pub t: f64,
    pub x: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub i0: f64,
    pub a1_verdict: String,
    pub a3_verdict: String,
}

impl SimulateRow {
    fn record(&self) -> Vec<String> {
        vec![
            fmt_float(self.t),
            fmt_point(&self.x),
            fmt_float(self.mean),
            fmt_float(self.variance),
            fmt_float(self.std_error),
            self.n_paths.to_string(),
            fmt_float(self.i0),
            self.a1_verdict.clone(),
            self.a3_verdict.clone(),
        ]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckRow {
    pub measure: String,
    pub d: usize,
    pub nu: f64,
    /// Equation order when nu came from `check.orders`.
    pub n: Option<usize>,
    pub eta: Vec<f64>,
    pub value: f64,
    pub verdict: String,
    pub sup: f64,
    pub sup_verdict: String,
}

impl CheckRow {
    fn record(&self) -> Vec<String> {
        vec![
            self.measure.clone(),
            self.d.to_string(),
            fmt_float(self.nu),
            self.n.map(|n| n.to_string()).unwrap_or_default(),
            fmt_point(&self.eta),
            fmt_float(self.value),
            self.verdict.clone(),
            fmt_float(self.sup),
            self.sup_verdict.clone(),
        ]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EikonalRow {
    pub root: usize,
    pub t: f64,
    pub s: f64,
    pub x: Vec<f64>,
    pub xi: Vec<f64>,
    pub phi: f64,
}

impl EikonalRow {
    fn record(&self) -> Vec<String> {
        vec![self.root.to_string(), fmt_float(self.t), fmt_float(self.s), fmt_point(&self.x), fmt_point(&self.xi), fmt_float(self.phi)]
    }
}

/// RFC 4180 text for a header and records.
pub fn csv_text(header: &[&str], records: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(vec![]);
    w.write_record(header)?;
    for r in records {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub schema: u32,
    pub csv_version: u32,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub grid: GridConfig,
    pub n_paths: usize,
    pub dt: f64,
    pub threads: usize,
    pub horizon: Option<f64>,
    pub timings: BTreeMap<String, f64>,
    pub outputs: Vec<String>,
    pub config: ScenarioConfig,
}

#[derive(Debug, Clone)]
pub struct RunReport<R> {
    pub rows: Vec<R>,
    pub manifest: Manifest,
    pub files: Vec<PathBuf>,
}

fn effective(cfg: &ScenarioConfig, opts: &RunOptions) -> ScenarioConfig {
    let mut c = cfg.clone();
    if let Some(seed) = opts.seed {
        c.noise.seed = seed;
    }
    if let Some(dir) = &opts.out_dir {
        c.output.dir = dir.to_string_lossy().into_owned();
    }
    c
}

fn write_outputs(
    cfg: &ScenarioConfig,
    src: &str,
    command: &str,
    name: &str,
    csv: String,
    mut manifest: Manifest,
) -> Result<(Manifest, Vec<PathBuf>)> {
    let dir = Path::new(&cfg.output.dir);
    fs::create_dir_all(dir)?;
    let mut files = vec![];
    if cfg.output.formats.iter().any(|f| f == "csv") {
        let p = dir.join(format!("{name}.csv"));
        fs::write(&p, csv)?;
        manifest.outputs.push(p.file_name().unwrap().to_string_lossy().into_owned());
        files.push(p);
    }
    manifest.config_hash = config_hash(src);
    manifest.command = command.into();
    if cfg.output.formats.iter().any(|f| f == "json") {
        let p = dir.join(format!("{name}.manifest.json"));
        manifest.outputs.push(p.file_name().unwrap().to_string_lossy().into_owned());
        fs::write(&p, serde_json::to_string_pretty(&manifest)?)?;
        files.push(p);
    }
    Ok((manifest, files))
}

fn manifest_for(cfg: &ScenarioConfig, opts: &RunOptions, horizon: Option<f64>, timings: BTreeMap<String, f64>) -> Manifest {
    Manifest {
        schema: SCHEMA_VERSION,
        csv_version: CSV_VERSION,
        version: env!("CARGO_PKG_VERSION").into(),
        command: String::new(),
        config_hash: String::new(),
        seed: cfg.noise.seed,
        grid: cfg.grid.clone(),
        n_paths: cfg.noise.n_paths,
        dt: cfg.noise.dt,
        threads: opts.threads,
        horizon,
        timings,
        outputs: vec![],
        config: cfg.clone(),
    }
}

/// Monte Carlo moments at every probe (t, x).
pub fn simulate_rows(cfg: &ScenarioConfig, kernel: &dyn SourceKernel, override_admissibility: bool) -> Result<Vec<SimulateRow>> {
    let grid = kernel.grid().clone();
    let mu = build_measure(&cfg.noise.measure, cfg.grid.d)?;
    let coef = build_coefficients(cfg)?;
    let u_init = build_initial(cfg, &grid)?;
    let opts = SimulationOptions {
        dt: cfg.noise.dt,
        override_admissibility,
        admissibility: AdmissibilityOptions {
            probes: cfg.probe.eta.clone(),
            probe_seed: cfg.noise.seed,
            ..AdmissibilityOptions::default()
        },
        panels: cfg.solver.panels,
        nodes: cfg.solver.quad_nodes,
    };
    let mut rows = vec![];
    for &t in &cfg.probe.t {
        for x in &cfg.probe.x {
            let sol = random_field_solution(kernel, &u_init, &coef, &mu, t, x, cfg.noise.n_paths, cfg.noise.seed, &opts)?;
            rows.push(SimulateRow {
                t,
                x: x.clone(),
                mean: sol.mean,
                variance: sol.variance,
                std_error: sol.std_error,
                n_paths: cfg.noise.n_paths,
                i0: sol.i0,
                a1_verdict: sol.a1.verdict.to_string(),
                a3_verdict: sol.a3.verdict.to_string(),
            });
        }
    }
    Ok(rows)
}

pub fn run_simulate(cfg: &ScenarioConfig, src: &str, opts: &RunOptions) -> Result<RunReport<SimulateRow>> {
    let cfg = effective(cfg, opts);
    let mut timings = BTreeMap::new();
    let start = Instant::now();
    let grid = build_grid(&cfg.grid)?;
    let kernel = build_kernel(&cfg, &grid)?;
    timings.insert("build_s".to_string(), start.elapsed().as_secs_f64());
    let start = Instant::now();
    let rows = simulate_rows(&cfg, kernel.as_ref(), opts.override_admissibility)?;
    timings.insert("simulate_s".to_string(), start.elapsed().as_secs_f64());
    let csv = csv_text(&SIMULATE_COLUMNS, rows.iter().map(SimulateRow::record))?;
    let manifest = manifest_for(&cfg, opts, Some(kernel.horizon()), timings);
    let (manifest, files) = write_outputs(&cfg, src, "simulate", "simulate", csv, manifest)?;
    Ok(RunReport { rows, manifest, files })
}

/// (nu, n) pairs: `check.nu`, then `check.orders` as nu = n - 1; the
/// equation order when both are empty.
pub fn check_exponents(cfg: &ScenarioConfig) -> Vec<(f64, Option<usize>)> {
    let mut out: Vec<(f64, Option<usize>)> = cfg.check.nu.iter().map(|&nu| (nu, None)).collect();
    out.extend(cfg.check.orders.iter().map(|&n| (n as f64 - 1.0, Some(n))));
    if out.is_empty() {
        out.push((cfg.order() as f64 - 1.0, Some(cfg.order())));
    }
    out
}

pub fn check_rows(cfg: &ScenarioConfig) -> Result<Vec<CheckRow>> {
    let d = cfg.grid.d;
    let grid = build_grid(&cfg.grid)?;
    let probes = match &cfg.probe.eta {
        Some(p) => p.clone(),
        None => eta_probes(&grid, RANDOM_PROBES, cfg.noise.seed),
    };
    let measures = if cfg.check.measures.is_empty() { vec![cfg.noise.measure.clone()] } else { cfg.check.measures.clone() };
    let shells = ShellOptions::default();
    let mut rows = vec![];
    for m in &measures {
        let mu = build_measure(m, d)?;
        for (nu, n) in check_exponents(cfg) {
            if !(nu > 0.0) {
                return Err(Error::Config(format!("exponent nu must be positive, got {nu}")));
            }
            let r = dalang_integral(&mu, nu, &probes, &shells)?;
            for p in &r.per_eta {
                rows.push(CheckRow {
                    measure: mu.label().to_string(),
                    d,
                    nu,
                    n,
                    eta: p.eta.clone(),
                    value: p.value,
                    verdict: p.verdict.to_string(),
                    sup: r.sup_value,
                    sup_verdict: r.verdict.to_string(),
                });
            }
        }
    }
    Ok(rows)
}

pub fn run_check(cfg: &ScenarioConfig, src: &str, opts: &RunOptions) -> Result<RunReport<CheckRow>> {
    let cfg = effective(cfg, opts);
    let start = Instant::now();
    let rows = check_rows(&cfg)?;
    let mut timings = BTreeMap::new();
    timings.insert("check_s".to_string(), start.elapsed().as_secs_f64());
    let csv = csv_text(&CHECK_COLUMNS, rows.iter().map(CheckRow::record))?;
    let manifest = manifest_for(&cfg, opts, None, timings);
    let (manifest, files) = write_outputs(&cfg, src, "check", "check", csv, manifest)?;
    Ok(RunReport { rows, manifest, files })
}

/// Phase values of every root on a coarse (t, x, xi) table with s = 0.
pub fn eikonal_rows(cfg: &ScenarioConfig) -> Result<(Vec<EikonalRow>, f64)> {
    if cfg.equation.kind == EquationKind::Weak {
        return Err(Error::Unsupported("eikonal-dump covers the strictly hyperbolic equations; the weak example has no phase table".into()));
    }
    let grid = build_grid(&cfg.grid)?;
    let op = build_operator(cfg)?;
    let prop = fundamental_solution(&op, &grid, cfg.solver.t_bar, propagator_options(cfg))?;
    let horizon = prop.horizon();
    let d = grid.dim();
    let step = (grid.total() / 8).max(1);
    let xs: Vec<Vec<f64>> = (0..grid.total()).step_by(step).map(|i| grid.point(i)).collect();
    let mut kappas = vec![];
    let mut k = 1i64;
    while k < grid.n() as i64 / 2 {
        kappas.push(k);
        kappas.push(-k);
        k *= 2;
    }
    let mut rows = vec![];
    for (j, ph) in prop.phases().iter().enumerate() {
        for q in 0..=4 {
            let t = horizon * q as f64 / 4.0;
            for x in &xs {
                for &kappa in &kappas {
                    let mut xi = vec![0.0; d];
                    xi[0] = kappa as f64 * grid.dxi();
                    rows.push(EikonalRow { root: j, t, s: 0.0, x: x.clone(), xi: xi.clone(), phi: ph.eval(t, 0.0, x, &xi) });
                }
            }
        }
    }
    Ok((rows, horizon))
}

pub fn run_eikonal_dump(cfg: &ScenarioConfig, src: &str, opts: &RunOptions) -> Result<RunReport<EikonalRow>> {
    let cfg = effective(cfg, opts);
    let start = Instant::now();
    let (rows, horizon) = eikonal_rows(&cfg)?;
    let mut timings = BTreeMap::new();
    timings.insert("eikonal_s".to_string(), start.elapsed().as_secs_f64());
    let csv = csv_text(&EIKONAL_COLUMNS, rows.iter().map(EikonalRow::record))?;
    let manifest = manifest_for(&cfg, opts, Some(horizon), timings);
    let (manifest, files) = write_outputs(&cfg, src, "eikonal-dump", "eikonal", csv, manifest)?;
    Ok(RunReport { rows, manifest, files })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_uses_crlf_and_quotes() {
        let s = csv_text(&["a", "b"], vec![vec!["1".to_string(), "x,y".to_string()]]).unwrap();
        assert_eq!(s, "a,b\r\n1,\"x,y\"\r\n");
    }

    #[test]
    fn points_join_with_semicolons() {
        assert_eq!(fmt_point(&[0.0, 0.5, -1.25]), "0;0.5;-1.25");
        assert_eq!(fmt_float(-6.5e-17), "-6.5e-17");
        assert_eq!(fmt_float(f64::INFINITY), "inf");
    }

    #[test]
    fn unknown_measure_is_a_config_error() {
        let m = MeasureConfig { measure: "pink".into(), eta: None, atoms: vec![] };
        assert!(matches!(build_measure(&m, 1), Err(Error::Config(_))));
        let m = MeasureConfig { measure: "riesz".into(), eta: None, atoms: vec![] };
        assert!(matches!(build_measure(&m, 2), Err(Error::Config(_))));
    }
}
