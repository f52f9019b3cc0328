//! The five commands. Each writes its artifacts into the output directory
//! and returns a JSON summary for stdout.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use conehjb::grid::{Grid, GridSpec};
use conehjb::lyapunov::{supersolution_scale, verification_nodes, verify_lyapunov, LyapunovCertificate};
use conehjb::sim::{
    merton_parameters, simulate_paths, summarize, write_results_csv, GridPolicy, Market, MertonPolicy, Policy, SimOptions,
    ZeroPolicy,
};
use conehjb::solver::{refine_study, solve, NodeAction, Problem, ValueField};
use conehjb::{ConeSpec, ScalarField};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{CertificateConfig, ExperimentConfig};
use crate::error::{CliError, Result};

/// Everything a command needs: the validated config and where to write.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyChoice {
    Zero,
    Merton,
    Grid,
    GridFile(PathBuf),
}

impl PolicyChoice {
    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "zero" => Ok(Self::Zero),
            "merton" => Ok(Self::Merton),
            "grid" => Ok(Self::Grid),
            _ => match s.strip_prefix("grid:") {
                Some(f) if !f.is_empty() => Ok(Self::GridFile(PathBuf::from(f))),
                _ => Err(format!("unknown policy `{s}` (expected zero, merton, grid or grid:FILE)")),
            },
        }
    }
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        let p = Path::new(name);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    fn create(&self, name: &str) -> Result<(PathBuf, BufWriter<File>)> {
        std::fs::create_dir_all(&self.out_dir)
            .map_err(|e| CliError::io(format!("creating {}", self.out_dir.display()), e))?;
        let path = self.path(name);
        let file = File::create(&path).map_err(|e| CliError::io(format!("creating {}", path.display()), e))?;
        Ok((path, BufWriter::new(file)))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let (path, mut w) = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::io(format!("writing {}", path.display()), e.into()))?;
        writeln!(w).and_then(|_| w.flush()).map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
        Ok(path)
    }

    fn problem<'a>(&'a self, cone: &'a ConeSpec) -> Problem<'a> {
        Problem { model: &self.cfg.model, cone, utility: &self.cfg.utility }
    }

    /// Certificate from the config block: verified at the configured
    /// discount and, when `ρ = γ`, scaled to a strict supersolution.
    fn certificate(&self, cone: &ConeSpec, block: &CertificateConfig) -> Result<LyapunovCertificate> {
        let model = &self.cfg.model;
        let utility = &self.cfg.utility;
        let mut cert = LyapunovCertificate::compute(model, cone, &block.p, block.rho)?;
        let nodes = verification_nodes(cone, block.r_max, block.n_radial, block.n_angular)?;
        let report = verify_lyapunov(&mut cert, model, cone, utility.beta, &nodes)?;
        if !report.passed {
            log::warn!("Lyapunov verification failed (max L0 f_p = {:e}); no supersolution bound", report.max_l0);
        } else if (block.rho - utility.gamma).abs() <= 1e-12 {
            if let Err(e) = supersolution_scale(&mut cert, model, cone, utility, &nodes) {
                log::warn!("no supersolution scale: {e}");
            }
        }
        Ok(cert)
    }

    fn config_certificate(&self, cone: &ConeSpec) -> Result<Option<LyapunovCertificate>> {
        self.cfg.certificate.as_ref().map(|b| self.certificate(cone, b)).transpose()
    }

    fn interp_direction(&self, cone: &ConeSpec) -> [f64; 2] {
        let q = self.cfg.certificate.as_ref().map(|c| c.p.clone()).unwrap_or_else(|| cone.dual_interior_direction());
        [q[0], q[1]]
    }

    fn grid(&self, cone: &ConeSpec) -> Result<Grid> {
        Ok(Grid::new(cone, &self.cfg.grid)?)
    }

    fn solve_field(&self, cone: &ConeSpec, cert: Option<&LyapunovCertificate>) -> Result<ValueField> {
        let grid = self.grid(cone)?;
        Ok(solve(&self.problem(cone), &grid, cert, &self.cfg.solver)?)
    }
}

/// `solve`: writes the field and its diagnostics, plus the refinement
/// report when asked.
pub fn solve_cmd(ctx: &Context, with_refine: bool, out: Option<&str>) -> Result<Value> {
    let cone = ctx.cfg.cone_spec()?;
    let start = Instant::now();
    let cert = ctx.config_certificate(&cone)?;
    let field = ctx.solve_field(&cone, cert.as_ref())?;
    let (field_path, mut w) = ctx.create(out.unwrap_or(&ctx.cfg.outputs.field))?;
    field.write_csv(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(format!("writing {}", field_path.display()), e))?;
    let elapsed = start.elapsed().as_secs_f64();
    let doc = json!({
        "config": ctx.cfg,
        "nodes": field.values.len(),
        "solver": field.diagnostics,
        "certificate": cert,
        "elapsed_secs": elapsed,
    });
    let diag_path = ctx.write_json(&ctx.cfg.outputs.diagnostics, &doc)?;
    let mut summary = json!({
        "command": "solve",
        "field": field_path,
        "diagnostics": diag_path,
        "iterations": field.diagnostics.iterations,
        "converged": field.diagnostics.converged,
        "elapsed_secs": elapsed,
    });
    if with_refine {
        summary["refine"] = refine_cmd(ctx)?["refine"].clone();
    }
    Ok(summary)
}

/// Rebuilds a solved field from a `field.csv` on the config grid.
pub fn load_field(ctx: &Context, cone: &ConeSpec, path: &Path) -> Result<ValueField> {
    let grid = ctx.grid(cone)?;
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Usage(format!("reading {}: {e}", path.display())))?;
    let bad = |msg: String| CliError::Usage(format!("{}: {msg}", path.display()));
    let mut values = Vec::with_capacity(grid.len());
    let mut actions = Vec::with_capacity(grid.len());
    for (k, row) in reader.records().enumerate() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            row.get(i).unwrap_or("").parse::<f64>().map_err(|e| bad(format!("row {}: column {i}: {e}", k + 1)))
        };
        let node = grid.nodes.get(k).ok_or_else(|| bad(format!("more rows than the {} grid nodes", grid.len())))?;
        let (x1, x2) = (num(0)?, num(1)?);
        let scale = 1.0 + node[0].abs() + node[1].abs();
        if (x1 - node[0]).abs() > 1e-9 * scale || (x2 - node[1]).abs() > 1e-9 * scale {
            return Err(bad(format!("row {} at ({x1}, {x2}) does not match the config grid", k + 1)));
        }
        values.push(num(2)?);
        actions.push(match row.get(3).unwrap_or("") {
            "hold" => NodeAction::Hold { c: num(4)? },
            "trade" => NodeAction::Trade { generator: num(5)? as usize },
            "boundary" => NodeAction::Ruin,
            other => return Err(bad(format!("row {}: unknown branch `{other}`", k + 1))),
        });
    }
    if values.len() != grid.len() {
        return Err(bad(format!("{} rows for {} grid nodes", values.len(), grid.len())));
    }
    Ok(ValueField::from_parts(&ctx.problem(cone), &grid, ctx.interp_direction(cone), values, actions, &ctx.cfg.solver)?)
}

/// `simulate`: Monte Carlo evaluation of a policy from the configured
/// initial position.
pub fn simulate_cmd(ctx: &Context, policy: Option<&str>, paths: Option<usize>, out: Option<&str>) -> Result<Value> {
    let cone = ctx.cfg.cone_spec()?;
    let sim = &ctx.cfg.simulation;
    let choice = PolicyChoice::parse(policy.unwrap_or(&sim.policy)).map_err(CliError::Usage)?;
    let market = Market { model: &ctx.cfg.model, cone: &cone, utility: &ctx.cfg.utility };
    let mut cert = None;
    let owned: Box<dyn Policy> = match &choice {
        PolicyChoice::Zero => Box::new(ZeroPolicy),
        PolicyChoice::Merton => {
            let params = merton_parameters(&ctx.cfg.model, &ctx.cfg.utility)?;
            Box::new(MertonPolicy::new(params, &cone, sim.band)?)
        }
        PolicyChoice::Grid => {
            cert = ctx.config_certificate(&cone)?;
            Box::new(GridPolicy::new(&ctx.solve_field(&cone, cert.as_ref())?))
        }
        PolicyChoice::GridFile(path) => Box::new(GridPolicy::new(&load_field(ctx, &cone, path)?)),
    };
    let opts = SimOptions { horizon: sim.horizon, dt: sim.dt, n_paths: paths.unwrap_or(sim.n_paths), seed: ctx.cfg.seed };
    let start = Instant::now();
    let results = simulate_paths(market, owned.as_ref(), &sim.x, &opts)?;
    let tail = cert.as_ref().and_then(|c| c.scale.map(|a| (c.field(), a)));
    let tail_field = tail.as_ref().map(|(f, a)| conehjb::operator::FnField::new(2, true, move |x: &[f64]| a * f.value(x)));
    let value = summarize(&results, ctx.cfg.utility.beta, sim.horizon, tail_field.as_ref().map(|f| f as &dyn ScalarField));
    let name = out.unwrap_or(&ctx.cfg.outputs.results);
    let (path, mut w) = ctx.create(name)?;
    write_results_csv(&results, &mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
    Ok(json!({
        "command": "simulate",
        "policy": owned.name(),
        "results": path,
        "x": sim.x,
        "value": value,
        "elapsed_secs": start.elapsed().as_secs_f64(),
    }))
}

/// `verify`: certificate constants, grid verification and supersolution
/// scale.
pub fn verify_cmd(ctx: &Context, p: Option<Vec<f64>>, rho: Option<f64>, out: Option<&str>) -> Result<Value> {
    let cone = ctx.cfg.cone_spec()?;
    let mut block = ctx.cfg.certificate.clone().unwrap_or(CertificateConfig {
        p: vec![],
        rho: f64::NAN,
        n_radial: 12,
        n_angular: 40,
        r_max: 1.0,
    });
    if let Some(p) = p {
        block.p = p;
    }
    if let Some(r) = rho {
        block.rho = r;
    }
    if block.p.is_empty() || !block.rho.is_finite() {
        return Err(CliError::Usage("verify needs p and rho (config `certificate` block or --p/--rho)".into()));
    }
    if block.p.len() != ctx.cfg.model.dim() {
        return Err(CliError::invalid("certificate.p", format!("expected {} coordinates", ctx.cfg.model.dim())));
    }
    let cert = ctx.certificate(&cone, &block)?;
    let path = ctx.write_json(out.unwrap_or(&ctx.cfg.outputs.certificate), &json!({ "beta": ctx.cfg.utility.beta, "certificate": cert }))?;
    Ok(json!({
        "command": "verify",
        "certificate": path,
        "verified": cert.verified,
        "beta_threshold": cert.beta_threshold,
        "tight_beta_threshold": cert.tight_beta_threshold,
        "scale": cert.scale,
    }))
}

/// `refine`: grid-halving study starting from the configured base mesh.
pub fn refine_cmd(ctx: &Context) -> Result<Value> {
    let cone = ctx.cfg.cone_spec()?;
    let cert = ctx.config_certificate(&cone)?;
    let base: GridSpec = ctx.cfg.refine.base.clone().unwrap_or_else(|| ctx.cfg.grid.clone());
    let mut opts = ctx.cfg.solver.clone();
    if let Some(dt) = ctx.cfg.refine.dt {
        opts.dt = dt;
    }
    let report = refine_study(&ctx.problem(&cone), &base, cert.as_ref(), &opts, ctx.cfg.refine.levels)?;
    let path = ctx.write_json(&ctx.cfg.outputs.refine, &report)?;
    Ok(json!({
        "command": "refine",
        "refine": path,
        "passed": report.passed,
        "ratios": report.ratios,
    }))
}

/// `bench`: wall-clock time of the main stages on the configured problem.
pub fn bench_cmd(ctx: &Context) -> Result<Value> {
    let cone = ctx.cfg.cone_spec()?;
    let mut rows: Vec<(&str, usize, f64)> = Vec::new();
    let t = Instant::now();
    let cert = ctx.config_certificate(&cone)?;
    if let Some(b) = &ctx.cfg.certificate {
        rows.push(("certificate", b.n_radial * b.n_angular, t.elapsed().as_secs_f64()));
    }
    let t = Instant::now();
    let field = ctx.solve_field(&cone, cert.as_ref())?;
    rows.push(("solve", field.values.len(), t.elapsed().as_secs_f64()));
    let sim = &ctx.cfg.simulation;
    let opts = SimOptions { horizon: sim.horizon, dt: sim.dt, n_paths: sim.n_paths, seed: ctx.cfg.seed };
    let market = Market { model: &ctx.cfg.model, cone: &cone, utility: &ctx.cfg.utility };
    let steps = conehjb::levy::step_count(sim.horizon, sim.dt)?.0 * sim.n_paths;
    let grid_policy = GridPolicy::new(&field);
    let policies: [(&str, &dyn Policy); 2] = [("simulate_zero", &ZeroPolicy), ("simulate_grid", &grid_policy)];
    for (name, policy) in policies {
        let t = Instant::now();
        simulate_paths(market, policy, &sim.x, &opts)?;
        rows.push((name, steps, t.elapsed().as_secs_f64()));
    }
    let (path, mut w) = ctx.create(&ctx.cfg.outputs.timings)?;
    let mut body = String::from("task,size,seconds\n");
    for (task, size, secs) in &rows {
        body.push_str(&format!("{task},{size},{secs}\n"));
    }
    w.write_all(body.as_bytes()).and_then(|_| w.flush()).map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
    Ok(json!({
        "command": "bench",
        "timings": path,
        "rows": rows.iter().map(|(t, n, s)| json!({"task": t, "size": n, "seconds": s})).collect::<Vec<_>>(),
    }))
}
