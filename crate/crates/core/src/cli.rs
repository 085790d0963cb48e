//! Command-line experiment driver.
//!
//! Three subcommands cover the toolkit's studies: `converge` runs a
//! forward/adjoint step-size sweep against tight-tolerance references,
//! `gradcheck` compares the adjoint gradient with central finite
//! differences, and `assimilate` runs a synthetic-observation estimation
//! experiment. Every run writes CSV artifacts plus a `manifest.toml`
//! echoing the fully resolved spec, the seed, and a checksum of the
//! tableau, so artifacts can be reproduced byte for byte.
//!
//! Exit codes: 0 on success, 2 on a verification failure (a convergence
//! slope or gradient tolerance breach, or an assimilation run that fails
//! to improve on the background), 1 on any runtime error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adjoint::{adjoint_sweep, AdjointSeed};
use crate::assimilation::{
    diffusion_problem, lorenz96_problem, synthesize_experiment, DiffusionProtocol,
    FourDVarProblem, Lorenz96Protocol,
};
use crate::error::{Error, Result};
use crate::integrator::integrate;
use crate::matfun::KrylovConfig;
use crate::model::{OdeModel, WMatrix};
use crate::models::{lorenz96_initial_profile, Lorenz96};
use crate::optimize::{minimize, Bounds, OptimizerConfig, OptimizerTrace};
use crate::reference::{fit_loglog_slope, reference_adjoint, reference_solution};
use crate::tableau::Tableau;

/// Fully resolved experiment description. Loaded from a TOML file; every
/// field has a default, so a missing file section falls back to the
/// built-in Lorenz-96 study.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    /// "lorenz96", "lorenz96-standard", "diffusion", or "zero".
    pub model: String,
    /// Convergence-study window.
    pub t0: f64,
    pub tf: f64,
    /// Convergence-study step sizes (at least 4).
    pub steps: Vec<f64>,
    pub seed: u64,
    /// Acceptable fitted-slope band for `converge`.
    pub slope_min: f64,
    pub slope_max: f64,
    /// Gradient-check tolerance; when absent, 1e-6 for Lorenz-96 and
    /// 1e-5 for the diffusion surrogate.
    pub gradcheck_tol: Option<f64>,
    pub krylov: KrylovSpec,
    pub optimizer: OptimizerSpec,
    pub protocol: ProtocolSpec,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            model: "lorenz96".into(),
            t0: 0.0,
            tf: 0.3,
            steps: (0..6).map(|k| 0.015 / f64::powi(2.0, k)).collect(),
            seed: 0,
            slope_min: 2.7,
            slope_max: 3.3,
            gradcheck_tol: None,
            krylov: KrylovSpec::default(),
            optimizer: OptimizerSpec::default(),
            protocol: ProtocolSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct KrylovSpec {
    pub m_max: usize,
    pub tol: f64,
    pub reorthogonalize: bool,
}

impl Default for KrylovSpec {
    fn default() -> Self {
        let k = KrylovConfig::default();
        KrylovSpec {
            m_max: k.m_max,
            tol: k.tol,
            reorthogonalize: k.reorthogonalize,
        }
    }
}

impl KrylovSpec {
    fn config(&self) -> KrylovConfig {
        KrylovConfig {
            m_max: self.m_max,
            tol: self.tol,
            reorthogonalize: self.reorthogonalize,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSpec {
    pub memory: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub cost_rel_tol: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
    /// Relative box half-width around θ_b (e.g. 0.2 for ±20%); absent
    /// means unbounded.
    pub bounds_factor: Option<f64>,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            memory: 10,
            max_iters: 100,
            grad_tol: 1e-4,
            cost_rel_tol: 0.0,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 30,
            bounds_factor: None,
        }
    }
}

impl OptimizerSpec {
    fn config(&self, theta_b: &DVector<f64>) -> OptimizerConfig {
        let bounds = self.bounds_factor.map(|f| {
            let lo = theta_b.map(|v| (v * (1.0 - f)).min(v * (1.0 + f)));
            let hi = theta_b.map(|v| (v * (1.0 - f)).max(v * (1.0 + f)));
            Bounds::new(lo, hi)
        });
        OptimizerConfig {
            memory: self.memory,
            max_iters: self.max_iters,
            grad_tol: self.grad_tol,
            cost_rel_tol: self.cost_rel_tol,
            bounds,
            c1: self.c1,
            c2: self.c2,
            max_line_search: self.max_line_search,
        }
    }
}

/// Twin-experiment protocol knobs shared by `gradcheck` and `assimilate`.
/// Optional fields default per model (Lorenz-96 / diffusion).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolSpec {
    pub dt: Option<f64>,
    pub n_steps: usize,
    pub obs_interval: usize,
    pub n_obs: usize,
    pub spinup_steps: usize,
    pub with_noise: bool,
    pub sigma_b_factor: Option<f64>,
    pub sigma_obs_factor: Option<f64>,
    pub sigma_obs_inverse: bool,
    pub alpha: f64,
    pub corr_length: f64,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        ProtocolSpec {
            dt: None,
            n_steps: 1000,
            obs_interval: 100,
            n_obs: 10,
            spinup_steps: 10,
            with_noise: true,
            sigma_b_factor: None,
            sigma_obs_factor: None,
            sigma_obs_inverse: false,
            alpha: 0.1,
            corr_length: 4.0,
        }
    }
}

impl ProtocolSpec {
    fn obs_steps(&self) -> Vec<usize> {
        (1..=self.n_obs).map(|i| i * self.obs_interval).collect()
    }

    fn lorenz(&self, k: usize, seed: u64) -> Lorenz96Protocol {
        let d = Lorenz96Protocol::default();
        Lorenz96Protocol {
            k,
            dt: self.dt.unwrap_or(d.dt),
            n_steps: self.n_steps,
            obs_steps: self.obs_steps(),
            spinup_steps: self.spinup_steps,
            seed,
            with_noise: self.with_noise,
            sigma_b_factor: self.sigma_b_factor.unwrap_or(d.sigma_b_factor),
            sigma_obs_factor: self.sigma_obs_factor.unwrap_or(d.sigma_obs_factor),
            sigma_obs_inverse: self.sigma_obs_inverse,
            alpha: self.alpha,
            corr_length: self.corr_length,
        }
    }

    fn diffusion(&self, seed: u64) -> DiffusionProtocol {
        let d = DiffusionProtocol::default();
        DiffusionProtocol {
            dt: self.dt.unwrap_or(d.dt),
            n_steps: self.n_steps,
            obs_steps: self.obs_steps(),
            seed,
            with_noise: self.with_noise,
            sigma_b_factor: self.sigma_b_factor.unwrap_or(d.sigma_b_factor),
            sigma_obs_factor: self.sigma_obs_factor.unwrap_or(d.sigma_obs_factor),
            background_offset: d.background_offset,
        }
    }
}

#[derive(Parser)]
#[command(name = "exp4dvar", version, about = "Exponential-integrator 4D-Var toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment spec file (TOML); built-in defaults when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory for CSV artifacts and the manifest.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the spec's RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Tableau TOML file; the shipped third-order tableau when omitted.
    #[arg(long)]
    tableau: Option<PathBuf>,
    /// Worker threads for concurrent sweeps (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Forward and adjoint convergence study over a list of step sizes.
    Converge(Common),
    /// Compare the adjoint gradient against central finite differences.
    Gradcheck(Common),
    /// Run the synthetic-observation estimation experiment.
    Assimilate(Common),
}

/// Parses arguments, runs the selected experiment, and returns the
/// process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let (name, common) = match &cli.command {
        Command::Converge(c) => ("converge", c),
        Command::Gradcheck(c) => ("gradcheck", c),
        Command::Assimilate(c) => ("assimilate", c),
    };
    match dispatch(name, common) {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!("{name}: verification failed (see artifacts in {})", common.out.display());
            2
        }
        Err(e) => {
            eprintln!("{name}: error: {e}");
            1
        }
    }
}

fn dispatch(name: &str, common: &Common) -> Result<bool> {
    if let Some(n) = common.threads {
        // A pool may already exist (e.g. under a test harness); that is
        // not an error worth failing the run for.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }

    let mut spec = match &common.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            toml::from_str::<ExperimentSpec>(&text).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                message: e.to_string(),
            })?
        }
        None => ExperimentSpec::default(),
    };
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }

    let (tableau, tableau_bytes) = match &common.tableau {
        Some(path) => (Tableau::from_file(path)?, std::fs::read(path)?),
        None => (
            Tableau::third_order(),
            include_str!("../data/epirkw3.toml").as_bytes().to_vec(),
        ),
    };

    std::fs::create_dir_all(&common.out)?;
    write_manifest(name, &spec, &tableau_bytes, &common.out)?;

    match name {
        "converge" => run_converge(&spec, &tableau, &common.out),
        "gradcheck" => run_gradcheck(&spec, &tableau, &common.out),
        "assimilate" => run_assimilate(&spec, &tableau, &common.out),
        _ => unreachable!(),
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    tableau_sha256: String,
    spec: &'a ExperimentSpec,
}

fn write_manifest(
    command: &str,
    spec: &ExperimentSpec,
    tableau_bytes: &[u8],
    out: &Path,
) -> Result<()> {
    let mut hasher = Sha256::new();
    hasher.update(tableau_bytes);
    let digest = hasher.finalize();
    let manifest = Manifest {
        command,
        seed: spec.seed,
        tableau_sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
        spec,
    };
    let text = toml::to_string_pretty(&manifest).map_err(|e| Error::Spec {
        message: format!("manifest serialization failed: {e}"),
    })?;
    std::fs::write(out.join("manifest.toml"), text)?;
    Ok(())
}

/// Scientific notation with 17 significant digits.
fn sci(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_csv(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// A vanishing right-hand side; errors of any integrator are exactly zero.
struct ZeroModel {
    n: usize,
}

impl OdeModel for ZeroModel {
    fn dim(&self) -> usize {
        self.n
    }
    fn rhs(&self, _y: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.n)
    }
    fn jac_vec(&self, _y: &DVector<f64>, _v: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.n)
    }
    fn jac_t_vec(&self, _y: &DVector<f64>, _v: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.n)
    }
}

fn converge_model(spec: &ExperimentSpec) -> Result<(Box<dyn OdeModel + Send + Sync>, DVector<f64>)> {
    match spec.model.as_str() {
        "lorenz96" => Ok((
            Box::new(Lorenz96::grouped_form(40)),
            lorenz96_initial_profile(40),
        )),
        "lorenz96-standard" => Ok((
            Box::new(Lorenz96::standard_form(40)),
            lorenz96_initial_profile(40),
        )),
        "zero" => Ok((Box::new(ZeroModel { n: 4 }), DVector::from_element(4, 1.0))),
        other => Err(Error::Spec {
            message: format!("model '{other}' has no convergence study"),
        }),
    }
}

fn run_converge(spec: &ExperimentSpec, tableau: &Tableau, out: &Path) -> Result<bool> {
    if spec.steps.len() < 4 {
        return Err(Error::Spec {
            message: format!("converge needs at least 4 step sizes, got {}", spec.steps.len()),
        });
    }
    let span = spec.tf - spec.t0;
    if !(span > 0.0) {
        return Err(Error::Spec {
            message: format!("window [{}, {}] is empty", spec.t0, spec.tf),
        });
    }
    let (model, y0) = converge_model(spec)?;
    let krylov = spec.krylov.config();
    let w = WMatrix::ExactJacobian;

    let y_ref = reference_solution(model.as_ref(), &y0, spec.t0, spec.tf, 1e-12);
    let lam_seed = DVector::from_element(model.dim(), 1.0);
    let lam_ref = reference_adjoint(model.as_ref(), &y_ref, &lam_seed, spec.t0, spec.tf, 1e-12);

    let errors: Vec<(f64, f64, f64)> = spec
        .steps
        .par_iter()
        .map(|&h| -> Result<(f64, f64, f64)> {
            let n = (span / h).round().max(1.0) as usize;
            let tape = integrate(model.as_ref(), tableau, &w, &y0, spec.t0, spec.tf, n, &krylov)?;
            let fe = (&tape.y_final - &y_ref).norm();
            let sweep = adjoint_sweep(
                model.as_ref(),
                &w,
                &tape,
                tableau,
                &AdjointSeed::terminal_only(lam_seed.clone()),
                &krylov,
            )?;
            let ae = (&sweep.lambda0 - &lam_ref).norm();
            Ok((h, fe, ae))
        })
        .collect::<Result<Vec<_>>>()?;

    let hs: Vec<f64> = errors.iter().map(|e| e.0).collect();
    let fes: Vec<f64> = errors.iter().map(|e| e.1).collect();
    let aes: Vec<f64> = errors.iter().map(|e| e.2).collect();

    // A column of exact zeros (e.g. the zero model) has no defined slope
    // and counts as a pass; otherwise the fitted slope must land in the
    // configured band.
    let column = |errs: &[f64]| -> (String, bool) {
        if errs.iter().all(|&e| e == 0.0) {
            ("undefined".into(), true)
        } else {
            let s = fit_loglog_slope(&hs, errs);
            (sci(s), s.is_finite() && s >= spec.slope_min && s <= spec.slope_max)
        }
    };
    let (slope_f, ok_f) = column(&fes);
    let (slope_a, ok_a) = column(&aes);

    let mut rows: Vec<Vec<String>> = errors
        .iter()
        .map(|&(h, fe, ae)| vec![sci(h), sci(fe), sci(ae)])
        .collect();
    rows.push(vec!["slope".into(), slope_f, slope_a]);
    write_csv(&out.join("converge.csv"), "h,forward_error,adjoint_error", &rows)?;
    Ok(ok_f && ok_a)
}

/// Builds the estimation problem for the spec's model along with the
/// truth vector and the default gradient-check tolerance.
fn estimation_problem(
    spec: &ExperimentSpec,
    tableau: &Tableau,
) -> Result<(FourDVarProblem, DVector<f64>, f64)> {
    let krylov = spec.krylov.config();
    match spec.model.as_str() {
        "lorenz96" | "lorenz96-standard" => {
            let protocol = spec.protocol.lorenz(40, spec.seed);
            let model: Box<dyn OdeModel + Send + Sync> = if spec.model == "lorenz96" {
                Box::new(Lorenz96::grouped_form(40))
            } else {
                Box::new(Lorenz96::standard_form(40))
            };
            let exp = synthesize_experiment(model.as_ref(), tableau, &protocol, &krylov)?;
            let theta_true = exp.theta_true.clone();
            let mut p = lorenz96_problem(exp, &protocol, krylov);
            p.model = model;
            p.tableau = tableau.clone();
            Ok((p, theta_true, 1e-6))
        }
        "diffusion" => {
            let protocol = spec.protocol.diffusion(spec.seed);
            let (mut p, theta_true) = diffusion_problem(&protocol, krylov)?;
            p.tableau = tableau.clone();
            Ok((p, theta_true, 1e-5))
        }
        other => Err(Error::Spec {
            message: format!("model '{other}' has no estimation problem"),
        }),
    }
}

fn run_gradcheck(spec: &ExperimentSpec, tableau: &Tableau, out: &Path) -> Result<bool> {
    let (problem, _, default_tol) = estimation_problem(spec, tableau)?;
    let tol = spec.gradcheck_tol.unwrap_or(default_tol);
    let theta = problem.theta_b.clone();
    let grad = problem.grad(&theta)?;

    let fd: Vec<f64> = (0..theta.len())
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let h = 1e-6 * (1.0 + theta[i].abs());
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[i] += h;
            tm[i] -= h;
            Ok((problem.cost(&tp)? - problem.cost(&tm)?) / (2.0 * h))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(theta.len());
    let mut max_rel: f64 = 0.0;
    for i in 0..theta.len() {
        let rel = (grad[i] - fd[i]).abs() / (1.0 + fd[i].abs());
        max_rel = max_rel.max(rel);
        rows.push(vec![i.to_string(), sci(grad[i]), sci(fd[i]), sci(rel)]);
    }
    write_csv(
        &out.join("gradcheck.csv"),
        "component,adjoint_grad,fd_grad,rel_err",
        &rows,
    )?;
    Ok(max_rel <= tol)
}

fn write_trace(
    trace: &OptimizerTrace,
    theta_true: &DVector<f64>,
    out: &Path,
) -> Result<()> {
    let rows: Vec<Vec<String>> = trace
        .iterations
        .iter()
        .map(|r| {
            vec![
                r.iteration.to_string(),
                sci(r.cost),
                sci(r.grad_inf),
                r.n_cost_evals.to_string(),
                r.n_grad_evals.to_string(),
            ]
        })
        .collect();
    write_csv(
        &out.join("trace.csv"),
        "iteration,cost,grad_inf,n_cost_evals,n_grad_evals",
        &rows,
    )?;

    let rows: Vec<Vec<String>> = trace
        .iterations
        .iter()
        .map(|r| vec![r.iteration.to_string(), sci((&r.theta - theta_true).norm())])
        .collect();
    write_csv(&out.join("error.csv"), "iteration,error", &rows)?;
    Ok(())
}

fn run_assimilate(spec: &ExperimentSpec, tableau: &Tableau, out: &Path) -> Result<bool> {
    let (problem, theta_true, _) = estimation_problem(spec, tableau)?;
    let theta_b = problem.theta_b.clone();
    let cfg = spec.optimizer.config(&theta_b);

    let mut f = |x: &DVector<f64>| problem.cost(x);
    let mut g = |x: &DVector<f64>| problem.grad(x);
    let (theta_map, trace) = minimize(&mut f, &mut g, &theta_b, &cfg)?;

    write_trace(&trace, &theta_true, out)?;

    let rows: Vec<Vec<String>> = (0..theta_map.len())
        .map(|i| {
            vec![
                i.to_string(),
                sci(theta_map[i]),
                sci(theta_b[i]),
                sci(theta_true[i]),
            ]
        })
        .collect();
    write_csv(
        &out.join("analysis.csv"),
        "component,theta_map,theta_b,theta_true",
        &rows,
    )?;

    // Analysis trajectory in long format (step, time, component, value).
    let tape = problem.forward(&theta_map)?;
    let dt = (problem.tf - problem.t0) / problem.n_steps as f64;
    let mut rows = Vec::with_capacity((problem.n_steps + 1) * problem.model.dim());
    for step in 0..=problem.n_steps {
        let y = tape.state_at(step);
        let t = problem.t0 + step as f64 * dt;
        for i in 0..y.len() {
            rows.push(vec![step.to_string(), sci(t), i.to_string(), sci(y[i])]);
        }
    }
    write_csv(&out.join("trajectory.csv"), "step,time,component,value", &rows)?;

    let improved = (&theta_map - &theta_true).norm() < (&theta_b - &theta_true).norm();
    Ok(improved)
}
