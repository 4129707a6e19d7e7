//! Dispatch of a validated experiment to the solvers, and the files it
//! leaves behind.
//!
//! Layout under `<output_dir>/<name>/`: `config.json`, `manifest.json`,
//! `summary.json`, plus `exact/`, `seed_<s>/` or `robust/` subdirectories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hinf_core::adp::{self, ModelFreeRun};
use hinf_core::exact_pi::{self, PiTrace, Termination};
use hinf_core::game::{self, Gains, SystemModel, ValueMatrix};
use hinf_core::robust::{self, IssReport};
use hinf_core::simulate::{ClosedLoopStats, DataMoments};
use hinf_core::{problems, Error};
use log::{info, warn};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{rows, ConfigError, Experiment, Mode, Prepared, SCHEMA_VERSION};
use crate::output::{self, OutputError};
use crate::parallel;
use crate::seeds::{self, sub_seed};

/// Final mean square over initial mean square required of learned gains.
pub const DECAY_RATIO: f64 = 0.05;

/// Magnitudes up to this one must keep every evaluated pair stabilizing.
pub const STABILIZING_MAGNITUDE: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{context}: {source}")]
    Core { context: String, source: Error },
    #[error(transparent)]
    Output(#[from] OutputError),
    #[error("{0}")]
    Missing(&'static str),
}

impl RunError {
    /// 2 for configuration problems, 3 for everything found while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            _ => 3,
        }
    }
}

fn core(context: impl Into<String>) -> impl FnOnce(Error) -> RunError {
    let context = context.into();
    move |source| RunError::Core { context, source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub name: String,
    pub mode: Mode,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub versions: BTreeMap<String, String>,
    /// Relative to the run directory.
    pub outputs: Vec<String>,
    pub checks: Vec<Check>,
}

impl RunManifest {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn system(exp: &Experiment) -> Result<&SystemModel, RunError> {
    exp.system.as_ref().ok_or(RunError::Missing("this phase needs the system matrices"))
}

/// Monte Carlo data under the behavior policy `(initial_lu, 0)`, on the
/// `collection` sub-stream of `seed`.
pub fn collect_phase(exp: &Experiment, seed: u64) -> Result<DataMoments, RunError> {
    let sys = system(exp)?;
    let sim = exp.sim.as_ref().ok_or(RunError::Missing("collection needs sim settings"))?;
    let sim = sim.with_seed(sub_seed(seed, seeds::COLLECTION));
    parallel::collect_behavior_data(sys, &exp.pi.initial_lu, &sim)
        .map_err(core(format!("data collection, seed {seed}")))
}

/// Model-free iteration. Reads only the moments, the cost and the iteration
/// settings.
pub fn learn_phase(exp: &Experiment, data: &DataMoments) -> Result<ModelFreeRun, RunError> {
    adp::run_model_free_pi(data, &exp.cost, &exp.pi).map_err(core("model-free iteration"))
}

pub fn exact_phase(exp: &Experiment) -> Result<PiTrace, RunError> {
    exact_pi::run_model_based_pi(system(exp)?, &exp.cost, &exp.pi)
        .map_err(core("model-based iteration"))
}

/// Mean-square trajectory under `gains` without exploration, on the
/// `closed_loop` sub-stream of `seed`.
pub fn closed_loop_phase(
    exp: &Experiment,
    gains: &Gains,
    seed: u64,
) -> Result<ClosedLoopStats, RunError> {
    let sys = system(exp)?;
    let sim = exp.sim.as_ref().ok_or(RunError::Missing("closed loop needs sim settings"))?;
    let sim = sim.with_seed(sub_seed(seed, seeds::CLOSED_LOOP));
    parallel::simulate_closed_loop(sys, gains, &sim)
        .map_err(core(format!("closed-loop simulation, seed {seed}")))
}

/// The learned controller alone: `u = Lu x` with the disturbance channel
/// idle (`v = 0`).
pub fn controller(gains: &Gains) -> Gains {
    Gains::new(gains.lu.clone(), DMatrix::zeros(gains.lv.nrows(), gains.lv.ncols()))
}

/// Median, with the mean of the middle pair for even counts. NaN sorts last.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}

fn termination(t: Termination) -> &'static str {
    match t {
        Termination::Converged => "converged",
        Termination::IterationCap => "iteration_cap",
        Termination::Destabilized => "destabilized",
    }
}

fn trace_summary(trace: &PiTrace) -> Value {
    json!({
        "final_p": rows(&trace.final_p),
        "lu": rows(&trace.final_gains.lu),
        "lv": rows(&trace.final_gains.lv),
        "outer_iterations": trace.outer_iterations(),
        "inner_iterations": trace.records.len(),
        "termination": termination(trace.termination),
    })
}

struct Outputs {
    root: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn path(&mut self, rel: &str) -> PathBuf {
        self.files.push(rel.to_string());
        self.root.join(rel)
    }
}

/// Runs the experiment and writes its outputs. Identical inputs give
/// byte-identical files.
pub fn run_experiment(prep: &Prepared) -> Result<RunManifest, RunError> {
    let exp = &prep.experiment;
    let mut out = Outputs {
        root: exp.output_dir.join(&exp.name),
        files: Vec::new(),
    };
    let config_path = out.path("config.json");
    std::fs::create_dir_all(&out.root).map_err(|source| OutputError::Io {
        path: out.root.clone(),
        source,
    })?;
    std::fs::write(&config_path, prep.config.canonical().to_pretty_json()).map_err(|source| {
        OutputError::Io {
            path: config_path.clone(),
            source,
        }
    })?;

    info!("running {} ({})", exp.name, exp.mode.as_str());
    let (summary, checks) = match exp.mode {
        Mode::Exact => run_exact(exp, &mut out)?,
        Mode::ModelFree => run_model_free(exp, &mut out)?,
        Mode::Robust => run_robust(exp, &mut out)?,
        Mode::ReproduceExample1 => {
            run_reproduce(exp, &mut out, &problems::example_1_reference_p(), 1e-3, 0.05)?
        }
        Mode::ReproduceExample2 => {
            run_reproduce(exp, &mut out, &problems::example_2_reference_p(), 1e-2, 1.0)?
        }
    };
    let summary_path = out.path("summary.json");
    output::write_json(&summary_path, &summary)?;

    let mut versions = BTreeMap::new();
    versions.insert("hinf".to_string(), env!("CARGO_PKG_VERSION").to_string());
    versions.insert("hinf-core".to_string(), hinf_core::VERSION.to_string());
    let manifest_rel = "manifest.json";
    let manifest_path = out.root.join(manifest_rel);
    let mut files = out.files;
    files.push(manifest_rel.to_string());
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        name: exp.name.clone(),
        mode: exp.mode,
        config_hash: prep.hash.clone(),
        seeds: exp.seeds.clone(),
        versions,
        outputs: files,
        checks,
    };
    output::write_json(&manifest_path, &manifest)?;
    Ok(manifest)
}

fn run_exact(exp: &Experiment, out: &mut Outputs) -> Result<(Value, Vec<Check>), RunError> {
    let trace = exact_phase(exp)?;
    output::write_trace(&out.path("exact/trace.csv"), &trace)?;
    let residual = game::gare_residual(&ValueMatrix::new(trace.final_p.clone()).map_err(core("final P"))?, system(exp)?, &exp.cost)
        .map_err(core("Riccati residual"))?
        .norm();
    let mut summary = trace_summary(&trace);
    summary["gare_residual"] = json!(residual);
    let checks = vec![Check::new(
        "exact_converged",
        trace.termination == Termination::Converged,
        format!("{} outer iterations", trace.outer_iterations()),
    )];
    Ok((json!({ "mode": "exact", "exact": summary }), checks))
}

fn exact_reference(exp: &Experiment) -> Option<DMatrix<f64>> {
    match exact_phase(exp) {
        Ok(t) => Some(t.final_p),
        Err(e) => {
            warn!("no exact reference: {e}");
            None
        }
    }
}

fn model_free_seed(
    exp: &Experiment,
    out: &mut Outputs,
    seed: u64,
    p_exact: Option<&DMatrix<f64>>,
) -> Result<(ModelFreeRun, Value), RunError> {
    let data = collect_phase(exp, seed)?;
    output::write_moments(&out.path(&format!("seed_{seed}/moments.csv")), &data)?;
    let run = learn_phase(exp, &data)?;
    output::write_trace(&out.path(&format!("seed_{seed}/trace.csv")), &run.trace)?;
    let mut s = trace_summary(&run.trace);
    s["seed"] = json!(seed);
    s["collection_seed"] = json!(sub_seed(seed, seeds::COLLECTION));
    s["condition"] = json!(run.estimate.condition);
    s["ls_residual"] = json!(run.estimate.residual);
    s["d_tilde"] = json!(rows(&run.estimate.d_tilde));
    if let Some(p) = p_exact {
        s["error_vs_exact"] = json!((&run.trace.final_p - p).norm());
    }
    Ok((run, s))
}

fn run_model_free(exp: &Experiment, out: &mut Outputs) -> Result<(Value, Vec<Check>), RunError> {
    let p_exact = exact_reference(exp);
    let sys = system(exp)?;
    let mut per_seed = Vec::new();
    let mut stabilizing = true;
    for &seed in &exp.seeds {
        let (run, mut s) = model_free_seed(exp, out, seed, p_exact.as_ref())?;
        let check = game::is_stabilizer(&run.trace.final_gains, sys).map_err(core("stability"))?;
        s["learned_abscissa"] = json!(check.abscissa);
        stabilizing &= check.stable;
        output::write_json(&out.path(&format!("seed_{seed}/summary.json")), &s)?;
        per_seed.push(s);
    }
    let checks = vec![Check::new(
        "learned_gains_stabilizing",
        stabilizing,
        "mean-square stability of the learned pair on every seed".into(),
    )];
    Ok((json!({ "mode": "model_free", "seeds": per_seed }), checks))
}

fn run_reproduce(
    exp: &Experiment,
    out: &mut Outputs,
    published: &DMatrix<f64>,
    exact_tol: f64,
    learned_tol: f64,
) -> Result<(Value, Vec<Check>), RunError> {
    let exact = exact_phase(exp)?;
    output::write_trace(&out.path("exact/trace.csv"), &exact)?;
    let exact_gap = if published.shape() == exact.final_p.shape() {
        (&exact.final_p - published).amax()
    } else {
        f64::INFINITY
    };
    let x0_norm2 = exp.sim.as_ref().map_or(f64::NAN, |s| s.x0.norm_squared());

    let mut per_seed = Vec::new();
    let mut errors = Vec::new();
    let mut ratios = Vec::new();
    for &seed in &exp.seeds {
        match model_free_seed(exp, out, seed, Some(&exact.final_p)) {
            Ok((run, mut s)) => {
                errors.push((&run.trace.final_p - &exact.final_p).norm());
                let stats = closed_loop_phase(exp, &controller(&run.trace.final_gains), seed)?;
                output::write_closed_loop(&out.path(&format!("seed_{seed}/closed_loop.csv")), &stats)?;
                let ratio = stats.final_mean_square() / x0_norm2;
                s["final_mean_square"] = json!(stats.final_mean_square());
                s["decay_ratio"] = json!(ratio);
                ratios.push(ratio);
                output::write_json(&out.path(&format!("seed_{seed}/summary.json")), &s)?;
                per_seed.push(s);
            }
            Err(RunError::Core { context, source }) => {
                warn!("seed {seed}: {context}: {source}");
                errors.push(f64::INFINITY);
                ratios.push(f64::INFINITY);
                per_seed.push(json!({
                    "seed": seed,
                    "status": "failed",
                    "error": format!("{context}: {source}"),
                }));
            }
            Err(e) => return Err(e),
        }
    }
    let med = median(&errors);
    let worst_ratio = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let checks = vec![
        Check::new(
            "exact_matches_published",
            exact_gap <= exact_tol,
            format!("max entry gap {exact_gap:.3e} (tolerance {exact_tol:e})"),
        ),
        Check::new(
            "model_free_median_error",
            med <= learned_tol,
            format!("median ||P_hat - P||_F {med:.4e} (tolerance {learned_tol})"),
        ),
        Check::new(
            "closed_loop_decay",
            worst_ratio <= DECAY_RATIO,
            format!("worst E|X(T)|^2 / |x0|^2 = {worst_ratio:.4e} (tolerance {DECAY_RATIO})"),
        ),
    ];
    let summary = json!({
        "mode": exp.mode.as_str(),
        "exact": trace_summary(&exact),
        "exact_gap_to_published": exact_gap,
        "model_free_errors": errors,
        "model_free_median_error": med,
        "decay_ratios": ratios,
        "seeds": per_seed,
    });
    Ok((summary, checks))
}

fn run_robust(exp: &Experiment, out: &mut Outputs) -> Result<(Value, Vec<Check>), RunError> {
    let sys = system(exp)?;
    let dist = exp
        .disturbance
        .as_ref()
        .ok_or(RunError::Missing("robust mode needs disturbance settings"))?;
    let exact = exact_phase(exp)?;
    output::write_trace(&out.path("exact/trace.csv"), &exact)?;

    let jobs: Vec<(usize, f64, u64)> = dist
        .magnitudes
        .iter()
        .enumerate()
        .flat_map(|(i, &m)| exp.seeds.iter().map(move |&s| (i, m, s)))
        .collect();
    let results: Vec<Result<robust::RobustRun, RunError>> = jobs
        .par_iter()
        .map(|&(_, m, seed)| {
            let spec = dist.spec(m, sub_seed(seed, seeds::DISTURBANCE));
            robust::run_robust_pi_with_reference(sys, &exp.cost, &exp.pi, &spec, &exact.final_p)
                .map_err(core(format!("disturbed iteration, magnitude {m:e}, seed {seed}")))
        })
        .collect();
    let mut reports: Vec<IssReport> = Vec::new();
    for (&(i, _, seed), res) in jobs.iter().zip(results) {
        let run = res?;
        output::write_trace(&out.path(&format!("robust/m{i}_seed_{seed}.csv")), &run.trace)?;
        reports.push(run.report);
    }
    output::write_iss(&out.path("robust/iss.csv"), &reports)?;
    output::write_iss_outer(&out.path("robust/iss_outer.csv"), &reports)?;

    let mut checks = Vec::new();
    let small: Vec<&IssReport> = reports
        .iter()
        .filter(|r| r.magnitude <= STABILIZING_MAGNITUDE)
        .collect();
    if !small.is_empty() {
        let bad = small.iter().filter(|r| r.violations > 0 || r.diverged()).count();
        checks.push(Check::new(
            "stabilizing_at_small_magnitudes",
            bad == 0,
            format!("{bad} of {} runs lost stabilization", small.len()),
        ));
    }
    let envelope = match robust::iss_envelope(&reports) {
        Ok(env) => {
            output::write_envelope(&out.path("robust/envelope.csv"), &env)?;
            checks.push(Check::new("envelope_monotone", env.monotone, String::new()));
            checks.push(Check::new("envelope_vanishing", env.vanishing, String::new()));
            json!({
                "rows": env.rows.iter().map(|r| json!({
                    "magnitude": r.magnitude,
                    "max_final_error": r.max_final_error,
                    "runs": r.runs,
                    "diverged": r.diverged,
                })).collect::<Vec<_>>(),
                "monotone": env.monotone,
                "vanishing": env.vanishing,
                "warnings": env.warnings,
            })
        }
        Err(e) => {
            warn!("no envelope: {e}");
            Value::Null
        }
    };
    let runs: Vec<Value> = reports
        .iter()
        .map(|r| {
            json!({
                "magnitude": r.magnitude,
                "seed": r.seed,
                "final_error": r.final_error,
                "violations": r.violations,
                "termination": termination(r.termination),
            })
        })
        .collect();
    let summary = json!({
        "mode": "robust",
        "p_star": rows(&exact.final_p),
        "runs": runs,
        "envelope": envelope,
    });
    Ok((summary, checks))
}

/// Run directory of an experiment.
pub fn run_dir(exp: &Experiment) -> PathBuf {
    exp.output_dir.join(&exp.name)
}

/// Reads a manifest written by [`run_experiment`].
pub fn read_manifest(dir: &Path) -> Result<RunManifest, OutputError> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|source| OutputError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| OutputError::Format {
        path,
        message: e.to_string(),
    })
}
