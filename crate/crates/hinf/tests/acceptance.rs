//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any
//! criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use hinf::config::{builtin_examples, validate, Experiment};
use hinf::runner::{self, median};
use hinf_core::adp;
use hinf_core::exact_pi::{self, PiConfig, PiTrace};
use hinf_core::game::{CostSpec, SystemModel};
use hinf_core::matops::{self, LyapunovOperands};
use hinf_core::problems::{self, Problem};
use hinf_core::robust::{self, DisturbanceMode, DisturbanceSpec};
use hinf_core::simulate::{expected_moments, MomentOracle};
use nalgebra::{dvector, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn report(name: &'static str, passed: bool, detail: String) -> Outcome {
    println!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    Outcome {
        name,
        passed,
        detail,
    }
}

fn max_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    (a - b).amax()
}

fn exact(p: &Problem) -> PiTrace {
    exact_pi::run_model_based_pi(&p.system, &p.cost, &PiConfig::new(p.initial_lu.clone()))
        .expect("exact iteration")
}

fn exact_example_1() -> Outcome {
    let ex = problems::example_1();
    let t = Instant::now();
    let trace = exact(&ex);
    let elapsed = t.elapsed();
    let gap = max_gap(&trace.final_p, &problems::example_1_reference_p());
    report(
        "exact_example_1",
        gap <= 1e-3 && elapsed < Duration::from_secs(1),
        format!("max entry gap {gap:.3e} (<= 1e-3), {elapsed:.2?} (< 1 s)"),
    )
}

fn exact_example_2() -> Outcome {
    let ex = problems::example_2();
    let t = Instant::now();
    let trace = exact(&ex);
    let elapsed = t.elapsed();
    let gap = max_gap(&trace.final_p, &problems::example_2_reference_p());
    let outer = trace.outer_iterations();
    report(
        "exact_example_2",
        gap <= 1e-2 && outer <= 15 && elapsed < Duration::from_secs(5),
        format!(
            "max entry gap {gap:.3e} (<= 1e-2), {outer} outer iterations (<= 15), {elapsed:.2?} (< 5 s)"
        ),
    )
}

struct LearnedSeed {
    error: f64,
    elapsed: Duration,
    gains: Option<hinf_core::game::Gains>,
    failure: Option<String>,
}

fn experiment(index: usize) -> Experiment {
    validate(&builtin_examples()[index]).expect("built-in config")
}

fn learn_seeds(exp: &Experiment, p_exact: &DMatrix<f64>) -> Vec<LearnedSeed> {
    (0..5u64)
        .map(|seed| {
            let t = Instant::now();
            let res = runner::collect_phase(exp, seed)
                .and_then(|data| runner::learn_phase(&exp.without_system(), &data));
            let elapsed = t.elapsed();
            match res {
                Ok(run) => LearnedSeed {
                    error: (&run.trace.final_p - p_exact).norm(),
                    elapsed,
                    gains: Some(run.trace.final_gains),
                    failure: None,
                },
                Err(e) => LearnedSeed {
                    error: f64::INFINITY,
                    elapsed,
                    gains: None,
                    failure: Some(e.to_string()),
                },
            }
        })
        .collect()
}

fn model_free(
    name: &'static str,
    seeds: &[LearnedSeed],
    tol: f64,
    budget: Duration,
) -> Outcome {
    let errors: Vec<f64> = seeds.iter().map(|s| s.error).collect();
    let med = median(&errors);
    let listed: Vec<String> = errors.iter().map(|e| format!("{e:.3e}")).collect();
    let slowest = seeds.iter().map(|s| s.elapsed).max().unwrap_or_default();
    let failed = seeds.iter().filter(|s| s.failure.is_some()).count();
    for (i, s) in seeds.iter().enumerate() {
        if let Some(f) = &s.failure {
            println!("    seed {i}: {f}");
        }
    }
    report(
        name,
        med <= tol && slowest < budget,
        format!(
            "median ||P_hat - P||_F {med:.4e} (<= {tol}), errors [{}], {failed} of 5 seeds failed, slowest seed {slowest:.2?} (< {budget:?})",
            listed.join(", ")
        ),
    )
}

fn oracle_trace(p: &Problem, horizon: f64, intervals: usize) -> Result<PiTrace, String> {
    let n = p.system.n();
    let excitation = |t: f64| {
        (
            dvector![0.3 * (7.0 * t).sin() + 0.2 * (2.3 * t).cos()],
            dvector![0.3 * (5.0 * t).cos() + 0.2 * (1.7 * t).sin()],
        )
    };
    let data = expected_moments(
        &p.system,
        &p.initial_lu,
        &MomentOracle {
            horizon,
            intervals,
            steps: 400,
            mean0: p.x0.clone(),
            second0: &p.x0 * p.x0.transpose() + DMatrix::identity(n, n) * 0.5,
            excitation: &excitation,
        },
    )
    .map_err(|e| e.to_string())?;
    adp::run_model_free_pi(&data, &p.cost, &PiConfig::new(p.initial_lu.clone()))
        .map(|r| r.trace)
        .map_err(|e| e.to_string())
}

/// Largest entry gap over the common prefix of two traces, and whether the
/// prefix records carry the same iteration indices.
fn prefix_gap(a: &PiTrace, b: &PiTrace) -> (f64, bool, usize) {
    let k = a.records.len().min(b.records.len());
    let mut gap: f64 = 0.0;
    let mut aligned = true;
    for (x, y) in a.records.iter().zip(&b.records) {
        aligned &= x.outer == y.outer && x.inner == y.inner;
        gap = gap
            .max(max_gap(&x.p, &y.p))
            .max(max_gap(&x.lu, &y.lu))
            .max(max_gap(&x.lv, &y.lv));
    }
    (gap, aligned, k)
}

fn oracle_equivalence() -> Outcome {
    let mut passed = true;
    let mut details = Vec::new();
    for (p, horizon, intervals) in [
        (problems::example_1(), 4.0, 24),
        (problems::example_2(), 10.0, 40),
    ] {
        let reference = exact(&p);
        match oracle_trace(&p, horizon, intervals) {
            Ok(trace) => {
                let (gap, aligned, k) = prefix_gap(&trace, &reference);
                let final_gap = max_gap(&trace.final_p, &reference.final_p);
                passed &= gap <= 1e-8 && aligned;
                details.push(format!(
                    "{}: {k} common iterates, max gap {gap:.2e}, records {}/{}, final P gap {final_gap:.2e}",
                    p.name,
                    trace.records.len(),
                    reference.records.len()
                ));
            }
            Err(e) => {
                passed = false;
                details.push(format!("{}: {e}", p.name));
            }
        }
    }
    report("oracle_equivalence", passed, details.join("; "))
}

fn loewner_slack(lower: &DMatrix<f64>, upper: &DMatrix<f64>) -> f64 {
    matops::min_sym_eigenvalue(&(upper - lower))
}

fn monotonicity() -> Outcome {
    let mut worst = f64::INFINITY;
    let mut steps = 0;
    for p in [problems::example_1(), problems::example_2()] {
        let trace = exact(&p);
        for k in 0..trace.outer_iterations() {
            let inner: Vec<_> = trace.inner_loop(k).collect();
            for w in inner.windows(2) {
                worst = worst.min(loewner_slack(&w[1].p, &w[0].p));
                steps += 1;
            }
        }
        for w in trace.outer_records.windows(2) {
            worst = worst.min(loewner_slack(&w[0].p, &w[1].p));
            steps += 1;
        }
    }
    report(
        "monotonicity",
        worst >= -1e-8,
        format!("{steps} steps checked, smallest eigenvalue of the ordered difference {worst:.3e} (>= -1e-8)"),
    )
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
}

fn lyapunov_kernel() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_residual: f64 = 0.0;
    let mut worst_agreement: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=5);
        let g = random_matrix(&mut rng, n, n, 2.0);
        let z = random_matrix(&mut rng, n, n, 0.8);
        let w = random_matrix(&mut rng, n, n, 3.0);
        let w = (&w + w.transpose()) * 0.5;
        let lmax = (&g + g.transpose()).symmetric_eigenvalues().max();
        let znorm = z.clone().svd(false, false).singular_values.max();
        let x = g - DMatrix::identity(n, n) * (0.5 * (lmax + znorm * znorm) + 0.5);
        let ops = LyapunovOperands::new(x, z, &w).expect("operands");
        match (
            matops::solve_stochastic_lyapunov(&ops),
            matops::solve_stochastic_lyapunov_full(&ops),
        ) {
            (Ok(y), Ok(full)) => {
                worst_residual = worst_residual.max(ops.residual(&y) / (1.0 + w.norm()));
                worst_agreement = worst_agreement.max((&y - &full).amax() / (1.0 + full.amax()));
            }
            _ => failures += 1,
        }
    }
    report(
        "lyapunov_kernel",
        failures == 0 && worst_residual <= 1e-9 && worst_agreement <= 1e-10,
        format!(
            "100 instances, {failures} solver failures, worst relative residual {worst_residual:.2e} (<= 1e-9), worst agreement {worst_agreement:.2e} (<= 1e-10)"
        ),
    )
}

fn robust_run(
    sys: &SystemModel,
    cost: &CostSpec,
    lu: &DMatrix<f64>,
    spec: &DisturbanceSpec,
    p_star: &DMatrix<f64>,
) -> robust::RobustRun {
    robust::run_robust_pi_with_reference(sys, cost, &PiConfig::new(lu.clone()), spec, p_star)
        .expect("disturbed iteration")
}

fn robustness() -> Outcome {
    let mut details = Vec::new();

    // (a) no disturbance
    let mut zero_ok = true;
    for p in [problems::example_1(), problems::example_2()] {
        let reference = exact(&p);
        let run = robust_run(&p.system, &p.cost, &p.initial_lu, &DisturbanceSpec::zero(), &reference.final_p);
        let (gap, aligned, k) = prefix_gap(&run.trace, &reference);
        zero_ok &= gap <= 1e-12 && aligned;
        details.push(format!(
            "(a) {}: {k} common iterates, max gap {gap:.1e}",
            p.name
        ));
    }

    // (b) decaying disturbance
    let ex = problems::example_1();
    let reference = exact(&ex);
    let mut decay_worst: f64 = 0.0;
    for seed in 0..10 {
        let spec = DisturbanceSpec::new(DisturbanceMode::Decaying, 1e-2, seed);
        let run = robust_run(&ex.system, &ex.cost, &ex.initial_lu, &spec, &reference.final_p);
        decay_worst = decay_worst.max(run.report.final_error);
    }
    let decay_ok = decay_worst <= EPS;
    details.push(format!("(b) worst final error {decay_worst:.2e} (<= {EPS:e})"));

    // (c) envelope
    let mut reports = Vec::new();
    for magnitude in [1e-4, 1e-3, 1e-2] {
        for seed in 0..10 {
            let spec = DisturbanceSpec::new(DisturbanceMode::ConstantRandom, magnitude, seed);
            reports.push(robust_run(&ex.system, &ex.cost, &ex.initial_lu, &spec, &reference.final_p).report);
        }
    }
    let env = robust::iss_envelope(&reports).expect("envelope");
    let unstable = reports
        .iter()
        .filter(|r| r.magnitude <= 1e-3 && (r.violations > 0 || r.diverged()))
        .count();
    let envelope_ok = env.monotone && unstable == 0;
    let rows: Vec<String> = env
        .rows
        .iter()
        .map(|r| format!("{:.0e}: {:.2e}", r.magnitude, r.max_final_error))
        .collect();
    details.push(format!(
        "(c) envelope [{}], monotone {}, {unstable} runs at <= 1e-3 lost stabilization",
        rows.join(", "),
        env.monotone
    ));

    report(
        "robustness",
        zero_ok && decay_ok && envelope_ok,
        details.join("; "),
    )
}

fn closed_loop(learned: &[(&Experiment, &[LearnedSeed])]) -> Outcome {
    let mut passed = true;
    let mut details = Vec::new();
    for (exp, seeds) in learned {
        let x0 = exp.sim.as_ref().expect("sim").x0.clone();
        let horizon = exp.sim.as_ref().expect("sim").horizon;
        let x0n: f64 = DVector::norm_squared(&x0);
        match &seeds[0].gains {
            Some(gains) => {
                let stats = runner::closed_loop_phase(exp, &runner::controller(gains), 0).expect("closed loop");
                let ratio = stats.final_mean_square() / x0n;
                passed &= ratio <= 0.05;
                details.push(format!(
                    "{} (seed 0, T = {horizon}): E|X(T)|^2 / |x0|^2 = {ratio:.4e} with v = 0",
                    exp.name
                ));
            }
            None => {
                passed = false;
                details.push(format!("{}: no learned gains for seed 0", exp.name));
            }
        }
        let saddle = exact_pi::run_model_based_pi(
            exp.system.as_ref().expect("system"),
            &exp.cost,
            &exp.pi,
        )
        .expect("exact");
        let stats = runner::closed_loop_phase(exp, &runner::controller(&saddle.final_gains), 0).expect("closed loop");
        details.push(format!(
            "{} under the exact saddle controller: {:.4e}",
            exp.name,
            stats.final_mean_square() / x0n
        ));
    }
    report("closed_loop_decay", passed, details.join("; "))
}

fn main() -> ExitCode {
    let mut outcomes = vec![exact_example_1(), exact_example_2()];

    let ex1 = experiment(0);
    let ex2 = experiment(1);
    let p1 = exact(&problems::example_1()).final_p;
    let p2 = exact(&problems::example_2()).final_p;
    let learned_1 = learn_seeds(&ex1, &p1);
    outcomes.push(model_free("model_free_example_1", &learned_1, 0.05, Duration::from_secs(120)));
    let learned_2 = learn_seeds(&ex2, &p2);
    outcomes.push(model_free("model_free_example_2", &learned_2, 1.0, Duration::from_secs(600)));

    outcomes.push(oracle_equivalence());
    outcomes.push(monotonicity());
    outcomes.push(lyapunov_kernel());
    outcomes.push(robustness());
    outcomes.push(closed_loop(&[(&ex1, &learned_1), (&ex2, &learned_2)]));

    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| !o.passed).collect();
    println!(
        "\n{} of {} acceptance criteria passed",
        outcomes.len() - failed.len(),
        outcomes.len()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        for o in failed {
            println!("failed: {} ({})", o.name, o.detail);
        }
        ExitCode::FAILURE
    }
}
