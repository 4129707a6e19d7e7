//! Policy iteration with an additive disturbance on the block matrix `M(P)`
//! at every evaluation, and empirical input-to-state-stability measurements
//! against the exact solution.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::exact_pi::{
    self, check_initial_policy, IterationRecord, OuterRecord, PiConfig, PiTrace, Termination,
};
use crate::game::{self, CostSpec, GameBlockMatrix, Gains, SystemModel, ValueMatrix};

pub const DEFAULT_DECAY_RATE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DisturbanceMode {
    Zero,
    /// One random direction drawn up front and reused at every evaluation.
    ConstantRandom,
    /// Fresh random direction with norm `magnitude * decay_rate^t`, where `t`
    /// counts evaluations across both loops from zero.
    Decaying,
    /// Fresh random direction with norm `magnitude` at every evaluation.
    PerIterationRandom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceSpec {
    pub mode: DisturbanceMode,
    /// Frobenius norm of each disturbance.
    pub magnitude: f64,
    pub decay_rate: f64,
    pub seed: u64,
}

impl DisturbanceSpec {
    pub fn zero() -> Self {
        Self {
            mode: DisturbanceMode::Zero,
            magnitude: 0.0,
            decay_rate: DEFAULT_DECAY_RATE,
            seed: 0,
        }
    }

    pub fn new(mode: DisturbanceMode, magnitude: f64, seed: u64) -> Self {
        Self {
            mode,
            magnitude,
            decay_rate: DEFAULT_DECAY_RATE,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.magnitude >= 0.0) || !self.magnitude.is_finite() {
            return Err(Error::InvalidInput(format!(
                "disturbance magnitude must be finite and >= 0, got {}",
                self.magnitude
            )));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate < 1.0) {
            return Err(Error::InvalidInput(format!(
                "decay rate must lie in (0, 1), got {}",
                self.decay_rate
            )));
        }
        Ok(())
    }
}

/// Symmetric Gaussian matrix scaled to Frobenius norm `norm`.
pub fn random_symmetric(rng: &mut ChaCha8Rng, size: usize, norm: f64) -> DMatrix<f64> {
    if norm == 0.0 || size == 0 {
        return DMatrix::zeros(size, size);
    }
    let g = DMatrix::from_fn(size, size, |_, _| rng.sample::<f64, _>(StandardNormal));
    let s = (&g + g.transpose()) * 0.5;
    let f = s.norm();
    s * (norm / f)
}

/// Stateful generator of the disturbance sequence.
#[derive(Debug, Clone)]
pub struct DisturbanceSource {
    spec: DisturbanceSpec,
    size: usize,
    rng: ChaCha8Rng,
    fixed: Option<DMatrix<f64>>,
    count: usize,
}

impl DisturbanceSource {
    pub fn new(spec: &DisturbanceSpec, size: usize) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let fixed = match spec.mode {
            DisturbanceMode::ConstantRandom => Some(random_symmetric(&mut rng, size, spec.magnitude)),
            _ => None,
        };
        Ok(Self {
            spec: spec.clone(),
            size,
            rng,
            fixed,
            count: 0,
        })
    }

    /// Disturbance for the next evaluation.
    pub fn next_disturbance(&mut self) -> DMatrix<f64> {
        let t = self.count;
        self.count += 1;
        match self.spec.mode {
            DisturbanceMode::Zero => DMatrix::zeros(self.size, self.size),
            DisturbanceMode::ConstantRandom => self.fixed.clone().expect("drawn on construction"),
            DisturbanceMode::Decaying => {
                let norm = self.spec.magnitude * libm::pow(self.spec.decay_rate, t as f64);
                random_symmetric(&mut self.rng, self.size, norm)
            }
            DisturbanceMode::PerIterationRandom => {
                random_symmetric(&mut self.rng, self.size, self.spec.magnitude)
            }
        }
    }
}

/// Exact evaluation of `(Lu, Lv)` followed by `M_hat = M(P_hat) + dM`.
pub fn perturbed_evaluation(
    lu: &DMatrix<f64>,
    lv: &DMatrix<f64>,
    sys: &SystemModel,
    cost: &CostSpec,
    dm: &DMatrix<f64>,
) -> Result<(GameBlockMatrix, ValueMatrix)> {
    let p = exact_pi::policy_evaluation(lu, lv, sys, cost)?;
    let m = game::assemble_m(&p, sys, cost)?.perturbed(dm)?;
    Ok((m, p))
}

fn solve_block(lhs: &DMatrix<f64>, rhs: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let x = lhs.clone().lu().solve(rhs).ok_or(Error::Singular(what))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(what));
    }
    Ok(-x)
}

/// `Lu = -[M]uu^-1 [M]ux` and `Lv = -[M]vv^-1 [M]vx`. A singular block means
/// the disturbance is too large for the iteration to proceed.
pub fn perturbed_improvement(m_hat: &GameBlockMatrix) -> Result<Gains> {
    let lu = solve_block(&m_hat.uu(), &m_hat.ux(), "perturbed uu block")?;
    let lv = solve_block(&m_hat.vv(), &m_hat.vx(), "perturbed vv block")?;
    Ok(Gains::new(lu, lv))
}

/// Per-run record of the distance to the exact solution.
#[derive(Debug, Clone, PartialEq)]
pub struct IssReport {
    pub magnitude: f64,
    pub seed: u64,
    /// `||P_hat - P*||_F` after every evaluation.
    pub errors: Vec<f64>,
    /// Whether the evaluated pair was a mean-square stabilizer.
    pub stabilizer_ok: Vec<bool>,
    /// `tr(P* - P_v^(k+1))` after every outer iteration.
    pub trace_gaps: Vec<f64>,
    /// `||Lv_hat^(k+1) - Lv*||_F` after every outer iteration.
    pub lv_errors: Vec<f64>,
    pub final_error: f64,
    pub violations: usize,
    pub termination: Termination,
}

impl IssReport {
    pub fn diverged(&self) -> bool {
        self.termination == Termination::Destabilized || !self.final_error.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustRun {
    pub trace: PiTrace,
    pub report: IssReport,
    /// Exact solution used as the reference.
    pub p_star: DMatrix<f64>,
}

/// Runs the perturbed two-loop iteration. The inner loop stops on
/// `||P_hat^(k+1,j) - P_hat^(k+1,j-1)||_F <= eps_inner`, the outer loop on
/// `||Lv_hat^(k+1) - Lv_hat^(k)||_F <= eps_outer` with `Lv_hat^(0) = 0`.
///
/// Losing stabilization, a singular perturbed block or an exhausted cap ends
/// the run and is reported through `termination`, not as an error.
pub fn run_robust_pi(
    sys: &SystemModel,
    cost: &CostSpec,
    cfg: &PiConfig,
    dist: &DisturbanceSpec,
) -> Result<RobustRun> {
    check_initial_policy(sys, cost, cfg)?;
    let exact = exact_pi::run_model_based_pi(sys, cost, cfg)?;
    run_robust_pi_with_reference(sys, cost, cfg, dist, &exact.final_p)
}

/// As [`run_robust_pi`] with a precomputed exact solution `p_star`.
pub fn run_robust_pi_with_reference(
    sys: &SystemModel,
    cost: &CostSpec,
    cfg: &PiConfig,
    dist: &DisturbanceSpec,
    p_star: &DMatrix<f64>,
) -> Result<RobustRun> {
    check_initial_policy(sys, cost, cfg)?;
    let (n, m1, m2) = (sys.n(), sys.m1(), sys.m2());
    let mut source = DisturbanceSource::new(dist, n + m1 + m2)?;
    let lv_star = game::disturbance_gain(&ValueMatrix::new(p_star.clone())?, sys, cost);
    let p_star_trace = p_star.trace();

    let mut records = Vec::new();
    let mut outer_records = Vec::new();
    let mut errors = Vec::new();
    let mut stabilizer_ok = Vec::new();
    let mut trace_gaps = Vec::new();
    let mut lv_errors = Vec::new();
    let mut lv = DMatrix::zeros(m2, n);
    let mut lu = cfg.initial_lu.clone();
    let mut p = DMatrix::zeros(n, n);
    let mut termination = Termination::IterationCap;

    'outer: for k in 0..cfg.max_outer {
        lu = cfg.initial_lu.clone();
        let mut prev_p: Option<DMatrix<f64>> = None;
        let mut last_m: Option<GameBlockMatrix> = None;
        let mut converged = false;
        let mut j = 0;
        while j < cfg.max_inner {
            j += 1;
            let gains = Gains::new(lu.clone(), lv.clone());
            let check = game::is_stabilizer(&gains, sys)?;
            stabilizer_ok.push(check.stable);
            if !check.stable {
                termination = Termination::Destabilized;
                errors.push(f64::INFINITY);
                break 'outer;
            }
            let dm = source.next_disturbance();
            let (m_hat, value) = match perturbed_evaluation(&lu, &lv, sys, cost, &dm) {
                Ok(out) => out,
                Err(_) => {
                    termination = Termination::Destabilized;
                    errors.push(f64::INFINITY);
                    break 'outer;
                }
            };
            p = value.into_inner();
            errors.push((&p - p_star).norm());
            let step = prev_p.as_ref().map(|q| (&p - q).norm());
            let ops = exact_pi::evaluation_operands(&lu, &lv, sys, cost)?;
            records.push(IterationRecord {
                outer: k,
                inner: j,
                p: p.clone(),
                lu: lu.clone(),
                lv: lv.clone(),
                step,
                residual: ops.residual(&p),
                abscissa: Some(check.abscissa),
                condition: None,
            });
            match perturbed_improvement(&m_hat) {
                Ok(g) => lu = g.lu,
                Err(_) => {
                    termination = Termination::Destabilized;
                    break 'outer;
                }
            }
            last_m = Some(m_hat);
            if matches!(step, Some(s) if s <= cfg.eps_inner) {
                converged = true;
                break;
            }
            prev_p = Some(p.clone());
        }
        if !converged {
            break;
        }
        let m_hat = last_m.expect("inner loop ran");
        let next_lv = match perturbed_improvement(&m_hat) {
            Ok(g) => g.lv,
            Err(_) => {
                termination = Termination::Destabilized;
                break;
            }
        };
        let change = (&next_lv - &lv).norm();
        lv = next_lv;
        trace_gaps.push(p_star_trace - p.trace());
        lv_errors.push((&lv - &lv_star).norm());
        outer_records.push(OuterRecord {
            outer: k,
            p: p.clone(),
            lv: lv.clone(),
            inner_iterations: j,
        });
        if change <= cfg.eps_outer {
            termination = Termination::Converged;
            break;
        }
    }

    let final_error = if termination == Termination::Destabilized {
        f64::INFINITY
    } else {
        (&p - p_star).norm()
    };
    let violations = stabilizer_ok.iter().filter(|ok| !**ok).count();
    Ok(RobustRun {
        trace: PiTrace {
            records,
            outer_records,
            final_p: p,
            final_gains: Gains::new(lu, lv),
            termination,
        },
        report: IssReport {
            magnitude: dist.magnitude,
            seed: dist.seed,
            errors,
            stabilizer_ok,
            trace_gaps,
            lv_errors,
            final_error,
            violations,
            termination,
        },
        p_star: p_star.clone(),
    })
}

/// One row of the ISS envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeRow {
    pub magnitude: f64,
    /// Largest final error over the non-diverged runs.
    pub max_final_error: f64,
    pub runs: usize,
    pub diverged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IssEnvelope {
    pub rows: Vec<EnvelopeRow>,
    /// Envelope non-decreasing in the magnitude.
    pub monotone: bool,
    /// Smallest-magnitude envelope small relative to the largest; see
    /// [`iss_envelope`].
    pub vanishing: bool,
    pub warnings: Vec<String>,
}

/// Final error at a zero disturbance must be below this.
pub const ZERO_DISTURBANCE_TOL: f64 = 1e-8;

/// Maximum final error per magnitude over seeds.
///
/// Diverged runs are excluded from the maxima and produce a warning.
/// `monotone` compares consecutive magnitudes. `vanishing` requires, for a
/// smallest magnitude of zero, an envelope below [`ZERO_DISTURBANCE_TOL`];
/// otherwise `e(m_min) <= e(m_max) * sqrt(m_min / m_max)`, that is a decay
/// at least as fast as the square root of the magnitude.
pub fn iss_envelope(reports: &[IssReport]) -> Result<IssEnvelope> {
    let mut mags: Vec<f64> = Vec::new();
    for r in reports {
        if !mags.contains(&r.magnitude) {
            mags.push(r.magnitude);
        }
    }
    mags.sort_by(|a, b| a.partial_cmp(b).expect("finite magnitudes"));
    if mags.len() < 2 {
        return Err(Error::InvalidInput(
            "the envelope needs at least two magnitudes".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for &m in &mags {
        let group: Vec<&IssReport> = reports.iter().filter(|r| r.magnitude == m).collect();
        if group.len() < 3 {
            return Err(Error::InvalidInput(format!(
                "magnitude {m:e} has {} runs, need at least 3",
                group.len()
            )));
        }
        let mut max = 0.0f64;
        let mut diverged = 0;
        for r in &group {
            if r.diverged() {
                diverged += 1;
                warnings.push(format!(
                    "magnitude {m:e}, seed {}: run diverged and is excluded",
                    r.seed
                ));
            } else {
                max = max.max(r.final_error);
            }
        }
        rows.push(EnvelopeRow {
            magnitude: m,
            max_final_error: max,
            runs: group.len(),
            diverged,
        });
    }
    let monotone = rows
        .windows(2)
        .all(|w| w[0].max_final_error <= w[1].max_final_error);
    let (lo, hi) = (&rows[0], &rows[rows.len() - 1]);
    let vanishing = if lo.magnitude == 0.0 {
        lo.max_final_error <= ZERO_DISTURBANCE_TOL
    } else {
        lo.max_final_error <= hi.max_final_error * libm::sqrt(lo.magnitude / hi.magnitude)
    };
    Ok(IssEnvelope {
        rows,
        monotone,
        vanishing,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems;
    use alloc::vec;

    fn ex1() -> (problems::Problem, PiConfig) {
        let ex = problems::example_1();
        let cfg = PiConfig::new(ex.initial_lu.clone());
        (ex, cfg)
    }

    #[test]
    fn disturbances_have_exact_norm_and_symmetry() {
        let spec = DisturbanceSpec::new(DisturbanceMode::PerIterationRandom, 1e-3, 9);
        let mut src = DisturbanceSource::new(&spec, 4).unwrap();
        let a = src.next_disturbance();
        let b = src.next_disturbance();
        assert!((a.norm() - 1e-3).abs() < 1e-15);
        assert_eq!(a, a.transpose());
        assert_ne!(a, b);

        let spec = DisturbanceSpec::new(DisturbanceMode::ConstantRandom, 1e-2, 9);
        let mut src = DisturbanceSource::new(&spec, 4).unwrap();
        assert_eq!(src.next_disturbance(), src.next_disturbance());

        let spec = DisturbanceSpec::new(DisturbanceMode::Decaying, 1.0, 9);
        let mut src = DisturbanceSource::new(&spec, 4).unwrap();
        let norms: Vec<f64> = (0..4).map(|_| src.next_disturbance().norm()).collect();
        for (t, v) in norms.iter().enumerate() {
            assert!((v - libm::pow(0.5, t as f64)).abs() < 1e-14);
        }
        assert!(DisturbanceSource::new(&DisturbanceSpec::new(DisturbanceMode::Zero, -1.0, 0), 3).is_err());
    }

    #[test]
    fn additive_definition_of_m_hat() {
        let (ex, _) = ex1();
        let lu = ex.initial_lu.clone();
        let lv = DMatrix::zeros(1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dm = random_symmetric(&mut rng, 4, 1e-3);
        let (m_hat, p) = perturbed_evaluation(&lu, &lv, &ex.system, &ex.cost, &dm).unwrap();
        let m = game::assemble_m(&p, &ex.system, &ex.cost).unwrap();
        assert!(((m_hat.matrix() - m.matrix()).norm() - 1e-3).abs() < 1e-15);

        let (m0, p0) = perturbed_evaluation(&lu, &lv, &ex.system, &ex.cost, &DMatrix::zeros(4, 4)).unwrap();
        assert_eq!(p0, exact_pi::policy_evaluation(&lu, &lv, &ex.system, &ex.cost).unwrap());
        assert_eq!(m0, game::assemble_m(&p0, &ex.system, &ex.cost).unwrap());
    }

    #[test]
    fn unperturbed_improvement_gives_saddle_gains() {
        let (ex, cfg) = ex1();
        let exact = exact_pi::run_model_based_pi(&ex.system, &ex.cost, &cfg).unwrap();
        let p = ValueMatrix::new(exact.final_p).unwrap();
        let m = game::assemble_m(&p, &ex.system, &ex.cost).unwrap();
        let g = perturbed_improvement(&m).unwrap();
        let saddle = game::saddle_gains(&p, &ex.system, &ex.cost).unwrap();
        assert!((&g.lu - &saddle.lu).norm() < 1e-14);
        assert!((&g.lv - &saddle.lv).norm() < 1e-14);
    }

    #[test]
    fn gain_sensitivity_is_linear_in_the_disturbance() {
        let (ex, _) = ex1();
        let p = exact_pi::policy_evaluation(&ex.initial_lu, &DMatrix::zeros(1, 2), &ex.system, &ex.cost).unwrap();
        let m = game::assemble_m(&p, &ex.system, &ex.cost).unwrap();
        let base = perturbed_improvement(&m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut ratios = Vec::new();
        for i in 0..100 {
            let mag = libm::pow(10.0, -5.0 + 3.0 * (i as f64) / 99.0);
            let dm = random_symmetric(&mut rng, 4, mag);
            let g = perturbed_improvement(&m.perturbed(&dm).unwrap()).unwrap();
            let dev = ((&g.lu - &base.lu).norm_squared() + (&g.lv - &base.lv).norm_squared()).sqrt();
            ratios.push(dev / mag);
        }
        let max = ratios.iter().copied().fold(0.0, f64::max);
        assert!(max < 50.0, "largest gain/disturbance ratio {max}");
    }

    #[test]
    fn singular_block_is_reported() {
        let (ex, _) = ex1();
        let p = ValueMatrix::zeros(2);
        let m = game::assemble_m(&p, &ex.system, &ex.cost).unwrap();
        let mut dm = DMatrix::zeros(4, 4);
        dm[(2, 2)] = -0.24;
        assert_eq!(
            perturbed_improvement(&m.perturbed(&dm).unwrap()),
            Err(Error::Singular("perturbed uu block"))
        );
    }

    #[test]
    fn zero_disturbance_reproduces_exact_iteration() {
        let (ex, cfg) = ex1();
        let exact = exact_pi::run_model_based_pi(&ex.system, &ex.cost, &cfg).unwrap();
        let run = run_robust_pi(&ex.system, &ex.cost, &cfg, &DisturbanceSpec::zero()).unwrap();
        assert_eq!(run.trace.termination, Termination::Converged);
        for (a, b) in exact.records.iter().zip(run.trace.records.iter()) {
            assert_eq!((a.outer, a.inner), (b.outer, b.inner));
            assert!((&a.p - &b.p).norm() <= 1e-12);
            assert!((&a.lu - &b.lu).norm() <= 1e-12);
            assert!((&a.lv - &b.lv).norm() <= 1e-12);
        }
        assert!(run.report.final_error < 1e-5);
    }

    #[test]
    fn decaying_disturbance_converges() {
        let (ex, cfg) = ex1();
        let spec = DisturbanceSpec::new(DisturbanceMode::Decaying, 1e-2, 4);
        let run = run_robust_pi(&ex.system, &ex.cost, &cfg, &spec).unwrap();
        assert_eq!(run.report.termination, Termination::Converged);
        assert!(run.report.final_error <= cfg.eps_outer, "{}", run.report.final_error);
    }

    #[test]
    fn envelope_bookkeeping() {
        let report = |magnitude: f64, seed: u64, final_error: f64, termination| IssReport {
            magnitude,
            seed,
            errors: vec![final_error],
            stabilizer_ok: vec![true],
            trace_gaps: Vec::new(),
            lv_errors: Vec::new(),
            final_error,
            violations: 0,
            termination,
        };
        let c = Termination::Converged;
        let mut reports = vec![
            report(0.0, 0, 0.0, c),
            report(0.0, 1, 1e-12, c),
            report(0.0, 2, 0.0, c),
            report(1e-2, 0, 3e-3, c),
            report(1e-2, 1, 5e-3, c),
            report(1e-2, 2, f64::INFINITY, Termination::Destabilized),
        ];
        let env = iss_envelope(&reports).unwrap();
        assert!(env.monotone && env.vanishing);
        assert_eq!(env.rows[1].diverged, 1);
        assert_eq!(env.rows[1].max_final_error, 5e-3);
        assert_eq!(env.warnings.len(), 1);

        reports[0].final_error = 1e-2;
        let env = iss_envelope(&reports).unwrap();
        assert!(!env.monotone && !env.vanishing);

        assert!(iss_envelope(&reports[3..]).is_err());
        assert!(iss_envelope(&reports[..4]).is_err());
    }

}
