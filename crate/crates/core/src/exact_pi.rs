//! Model-based two-loop policy iteration for the game Riccati equation.
//!
//! The outer loop fixes the disturbance gain `Lv` and runs an inner policy
//! iteration on the control gain, restarting every inner loop from the same
//! initial gain. After the inner loop settles, `Lv` is replaced by
//! `gamma^-2 B2'P`.

use alloc::format;
use alloc::vec::Vec;
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::game::{self, CostSpec, Gains, SystemModel, ValueMatrix};
use crate::matops::{self, LyapunovOperands};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MAX_INNER: usize = 200;
pub const DEFAULT_MAX_OUTER: usize = 100;

/// Stopping rules and initialization shared by the exact, data-driven and
/// perturbed iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct PiConfig {
    pub eps_inner: f64,
    pub eps_outer: f64,
    pub max_inner: usize,
    pub max_outer: usize,
    pub initial_lu: DMatrix<f64>,
    /// Optional certificate for the initial gain; checked when present.
    pub initial_pu: Option<DMatrix<f64>>,
}

impl PiConfig {
    pub fn new(initial_lu: DMatrix<f64>) -> Self {
        Self {
            eps_inner: DEFAULT_EPS,
            eps_outer: DEFAULT_EPS,
            max_inner: DEFAULT_MAX_INNER,
            max_outer: DEFAULT_MAX_OUTER,
            initial_lu,
            initial_pu: None,
        }
    }

    pub fn validate(&self, n: usize, m1: usize) -> Result<()> {
        if !(self.eps_inner > 0.0) || !(self.eps_outer > 0.0) {
            return Err(Error::InvalidInput(
                "stopping tolerances must be positive".into(),
            ));
        }
        if self.max_inner == 0 || self.max_outer == 0 {
            return Err(Error::InvalidInput("iteration caps must be >= 1".into()));
        }
        if self.initial_lu.shape() != (m1, n) {
            return Err(Error::Dimension(format!(
                "initial Lu must be {m1}x{n}, got {:?}",
                self.initial_lu.shape()
            )));
        }
        if let Some(pu) = &self.initial_pu {
            if pu.shape() != (n, n) {
                return Err(Error::Dimension(format!(
                    "initial Pu must be {n}x{n}, got {:?}",
                    pu.shape()
                )));
            }
        }
        Ok(())
    }
}

/// One policy evaluation: `P^(k+1, j)` computed from the gain pair
/// `(Lu^(k+1, j-1), Lv^(k))`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// Zero-based outer index `k`.
    pub outer: usize,
    /// One-based inner index `j`.
    pub inner: usize,
    pub p: DMatrix<f64>,
    /// Control gain that was evaluated.
    pub lu: DMatrix<f64>,
    /// Disturbance gain held fixed during this inner loop.
    pub lv: DMatrix<f64>,
    /// `||P^(k+1,j) - P^(k+1,j-1)||_F`, absent on the first evaluation.
    pub step: Option<f64>,
    /// Lyapunov residual (model-based) or regression residual (data-driven).
    pub residual: f64,
    /// Mean-square spectral abscissa of the evaluated pair, when the model is known.
    pub abscissa: Option<f64>,
    /// Condition number of the regression matrix (data-driven only).
    pub condition: Option<f64>,
}

/// Result of one completed inner loop.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterRecord {
    pub outer: usize,
    /// `P_v^(k+1)`.
    pub p: DMatrix<f64>,
    /// `Lv^(k+1)`.
    pub lv: DMatrix<f64>,
    pub inner_iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    IterationCap,
    Destabilized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiTrace {
    pub records: Vec<IterationRecord>,
    pub outer_records: Vec<OuterRecord>,
    pub final_p: DMatrix<f64>,
    pub final_gains: Gains,
    pub termination: Termination,
}

impl PiTrace {
    pub fn outer_iterations(&self) -> usize {
        self.outer_records.len()
    }

    pub fn inner_iterations(&self) -> usize {
        self.records.len()
    }

    /// Records belonging to outer iteration `k`.
    pub fn inner_loop(&self, outer: usize) -> impl Iterator<Item = &IterationRecord> {
        self.records.iter().filter(move |r| r.outer == outer)
    }
}

/// Operands of the evaluation equation for the pair `(Lu, Lv)`:
/// drift `A + B1 Lu + B2 Lv`, diffusion `C + D Lu`,
/// right-hand side `Lu'R Lu + Q - gamma^2 Lv'Lv`.
pub fn evaluation_operands(
    lu: &DMatrix<f64>,
    lv: &DMatrix<f64>,
    sys: &SystemModel,
    cost: &CostSpec,
) -> Result<LyapunovOperands> {
    cost.check_against(sys)?;
    let gains = Gains::new(lu.clone(), lv.clone());
    let (drift, diffusion) = sys.closed_loop(&gains)?;
    let g2 = cost.gamma() * cost.gamma();
    let w = lu.transpose() * cost.r() * lu + cost.q() - lv.transpose() * lv * g2;
    LyapunovOperands::new(drift, diffusion, &w)
}

/// Value matrix of the feedback pair `(Lu, Lv)`.
pub fn policy_evaluation(
    lu: &DMatrix<f64>,
    lv: &DMatrix<f64>,
    sys: &SystemModel,
    cost: &CostSpec,
) -> Result<ValueMatrix> {
    let ops = evaluation_operands(lu, lv, sys, cost)?;
    ValueMatrix::new(matops::solve_stochastic_lyapunov(&ops)?)
}

/// `Lu = -(R + D'PD)^-1 (B1'P + D'PC)`.
pub fn policy_improvement(
    p: &ValueMatrix,
    sys: &SystemModel,
    cost: &CostSpec,
) -> Result<DMatrix<f64>> {
    game::control_gain(p, sys, cost)
}

/// `Lv = gamma^-2 B2'P`.
pub fn disturbance_update(p: &ValueMatrix, sys: &SystemModel, cost: &CostSpec) -> DMatrix<f64> {
    game::disturbance_gain(p, sys, cost)
}

/// Largest eigenvalue of
/// `(A+B1 Lu)'Pu + Pu(A+B1 Lu) + (C+D Lu)'Pu(C+D Lu) + Q + gamma^-2 Pu B2 B2' Pu + Lu'R Lu`,
/// which must be `<= 0` for `Pu` to certify the initial gain.
pub fn initial_certificate_margin(
    sys: &SystemModel,
    cost: &CostSpec,
    lu: &DMatrix<f64>,
    pu: &DMatrix<f64>,
) -> Result<f64> {
    let gains = Gains::new(lu.clone(), DMatrix::zeros(sys.m2(), sys.n()));
    let (x, z) = sys.closed_loop(&gains)?;
    let g2 = cost.gamma() * cost.gamma();
    let lhs = matops::apply_lyapunov(&x, &z, pu)
        + cost.q()
        + pu * sys.b2() * sys.b2().transpose() * pu / g2
        + lu.transpose() * cost.r() * lu;
    Ok(-matops::min_sym_eigenvalue(&(-lhs)))
}

/// Slack allowed when checking the initial certificate.
const CERTIFICATE_TOL: f64 = 1e-8;

pub(crate) fn check_initial_policy(
    sys: &SystemModel,
    cost: &CostSpec,
    cfg: &PiConfig,
) -> Result<()> {
    cost.check_against(sys)?;
    cfg.validate(sys.n(), sys.m1())?;
    let init = Gains::new(cfg.initial_lu.clone(), DMatrix::zeros(sys.m2(), sys.n()));
    let check = game::is_stabilizer(&init, sys)?;
    if !check.stable {
        return Err(Error::InvalidInput(format!(
            "initial pair (Lu, 0) is not mean-square stabilizing (abscissa {:e})",
            check.abscissa
        )));
    }
    if let Some(pu) = &cfg.initial_pu {
        let margin = initial_certificate_margin(sys, cost, &cfg.initial_lu, pu)?;
        if margin > CERTIFICATE_TOL {
            return Err(Error::InvalidInput(format!(
                "initial Pu does not satisfy the Riccati inequality (largest eigenvalue {margin:e})"
            )));
        }
    }
    Ok(())
}

/// Runs the model-based iteration to the stabilizing game solution.
///
/// Every evaluated pair is checked for mean-square stability; a
/// destabilizing iterate or an exhausted iteration cap is an error.
pub fn run_model_based_pi(sys: &SystemModel, cost: &CostSpec, cfg: &PiConfig) -> Result<PiTrace> {
    check_initial_policy(sys, cost, cfg)?;
    let (n, m2) = (sys.n(), sys.m2());

    let mut records = Vec::new();
    let mut outer_records: Vec<OuterRecord> = Vec::new();
    let mut lv = DMatrix::zeros(m2, n);
    let mut prev_pv: Option<DMatrix<f64>> = None;

    for k in 0..cfg.max_outer {
        let mut lu = cfg.initial_lu.clone();
        let mut prev_p: Option<DMatrix<f64>> = None;
        let mut converged = false;
        let mut p = DMatrix::zeros(n, n);
        let mut j = 0;
        while j < cfg.max_inner {
            j += 1;
            let gains = Gains::new(lu.clone(), lv.clone());
            let check = game::is_stabilizer(&gains, sys).map_err(|e| e.at(k, j))?;
            if !check.stable {
                return Err(Error::NotStabilizing {
                    abscissa: check.abscissa,
                }
                .at(k, j));
            }
            let ops = evaluation_operands(&lu, &lv, sys, cost)?;
            p = matops::solve_stochastic_lyapunov(&ops).map_err(|e| e.at(k, j))?;
            let residual = ops.residual(&p);
            let step = prev_p.as_ref().map(|q| (&p - q).norm());
            records.push(IterationRecord {
                outer: k,
                inner: j,
                p: p.clone(),
                lu: lu.clone(),
                lv: lv.clone(),
                step,
                residual,
                abscissa: Some(check.abscissa),
                condition: None,
            });
            let value = ValueMatrix::new(p.clone())?;
            lu = policy_improvement(&value, sys, cost).map_err(|e| e.at(k, j))?;
            if matches!(step, Some(s) if s <= cfg.eps_inner) {
                converged = true;
                break;
            }
            prev_p = Some(p.clone());
        }
        if !converged {
            return Err(Error::IterationCap {
                which: "inner",
                cap: cfg.max_inner,
            }
            .at(k, j));
        }

        let value = ValueMatrix::new(p.clone())?;
        lv = disturbance_update(&value, sys, cost);
        outer_records.push(OuterRecord {
            outer: k,
            p: p.clone(),
            lv: lv.clone(),
            inner_iterations: j,
        });
        let done = matches!(&prev_pv, Some(q) if (&p - q).norm() <= cfg.eps_outer);
        if done {
            return Ok(PiTrace {
                records,
                outer_records,
                final_p: p,
                final_gains: Gains::new(lu, lv),
                termination: Termination::Converged,
            });
        }
        prev_pv = Some(p);
    }
    Err(Error::IterationCap {
        which: "outer",
        cap: cfg.max_outer,
    })
}
