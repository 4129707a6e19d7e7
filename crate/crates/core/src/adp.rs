//! Data-driven two-loop policy iteration.
//!
//! Every policy evaluation is a least-squares problem assembled from the
//! same [`DataMoments`]; the system matrices never enter. Besides `P` the
//! regression identifies `B1~ = B1'P + D'PC`, `B2~ = B2'P` and `D~ = D'PD`,
//! which is all the improvement steps need.

use alloc::format;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::exact_pi::{IterationRecord, OuterRecord, PiConfig, PiTrace, Termination};
use crate::game::{CostSpec, Gains, ValueMatrix};
use crate::matops::{self, sym_len, PivotedQr};
use crate::simulate::DataMoments;

pub use crate::simulate::regression_unknowns;

/// Singular values below `RANK_TOL * sigma_max` count as zero.
pub const RANK_TOL: f64 = 1e-8;

/// `Phi theta = Theta` with
/// `theta = [svec(P); vec(B1~); vec(B2~); svec(D~)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSystem {
    pub phi: DMatrix<f64>,
    pub theta: DVector<f64>,
    dims: (usize, usize, usize),
}

impl RegressionSystem {
    pub fn new(phi: DMatrix<f64>, theta: DVector<f64>, dims: (usize, usize, usize)) -> Result<Self> {
        let (n, m1, m2) = dims;
        let p = regression_unknowns(n, m1, m2);
        if phi.ncols() != p || phi.nrows() != theta.len() {
            return Err(Error::Dimension(format!(
                "regression must be rows x {p} with matching right-hand side, got {}x{} and {}",
                phi.nrows(),
                phi.ncols(),
                theta.len()
            )));
        }
        Ok(Self { phi, theta, dims })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn unknowns(&self) -> usize {
        self.phi.ncols()
    }

    /// Stacks the parameter blocks in regression order.
    pub fn pack(
        p: &DMatrix<f64>,
        b1_tilde: &DMatrix<f64>,
        b2_tilde: &DMatrix<f64>,
        d_tilde: &DMatrix<f64>,
    ) -> Result<DVector<f64>> {
        let parts = [
            matops::svec(p)?.into_entries(),
            matops::vec(b1_tilde),
            matops::vec(b2_tilde),
            matops::svec(d_tilde)?.into_entries(),
        ];
        let len = parts.iter().map(|v| v.len()).sum();
        let mut out = DVector::zeros(len);
        let mut at = 0;
        for part in &parts {
            out.rows_mut(at, part.len()).copy_from(part);
            at += part.len();
        }
        Ok(out)
    }
}

fn check_dims(data: &DataMoments, lu: &DMatrix<f64>, lv: &DMatrix<f64>, cost: &CostSpec) -> Result<()> {
    let (n, m1, m2) = data.dims();
    if cost.q().shape() != (n, n) || cost.r().shape() != (m1, m1) {
        return Err(Error::Dimension(format!(
            "cost weights do not match data dimensions n={n}, m1={m1}"
        )));
    }
    if lu.shape() != (m1, n) || lv.shape() != (m2, n) {
        return Err(Error::Dimension(format!(
            "gains must be {m1}x{n} and {m2}x{n}, got {:?} and {:?}",
            lu.shape(),
            lv.shape()
        )));
    }
    Ok(())
}

/// Builds `Phi = [dxx | 2Ixx(I kron Lu') - 2Ixu | 2Ixx(I kron Lv') - 2Ixv | Ixx Lbar - duu]`
/// and `Theta = -Ixx vec(Lu'R Lu + Q - gamma^2 Lv'Lv)`.
pub fn assemble_regression(
    data: &DataMoments,
    lu: &DMatrix<f64>,
    lv: &DMatrix<f64>,
    cost: &CostSpec,
) -> Result<RegressionSystem> {
    check_dims(data, lu, lv, cost)?;
    let (n, m1, m2) = data.dims();
    let rows = data.intervals();
    let (sn, s1) = (sym_len(n), sym_len(m1));
    let eye = DMatrix::<f64>::identity(n, n);
    let ixx = data.i_xx();

    let col_u = ixx * matops::kron(&eye, &lu.transpose()) * 2.0 - data.i_xu() * 2.0;
    let col_v = ixx * matops::kron(&eye, &lv.transpose()) * 2.0 - data.i_xv() * 2.0;
    let col_d = ixx * matops::gain_quadratic_map(&lu.transpose()) - data.delta_uu();

    let mut phi = DMatrix::zeros(rows, regression_unknowns(n, m1, m2));
    phi.columns_mut(0, sn).copy_from(data.delta_xx());
    phi.columns_mut(sn, m1 * n).copy_from(&col_u);
    phi.columns_mut(sn + m1 * n, m2 * n).copy_from(&col_v);
    phi.columns_mut(sn + m1 * n + m2 * n, s1).copy_from(&col_d);

    let gamma2 = cost.gamma() * cost.gamma();
    let weight = lu.transpose() * cost.r() * lu + cost.q() - lv.transpose() * lv * gamma2;
    let theta = -(ixx * matops::vec(&weight));
    RegressionSystem::new(phi, theta, (n, m1, m2))
}

fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    m.clone().svd(false, false).singular_values
}

/// Count of singular values above `RANK_TOL * sigma_max`.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = singular_values(m);
    let max = sv.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * max).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankCheck {
    pub full: bool,
    pub rank: usize,
    pub required: usize,
}

/// Rank of `[Ixx, Ixu, Ixv, duu]`, with `Ixx` restricted to its distinct
/// columns, against the number of regression unknowns.
pub fn check_rank(data: &DataMoments) -> RankCheck {
    let (n, m1, m2) = data.dims();
    let required = regression_unknowns(n, m1, m2);
    let rows = data.intervals();
    let mut stacked = DMatrix::zeros(rows, required);
    let mut c = 0;
    for a in 0..n {
        for b in a..n {
            stacked.set_column(c, &data.i_xx().column(a * n + b));
            c += 1;
        }
    }
    for block in [data.i_xu(), data.i_xv(), data.delta_uu()] {
        stacked.columns_mut(c, block.ncols()).copy_from(block);
        c += block.ncols();
    }
    let rank = numerical_rank(&stacked);
    RankCheck {
        full: rank == required,
        rank,
        required,
    }
}

/// Unpacked least-squares solution.
#[derive(Debug, Clone, PartialEq)]
pub struct LsEstimate {
    pub p_hat: DMatrix<f64>,
    /// Estimate of `B1'P + D'PC`.
    pub b1_tilde: DMatrix<f64>,
    /// Estimate of `B2'P`.
    pub b2_tilde: DMatrix<f64>,
    /// Estimate of `D'PD`.
    pub d_tilde: DMatrix<f64>,
    pub condition: f64,
    /// `||Phi theta - Theta||_2`.
    pub residual: f64,
}

/// Solves the regression with column-pivoted Householder QR. Refuses when
/// `Phi` is numerically rank deficient.
pub fn least_squares_step(reg: &RegressionSystem) -> Result<LsEstimate> {
    let (n, m1, m2) = reg.dims;
    let required = reg.unknowns();
    let sv = singular_values(&reg.phi);
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    let rank = if max == 0.0 {
        0
    } else {
        sv.iter().filter(|&&s| s > RANK_TOL * max).count()
    };
    if reg.phi.nrows() < required || rank < required {
        return Err(Error::RankDeficient { rank, required });
    }
    let qr = PivotedQr::new(&reg.phi);
    let sol = qr.solve(&reg.theta, required);
    let residual = (&reg.phi * &sol - &reg.theta).norm();

    let (sn, s1) = (sym_len(n), sym_len(m1));
    let s = sol.as_slice();
    let mut at = 0;
    let mut take = |len: usize| {
        let part = &s[at..at + len];
        at += len;
        part
    };
    let p_hat = matops::smat_slice(take(sn), n)?;
    let b1_tilde = matops::unvec(take(m1 * n), m1, n)?;
    let b2_tilde = matops::unvec(take(m2 * n), m2, n)?;
    let d_tilde = matops::smat_slice(take(s1), m1)?;
    Ok(LsEstimate {
        p_hat,
        b1_tilde,
        b2_tilde,
        d_tilde,
        condition: max / min,
        residual,
    })
}

/// `Lu = -(R + D~)^-1 B1~`.
pub fn estimated_control_gain(est: &LsEstimate, cost: &CostSpec) -> Result<DMatrix<f64>> {
    let lhs = cost.r() + &est.d_tilde;
    let lu = lhs
        .lu()
        .solve(&est.b1_tilde)
        .ok_or(Error::Singular("R + D~"))?;
    if lu.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("R + D~"));
    }
    Ok(-lu)
}

/// `Lv = gamma^-2 B2~`.
pub fn estimated_disturbance_gain(est: &LsEstimate, cost: &CostSpec) -> DMatrix<f64> {
    &est.b2_tilde / (cost.gamma() * cost.gamma())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFreeRun {
    pub trace: PiTrace,
    /// Estimate behind the returned value matrix.
    pub estimate: LsEstimate,
}

/// Two-loop iteration on the moments alone.
///
/// The inner loop stops on `||P^(k+1,j) - P^(k+1,j-1)||_F <= eps_inner`; the
/// outer loop stops on `||Lv^(k+1) - Lv^(k)||_F <= eps_outer` with
/// `Lv^(0) = 0`. Each inner loop restarts from `cfg.initial_lu`.
/// `cfg.initial_pu` is ignored since checking it needs the model.
pub fn run_model_free_pi(data: &DataMoments, cost: &CostSpec, cfg: &PiConfig) -> Result<ModelFreeRun> {
    let (n, m1, m2) = data.dims();
    cfg.validate(n, m1)?;
    let rank = check_rank(data);
    if !rank.full {
        return Err(Error::RankDeficient {
            rank: rank.rank,
            required: rank.required,
        });
    }

    let mut records = Vec::new();
    let mut outer_records = Vec::new();
    let mut lv = DMatrix::zeros(m2, n);

    for k in 0..cfg.max_outer {
        let mut lu = cfg.initial_lu.clone();
        let mut prev_p: Option<DMatrix<f64>> = None;
        let mut last: Option<LsEstimate> = None;
        let mut j = 0;
        while j < cfg.max_inner {
            j += 1;
            let reg = assemble_regression(data, &lu, &lv, cost).map_err(|e| e.at(k, j))?;
            let est = least_squares_step(&reg).map_err(|e| e.at(k, j))?;
            let step = prev_p.as_ref().map(|q| (&est.p_hat - q).norm());
            records.push(IterationRecord {
                outer: k,
                inner: j,
                p: est.p_hat.clone(),
                lu: lu.clone(),
                lv: lv.clone(),
                step,
                residual: est.residual,
                abscissa: None,
                condition: Some(est.condition),
            });
            lu = estimated_control_gain(&est, cost).map_err(|e| e.at(k, j))?;
            prev_p = Some(est.p_hat.clone());
            last = Some(est);
            if matches!(step, Some(s) if s <= cfg.eps_inner) {
                break;
            }
        }
        let est = last.expect("inner loop runs at least once");
        if !records.last().is_some_and(|r| matches!(r.step, Some(s) if s <= cfg.eps_inner)) {
            return Err(Error::IterationCap {
                which: "inner",
                cap: cfg.max_inner,
            }
            .at(k, j));
        }

        let next_lv = estimated_disturbance_gain(&est, cost);
        let change = (&next_lv - &lv).norm();
        lv = next_lv;
        outer_records.push(OuterRecord {
            outer: k,
            p: est.p_hat.clone(),
            lv: lv.clone(),
            inner_iterations: j,
        });
        if change <= cfg.eps_outer {
            let final_p = ValueMatrix::new(est.p_hat.clone())?.into_inner();
            return Ok(ModelFreeRun {
                trace: PiTrace {
                    records,
                    outer_records,
                    final_p,
                    final_gains: Gains::new(lu, lv),
                    termination: Termination::Converged,
                },
                estimate: est,
            });
        }
    }
    Err(Error::IterationCap {
        which: "outer",
        cap: cfg.max_outer,
    })
}
