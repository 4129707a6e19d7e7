//! Model of the stochastic zero-sum game
//! `dX = (AX + B1 u + B2 v) ds + (CX + D u) dW` with payoff
//! `E int (X'QX + u'Ru - gamma^2 v'v) ds`, the block matrix `M(P)`, the game
//! Riccati residual and saddle-point gains.

use alloc::format;
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::matops::{self, ensure_square, symmetrize};

/// Eigenvalue floor for `Q >= 0`.
pub const PSD_TOL: f64 = 1e-10;
/// Eigenvalue floor for `R > 0`.
pub const PD_TOL: f64 = 1e-10;

fn check_shape(m: &DMatrix<f64>, rows: usize, cols: usize, what: &str) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::Dimension(format!(
            "{what} must be {rows}x{cols}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// Coefficients of the controlled SDE.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    a: DMatrix<f64>,
    b1: DMatrix<f64>,
    b2: DMatrix<f64>,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
}

impl SystemModel {
    pub fn new(
        a: DMatrix<f64>,
        b1: DMatrix<f64>,
        b2: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
    ) -> Result<Self> {
        let n = ensure_square(&a, "A")?;
        if n == 0 {
            return Err(Error::Dimension("state dimension must be positive".into()));
        }
        if b1.nrows() != n || b1.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "B1 must be {n}xm1 with m1 >= 1, got {}x{}",
                b1.nrows(),
                b1.ncols()
            )));
        }
        if b2.nrows() != n || b2.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "B2 must be {n}xm2 with m2 >= 1, got {}x{}",
                b2.nrows(),
                b2.ncols()
            )));
        }
        check_shape(&c, n, n, "C")?;
        check_shape(&d, n, b1.ncols(), "D")?;
        Ok(Self { a, b1, b2, c, d })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn m1(&self) -> usize {
        self.b1.ncols()
    }
    pub fn m2(&self) -> usize {
        self.b2.ncols()
    }
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b1(&self) -> &DMatrix<f64> {
        &self.b1
    }
    pub fn b2(&self) -> &DMatrix<f64> {
        &self.b2
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    /// Drift and diffusion matrices of the closed loop `u = Lu x, v = Lv x`.
    pub fn closed_loop(&self, gains: &Gains) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        gains.check(self.n(), self.m1(), self.m2())?;
        let drift = &self.a + &self.b1 * &gains.lu + &self.b2 * &gains.lv;
        let diffusion = &self.c + &self.d * &gains.lu;
        Ok((drift, diffusion))
    }
}

/// Weights of the quadratic payoff and the attenuation level.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    gamma: f64,
}

impl CostSpec {
    /// Symmetrizes `q` and `r`, then checks `Q >= 0`, `R > 0`, `gamma > 0`.
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, gamma: f64) -> Result<Self> {
        let n = ensure_square(&q, "Q")?;
        let m1 = ensure_square(&r, "R")?;
        if n == 0 || m1 == 0 {
            return Err(Error::Dimension("Q and R must be non-empty".into()));
        }
        let q = symmetrize(&q);
        let r = symmetrize(&r);
        let q_min = matops::min_sym_eigenvalue(&q);
        if q_min < -PSD_TOL {
            return Err(Error::InvalidInput(format!(
                "Q must be positive semidefinite (smallest eigenvalue {q_min:e})"
            )));
        }
        let r_min = matops::min_sym_eigenvalue(&r);
        if r_min < PD_TOL {
            return Err(Error::InvalidInput(format!(
                "R must be positive definite (smallest eigenvalue {r_min:e})"
            )));
        }
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidInput(format!(
                "gamma must be a positive number, got {gamma}"
            )));
        }
        Ok(Self { q, r, gamma })
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn check_against(&self, sys: &SystemModel) -> Result<()> {
        check_shape(&self.q, sys.n(), sys.n(), "Q")?;
        check_shape(&self.r, sys.m1(), sys.m1(), "R")
    }
}

/// Linear feedback pair `u = Lu x`, `v = Lv x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gains {
    pub lu: DMatrix<f64>,
    pub lv: DMatrix<f64>,
}

impl Gains {
    pub fn new(lu: DMatrix<f64>, lv: DMatrix<f64>) -> Self {
        Self { lu, lv }
    }

    pub fn zeros(n: usize, m1: usize, m2: usize) -> Self {
        Self {
            lu: DMatrix::zeros(m1, n),
            lv: DMatrix::zeros(m2, n),
        }
    }

    pub fn check(&self, n: usize, m1: usize, m2: usize) -> Result<()> {
        check_shape(&self.lu, m1, n, "Lu")?;
        check_shape(&self.lv, m2, n, "Lv")
    }
}

/// Symmetric candidate `P` for the game value `x'Px`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueMatrix(DMatrix<f64>);

impl ValueMatrix {
    /// Symmetrizes the input.
    pub fn new(p: DMatrix<f64>) -> Result<Self> {
        ensure_square(&p, "value matrix")?;
        Ok(Self(symmetrize(&p)))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

/// Symmetric `(n+m1+m2)`-square block matrix with `x`, `u`, `v` partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct GameBlockMatrix {
    m: DMatrix<f64>,
    n: usize,
    m1: usize,
    m2: usize,
}

impl GameBlockMatrix {
    pub fn from_matrix(m: DMatrix<f64>, n: usize, m1: usize, m2: usize) -> Result<Self> {
        check_shape(&m, n + m1 + m2, n + m1 + m2, "block matrix")?;
        Ok(Self {
            m: symmetrize(&m),
            n,
            m1,
            m2,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.m1, self.m2)
    }
    pub fn xx(&self) -> DMatrix<f64> {
        self.m.view((0, 0), (self.n, self.n)).into_owned()
    }
    pub fn ux(&self) -> DMatrix<f64> {
        self.m.view((self.n, 0), (self.m1, self.n)).into_owned()
    }
    pub fn vx(&self) -> DMatrix<f64> {
        self.m
            .view((self.n + self.m1, 0), (self.m2, self.n))
            .into_owned()
    }
    pub fn uu(&self) -> DMatrix<f64> {
        self.m
            .view((self.n, self.n), (self.m1, self.m1))
            .into_owned()
    }
    pub fn uv(&self) -> DMatrix<f64> {
        self.m
            .view((self.n, self.n + self.m1), (self.m1, self.m2))
            .into_owned()
    }
    pub fn vv(&self) -> DMatrix<f64> {
        let off = self.n + self.m1;
        self.m.view((off, off), (self.m2, self.m2)).into_owned()
    }

    /// Adds a symmetric disturbance of matching size.
    pub fn perturbed(&self, delta: &DMatrix<f64>) -> Result<Self> {
        Self::from_matrix(&self.m + delta, self.n, self.m1, self.m2)
    }

    /// `[I Lu' Lv'] M [I; Lu; Lv]`.
    pub fn hamiltonian(&self, lu: &DMatrix<f64>, lv: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_shape(lu, self.m1, self.n, "Lu")?;
        check_shape(lv, self.m2, self.n, "Lv")?;
        let mut stack = DMatrix::zeros(self.n + self.m1 + self.m2, self.n);
        stack
            .view_mut((0, 0), (self.n, self.n))
            .fill_with_identity();
        stack.view_mut((self.n, 0), (self.m1, self.n)).copy_from(lu);
        stack
            .view_mut((self.n + self.m1, 0), (self.m2, self.n))
            .copy_from(lv);
        Ok(symmetrize(&(stack.transpose() * &self.m * stack)))
    }
}

/// `M(P)`: blocks `Q + A'P + PA + C'PC`, `B1'P + D'PC`, `B2'P`,
/// `R + D'PD` and `-gamma^2 I`, with a zero `uv` block.
pub fn assemble_m(p: &ValueMatrix, sys: &SystemModel, cost: &CostSpec) -> Result<GameBlockMatrix> {
    cost.check_against(sys)?;
    let (n, m1, m2) = (sys.n(), sys.m1(), sys.m2());
    check_shape(p.as_matrix(), n, n, "P")?;
    let p = p.as_matrix();
    let xx = cost.q() + sys.a().transpose() * p + p * sys.a() + sys.c().transpose() * p * sys.c();
    let ux = sys.b1().transpose() * p + sys.d().transpose() * p * sys.c();
    let vx = sys.b2().transpose() * p;
    let uu = cost.r() + sys.d().transpose() * p * sys.d();
    let g2 = cost.gamma() * cost.gamma();

    let size = n + m1 + m2;
    let mut m = DMatrix::zeros(size, size);
    m.view_mut((0, 0), (n, n)).copy_from(&symmetrize(&xx));
    m.view_mut((n, 0), (m1, n)).copy_from(&ux);
    m.view_mut((0, n), (n, m1)).copy_from(&ux.transpose());
    m.view_mut((n + m1, 0), (m2, n)).copy_from(&vx);
    m.view_mut((0, n + m1), (n, m2)).copy_from(&vx.transpose());
    m.view_mut((n, n), (m1, m1)).copy_from(&symmetrize(&uu));
    m.view_mut((n + m1, n + m1), (m2, m2))
        .copy_from(&(DMatrix::<f64>::identity(m2, m2) * -g2));
    Ok(GameBlockMatrix { m, n, m1, m2 })
}

fn inner_matrix(p: &DMatrix<f64>, sys: &SystemModel, cost: &CostSpec) -> DMatrix<f64> {
    symmetrize(&(cost.r() + sys.d().transpose() * p * sys.d()))
}

/// Left-hand side of the game algebraic Riccati equation,
/// `A'P + PA + C'PC + gamma^-2 P B2 B2' P - S' (R + D'PD)^-1 S + Q`
/// with `S = B1'P + D'PC`.
pub fn gare_residual(p: &ValueMatrix, sys: &SystemModel, cost: &CostSpec) -> Result<DMatrix<f64>> {
    cost.check_against(sys)?;
    check_shape(p.as_matrix(), sys.n(), sys.n(), "P")?;
    let p = p.as_matrix();
    let s = sys.b1().transpose() * p + sys.d().transpose() * p * sys.c();
    let inner = inner_matrix(p, sys, cost);
    let solved = inner
        .lu()
        .solve(&s)
        .ok_or(Error::Singular("R + D'PD"))?;
    let g2 = cost.gamma() * cost.gamma();
    let res = sys.a().transpose() * p
        + p * sys.a()
        + sys.c().transpose() * p * sys.c()
        + p * sys.b2() * sys.b2().transpose() * p / g2
        - s.transpose() * solved
        + cost.q();
    Ok(symmetrize(&res))
}

/// `Lu = -(R + D'PD)^-1 (B1'P + D'PC)`.
pub fn control_gain(p: &ValueMatrix, sys: &SystemModel, cost: &CostSpec) -> Result<DMatrix<f64>> {
    cost.check_against(sys)?;
    check_shape(p.as_matrix(), sys.n(), sys.n(), "P")?;
    let p = p.as_matrix();
    let s = sys.b1().transpose() * p + sys.d().transpose() * p * sys.c();
    let solved = inner_matrix(p, sys, cost)
        .lu()
        .solve(&s)
        .ok_or(Error::Singular("R + D'PD"))?;
    Ok(-solved)
}

/// `Lv = gamma^-2 B2'P`.
pub fn disturbance_gain(p: &ValueMatrix, sys: &SystemModel, cost: &CostSpec) -> DMatrix<f64> {
    sys.b2().transpose() * p.as_matrix() / (cost.gamma() * cost.gamma())
}

/// Saddle-point feedback pair for a value matrix.
pub fn saddle_gains(p: &ValueMatrix, sys: &SystemModel, cost: &CostSpec) -> Result<Gains> {
    Ok(Gains {
        lu: control_gain(p, sys, cost)?,
        lv: disturbance_gain(p, sys, cost),
    })
}

/// Result of the mean-square stability test for a feedback pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityCheck {
    pub stable: bool,
    pub abscissa: f64,
}

/// Whether `(Lu, Lv)` is a mean-square stabilizer of the system.
pub fn is_stabilizer(gains: &Gains, sys: &SystemModel) -> Result<StabilityCheck> {
    let (drift, diffusion) = sys.closed_loop(gains)?;
    let abscissa = matops::ms_spectral_abscissa(&drift, &diffusion)?;
    Ok(StabilityCheck {
        stable: abscissa < 0.0,
        abscissa,
    })
}
