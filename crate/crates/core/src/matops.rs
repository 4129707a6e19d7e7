//! Symmetric-matrix vectorization, Kronecker machinery, the stochastic
//! Lyapunov operator `L_{X,Z}(Y) = X'Y + YX + Z'YZ` and mean-square
//! stability predicates.
//!
//! Conventions: `vec` is column-major stacking (nalgebra's storage order).
//! `svec` lists the upper triangle row by row with off-diagonal entries
//! doubled, so `svec(P) . xbar(x) = x'Px` where `xbar` lists the distinct
//! monomials `x_i x_j` (i <= j) without doubling.

use alloc::format;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Asymmetry above which inputs are flagged; inputs are symmetrized regardless.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Condition estimate above which the Lyapunov operator is treated as singular.
pub const LYAPUNOV_COND_LIMIT: f64 = 1e12;

/// Number of distinct entries of a symmetric `n x n` matrix.
pub const fn sym_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Half-vectorization of a symmetric matrix with doubled off-diagonals.
#[derive(Debug, Clone, PartialEq)]
pub struct SymVec {
    dim: usize,
    entries: DVector<f64>,
}

impl SymVec {
    pub fn from_entries(dim: usize, entries: DVector<f64>) -> Result<Self> {
        if entries.len() != sym_len(dim) {
            return Err(Error::Dimension(format!(
                "svec of a {dim}x{dim} matrix has {} entries, got {}",
                sym_len(dim),
                entries.len()
            )));
        }
        Ok(Self { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &DVector<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> DVector<f64> {
        self.entries
    }
}

pub fn ensure_square(m: &DMatrix<f64>, what: &str) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m.nrows())
}

/// Largest absolute difference between `m` and its transpose.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows().min(m.ncols());
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// `(M + M') / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn svec(p: &DMatrix<f64>) -> Result<SymVec> {
    let n = ensure_square(p, "svec input")?;
    let mut out = Vec::with_capacity(sym_len(n));
    for i in 0..n {
        out.push(p[(i, i)]);
        for j in (i + 1)..n {
            out.push(p[(i, j)] + p[(j, i)]);
        }
    }
    SymVec::from_entries(n, DVector::from_vec(out))
}

pub fn smat(v: &SymVec) -> DMatrix<f64> {
    smat_slice(v.entries.as_slice(), v.dim).expect("SymVec length is checked on construction")
}

/// Inverse of [`svec`] on a raw slice.
pub fn smat_slice(v: &[f64], n: usize) -> Result<DMatrix<f64>> {
    if v.len() != sym_len(n) {
        return Err(Error::Dimension(format!(
            "expected {} entries for a {n}x{n} symmetric matrix, got {}",
            sym_len(n),
            v.len()
        )));
    }
    let mut p = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        p[(i, i)] = v[k];
        k += 1;
        for j in (i + 1)..n {
            let half = 0.5 * v[k];
            p[(i, j)] = half;
            p[(j, i)] = half;
            k += 1;
        }
    }
    Ok(p)
}

/// Distinct quadratic monomials `[x1^2, x1 x2, .., x1 xn, x2^2, .., xn^2]`.
pub fn xbar(x: &[f64]) -> DVector<f64> {
    let n = x.len();
    let mut out = DVector::zeros(sym_len(n));
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            out[k] = x[i] * x[j];
            k += 1;
        }
    }
    out
}

/// Column-major vectorization.
pub fn vec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec`].
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if v.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "cannot reshape {} entries into {rows}x{cols}",
            v.len()
        )));
    }
    Ok(DMatrix::from_column_slice(rows, cols, v))
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Duplication map `T` with `vec(P) = T svec(P)` for symmetric `P`.
pub fn duplication(n: usize) -> DMatrix<f64> {
    let mut t = DMatrix::zeros(n * n, sym_len(n));
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            if i == j {
                t[(i + n * i, k)] = 1.0;
            } else {
                t[(i + n * j, k)] = 0.5;
                t[(j + n * i, k)] = 0.5;
            }
            k += 1;
        }
    }
    t
}

/// Matrix `Lbar` of shape `m^2 x n(n+1)/2` with `Lbar svec(P) = vec(L P L')`
/// for every symmetric `n x n` matrix `P`, where `L` is `m x n`.
pub fn gain_quadratic_map(l: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, n) = l.shape();
    let mut out = DMatrix::zeros(m * m, sym_len(n));
    for b in 0..m {
        for a in 0..m {
            let row = a + m * b;
            let mut k = 0;
            for i in 0..n {
                for j in i..n {
                    out[(row, k)] = if i == j {
                        l[(a, i)] * l[(b, i)]
                    } else {
                        0.5 * (l[(a, i)] * l[(b, j)] + l[(a, j)] * l[(b, i)])
                    };
                    k += 1;
                }
            }
        }
    }
    out
}

/// Operands of the stochastic Lyapunov equation `X'Y + YX + Z'YZ = -W`.
#[derive(Debug, Clone)]
pub struct LyapunovOperands {
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    w: DMatrix<f64>,
}

impl LyapunovOperands {
    /// Validates shapes; `w` is symmetrized.
    pub fn new(x: DMatrix<f64>, z: DMatrix<f64>, w: &DMatrix<f64>) -> Result<Self> {
        let n = ensure_square(&x, "drift X")?;
        if z.shape() != (n, n) || w.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "Lyapunov operands must all be {n}x{n}: Z is {:?}, W is {:?}",
                z.shape(),
                w.shape()
            )));
        }
        Ok(Self {
            x,
            z,
            w: symmetrize(w),
        })
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn drift(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn diffusion(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn rhs(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// `||X'Y + YX + Z'YZ + W||_F`.
    pub fn residual(&self, y: &DMatrix<f64>) -> f64 {
        (apply_lyapunov(&self.x, &self.z, y) + &self.w).norm()
    }
}

/// `X'Y + YX + Z'YZ`.
pub fn apply_lyapunov(x: &DMatrix<f64>, z: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    x.transpose() * y + y * x + z.transpose() * y * z
}

/// `P(X) + Q(Z) = I (x) X' + X' (x) I + Z' (x) Z'`, the matrix of
/// `Y -> X'Y + YX + Z'YZ` acting on `vec(Y)`.
pub fn lyapunov_operator(x: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let xt = x.transpose();
    let zt = z.transpose();
    kron(&id, &xt) + kron(&xt, &id) + kron(&zt, &zt)
}

/// The Lyapunov operator restricted to symmetric matrices, acting on
/// `svec(Y)` and returning the upper-triangle entries (row by row) of
/// `X'Y + YX + Z'YZ`.
fn reduced_lyapunov_operator(x: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let s = sym_len(n);
    let mut out = DMatrix::zeros(s, s);
    let mut basis = DMatrix::zeros(n, n);
    let mut col = 0;
    for i in 0..n {
        for j in i..n {
            // svec coordinate e_col corresponds to Y with y_ij = y_ji = 1/2
            // (or y_ii = 1 on the diagonal).
            let weight = if i == j { 1.0 } else { 0.5 };
            basis[(i, j)] = weight;
            basis[(j, i)] = weight;
            let image = apply_lyapunov(x, z, &basis);
            let mut row = 0;
            for a in 0..n {
                for b in a..n {
                    out[(row, col)] = image[(a, b)];
                    row += 1;
                }
            }
            basis[(i, j)] = 0.0;
            basis[(j, i)] = 0.0;
            col += 1;
        }
    }
    out
}

fn upper_entries(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    let mut out = DVector::zeros(sym_len(n));
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            out[k] = m[(i, j)];
            k += 1;
        }
    }
    out
}

/// 2-norm condition number from singular values; infinite when singular.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves `X'Y + YX + Z'YZ = -W` for symmetric `Y` through the dense
/// vectorized system on `svec(Y)`.
pub fn solve_stochastic_lyapunov(ops: &LyapunovOperands) -> Result<DMatrix<f64>> {
    let n = ops.dim();
    let k = reduced_lyapunov_operator(&ops.x, &ops.z);
    let cond = condition_number(&k);
    if !(cond <= LYAPUNOV_COND_LIMIT) {
        return Err(Error::Unstabilized { condition: cond });
    }
    let rhs = -upper_entries(&ops.w);
    let sol = k
        .lu()
        .solve(&rhs)
        .ok_or(Error::Unstabilized { condition: cond })?;
    smat_slice(sol.as_slice(), n)
}

/// Solves the same equation through the full `n^2 x n^2` system on `vec(Y)`.
/// Quadratically larger than [`solve_stochastic_lyapunov`]; meant as a
/// reference.
pub fn solve_stochastic_lyapunov_full(ops: &LyapunovOperands) -> Result<DMatrix<f64>> {
    let n = ops.dim();
    let k = lyapunov_operator(&ops.x, &ops.z);
    let rhs = -vec(&ops.w);
    let sol = k
        .lu()
        .solve(&rhs)
        .ok_or(Error::Singular("vectorized Lyapunov operator"))?;
    Ok(DMatrix::from_column_slice(n, n, sol.as_slice()))
}

/// Largest real part among the eigenvalues of a square matrix.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::NEG_INFINITY;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|c| c.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Spectral abscissa of `P(X) + Q(Z)`; negative exactly when
/// `dx = Xx ds + Zx dW` is mean-square stable.
pub fn ms_spectral_abscissa(x: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<f64> {
    let n = ensure_square(x, "drift X")?;
    if z.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "diffusion must be {n}x{n}, got {:?}",
            z.shape()
        )));
    }
    Ok(spectral_abscissa(&lyapunov_operator(x, z)))
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Householder QR with column pivoting, used for rank-revealing least squares.
#[derive(Debug, Clone)]
pub struct PivotedQr {
    r: DMatrix<f64>,
    reflectors: Vec<(usize, DVector<f64>)>,
    perm: Vec<usize>,
}

impl PivotedQr {
    pub fn new(a: &DMatrix<f64>) -> Self {
        let (m, n) = a.shape();
        let mut r = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut reflectors = Vec::new();
        for i in 0..m.min(n) {
            let mut best = i;
            let mut best_norm = -1.0;
            for j in i..n {
                let norm = r.view((i, j), (m - i, 1)).norm_squared();
                if norm > best_norm {
                    best_norm = norm;
                    best = j;
                }
            }
            if best != i {
                r.swap_columns(i, best);
                perm.swap(i, best);
            }
            let x: DVector<f64> = r.view((i, i), (m - i, 1)).column(0).into_owned();
            let norm = x.norm();
            if norm == 0.0 {
                continue;
            }
            let alpha = if x[0] > 0.0 { -norm } else { norm };
            let mut v = x;
            v[0] -= alpha;
            let vv = v.norm_squared();
            if vv == 0.0 {
                continue;
            }
            for j in i..n {
                let mut col = r.view_mut((i, j), (m - i, 1));
                let mut col = col.column_mut(0);
                let s = 2.0 * v.dot(&col) / vv;
                col.axpy(-s, &v, 1.0);
            }
            reflectors.push((i, v));
        }
        Self {
            r,
            reflectors,
            perm,
        }
    }

    /// Number of diagonal entries of `R` above `rel_tol * |R_00|`.
    pub fn rank(&self, rel_tol: f64) -> usize {
        let k = self.r.nrows().min(self.r.ncols());
        if k == 0 {
            return 0;
        }
        let lead = self.r[(0, 0)].abs();
        if lead == 0.0 {
            return 0;
        }
        (0..k)
            .take_while(|&i| self.r[(i, i)].abs() > rel_tol * lead)
            .count()
    }

    /// Minimum-residual solution using the leading `rank` pivoted columns;
    /// remaining unknowns are set to zero.
    pub fn solve(&self, b: &DVector<f64>, rank: usize) -> DVector<f64> {
        let m = self.r.nrows();
        let n = self.r.ncols();
        let mut qtb = b.clone();
        for (i, v) in &self.reflectors {
            let vv = v.norm_squared();
            let mut seg = qtb.rows_mut(*i, m - i);
            let s = 2.0 * v.dot(&seg) / vv;
            seg.axpy(-s, v, 1.0);
        }
        let mut z = DVector::zeros(n);
        for i in (0..rank).rev() {
            let mut acc = qtb[i];
            for j in (i + 1)..rank {
                acc -= self.r[(i, j)] * z[j];
            }
            z[i] = acc / self.r[(i, i)];
        }
        let mut x = DVector::zeros(n);
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = z[i];
        }
        x
    }
}
