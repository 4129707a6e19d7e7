//! Euler-Maruyama sample paths of the controlled SDE and Monte Carlo
//! estimates of the data moments consumed by the data-driven iteration.
//!
//! Every path owns a ChaCha8 stream selected by `(seed, path index)`. Paths
//! are grouped in blocks of [`PATH_BLOCK`]; a block is always accumulated in
//! path order and blocks are merged in block order, so any scheduler that
//! respects that order reproduces the serial sums bit for bit.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::game::{self, CostSpec, Gains, SystemModel};
use crate::matops::sym_len;

pub const DEFAULT_SUBSTEPS: usize = 100;
pub const DEFAULT_PATHS: usize = 10_000;
pub const DEFAULT_AMPLITUDE: f64 = 0.1;
pub const DEFAULT_FREQUENCY: f64 = 10.0;
pub const DEFAULT_LAMBDA: f64 = 0.05;
/// A path whose state norm exceeds this is treated as diverged.
pub const BLOWUP_NORM: f64 = 1e6;
/// Number of paths per reduction block.
pub const PATH_BLOCK: usize = 64;

/// Number of unknowns in the regression: `svec(P)`, `vec(B1~)`, `vec(B2~)`,
/// `svec(D~)`.
pub const fn regression_unknowns(n: usize, m1: usize, m2: usize) -> usize {
    sym_len(n) + m1 * n + m2 * n + sym_len(m1)
}

/// Exploration added to the behavior policy:
/// `e_u = a sin(w t) 1 + Su xi_u`, `e_v = a cos(w t) 1 + Sv xi_v`
/// with fresh standard normal `xi_u`, `xi_v` on every Euler step.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplorationSignal {
    pub amplitude: f64,
    pub frequency: f64,
    pub u_noise: DMatrix<f64>,
    pub v_noise: DMatrix<f64>,
}

impl ExplorationSignal {
    /// Noise scales `chol(lambda_u R^-1)` and `sqrt(lambda_v gamma^-2) I`.
    pub fn standard(
        cost: &CostSpec,
        m2: usize,
        amplitude: f64,
        frequency: f64,
        lambda_u: f64,
        lambda_v: f64,
    ) -> Result<Self> {
        if lambda_u < 0.0 || lambda_v < 0.0 {
            return Err(Error::InvalidInput(
                "exploration variances must be non-negative".into(),
            ));
        }
        let r_inv = cost
            .r()
            .clone()
            .try_inverse()
            .ok_or(Error::Singular("R"))?;
        let u_noise = if lambda_u == 0.0 {
            DMatrix::zeros(r_inv.nrows(), r_inv.nrows())
        } else {
            (r_inv * lambda_u)
                .cholesky()
                .ok_or(Error::Singular("exploration covariance"))?
                .l()
        };
        let gamma = cost.gamma();
        let v_noise = DMatrix::identity(m2, m2) * libm::sqrt(lambda_v / (gamma * gamma));
        Ok(Self {
            amplitude,
            frequency,
            u_noise,
            v_noise,
        })
    }

    /// Defaults: amplitude 0.1, frequency 10, both variances 0.05.
    pub fn default_for(cost: &CostSpec, m2: usize) -> Result<Self> {
        Self::standard(
            cost,
            m2,
            DEFAULT_AMPLITUDE,
            DEFAULT_FREQUENCY,
            DEFAULT_LAMBDA,
            DEFAULT_LAMBDA,
        )
    }

    /// No excitation at all.
    pub fn silent(m1: usize, m2: usize) -> Self {
        Self {
            amplitude: 0.0,
            frequency: 0.0,
            u_noise: DMatrix::zeros(m1, m1),
            v_noise: DMatrix::zeros(m2, m2),
        }
    }

    fn check(&self, m1: usize, m2: usize) -> Result<()> {
        if self.u_noise.shape() != (m1, m1) || self.v_noise.shape() != (m2, m2) {
            return Err(Error::Dimension(format!(
                "exploration scales must be {m1}x{m1} and {m2}x{m2}"
            )));
        }
        if !self.amplitude.is_finite() || !self.frequency.is_finite() {
            return Err(Error::InvalidInput("exploration parameters must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub horizon: f64,
    /// Number of sampling intervals `N`.
    pub intervals: usize,
    /// Euler steps per interval `G`.
    pub substeps: usize,
    /// Monte Carlo paths `H`.
    pub paths: usize,
    pub x0: DVector<f64>,
    pub seed: u64,
    pub exploration: ExplorationSignal,
}

impl SimConfig {
    pub fn dt(&self) -> f64 {
        self.horizon / (self.intervals * self.substeps) as f64
    }

    pub fn validate(&self, n: usize, m1: usize, m2: usize) -> Result<()> {
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::InvalidInput(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if self.intervals == 0 || self.substeps == 0 || self.paths == 0 {
            return Err(Error::InvalidInput(
                "intervals, substeps and paths must all be >= 1".into(),
            ));
        }
        if self.x0.len() != n {
            return Err(Error::Dimension(format!(
                "x0 must have length {n}, got {}",
                self.x0.len()
            )));
        }
        self.exploration.check(m1, m2)
    }
}

/// Path-averaged moments over the sampling intervals. Row `i` refers to
/// `[t_i, t_{i+1}]`.
///
/// * `delta_xx`: `E xbar(t_{i+1}) - E xbar(t_i)`, `N x n(n+1)/2`
/// * `delta_uu`: `E int ubar`, `N x m1(m1+1)/2`
/// * `i_xx`: `E int x_a x_b`, column `a n + b`, `N x n^2`
/// * `i_xu`: `E int x_a u_k`, column `a m1 + k`, `N x n m1`
/// * `i_xv`: `E int x_a v_k`, column `a m2 + k`, `N x n m2`
#[derive(Debug, Clone, PartialEq)]
pub struct DataMoments {
    n: usize,
    m1: usize,
    m2: usize,
    endpoint_means: DMatrix<f64>,
    delta_xx: DMatrix<f64>,
    delta_uu: DMatrix<f64>,
    i_xx: DMatrix<f64>,
    i_xu: DMatrix<f64>,
    i_xv: DMatrix<f64>,
}

impl DataMoments {
    /// `endpoint_means` holds `E xbar(t_i)` for `i = 0..=N`; `delta_xx` is
    /// derived from it.
    pub fn new(
        dims: (usize, usize, usize),
        endpoint_means: DMatrix<f64>,
        delta_uu: DMatrix<f64>,
        i_xx: DMatrix<f64>,
        i_xu: DMatrix<f64>,
        i_xv: DMatrix<f64>,
    ) -> Result<Self> {
        let (n, m1, m2) = dims;
        let rows = endpoint_means.nrows();
        if rows < 2 {
            return Err(Error::Dimension(
                "need at least two sampling instants".into(),
            ));
        }
        let big_n = rows - 1;
        let expect = [
            ("endpoint means", &endpoint_means, rows, sym_len(n)),
            ("delta_uu", &delta_uu, big_n, sym_len(m1)),
            ("I_xx", &i_xx, big_n, n * n),
            ("I_xu", &i_xu, big_n, n * m1),
            ("I_xv", &i_xv, big_n, n * m2),
        ];
        for (name, m, r, c) in expect {
            if m.shape() != (r, c) {
                return Err(Error::Dimension(format!(
                    "{name} must be {r}x{c}, got {}x{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        let delta_xx = endpoint_means.rows(1, big_n) - endpoint_means.rows(0, big_n);
        Ok(Self {
            n,
            m1,
            m2,
            endpoint_means,
            delta_xx,
            delta_uu,
            i_xx,
            i_xu,
            i_xv,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.m1, self.m2)
    }
    pub fn intervals(&self) -> usize {
        self.delta_xx.nrows()
    }
    pub fn endpoint_means(&self) -> &DMatrix<f64> {
        &self.endpoint_means
    }
    pub fn delta_xx(&self) -> &DMatrix<f64> {
        &self.delta_xx
    }
    pub fn delta_uu(&self) -> &DMatrix<f64> {
        &self.delta_uu
    }
    pub fn i_xx(&self) -> &DMatrix<f64> {
        &self.i_xx
    }
    pub fn i_xu(&self) -> &DMatrix<f64> {
        &self.i_xu
    }
    pub fn i_xv(&self) -> &DMatrix<f64> {
        &self.i_xv
    }

    /// Row `i` of `I_xx` as an `n x n` matrix.
    pub fn i_xx_matrix(&self, i: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, self.i_xx.row(i).transpose().as_slice())
    }
}

/// Dense row-major copies of the model used in the inner Euler loop.
struct Plant {
    n: usize,
    m1: usize,
    m2: usize,
    a: Vec<f64>,
    b1: Vec<f64>,
    b2: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl Plant {
    fn new(sys: &SystemModel) -> Self {
        Self {
            n: sys.n(),
            m1: sys.m1(),
            m2: sys.m2(),
            a: row_major(sys.a()),
            b1: row_major(sys.b1()),
            b2: row_major(sys.b2()),
            c: row_major(sys.c()),
            d: row_major(sys.d()),
        }
    }

    /// `x <- x + (Ax + B1u + B2v) dt + (Cx + Du) dw`.
    fn step(&self, x: &mut [f64], u: &[f64], v: &[f64], dt: f64, dw: f64, scratch: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let mut drift = 0.0;
            let mut diff = 0.0;
            for j in 0..n {
                drift += self.a[i * n + j] * x[j];
                diff += self.c[i * n + j] * x[j];
            }
            for k in 0..self.m1 {
                drift += self.b1[i * self.m1 + k] * u[k];
                diff += self.d[i * self.m1 + k] * u[k];
            }
            for k in 0..self.m2 {
                drift += self.b2[i * self.m2 + k] * v[k];
            }
            scratch[i] = drift * dt + diff * dw;
        }
        for i in 0..n {
            x[i] += scratch[i];
        }
    }
}

fn mat_vec(m: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = (0..cols).map(|j| m[i * cols + j] * x[j]).sum();
    }
}

fn norm(x: &[f64]) -> f64 {
    libm::sqrt(x.iter().map(|v| v * v).sum())
}

/// One Euler-Maruyama step `x + (Ax+B1u+B2v)dt + (Cx+Du)dW`.
pub fn em_step(
    x: &DVector<f64>,
    u: &DVector<f64>,
    v: &DVector<f64>,
    dt: f64,
    dw: f64,
    sys: &SystemModel,
) -> Result<DVector<f64>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    if x.len() != sys.n() || u.len() != sys.m1() || v.len() != sys.m2() {
        return Err(Error::Dimension("em_step operand sizes".into()));
    }
    let drift = sys.a() * x + sys.b1() * u + sys.b2() * v;
    let diffusion = sys.c() * x + sys.d() * u;
    Ok(x + drift * dt + diffusion * dw)
}

/// Random stream of path `path` under root seed `seed`.
pub fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

pub fn block_count(paths: usize) -> usize {
    paths.div_ceil(PATH_BLOCK)
}

fn block_range(block: usize, paths: usize) -> core::ops::Range<usize> {
    let start = block * PATH_BLOCK;
    start.min(paths)..(start + PATH_BLOCK).min(paths)
}

/// Unnormalized moment sums over a set of paths, flat row-major per block.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSums {
    dims: (usize, usize, usize),
    intervals: usize,
    paths: usize,
    endpoint: Vec<f64>,
    uu: Vec<f64>,
    xx: Vec<f64>,
    xu: Vec<f64>,
    xv: Vec<f64>,
}

impl MomentSums {
    pub fn new(dims: (usize, usize, usize), intervals: usize) -> Self {
        let (n, m1, m2) = dims;
        Self {
            dims,
            intervals,
            paths: 0,
            endpoint: vec![0.0; (intervals + 1) * sym_len(n)],
            uu: vec![0.0; intervals * sym_len(m1)],
            xx: vec![0.0; intervals * n * n],
            xu: vec![0.0; intervals * n * m1],
            xv: vec![0.0; intervals * n * m2],
        }
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    /// Adds `other` entrywise; merge order determines the rounding.
    pub fn merge(&mut self, other: &MomentSums) -> Result<()> {
        if self.dims != other.dims || self.intervals != other.intervals {
            return Err(Error::Dimension("moment sums of different shape".into()));
        }
        self.paths += other.paths;
        for (dst, src) in [
            (&mut self.endpoint, &other.endpoint),
            (&mut self.uu, &other.uu),
            (&mut self.xx, &other.xx),
            (&mut self.xu, &other.xu),
            (&mut self.xv, &other.xv),
        ] {
            for (a, b) in dst.iter_mut().zip(src.iter()) {
                *a += *b;
            }
        }
        Ok(())
    }

    /// Divides by the path count.
    pub fn into_moments(self) -> Result<DataMoments> {
        if self.paths == 0 {
            return Err(Error::InvalidInput("no paths accumulated".into()));
        }
        let (n, m1, m2) = self.dims;
        let big_n = self.intervals;
        let h = self.paths as f64;
        let to = |rows: usize, cols: usize, data: &[f64]| DMatrix::from_row_slice(rows, cols, data) / h;
        DataMoments::new(
            self.dims,
            to(big_n + 1, sym_len(n), &self.endpoint),
            to(big_n, sym_len(m1), &self.uu),
            to(big_n, n * n, &self.xx),
            to(big_n, n * m1, &self.xu),
            to(big_n, n * m2, &self.xv),
        )
    }
}

fn add_xbar(x: &[f64], out: &mut [f64]) {
    let mut k = 0;
    for i in 0..x.len() {
        for j in i..x.len() {
            out[k] += x[i] * x[j];
            k += 1;
        }
    }
}

fn draw_normals(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

/// Simulates the paths of block `block` under `(u, v) = (Lu x + e_u, e_v)`
/// and returns their moment sums.
///
/// Per Euler step a path draws `xi_u` (m1 normals), `xi_v` (m2 normals), then
/// the Brownian increment, in that order.
pub fn accumulate_block(
    sys: &SystemModel,
    behavior_lu: &DMatrix<f64>,
    sim: &SimConfig,
    block: usize,
) -> Result<MomentSums> {
    let plant = Plant::new(sys);
    let (n, m1, m2) = (plant.n, plant.m1, plant.m2);
    let lu = row_major(behavior_lu);
    let su = row_major(&sim.exploration.u_noise);
    let sv = row_major(&sim.exploration.v_noise);
    let (amp, freq) = (sim.exploration.amplitude, sim.exploration.frequency);
    let big_n = sim.intervals;
    let g_steps = sim.substeps;
    let dt = sim.dt();
    let sqrt_dt = libm::sqrt(dt);
    let (sn, s1) = (sym_len(n), sym_len(m1));

    let mut sums = MomentSums::new((n, m1, m2), big_n);
    let mut x = vec![0.0; n];
    let mut u = vec![0.0; m1];
    let mut v = vec![0.0; m2];
    let mut xi_u = vec![0.0; m1];
    let mut xi_v = vec![0.0; m2];
    let mut noise_u = vec![0.0; m1];
    let mut noise_v = vec![0.0; m2];
    let mut scratch = vec![0.0; n];

    for path in block_range(block, sim.paths) {
        let mut rng = path_rng(sim.seed, path);
        x.copy_from_slice(sim.x0.as_slice());
        add_xbar(&x, &mut sums.endpoint[0..sn]);
        for i in 0..big_n {
            let xx = &mut sums.xx[i * n * n..(i + 1) * n * n];
            let xu = &mut sums.xu[i * n * m1..(i + 1) * n * m1];
            let xv = &mut sums.xv[i * n * m2..(i + 1) * n * m2];
            let uu = &mut sums.uu[i * s1..(i + 1) * s1];
            for g in 0..g_steps {
                let t = (i * g_steps + g) as f64 * dt;
                draw_normals(&mut rng, &mut xi_u);
                draw_normals(&mut rng, &mut xi_v);
                let dw = sqrt_dt * rng.sample::<f64, _>(StandardNormal);
                mat_vec(&su, m1, &xi_u, &mut noise_u);
                mat_vec(&sv, m2, &xi_v, &mut noise_v);
                let s = amp * libm::sin(freq * t);
                let c = amp * libm::cos(freq * t);
                mat_vec(&lu, n, &x, &mut u);
                for k in 0..m1 {
                    u[k] += s + noise_u[k];
                }
                for k in 0..m2 {
                    v[k] = c + noise_v[k];
                }

                for a in 0..n {
                    let xa = x[a] * dt;
                    for b in 0..n {
                        xx[a * n + b] += xa * x[b];
                    }
                    for k in 0..m1 {
                        xu[a * m1 + k] += xa * u[k];
                    }
                    for k in 0..m2 {
                        xv[a * m2 + k] += xa * v[k];
                    }
                }
                let mut q = 0;
                for k in 0..m1 {
                    for l in k..m1 {
                        uu[q] += u[k] * u[l] * dt;
                        q += 1;
                    }
                }

                plant.step(&mut x, &u, &v, dt, dw, &mut scratch);
                let size = norm(&x);
                if !(size <= BLOWUP_NORM) {
                    return Err(Error::Destabilized {
                        path,
                        time: t + dt,
                        norm: size,
                    });
                }
            }
            add_xbar(&x, &mut sums.endpoint[(i + 1) * sn..(i + 2) * sn]);
        }
        sums.paths += 1;
    }
    Ok(sums)
}

/// Checks the preconditions of data collection.
pub fn check_collection(sys: &SystemModel, behavior_lu: &DMatrix<f64>, sim: &SimConfig) -> Result<()> {
    let (n, m1, m2) = (sys.n(), sys.m1(), sys.m2());
    sim.validate(n, m1, m2)?;
    let p = regression_unknowns(n, m1, m2);
    if sim.intervals < p {
        return Err(Error::InvalidInput(format!(
            "{} sampling intervals cannot identify {p} unknowns",
            sim.intervals
        )));
    }
    let behavior = Gains::new(behavior_lu.clone(), DMatrix::zeros(m2, n));
    behavior.check(n, m1, m2)?;
    let check = game::is_stabilizer(&behavior, sys)?;
    if !check.stable {
        return Err(Error::NotStabilizing {
            abscissa: check.abscissa,
        });
    }
    Ok(())
}

/// Collects the data moments once, serially.
pub fn collect_behavior_data(
    sys: &SystemModel,
    behavior_lu: &DMatrix<f64>,
    sim: &SimConfig,
) -> Result<DataMoments> {
    check_collection(sys, behavior_lu, sim)?;
    let mut total = MomentSums::new((sys.n(), sys.m1(), sys.m2()), sim.intervals);
    for block in 0..block_count(sim.paths) {
        total.merge(&accumulate_block(sys, behavior_lu, sim, block)?)?;
    }
    total.into_moments()
}

/// Monte Carlo mean of `||X||^2` on the Euler grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopStats {
    pub times: Vec<f64>,
    pub mean_square: Vec<f64>,
}

impl ClosedLoopStats {
    pub fn final_mean_square(&self) -> f64 {
        *self.mean_square.last().expect("at least one grid point")
    }
}

/// Unnormalized `sum ||X(t)||^2` over the paths of one block under
/// `u = Lu x`, `v = Lv x` with no exploration.
pub fn closed_loop_block(
    sys: &SystemModel,
    gains: &Gains,
    sim: &SimConfig,
    block: usize,
) -> Result<Vec<f64>> {
    let plant = Plant::new(sys);
    let (n, m1, m2) = (plant.n, plant.m1, plant.m2);
    gains.check(n, m1, m2)?;
    let lu = row_major(&gains.lu);
    let lv = row_major(&gains.lv);
    let steps = sim.intervals * sim.substeps;
    let dt = sim.dt();
    let sqrt_dt = libm::sqrt(dt);
    let mut out = vec![0.0; steps + 1];
    let mut x = vec![0.0; n];
    let mut u = vec![0.0; m1];
    let mut v = vec![0.0; m2];
    let mut scratch = vec![0.0; n];
    for path in block_range(block, sim.paths) {
        let mut rng = path_rng(sim.seed, path);
        x.copy_from_slice(sim.x0.as_slice());
        out[0] += x.iter().map(|e| e * e).sum::<f64>();
        for s in 0..steps {
            let dw = sqrt_dt * rng.sample::<f64, _>(StandardNormal);
            mat_vec(&lu, n, &x, &mut u);
            mat_vec(&lv, n, &x, &mut v);
            plant.step(&mut x, &u, &v, dt, dw, &mut scratch);
            out[s + 1] += x.iter().map(|e| e * e).sum::<f64>();
        }
    }
    Ok(out)
}

/// Normalizes per-block sums merged in block order.
pub fn closed_loop_stats(sim: &SimConfig, total: &[f64]) -> ClosedLoopStats {
    let dt = sim.dt();
    let h = sim.paths as f64;
    ClosedLoopStats {
        times: (0..total.len()).map(|s| s as f64 * dt).collect(),
        mean_square: total.iter().map(|v| v / h).collect(),
    }
}

/// Mean-square trajectory of the closed loop. Divergence shows up as growth
/// (or non-finite values) rather than an error.
pub fn simulate_closed_loop(sys: &SystemModel, gains: &Gains, sim: &SimConfig) -> Result<ClosedLoopStats> {
    sim.validate(sys.n(), sys.m1(), sys.m2())?;
    let mut total = vec![0.0; sim.intervals * sim.substeps + 1];
    for block in 0..block_count(sim.paths) {
        let part = closed_loop_block(sys, gains, sim, block)?;
        for (a, b) in total.iter_mut().zip(part.iter()) {
            *a += *b;
        }
    }
    Ok(closed_loop_stats(sim, &total))
}

/// Deterministic excitation `t -> (e_u(t), e_v(t))` for [`expected_moments`].
pub type Excitation<'a> = &'a dyn Fn(f64) -> (DVector<f64>, DVector<f64>);

/// Setup for computing the data moments exactly from the model.
pub struct MomentOracle<'a> {
    pub horizon: f64,
    pub intervals: usize,
    /// RK4 steps per interval.
    pub steps: usize,
    /// `E x(0)`.
    pub mean0: DVector<f64>,
    /// `E x(0) x(0)'`.
    pub second0: DMatrix<f64>,
    pub excitation: Excitation<'a>,
}

struct MomentState {
    m: DVector<f64>,
    s: DMatrix<f64>,
    ixx: DMatrix<f64>,
    ixu: DMatrix<f64>,
    ixv: DMatrix<f64>,
    iuu: DMatrix<f64>,
}

impl MomentState {
    fn axpy(&self, h: f64, d: &MomentState) -> MomentState {
        MomentState {
            m: &self.m + &d.m * h,
            s: &self.s + &d.s * h,
            ixx: &self.ixx + &d.ixx * h,
            ixu: &self.ixu + &d.ixu * h,
            ixv: &self.ixv + &d.ixv * h,
            iuu: &self.iuu + &d.iuu * h,
        }
    }
}

/// Exact path moments under `(u, v) = (Lu x + e_u, e_v)` with deterministic
/// excitation, from the linear ODEs for `E x` and `E xx'` integrated by RK4.
pub fn expected_moments(
    sys: &SystemModel,
    behavior_lu: &DMatrix<f64>,
    oracle: &MomentOracle<'_>,
) -> Result<DataMoments> {
    let (n, m1, m2) = (sys.n(), sys.m1(), sys.m2());
    if oracle.intervals == 0 || oracle.steps == 0 || !(oracle.horizon > 0.0) {
        return Err(Error::InvalidInput("oracle grid must be non-empty".into()));
    }
    if oracle.mean0.len() != n || oracle.second0.shape() != (n, n) {
        return Err(Error::Dimension("oracle initial moments".into()));
    }
    if behavior_lu.shape() != (m1, n) {
        return Err(Error::Dimension("behavior gain".into()));
    }
    let ac = sys.a() + sys.b1() * behavior_lu;
    let cc = sys.c() + sys.d() * behavior_lu;
    let lu = behavior_lu;

    let deriv = |t: f64, st: &MomentState| -> MomentState {
        let (eu, ev) = (oracle.excitation)(t);
        let f = sys.b1() * &eu + sys.b2() * &ev;
        let g = sys.d() * &eu;
        let cm = &cc * &st.m;
        let ds = &ac * &st.s + &st.s * ac.transpose()
            + &st.m * f.transpose()
            + &f * st.m.transpose()
            + &cc * &st.s * cc.transpose()
            + &cm * g.transpose()
            + &g * cm.transpose()
            + &g * g.transpose();
        let lum = lu * &st.m;
        MomentState {
            m: &ac * &st.m + &f,
            s: ds,
            ixx: st.s.clone(),
            ixu: &st.s * lu.transpose() + &st.m * eu.transpose(),
            ixv: &st.m * ev.transpose(),
            iuu: lu * &st.s * lu.transpose()
                + &lum * eu.transpose()
                + &eu * lum.transpose()
                + &eu * eu.transpose(),
        }
    };

    let big_n = oracle.intervals;
    let h = oracle.horizon / (big_n * oracle.steps) as f64;
    let mut endpoint = DMatrix::zeros(big_n + 1, sym_len(n));
    let mut duu = DMatrix::zeros(big_n, sym_len(m1));
    let mut ixx = DMatrix::zeros(big_n, n * n);
    let mut ixu = DMatrix::zeros(big_n, n * m1);
    let mut ixv = DMatrix::zeros(big_n, n * m2);

    let upper = |m: &DMatrix<f64>, out: &mut DMatrix<f64>, row: usize| {
        let mut k = 0;
        for i in 0..m.nrows() {
            for j in i..m.ncols() {
                out[(row, k)] = m[(i, j)];
                k += 1;
            }
        }
    };
    let flat = |m: &DMatrix<f64>, out: &mut DMatrix<f64>, row: usize| {
        let cols = m.ncols();
        for i in 0..m.nrows() {
            for j in 0..cols {
                out[(row, i * cols + j)] = m[(i, j)];
            }
        }
    };

    let mut st = MomentState {
        m: oracle.mean0.clone(),
        s: crate::matops::symmetrize(&oracle.second0),
        ixx: DMatrix::zeros(n, n),
        ixu: DMatrix::zeros(n, m1),
        ixv: DMatrix::zeros(n, m2),
        iuu: DMatrix::zeros(m1, m1),
    };
    upper(&st.s, &mut endpoint, 0);
    for i in 0..big_n {
        st.ixx.fill(0.0);
        st.ixu.fill(0.0);
        st.ixv.fill(0.0);
        st.iuu.fill(0.0);
        for g in 0..oracle.steps {
            let t = (i * oracle.steps + g) as f64 * h;
            let k1 = deriv(t, &st);
            let k2 = deriv(t + 0.5 * h, &st.axpy(0.5 * h, &k1));
            let k3 = deriv(t + 0.5 * h, &st.axpy(0.5 * h, &k2));
            let k4 = deriv(t + h, &st.axpy(h, &k3));
            let sum = k1.axpy(2.0, &k2).axpy(2.0, &k3).axpy(1.0, &k4);
            st = st.axpy(h / 6.0, &sum);
            st.s = crate::matops::symmetrize(&st.s);
        }
        upper(&st.s, &mut endpoint, i + 1);
        upper(&st.iuu, &mut duu, i);
        flat(&st.ixx, &mut ixx, i);
        flat(&st.ixu, &mut ixu, i);
        flat(&st.ixv, &mut ixv, i);
    }
    DataMoments::new((n, m1, m2), endpoint, duu, ixx, ixu, ixv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems;
    use alloc::vec;
    use nalgebra::{dmatrix, dvector};

    fn small_sim(x0: DVector<f64>, exploration: ExplorationSignal) -> SimConfig {
        SimConfig {
            horizon: 2.0,
            intervals: 8,
            substeps: 50,
            paths: 200,
            x0,
            seed: 7,
            exploration,
        }
    }

    #[test]
    fn em_step_examples() {
        let ex = problems::example_1();
        let z = DVector::zeros(2);
        let out = em_step(&z, &dvector![0.0], &dvector![0.0], 0.1, 0.3, &ex.system).unwrap();
        assert_eq!(out, z);

        let drift_only = SystemModel::new(
            dmatrix![0.0],
            dmatrix![1.0],
            dmatrix![0.0],
            dmatrix![0.0],
            dmatrix![0.0],
        )
        .unwrap();
        let out = em_step(&dvector![0.0], &dvector![1.0], &dvector![0.0], 0.1, 0.0, &drift_only).unwrap();
        assert!((out[0] - 0.1).abs() < 1e-15);

        let x = dvector![0.5, -1.0];
        let (u, v) = (dvector![0.2], dvector![-0.3]);
        let (dt, dw) = (0.01, 0.07);
        let s = &ex.system;
        let out = em_step(&x, &u, &v, dt, dw, s).unwrap();
        for i in 0..2 {
            let drift = s.a()[(i, 0)] * x[0] + s.a()[(i, 1)] * x[1] + s.b1()[(i, 0)] * u[0] + s.b2()[(i, 0)] * v[0];
            let diff = s.c()[(i, 0)] * x[0] + s.c()[(i, 1)] * x[1] + s.d()[(i, 0)] * u[0];
            assert!((out[i] - (x[i] + drift * dt + diff * dw)).abs() < 1e-15);
        }
        assert!(em_step(&x, &u, &v, 0.0, dw, s).is_err());
    }

    #[test]
    fn deterministic_flow_matches_closed_form() {
        let sys = SystemModel::new(
            dmatrix![-1.0, 0.5; 0.0, -2.0],
            dmatrix![1.0; 0.0],
            dmatrix![0.0; 1.0],
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 1),
        )
        .unwrap();
        let lu = dmatrix![0.0, 0.0];
        let x0 = dvector![1.0, -1.0];
        let mut sim = small_sim(x0.clone(), ExplorationSignal::silent(1, 1));
        sim.intervals = 3;
        sim.substeps = 2000;
        sim.paths = 3;
        let data = {
            let mut total = MomentSums::new((2, 1, 1), sim.intervals);
            total.merge(&accumulate_block(&sys, &lu, &sim, 0).unwrap()).unwrap();
            total.into_moments().unwrap()
        };
        let flow = |t: f64| {
            let (e1, e2) = (libm::exp(-t), libm::exp(-2.0 * t));
            dvector![e1 * x0[0] + 0.5 * x0[1] * (e1 - e2), e2 * x0[1]]
        };
        let width = sim.horizon / sim.intervals as f64;
        for i in 0..sim.intervals {
            let a = flow(i as f64 * width);
            let b = flow((i + 1) as f64 * width);
            let exact = crate::matops::xbar(b.as_slice()) - crate::matops::xbar(a.as_slice());
            for k in 0..3 {
                assert!((data.delta_xx()[(i, k)] - exact[k]).abs() < 1e-3);
            }
        }
        assert!(data.delta_uu().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn collection_is_reproducible_and_consistent() {
        let ex = problems::example_1();
        let explore = ExplorationSignal::default_for(&ex.cost, 1).unwrap();
        let sim = small_sim(ex.x0.clone(), explore);
        let a = collect_behavior_data(&ex.system, &ex.initial_lu, &sim).unwrap();
        let b = collect_behavior_data(&ex.system, &ex.initial_lu, &sim).unwrap();
        assert_eq!(a, b);
        let ends = a.endpoint_means();
        for i in 0..a.intervals() {
            for k in 0..3 {
                assert_eq!(a.delta_xx()[(i, k)], ends[(i + 1, k)] - ends[(i, k)]);
            }
            let ixx = a.i_xx_matrix(i);
            assert!(crate::matops::asymmetry(&ixx) < 1e-14);
            assert!(crate::matops::min_sym_eigenvalue(&ixx) > 0.0);
        }

        let mut other = sim.clone();
        other.seed = 8;
        let c = collect_behavior_data(&ex.system, &ex.initial_lu, &other).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn block_merge_order_is_the_reduction_order() {
        let ex = problems::example_1();
        let explore = ExplorationSignal::default_for(&ex.cost, 1).unwrap();
        let mut sim = small_sim(ex.x0.clone(), explore);
        sim.paths = 2 * PATH_BLOCK + 5;
        let serial = collect_behavior_data(&ex.system, &ex.initial_lu, &sim).unwrap();
        let blocks: Vec<_> = (0..block_count(sim.paths))
            .map(|b| accumulate_block(&ex.system, &ex.initial_lu, &sim, b).unwrap())
            .collect();
        let mut total = MomentSums::new((2, 1, 1), sim.intervals);
        for b in &blocks {
            total.merge(b).unwrap();
        }
        assert_eq!(total.paths(), sim.paths);
        assert_eq!(total.into_moments().unwrap(), serial);
    }

    #[test]
    fn zero_input_gives_zero_delta_uu() {
        let ex = problems::example_1();
        let mut explore = ExplorationSignal::silent(1, 1);
        explore.v_noise = dmatrix![0.2];
        let sim = small_sim(ex.x0.clone(), explore);
        let data = collect_behavior_data(&ex.system, &dmatrix![0.0, 0.0], &sim).unwrap();
        assert!(data.delta_uu().iter().all(|&v| v == 0.0));
        assert!(data.i_xu().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn collection_rejects_bad_setup() {
        let ex = problems::example_1();
        let explore = ExplorationSignal::default_for(&ex.cost, 1).unwrap();
        let mut sim = small_sim(ex.x0.clone(), explore);
        sim.intervals = 7;
        assert!(matches!(
            collect_behavior_data(&ex.system, &ex.initial_lu, &sim),
            Err(Error::InvalidInput(_))
        ));
        sim.intervals = 8;
        sim.x0 = dvector![1.0];
        assert!(matches!(
            collect_behavior_data(&ex.system, &ex.initial_lu, &sim),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn blow_up_is_reported() {
        let sys = SystemModel::new(
            dmatrix![5.0],
            dmatrix![1.0],
            dmatrix![1.0],
            dmatrix![0.0],
            dmatrix![0.0],
        )
        .unwrap();
        let sim = SimConfig {
            horizon: 10.0,
            intervals: 4,
            substeps: 100,
            paths: 2,
            x0: dvector![1.0],
            seed: 1,
            exploration: ExplorationSignal::silent(1, 1),
        };
        // The block kernel itself does not check stability.
        let err = accumulate_block(&sys, &dmatrix![0.0], &sim, 0).unwrap_err();
        assert!(matches!(err, Error::Destabilized { path: 0, .. }));
    }

    #[test]
    fn closed_loop_statistics() {
        let zero = SystemModel::new(
            DMatrix::zeros(2, 2),
            dmatrix![1.0; 0.0],
            dmatrix![0.0; 1.0],
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 1),
        )
        .unwrap();
        let sim = small_sim(dvector![2.0, 3.0], ExplorationSignal::silent(1, 1));
        let stats = simulate_closed_loop(&zero, &Gains::zeros(2, 1, 1), &sim).unwrap();
        assert!(stats.mean_square.iter().all(|&v| (v - 13.0).abs() < 1e-12));
        assert_eq!(stats.times.len(), 8 * 50 + 1);

        let ex = problems::example_2();
        let gains = Gains::new(dmatrix![0.0, 0.0, 0.0, 0.0], dmatrix![0.0, 0.0, 0.0, 2.0]);
        assert!(!game::is_stabilizer(&gains, &ex.system).unwrap().stable);
        let mut sim = small_sim(ex.x0.clone(), ExplorationSignal::silent(1, 1));
        sim.horizon = 10.0;
        let stats = simulate_closed_loop(&ex.system, &gains, &sim).unwrap();
        assert!(stats.final_mean_square() > 10.0 * stats.mean_square[0]);

        // Saddle controller on example 1 with the disturbance channel idle.
        let ex = problems::example_1();
        let p = crate::exact_pi::run_model_based_pi(
            &ex.system,
            &ex.cost,
            &crate::exact_pi::PiConfig::new(ex.initial_lu.clone()),
        )
        .unwrap();
        let controller = Gains::new(p.final_gains.lu, DMatrix::zeros(1, 2));
        let mut sim = small_sim(ex.x0.clone(), ExplorationSignal::silent(1, 1));
        sim.paths = 2000;
        let stats = simulate_closed_loop(&ex.system, &controller, &sim).unwrap();
        assert!(stats.final_mean_square() < 0.05 * 13.0);
    }

    #[test]
    fn oracle_moments_track_monte_carlo() {
        let ex = problems::example_1();
        let excitation = |t: f64| {
            (
                dvector![0.1 * libm::sin(10.0 * t)],
                dvector![0.1 * libm::cos(10.0 * t)],
            )
        };
        let oracle = MomentOracle {
            horizon: 2.0,
            intervals: 8,
            steps: 200,
            mean0: ex.x0.clone(),
            second0: &ex.x0 * ex.x0.transpose(),
            excitation: &excitation,
        };
        let fine = expected_moments(&ex.system, &ex.initial_lu, &oracle).unwrap();
        let coarse = expected_moments(
            &ex.system,
            &ex.initial_lu,
            &MomentOracle { steps: 100, ..oracle },
        )
        .unwrap();
        assert!((fine.i_xx() - coarse.i_xx()).norm() < 1e-9);
        assert!((fine.delta_xx() - coarse.delta_xx()).norm() < 1e-9);

        let mut explore = ExplorationSignal::silent(1, 1);
        explore.amplitude = 0.1;
        explore.frequency = 10.0;
        let sim = SimConfig {
            horizon: 2.0,
            intervals: 8,
            substeps: 200,
            paths: 4000,
            x0: ex.x0.clone(),
            seed: 3,
            exploration: explore,
        };
        let mc = collect_behavior_data(&ex.system, &ex.initial_lu, &sim).unwrap();
        let rel = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a - b).norm() / b.norm();
        assert!(rel(mc.i_xx(), fine.i_xx()) < 0.02);
        assert!(rel(mc.i_xu(), fine.i_xu()) < 0.02);
        assert!(rel(mc.i_xv(), fine.i_xv()) < 0.05);
        assert!(rel(mc.delta_uu(), fine.delta_uu()) < 0.02);
        assert!(rel(mc.delta_xx(), fine.delta_xx()) < 0.05);
    }
}
