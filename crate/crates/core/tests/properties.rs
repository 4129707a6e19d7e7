use hinf_core::exact_pi::{self, PiConfig};
use hinf_core::game::{self, CostSpec, SystemModel, ValueMatrix};
use hinf_core::matops::{self, LyapunovOperands};
use hinf_core::problems;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-scale..scale, rows * cols)
        .prop_map(move |v| DMatrix::from_column_slice(rows, cols, &v))
}

fn symmetric(n: usize, scale: f64) -> impl Strategy<Value = DMatrix<f64>> {
    matrix(n, n, scale).prop_map(|m| (&m + m.transpose()) * 0.5)
}

/// `(X, Z, W)` with `X'+X+Z'Z` negative definite, which makes the pair
/// mean-square stable.
fn stable_instance() -> impl Strategy<Value = (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    (1usize..=5).prop_flat_map(|n| {
        (matrix(n, n, 2.0), matrix(n, n, 0.8), symmetric(n, 3.0)).prop_map(|(g, z, w)| {
            let n = g.nrows();
            let sym = &g + g.transpose();
            let lmax = sym.symmetric_eigenvalues().max();
            let znorm = z.clone().svd(false, false).singular_values.max();
            let shift = 0.5 * (lmax + znorm * znorm) + 0.5;
            let x = g - DMatrix::identity(n, n) * shift;
            (x, z, w)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn svec_smat_round_trip(p in (1usize..=6).prop_flat_map(|n| symmetric(n, 10.0))) {
        let v = matops::svec(&p).unwrap();
        prop_assert_eq!(v.entries().len(), p.nrows() * (p.nrows() + 1) / 2);
        prop_assert_eq!(matops::smat(&v), p.clone());
        let t = matops::duplication(p.nrows());
        prop_assert!((t * v.entries() - matops::vec(&p)).norm() < 1e-12);
    }

    #[test]
    fn xbar_inner_product_is_quadratic_form(
        (p, x) in (1usize..=5).prop_flat_map(|n| (symmetric(n, 3.0), prop::collection::vec(-3.0..3.0f64, n)))
    ) {
        let v = matops::svec(&p).unwrap();
        let xv = nalgebra::DVector::from_vec(x.clone());
        let direct = (xv.transpose() * &p * &xv)[(0, 0)];
        prop_assert!((matops::xbar(&x).dot(v.entries()) - direct).abs() < 1e-10 * (1.0 + direct.abs()));
    }

    #[test]
    fn stable_lyapunov_instances((x, z, w) in stable_instance()) {
        prop_assert!(matops::ms_spectral_abscissa(&x, &z).unwrap() < 0.0);
        let ops = LyapunovOperands::new(x, z, &w).unwrap();
        let y = matops::solve_stochastic_lyapunov(&ops).unwrap();
        prop_assert!(ops.residual(&y) <= 1e-9 * (1.0 + w.norm()));
        let full = matops::solve_stochastic_lyapunov_full(&ops).unwrap();
        prop_assert!((&y - &full).amax() <= 1e-10 * (1.0 + full.amax()));
    }

    #[test]
    fn ms_abscissa_without_noise_doubles_abscissa(x in (1usize..=5).prop_flat_map(|n| matrix(n, n, 2.0))) {
        let n = x.nrows();
        let ms = matops::ms_spectral_abscissa(&x, &DMatrix::zeros(n, n)).unwrap();
        let plain = matops::spectral_abscissa(&x);
        prop_assert!((ms - 2.0 * plain).abs() < 1e-8 * (1.0 + plain.abs()));
    }

    #[test]
    fn block_matrix_is_affine_in_p(a in symmetric(2, 1.0), b in symmetric(2, 1.0), s in -2.0..2.0f64) {
        let ex = problems::example_1();
        let m = |p: &DMatrix<f64>| {
            game::assemble_m(&ValueMatrix::new(p.clone()).unwrap(), &ex.system, &ex.cost)
                .unwrap()
                .matrix()
                .clone()
        };
        let m0 = m(&DMatrix::zeros(2, 2));
        let lhs = m(&(&a + &b * s)) - &m0;
        let rhs = (m(&a) - &m0) + (m(&b) - &m0) * s;
        prop_assert!((lhs - rhs).norm() < 1e-12);
    }

    #[test]
    fn hamiltonian_at_saddle_gains_is_gare_residual(p in symmetric(2, 0.3)) {
        let ex = problems::example_1();
        let p = ValueMatrix::new(p + DMatrix::identity(2, 2) * 0.3).unwrap();
        let gains = game::saddle_gains(&p, &ex.system, &ex.cost).unwrap();
        let m = game::assemble_m(&p, &ex.system, &ex.cost).unwrap();
        let h = m.hamiltonian(&gains.lu, &gains.lv).unwrap();
        let r = game::gare_residual(&p, &ex.system, &ex.cost).unwrap();
        prop_assert!((h - r).norm() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn gain_quadratic_map_matches_kronecker(
        (l, p) in (1usize..=3, 1usize..=4).prop_flat_map(|(m, n)| (matrix(m, n, 2.0), symmetric(n, 2.0)))
    ) {
        let lbar = matops::gain_quadratic_map(&l);
        let svec = matops::svec(&p).unwrap();
        let via_map = lbar * svec.entries();
        let via_kron = matops::kron(&l, &l) * matops::vec(&p);
        prop_assert!((via_map - via_kron).amax() <= 1e-12 * (1.0 + l.amax() * l.amax() * p.amax()));
    }
}

fn loewner_le(a: &DMatrix<f64>, b: &DMatrix<f64>, slack: f64) -> bool {
    matops::min_sym_eigenvalue(&(b - a)) >= -slack
}

/// Value iterates are non-increasing inside each inner loop and the inner
/// limits are non-decreasing across outer iterations.
fn check_monotone(sys: &SystemModel, cost: &CostSpec, lu: DMatrix<f64>) {
    let trace = exact_pi::run_model_based_pi(sys, cost, &PiConfig::new(lu)).unwrap();
    for k in 0..trace.outer_iterations() {
        let inner: Vec<_> = trace.inner_loop(k).collect();
        for w in inner.windows(2) {
            assert!(loewner_le(&w[1].p, &w[0].p, 1e-8), "inner step at k={k}, j={}", w[1].inner);
        }
    }
    for w in trace.outer_records.windows(2) {
        assert!(loewner_le(&w[0].p, &w[1].p, 1e-8), "outer step at k={}", w[1].outer);
    }
}

#[test]
fn monotone_iterates_on_both_examples() {
    for ex in [problems::example_1(), problems::example_2()] {
        check_monotone(&ex.system, &ex.cost, ex.initial_lu.clone());
    }
}

#[test]
fn pipeline_is_generic_in_dimension() {
    // Scalar game with multiplicative noise solved by iteration and checked
    // against the Riccati residual.
    let sys = SystemModel::new(
        DMatrix::from_element(1, 1, -0.5),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 0.5),
        DMatrix::from_element(1, 1, 0.2),
        DMatrix::from_element(1, 1, 0.1),
    )
    .unwrap();
    let cost = CostSpec::new(DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0), 2.0).unwrap();
    let trace = exact_pi::run_model_based_pi(&sys, &cost, &PiConfig::new(DMatrix::zeros(1, 1))).unwrap();
    let r = game::gare_residual(&ValueMatrix::new(trace.final_p).unwrap(), &sys, &cost).unwrap();
    assert!(r.norm() < 1e-6);
}
