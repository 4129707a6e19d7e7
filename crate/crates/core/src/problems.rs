//! The two benchmark games: a 2-state randomly generated system and a
//! two-mass spring with multiplicative noise.

use alloc::vec;
use nalgebra::{dmatrix, dvector, DMatrix, DVector};

use crate::game::{CostSpec, SystemModel};

/// A benchmark game together with the data-collection settings used for it.
#[derive(Debug, Clone)]
pub struct Problem {
    pub name: &'static str,
    pub system: SystemModel,
    pub cost: CostSpec,
    /// Stabilizing control gain used both as the behavior policy and to
    /// restart every inner loop.
    pub initial_lu: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub horizon: f64,
    pub intervals: usize,
}

pub fn example_1() -> Problem {
    let system = SystemModel::new(
        dmatrix![-1.2115, 0.7141; 0.8597, -1.0757],
        dmatrix![0.6052; 0.6433],
        dmatrix![0.3281; 0.8746],
        dmatrix![0.0743, 0.0545; 0.0935, 0.0397],
        dmatrix![0.0774; 0.0118],
    )
    .expect("example 1 dimensions");
    let cost = CostSpec::new(DMatrix::identity(2, 2) * 0.2, dmatrix![0.24], 0.5)
        .expect("example 1 weights");
    Problem {
        name: "example_1",
        system,
        cost,
        initial_lu: dmatrix![-1.0, -1.0],
        x0: dvector![2.0, 3.0],
        horizon: 2.0,
        intervals: 8,
    }
}

pub fn example_2() -> Problem {
    let system = SystemModel::new(
        dmatrix![
            0.0, 0.0, 1.0, 0.0;
            0.0, 0.0, 0.0, 1.0;
            -1.25, 1.25, 0.0, 0.0;
            1.25, -1.25, 0.0, 0.0
        ],
        dmatrix![0.0; 0.0; 0.0; 1.0],
        dmatrix![0.0; 0.0; 1.0; 0.0],
        dmatrix![
            0.0, 0.0, 0.0, 0.0;
            0.0, 0.0, 0.0, 0.0;
            -0.25, 0.25, 0.0, 0.0;
            0.25, -0.25, 0.0, 0.0
        ],
        dmatrix![0.0; 0.0; 0.0; 0.2],
    )
    .expect("example 2 dimensions");
    let cost = CostSpec::new(
        DMatrix::from_diagonal(&dvector![1.0, 1.0, 0.0, 0.0]),
        dmatrix![1.0],
        2.0,
    )
    .expect("example 2 weights");
    Problem {
        name: "example_2",
        system,
        cost,
        initial_lu: dmatrix![1.0, -5.0, -5.0, -4.0],
        x0: dvector![1.0, -1.0, 0.5, -0.5],
        horizon: 10.0,
        intervals: 40,
    }
}

/// Stabilizing solution of the 2-state game, rounded to four decimals.
pub fn example_1_reference_p() -> DMatrix<f64> {
    dmatrix![0.1473, 0.1041; 0.1041, 0.1661]
}

/// Stabilizing solution of the spring game, rounded to four decimals.
pub fn example_2_reference_p() -> DMatrix<f64> {
    dmatrix![
        3.4025, -3.1333, -1.4814, -1.4601;
        -3.1333, 9.9070, 8.3560, 5.5014;
        -1.4814, 8.3560, 10.0285, 5.1207;
        -1.4601, 5.5014, 5.1207, 4.5561
    ]
}
