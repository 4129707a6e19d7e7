//! Multi-threaded Monte Carlo. Blocks of paths run on the rayon pool and are
//! merged in block order, so results are bit-identical to the serial
//! functions in `hinf_core::simulate`.

use hinf_core::game::{Gains, SystemModel};
use hinf_core::simulate::{
    self, accumulate_block, block_count, check_collection, closed_loop_block, ClosedLoopStats,
    DataMoments, MomentSums, SimConfig,
};
use hinf_core::Result;
use nalgebra::DMatrix;
use rayon::prelude::*;

pub fn collect_behavior_data(
    sys: &SystemModel,
    behavior_lu: &DMatrix<f64>,
    sim: &SimConfig,
) -> Result<DataMoments> {
    check_collection(sys, behavior_lu, sim)?;
    let parts: Vec<Result<MomentSums>> = (0..block_count(sim.paths))
        .into_par_iter()
        .map(|b| accumulate_block(sys, behavior_lu, sim, b))
        .collect();
    let mut total = MomentSums::new((sys.n(), sys.m1(), sys.m2()), sim.intervals);
    for part in parts {
        total.merge(&part?)?;
    }
    total.into_moments()
}

pub fn simulate_closed_loop(
    sys: &SystemModel,
    gains: &Gains,
    sim: &SimConfig,
) -> Result<ClosedLoopStats> {
    sim.validate(sys.n(), sys.m1(), sys.m2())?;
    let parts: Vec<Result<Vec<f64>>> = (0..block_count(sim.paths))
        .into_par_iter()
        .map(|b| closed_loop_block(sys, gains, sim, b))
        .collect();
    let mut total = vec![0.0; sim.intervals * sim.substeps + 1];
    for part in parts {
        for (a, b) in total.iter_mut().zip(part?.iter()) {
            *a += *b;
        }
    }
    Ok(simulate::closed_loop_stats(sim, &total))
}
