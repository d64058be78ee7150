//! Fixtures shared by the benchmarks.

use snse_core::geometry::examples;
use snse_core::rng::StreamKey;
use snse_core::{IntegratorConfig, Model, NoiseModel, SpectralGrid, TrajectoryRecord, VorticityField};

/// Fully forced model on an `n`-truncated grid.
pub fn model(n: usize, dt: f64) -> Model {
    let grid = SpectralGrid::new(n).expect("valid truncation");
    let noise = NoiseModel::uniform(&examples::full_space(), 1.0).expect("valid forcing");
    Model::new(grid, IntegratorConfig::new(0.1, dt, 3), noise).expect("valid model")
}

pub fn field(model: &Model, seed: u64) -> VorticityField {
    let mut rng = StreamKey::new(seed, 0).aux(0);
    VorticityField::random(model.grid().clone(), &mut rng, 1.0)
}

pub fn trajectory(n: usize, steps: usize) -> TrajectoryRecord {
    let m = model(n, 0.01);
    let w0 = field(&m, 1);
    m.simulate_replica(&w0, steps, 0).expect("finite trajectory")
}
