//! Shared fixtures for the benchmarks.

use adg_core::{data, SyntheticSpec, TrajectoryDataset};

/// The standardized desk-scale benchmark dataset.
pub fn benchmark_dataset() -> TrajectoryDataset {
    data::generate_synthetic(&SyntheticSpec::benchmark(0))
        .expect("benchmark spec is valid")
        .standardize()
}
