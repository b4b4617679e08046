//! Shared fixtures for the kernel benchmarks.

use svead_core::synth::{imbalanced_benchmark, BenchmarkSpec};
use svead_core::Dataset;

/// Imbalanced synthetic set with `n_rows` rows and 2% positives.
pub fn benchmark_data(n_rows: usize, n_features: usize) -> Dataset {
    imbalanced_benchmark(&BenchmarkSpec {
        n_rows,
        n_positive: (n_rows / 50).max(4),
        n_features,
        ..Default::default()
    })
}
