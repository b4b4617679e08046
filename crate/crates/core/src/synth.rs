//! Seeded synthetic datasets for tests, benchmarks and the acceptance suite.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{rng, Dataset, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkSpec {
    pub n_rows: usize,
    pub n_positive: usize,
    pub n_features: usize,
    pub noise_sd: f64,
    pub disk_radius: f64,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self { n_rows: 10_000, n_positive: 200, n_features: 10, noise_sd: 0.3, disk_radius: 0.44, seed: 42 }
    }
}

const DISK_CENTRES: [[f64; 2]; 2] = [[1.5, 1.5], [-1.5, -1.5]];

fn normal(r: &mut impl Rng) -> f64 {
    StandardNormal.sample(r)
}

/// Imbalanced benchmark with a nonlinear boundary. A 2-d latent factor
/// `f ~ N(0, I)` is positive inside one of two disks centred at `(1.5, 1.5)` and
/// `(-1.5, -1.5)`; the two disks are mirror images, so no single hyperplane in
/// feature space separates the classes. Features are `A f + noise` for a seeded
/// random loading matrix `A`. Rows are drawn by rejection until both class quotas
/// are met exactly.
pub fn imbalanced_benchmark(spec: &BenchmarkSpec) -> Dataset {
    let mut r = rng(spec.seed);
    let loadings: Vec<[f64; 2]> = (0..spec.n_features).map(|_| [normal(&mut r), normal(&mut r)]).collect();
    let n_negative = spec.n_rows - spec.n_positive;
    let (mut pos, mut neg) = (0, 0);
    let mut rows = Vec::with_capacity(spec.n_rows);
    let mut labels = Vec::with_capacity(spec.n_rows);
    let r2 = spec.disk_radius * spec.disk_radius;
    while pos + neg < spec.n_rows {
        let f = [normal(&mut r), normal(&mut r)];
        let inside = DISK_CENTRES.iter().any(|c| (f[0] - c[0]).powi(2) + (f[1] - c[1]).powi(2) <= r2);
        let row: Vec<f64> = loadings
            .iter()
            .map(|a| a[0] * f[0] + a[1] * f[1] + spec.noise_sd * normal(&mut r))
            .collect();
        if inside && pos < spec.n_positive {
            pos += 1;
        } else if !inside && neg < n_negative {
            neg += 1;
        } else {
            continue;
        }
        rows.push(row);
        labels.push(u8::from(inside));
    }
    let names = (1..=spec.n_features).map(|j| format!("v{j}")).collect();
    let ids = (0..spec.n_rows as u64).collect();
    Dataset::new(Matrix::from_rows(&rows).expect("rectangular"), labels, names, ids).expect("valid dataset")
}

/// Two isotropic Gaussian blobs (unit sd) whose centres are `separation` apart
/// along the first axis. Class 0 rows come first.
pub fn two_blobs(n_per_class: usize, dim: usize, separation: f64, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let mut rows = Vec::with_capacity(2 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for class in [0u8, 1] {
        for _ in 0..n_per_class {
            let mut row: Vec<f64> = (0..dim).map(|_| normal(&mut r)).collect();
            row[0] += separation * f64::from(class);
            rows.push(row);
            labels.push(class);
        }
    }
    Dataset::from_parts(Matrix::from_rows(&rows).expect("rectangular"), labels).expect("valid dataset")
}

/// `n` rows of `x = scale * A f + noise_sd * e` with a 2-d factor `f ~ N(0, I)`.
/// Labels alternate so both classes are present.
pub fn two_factor(n: usize, dim: usize, scale: f64, noise_sd: f64, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let loadings: Vec<[f64; 2]> = (0..dim).map(|_| [normal(&mut r), normal(&mut r)]).collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let f = [normal(&mut r), normal(&mut r)];
            loadings.iter().map(|a| scale * (a[0] * f[0] + a[1] * f[1]) + noise_sd * normal(&mut r)).collect()
        })
        .collect();
    let labels = (0..n).map(|i| (i % 2) as u8).collect();
    Dataset::from_parts(Matrix::from_rows(&rows).expect("rectangular"), labels).expect("valid dataset")
}
