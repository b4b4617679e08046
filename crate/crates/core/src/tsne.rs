//! Exact t-SNE: perplexity-calibrated Gaussian affinities, Student-t similarities in
//! the embedding, and momentum gradient descent on the KL divergence between them.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{rng, sq_dist, Matrix, Warnings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AffinityKind {
    /// Row `i` holds the distribution p(·|i).
    Conditional,
    /// Symmetric joint distribution summing to 1.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityMatrix {
    pub p: Matrix,
    pub kind: AffinityKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub max_iter: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch_iter: usize,
    pub dim: usize,
    pub max_points: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            max_iter: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch_iter: 250,
            dim: 2,
            max_points: 5000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub y: Matrix,
    pub final_kl: f64,
    /// KL divergence (unexaggerated) at the random initialisation.
    pub initial_kl: f64,
    pub iterations_run: usize,
    pub seed: u64,
}

const PERPLEXITY_SEARCH_ITERS: usize = 200;
const ENTROPY_TOL: f64 = 1e-10;

fn pairwise_sq_dists(x: &Matrix) -> Matrix {
    let n = x.nrows();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = sq_dist(x.row(i), x.row(j));
            d.set(i, j, v);
            d.set(j, i, v);
        }
    }
    d
}

/// Row distribution for precision `beta`; returns its entropy in nats.
fn row_distribution(dist: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let dmin = dist
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, d)| *d)
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for (j, (o, d)) in out.iter_mut().zip(dist).enumerate() {
        if j == i {
            *o = 0.0;
            continue;
        }
        let shifted = d - dmin;
        let w = (-beta * shifted).exp();
        *o = w;
        sum += w;
        weighted += w * shifted;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    sum.ln() + beta * weighted / sum
}

/// Shannon perplexity `exp(H)` of a distribution.
pub fn perplexity_of(row: &[f64]) -> f64 {
    let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    h.exp()
}

/// Gaussian conditional affinities with a per-row bandwidth matched to `perplexity`.
pub fn conditional_affinities(x: &Matrix, perplexity: f64) -> Result<AffinityMatrix> {
    let n = x.nrows();
    if n < 3 {
        return Err(Error::ShapeMismatch(format!("need at least 3 points, got {n}")));
    }
    if !(perplexity > 1.0 && perplexity < n as f64) {
        return Err(Error::InvalidHyperparameter(format!(
            "perplexity {perplexity} must lie in (1, {n})"
        )));
    }
    let dist = pairwise_sq_dists(x);
    let target = perplexity.ln();
    let mut p = Matrix::zeros(n, n);
    for i in 0..n {
        let drow = dist.row(i);
        let spread: f64 = drow.iter().sum::<f64>() / (n - 1) as f64;
        let mut beta = if spread > 0.0 { 1.0 / spread } else { 1.0 };
        let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
        let mut row = vec![0.0; n];
        for _ in 0..PERPLEXITY_SEARCH_ITERS {
            let h = row_distribution(drow, i, beta, &mut row);
            if (h - target).abs() < ENTROPY_TOL {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
        }
        let h = row_distribution(drow, i, beta, &mut row);
        if !h.is_finite() || ((h.exp() - perplexity) / perplexity).abs() > 1e-3 {
            return Err(Error::PerplexityInfeasible { row: i });
        }
        p.row_mut(i).copy_from_slice(&row);
    }
    Ok(AffinityMatrix { p, kind: AffinityKind::Conditional })
}

/// Joint affinities `(p(i|j) + p(j|i)) / 2N`.
pub fn symmetrize(cond: &AffinityMatrix) -> Result<AffinityMatrix> {
    let n = cond.p.nrows();
    if cond.p.ncols() != n {
        return Err(Error::ShapeMismatch("affinity matrix must be square".into()));
    }
    let mut p = Matrix::zeros(n, n);
    let denom = 2.0 * n as f64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p.set(i, j, (cond.p.get(i, j) + cond.p.get(j, i)) / denom);
            }
        }
    }
    Ok(AffinityMatrix { p, kind: AffinityKind::Joint })
}

/// Student-t similarities `(1 + |y_i - y_j|^2)^-1`, normalised over all ordered pairs.
pub fn low_dim_affinities(y: &Matrix) -> AffinityMatrix {
    let (q, _) = student_t(y);
    AffinityMatrix { p: q, kind: AffinityKind::Joint }
}

/// Returns (normalised Q, unnormalised kernel matrix).
fn student_t(y: &Matrix) -> (Matrix, Matrix) {
    let n = y.nrows();
    let mut kernel = Matrix::zeros(n, n);
    let mut z = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let k = 1.0 / (1.0 + sq_dist(y.row(i), y.row(j)));
            kernel.set(i, j, k);
            kernel.set(j, i, k);
            z += 2.0 * k;
        }
    }
    let mut q = kernel.clone();
    for i in 0..n {
        for v in q.row_mut(i) {
            *v /= z;
        }
    }
    (q, kernel)
}

/// `sum_{i != j} p log(p / q)`, treating `0 log 0` as 0.
pub fn kl_divergence(p: &AffinityMatrix, q: &AffinityMatrix) -> Result<f64> {
    if p.p.nrows() != q.p.nrows() || p.p.ncols() != q.p.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            p.p.nrows(),
            p.p.ncols(),
            q.p.nrows(),
            q.p.ncols()
        )));
    }
    let n = p.p.nrows();
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            let pij = p.p.get(i, j);
            if i != j && pij > 0.0 {
                kl += pij * (pij / q.p.get(i, j)).ln();
            }
        }
    }
    Ok(kl)
}

/// Analytic gradient of `KL(P || Q(y))` with respect to the embedding.
pub fn kl_gradient(p: &AffinityMatrix, y: &Matrix) -> Matrix {
    let (q, kernel) = student_t(y);
    gradient_with(&p.p, &q, &kernel, y, 1.0)
}

fn gradient_with(p: &Matrix, q: &Matrix, kernel: &Matrix, y: &Matrix, exaggeration: f64) -> Matrix {
    let n = y.nrows();
    let d = y.ncols();
    let mut grad = Matrix::zeros(n, d);
    for i in 0..n {
        let yi = y.row(i).to_vec();
        let g = grad.row_mut(i);
        for j in 0..n {
            if i == j {
                continue;
            }
            let mult = 4.0 * (exaggeration * p.get(i, j) - q.get(i, j)) * kernel.get(i, j);
            for (gk, (a, b)) in g.iter_mut().zip(yi.iter().zip(y.row(j))) {
                *gk += mult * (a - b);
            }
        }
    }
    grad
}

/// Nudges repeated rows apart by ~1e-12 so every bandwidth search can succeed.
fn jitter_duplicates(x: &Matrix, seed: u64, warnings: &mut Warnings) -> Matrix {
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut out = x.clone();
    let mut r = rng(seed ^ 0x6a17);
    let mut count = 0;
    for i in 0..x.nrows() {
        let key: Vec<u64> = x.row(i).iter().map(|v| v.to_bits()).collect();
        let hits = seen.entry(key).or_insert(0);
        if *hits > 0 {
            for v in out.row_mut(i) {
                let e: f64 = StandardNormal.sample(&mut r);
                *v += 1e-12 * e * v.abs().max(1.0);
            }
            count += 1;
        }
        *hits += 1;
    }
    if count > 0 {
        warnings.push(format!("t-SNE: jittered {count} duplicate row(s)"));
    }
    out
}

pub fn fit_tsne(x: &Matrix, config: &TsneConfig, warnings: &mut Warnings) -> Result<Embedding> {
    let n = x.nrows();
    if n > config.max_points {
        return Err(Error::TooManyPoints { n, cap: config.max_points });
    }
    if n < 5 {
        return Err(Error::ShapeMismatch(format!("t-SNE needs at least 5 points, got {n}")));
    }
    if !(config.learning_rate > 0.0 && config.early_exaggeration > 0.0) || !(2..=3).contains(&config.dim) {
        return Err(Error::InvalidHyperparameter("t-SNE rates must be positive and dim 2 or 3".into()));
    }
    let x = jitter_duplicates(x, config.seed, warnings);
    let p = symmetrize(&conditional_affinities(&x, config.perplexity)?)?;

    let mut r = rng(config.seed);
    let mut y = Matrix::zeros(n, config.dim);
    for i in 0..n {
        for v in y.row_mut(i) {
            let e: f64 = StandardNormal.sample(&mut r);
            *v = 1e-4 * e;
        }
    }
    let initial_kl = kl_divergence(&p, &low_dim_affinities(&y))?;

    let mut update = Matrix::zeros(n, config.dim);
    let mut gains = Matrix::from_vec(n, config.dim, vec![1.0; n * config.dim])?;
    for iter in 0..config.max_iter {
        let exaggeration = if iter < config.exaggeration_iters { config.early_exaggeration } else { 1.0 };
        let momentum =
            if iter < config.momentum_switch_iter { config.initial_momentum } else { config.final_momentum };
        let (q, kernel) = student_t(&y);
        let grad = gradient_with(&p.p, &q, &kernel, &y, exaggeration);
        if !grad.all_finite() {
            return Err(Error::NonFiniteGradient { iteration: iter });
        }
        for i in 0..n {
            for k in 0..config.dim {
                let g = grad.get(i, k);
                let u = update.get(i, k);
                let mut gain = gains.get(i, k);
                gain = if (g > 0.0) != (u > 0.0) { gain + 0.2 } else { gain * 0.8 };
                gain = gain.max(0.01);
                gains.set(i, k, gain);
                let u = momentum * u - config.learning_rate * gain * g;
                update.set(i, k, u);
                y.set(i, k, y.get(i, k) + u);
            }
        }
        for k in 0..config.dim {
            let mean = y.column(k).iter().sum::<f64>() / n as f64;
            for i in 0..n {
                y.set(i, k, y.get(i, k) - mean);
            }
        }
    }
    let final_kl = kl_divergence(&p, &low_dim_affinities(&y))?;
    Ok(Embedding { y, final_kl, initial_kl, iterations_run: config.max_iter, seed: config.seed })
}

/// Writes `row_id,y1,y2[,y3]`.
pub fn write_embedding_csv(path: impl AsRef<Path>, row_ids: &[u64], emb: &Embedding) -> Result<()> {
    if row_ids.len() != emb.y.nrows() {
        return Err(Error::LengthMismatch { left: row_ids.len(), right: emb.y.nrows() });
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let cols: Vec<String> = (1..=emb.y.ncols()).map(|k| format!("y{k}")).collect();
    writeln!(f, "row_id,{}", cols.join(","))?;
    for (id, row) in row_ids.iter().zip(emb.y.rows_iter()) {
        let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{id},{}", vals.join(","))?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn equilateral_triangle_is_uniform() {
        let h = 3f64.sqrt() / 2.0;
        let x = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.5, h]]).unwrap();
        let c = conditional_affinities(&x, 2.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_close(c.p.get(i, j), if i == j { 0.0 } else { 0.5 }, 1e-9);
            }
        }
    }

    #[test]
    fn collinear_rows_match_bisection_oracle() {
        let x = Matrix::from_rows(&[[0.0], [1.0], [2.0], [10.0]]).unwrap();
        let c = conditional_affinities(&x, 2.0).unwrap();
        // Independent scalar search over sigma for row 0.
        let d: [f64; 3] = [1.0, 4.0, 100.0];
        let perp = |sigma: f64| {
            let w: Vec<f64> = d.iter().map(|v| (-v / (2.0 * sigma * sigma)).exp()).collect();
            let s: f64 = w.iter().sum();
            let h: f64 = w.iter().map(|v| v / s).filter(|p| *p > 0.0).map(|p| -p * p.ln()).sum();
            (h.exp(), w.iter().map(|v| v / s).collect::<Vec<_>>())
        };
        let (mut lo, mut hi) = (1e-3, 100.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if perp(mid).0 > 2.0 { hi = mid } else { lo = mid }
        }
        let (pp, expect) = perp(0.5 * (lo + hi));
        assert_close(pp, 2.0, 1e-9);
        for (j, e) in [1, 2, 3].into_iter().zip(expect) {
            assert_close(c.p.get(0, j), e, 1e-6);
        }
        assert!(c.p.get(0, 1) > c.p.get(0, 3));
    }

    #[test]
    fn rows_sum_to_one_and_hit_perplexity() {
        let x = Matrix::from_rows(&[[0.0, 1.0], [2.0, 0.5], [3.0, 3.0], [-1.0, 4.0], [0.3, -2.0], [5.0, 5.0]]).unwrap();
        let c = conditional_affinities(&x, 3.0).unwrap();
        for i in 0..6 {
            assert_close(c.p.row(i).iter().sum(), 1.0, 1e-9);
            assert!((perplexity_of(c.p.row(i)) - 3.0).abs() / 3.0 <= 1e-3);
        }
    }

    #[test]
    fn symmetrize_cases() {
        let c = AffinityMatrix { p: Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap(), kind: AffinityKind::Conditional };
        let j = symmetrize(&c).unwrap();
        assert_eq!(j.p, Matrix::from_rows(&[[0.0, 0.5], [0.5, 0.0]]).unwrap());

        let sym = AffinityMatrix {
            p: Matrix::from_rows(&[[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]]).unwrap(),
            kind: AffinityKind::Conditional,
        };
        let j = symmetrize(&sym).unwrap();
        for i in 0..3 {
            for k in 0..3 {
                assert_close(j.p.get(i, k), sym.p.get(i, k) / 3.0, 1e-15);
            }
        }
    }

    #[test]
    fn low_dim_examples() {
        let q = low_dim_affinities(&Matrix::from_rows(&[[0.0, 0.0], [7.0, 3.0]]).unwrap());
        assert_close(q.p.get(0, 1), 0.5, 1e-15);
        let h = 3f64.sqrt() / 2.0;
        let q = low_dim_affinities(&Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.5, h]]).unwrap());
        assert_close(q.p.get(1, 2), 1.0 / 6.0, 1e-12);
        let q = low_dim_affinities(&Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]]).unwrap());
        let z = 2.0 * (0.5 + 0.1 + 0.2);
        assert_close(q.p.get(0, 1), 0.5 / z, 1e-15);
        assert_close(q.p.get(0, 2), 0.1 / z, 1e-15);
        assert_close(q.p.get(1, 2), 0.2 / z, 1e-15);
    }

    #[test]
    fn kl_examples() {
        let mk = |a: f64, b: f64| AffinityMatrix {
            p: Matrix::from_rows(&[[0.0, a], [b, 0.0]]).unwrap(),
            kind: AffinityKind::Joint,
        };
        assert_eq!(kl_divergence(&mk(0.5, 0.5), &mk(0.5, 0.5)).unwrap(), 0.0);
        let kl = kl_divergence(&mk(0.6, 0.4), &mk(0.5, 0.5)).unwrap();
        assert_close(kl, 0.6 * 1.2f64.ln() + 0.4 * 0.8f64.ln(), 1e-15);
        assert_close(kl, 0.020_135_513, 1e-8);
        let three = AffinityMatrix { p: Matrix::zeros(3, 3), kind: AffinityKind::Joint };
        assert!(matches!(kl_divergence(&mk(0.5, 0.5), &three), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn too_many_points() {
        let x = Matrix::zeros(10, 2);
        let cfg = TsneConfig { max_points: 5, ..Default::default() };
        assert!(matches!(fit_tsne(&x, &cfg, &mut Warnings::new()), Err(Error::TooManyPoints { n: 10, cap: 5 })));
    }

    #[test]
    fn duplicates_are_jittered() {
        let x = Matrix::from_rows(&[[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 2.0]]).unwrap();
        let cfg = TsneConfig { perplexity: 2.0, max_iter: 50, ..Default::default() };
        let mut w = Warnings::new();
        let e = fit_tsne(&x, &cfg, &mut w).unwrap();
        assert_eq!(w.len(), 1);
        assert!(e.y.all_finite());
    }
}
