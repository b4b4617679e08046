//! Variational autoencoder with a diagonal Gaussian encoder and a Bernoulli or
//! unit-variance Gaussian decoder, trained on the ELBO with hand-written backprop
//! and Adam. Provides latent features (posterior means) and Monte-Carlo
//! reconstruction-probability anomaly scores.
//!
//! The Gaussian log-likelihood drops the constant `-d/2 ln 2π` term.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{derive_seed, rng, sigmoid, Dataset, Matrix, Warnings};

const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Linear,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Linear => v,
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - pre.tanh().powi(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    Bernoulli,
    #[default]
    GaussianUnitVariance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeArchitecture {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub latent_dim: usize,
    pub hidden_activation: Activation,
    pub dropout_rate: f64,
    pub decoder_likelihood: Likelihood,
}

impl VaeArchitecture {
    /// One overcomplete hidden layer (width `2 * input_dim`), 2 latent dims, linear
    /// activation, dropout 0.2, Gaussian decoder.
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: vec![2 * input_dim],
            latent_dim: 2,
            hidden_activation: Activation::Linear,
            dropout_rate: 0.2,
            decoder_likelihood: Likelihood::GaussianUnitVariance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidHyperparameter("VAE dimensions must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidHyperparameter("dropout_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Layer shapes in weight-array order: encoder hidden layers, mean head,
    /// log-variance head, decoder hidden layers (mirrored), output layer.
    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.latent_dim));
        dims.push((prev, self.latent_dim));
        prev = self.latent_dim;
        for &h in self.hidden_dims.iter().rev() {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.input_dim));
        let mut offset = 0;
        dims.into_iter()
            .map(|(fan_in, fan_out)| {
                let s = LayerShape { fan_in, fan_out, offset };
                offset += fan_in * fan_out + fan_out;
                s
            })
            .collect()
    }

    pub fn n_weights(&self) -> usize {
        self.layer_shapes().last().map_or(0, |l| l.offset + l.fan_in * l.fan_out + l.fan_out)
    }
}

/// Row-major `fan_out x fan_in` weights at `offset`, followed by `fan_out` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub offset: usize,
}

impl LayerShape {
    fn bias_offset(&self) -> usize {
        self.offset + self.fan_in * self.fan_out
    }

    fn forward(&self, w: &[f64], input: &[f64]) -> Vec<f64> {
        let b = self.bias_offset();
        (0..self.fan_out)
            .map(|o| {
                let row = &w[self.offset + o * self.fan_in..self.offset + (o + 1) * self.fan_in];
                w[b + o] + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>()
            })
            .collect()
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the input.
    fn backward(&self, w: &[f64], input: &[f64], dout: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let b = self.bias_offset();
        let mut din = vec![0.0; self.fan_in];
        for (o, &g) in dout.iter().enumerate() {
            let base = self.offset + o * self.fan_in;
            grad[b + o] += g;
            for i in 0..self.fan_in {
                grad[base + i] += g * input[i];
                din[i] += g * w[base + i];
            }
        }
        din
    }
}

/// Parameters of q(z|x): mean and log-variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub elbo: f64,
    pub reconstruction_term: f64,
    pub kl_term: f64,
}

/// Per-instance dropout scale factors (0 or `1/(1-p)`) for every hidden layer,
/// encoder layers first, then decoder layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask(pub Vec<Vec<f64>>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedVae {
    pub architecture: VaeArchitecture,
    pub weights: Vec<f64>,
    pub layers: Vec<LayerShape>,
    /// `(epoch, mean negative ELBO)` per epoch.
    pub training_log: Vec<(usize, f64)>,
    pub seed: u64,
}

struct Trace {
    enc_in: Vec<Vec<f64>>,
    enc_pre: Vec<Vec<f64>>,
    head_in: Vec<f64>,
    mu: Vec<f64>,
    lv: Vec<f64>,
    clamped: Vec<bool>,
    dec_in: Vec<Vec<f64>>,
    dec_pre: Vec<Vec<f64>>,
    out_in: Vec<f64>,
    out: Vec<f64>,
}

#[inline]
fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// Closed-form `KL(N(mu, diag(exp(logvar))) || N(0, I))`.
pub fn gaussian_kl(stats: &LatentStats) -> f64 {
    -0.5 * stats
        .mu
        .iter()
        .zip(&stats.logvar)
        .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
        .sum::<f64>()
}

/// `z = mu + exp(logvar / 2) * noise`.
pub fn reparameterize(stats: &LatentStats, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != stats.mu.len() {
        return Err(Error::DimensionMismatch { expected: stats.mu.len(), found: noise.len() });
    }
    Ok(stats
        .mu
        .iter()
        .zip(&stats.logvar)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

impl TrainedVae {
    /// Untrained model with Glorot-uniform weights and zero biases.
    pub fn init(architecture: VaeArchitecture, seed: u64) -> Result<Self> {
        architecture.validate()?;
        let layers = architecture.layer_shapes();
        let mut weights = vec![0.0; architecture.n_weights()];
        let mut r = rng(seed);
        for l in &layers {
            let bound = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
            for w in &mut weights[l.offset..l.bias_offset()] {
                *w = r.random_range(-bound..=bound);
            }
        }
        Ok(Self { architecture, weights, layers, training_log: Vec::new(), seed })
    }

    /// Model with explicit weights (in [`VaeArchitecture::layer_shapes`] order).
    pub fn from_weights(architecture: VaeArchitecture, weights: Vec<f64>) -> Result<Self> {
        architecture.validate()?;
        if weights.len() != architecture.n_weights() {
            return Err(Error::DimensionMismatch { expected: architecture.n_weights(), found: weights.len() });
        }
        let layers = architecture.layer_shapes();
        Ok(Self { architecture, weights, layers, training_log: Vec::new(), seed: 0 })
    }

    fn n_hidden(&self) -> usize {
        self.architecture.hidden_dims.len()
    }

    fn mu_layer(&self) -> LayerShape {
        self.layers[self.n_hidden()]
    }

    fn lv_layer(&self) -> LayerShape {
        self.layers[self.n_hidden() + 1]
    }

    fn dec_layer(&self, l: usize) -> LayerShape {
        self.layers[self.n_hidden() + 2 + l]
    }

    fn out_layer(&self) -> LayerShape {
        *self.layers.last().expect("architecture has an output layer")
    }

    fn hidden(&self, layer: LayerShape, input: &[f64], mask: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
        let pre = layer.forward(&self.weights, input);
        let act = self.architecture.hidden_activation;
        let out = pre
            .iter()
            .enumerate()
            .map(|(i, &p)| act.apply(p) * mask.map_or(1.0, |m| m[i]))
            .collect();
        (pre, out)
    }

    fn encode_trace(&self, x: &[f64], mask: Option<&DropoutMask>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
        let mut a = x.to_vec();
        let mut enc_in = Vec::new();
        let mut enc_pre = Vec::new();
        for l in 0..self.n_hidden() {
            let (pre, out) = self.hidden(self.layers[l], &a, mask.map(|m| m.0[l].as_slice()));
            enc_in.push(std::mem::replace(&mut a, out));
            enc_pre.push(pre);
        }
        (enc_in, enc_pre, a)
    }

    fn decode_logits(&self, z: &[f64], mask: Option<&DropoutMask>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
        let h = self.n_hidden();
        let mut a = z.to_vec();
        let mut dec_in = Vec::new();
        let mut dec_pre = Vec::new();
        for l in 0..h {
            let (pre, out) = self.hidden(self.dec_layer(l), &a, mask.map(|m| m.0[h + l].as_slice()));
            dec_in.push(std::mem::replace(&mut a, out));
            dec_pre.push(pre);
        }
        let out = self.out_layer().forward(&self.weights, &a);
        (dec_in, dec_pre, a, out)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.architecture.input_dim {
            return Err(Error::DimensionMismatch { expected: self.architecture.input_dim, found: x.len() });
        }
        Ok(())
    }

    /// Deterministic encoder pass (no dropout).
    pub fn encode(&self, x: &[f64]) -> Result<LatentStats> {
        self.check_input(x)?;
        let (_, _, head_in) = self.encode_trace(x, None);
        Ok(LatentStats {
            mu: self.mu_layer().forward(&self.weights, &head_in),
            logvar: self.lv_layer().forward(&self.weights, &head_in),
        })
    }

    /// Bernoulli: per-feature probabilities; Gaussian: per-feature means.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.architecture.latent_dim {
            return Err(Error::DimensionMismatch { expected: self.architecture.latent_dim, found: z.len() });
        }
        let (_, _, _, out) = self.decode_logits(z, None);
        Ok(match self.architecture.decoder_likelihood {
            Likelihood::Bernoulli => out.into_iter().map(sigmoid).collect(),
            Likelihood::GaussianUnitVariance => out,
        })
    }

    /// `log p(x | decoder output)` from raw output-layer values.
    fn log_likelihood(&self, x: &[f64], out: &[f64]) -> f64 {
        match self.architecture.decoder_likelihood {
            Likelihood::Bernoulli => x.iter().zip(out).map(|(xi, o)| xi * o - softplus(*o)).sum(),
            Likelihood::GaussianUnitVariance => -0.5 * x.iter().zip(out).map(|(xi, o)| (xi - o).powi(2)).sum::<f64>(),
        }
    }

    fn check_range(&self, batch: &Matrix) -> Result<()> {
        if batch.ncols() != self.architecture.input_dim {
            return Err(Error::DimensionMismatch { expected: self.architecture.input_dim, found: batch.ncols() });
        }
        if self.architecture.decoder_likelihood == Likelihood::Bernoulli
            && batch.as_slice().iter().any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::OutOfRangeInput);
        }
        Ok(())
    }

    fn forward(&self, x: &[f64], noise: &[f64], mask: Option<&DropoutMask>, clamp: bool) -> Trace {
        let (enc_in, enc_pre, head_in) = self.encode_trace(x, mask);
        let mu = self.mu_layer().forward(&self.weights, &head_in);
        let mut lv = self.lv_layer().forward(&self.weights, &head_in);
        let mut clamped = vec![false; lv.len()];
        if clamp {
            for (v, c) in lv.iter_mut().zip(clamped.iter_mut()) {
                if v.abs() > LOGVAR_CLAMP {
                    *v = v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP);
                    *c = true;
                }
            }
        }
        let z: Vec<f64> = mu.iter().zip(&lv).zip(noise).map(|((m, l), e)| m + (0.5 * l).exp() * e).collect();
        let (dec_in, dec_pre, out_in, out) = self.decode_logits(&z, mask);
        Trace { enc_in, enc_pre, head_in, mu, lv, clamped, dec_in, dec_pre, out_in, out }
    }

    /// ELBO over a batch, one reparameterised sample per row, no dropout.
    pub fn elbo_batch(&self, batch: &Matrix, noise: &Matrix) -> Result<ElboBreakdown> {
        self.check_range(batch)?;
        self.check_noise(batch, noise)?;
        let n = batch.nrows() as f64;
        let (mut rec, mut kl) = (0.0, 0.0);
        for i in 0..batch.nrows() {
            let t = self.forward(batch.row(i), noise.row(i), None, false);
            rec += self.log_likelihood(batch.row(i), &t.out);
            kl += gaussian_kl(&LatentStats { mu: t.mu, logvar: t.lv });
        }
        let (reconstruction_term, kl_term) = (rec / n, kl / n);
        Ok(ElboBreakdown { elbo: reconstruction_term - kl_term, reconstruction_term, kl_term })
    }

    fn check_noise(&self, batch: &Matrix, noise: &Matrix) -> Result<()> {
        if noise.nrows() != batch.nrows() || noise.ncols() != self.architecture.latent_dim {
            return Err(Error::ShapeMismatch(format!(
                "noise is {}x{}, expected {}x{}",
                noise.nrows(),
                noise.ncols(),
                batch.nrows(),
                self.architecture.latent_dim
            )));
        }
        Ok(())
    }

    /// Mean negative ELBO over the batch (optionally with dropout masks).
    pub fn negative_elbo(&self, batch: &Matrix, noise: &Matrix, masks: Option<&[DropoutMask]>) -> Result<f64> {
        Ok(self.loss_and_gradient(batch, noise, masks, false)?.0)
    }

    /// Mean negative ELBO and its gradient with respect to [`TrainedVae::weights`].
    pub fn negative_elbo_gradient(
        &self,
        batch: &Matrix,
        noise: &Matrix,
        masks: Option<&[DropoutMask]>,
    ) -> Result<(f64, Vec<f64>)> {
        let (loss, grad, _) = self.loss_and_gradient(batch, noise, masks, false)?;
        Ok((loss, grad))
    }

    /// Returns (loss, gradient, number of clamped log-variance entries).
    fn loss_and_gradient(
        &self,
        batch: &Matrix,
        noise: &Matrix,
        masks: Option<&[DropoutMask]>,
        clamp: bool,
    ) -> Result<(f64, Vec<f64>, usize)> {
        self.check_range(batch)?;
        self.check_noise(batch, noise)?;
        if let Some(m) = masks {
            if m.len() != batch.nrows() {
                return Err(Error::LengthMismatch { left: m.len(), right: batch.nrows() });
            }
        }
        let n = batch.nrows();
        let inv_n = 1.0 / n as f64;
        let h = self.n_hidden();
        let act = self.architecture.hidden_activation;
        let w = &self.weights;
        let mut grad = vec![0.0; w.len()];
        let mut loss = 0.0;
        let mut clamps = 0;

        let hidden_back = |layer: LayerShape,
                           input: &[f64],
                           pre: &[f64],
                           dact: Vec<f64>,
                           mask: Option<&[f64]>,
                           grad: &mut [f64]|
         -> Vec<f64> {
            let dpre: Vec<f64> = dact
                .iter()
                .enumerate()
                .map(|(i, g)| g * mask.map_or(1.0, |m| m[i]) * act.derivative(pre[i]))
                .collect();
            layer.backward(w, input, &dpre, grad)
        };

        for i in 0..n {
            let x = batch.row(i);
            let eps = noise.row(i);
            let mask = masks.map(|m| &m[i]);
            let t = self.forward(x, eps, mask, clamp);
            clamps += t.clamped.iter().filter(|&&c| c).count();
            let kl = gaussian_kl(&LatentStats { mu: t.mu.clone(), logvar: t.lv.clone() });
            loss += (kl - self.log_likelihood(x, &t.out)) * inv_n;

            // d(-loglik)/d(out)
            let dout: Vec<f64> = match self.architecture.decoder_likelihood {
                Likelihood::Bernoulli => t.out.iter().zip(x).map(|(o, xi)| (sigmoid(*o) - xi) * inv_n).collect(),
                Likelihood::GaussianUnitVariance => t.out.iter().zip(x).map(|(o, xi)| (o - xi) * inv_n).collect(),
            };
            let mut da = self.out_layer().backward(w, &t.out_in, &dout, &mut grad);
            for l in (0..h).rev() {
                da = hidden_back(
                    self.dec_layer(l),
                    &t.dec_in[l],
                    &t.dec_pre[l],
                    da,
                    mask.map(|m| m.0[h + l].as_slice()),
                    &mut grad,
                );
            }
            let dz = da;
            let dmu: Vec<f64> = dz.iter().zip(&t.mu).map(|(g, m)| g + m * inv_n).collect();
            let dlv: Vec<f64> = (0..dz.len())
                .map(|k| {
                    if t.clamped[k] {
                        0.0
                    } else {
                        let sd = (0.5 * t.lv[k]).exp();
                        dz[k] * eps[k] * 0.5 * sd + 0.5 * (t.lv[k].exp() - 1.0) * inv_n
                    }
                })
                .collect();
            let d1 = self.mu_layer().backward(w, &t.head_in, &dmu, &mut grad);
            let d2 = self.lv_layer().backward(w, &t.head_in, &dlv, &mut grad);
            let mut da: Vec<f64> = d1.iter().zip(&d2).map(|(a, b)| a + b).collect();
            for l in (0..h).rev() {
                da = hidden_back(
                    self.layers[l],
                    &t.enc_in[l],
                    &t.enc_pre[l],
                    da,
                    mask.map(|m| m.0[l].as_slice()),
                    &mut grad,
                );
            }
        }
        Ok((loss, grad, clamps))
    }

    /// Posterior means for every row.
    pub fn latent_features(&self, x: &Matrix) -> Result<Matrix> {
        if x.ncols() != self.architecture.input_dim {
            return Err(Error::DimensionMismatch { expected: self.architecture.input_dim, found: x.ncols() });
        }
        let mut out = Matrix::zeros(x.nrows(), self.architecture.latent_dim);
        for i in 0..x.nrows() {
            let (_, _, head_in) = self.encode_trace(x.row(i), None);
            out.row_mut(i).copy_from_slice(&self.mu_layer().forward(&self.weights, &head_in));
        }
        Ok(out)
    }

    /// Log of the Monte-Carlo mean likelihood of `x` over posterior samples given
    /// as rows of `noise`. Lower means more anomalous.
    pub fn reconstruction_probability_with_noise(&self, x: &[f64], noise: &Matrix) -> Result<f64> {
        self.check_input(x)?;
        if noise.nrows() == 0 || noise.ncols() != self.architecture.latent_dim {
            return Err(Error::ShapeMismatch("noise must have latent_dim columns and >= 1 row".into()));
        }
        let stats = self.encode(x)?;
        let logs: Vec<f64> = noise
            .rows_iter()
            .map(|eps| {
                let z = reparameterize(&stats, eps)?;
                let (_, _, _, out) = self.decode_logits(&z, None);
                Ok(self.log_likelihood(x, &out))
            })
            .collect::<Result<_>>()?;
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        Ok(max + sum.ln() - (logs.len() as f64).ln())
    }

    pub fn reconstruction_probability(&self, x: &[f64], n_samples: usize, seed: u64) -> Result<f64> {
        if n_samples == 0 {
            return Err(Error::InvalidHyperparameter("n_samples must be >= 1".into()));
        }
        let noise = standard_normal_matrix(n_samples, self.architecture.latent_dim, seed);
        self.reconstruction_probability_with_noise(x, &noise)
    }

    /// Scores every row, seeding row `i` with `seed ^ row_id`.
    pub fn reconstruction_scores(&self, data: &Dataset, n_samples: usize, seed: u64) -> Result<Vec<f64>> {
        (0..data.n_rows())
            .into_par_iter()
            .map(|i| self.reconstruction_probability(data.features().row(i), n_samples, seed ^ data.row_ids()[i]))
            .collect()
    }

    /// Fresh Bernoulli dropout masks for `n` instances.
    pub fn sample_dropout_masks(&self, n: usize, r: &mut impl Rng) -> Vec<DropoutMask> {
        let p = self.architecture.dropout_rate;
        let keep = 1.0 / (1.0 - p);
        let widths: Vec<usize> = self
            .architecture
            .hidden_dims
            .iter()
            .copied()
            .chain(self.architecture.hidden_dims.iter().rev().copied())
            .collect();
        (0..n)
            .map(|_| {
                DropoutMask(
                    widths
                        .iter()
                        .map(|&w| (0..w).map(|_| if r.random::<f64>() < p { 0.0 } else { keep }).collect())
                        .collect(),
                )
            })
            .collect()
    }
}

pub fn standard_normal_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = rng(seed);
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut r)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape is consistent")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainRows {
    /// Majority (label 0) rows only.
    #[default]
    Normal,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub train_on: TrainRows,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self { epochs: 50, batch_size: 64, learning_rate: 1e-3, seed: 0, train_on: TrainRows::Normal }
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

/// Mini-batch Adam on the mean negative ELBO.
pub fn train_vae(
    train: &Dataset,
    arch: &VaeArchitecture,
    cfg: &VaeTrainConfig,
    warnings: &mut Warnings,
) -> Result<TrainedVae> {
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidHyperparameter("epochs, batch_size and learning_rate must be positive".into()));
    }
    if train.n_features() != arch.input_dim {
        return Err(Error::DimensionMismatch { expected: arch.input_dim, found: train.n_features() });
    }
    let rows = match cfg.train_on {
        TrainRows::Normal => train.class_rows(0),
        TrainRows::All => (0..train.n_rows()).collect(),
    };
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = TrainedVae::init(arch.clone(), cfg.seed)?;
    model.check_range(&train.features().select_rows(&rows))?;
    let mut adam = Adam::new(model.weights.len(), cfg.learning_rate);
    let mut r = rng(derive_seed(cfg.seed, 0x7661_65));
    let mut order = rows;
    let mut clamps = 0;
    let use_dropout = arch.dropout_rate > 0.0 && !arch.hidden_dims.is_empty();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.features().select_rows(chunk);
            let noise = {
                let data = (0..chunk.len() * arch.latent_dim).map(|_| StandardNormal.sample(&mut r)).collect();
                Matrix::from_vec(chunk.len(), arch.latent_dim, data)?
            };
            let masks = use_dropout.then(|| model.sample_dropout_masks(chunk.len(), &mut r));
            let (loss, grad, c) = model.loss_and_gradient(&batch, &noise, masks.as_deref(), true)?;
            clamps += c;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch });
            }
            total += loss * chunk.len() as f64;
            adam.step(&mut model.weights, &grad);
        }
        model.training_log.push((epoch, total / order.len() as f64));
    }
    if clamps > 0 {
        warnings.push(format!("VAE: log-variance clamped to [-10, 10] {clamps} time(s)"));
    }
    Ok(model)
}
