//! Toy conditional ε-prediction network and the DDPM machinery around it.
//!
//! The network is a chain of `L` fully connected layers on flattened images:
//!
//! ```text
//! h₁ = tanh(x·W₁ + b₁) + c·W_cond + τ(t)·W_time
//! hₗ = hₗ₋₁ + tanh(hₗ₋₁·Wₗ + bₗ)          (l = 2 … L−1)
//! ε̂  = h_{L−1}·W_L + b_L + s_t·k(t)·x
//! ```
//!
//! The last term is a linear skip from the input: `k(t) = sqrt(1−ᾱ_t) /
//! (ᾱ_t·v + 1 − ᾱ_t)` is the best linear ε-predictor for data of per-pixel
//! variance `v`, and `s_t` a learned per-timestep gain starting at zero. The
//! hidden state is much narrower than the image, so without the skip most of
//! the noise could not reach the output.
//!
//! The `Wₗ` are the named backbone layers that projections and adapters act
//! on; biases and the conditioning/time projections are auxiliary and stay
//! frozen once the base model is trained.

use std::sync::atomic::{AtomicU64, Ordering};

use log::debug;
use serde::{Deserialize, Serialize};

use crate::backbone::{Layer, LayeredBackbone};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::optim::{Adam, WarmupCosine};
use crate::rng::{self, StreamRng};
use crate::tensorcore::Matrix;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    /// Images are `side × side`.
    pub side: usize,
    pub hidden: usize,
    pub layers: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { side: 16, hidden: 64, layers: 8, time_dim: 32, cond_dim: 64 }
    }
}

impl DenoiserConfig {
    pub fn pixels(&self) -> usize {
        self.side * self.side
    }

    pub fn validate(&self) -> Result<()> {
        if self.side == 0 || self.hidden == 0 || self.cond_dim == 0 {
            return Err(Error::ConfigInvalid("denoiser dimensions must be positive".into()));
        }
        if self.layers < 2 {
            return Err(Error::ConfigInvalid("denoiser needs at least 2 layers".into()));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::ConfigInvalid("time embedding dimension must be even and positive".into()));
        }
        Ok(())
    }

    pub fn layer_name(i: usize) -> String {
        format!("layer{}", i + 1)
    }

    /// `(d_in, d_out)` of layer `i` (0-based).
    pub fn layer_shape(&self, i: usize) -> (usize, usize) {
        let p = self.pixels();
        match i {
            0 => (p, self.hidden),
            i if i + 1 == self.layers => (self.hidden, p),
            _ => (self.hidden, self.hidden),
        }
    }
}

/// Per-pixel data variance (model space) assumed by the output skip.
pub const SKIP_DATA_VARIANCE: f64 = 0.1;

/// Variance schedule; timesteps are 1-based (`t ∈ 1..=T`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::ConfigInvalid("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::ConfigInvalid(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::ConfigInvalid("betas must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::ConfigInvalid("betas must be nondecreasing".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// Analytic part `k(t)` of the input-to-output skip.
    pub fn skip_gain(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        (1.0 - ab).sqrt() / (ab * SKIP_DATA_VARIANCE + 1.0 - ab)
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::OutOfRange(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// ᾱ_t, with ᾱ₀ = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// `sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·noise`
    pub fn forward_noise(&self, x0: &ImageGrid, t: usize, noise: &ImageGrid) -> Result<ImageGrid> {
        self.check_t(t)?;
        let (a, s) = (self.alpha_bar(t).sqrt(), (1.0 - self.alpha_bar(t)).sqrt());
        x0.zip_map(noise, |x, n| a * x + s * n)
    }

    /// `(x_t − sqrt(1 − ᾱ_t)·ε) / sqrt(ᾱ_t)`
    pub fn predict_x0(&self, x_t: &ImageGrid, t: usize, eps: &ImageGrid) -> Result<ImageGrid> {
        self.check_t(t)?;
        let (a, s) = (self.alpha_bar(t).sqrt(), (1.0 - self.alpha_bar(t)).sqrt());
        x_t.zip_map(eps, |x, e| (x - s * e) / a)
    }

    /// Coefficients `(c_x0, c_xt, σ_t)` of the posterior
    /// `q(x_{t−1} | x_t, x0) = N(c_x0·x0 + c_xt·x_t, σ_t²)`.
    pub fn posterior(&self, t: usize) -> (f64, f64, f64) {
        let ab_t = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let beta = self.beta(t);
        let c_x0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
        let c_xt = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let var = beta * (1.0 - ab_prev) / (1.0 - ab_t);
        (c_x0, c_xt, var.max(0.0).sqrt())
    }

    /// One ancestral step given a clean-image estimate. At `t = 1` the
    /// posterior mean is returned and `rng` is not touched.
    pub fn step_from_x0(&self, x_t: &ImageGrid, t: usize, x0: &ImageGrid, rng: &mut StreamRng) -> Result<ImageGrid> {
        self.check_t(t)?;
        let (c_x0, c_xt, sigma) = self.posterior(t);
        let mean = x0.zip_map(x_t, |a, b| c_x0 * a + c_xt * b)?;
        if t == 1 {
            return Ok(mean);
        }
        let noise = rng::gaussian_vec(rng, mean.len());
        let mut out = mean;
        for (p, z) in out.pixels_mut().iter_mut().zip(noise) {
            *p += sigma * z;
        }
        Ok(out)
    }

    /// Ancestral DDPM step from an ε estimate.
    pub fn ddpm_step(&self, x_t: &ImageGrid, t: usize, eps_hat: &ImageGrid, rng: &mut StreamRng) -> Result<ImageGrid> {
        let x0 = self.predict_x0(x_t, t, eps_hat)?;
        self.step_from_x0(x_t, t, &x0, rng)
    }
}

/// Sinusoidal timestep embedding.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(1000f64).ln() * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[2 * k] = arg.sin();
        out[2 * k + 1] = arg.cos();
    }
    out
}

/// Auxiliary (non-backbone) parameters of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxParams {
    pub biases: Vec<Vec<f64>>,
    pub cond_proj: Matrix,
    pub time_proj: Matrix,
    /// Learned skip gain `s_t`, one per timestep.
    pub skip: Vec<f64>,
}

/// Activations kept from a batched forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Matrix,
    ts: Vec<usize>,
    conds: Matrix,
    temb: Matrix,
    /// tanh outputs per activated layer (layers 0..L−1)
    acts: Vec<Matrix>,
    /// hidden states h₁ … h_{L−1}
    hidden: Vec<Matrix>,
}

/// Gradients for every parameter of the network.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub cond_proj: Matrix,
    pub time_proj: Matrix,
    pub skip: Vec<f64>,
}

#[derive(Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    backbone: LayeredBackbone,
    aux: AuxParams,
    trained_steps: u64,
    evals: AtomicU64,
}

impl Clone for Denoiser {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            schedule: self.schedule.clone(),
            backbone: self.backbone.clone(),
            aux: self.aux.clone(),
            trained_steps: self.trained_steps,
            evals: AtomicU64::new(0),
        }
    }
}

impl Denoiser {
    /// Seeded initialization: weights uniform in `±1/sqrt(d_in)`, the output
    /// layer scaled down by 10.
    pub fn init(config: DenoiserConfig, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        config.validate()?;
        let n_steps = schedule.steps();
        let mut rng = rng::stream(seed, 0xD0);
        let mut layers = Vec::with_capacity(config.layers);
        let mut biases = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let (din, dout) = config.layer_shape(i);
            let mut bound = 1.0 / (din as f64).sqrt();
            if i + 1 == config.layers {
                bound *= 0.1;
            }
            let w = Matrix::from_vec(din, dout, rng::uniform_vec(&mut rng, din * dout, -bound, bound))?;
            layers.push(Layer { name: DenoiserConfig::layer_name(i), weight: w });
            biases.push(vec![0.0; dout]);
        }
        let cb = 1.0 / (config.cond_dim as f64).sqrt();
        let cond_proj = Matrix::from_vec(
            config.cond_dim,
            config.hidden,
            rng::uniform_vec(&mut rng, config.cond_dim * config.hidden, -cb, cb),
        )?;
        let tb = 1.0 / (config.time_dim as f64).sqrt();
        let time_proj = Matrix::from_vec(
            config.time_dim,
            config.hidden,
            rng::uniform_vec(&mut rng, config.time_dim * config.hidden, -tb, tb),
        )?;
        Ok(Self {
            config,
            schedule,
            backbone: LayeredBackbone::new(layers)?,
            aux: AuxParams { biases, cond_proj, time_proj, skip: vec![0.0; n_steps] },
            trained_steps: 0,
            evals: AtomicU64::new(0),
        })
    }

    pub fn from_parts(
        config: DenoiserConfig,
        schedule: NoiseSchedule,
        backbone: LayeredBackbone,
        aux: AuxParams,
        trained_steps: u64,
    ) -> Result<Self> {
        config.validate()?;
        let net = Self { config, schedule, backbone, aux, trained_steps, evals: AtomicU64::new(0) };
        net.check_weights(&net.backbone)?;
        if net.aux.biases.len() != config.layers
            || net.aux.biases.iter().enumerate().any(|(i, b)| b.len() != config.layer_shape(i).1)
            || net.aux.cond_proj.shape() != (config.cond_dim, config.hidden)
            || net.aux.time_proj.shape() != (config.time_dim, config.hidden)
            || net.aux.skip.len() != net.schedule.steps()
        {
            return Err(Error::ShapeMismatch("auxiliary parameters do not match the config".into()));
        }
        Ok(net)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn backbone(&self) -> &LayeredBackbone {
        &self.backbone
    }

    pub fn aux(&self) -> &AuxParams {
        &self.aux
    }

    pub fn trained_steps(&self) -> u64 {
        self.trained_steps
    }

    pub fn is_trained(&self) -> bool {
        self.trained_steps > 0
    }

    /// Same auxiliary parameters, different backbone weights.
    pub fn with_backbone(&self, backbone: LayeredBackbone) -> Result<Self> {
        self.check_weights(&backbone)?;
        let mut out = self.clone();
        out.backbone = backbone;
        Ok(out)
    }

    pub fn null_embedding(&self) -> Vec<f64> {
        vec![0.0; self.config.cond_dim]
    }

    /// Number of `predict_eps` calls since construction or the last reset.
    pub fn eval_count(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn reset_eval_count(&self) {
        self.evals.store(0, Ordering::Relaxed);
    }

    pub fn check_weights(&self, weights: &LayeredBackbone) -> Result<()> {
        if weights.len() != self.config.layers {
            return Err(Error::ShapeMismatch(format!(
                "expected {} layers, got {}",
                self.config.layers,
                weights.len()
            )));
        }
        for i in 0..self.config.layers {
            if weights.weight(i).shape() != self.config.layer_shape(i) {
                return Err(Error::ShapeMismatch(format!(
                    "layer {} is {:?}, expected {:?}",
                    weights.layers()[i].name,
                    weights.weight(i).shape(),
                    self.config.layer_shape(i)
                )));
            }
        }
        Ok(())
    }

    /// Batched forward pass; row `k` of `x` is a flattened image at timestep
    /// `ts[k]` with conditioning row `conds[k]`.
    pub fn forward_batch(
        &self,
        weights: &LayeredBackbone,
        x: &Matrix,
        ts: &[usize],
        conds: &Matrix,
    ) -> Result<(Matrix, ForwardCache)> {
        let n = x.rows();
        if x.cols() != self.config.pixels() || ts.len() != n || conds.shape() != (n, self.config.cond_dim) {
            return Err(Error::ShapeMismatch(format!(
                "batch input {:?}, {} timesteps, conditioning {:?}",
                x.shape(),
                ts.len(),
                conds.shape()
            )));
        }
        let temb = Matrix::from_vec(
            n,
            self.config.time_dim,
            ts.iter().flat_map(|&t| time_embedding(t, self.config.time_dim)).collect(),
        )?;
        let l_count = self.config.layers;
        let mut acts = Vec::with_capacity(l_count - 1);
        let mut hidden = Vec::with_capacity(l_count - 1);

        let mut a = x.matmul(weights.weight(0))?;
        add_bias(&mut a, &self.aux.biases[0]);
        let act = a.map_tanh();
        let mut h = act.clone();
        h.axpy(1.0, &conds.matmul(&self.aux.cond_proj)?)?;
        h.axpy(1.0, &temb.matmul(&self.aux.time_proj)?)?;
        acts.push(act);
        hidden.push(h);

        for l in 1..l_count - 1 {
            let prev = hidden.last().expect("hidden state");
            let mut a = prev.matmul(weights.weight(l))?;
            add_bias(&mut a, &self.aux.biases[l]);
            let act = a.map_tanh();
            let mut h = prev.clone();
            h.axpy(1.0, &act)?;
            acts.push(act);
            hidden.push(h);
        }
        let last = l_count - 1;
        let mut out = hidden.last().expect("hidden state").matmul(weights.weight(last))?;
        add_bias(&mut out, &self.aux.biases[last]);
        for (r, &t) in ts.iter().enumerate() {
            let k = self.aux.skip[t - 1] * self.schedule.skip_gain(t);
            for (o, xv) in out.row_mut(r).iter_mut().zip(x.row(r)) {
                *o += k * xv;
            }
        }
        Ok((out, ForwardCache { input: x.clone(), ts: ts.to_vec(), conds: conds.clone(), temb, acts, hidden }))
    }

    /// Backpropagates `d_out = ∂L/∂ε̂` through a cached forward pass.
    pub fn backward_batch(&self, weights: &LayeredBackbone, cache: &ForwardCache, d_out: &Matrix) -> Result<NetGrads> {
        let l_count = self.config.layers;
        let mut d_weights = vec![Matrix::zeros(0, 0); l_count];
        let mut d_biases = vec![Vec::new(); l_count];

        let last = l_count - 1;
        let mut d_skip = vec![0.0; self.aux.skip.len()];
        for (r, &t) in cache.ts.iter().enumerate() {
            d_skip[t - 1] += self.schedule.skip_gain(t) * crate::tensorcore::dot(d_out.row(r), cache.input.row(r));
        }
        d_weights[last] = cache.hidden[last - 1].matmul_tn(d_out)?;
        d_biases[last] = column_sums(d_out);
        let mut dh = d_out.matmul_nt(weights.weight(last))?;

        for l in (1..last).rev() {
            let da = tanh_backward(&dh, &cache.acts[l]);
            d_weights[l] = cache.hidden[l - 1].matmul_tn(&da)?;
            d_biases[l] = column_sums(&da);
            dh.axpy(1.0, &da.matmul_nt(weights.weight(l))?)?;
        }
        let d_cond = cache.conds.matmul_tn(&dh)?;
        let d_time = cache.temb.matmul_tn(&dh)?;
        let da0 = tanh_backward(&dh, &cache.acts[0]);
        d_weights[0] = cache.input.matmul_tn(&da0)?;
        d_biases[0] = column_sums(&da0);
        Ok(NetGrads { weights: d_weights, biases: d_biases, cond_proj: d_cond, time_proj: d_time, skip: d_skip })
    }

    /// ε̂(x_t, t, c; W). Deterministic; bumps the evaluation counter.
    pub fn predict_eps(&self, weights: &LayeredBackbone, x_t: &ImageGrid, t: usize, cond: &[f64]) -> Result<ImageGrid> {
        self.check_weights(weights)?;
        self.schedule.check_t(t)?;
        if x_t.len() != self.config.pixels() || cond.len() != self.config.cond_dim {
            return Err(Error::ShapeMismatch(format!(
                "input of {} pixels / conditioning of {} dims",
                x_t.len(),
                cond.len()
            )));
        }
        self.evals.fetch_add(1, Ordering::Relaxed);
        let x = Matrix::from_vec(1, x_t.len(), x_t.pixels().to_vec())?;
        let c = Matrix::from_vec(1, cond.len(), cond.to_vec())?;
        let (out, _) = self.forward_batch(weights, &x, &[t], &c)?;
        ImageGrid::new(x_t.height(), x_t.width(), out.into_values())
    }

    pub fn predict_x0(&self, x_t: &ImageGrid, t: usize, eps: &ImageGrid) -> Result<ImageGrid> {
        self.schedule.predict_x0(x_t, t, eps)
    }

    pub fn forward_noise(&self, x0: &ImageGrid, t: usize, noise: &ImageGrid) -> Result<ImageGrid> {
        self.schedule.forward_noise(x0, t, noise)
    }
}

trait MapTanh {
    fn map_tanh(&self) -> Matrix;
}

impl MapTanh for Matrix {
    fn map_tanh(&self) -> Matrix {
        let mut out = self.clone();
        out.values_mut().iter_mut().for_each(|v| *v = v.tanh());
        out
    }
}

fn add_bias(m: &mut Matrix, bias: &[f64]) {
    for r in 0..m.rows() {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

fn tanh_backward(dh: &Matrix, act: &Matrix) -> Matrix {
    let mut out = dh.clone();
    for (d, a) in out.values_mut().iter_mut().zip(act.values()) {
        *d *= 1.0 - a * a;
    }
    out
}

/// One noisy training example drawn for a minibatch.
#[derive(Debug, Clone)]
pub struct NoisedBatch {
    pub x_t: Matrix,
    pub noise: Matrix,
    pub ts: Vec<usize>,
}

/// Draws timesteps uniformly in `1..=T` and Gaussian noise for each row of
/// `x0`, returning the noised inputs.
pub fn noise_batch(schedule: &NoiseSchedule, x0: &Matrix, rng: &mut StreamRng) -> NoisedBatch {
    let (n, p) = x0.shape();
    let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let noise = Matrix::from_vec(n, p, rng::gaussian_vec(rng, n * p)).expect("noise shape");
    let mut x_t = Matrix::zeros(n, p);
    for r in 0..n {
        let (a, s) = (schedule.alpha_bar(ts[r]).sqrt(), (1.0 - schedule.alpha_bar(ts[r])).sqrt());
        for c in 0..p {
            x_t[(r, c)] = a * x0[(r, c)] + s * noise[(r, c)];
        }
    }
    NoisedBatch { x_t, noise, ts }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Probability of replacing the conditioning with the null embedding.
    pub cond_dropout: f64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self { steps: 3000, lr: 2e-3, batch_size: 16, cond_dropout: 0.1 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

/// Mean-squared ε-matching on `(image, embedding)` pairs (images already in
/// model space). Trains every parameter with Adam and a cosine schedule.
pub fn train_denoiser(
    net: &mut Denoiser,
    data: &[(ImageGrid, Vec<f64>)],
    cfg: &DenoiserTrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(0.0..=1.0).contains(&cfg.cond_dropout) {
        return Err(Error::ConfigInvalid("denoiser training needs batch > 0, lr > 0, dropout in [0,1]".into()));
    }
    let p = net.config.pixels();
    let cd = net.config.cond_dim;
    if data.iter().any(|(img, e)| img.len() != p || e.len() != cd) {
        return Err(Error::ShapeMismatch("training example does not match the network".into()));
    }
    let l_count = net.config.layers;
    let mut sizes: Vec<usize> = (0..l_count).map(|i| net.backbone.weight(i).values().len()).collect();
    sizes.extend(net.aux.biases.iter().map(Vec::len));
    sizes.push(net.aux.cond_proj.values().len());
    sizes.push(net.aux.time_proj.values().len());
    sizes.push(net.aux.skip.len());
    let mut adam = Adam::new(&sizes);
    let sched = WarmupCosine { start: cfg.lr * 0.1, peak: cfg.lr, floor: cfg.lr * 0.05, warmup: cfg.steps / 20, total: cfg.steps };
    let mut rng = rng::stream(seed, 0xBA5E);
    let mut report = TrainReport::default();

    for step in 0..cfg.steps {
        let n = cfg.batch_size;
        let mut x0 = Matrix::zeros(n, p);
        let mut conds = Matrix::zeros(n, cd);
        for r in 0..n {
            let (img, emb) = &data[rng.random_range(0..data.len())];
            x0.row_mut(r).copy_from_slice(img.pixels());
            if rng.random::<f64>() >= cfg.cond_dropout {
                conds.row_mut(r).copy_from_slice(emb);
            }
        }
        let batch = noise_batch(&net.schedule, &x0, &mut rng);
        let (out, cache) = net.forward_batch(&net.backbone, &batch.x_t, &batch.ts, &conds)?;
        let diff = out.sub(&batch.noise)?;
        let count = (n * p) as f64;
        let loss = diff.frobenius_sq() / count;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("denoiser loss diverged at step {step}")));
        }
        report.losses.push(loss);
        let d_out = diff.scale(2.0 / count);
        let grads = net.backward_batch(&net.backbone, &cache, &d_out)?;

        let lr = sched.lr(step);
        adam.tick();
        for (i, g) in grads.weights.iter().enumerate() {
            adam.update(i, net.backbone.weight_mut(i).values_mut(), g.values(), lr);
        }
        for (i, g) in grads.biases.iter().enumerate() {
            adam.update(l_count + i, &mut net.aux.biases[i], g, lr);
        }
        adam.update(2 * l_count, net.aux.cond_proj.values_mut(), grads.cond_proj.values(), lr);
        adam.update(2 * l_count + 1, net.aux.time_proj.values_mut(), grads.time_proj.values(), lr);
        adam.update(2 * l_count + 2, &mut net.aux.skip, &grads.skip, lr);
        if step % 500 == 0 {
            debug!("denoiser step {step}: loss {loss:.5}");
        }
    }
    net.trained_steps += cfg.steps as u64;
    Ok(report)
}
