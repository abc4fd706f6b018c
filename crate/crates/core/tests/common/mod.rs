#![allow(dead_code)]

use craftlora::adapters::{AdapterKind, AdapterSet, LayerRouting, LoraAdapter};
use craftlora::denoiser::{Denoiser, DenoiserConfig, NoiseSchedule};
use craftlora::rng::{self, StreamRng};
use craftlora::{ImageGrid, LayeredBackbone, Matrix};
use nalgebra::DMatrix;

pub fn gaussian_matrix(rng: &mut StreamRng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, rng::gaussian_vec(rng, rows * cols)).unwrap()
}

pub fn random_image(rng: &mut StreamRng, side: usize) -> ImageGrid {
    ImageGrid::new(side, side, rng::uniform_vec(rng, side * side, 0.0, 1.0)).unwrap()
}

pub fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.values())
}

/// Induced ∞-norm (largest absolute row sum).
pub fn inf_norm(m: &Matrix) -> f64 {
    (0..m.rows()).map(|r| m.row(r).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

pub fn svd_rank(m: &Matrix, threshold: f64) -> usize {
    if m.cols() == 0 {
        return 0;
    }
    to_na(m).svd(false, false).singular_values.iter().filter(|&&s| s > threshold).count()
}

pub fn bits(img: &ImageGrid) -> Vec<u64> {
    img.pixels().iter().map(|v| v.to_bits()).collect()
}

pub fn schedule(steps: usize) -> NoiseSchedule {
    NoiseSchedule::linear(steps, 1e-4, 0.15).unwrap()
}

/// Three layers of width 16 on 4×4 images.
pub fn tiny_net(seed: u64, steps: usize) -> Denoiser {
    let cfg = DenoiserConfig { side: 4, hidden: 16, layers: 3, time_dim: 8, cond_dim: 64 };
    Denoiser::init(cfg, schedule(steps), seed).unwrap()
}

pub fn default_net(seed: u64) -> Denoiser {
    Denoiser::init(DenoiserConfig::default(), schedule(50), seed).unwrap()
}

/// Adapter whose factors and gate are all random, so every update is nonzero.
pub fn random_adapter(kind: AdapterKind, host: &LayeredBackbone, routing: &LayerRouting, rank: usize, seed: u64) -> LoraAdapter {
    let mut a = LoraAdapter::zeros(kind, host, routing, rank, 64).unwrap();
    let mut rng = rng::seeded(seed);
    let p: Vec<f64> = rng::gaussian_vec(&mut rng, a.param_count()).into_iter().map(|v| 0.05 * v).collect();
    a.set_params(&p).unwrap();
    a
}

pub fn random_adapters(host: &LayeredBackbone, rank: usize, seed: u64) -> AdapterSet {
    let routing = LayerRouting::split_halves(host);
    let c = random_adapter(AdapterKind::Content, host, &routing, rank, seed);
    let s = random_adapter(AdapterKind::Style, host, &routing, rank, seed ^ 0x5eed);
    AdapterSet::new(routing, c, s).unwrap()
}

/// `|a − n| / max(|a|, |n|, 1e-6)`
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}
