mod common;

use common::*;
use craftlora::denoiser::{train_denoiser, DenoiserTrainConfig};
use craftlora::guidance::encode_semantic;
use craftlora::pairgen::{generate_pair_dataset, DatasetConfig};
use craftlora::rng;
use craftlora::{ImageGrid, Matrix};

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn last_timestep_is_nearly_uncorrelated_with_the_data() {
    let s = schedule(50);
    let x0 = craftlora::pairgen::synthetic_composite(2, 3, 16, 1).to_model_space();
    let mut r = rng::seeded(1);
    let mut total = 0.0;
    for _ in 0..1000 {
        let noise = ImageGrid::new(16, 16, rng::gaussian_vec(&mut r, 256)).unwrap();
        total += pearson(s.forward_noise(&x0, 50, &noise).unwrap().pixels(), x0.pixels());
    }
    let mean = total / 1000.0;
    assert!(mean.abs() < 0.2, "mean correlation {mean}");
}

#[test]
fn forward_noise_round_trips_through_predict_x0() {
    let s = schedule(50);
    let mut r = rng::seeded(2);
    let mut worst = 0.0f64;
    for k in 0..100 {
        let t = 1 + k % 50;
        let x0 = ImageGrid::new(16, 16, rng::uniform_vec(&mut r, 256, -1.0, 1.0)).unwrap();
        let noise = ImageGrid::new(16, 16, rng::gaussian_vec(&mut r, 256)).unwrap();
        let xt = s.forward_noise(&x0, t, &noise).unwrap();
        worst = worst.max(s.predict_x0(&xt, t, &noise).unwrap().max_abs_diff(&x0));
    }
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn weight_perturbation_matches_the_jacobian() {
    let net = tiny_net(3, 20);
    let mut r = rng::seeded(3);
    let x = ImageGrid::new(4, 4, rng::gaussian_vec(&mut r, 16)).unwrap();
    let cond = encode_semantic("a small house");
    let t = 7;
    let base = net.predict_eps(net.backbone(), &x, t, &cond).unwrap();
    let xm = Matrix::from_vec(1, 16, x.pixels().to_vec()).unwrap();
    let cm = Matrix::from_vec(1, 64, cond.clone()).unwrap();
    let (_, cache) = net.forward_batch(net.backbone(), &xm, &[t], &cm).unwrap();
    let delta = 1e-6;
    for (layer, (i, j)) in [(0, (3, 5)), (1, (0, 15)), (2, (9, 2))] {
        let mut w = net.backbone().clone();
        w.weight_mut(layer)[(i, j)] += delta;
        let moved = net.predict_eps(&w, &x, t, &cond).unwrap();
        for k in [0, 6, 15] {
            let mut d_out = Matrix::zeros(1, 16);
            d_out[(0, k)] = 1.0;
            let jac = net.backward_batch(net.backbone(), &cache, &d_out).unwrap().weights[layer][(i, j)];
            let change = moved.pixels()[k] - base.pixels()[k];
            let rel = (jac * delta - change).abs() / change.abs().max(1e-15);
            assert!(rel < 1e-3, "layer {layer} out {k}: {} vs {change}", jac * delta);
        }
    }
}

#[test]
fn training_halves_the_loss_on_three_seeds() {
    let data = DatasetConfig { side: 16, n_content: 4, n_style: 8, ..DatasetConfig::default() };
    for seed in 0..3 {
        let pairs = generate_pair_dataset(&data, seed, None).unwrap();
        let images: Vec<_> = pairs
            .iter()
            .flat_map(|p| [(p.content_image.to_model_space(), encode_semantic(&p.content_text())), (p.style_image.to_model_space(), encode_semantic(&p.style_text()))])
            .collect();
        assert_eq!(images.len(), 64);
        let mut net = default_net(seed);
        let report = train_denoiser(&mut net, &images, &DenoiserTrainConfig { steps: 2000, ..Default::default() }, seed).unwrap();
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let (start, end) = (mean(&report.losses[..100]), mean(&report.losses[1900..]));
        assert!(end < 0.5 * start, "seed {seed}: {start} -> {end}");
        assert!(net.is_trained());
    }
}
