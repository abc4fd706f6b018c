//! Frozen, seed-initialized three-layer convolutional feature extractor used
//! as the perceptual term of the trunk loss.

use crate::error::{Error, Result};
use crate::rng;

const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq)]
struct ConvLayer {
    in_ch: usize,
    out_ch: usize,
    /// `[out][in][ky][kx]`
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ConvLayer {
    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((o * self.in_ch + i) * KERNEL + ky) * KERNEL + kx]
    }

    /// Same-padded 3×3 convolution followed by tanh.
    fn forward(&self, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let plane = h * w;
        let mut out = vec![0.0; self.out_ch * plane];
        for o in 0..self.out_ch {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = self.bias[o];
                    for i in 0..self.in_ch {
                        for ky in 0..KERNEL {
                            let yy = y as isize + ky as isize - 1;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for kx in 0..KERNEL {
                                let xx = x as isize + kx as isize - 1;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                acc += self.w(o, i, ky, kx) * input[i * plane + yy as usize * w + xx as usize];
                            }
                        }
                    }
                    out[o * plane + y * w + x] = acc.tanh();
                }
            }
        }
        out
    }

    /// Gradient w.r.t. the layer input given the gradient w.r.t. its
    /// (post-tanh) output `act`.
    fn backward_input(&self, act: &[f64], d_act: &[f64], h: usize, w: usize) -> Vec<f64> {
        let plane = h * w;
        let mut d_in = vec![0.0; self.in_ch * plane];
        for o in 0..self.out_ch {
            for y in 0..h {
                for x in 0..w {
                    let idx = o * plane + y * w + x;
                    let d_pre = d_act[idx] * (1.0 - act[idx] * act[idx]);
                    if d_pre == 0.0 {
                        continue;
                    }
                    for i in 0..self.in_ch {
                        for ky in 0..KERNEL {
                            let yy = y as isize + ky as isize - 1;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for kx in 0..KERNEL {
                                let xx = x as isize + kx as isize - 1;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                d_in[i * plane + yy as usize * w + xx as usize] += self.w(o, i, ky, kx) * d_pre;
                            }
                        }
                    }
                }
            }
        }
        d_in
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvFeatureExtractor {
    layers: Vec<ConvLayer>,
}

impl ConvFeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let channels = [1usize, 8, 8, 8];
        let mut rng = rng::stream(seed, 0xFEA7);
        let layers = channels
            .windows(2)
            .map(|c| {
                let (in_ch, out_ch) = (c[0], c[1]);
                let bound = 1.5 / ((in_ch * KERNEL * KERNEL) as f64).sqrt();
                ConvLayer {
                    in_ch,
                    out_ch,
                    weights: rng::uniform_vec(&mut rng, out_ch * in_ch * KERNEL * KERNEL, -bound, bound),
                    bias: rng::uniform_vec(&mut rng, out_ch, -0.1, 0.1),
                }
            })
            .collect();
        Self { layers }
    }

    /// Feature maps of every layer.
    pub fn features(&self, img: &[f64], h: usize, w: usize) -> Vec<Vec<f64>> {
        let mut maps = Vec::with_capacity(self.layers.len());
        let mut cur = img.to_vec();
        for layer in &self.layers {
            cur = layer.forward(&cur, h, w);
            maps.push(cur.clone());
        }
        maps
    }

    /// `Σ_j (1/M_j) ‖φ_j(pred) − φ_j(target)‖₁` and its gradient w.r.t. `pred`.
    pub fn loss_and_grad(&self, pred: &[f64], target: &[f64], h: usize, w: usize) -> Result<(f64, Vec<f64>)> {
        if pred.len() != h * w || target.len() != h * w {
            return Err(Error::ShapeMismatch("perceptual loss inputs".into()));
        }
        let fp = self.features(pred, h, w);
        let ft = self.features(target, h, w);
        let mut loss = 0.0;
        let mut d_maps: Vec<Vec<f64>> = Vec::with_capacity(fp.len());
        for (a, b) in fp.iter().zip(&ft) {
            let m = a.len() as f64;
            let mut d = vec![0.0; a.len()];
            for k in 0..a.len() {
                let diff = a[k] - b[k];
                loss += diff.abs() / m;
                d[k] = sign(diff) / m;
            }
            d_maps.push(d);
        }
        // walk back from the deepest layer, adding each layer's direct term
        let mut d_cur = d_maps.pop().expect("three layers");
        for j in (0..self.layers.len()).rev() {
            let d_in = self.layers[j].backward_input(&fp[j], &d_cur, h, w);
            if j == 0 {
                return Ok((loss, d_in));
            }
            d_cur = d_in;
            for (a, b) in d_cur.iter_mut().zip(&d_maps[j - 1]) {
                *a += b;
            }
        }
        unreachable!("extractor has at least one layer")
    }
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_inputs_give_zero_loss() {
        let fx = ConvFeatureExtractor::new(1);
        let img: Vec<f64> = (0..64).map(|k| (k as f64 * 0.37).sin()).collect();
        let (loss, grad) = fx.loss_and_grad(&img, &img, 8, 8).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let fx = ConvFeatureExtractor::new(2);
        let pred: Vec<f64> = (0..64).map(|k| (k as f64 * 0.71).cos()).collect();
        let target: Vec<f64> = (0..64).map(|k| (k as f64 * 0.13).sin()).collect();
        let (_, grad) = fx.loss_and_grad(&pred, &target, 8, 8).unwrap();
        let h = 1e-6;
        for idx in [0usize, 9, 27, 63] {
            let mut p = pred.clone();
            p[idx] += h;
            let up = fx.loss_and_grad(&p, &target, 8, 8).unwrap().0;
            p[idx] -= 2.0 * h;
            let down = fx.loss_and_grad(&p, &target, 8, 8).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad[idx]).abs() < 1e-6, "{idx}: {fd} vs {}", grad[idx]);
        }
    }
}
