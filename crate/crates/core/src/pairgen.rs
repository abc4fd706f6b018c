//! Frequency-domain content/style decomposition and the contrastive pair
//! dataset built from it.
//!
//! Content is the Gaussian low-pass of an image and style is the residual.
//! Cutoffs are fractions of the Nyquist radial frequency. Masked filtering
//! for the generation path uses an orthonormal DCT-II.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::backbone::LayeredBackbone;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::guidance::encode_semantic;
use crate::par;
use crate::image::ImageGrid;
use crate::rng::{self, StreamRng};
use crate::tensorcore::Matrix;

/// Cutoffs evaluated when choosing σ.
pub const SIGMA_SWEEP: [f64; 7] = [0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5];
pub const DEFAULT_SIGMA: f64 = 0.35;

fn check_cutoff(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma <= 1.0 {
        Ok(())
    } else {
        Err(Error::BadCutoff(sigma))
    }
}

/// Frequency of FFT bin `k` of an `n`-point transform, as a fraction of Nyquist.
fn fft_bin_frequency(k: usize, n: usize) -> f64 {
    let folded = k.min(n - k) as f64;
    folded / (n as f64 / 2.0)
}

fn fft2(data: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for row in data.chunks_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
}

/// Gaussian low-pass: the spectrum is weighted by `exp(−(f/σ)²/2)` with `f`
/// the radial frequency in units of Nyquist. The DC gain is exactly one, so
/// the first pixel is taken out before the transform and added back after;
/// a constant image then comes back bit for bit.
pub fn gaussian_lowpass(img: &ImageGrid, sigma: f64) -> Result<ImageGrid> {
    check_cutoff(sigma)?;
    let (h, w) = (img.height(), img.width());
    let offset = img.pixels().first().copied().unwrap_or(0.0);
    let mut buf: Vec<Complex<f64>> = img.pixels().iter().map(|&p| Complex::new(p - offset, 0.0)).collect();
    fft2(&mut buf, h, w, false);
    for y in 0..h {
        let fy = fft_bin_frequency(y, h);
        for x in 0..w {
            let fx = fft_bin_frequency(x, w);
            let f2 = fy * fy + fx * fx;
            buf[y * w + x] *= (-0.5 * f2 / (sigma * sigma)).exp();
        }
    }
    fft2(&mut buf, h, w, true);
    let norm = (h * w) as f64;
    ImageGrid::new(h, w, buf.iter().map(|c| offset + c.re / norm).collect())
}

/// `img − gaussian_lowpass(img, σ)`; signed.
pub fn style_residual(img: &ImageGrid, sigma: f64) -> Result<ImageGrid> {
    let low = gaussian_lowpass(img, sigma)?;
    img.zip_map(&low, |a, b| a - b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Low,
    High,
}

/// Binary DCT-domain mask. `Low` keeps coefficients whose normalized radial
/// frequency `sqrt((u/H)² + (v/W)²)` is at most `cutoff`; `High` keeps the rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyMask {
    pub kind: MaskKind,
    pub cutoff: f64,
}

impl FrequencyMask {
    pub fn new(kind: MaskKind, cutoff: f64) -> Result<Self> {
        if cutoff > 0.0 && cutoff < 1.0 {
            Ok(Self { kind, cutoff })
        } else {
            Err(Error::BadCutoff(cutoff))
        }
    }

    pub fn low(cutoff: f64) -> Result<Self> {
        Self::new(MaskKind::Low, cutoff)
    }

    pub fn high(cutoff: f64) -> Result<Self> {
        Self::new(MaskKind::High, cutoff)
    }

    pub fn weight(&self, u: usize, v: usize, h: usize, w: usize) -> f64 {
        let fu = u as f64 / h as f64;
        let fv = v as f64 / w as f64;
        let inside = (fu * fu + fv * fv).sqrt() <= self.cutoff;
        match (self.kind, inside) {
            (MaskKind::Low, true) | (MaskKind::High, false) => 1.0,
            _ => 0.0,
        }
    }
}

/// Orthonormal DCT-II basis: row `k` is `s_k cos(π(2n+1)k / 2N)`.
pub fn dct_matrix(n: usize) -> Matrix {
    Matrix::from_fn(n, n, |k, i| {
        let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        s * (PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos()
    })
}

pub fn dct2(img: &ImageGrid) -> ImageGrid {
    let (h, w) = (img.height(), img.width());
    let x = Matrix::from_vec(h, w, img.pixels().to_vec()).expect("image as matrix");
    let out = dct_matrix(h).matmul(&x).and_then(|m| m.matmul_nt(&dct_matrix(w))).expect("dct shapes");
    ImageGrid::new(h, w, out.into_values()).expect("dct output")
}

pub fn idct2(coeffs: &ImageGrid) -> ImageGrid {
    let (h, w) = (coeffs.height(), coeffs.width());
    let x = Matrix::from_vec(h, w, coeffs.pixels().to_vec()).expect("coefficients as matrix");
    let out = dct_matrix(h).matmul_tn(&x).and_then(|m| m.matmul(&dct_matrix(w))).expect("idct shapes");
    ImageGrid::new(h, w, out.into_values()).expect("idct output")
}

/// `F⁻¹(M ⊙ F(latent))` with `F` the orthonormal 2-D DCT-II.
pub fn freq_mask_filter(latent: &ImageGrid, mask: &FrequencyMask) -> ImageGrid {
    let (h, w) = (latent.height(), latent.width());
    let mut c = dct2(latent);
    for u in 0..h {
        for v in 0..w {
            c.pixels_mut()[u * w + v] *= mask.weight(u, v, h, w);
        }
    }
    idct2(&c)
}

/// One denoising step whose clean-image estimate is frequency-filtered
/// before the DDPM posterior update. `mask = None` is the plain step.
pub fn filtered_denoise_step(
    net: &Denoiser,
    weights: &LayeredBackbone,
    z_t: &ImageGrid,
    t: usize,
    embedding: &[f64],
    mask: Option<&FrequencyMask>,
    rng: &mut StreamRng,
) -> Result<ImageGrid> {
    if !net.is_trained() {
        return Err(Error::ModelUntrained);
    }
    let eps = net.predict_eps(weights, z_t, t, embedding)?;
    let x0 = net.predict_x0(z_t, t, &eps)?;
    let x0 = match mask {
        Some(m) => freq_mask_filter(&x0, m),
        None => x0,
    };
    net.schedule().step_from_x0(z_t, t, &x0, rng)
}

/// Full filtered trajectory from seeded noise at `t = T` down to `t = 1`.
pub fn filtered_trajectory(
    net: &Denoiser,
    weights: &LayeredBackbone,
    embedding: &[f64],
    mask: Option<&FrequencyMask>,
    seed: u64,
) -> Result<ImageGrid> {
    let side = net.config().side;
    let mut rng = rng::seeded(seed);
    let mut z = ImageGrid::new(side, side, rng::gaussian_vec(&mut rng, side * side))?;
    for t in (1..=net.schedule().steps()).rev() {
        z = filtered_denoise_step(net, weights, &z, t, embedding, mask, &mut rng)?;
    }
    Ok(z)
}

pub const CONTENT_SUBJECTS: [&str; 10] = [
    "a red car",
    "a small dog",
    "a wooden house",
    "a tall tree",
    "a smiling person",
    "a sleeping cat",
    "a sail boat",
    "a blue bicycle",
    "a yellow flower",
    "a snowy mountain",
];

pub const STYLE_NAMES: [&str; 10] = [
    "in the style of van gogh",
    "in watercolor style",
    "in oil painting style",
    "in pixel art style",
    "in pencil sketch style",
    "in cyberpunk style",
    "in ukiyo-e style",
    "in pointillism style",
    "in charcoal style",
    "in mosaic style",
];

/// Varying modifiers attached to the content-emphasis member.
pub const STYLE_MODIFIERS: [&str; 10] = [
    "watercolor", "oil painting", "pastel", "ink wash", "gouache", "crayon", "fresco", "etching", "airbrush", "woodcut",
];

/// Varying modifiers attached to the style-emphasis member.
pub const CONTENT_MODIFIERS: [&str; 10] = [
    "starry night", "sunflower", "harbor", "orchard", "cathedral", "meadow", "lighthouse", "village", "river", "forest",
];

fn vocab(list: &[&str; 10], i: usize) -> String {
    if i < list.len() {
        list[i].to_string()
    } else {
        format!("{} variant {}", list[i % list.len()], i / list.len())
    }
}

pub fn content_prompt(i: usize) -> String {
    vocab(&CONTENT_SUBJECTS, i)
}

pub fn style_prompt(j: usize) -> String {
    vocab(&STYLE_NAMES, j)
}

/// Conditioning text for a member: the two prompt streams concatenated.
pub fn joint_text(a: &str, b: &str) -> String {
    format!("{a} {b}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastPair {
    pub pair_id: usize,
    pub content_index: usize,
    pub style_index: usize,
    /// Content-emphasis image (content fixed, texture varies with the style).
    pub content_image: ImageGrid,
    /// Style-emphasis image (style fixed, subject varies with the content).
    pub style_image: ImageGrid,
    pub content_prompt: String,
    pub style_prompt: String,
    pub content_modifier: String,
    pub style_modifier: String,
}

impl ContrastPair {
    /// Text conditioning the content-emphasis member.
    pub fn content_text(&self) -> String {
        joint_text(&self.content_prompt, &self.style_modifier)
    }

    /// Text conditioning the style-emphasis member.
    pub fn style_text(&self) -> String {
        joint_text(&self.content_modifier, &self.style_prompt)
    }

    pub fn is_degenerate(&self) -> bool {
        self.content_image == self.style_image
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DatasetMode {
    #[default]
    Synthetic,
    Diffusion,
}

/// Low-frequency layout for content reference `i`: soft discs and bars on a
/// flat background.
pub fn synthetic_layout(i: usize, side: usize, seed: u64) -> ImageGrid {
    let mut rng = rng::stream(seed, 0xC0_0000 + i as u64);
    let u = rng::uniform_vec(&mut rng, 12, 0.0, 1.0);
    let s = side as f64;
    let background = 0.15 + 0.25 * u[0];
    let shapes = 1 + (i % 3);
    ImageGrid::from_fn(side, side, |y, x| {
        let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
        let mut v = background;
        for k in 0..shapes {
            let cy = s * (0.2 + 0.6 * u[1 + 3 * k]);
            let cx = s * (0.2 + 0.6 * u[2 + 3 * k]);
            let r = s * (0.15 + 0.2 * u[3 + 3 * k]);
            let d = if (i + k) % 2 == 0 {
                ((yf - cy).powi(2) + (xf - cx).powi(2)).sqrt()
            } else {
                (yf - cy).abs().max((xf - cx).abs() * 0.6)
            };
            let edge = 1.0 / (1.0 + ((d - r) / (0.08 * s)).exp());
            v += (0.55 - 0.1 * k as f64) * edge;
        }
        v.clamp(0.0, 1.0)
    })
}

/// High-frequency texture for style reference `j`: an oriented grating near
/// Nyquist with a per-style tone curve.
pub fn synthetic_texture(j: usize, side: usize, seed: u64) -> ImageGrid {
    let mut rng = rng::stream(seed, 0x57_0000 + j as u64);
    let u = rng::uniform_vec(&mut rng, 5, 0.0, 1.0);
    let angle = PI * (j as f64 / 10.0 + 0.1 * u[0]);
    let freq = 0.36 + 0.13 * u[1];
    let phase = 2.0 * PI * u[2];
    let gamma = 0.6 + 0.9 * u[3];
    let second = 0.3 * u[4];
    ImageGrid::from_fn(side, side, |y, x| {
        let arg = 2.0 * PI * freq * (angle.cos() * x as f64 + angle.sin() * y as f64) + phase;
        let checker = if (x + y + j) % 2 == 0 { 1.0 } else { -1.0 };
        let g = 0.5 + 0.5 * ((1.0 - second) * arg.sin() + second * checker);
        g.clamp(0.0, 1.0).powf(gamma)
    })
}

/// Pixel-space composite of content `i` rendered with style `j`.
pub fn synthetic_composite(i: usize, j: usize, side: usize, seed: u64) -> ImageGrid {
    let layout = synthetic_layout(i, side, seed);
    let texture = synthetic_texture(j, side, seed);
    layout.zip_map(&texture, |a, b| (0.65 * a + 0.35 * b).clamp(0.0, 1.0)).expect("same shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub sigma: f64,
    pub n_content: usize,
    pub n_style: usize,
    pub mode: DatasetMode,
    pub side: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { sigma: DEFAULT_SIGMA, n_content: 10, n_style: 10, mode: DatasetMode::Synthetic, side: 16 }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        check_cutoff(self.sigma)?;
        if self.n_content == 0 || self.n_style == 0 || self.side == 0 {
            return Err(Error::ConfigInvalid("dataset needs n_content, n_style and side >= 1".into()));
        }
        Ok(())
    }
}

/// Cartesian product of `n_content` content references and `n_style` style
/// references. Pair `(i, j)` gets id `i·n_style + j`.
///
/// In synthetic mode the content member is the low-pass of the composite and
/// the style member its residual re-centered on mid-gray. Diffusion mode
/// needs a trained `net` and renders both members with filtered trajectories
/// (low mask for content, high mask for style).
pub fn generate_pair_dataset(cfg: &DatasetConfig, seed: u64, net: Option<&Denoiser>) -> Result<Vec<ContrastPair>> {
    cfg.validate()?;
    let ids: Vec<usize> = (0..cfg.n_content * cfg.n_style).collect();
    let build = |pair_id: usize| -> Result<ContrastPair> {
        let (i, j) = (pair_id / cfg.n_style, pair_id % cfg.n_style);
        let mut pair = ContrastPair {
            pair_id,
            content_index: i,
            style_index: j,
            content_image: ImageGrid::filled(1, 1, 0.0),
            style_image: ImageGrid::filled(1, 1, 0.0),
            content_prompt: content_prompt(i),
            style_prompt: style_prompt(j),
            content_modifier: vocab(&CONTENT_MODIFIERS, i),
            style_modifier: vocab(&STYLE_MODIFIERS, j),
        };
        match cfg.mode {
            DatasetMode::Synthetic => {
                let composite = synthetic_composite(i, j, cfg.side, seed);
                pair.content_image = gaussian_lowpass(&composite, cfg.sigma)?;
                pair.style_image = style_residual(&composite, cfg.sigma)?.map(|v| v + 0.5);
            }
            DatasetMode::Diffusion => {
                let net = net.ok_or(Error::ModelUntrained)?;
                if net.config().side != cfg.side {
                    return Err(Error::ShapeMismatch("denoiser and dataset image sizes differ".into()));
                }
                let pair_seed = seed.wrapping_add(pair_id as u64);
                let low = FrequencyMask::low(cfg.sigma)?;
                let high = FrequencyMask::high(cfg.sigma)?;
                let e_c = encode_semantic(&pair.content_text());
                let e_s = encode_semantic(&pair.style_text());
                let c = filtered_trajectory(net, net.backbone(), &e_c, Some(&low), rng::derive_seed(pair_seed, 1))?;
                let s = filtered_trajectory(net, net.backbone(), &e_s, Some(&high), rng::derive_seed(pair_seed, 2))?;
                pair.content_image = c.from_model_space();
                pair.style_image = s.from_model_space();
            }
        }
        if pair.is_degenerate() {
            log::warn!("pair {pair_id}: content and style members are identical");
        }
        Ok(pair)
    };
    par::map(&ids, |&id| build(id)).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(seed: u64, side: usize) -> ImageGrid {
        let mut rng = rng::seeded(seed);
        ImageGrid::new(side, side, rng::uniform_vec(&mut rng, side * side, 0.0, 1.0)).unwrap()
    }

    #[test]
    fn constant_image_passes_through_lowpass() {
        let img = ImageGrid::filled(16, 16, 0.37);
        let low = gaussian_lowpass(&img, 0.35).unwrap();
        assert_eq!(low, img);
        let res = style_residual(&img, 0.35).unwrap();
        assert_eq!(res.energy(), 0.0);
    }

    #[test]
    fn lowpass_preserves_mean_and_partitions() {
        let img = random_image(1, 16);
        for &s in &SIGMA_SWEEP {
            let low = gaussian_lowpass(&img, s).unwrap();
            assert!((low.mean() - img.mean()).abs() < 1e-9);
            let res = style_residual(&img, s).unwrap();
            let back = low.zip_map(&res, |a, b| a + b).unwrap();
            assert!(back.max_abs_diff(&img) < 1e-12);
        }
    }

    #[test]
    fn nyquist_checkerboard_is_removed() {
        let img = ImageGrid::from_fn(16, 16, |y, x| ((x + y) % 2) as f64);
        let low = gaussian_lowpass(&img, 0.35).unwrap();
        let mean = img.mean();
        assert!(low.pixels().iter().all(|p| (p - mean).abs() < 1e-3));
    }

    #[test]
    fn low_frequency_sinusoid_has_small_residual() {
        let img = ImageGrid::from_fn(16, 16, |_, x| (2.0 * PI * x as f64 / 16.0).sin());
        let res = style_residual(&img, 0.35).unwrap();
        assert!(res.energy() < 0.05 * img.energy());
    }

    #[test]
    fn bad_cutoffs_are_rejected() {
        let img = random_image(2, 4);
        assert!(matches!(gaussian_lowpass(&img, 0.0), Err(Error::BadCutoff(_))));
        assert!(matches!(style_residual(&img, 1.5), Err(Error::BadCutoff(_))));
        assert!(gaussian_lowpass(&img, 1.0).is_ok());
        assert!(FrequencyMask::low(1.0).is_err());
    }

    #[test]
    fn dct_round_trip() {
        let img = random_image(3, 8);
        assert!(idct2(&dct2(&img)).max_abs_diff(&img) < 1e-13);
    }

    #[test]
    fn masks_partition_the_spectrum() {
        let img = random_image(4, 16);
        for cutoff in [0.1, 0.35, 0.5, 0.9] {
            let lo = freq_mask_filter(&img, &FrequencyMask::low(cutoff).unwrap());
            let hi = freq_mask_filter(&img, &FrequencyMask::high(cutoff).unwrap());
            let sum = lo.zip_map(&hi, |a, b| a + b).unwrap();
            assert!(sum.max_abs_diff(&img) < 1e-9);
        }
    }

    #[test]
    fn dataset_cardinality_and_prompts() {
        let cfg = DatasetConfig::default();
        let pairs = generate_pair_dataset(&cfg, 7, None).unwrap();
        assert_eq!(pairs.len(), 100);
        let mut seen = std::collections::HashSet::new();
        for p in &pairs {
            assert!(seen.insert((p.content_index, p.style_index)));
            assert!(!p.content_prompt.is_empty() && !p.style_prompt.is_empty());
            assert!(!p.content_modifier.is_empty() && !p.style_modifier.is_empty());
        }
        let first: Vec<_> = pairs.iter().filter(|p| p.content_index == 0).collect();
        assert_eq!(first.len(), 10);
        assert!(first.iter().all(|p| p.content_prompt == first[0].content_prompt));
        let again = generate_pair_dataset(&cfg, 7, None).unwrap();
        assert_eq!(pairs, again);
        let one = DatasetConfig { n_content: 1, n_style: 1, ..cfg };
        assert_eq!(generate_pair_dataset(&one, 7, None).unwrap().len(), 1);
    }

    #[test]
    fn diffusion_mode_requires_trained_model() {
        let cfg = DatasetConfig { mode: DatasetMode::Diffusion, n_content: 1, n_style: 1, ..Default::default() };
        assert!(matches!(generate_pair_dataset(&cfg, 1, None), Err(Error::ModelUntrained)));
    }
}
