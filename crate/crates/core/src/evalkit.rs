//! Disentanglement metrics over a fixed random-projection feature space.
//!
//! Means are taken over sorted values so that reordering a set never moves
//! a metric by even one ulp.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::pairgen::{gaussian_lowpass, style_residual, synthetic_composite};
use crate::rng;
use crate::tensorcore::{dot, Matrix};

pub const FEATURE_DIM: usize = 128;

/// Centred, RMS-normalized pixels through a seeded `128 × P` Gaussian
/// projection, tanh, then unit normalization. Constant images map to the
/// zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    projection: Matrix,
    seed: u64,
}

impl FeatureExtractor {
    pub fn new(pixels: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, 0xC11F);
        let scale = 1.0 / (pixels as f64).sqrt();
        let values = rng::gaussian_vec(&mut rng, FEATURE_DIM * pixels).into_iter().map(|v| v * scale).collect();
        Self { projection: Matrix::from_vec(FEATURE_DIM, pixels, values).expect("projection shape"), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn pixels(&self) -> usize {
        self.projection.cols()
    }

    pub fn features(&self, img: &ImageGrid) -> Result<Vec<f64>> {
        if img.len() != self.pixels() {
            return Err(Error::ShapeMismatch(format!("extractor expects {} pixels, got {}", self.pixels(), img.len())));
        }
        let mean = img.mean();
        let centred: Vec<f64> = img.pixels().iter().map(|p| p - mean).collect();
        let rms = (dot(&centred, &centred) / centred.len() as f64).sqrt();
        if rms < 1e-12 {
            return Ok(vec![0.0; FEATURE_DIM]);
        }
        let x: Vec<f64> = centred.iter().map(|v| v / rms).collect();
        let mut f: Vec<f64> = (0..FEATURE_DIM).map(|k| dot(self.projection.row(k), &x).tanh()).collect();
        let norm = dot(&f, &f).sqrt();
        f.iter_mut().for_each(|v| *v /= norm);
        Ok(f)
    }

    /// Features of the content channel (low-pass).
    pub fn content_features(&self, img: &ImageGrid, sigma: f64) -> Result<Vec<f64>> {
        self.features(&gaussian_lowpass(img, sigma)?)
    }

    /// Features of the style channel (residual).
    pub fn style_features(&self, img: &ImageGrid, sigma: f64) -> Result<Vec<f64>> {
        self.features(&style_residual(img, sigma)?)
    }
}

fn is_zero(f: &[f64]) -> bool {
    f.iter().all(|v| *v == 0.0)
}

/// Cosine of two unit feature vectors; zero vectors are rejected.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if is_zero(a) || is_zero(b) {
        return Err(Error::ZeroFeature);
    }
    Ok(dot(a, b).clamp(-1.0, 1.0))
}

/// Order-independent mean.
pub fn sorted_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptySet("values"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean cosine between each generated feature vector and the reference.
pub fn mean_similarity(generated: &[Vec<f64>], reference: &[f64]) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::EmptySet("generated set"));
    }
    let sims = generated.iter().map(|g| cosine(g, reference)).collect::<Result<Vec<_>>>()?;
    sorted_mean(&sims)
}

/// S_c for one content: generations across styles against the content
/// reference.
pub fn content_preservation(fx: &FeatureExtractor, generated: &[ImageGrid], reference: &ImageGrid) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::EmptySet("generated set"));
    }
    let feats = generated.iter().map(|g| fx.features(g)).collect::<Result<Vec<_>>>()?;
    mean_similarity(&feats, &fx.features(reference)?)
}

/// S_s for one style: residual features of generations across contents
/// against the style reference's residual.
pub fn style_fidelity(fx: &FeatureExtractor, generated: &[ImageGrid], reference: &ImageGrid, sigma: f64) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::EmptySet("generated set"));
    }
    let feats = generated.iter().map(|g| fx.style_features(g, sigma)).collect::<Result<Vec<_>>>()?;
    mean_similarity(&feats, &fx.style_features(reference, sigma)?)
}

/// Interference between two content-feature vectors: their distance over
/// `√2` (the expected distance of independent unit vectors), capped at 1.
pub fn interference(a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (d2.sqrt() / std::f64::consts::SQRT_2).min(1.0)
}

/// `N_c × N_s` generations, row-major by content.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationGrid {
    pub n_content: usize,
    pub n_style: usize,
    pub images: Vec<Option<ImageGrid>>,
}

impl GenerationGrid {
    pub fn new(n_content: usize, n_style: usize) -> Self {
        Self { n_content, n_style, images: vec![None; n_content * n_style] }
    }

    pub fn set(&mut self, i: usize, j: usize, img: ImageGrid) {
        self.images[i * self.n_style + j] = Some(img);
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&ImageGrid> {
        self.images.get(i * self.n_style + j).and_then(Option::as_ref)
    }

    fn complete(&self) -> Result<Vec<&ImageGrid>> {
        if self.n_content == 0 || self.n_style == 0 || self.images.len() != self.n_content * self.n_style {
            return Err(Error::GridIncomplete(format!("grid is {}×{}", self.n_content, self.n_style)));
        }
        self.images
            .iter()
            .enumerate()
            .map(|(k, img)| {
                img.as_ref().ok_or_else(|| {
                    Error::GridIncomplete(format!("missing generation ({}, {})", k / self.n_style, k % self.n_style))
                })
            })
            .collect()
    }
}

/// S_x: for each content row, the mean interference over all style pairs
/// `(j, j′)` of low-pass features, averaged over rows. Needs two styles.
pub fn cross_influence(fx: &FeatureExtractor, grid: &GenerationGrid, sigma: f64) -> Result<f64> {
    let images = grid.complete()?;
    if grid.n_style < 2 {
        return Err(Error::GridIncomplete("cross influence needs at least two styles".into()));
    }
    let feats = images.iter().map(|g| fx.content_features(g, sigma)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(grid.n_content);
    for i in 0..grid.n_content {
        let row = &feats[i * grid.n_style..(i + 1) * grid.n_style];
        let mut vals = Vec::new();
        for j in 0..row.len() {
            for k in j + 1..row.len() {
                vals.push(interference(&row[j], &row[k]));
            }
        }
        rows.push(sorted_mean(&vals)?);
    }
    sorted_mean(&rows)
}

/// Mean of `1 − |cos|` between content and style component features.
pub fn separation_score(fx: &FeatureExtractor, pairs: &[(ImageGrid, ImageGrid)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptySet("component pairs"));
    }
    let vals = pairs
        .iter()
        .map(|(c, s)| Ok(1.0 - cosine(&fx.features(c)?, &fx.features(s)?)?.abs()))
        .collect::<Result<Vec<_>>>()?;
    sorted_mean(&vals)
}

/// Separation of low-pass/residual splits of the synthetic composites at
/// each σ, best first.
pub fn sigma_sweep(sigmas: &[f64], n_content: usize, n_style: usize, side: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    let fx = FeatureExtractor::new(side * side, seed);
    let mut table = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let mut pairs = Vec::with_capacity(n_content * n_style);
        for i in 0..n_content {
            for j in 0..n_style {
                let img = synthetic_composite(i, j, side, seed);
                pairs.push((gaussian_lowpass(&img, sigma)?, style_residual(&img, sigma)?));
            }
        }
        table.push((sigma, separation_score(&fx, &pairs)?));
    }
    table.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.total_cmp(&b.0)));
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub content_index: usize,
    pub style_index: usize,
    pub content_similarity: f64,
    pub style_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub s_c: f64,
    pub s_s: f64,
    pub s_x: f64,
    pub pairs: Vec<PairScore>,
    pub seed: u64,
    pub config_hash: String,
}

/// Scores a full grid against per-row content references and per-column
/// style references.
pub fn evaluate_grid(
    fx: &FeatureExtractor,
    grid: &GenerationGrid,
    content_refs: &[ImageGrid],
    style_refs: &[ImageGrid],
    sigma: f64,
    seed: u64,
    config_hash: String,
) -> Result<EvalReport> {
    let images = grid.complete()?;
    if content_refs.len() != grid.n_content || style_refs.len() != grid.n_style {
        return Err(Error::GridIncomplete("one reference per grid row and column is required".into()));
    }
    let c_ref = content_refs.iter().map(|r| fx.features(r)).collect::<Result<Vec<_>>>()?;
    let s_ref = style_refs.iter().map(|r| fx.style_features(r, sigma)).collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::with_capacity(images.len());
    for (k, img) in images.iter().enumerate() {
        let (i, j) = (k / grid.n_style, k % grid.n_style);
        pairs.push(PairScore {
            content_index: i,
            style_index: j,
            content_similarity: cosine(&fx.features(img)?, &c_ref[i])?,
            style_similarity: cosine(&fx.style_features(img, sigma)?, &s_ref[j])?,
        });
    }
    let s_c = sorted_mean(&pairs.iter().map(|p| p.content_similarity).collect::<Vec<_>>())?;
    let s_s = sorted_mean(&pairs.iter().map(|p| p.style_similarity).collect::<Vec<_>>())?;
    let s_x = cross_influence(fx, grid, sigma)?;
    Ok(EvalReport { s_c, s_s, s_x, pairs, seed, config_hash })
}
