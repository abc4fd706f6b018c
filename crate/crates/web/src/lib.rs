//! wasm-bindgen surface for the static demo page in `www/`.
//!
//! Each export is a thin wrapper over a plain function that returns a
//! `craftlora::Result`, so the logic is testable off the browser.

use craftlora::guidance::{gamma_schedule, temporal_alpha, GKind, GuidanceConfig};
use craftlora::pairgen::{gaussian_lowpass, style_residual, synthetic_composite};
use craftlora::subspace::RankSchedule;
use craftlora::Error;
use wasm_bindgen::prelude::*;

/// Composite, low-pass and residual (shifted by 0.5) of the synthetic image
/// `(content, style)`, concatenated row-major.
pub fn split_composite(content: usize, style: usize, side: usize, sigma: f64, seed: u64) -> craftlora::Result<Vec<f64>> {
    if side < 2 || side > 64 {
        return Err(Error::ConfigInvalid(format!("side must be in 2..=64, got {side}")));
    }
    let img = synthetic_composite(content, style, side, seed);
    let low = gaussian_lowpass(&img, sigma)?;
    let res = style_residual(&img, sigma)?;
    let mut out = img.pixels().to_vec();
    out.extend_from_slice(low.pixels());
    out.extend(res.pixels().iter().map(|v| v + 0.5));
    Ok(out)
}

/// `[γ_c_eff, γ_s_eff, α]` for `t = T … 1` with unit branch gains.
pub fn schedule_table(cfg: &GuidanceConfig) -> craftlora::Result<Vec<f64>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(3 * cfg.steps);
    for t in (1..=cfg.steps).rev() {
        let alpha = temporal_alpha(t, cfg);
        let (ic, is) = gamma_schedule(t, cfg.content_window, cfg.style_window);
        out.extend([alpha * ic, alpha * is, alpha]);
    }
    Ok(out)
}

pub fn layer_ranks(r_max: usize, r_min: usize, layers: usize) -> craftlora::Result<Vec<u32>> {
    let s = RankSchedule::new(r_max, r_min, layers)?;
    (1..=layers).map(|l| s.rank_at(l).map(|r| r as u32)).collect()
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn frequency_split(content: usize, style: usize, side: usize, sigma: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    split_composite(content, style, side, sigma, seed as u64).map_err(js)
}

#[allow(clippy::too_many_arguments)]
#[wasm_bindgen]
pub fn guidance_schedule(
    steps: usize,
    content_start: usize,
    content_end: usize,
    style_start: usize,
    style_end: usize,
    alpha_min: f64,
    alpha_max: f64,
    cosine: bool,
) -> Result<Vec<f64>, JsError> {
    let cfg = GuidanceConfig {
        steps,
        content_window: (content_start, content_end),
        style_window: (style_start, style_end),
        alpha_min,
        alpha_max,
        g_kind: if cosine { GKind::Cosine } else { GKind::Linear },
        ..GuidanceConfig::default()
    };
    schedule_table(&cfg).map_err(js)
}

#[wasm_bindgen]
pub fn rank_schedule(r_max: usize, r_min: usize, layers: usize) -> Result<Vec<u32>, JsError> {
    layer_ranks(r_max, r_min, layers).map_err(js)
}
