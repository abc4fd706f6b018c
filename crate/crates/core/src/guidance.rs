//! Prompt markers, the toy semantic encoder, the expert gamma head and the
//! asymmetric classifier-free guidance sampler.
//!
//! The conditional pass runs on `W_init` plus the scheduled adapter updates;
//! the unconditional pass always runs on `W_init` with the null embedding.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::adapters::{aggregate_weights, AdapterSet};
use crate::backbone::LayeredBackbone;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::rng::{self, StreamRng};
use crate::tensorcore::{dot, Matrix};

/// Dimension of every text embedding.
pub const EMBED_DIM: usize = 64;

const MARKERS: [&str; 4] = ["<c>", "</c>", "<s>", "</s>"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub raw: String,
    pub stripped: String,
    pub content_span: Option<String>,
    pub style_span: Option<String>,
    pub has_content_marker: bool,
    pub has_style_marker: bool,
}

/// Splits `text` into words and marker tokens. Markers glued to a word
/// (`person<c>`) are separated.
fn tokenize_markers(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut rest = word;
        'scan: while !rest.is_empty() {
            for (pos, _) in rest.char_indices() {
                if let Some(m) = MARKERS.iter().find(|m| rest[pos..].starts_with(**m)) {
                    if pos > 0 {
                        out.push(&rest[..pos]);
                    }
                    out.push(*m);
                    rest = &rest[pos + m.len()..];
                    continue 'scan;
                }
            }
            out.push(rest);
            break;
        }
    }
    out
}

fn ends_sentence(word: &str) -> bool {
    word.ends_with(['.', '!', '?'])
}

/// Parses routing markers.
///
/// A bare `<c>` (or `<s>`) tags the words before it, back to the previous
/// marker or sentence start. An enclosing pair `<c> … </c>` tags the words
/// between them. A closing marker without an open one, or a second marker
/// of the same kind, is malformed.
pub fn parse_prompt(text: &str) -> Result<PromptSpec> {
    let tokens = tokenize_markers(text);
    let mut words: Vec<&str> = Vec::new();
    let mut span_start = 0usize;
    let mut open: Option<(char, usize)> = None;
    let mut content: Option<String> = None;
    let mut style: Option<String> = None;

    for (idx, &tok) in tokens.iter().enumerate() {
        let (kind, closing) = match tok {
            "<c>" => ('c', false),
            "</c>" => ('c', true),
            "<s>" => ('s', false),
            "</s>" => ('s', true),
            word => {
                words.push(word);
                if ends_sentence(word) && open.is_none() {
                    span_start = words.len();
                }
                continue;
            }
        };
        let slot = if kind == 'c' { &mut content } else { &mut style };
        if closing {
            match open {
                Some((k, start)) if k == kind => {
                    *slot = Some(words[start..].join(" "));
                    open = None;
                }
                _ => return Err(Error::MalformedMarkers(format!("</{kind}> without a matching <{kind}>"))),
            }
        } else {
            if slot.is_some() || matches!(open, Some((k, _)) if k == kind) {
                return Err(Error::MalformedMarkers(format!("<{kind}> appears more than once")));
            }
            if open.is_some() {
                return Err(Error::MalformedMarkers("markers may not nest".into()));
            }
            // an opener followed by its closer encloses a span; otherwise the
            // marker tags the words before it
            let closer = if kind == 'c' { "</c>" } else { "</s>" };
            if tokens[idx + 1..].iter().take_while(|t| **t != tok).any(|t| *t == closer) {
                open = Some((kind, words.len()));
            } else {
                *slot = Some(words[span_start..].join(" "));
            }
        }
        span_start = words.len();
    }
    if let Some((k, _)) = open {
        return Err(Error::MalformedMarkers(format!("<{k}> is never closed")));
    }
    Ok(PromptSpec {
        raw: text.to_string(),
        stripped: words.join(" "),
        has_content_marker: content.is_some(),
        has_style_marker: style.is_some(),
        content_span: content,
        style_span: style,
    })
}

/// FNV-1a, 64 bit.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn token_vector(token: &str) -> Vec<f64> {
    let mut rng = rng::seeded(fnv1a(token.as_bytes()));
    rng::gaussian_vec(&mut rng, EMBED_DIM)
}

/// Deterministic toy text encoder. Lower-cased whitespace tokens are hashed
/// to Gaussian vectors and averaged with weights `1/(k+1)` by position; the
/// result is scaled to norm `sqrt(EMBED_DIM)`. The empty string is the null
/// (zero) embedding.
pub fn encode_semantic(text: &str) -> Vec<f64> {
    let mut acc = vec![0.0; EMBED_DIM];
    let mut any = false;
    for (k, tok) in text.split_whitespace().enumerate() {
        any = true;
        let w = 1.0 / (k + 1) as f64;
        for (a, v) in acc.iter_mut().zip(token_vector(&tok.to_lowercase())) {
            *a += w * v;
        }
    }
    if !any {
        return acc;
    }
    let norm = dot(&acc, &acc).sqrt();
    let scale = (EMBED_DIM as f64).sqrt() / norm;
    acc.iter_mut().for_each(|a| *a *= scale);
    acc
}

fn is_null(e: &[f64]) -> bool {
    e.iter().all(|v| *v == 0.0)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// One `64 → 64` tanh layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchEncoder {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl BranchEncoder {
    fn seeded(rng: &mut StreamRng) -> Self {
        let bound = 1.0 / (EMBED_DIM as f64).sqrt();
        let weight = Matrix::from_vec(EMBED_DIM, EMBED_DIM, rng::uniform_vec(rng, EMBED_DIM * EMBED_DIM, -bound, bound))
            .expect("square");
        Self { weight, bias: vec![0.0; EMBED_DIM] }
    }

    fn encode(&self, x: &[f64]) -> Vec<f64> {
        (0..EMBED_DIM)
            .map(|j| {
                let s: f64 = x.iter().enumerate().map(|(i, v)| v * self.weight[(i, j)]).sum();
                (s + self.bias[j]).tanh()
            })
            .collect()
    }
}

/// Identity, content-text and style-text encoders plus a `192 → 2` softplus
/// head. A branch whose text embedding is null is masked to zero gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertEncoder {
    /// Concept-ID embedding table, one row per ID.
    pub id_table: Matrix,
    pub identity: BranchEncoder,
    pub content: BranchEncoder,
    pub style: BranchEncoder,
    /// `192 × 2`
    pub head_weight: Matrix,
    pub head_bias: [f64; 2],
}

impl ExpertEncoder {
    /// Seeded encoders with the head at its untrained default: zero weights
    /// and bias `ln(e − 1)`, so each active branch gets gain exactly 1.
    pub fn new(concepts: usize, seed: u64) -> Result<Self> {
        if concepts == 0 {
            return Err(Error::ConfigInvalid("expert encoder needs at least one concept".into()));
        }
        let mut rng = rng::stream(seed, 0xE4E4);
        let id_table = Matrix::from_vec(concepts, EMBED_DIM, rng::gaussian_vec(&mut rng, concepts * EMBED_DIM))?;
        let identity = BranchEncoder::seeded(&mut rng);
        let content = BranchEncoder::seeded(&mut rng);
        let style = BranchEncoder::seeded(&mut rng);
        let b = (std::f64::consts::E - 1.0).ln();
        Ok(Self { id_table, identity, content, style, head_weight: Matrix::zeros(3 * EMBED_DIM, 2), head_bias: [b, b] })
    }

    pub fn id_embedding(&self, concept: usize) -> Result<Vec<f64>> {
        if concept >= self.id_table.rows() {
            return Err(Error::OutOfRange(format!("concept id {concept} of {}", self.id_table.rows())));
        }
        Ok(self.id_table.row(concept).to_vec())
    }
}

/// `(γ_c, γ_s)` from the expert head; always nonnegative.
pub fn expert_gammas(params: &ExpertEncoder, id_embedding: &[f64], e_c: &[f64], e_s: &[f64]) -> Result<(f64, f64)> {
    for e in [id_embedding, e_c, e_s] {
        if e.len() != EMBED_DIM {
            return Err(Error::ShapeMismatch(format!("expert encoder input of {} dims", e.len())));
        }
    }
    let mut feat = params.identity.encode(id_embedding);
    feat.extend(params.content.encode(e_c));
    feat.extend(params.style.encode(e_s));
    let head = |k: usize| -> f64 {
        let s: f64 = feat.iter().enumerate().map(|(i, v)| v * params.head_weight[(i, k)]).sum();
        softplus(s + params.head_bias[k])
    };
    let gc = if is_null(e_c) { 0.0 } else { head(0) };
    let gs = if is_null(e_s) { 0.0 } else { head(1) };
    Ok((gc, gs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GKind {
    #[default]
    Cosine,
    Linear,
}

impl GKind {
    pub fn eval(self, u: f64) -> f64 {
        match self {
            GKind::Cosine => (1.0 - (std::f64::consts::PI * u).cos()) / 2.0,
            GKind::Linear => u,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub omega: f64,
    pub steps: usize,
    pub content_window: (usize, usize),
    pub style_window: (usize, usize),
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub g_kind: GKind,
    /// Ablation: run the unconditional pass on the conditional weights too.
    pub symmetric_cfg: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            omega: 7.5,
            steps: 50,
            content_window: (1, 35),
            style_window: (15, 50),
            alpha_min: 0.5,
            alpha_max: 1.0,
            g_kind: GKind::Cosine,
            symmetric_cfg: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega >= 0.0) || !self.omega.is_finite() {
            return Err(Error::ConfigInvalid(format!("omega must be a finite value >= 0, got {}", self.omega)));
        }
        if self.steps == 0 {
            return Err(Error::ConfigInvalid("guidance needs at least one step".into()));
        }
        for (name, (a, b)) in [("content", self.content_window), ("style", self.style_window)] {
            if a < 1 || a > b || b > self.steps {
                return Err(Error::ConfigInvalid(format!("{name} window [{a},{b}] must lie in [1,{}]", self.steps)));
            }
        }
        if !(self.alpha_min <= self.alpha_max) || self.alpha_min < 0.0 {
            return Err(Error::ConfigInvalid("need 0 <= alpha_min <= alpha_max".into()));
        }
        Ok(())
    }
}

fn in_window(t: usize, w: (usize, usize)) -> bool {
    w.0 <= t && t <= w.1
}

/// Indicator activations `(𝟙[t ∈ T_c], 𝟙[t ∈ T_s])`.
pub fn gamma_schedule(t: usize, content_window: (usize, usize), style_window: (usize, usize)) -> (f64, f64) {
    let ind = |b: bool| if b { 1.0 } else { 0.0 };
    (ind(in_window(t, content_window)), ind(in_window(t, style_window)))
}

/// `α(t) = α_min + (α_max − α_min)·g((T − t)/T)`
pub fn temporal_alpha(t: usize, cfg: &GuidanceConfig) -> f64 {
    let u = (cfg.steps as f64 - t as f64) / cfg.steps as f64;
    cfg.alpha_min + (cfg.alpha_max - cfg.alpha_min) * cfg.g_kind.eval(u)
}

/// Everything the conditional branch needs from a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub embedding: Vec<f64>,
    pub gamma_c: f64,
    pub gamma_s: f64,
}

impl Conditioning {
    /// Semantic embedding of the stripped prompt with binary gains from
    /// marker presence, or the expert head's gains when given.
    pub fn from_prompt(spec: &PromptSpec, expert: Option<(&ExpertEncoder, usize)>) -> Result<Self> {
        let embedding = encode_semantic(&spec.stripped);
        let (gamma_c, gamma_s) = match expert {
            None => (
                if spec.has_content_marker { 1.0 } else { 0.0 },
                if spec.has_style_marker { 1.0 } else { 0.0 },
            ),
            Some((enc, concept)) => {
                let e_c = encode_semantic(spec.content_span.as_deref().unwrap_or(""));
                let e_s = encode_semantic(spec.style_span.as_deref().unwrap_or(""));
                expert_gammas(enc, &enc.id_embedding(concept)?, &e_c, &e_s)?
            }
        };
        Ok(Self { embedding, gamma_c, gamma_s })
    }
}

/// Per-step diagnostic record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub t: usize,
    pub gamma_c_eff: f64,
    pub gamma_s_eff: f64,
    pub alpha: f64,
    /// `‖ε_cond − ε_uncond‖₂`
    pub gap: f64,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6e}", self.t, self.gamma_c_eff, self.gamma_s_eff, self.alpha, self.gap)
    }
}

/// Output of one guided prediction.
#[derive(Debug, Clone)]
pub struct GuidedEps {
    pub guided: ImageGrid,
    pub eps_cond: ImageGrid,
    pub eps_uncond: ImageGrid,
    pub trace: TraceRecord,
}

/// `ε_c + ω(ε_c − ε_u)`, element by element in that order.
pub fn combine_guidance(eps_cond: &ImageGrid, eps_uncond: &ImageGrid, omega: f64) -> Result<ImageGrid> {
    eps_cond.zip_map(eps_uncond, |c, u| c + omega * (c - u))
}

/// ACFG state for one prompt: the host, adapters and a one-entry cache of
/// the conditional weights keyed by the effective gains.
pub struct Acfg<'a> {
    net: &'a Denoiser,
    w_init: &'a LayeredBackbone,
    adapters: &'a AdapterSet,
    cfg: GuidanceConfig,
    cond: Conditioning,
    cached: Option<((f64, f64), LayeredBackbone)>,
    rebuilds: usize,
}

impl<'a> Acfg<'a> {
    pub fn new(
        net: &'a Denoiser,
        w_init: &'a LayeredBackbone,
        adapters: &'a AdapterSet,
        cfg: &GuidanceConfig,
        cond: Conditioning,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.steps != net.schedule().steps() {
            return Err(Error::ConfigInvalid(format!(
                "guidance has {} steps but the noise schedule has {}",
                cfg.steps,
                net.schedule().steps()
            )));
        }
        net.check_weights(w_init)?;
        if cond.embedding.len() != net.config().cond_dim {
            return Err(Error::ShapeMismatch("prompt embedding does not match the denoiser".into()));
        }
        if !(cond.gamma_c >= 0.0 && cond.gamma_s >= 0.0) {
            return Err(Error::OutOfRange("branch gains must be nonnegative".into()));
        }
        // validates routing and factor shapes once
        aggregate_weights(w_init, adapters, 0.0, 0.0, &cond.embedding)?;
        Ok(Self { net, w_init, adapters, cfg: *cfg, cond, cached: None, rebuilds: 0 })
    }

    /// `(γ_c_eff, γ_s_eff, α(t))` with `γ_eff = α(t)·γ_branch·𝟙_window`.
    pub fn effective_gains(&self, t: usize) -> (f64, f64, f64) {
        let alpha = temporal_alpha(t, &self.cfg);
        let (ic, is) = gamma_schedule(t, self.cfg.content_window, self.cfg.style_window);
        (alpha * self.cond.gamma_c * ic, alpha * self.cond.gamma_s * is, alpha)
    }

    /// How many times the conditional weights were rebuilt.
    pub fn rebuilds(&self) -> usize {
        self.rebuilds
    }

    fn cond_weights(&mut self, gains: (f64, f64)) -> Result<&LayeredBackbone> {
        let stale = !matches!(&self.cached, Some((g, _)) if *g == gains);
        if stale {
            let w = aggregate_weights(self.w_init, self.adapters, gains.0, gains.1, &self.cond.embedding)?;
            self.cached = Some((gains, w));
            self.rebuilds += 1;
        }
        Ok(&self.cached.as_ref().expect("filled").1)
    }

    /// `ε_uncond` on `W_init` with the null embedding.
    pub fn eps_uncond(&self, x_t: &ImageGrid, t: usize) -> Result<ImageGrid> {
        self.net.predict_eps(self.w_init, x_t, t, &self.net.null_embedding())
    }

    /// Exactly two network evaluations.
    pub fn predict(&mut self, x_t: &ImageGrid, t: usize) -> Result<GuidedEps> {
        let (gc, gs, alpha) = self.effective_gains(t);
        let net = self.net;
        let embedding = self.cond.embedding.clone();
        let symmetric = self.cfg.symmetric_cfg;
        let w_cond = self.cond_weights((gc, gs))?;
        let eps_cond = net.predict_eps(w_cond, x_t, t, &embedding)?;
        let eps_uncond = if symmetric {
            net.predict_eps(w_cond, x_t, t, &net.null_embedding())?
        } else {
            self.eps_uncond(x_t, t)?
        };
        let guided = combine_guidance(&eps_cond, &eps_uncond, self.cfg.omega)?;
        let gap = eps_cond.zip_map(&eps_uncond, |a, b| a - b)?.energy().sqrt();
        Ok(GuidedEps { guided, eps_cond, eps_uncond, trace: TraceRecord { t, gamma_c_eff: gc, gamma_s_eff: gs, alpha, gap } })
    }

    /// States `x_T, x_{T−1}, …, x_0` in model space.
    pub fn trajectory(&mut self, seed: u64, mut trace: Option<&mut Vec<TraceRecord>>) -> Result<Vec<ImageGrid>> {
        let side = self.net.config().side;
        let mut rng = rng::seeded(seed);
        let mut z = ImageGrid::new(side, side, rng::gaussian_vec(&mut rng, side * side))?;
        let mut states = vec![z.clone()];
        for t in (1..=self.cfg.steps).rev() {
            let step = self.predict(&z, t)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(step.trace);
            }
            z = self.net.schedule().ddpm_step(&z, t, &step.guided, &mut rng)?;
            states.push(z.clone());
        }
        Ok(states)
    }
}

/// One guided noise estimate (fresh weight cache).
pub fn acfg_predict(
    net: &Denoiser,
    w_init: &LayeredBackbone,
    adapters: &AdapterSet,
    cond: &Conditioning,
    cfg: &GuidanceConfig,
    x_t: &ImageGrid,
    t: usize,
) -> Result<GuidedEps> {
    Acfg::new(net, w_init, adapters, cfg, cond.clone())?.predict(x_t, t)
}

/// Full ACFG sampling from seeded noise; returns the image in `[0,1]`.
pub fn acfg_sample(
    net: &Denoiser,
    w_init: &LayeredBackbone,
    adapters: &AdapterSet,
    cond: &Conditioning,
    cfg: &GuidanceConfig,
    seed: u64,
    trace: Option<&mut Vec<TraceRecord>>,
) -> Result<ImageGrid> {
    let states = Acfg::new(net, w_init, adapters, cfg, cond.clone())?.trajectory(seed, trace)?;
    Ok(states.last().expect("at least x_T").from_model_space().clamped())
}

/// Plain classifier-free guidance on fixed weights; same noise convention
/// as the ACFG sampler. Returns `x_T … x_0` in model space.
pub fn cfg_trajectory(
    net: &Denoiser,
    weights: &LayeredBackbone,
    embedding: &[f64],
    omega: f64,
    seed: u64,
) -> Result<Vec<ImageGrid>> {
    let side = net.config().side;
    let mut rng = rng::seeded(seed);
    let mut z = ImageGrid::new(side, side, rng::gaussian_vec(&mut rng, side * side))?;
    let mut states = vec![z.clone()];
    let null = net.null_embedding();
    for t in (1..=net.schedule().steps()).rev() {
        let c = net.predict_eps(weights, &z, t, embedding)?;
        let u = net.predict_eps(weights, &z, t, &null)?;
        let eps = combine_guidance(&c, &u, omega)?;
        z = net.schedule().ddpm_step(&z, t, &eps, &mut rng)?;
        states.push(z.clone());
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suffix_markers_split_the_sentence() {
        let p = parse_prompt("A photo of a person <c> smiling in a watercolor style <s>").unwrap();
        assert_eq!(p.content_span.as_deref(), Some("A photo of a person"));
        assert_eq!(p.style_span.as_deref(), Some("smiling in a watercolor style"));
        assert_eq!(p.stripped, "A photo of a person smiling in a watercolor style");
        assert!(p.has_content_marker && p.has_style_marker);
    }

    #[test]
    fn plain_and_single_marker() {
        let p = parse_prompt("A plain sentence").unwrap();
        assert!(!p.has_content_marker && !p.has_style_marker);
        assert_eq!(p.content_span, None);
        let p = parse_prompt("A dog <c> running").unwrap();
        assert!(p.has_content_marker && !p.has_style_marker);
        assert_eq!(p.content_span.as_deref(), Some("A dog"));
        assert_eq!(p.stripped, "A dog running");
    }

    #[test]
    fn enclosed_markers() {
        let p = parse_prompt("a photo of <c> my dog </c> painted <s> in ink </s>").unwrap();
        assert_eq!(p.content_span.as_deref(), Some("my dog"));
        assert_eq!(p.style_span.as_deref(), Some("in ink"));
        assert_eq!(p.stripped, "a photo of my dog painted in ink");
    }

    #[test]
    fn sentence_start_bounds_a_span() {
        let p = parse_prompt("Hello there. A cat <c>").unwrap();
        assert_eq!(p.content_span.as_deref(), Some("A cat"));
    }

    #[test]
    fn malformed_markers() {
        assert!(matches!(parse_prompt("a </c> dog <c>"), Err(Error::MalformedMarkers(_))));
        assert!(matches!(parse_prompt("a <c> dog <c>"), Err(Error::MalformedMarkers(_))));
        assert!(matches!(parse_prompt("x </s>"), Err(Error::MalformedMarkers(_))));
    }

    #[test]
    fn glued_markers_are_split() {
        let p = parse_prompt("a dog<c> in oils<s>").unwrap();
        assert_eq!(p.content_span.as_deref(), Some("a dog"));
        assert_eq!(p.style_span.as_deref(), Some("in oils"));
    }

    #[test]
    fn encoder_basics() {
        assert_eq!(encode_semantic(""), vec![0.0; EMBED_DIM]);
        assert_eq!(encode_semantic("a red car"), encode_semantic("a red car"));
        assert_ne!(encode_semantic("a red car"), encode_semantic("car red a"));
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(gamma_schedule(10, (1, 35), (15, 50)), (1.0, 0.0));
        assert_eq!(gamma_schedule(40, (1, 35), (15, 50)), (0.0, 1.0));
        assert_eq!(gamma_schedule(20, (1, 35), (15, 50)), (1.0, 1.0));
    }

    #[test]
    fn alpha_endpoints() {
        let cfg = GuidanceConfig::default();
        assert_eq!(temporal_alpha(50, &cfg), 0.5);
        assert!((temporal_alpha(25, &cfg) - 0.75).abs() < 1e-15);
        for t in 2..=50 {
            assert!(temporal_alpha(t, &cfg) <= temporal_alpha(t - 1, &cfg));
        }
    }

    #[test]
    fn expert_defaults_follow_markers() {
        let enc = ExpertEncoder::new(4, 1).unwrap();
        let id = enc.id_embedding(2).unwrap();
        let null = vec![0.0; EMBED_DIM];
        assert_eq!(expert_gammas(&enc, &id, &null, &null).unwrap(), (0.0, 0.0));
        let (gc, gs) = expert_gammas(&enc, &id, &encode_semantic("a dog"), &null).unwrap();
        assert!((gc - 1.0).abs() < 1e-12);
        assert_eq!(gs, 0.0);
    }
}
