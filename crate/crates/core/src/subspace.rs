//! Rank-limited backbone fine-tuning.
//!
//! Each layer carries a learnable content basis and style basis (`d_in × r_l`).
//! Their orthonormal factors define input directions that are projected out
//! of the frozen base weights, `W = W⁰ − QQᵀW⁰`. Content-emphasis pair
//! members supervise the content bases and style-emphasis members the style
//! bases; after training the two subspaces are merged and the merged
//! projection yields the host weights `W_init`.

use log::{debug, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::LayeredBackbone;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::guidance::encode_semantic;
use crate::image::ImageGrid;
use crate::optim::WarmupCosine;
use crate::pairgen::ContrastPair;
use crate::perceptual::{sign, ConvFeatureExtractor};
use crate::rng::{self, StreamRng};
use crate::tensorcore::{project_out, qr_decompose, qr_q_backward, Matrix};

/// Linear per-layer rank schedule from `r_max` at the first layer to `r_min`
/// at the last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankSchedule {
    pub r_max: usize,
    pub r_min: usize,
    pub layers: usize,
}

impl RankSchedule {
    pub fn new(r_max: usize, r_min: usize, layers: usize) -> Result<Self> {
        if r_min == 0 || r_max < r_min || layers == 0 {
            return Err(Error::ConfigInvalid(format!(
                "rank schedule needs r_max >= r_min >= 1 and L >= 1, got ({r_max}, {r_min}, {layers})"
            )));
        }
        Ok(Self { r_max, r_min, layers })
    }

    /// Rank of layer `l` (1-based), `r_max − (l−1)/(L−1)·(r_max − r_min)`
    /// rounded half up. Evaluated in integers so endpoints are exact.
    pub fn rank_at(&self, l: usize) -> Result<usize> {
        if l == 0 || l > self.layers {
            return Err(Error::OutOfRange(format!("layer {l} outside 1..={}", self.layers)));
        }
        if self.layers == 1 {
            return Ok(self.r_max);
        }
        let span = self.layers - 1;
        let num = self.r_max * span - (l - 1) * (self.r_max - self.r_min);
        Ok(((2 * num + span) / (2 * span)).max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceBases {
    pub content: Vec<Matrix>,
    pub style: Vec<Matrix>,
}

impl SubspaceBases {
    /// Entries i.i.d. uniform in `[−scale, scale]`; layer `l` gets
    /// `min(rank_at(l), d_in)` columns.
    pub fn init(schedule: &RankSchedule, backbone: &LayeredBackbone, scale: f64, rng: &mut StreamRng) -> Result<Self> {
        if schedule.layers != backbone.len() {
            return Err(Error::ConfigInvalid(format!(
                "rank schedule covers {} layers, backbone has {}",
                schedule.layers,
                backbone.len()
            )));
        }
        let mut content = Vec::with_capacity(backbone.len());
        let mut style = Vec::with_capacity(backbone.len());
        for l in 0..backbone.len() {
            let d_in = backbone.weight(l).rows();
            let r = schedule.rank_at(l + 1)?.min(d_in);
            content.push(Matrix::from_vec(d_in, r, rng::uniform_vec(rng, d_in * r, -scale, scale))?);
            style.push(Matrix::from_vec(d_in, r, rng::uniform_vec(rng, d_in * r, -scale, scale))?);
        }
        Ok(Self { content, style })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |v: &Vec<Matrix>| v.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
        Self { content: z(&self.content), style: z(&self.style) }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.content.iter().chain(&self.style).map(Matrix::frobenius_sq).sum()
    }

    pub fn member(&self, member: Member) -> &[Matrix] {
        match member {
            Member::Content => &self.content,
            Member::Style => &self.style,
        }
    }

    fn member_mut(&mut self, member: Member) -> &mut Vec<Matrix> {
        match member {
            Member::Content => &mut self.content,
            Member::Style => &mut self.style,
        }
    }
}

/// Orthonormal basis of the span of `[q_c | q_s]`, dependent directions dropped.
pub fn merge_subspaces(q_c: &Matrix, q_s: &Matrix) -> Result<Matrix> {
    let joined = q_c.hcat(q_s)?;
    if joined.cols() == 0 {
        return Ok(joined);
    }
    match qr_decompose(&joined) {
        Ok(qr) => Ok(qr.q),
        Err(Error::DegenerateInput(_)) => Ok(Matrix::zeros(joined.rows(), 0)),
        Err(e) => Err(e),
    }
}

/// `W_l ← W_l − Q_l Q_lᵀ W_l` for every layer.
pub fn apply_rank_limited_update(backbone: &LayeredBackbone, qs: &[Matrix]) -> Result<LayeredBackbone> {
    if qs.len() != backbone.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} projection bases for {} layers",
            qs.len(),
            backbone.len()
        )));
    }
    let mut out = backbone.clone();
    for (l, q) in qs.iter().enumerate() {
        out.set_weight(l, project_out(backbone.weight(l), q)?)?;
    }
    Ok(out)
}

/// Orthonormal factors of a set of full-rank bases, with their `R` factors.
fn orthonormalize(bases: &[Matrix]) -> Result<Vec<(Matrix, Matrix)>> {
    bases
        .iter()
        .map(|b| {
            if b.cols() == 0 {
                return Ok((Matrix::zeros(b.rows(), 0), Matrix::zeros(0, 0)));
            }
            let qr = qr_decompose(b)?;
            if qr.q.cols() != b.cols() {
                return Err(Error::Numerical("basis lost rank during training".into()));
            }
            Ok((qr.q, qr.r))
        })
        .collect()
}

/// Merged projection of trained bases applied to `w0`, producing `W_init`.
pub fn rank_limited_backbone(w0: &LayeredBackbone, bases: &SubspaceBases) -> Result<(LayeredBackbone, Vec<Matrix>)> {
    let mut merged = Vec::with_capacity(w0.len());
    for (c, s) in bases.content.iter().zip(&bases.style) {
        let qc = if c.cols() == 0 { c.clone() } else { qr_decompose(c)?.q };
        let qs = if s.cols() == 0 { s.clone() } else { qr_decompose(s)?.q };
        merged.push(merge_subspaces(&qc, &qs)?);
    }
    Ok((apply_rank_limited_update(w0, &merged)?, merged))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Member {
    Content,
    Style,
}

/// A fixed diffusion draw (timestep and noise) for one pair member.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberDraw {
    /// Target image in model space.
    pub target: ImageGrid,
    pub embedding: Vec<f64>,
    pub t: usize,
    pub noise: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrunkExample {
    pub pair_id: usize,
    pub content: MemberDraw,
    pub style: MemberDraw,
}

impl TrunkExample {
    fn member(&self, m: Member) -> &MemberDraw {
        match m {
            Member::Content => &self.content,
            Member::Style => &self.style,
        }
    }
}

/// Draws a timestep and noise for both members of each selected pair.
pub fn draw_trunk_batch(net: &Denoiser, pairs: &[ContrastPair], indices: &[usize], rng: &mut StreamRng) -> Vec<TrunkExample> {
    let steps = net.schedule().steps();
    indices
        .iter()
        .map(|&k| {
            let p = &pairs[k];
            let mut draw = |img: &ImageGrid, text: String| MemberDraw {
                target: img.to_model_space(),
                embedding: encode_semantic(&text),
                t: rng.random_range(1..=steps),
                noise: rng::gaussian_vec(rng, img.len()),
            };
            let content = draw(&p.content_image, p.content_text());
            let style = draw(&p.style_image, p.style_text());
            TrunkExample { pair_id: p.pair_id, content, style }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrunkLossWeights {
    pub lambda_reg: f64,
    pub alpha_perc: f64,
}

#[derive(Debug, Clone)]
pub struct TrunkLoss {
    pub total: f64,
    pub l1: f64,
    pub perceptual: f64,
    pub regularizer: f64,
    pub grads: SubspaceBases,
}

/// Trunk objective and its gradient with respect to every basis entry:
///
/// `(1/N) Σ_k [‖G_c − I_c‖₁ + ‖G_s − I_s‖₁] + α·L_perc + λ Σ_l ‖B_l‖²_F`
///
/// where `G_·` is the clean-image prediction of the network whose weights are
/// `W⁰` projected by the member's own bases.
pub fn trunk_loss(
    net: &Denoiser,
    w0: &LayeredBackbone,
    bases: &SubspaceBases,
    batch: &[TrunkExample],
    weights: TrunkLossWeights,
    extractor: &ConvFeatureExtractor,
) -> Result<TrunkLoss> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if weights.lambda_reg < 0.0 || weights.alpha_perc < 0.0 {
        return Err(Error::ConfigInvalid("loss weights must be nonnegative".into()));
    }
    net.check_weights(w0)?;
    let n = batch.len() as f64;
    let mut grads = bases.zeros_like();
    let (mut l1, mut perc) = (0.0, 0.0);

    for member in [Member::Content, Member::Style] {
        let factors = orthonormalize(bases.member(member))?;
        let mut weights_m = w0.clone();
        for (l, (q, _)) in factors.iter().enumerate() {
            weights_m.set_weight(l, project_out(w0.weight(l), q)?)?;
        }
        let (ml1, mperc, layer_grads) = member_loss(net, &weights_m, batch, member, n, weights.alpha_perc, extractor)?;
        l1 += ml1;
        perc += mperc;
        let out = grads.member_mut(member);
        for (l, (q, r)) in factors.iter().enumerate() {
            if q.cols() == 0 {
                continue;
            }
            // W = W⁰ − QQᵀW⁰  ⇒  ∂L/∂Q = −(G W⁰ᵀ Q + W⁰ Gᵀ Q)
            let g = &layer_grads[l];
            let w = w0.weight(l);
            let mut dq = g.matmul(&w.matmul_tn(q)?)?;
            dq.axpy(1.0, &w.matmul(&g.matmul_tn(q)?)?)?;
            let dq = dq.scale(-1.0);
            out[l] = qr_q_backward(q, r, &dq)?;
        }
    }
    let regularizer = weights.lambda_reg * bases.frobenius_sq();
    for (g, b) in grads
        .content
        .iter_mut()
        .chain(grads.style.iter_mut())
        .zip(bases.content.iter().chain(&bases.style))
    {
        g.axpy(2.0 * weights.lambda_reg, b)?;
    }
    let total = l1 + weights.alpha_perc * perc + regularizer;
    if !total.is_finite() {
        return Err(Error::Numerical("trunk loss is not finite".into()));
    }
    Ok(TrunkLoss { total, l1, perceptual: perc, regularizer, grads })
}

/// L1 + perceptual loss of one member over the batch and `∂L/∂W` per layer.
fn member_loss(
    net: &Denoiser,
    weights: &LayeredBackbone,
    batch: &[TrunkExample],
    member: Member,
    n: f64,
    alpha_perc: f64,
    extractor: &ConvFeatureExtractor,
) -> Result<(f64, f64, Vec<Matrix>)> {
    let cfg = net.config();
    let p = cfg.pixels();
    let rows = batch.len();
    let sched = net.schedule();
    let mut x = Matrix::zeros(rows, p);
    let mut conds = Matrix::zeros(rows, cfg.cond_dim);
    let mut ts = Vec::with_capacity(rows);
    for (r, ex) in batch.iter().enumerate() {
        let d = ex.member(member);
        if d.target.len() != p || d.noise.len() != p || d.embedding.len() != cfg.cond_dim {
            return Err(Error::ShapeMismatch("trunk example does not match the network".into()));
        }
        let (a, s) = (sched.alpha_bar(d.t).sqrt(), (1.0 - sched.alpha_bar(d.t)).sqrt());
        for (c, (&x0, &e)) in d.target.pixels().iter().zip(&d.noise).enumerate() {
            x[(r, c)] = a * x0 + s * e;
        }
        conds.row_mut(r).copy_from_slice(&d.embedding);
        ts.push(d.t);
    }
    let (eps, cache) = net.forward_batch(weights, &x, &ts, &conds)?;
    let mut d_eps = Matrix::zeros(rows, p);
    let (mut l1, mut perc) = (0.0, 0.0);
    for (r, ex) in batch.iter().enumerate() {
        let d = ex.member(member);
        let (a, s) = (sched.alpha_bar(d.t).sqrt(), (1.0 - sched.alpha_bar(d.t)).sqrt());
        let x0_hat: Vec<f64> = (0..p).map(|c| (x[(r, c)] - s * eps[(r, c)]) / a).collect();
        let mut d_x0 = vec![0.0; p];
        for c in 0..p {
            let diff = x0_hat[c] - d.target.pixels()[c];
            l1 += diff.abs() / n;
            d_x0[c] = sign(diff) / n;
        }
        if alpha_perc > 0.0 {
            let (pl, pg) = extractor.loss_and_grad(&x0_hat, d.target.pixels(), cfg.side, cfg.side)?;
            perc += pl / n;
            for (dx, g) in d_x0.iter_mut().zip(pg) {
                *dx += alpha_perc * g / n;
            }
        }
        for c in 0..p {
            d_eps[(r, c)] = -s / a * d_x0[c];
        }
    }
    let grads = net.backward_batch(weights, &cache, &d_eps)?;
    Ok((l1, perc, grads.weights))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrunkConfig {
    pub r_max: usize,
    pub r_min: usize,
    pub steps: usize,
    /// Peak learning rate.
    pub lr: f64,
    pub warmup_steps: usize,
    pub warmup_start_lr: f64,
    pub min_lr: f64,
    pub batch_size: usize,
    pub lambda_reg: f64,
    pub alpha_perc: f64,
    pub init_scale: f64,
    /// Pairs in the fixed evaluation batch used to report progress.
    pub eval_pairs: usize,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        Self {
            r_max: 16,
            r_min: 2,
            steps: 500,
            lr: 1e-3,
            warmup_steps: 50,
            warmup_start_lr: 1e-4,
            min_lr: 1e-5,
            batch_size: 4,
            lambda_reg: 1e-4,
            alpha_perc: 0.1,
            init_scale: 0.02,
            eval_pairs: 16,
        }
    }
}

impl TrunkConfig {
    pub fn validate(&self) -> Result<()> {
        RankSchedule::new(self.r_max, self.r_min, 2)?;
        if self.batch_size == 0 || !(self.lr > 0.0) || self.lambda_reg < 0.0 || self.alpha_perc < 0.0 {
            return Err(Error::ConfigInvalid("trunk config needs batch > 0, lr > 0, nonnegative loss weights".into()));
        }
        if !(self.init_scale > 0.0) || self.eval_pairs == 0 {
            return Err(Error::ConfigInvalid("trunk init scale and eval batch must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_schedule(&self) -> WarmupCosine {
        WarmupCosine {
            start: self.warmup_start_lr,
            peak: self.lr,
            floor: self.min_lr,
            warmup: self.warmup_steps.min(self.steps),
            total: self.steps,
        }
    }

    pub fn loss_weights(&self) -> TrunkLossWeights {
        TrunkLossWeights { lambda_reg: self.lambda_reg, alpha_perc: self.alpha_perc }
    }
}

#[derive(Debug, Clone)]
pub struct TrunkResult {
    pub w_init: LayeredBackbone,
    pub bases: SubspaceBases,
    /// Merged orthonormal basis per layer.
    pub merged: Vec<Matrix>,
    pub losses: Vec<f64>,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
}

/// Gradient descent on the trunk loss over the bases (`W⁰` frozen), then the
/// merged projection. Deterministic given `seed`.
pub fn finetune_trunk(net: &Denoiser, pairs: &[ContrastPair], cfg: &TrunkConfig, seed: u64) -> Result<TrunkResult> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::ConfigInvalid("trunk fine-tuning needs at least one pair".into()));
    }
    if pairs.iter().any(ContrastPair::is_degenerate) {
        warn!("dataset contains pairs whose members are identical; both bases get the same signal");
    }
    let w0 = net.backbone();
    let schedule = RankSchedule::new(cfg.r_max, cfg.r_min, w0.len())?;
    let mut bases = SubspaceBases::init(&schedule, w0, cfg.init_scale, &mut rng::stream(seed, 0xBA5E5))?;
    let extractor = ConvFeatureExtractor::new(seed);
    let weights = cfg.loss_weights();

    let mut eval_rng = rng::stream(seed, 0xE7A1);
    let eval_idx: Vec<usize> = (0..cfg.eval_pairs.min(pairs.len())).map(|_| eval_rng.random_range(0..pairs.len())).collect();
    let eval_batch = draw_trunk_batch(net, pairs, &eval_idx, &mut eval_rng);
    let initial_eval_loss = trunk_loss(net, w0, &bases, &eval_batch, weights, &extractor)?.total;

    let lr = cfg.lr_schedule();
    let mut rng = rng::stream(seed, 0x7A0C);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..pairs.len())).collect();
        let batch = draw_trunk_batch(net, pairs, &idx, &mut rng);
        let loss = trunk_loss(net, w0, &bases, &batch, weights, &extractor)?;
        losses.push(loss.total);
        let rate = lr.lr(step);
        for (b, g) in bases
            .content
            .iter_mut()
            .chain(bases.style.iter_mut())
            .zip(loss.grads.content.iter().chain(&loss.grads.style))
        {
            b.axpy(-rate, g)?;
        }
        if step % 100 == 0 {
            debug!("trunk step {step}: loss {:.4}", loss.total);
        }
    }
    let final_eval_loss = trunk_loss(net, w0, &bases, &eval_batch, weights, &extractor)?.total;
    let (w_init, merged) = rank_limited_backbone(w0, &bases)?;
    Ok(TrunkResult { w_init, bases, merged, losses, initial_eval_loss, final_eval_loss })
}
