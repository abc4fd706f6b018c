//! LoRA adapters restricted to disjoint layer sets, their training with
//! masked gradients, and aggregation into the host backbone.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::backbone::LayeredBackbone;
use crate::denoiser::{noise_batch, Denoiser, NetGrads};
use crate::error::{Error, Result};
use crate::guidance::{encode_semantic, PromptSpec};
use crate::image::ImageGrid;
use crate::optim::{Adam, WarmupCosine};
use crate::rng::{self, StreamRng};
use crate::tensorcore::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Content,
    Style,
}

impl AdapterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterKind::Content => "content",
            AdapterKind::Style => "style",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "content" => Ok(AdapterKind::Content),
            "style" => Ok(AdapterKind::Style),
            other => Err(Error::ConfigInvalid(format!("unknown adapter kind {other:?}"))),
        }
    }
}

/// Disjoint layer sets `I_c` (content) and `I_s` (style).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRouting {
    content: BTreeSet<String>,
    style: BTreeSet<String>,
}

impl LayerRouting {
    pub fn new<I, J, S, T>(content: I, style: J) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: Into<String>,
        T: Into<String>,
    {
        let content: BTreeSet<String> = content.into_iter().map(Into::into).collect();
        let style: BTreeSet<String> = style.into_iter().map(Into::into).collect();
        if let Some(name) = content.intersection(&style).next() {
            return Err(Error::RoutingViolation(format!("layer {name} is in both the content and style sets")));
        }
        Ok(Self { content, style })
    }

    /// First half of the layers for content, second half for style.
    pub fn split_halves(host: &LayeredBackbone) -> Self {
        let names: Vec<String> = host.names().map(str::to_string).collect();
        let half = names.len() / 2;
        Self { content: names[..half].iter().cloned().collect(), style: names[half..].iter().cloned().collect() }
    }

    pub fn content(&self) -> &BTreeSet<String> {
        &self.content
    }

    pub fn style(&self) -> &BTreeSet<String> {
        &self.style
    }

    pub fn set(&self, kind: AdapterKind) -> &BTreeSet<String> {
        match kind {
            AdapterKind::Content => &self.content,
            AdapterKind::Style => &self.style,
        }
    }

    /// Both sets must name layers of `host`.
    pub fn check_host(&self, host: &LayeredBackbone) -> Result<()> {
        for name in self.content.iter().chain(&self.style) {
            if host.index_of(name).is_none() {
                return Err(Error::RoutingViolation(format!("routed layer {name} is not in the backbone")));
            }
        }
        Ok(())
    }
}

/// `s(e) = sigmoid(w·e + b)`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub w: Vec<f64>,
    pub b: f64,
}

impl Gate {
    pub fn zero(dim: usize) -> Self {
        Self { w: vec![0.0; dim], b: 0.0 }
    }

    pub fn value(&self, e: &[f64]) -> f64 {
        sigmoid(dot(&self.w, e) + self.b)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraFactors {
    /// `d_in × r`
    pub b: Matrix,
    /// `r × d_out`
    pub a: Matrix,
}

impl LoraFactors {
    pub fn delta(&self) -> Matrix {
        self.b.matmul(&self.a).expect("factor shapes checked on construction")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    kind: AdapterKind,
    rank: usize,
    factors: BTreeMap<String, LoraFactors>,
    gate: Gate,
}

impl LoraAdapter {
    pub fn new(kind: AdapterKind, rank: usize, factors: BTreeMap<String, LoraFactors>, gate: Gate) -> Result<Self> {
        if rank == 0 {
            return Err(Error::ConfigInvalid("adapter rank must be positive".into()));
        }
        for (name, f) in &factors {
            if f.b.cols() != rank || f.a.rows() != rank {
                return Err(Error::ShapeMismatch(format!(
                    "factors for {name} are {:?}·{:?}, rank {rank}",
                    f.b.shape(),
                    f.a.shape()
                )));
            }
        }
        Ok(Self { kind, rank, factors, gate })
    }

    /// LoRA initialization on every layer of the kind's set: `B` small
    /// uniform, `A = 0`, gate weights zero.
    pub fn init(
        kind: AdapterKind,
        host: &LayeredBackbone,
        routing: &LayerRouting,
        rank: usize,
        embed_dim: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        routing.check_host(host)?;
        let mut factors = BTreeMap::new();
        for name in routing.set(kind) {
            let (m, n) = host.get(name).expect("checked").shape();
            let bound = 1.0 / (m as f64).sqrt();
            let b = Matrix::from_vec(m, rank, rng::uniform_vec(rng, m * rank, -bound, bound))?;
            factors.insert(name.clone(), LoraFactors { b, a: Matrix::zeros(rank, n) });
        }
        Self::new(kind, rank, factors, Gate::zero(embed_dim))
    }

    /// All-zero factors on the kind's layer set.
    pub fn zeros(kind: AdapterKind, host: &LayeredBackbone, routing: &LayerRouting, rank: usize, embed_dim: usize) -> Result<Self> {
        routing.check_host(host)?;
        let factors = routing
            .set(kind)
            .iter()
            .map(|name| {
                let (m, n) = host.get(name).expect("checked").shape();
                (name.clone(), LoraFactors { b: Matrix::zeros(m, rank), a: Matrix::zeros(rank, n) })
            })
            .collect();
        Self::new(kind, rank, factors, Gate::zero(embed_dim))
    }

    pub fn kind(&self) -> AdapterKind {
        self.kind
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn factors(&self) -> &BTreeMap<String, LoraFactors> {
        &self.factors
    }

    pub fn gate(&self) -> &Gate {
        &self.gate
    }

    /// Gated update `s(e)·B·A` for one layer, if the adapter carries it.
    pub fn update_for(&self, layer: &str, e_sem: &[f64]) -> Option<Matrix> {
        self.factors.get(layer).map(|f| f.delta().scale(self.gate.value(e_sem)))
    }

    /// Every trainable scalar: per layer (name order) `B` then `A`, then the
    /// gate weights and bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for f in self.factors.values() {
            out.extend_from_slice(f.b.values());
            out.extend_from_slice(f.a.values());
        }
        out.extend_from_slice(&self.gate.w);
        out.push(self.gate.b);
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!("{} adapter parameters, got {}", self.param_count(), params.len())));
        }
        let mut k = 0;
        for f in self.factors.values_mut() {
            for v in f.b.values_mut().iter_mut().chain(f.a.values_mut().iter_mut()) {
                *v = params[k];
                k += 1;
            }
        }
        let dim = self.gate.w.len();
        self.gate.w.copy_from_slice(&params[k..k + dim]);
        self.gate.b = params[k + dim];
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.factors.values().map(|f| f.b.values().len() + f.a.values().len()).sum::<usize>() + self.gate.w.len() + 1
    }

    /// Factors conform to the host and stay inside the kind's set.
    pub fn check_against(&self, host: &LayeredBackbone, routing: &LayerRouting) -> Result<()> {
        let allowed = routing.set(self.kind);
        for (name, f) in &self.factors {
            if !allowed.contains(name) {
                return Err(Error::RoutingViolation(format!(
                    "{} adapter carries layer {name} outside its set",
                    self.kind.as_str()
                )));
            }
            let w = host
                .get(name)
                .ok_or_else(|| Error::RoutingViolation(format!("adapter layer {name} is not in the backbone")))?;
            if (f.b.rows(), f.a.cols()) != w.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "adapter update for {name} is {}×{}, layer is {:?}",
                    f.b.rows(),
                    f.a.cols(),
                    w.shape()
                )));
            }
        }
        Ok(())
    }
}

/// A routing with one adapter per kind.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub routing: LayerRouting,
    pub content: LoraAdapter,
    pub style: LoraAdapter,
}

impl AdapterSet {
    pub fn new(routing: LayerRouting, content: LoraAdapter, style: LoraAdapter) -> Result<Self> {
        if content.kind != AdapterKind::Content || style.kind != AdapterKind::Style {
            return Err(Error::RoutingViolation("adapter kinds do not match their slots".into()));
        }
        for (adapter, set) in [(&content, &routing.content), (&style, &routing.style)] {
            if let Some(stray) = adapter.factors.keys().find(|k| !set.contains(*k)) {
                return Err(Error::RoutingViolation(format!("{:?} adapter has factors on layer {stray}", adapter.kind)));
            }
        }
        Ok(Self { routing, content, style })
    }

    /// Zero-factor adapters of the given rank on `host`.
    pub fn zeros(host: &LayeredBackbone, routing: LayerRouting, rank: usize, embed_dim: usize) -> Result<Self> {
        let content = LoraAdapter::zeros(AdapterKind::Content, host, &routing, rank, embed_dim)?;
        let style = LoraAdapter::zeros(AdapterKind::Style, host, &routing, rank, embed_dim)?;
        Self::new(routing, content, style)
    }
}

/// The update a layer receives: the content adapter's gated product on
/// content layers, the style adapter's on style layers, zero elsewhere.
pub fn decoupled_update(host: &LayeredBackbone, layer: &str, adapters: &AdapterSet, e_sem: &[f64]) -> Result<Matrix> {
    let w = host
        .get(layer)
        .ok_or_else(|| Error::ShapeMismatch(format!("layer {layer} is not in the backbone")))?;
    let adapter = if adapters.routing.content.contains(layer) {
        &adapters.content
    } else if adapters.routing.style.contains(layer) {
        &adapters.style
    } else {
        return Ok(Matrix::zeros(w.rows(), w.cols()));
    };
    match adapter.factors.get(layer) {
        Some(f) if (f.b.rows(), f.a.cols()) != w.shape() => Err(Error::ShapeMismatch(format!(
            "adapter update for {layer} is {}×{}, layer is {:?}",
            f.b.rows(),
            f.a.cols(),
            w.shape()
        ))),
        Some(_) => Ok(adapter.update_for(layer, e_sem).expect("present")),
        None => Ok(Matrix::zeros(w.rows(), w.cols())),
    }
}

/// `W_init + Σ_{I_c} γ_c ΔW^(c) + Σ_{I_s} γ_s ΔW^(s)`. Layers outside the
/// sets, and every layer of a branch with zero gain, are copied untouched.
pub fn aggregate_weights(
    w_init: &LayeredBackbone,
    adapters: &AdapterSet,
    gamma_c: f64,
    gamma_s: f64,
    e_sem: &[f64],
) -> Result<LayeredBackbone> {
    if !(gamma_c >= 0.0 && gamma_s >= 0.0) {
        return Err(Error::OutOfRange(format!("branch gains must be nonnegative, got {gamma_c}, {gamma_s}")));
    }
    adapters.routing.check_host(w_init)?;
    adapters.content.check_against(w_init, &adapters.routing)?;
    adapters.style.check_against(w_init, &adapters.routing)?;
    let mut out = w_init.clone();
    for (adapter, gamma) in [(&adapters.content, gamma_c), (&adapters.style, gamma_s)] {
        if gamma == 0.0 {
            continue;
        }
        let s = adapter.gate.value(e_sem);
        for (name, f) in &adapter.factors {
            let i = w_init.index_of(name).expect("checked");
            out.weight_mut(i).axpy(gamma * s, &f.delta())?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Timestep draws used to compare adapter and zero-adapter loss.
    pub eval_draws: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { rank: 16, steps: 1000, batch_size: 1, lr: 2e-3, eval_draws: 64 }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.batch_size == 0 || !(self.lr > 0.0) || self.eval_draws == 0 {
            return Err(Error::ConfigInvalid("adapter config needs rank, batch_size, eval_draws >= 1 and lr > 0".into()));
        }
        Ok(())
    }
}

/// Noised copies of one reference with a shared conditioning row.
#[derive(Debug, Clone)]
pub struct AdapterBatch {
    pub x_t: Matrix,
    pub noise: Matrix,
    pub ts: Vec<usize>,
    pub conds: Matrix,
}

impl AdapterBatch {
    pub fn draw(net: &Denoiser, target: &ImageGrid, e_sem: &[f64], n: usize, rng: &mut StreamRng) -> Result<Self> {
        let p = target.len();
        let mut x0 = Matrix::zeros(n, p);
        let mut conds = Matrix::zeros(n, e_sem.len());
        for r in 0..n {
            x0.row_mut(r).copy_from_slice(target.pixels());
            conds.row_mut(r).copy_from_slice(e_sem);
        }
        let nb = noise_batch(net.schedule(), &x0, rng);
        Ok(Self { x_t: nb.x_t, noise: nb.noise, ts: nb.ts, conds })
    }
}

/// Loss, parameter gradient (in [`LoraAdapter::params`] order) and the
/// masked per-layer weight gradients of one adapter step.
#[derive(Debug, Clone)]
pub struct AdapterLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// `∂L/∂W` for every backbone layer after masking; layers outside the
    /// adapter's set are exactly zero.
    pub layer_grads: Vec<Matrix>,
}

/// Mean-squared ε-matching of the network on `W_init` plus the adapter's
/// gated updates (gain 1).
pub fn adapter_loss(
    net: &Denoiser,
    w_init: &LayeredBackbone,
    routing: &LayerRouting,
    adapter: &LoraAdapter,
    batch: &AdapterBatch,
) -> Result<AdapterLoss> {
    let e_sem = batch.conds.row(0).to_vec();
    let mut pair = AdapterSet::zeros(w_init, routing.clone(), adapter.rank, e_sem.len())?;
    match adapter.kind {
        AdapterKind::Content => pair.content = adapter.clone(),
        AdapterKind::Style => pair.style = adapter.clone(),
    }
    let weights = aggregate_weights(w_init, &pair, 1.0, 1.0, &e_sem)?;
    let (out, cache) = net.forward_batch(&weights, &batch.x_t, &batch.ts, &batch.conds)?;
    let diff = out.sub(&batch.noise)?;
    let count = diff.values().len() as f64;
    let loss = diff.frobenius_sq() / count;
    let NetGrads { weights: mut layer_grads, .. } = net.backward_batch(&weights, &cache, &diff.scale(2.0 / count))?;

    let allowed = routing.set(adapter.kind);
    for (layer, g) in w_init.layers().iter().zip(layer_grads.iter_mut()) {
        if !allowed.contains(&layer.name) {
            g.fill(0.0);
        }
    }

    let s = adapter.gate.value(&e_sem);
    let mut grad = Vec::with_capacity(adapter.param_count());
    let mut d_s = 0.0;
    for (name, f) in &adapter.factors {
        let g = &layer_grads[w_init.index_of(name).expect("checked")];
        grad.extend_from_slice(g.matmul_nt(&f.a)?.scale(s).values());
        grad.extend_from_slice(f.b.matmul_tn(g)?.scale(s).values());
        d_s += dot(g.values(), f.delta().values());
    }
    let d_logit = d_s * s * (1.0 - s);
    grad.extend(e_sem.iter().map(|e| d_logit * e));
    grad.push(d_logit);
    Ok(AdapterLoss { loss, grad, layer_grads })
}

/// What the step observer sees after masking.
#[derive(Debug)]
pub struct AdapterStep<'a> {
    pub step: usize,
    pub loss: f64,
    pub layer_grads: &'a [Matrix],
}

#[derive(Debug, Clone)]
pub struct AdapterTrainResult {
    pub adapter: LoraAdapter,
    pub losses: Vec<f64>,
    /// Mean loss over fixed draws with the trained adapter.
    pub eval_loss: f64,
    /// Same draws with a zero adapter.
    pub zero_adapter_loss: f64,
}

/// Trains one adapter on a single reference (pixel values in `[0,1]`),
/// conditioned on the stripped prompt. `W_init` stays frozen; only the
/// adapter's own factors and gate move.
#[allow(clippy::too_many_arguments)]
pub fn train_adapter(
    kind: AdapterKind,
    net: &Denoiser,
    w_init: &LayeredBackbone,
    routing: &LayerRouting,
    reference: &ImageGrid,
    prompt: &PromptSpec,
    cfg: &AdapterConfig,
    seed: u64,
    mut observer: Option<&mut dyn FnMut(&AdapterStep<'_>)>,
) -> Result<AdapterTrainResult> {
    cfg.validate()?;
    match kind {
        AdapterKind::Content if !prompt.has_content_marker => return Err(Error::MarkerMissing("<c>")),
        AdapterKind::Style if !prompt.has_style_marker => return Err(Error::MarkerMissing("<s>")),
        _ => {}
    }
    net.check_weights(w_init)?;
    if reference.len() != net.config().pixels() {
        return Err(Error::ShapeMismatch("reference image does not match the denoiser".into()));
    }
    let target = reference.to_model_space();
    let e_sem = encode_semantic(&prompt.stripped);
    let mut adapter = LoraAdapter::init(kind, w_init, routing, cfg.rank, e_sem.len(), &mut rng::stream(seed, 0xADA0))?;

    let mut params = adapter.params();
    let mut adam = Adam::new(&[params.len()]);
    let sched = WarmupCosine { start: cfg.lr * 0.1, peak: cfg.lr, floor: cfg.lr * 0.05, warmup: cfg.steps / 20, total: cfg.steps };
    let mut rng = rng::stream(seed, 0xADA1);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = AdapterBatch::draw(net, &target, &e_sem, cfg.batch_size, &mut rng)?;
        let out = adapter_loss(net, w_init, routing, &adapter, &batch)?;
        if !out.loss.is_finite() {
            return Err(Error::Numerical(format!("adapter loss diverged at step {step}")));
        }
        if let Some(obs) = observer.as_deref_mut() {
            obs(&AdapterStep { step, loss: out.loss, layer_grads: &out.layer_grads });
        }
        losses.push(out.loss);
        adam.tick();
        adam.update(0, &mut params, &out.grad, sched.lr(step));
        adapter.set_params(&params)?;
    }

    let mut eval_rng = rng::stream(seed, 0xADA2);
    let zero = LoraAdapter::zeros(kind, w_init, routing, cfg.rank, e_sem.len())?;
    let (mut trained_loss, mut zero_loss) = (0.0, 0.0);
    for _ in 0..cfg.eval_draws {
        let batch = AdapterBatch::draw(net, &target, &e_sem, 1, &mut eval_rng)?;
        trained_loss += adapter_loss(net, w_init, routing, &adapter, &batch)?.loss;
        zero_loss += adapter_loss(net, w_init, routing, &zero, &batch)?.loss;
    }
    let n = cfg.eval_draws as f64;
    Ok(AdapterTrainResult { adapter, losses, eval_loss: trained_loss / n, zero_adapter_loss: zero_loss / n })
}
