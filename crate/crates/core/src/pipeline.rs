//! End-to-end stages: dataset, base model, trunk, adapters, sampling and
//! evaluation, both in memory and as the on-disk commands of the CLI.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::adapters::{train_adapter, AdapterKind, AdapterSet, AdapterTrainResult, LoraAdapter};
use crate::checkpoint::{
    adapter_from_checkpoint, adapter_to_checkpoint, bases_to_checkpoint, denoiser_from_checkpoint,
    denoiser_to_checkpoint, host_hash, Checkpoint, CheckpointKind,
};
use crate::config::RunConfig;
use crate::denoiser::{train_denoiser, Denoiser};
use crate::error::{Error, Result};
use crate::evalkit::{cross_influence, evaluate_grid, EvalReport, FeatureExtractor, GenerationGrid};
use crate::guidance::{acfg_sample, encode_semantic, parse_prompt, Conditioning, TraceRecord};
use crate::image::ImageGrid;
use crate::pairgen::{content_prompt, generate_pair_dataset, style_prompt, ContrastPair, DatasetMode};
use crate::rng;
use crate::subspace::{finetune_trunk, RankSchedule, TrunkResult};
use crate::tensorcore::qr_decompose;
use crate::{par, pgm};

/// Saves and reloads through the checkpoint encoding so every later stage
/// sees exactly the 32-bit weights a file would hold.
pub fn narrow_denoiser(net: &Denoiser) -> Result<Denoiser> {
    denoiser_from_checkpoint(&Checkpoint::decode(&denoiser_to_checkpoint(net, "tmp").encode())?)
}

/// `(image in model space, text embedding)` for both members of every pair.
pub fn base_training_data(pairs: &[ContrastPair]) -> Vec<(ImageGrid, Vec<f64>)> {
    pairs
        .iter()
        .flat_map(|p| {
            [
                (p.content_image.to_model_space(), encode_semantic(&p.content_text())),
                (p.style_image.to_model_space(), encode_semantic(&p.style_text())),
            ]
        })
        .collect()
}

/// Trains the base denoiser `W⁰` on the pair images.
pub fn train_base(cfg: &RunConfig, pairs: &[ContrastPair]) -> Result<Denoiser> {
    let mut net = Denoiser::init(cfg.denoiser, cfg.schedule.build()?, rng::derive_seed(cfg.seed, 1))?;
    let report = train_denoiser(&mut net, &base_training_data(pairs), &cfg.base, rng::derive_seed(cfg.seed, 2))?;
    if let (Some(first), Some(last)) = (report.losses.first(), report.losses.last()) {
        info!("base denoiser: loss {first:.4} -> {last:.4} over {} steps", report.losses.len());
    }
    narrow_denoiser(&net)
}

/// Pair dataset; diffusion mode first trains a base model on synthetic pairs.
pub fn build_dataset(cfg: &RunConfig, base: Option<&Denoiser>) -> Result<Vec<ContrastPair>> {
    match cfg.dataset.mode {
        DatasetMode::Synthetic => generate_pair_dataset(&cfg.dataset, cfg.seed, None),
        DatasetMode::Diffusion => {
            let trained;
            let net = match base {
                Some(n) => n,
                None => {
                    let synth = RunConfig { dataset: crate::pairgen::DatasetConfig { mode: DatasetMode::Synthetic, ..cfg.dataset }, ..cfg.clone() };
                    trained = train_base(cfg, &generate_pair_dataset(&synth.dataset, cfg.seed, None)?)?;
                    &trained
                }
            };
            generate_pair_dataset(&cfg.dataset, cfg.seed, Some(net))
        }
    }
}

/// Rank-limited fine-tuning of `base`; returns the denoiser carrying
/// `W_init` (32-bit) and the raw trunk result.
pub fn train_trunk(cfg: &RunConfig, base: &Denoiser, pairs: &[ContrastPair]) -> Result<(Denoiser, TrunkResult)> {
    let result = finetune_trunk(base, pairs, &cfg.trunk, rng::derive_seed(cfg.seed, 3))?;
    let host = narrow_denoiser(&base.with_backbone(result.w_init.clone())?)?;
    Ok((host, result))
}

/// Default content reference and prompt: the first pair's content member.
pub fn default_content_reference(pairs: &[ContrastPair]) -> (ImageGrid, String) {
    (pairs[0].content_image.clone(), format!("{} <c>", pairs[0].content_prompt))
}

/// Default style reference and prompt: the first pair's style member.
pub fn default_style_reference(pairs: &[ContrastPair]) -> (ImageGrid, String) {
    (pairs[0].style_image.clone(), format!("{} <s>", pairs[0].style_prompt))
}

pub fn train_lora(
    cfg: &RunConfig,
    kind: AdapterKind,
    host: &Denoiser,
    reference: &ImageGrid,
    prompt: &str,
) -> Result<AdapterTrainResult> {
    let spec = parse_prompt(prompt)?;
    let routing = cfg.routing.resolve(host.backbone())?;
    let stream = match kind {
        AdapterKind::Content => 4,
        AdapterKind::Style => 5,
    };
    train_adapter(kind, host, host.backbone(), &routing, reference, &spec, &cfg.adapter, rng::derive_seed(cfg.seed, stream), None)
}

/// Prompt for grid cell `(i, j)`.
pub fn grid_prompt(content: &str, style: &str) -> String {
    format!("{content} <c> {style} <s>")
}

/// ACFG samples for every content × style prompt from one noise seed, so
/// that cells differ only through their prompts.
pub fn sample_grid(
    cfg: &RunConfig,
    host: &Denoiser,
    adapters: &AdapterSet,
    content_prompts: &[String],
    style_prompts: &[String],
    seed: u64,
) -> Result<GenerationGrid> {
    let cells: Vec<(usize, usize)> =
        (0..content_prompts.len()).flat_map(|i| (0..style_prompts.len()).map(move |j| (i, j))).collect();
    let images = par::map(&cells, |&(i, j)| -> Result<ImageGrid> {
        let spec = parse_prompt(&grid_prompt(&content_prompts[i], &style_prompts[j]))?;
        let cond = Conditioning::from_prompt(&spec, None)?;
        acfg_sample(host, host.backbone(), adapters, &cond, &cfg.guidance, seed, None)
    });
    let mut grid = GenerationGrid::new(content_prompts.len(), style_prompts.len());
    for (&(i, j), img) in cells.iter().zip(images) {
        grid.set(i, j, img?);
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementProbe {
    pub s_x_rank_limited: f64,
    pub s_x_plain: f64,
    pub trunk_initial_loss: f64,
    pub trunk_final_loss: f64,
}

impl DisentanglementProbe {
    /// `1 − S_x(rank-limited)/S_x(plain)`
    pub fn relative_reduction(&self) -> f64 {
        1.0 - self.s_x_rank_limited / self.s_x_plain
    }
}

/// Runs the toy pipeline twice from one base model, once with adapters on
/// `W_init` and once on the plain `W⁰`, and compares cross influence over
/// an `n_content × n_style` prompt grid.
pub fn disentanglement_probe(cfg: &RunConfig, n_content: usize, n_style: usize) -> Result<DisentanglementProbe> {
    let pairs = build_dataset(cfg, None)?;
    let base = train_base(cfg, &pairs)?;
    let (w_init_host, trunk) = train_trunk(cfg, &base, &pairs)?;
    let (c_ref, c_prompt) = default_content_reference(&pairs);
    let (s_ref, s_prompt) = default_style_reference(&pairs);
    let contents: Vec<String> = (0..n_content).map(content_prompt).collect();
    let styles: Vec<String> = (0..n_style).map(style_prompt).collect();
    let fx = FeatureExtractor::new(cfg.denoiser.pixels(), cfg.eval.extractor_seed);
    let grid_seed = rng::derive_seed(cfg.seed, 6);

    let mut s_x = Vec::with_capacity(2);
    for host in [&w_init_host, &base] {
        let content = train_lora(cfg, AdapterKind::Content, host, &c_ref, &c_prompt)?.adapter;
        let style = train_lora(cfg, AdapterKind::Style, host, &s_ref, &s_prompt)?.adapter;
        let adapters = AdapterSet::new(cfg.routing.resolve(host.backbone())?, content, style)?;
        let grid = sample_grid(cfg, host, &adapters, &contents, &styles, grid_seed)?;
        s_x.push(cross_influence(&fx, &grid, cfg.eval.sigma)?);
    }
    Ok(DisentanglementProbe {
        s_x_rank_limited: s_x[0],
        s_x_plain: s_x[1],
        trunk_initial_loss: trunk.initial_eval_loss,
        trunk_final_loss: trunk.final_eval_loss,
    })
}

// ---- on-disk commands ----

pub const MANIFEST: &str = "manifest.tsv";

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Bases sidecar written next to a trunk checkpoint.
pub fn bases_path(out: &Path) -> PathBuf {
    sidecar(out, ".bases")
}

/// Plain base-model checkpoint written next to a trunk checkpoint.
pub fn plain_path(out: &Path) -> PathBuf {
    sidecar(out, ".plain")
}

fn check_field(s: &str) -> Result<&str> {
    if s.contains(['\t', '\n', '\r']) {
        return Err(Error::ConfigInvalid(format!("prompt field {s:?} contains a tab or newline")));
    }
    Ok(s)
}

/// Writes `pair_NNN_content.pgm`, `pair_NNN_style.pgm` and the manifest.
pub fn cmd_gen_pairs(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<ContrastPair>> {
    let pairs = build_dataset(cfg, None)?;
    fs::create_dir_all(out_dir)?;
    let mut manifest = String::new();
    for p in &pairs {
        let c = format!("pair_{:03}_content.pgm", p.pair_id);
        let s = format!("pair_{:03}_style.pgm", p.pair_id);
        pgm::write(&out_dir.join(&c), &p.content_image)?;
        pgm::write(&out_dir.join(&s), &p.style_image)?;
        writeln!(
            manifest,
            "{}\t{c}\t{s}\t{}\t{}\t{}\t{}",
            p.pair_id,
            check_field(&p.content_prompt)?,
            check_field(&p.style_prompt)?,
            check_field(&p.content_modifier)?,
            check_field(&p.style_modifier)?
        )
        .expect("string write");
    }
    fs::write(out_dir.join(MANIFEST), manifest)?;
    Ok(pairs)
}

/// Reads a dataset directory written by [`cmd_gen_pairs`].
pub fn load_dataset(dir: &Path) -> Result<Vec<ContrastPair>> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut contents: Vec<String> = Vec::new();
    let mut styles: Vec<String> = Vec::new();
    let index_of = |list: &mut Vec<String>, s: &str| match list.iter().position(|x| x == s) {
        Some(k) => k,
        None => {
            list.push(s.to_string());
            list.len() - 1
        }
    };
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(Error::BadImage(format!("manifest line {} has {} fields, expected 7", lineno + 1, f.len())));
        }
        let pair_id = f[0]
            .parse()
            .map_err(|_| Error::BadImage(format!("manifest line {}: bad pair id", lineno + 1)))?;
        pairs.push(ContrastPair {
            pair_id,
            content_index: index_of(&mut contents, f[3]),
            style_index: index_of(&mut styles, f[4]),
            content_image: pgm::read(&dir.join(f[1]))?,
            style_image: pgm::read(&dir.join(f[2]))?,
            content_prompt: f[3].to_string(),
            style_prompt: f[4].to_string(),
            content_modifier: f[5].to_string(),
            style_modifier: f[6].to_string(),
        });
    }
    if pairs.is_empty() {
        return Err(Error::EmptySet("dataset manifest"));
    }
    Ok(pairs)
}

/// Per-layer rank table of a trunk run.
pub fn rank_table(host: &Denoiser, trunk: &TrunkResult, cfg: &RunConfig) -> Result<String> {
    let schedule = RankSchedule::new(cfg.trunk.r_max, cfg.trunk.r_min, host.backbone().len())?;
    let mut out = String::from("layer\tr_l\tcontent\tstyle\tmerged\n");
    for (l, layer) in host.backbone().layers().iter().enumerate() {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            layer.name,
            schedule.rank_at(l + 1)?,
            trunk.bases.content[l].cols(),
            trunk.bases.style[l].cols(),
            trunk.merged[l].cols()
        )
        .expect("string write");
    }
    Ok(out)
}

/// Trains (or loads) the base model and the trunk; writes `out` (`W_init`
/// with the frozen auxiliary parameters), the bases sidecar and the plain
/// base model. Returns the summary printed by the CLI.
pub fn cmd_train_trunk(cfg: &RunConfig, data_dir: &Path, base: Option<&Path>, out: &Path) -> Result<String> {
    let pairs = load_dataset(data_dir)?;
    let base = match base {
        Some(p) => denoiser_from_checkpoint(&Checkpoint::load(p)?)?,
        None => train_base(cfg, &pairs)?,
    };
    if *base.config() != cfg.denoiser {
        return Err(Error::ConfigInvalid("base checkpoint architecture differs from the config".into()));
    }
    let (host, trunk) = train_trunk(cfg, &base, &pairs)?;
    denoiser_to_checkpoint(&host, "w_init").save(out)?;
    let names: Vec<String> = host.backbone().names().map(str::to_string).collect();
    bases_to_checkpoint(&names, &trunk.bases, &trunk.merged).save(&bases_path(out))?;
    denoiser_to_checkpoint(&base, "plain").save(&plain_path(out))?;
    let mut summary = format!(
        "final trunk loss {:.6} (eval {:.6} -> {:.6})\n",
        trunk.losses.last().copied().unwrap_or(f64::NAN),
        trunk.initial_eval_loss,
        trunk.final_eval_loss
    );
    summary.push_str(&rank_table(&host, &trunk, cfg)?);
    Ok(summary)
}

pub fn load_host(path: &Path) -> Result<Denoiser> {
    denoiser_from_checkpoint(&Checkpoint::load(path)?)
}

pub fn cmd_train_lora(
    cfg: &RunConfig,
    kind: AdapterKind,
    reference: &Path,
    prompt: &str,
    backbone: &Path,
    out: &Path,
) -> Result<String> {
    let host = load_host(backbone)?;
    let reference = pgm::read(reference)?;
    let result = train_lora(cfg, kind, &host, &reference, prompt)?;
    let routing = cfg.routing.resolve(host.backbone())?;
    adapter_to_checkpoint(&result.adapter, &routing, &host_hash(host.backbone())).save(out)?;
    Ok(format!(
        "{} adapter: eval loss {:.6} vs {:.6} with a zero adapter\n",
        kind.as_str(),
        result.eval_loss,
        result.zero_adapter_loss
    ))
}

/// Loads adapters (zero adapters where absent) and checks them against the
/// host unless `allow_foreign_host` is set.
pub fn load_adapters(
    cfg: &RunConfig,
    host: &Denoiser,
    content: Option<&Path>,
    style: Option<&Path>,
    allow_foreign_host: bool,
) -> Result<AdapterSet> {
    let expected = host_hash(host.backbone());
    let mut routing = None;
    let mut load = |path: Option<&Path>, kind: AdapterKind| -> Result<Option<LoraAdapter>> {
        let Some(p) = path else { return Ok(None) };
        let (adapter, r, hash) = adapter_from_checkpoint(&Checkpoint::load(p)?)?;
        if adapter.kind() != kind {
            return Err(Error::RoutingViolation(format!("{} is a {} adapter", p.display(), adapter.kind().as_str())));
        }
        if !allow_foreign_host && hash != expected {
            return Err(Error::HostMismatch { expected: hash, actual: expected.clone() });
        }
        match &routing {
            Some(existing) if existing != &r => {
                return Err(Error::RoutingViolation("content and style adapters disagree on routing".into()))
            }
            _ => routing = Some(r),
        }
        Ok(Some(adapter))
    };
    let c = load(content, AdapterKind::Content)?;
    let s = load(style, AdapterKind::Style)?;
    let routing = match routing {
        Some(r) => r,
        None => cfg.routing.resolve(host.backbone())?,
    };
    let rank = c.as_ref().or(s.as_ref()).map_or(cfg.adapter.rank, LoraAdapter::rank);
    let dim = host.config().cond_dim;
    let c = match c {
        Some(a) => a,
        None => LoraAdapter::zeros(AdapterKind::Content, host.backbone(), &routing, rank, dim)?,
    };
    let s = match s {
        Some(a) => a,
        None => LoraAdapter::zeros(AdapterKind::Style, host.backbone(), &routing, rank, dim)?,
    };
    AdapterSet::new(routing, c, s)
}

#[derive(Debug, Clone, Default)]
pub struct SampleOptions {
    pub gamma_c: Option<f64>,
    pub gamma_s: Option<f64>,
    pub symmetric_cfg: bool,
    /// Skip the host-hash check (adapters on a different backbone).
    pub foreign_host: bool,
    pub trace: Option<PathBuf>,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_sample(
    cfg: &RunConfig,
    prompt: &str,
    backbone: &Path,
    content: Option<&Path>,
    style: Option<&Path>,
    seed: u64,
    out: &Path,
    opts: &SampleOptions,
) -> Result<ImageGrid> {
    let host = load_host(backbone)?;
    let adapters = load_adapters(cfg, &host, content, style, opts.foreign_host)?;
    let spec = parse_prompt(prompt)?;
    let mut cond = Conditioning::from_prompt(&spec, None)?;
    if let Some(g) = opts.gamma_c {
        cond.gamma_c = g;
    }
    if let Some(g) = opts.gamma_s {
        cond.gamma_s = g;
    }
    let mut guidance = cfg.guidance;
    guidance.symmetric_cfg |= opts.symmetric_cfg;
    let mut trace: Vec<TraceRecord> = Vec::new();
    let img = acfg_sample(&host, host.backbone(), &adapters, &cond, &guidance, seed, opts.trace.as_ref().map(|_| &mut trace))?;
    pgm::write(out, &img)?;
    if let Some(path) = &opts.trace {
        let mut f = fs::File::create(path)?;
        writeln!(f, "t\tgamma_c_eff\tgamma_s_eff\talpha\teps_gap")?;
        for r in &trace {
            writeln!(f, "{r}")?;
        }
    }
    Ok(img)
}

/// Prompt grid and reference images for `eval`. Reference paths are relative
/// to the spec file; one shared reference may stand for all rows/columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub content_prompts: Vec<String>,
    pub style_prompts: Vec<String>,
    pub content_references: Vec<String>,
    pub style_references: Vec<String>,
}

fn expand_refs(base: &Path, paths: &[String], n: usize, what: &str) -> Result<Vec<ImageGrid>> {
    let imgs = paths.iter().map(|p| pgm::read(&base.join(p))).collect::<Result<Vec<_>>>()?;
    match imgs.len() {
        1 => Ok(vec![imgs[0].clone(); n]),
        k if k == n => Ok(imgs),
        k => Err(Error::GridIncomplete(format!("{k} {what} references for {n} prompts"))),
    }
}

pub fn cmd_eval(
    cfg: &RunConfig,
    grid_spec: &Path,
    backbone: &Path,
    content: Option<&Path>,
    style: Option<&Path>,
    out: &Path,
) -> Result<EvalReport> {
    let spec: GridSpec = serde_json::from_str(&fs::read_to_string(grid_spec)?)
        .map_err(|e| Error::GridIncomplete(format!("grid spec: {e}")))?;
    if spec.content_prompts.is_empty() || spec.style_prompts.is_empty() {
        return Err(Error::GridIncomplete("grid spec needs content and style prompts".into()));
    }
    let base_dir = grid_spec.parent().unwrap_or(Path::new("."));
    let c_refs = expand_refs(base_dir, &spec.content_references, spec.content_prompts.len(), "content")?;
    let s_refs = expand_refs(base_dir, &spec.style_references, spec.style_prompts.len(), "style")?;
    let host = load_host(backbone)?;
    let adapters = load_adapters(cfg, &host, content, style, false)?;
    let grid = sample_grid(cfg, &host, &adapters, &spec.content_prompts, &spec.style_prompts, cfg.seed)?;
    let fx = FeatureExtractor::new(cfg.denoiser.pixels(), cfg.eval.extractor_seed);
    let report = evaluate_grid(&fx, &grid, &c_refs, &s_refs, cfg.eval.sigma, cfg.seed, cfg.hash())?;
    fs::write(out, serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}

/// Human-readable summary of any checkpoint. Adapter routing is re-checked.
pub fn cmd_inspect(path: &Path) -> Result<String> {
    let ck = Checkpoint::load(path)?;
    let mut out = String::new();
    writeln!(out, "kind\t{}", ck.kind.as_str()).expect("string write");
    writeln!(out, "crc\tok").expect("string write");
    for (k, v) in &ck.meta {
        writeln!(out, "meta\t{k}\t{v}").expect("string write");
    }
    if ck.kind == CheckpointKind::Adapter {
        let (adapter, routing, _) = adapter_from_checkpoint(&ck)?;
        writeln!(out, "routing\tdisjoint\t{} content, {} style layers", routing.content().len(), routing.style().len())
            .expect("string write");
        for (name, f) in adapter.factors() {
            let rank = numerical_rank(&f.delta())?;
            writeln!(out, "update\t{name}\t{}x{}\trank {rank}", f.b.rows(), f.a.cols()).expect("string write");
        }
    }
    if ck.kind == CheckpointKind::Backbone && ck.meta.contains_key("denoiser") {
        let net = denoiser_from_checkpoint(&ck)?;
        writeln!(out, "host_hash\t{}", host_hash(net.backbone())).expect("string write");
    }
    for (name, m) in &ck.tensors {
        let rank = if m.rows() > 0 && m.cols() > 0 { numerical_rank(m)?.to_string() } else { "0".into() };
        writeln!(out, "tensor\t{name}\t{}x{}\trank {rank}", m.rows(), m.cols()).expect("string write");
    }
    Ok(out)
}

fn numerical_rank(m: &crate::tensorcore::Matrix) -> Result<usize> {
    if m.max_abs() == 0.0 {
        return Ok(0);
    }
    Ok(qr_decompose(m)?.kept.len())
}
