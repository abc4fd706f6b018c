mod common;

use std::collections::BTreeSet;

use common::*;
use craftlora::adapters::{AdapterSet, LayerRouting};
use craftlora::guidance::{
    acfg_predict, acfg_sample, encode_semantic, expert_gammas, parse_prompt, temporal_alpha, Acfg, Conditioning, ExpertEncoder,
    GKind, GuidanceConfig,
};
use craftlora::pairgen::{CONTENT_MODIFIERS, CONTENT_SUBJECTS, STYLE_MODIFIERS, STYLE_NAMES};
use craftlora::{rng, ImageGrid};

fn toy_vocabulary() -> Vec<String> {
    let words: BTreeSet<String> = [CONTENT_SUBJECTS, STYLE_NAMES, STYLE_MODIFIERS, CONTENT_MODIFIERS]
        .iter()
        .flat_map(|l| l.iter().flat_map(|p| p.split_whitespace().map(str::to_string)))
        .collect();
    words.into_iter().collect()
}

#[test]
fn one_token_edits_never_collide() {
    let vocab = toy_vocabulary();
    let prompts: Vec<String> = CONTENT_SUBJECTS
        .iter()
        .zip(STYLE_NAMES)
        .map(|(c, s)| format!("{c} {s}"))
        .chain(CONTENT_SUBJECTS.iter().map(|s| s.to_string()))
        .collect();
    let mut checked = 0;
    for p in &prompts {
        let tokens: Vec<&str> = p.split_whitespace().collect();
        let base = encode_semantic(p);
        for pos in 0..tokens.len() {
            for word in &vocab {
                if word == tokens[pos] {
                    continue;
                }
                let mut edited = tokens.clone();
                edited[pos] = word;
                assert_ne!(encode_semantic(&edited.join(" ")), base, "{p} / {word} at {pos}");
                checked += 1;
            }
        }
    }
    assert!(checked > 5000);
}

#[test]
fn expert_gains_are_never_negative() {
    let mut r = rng::seeded(11);
    let mut enc = ExpertEncoder::new(5, 11).unwrap();
    let n = enc.head_weight.values().len();
    enc.head_weight = craftlora::Matrix::from_vec(enc.head_weight.rows(), enc.head_weight.cols(), rng::gaussian_vec(&mut r, n).iter().map(|v| 4.0 * v).collect()).unwrap();
    enc.head_bias = [-20.0, 3.0];
    for k in 0..1000 {
        let id = enc.id_embedding(k % 5).unwrap();
        let e_c = rng::gaussian_vec(&mut r, 64);
        let e_s = rng::gaussian_vec(&mut r, 64);
        let (gc, gs) = expert_gammas(&enc, &id, &e_c, &e_s).unwrap();
        assert!(gc >= 0.0 && gs >= 0.0 && gc.is_finite() && gs.is_finite());
    }
    let null = vec![0.0; 64];
    assert_eq!(expert_gammas(&enc, &enc.id_embedding(0).unwrap(), &null, &null).unwrap(), (0.0, 0.0));
}

#[test]
fn temporal_alpha_midpoint_and_monotonicity() {
    let cfg = GuidanceConfig::default();
    assert!((temporal_alpha(25, &cfg) - 0.75).abs() < 1e-12);
    assert_eq!(temporal_alpha(50, &cfg), 0.5);
    assert!((temporal_alpha(0, &cfg) - 1.0).abs() < 1e-15);
    for kind in [GKind::Cosine, GKind::Linear] {
        let cfg = GuidanceConfig { g_kind: kind, ..cfg };
        for t in 1..=50 {
            assert!(temporal_alpha(t, &cfg) <= temporal_alpha(t - 1, &cfg));
        }
    }
}

fn noise(seed: u64, side: usize) -> ImageGrid {
    ImageGrid::new(side, side, rng::gaussian_vec(&mut rng::seeded(seed), side * side)).unwrap()
}

#[test]
fn inactive_windows_and_null_prompt_reduce_to_unconditional() {
    let net = tiny_net(1, 40);
    let w = net.backbone();
    let set = random_adapters(w, 2, 1);
    let cfg = GuidanceConfig { steps: 40, content_window: (1, 5), style_window: (6, 10), ..GuidanceConfig::default() };
    let cond = Conditioning { embedding: net.null_embedding(), gamma_c: 1.0, gamma_s: 1.0 };
    let x = noise(2, 4);
    for omega in [0.0, 1.0, 7.5, 30.0] {
        let out = acfg_predict(&net, w, &set, &cond, &GuidanceConfig { omega, ..cfg }, &x, 30).unwrap();
        assert_eq!(out.guided, out.eps_uncond);
        assert_eq!(out.trace.gap, 0.0);
    }
}

#[test]
fn zero_adapters_give_standard_cfg() {
    let net = tiny_net(3, 30);
    let w = net.backbone();
    let set = AdapterSet::zeros(w, LayerRouting::split_halves(w), 2, 64).unwrap();
    let cfg = GuidanceConfig { steps: 30, content_window: (1, 20), style_window: (10, 30), ..GuidanceConfig::default() };
    let e = encode_semantic("a sail boat in mosaic style");
    let cond = Conditioning { embedding: e.clone(), gamma_c: 1.0, gamma_s: 1.0 };
    let x = noise(3, 4);
    for t in [1, 12, 30] {
        let out = acfg_predict(&net, w, &set, &cond, &cfg, &x, t).unwrap();
        let c = net.predict_eps(w, &x, t, &e).unwrap();
        let u = net.predict_eps(w, &x, t, &net.null_embedding()).unwrap();
        let plain = c.zip_map(&u, |c, u| (1.0 + cfg.omega) * c - cfg.omega * u).unwrap();
        assert!(out.guided.max_abs_diff(&plain) < 1e-12);
    }
}

#[test]
fn guided_estimate_satisfies_the_combination_identity() {
    let net = tiny_net(4, 50);
    let w = net.backbone();
    let set = random_adapters(w, 3, 4);
    let cond = Conditioning::from_prompt(&parse_prompt("a red car <c> in pixel art style <s>").unwrap(), None).unwrap();
    for (k, omega) in [0.5, 3.0, 7.5, 12.0].into_iter().enumerate() {
        let cfg = GuidanceConfig { omega, ..GuidanceConfig::default() };
        let out = acfg_predict(&net, w, &set, &cond, &cfg, &noise(k as u64, 4), 10 + 10 * k).unwrap();
        for ((g, c), u) in out.guided.pixels().iter().zip(out.eps_cond.pixels()).zip(out.eps_uncond.pixels()) {
            let lhs = g + omega * u;
            let rhs = (1.0 + omega) * c;
            let scale = lhs.abs().max(rhs.abs()).max(omega * u.abs());
            assert!((lhs - rhs).abs() <= 8.0 * f64::EPSILON * scale, "{lhs} vs {rhs}");
        }
    }
}

#[test]
fn single_step_sample_is_the_posterior_mean() {
    let net = tiny_net(5, 1);
    let w = net.backbone();
    let set = random_adapters(w, 2, 5);
    let cfg = GuidanceConfig { steps: 1, content_window: (1, 1), style_window: (1, 1), ..GuidanceConfig::default() };
    let cond = Conditioning::from_prompt(&parse_prompt("a tall tree <c> in charcoal style <s>").unwrap(), None).unwrap();
    let z = noise(7, 4);
    let guided = acfg_predict(&net, w, &set, &cond, &cfg, &z, 1).unwrap().guided;
    let x0 = net.predict_x0(&z, 1, &guided).unwrap();
    let sample = acfg_sample(&net, w, &set, &cond, &cfg, 7, None).unwrap();
    assert!(sample.max_abs_diff(&x0.from_model_space().clamped()) < 1e-12);
}

#[test]
fn sampling_repeats_and_rebuilds_once_per_gain_change() {
    let net = tiny_net(6, 50);
    let w = net.backbone();
    let set = random_adapters(w, 2, 6);
    let cond = Conditioning::from_prompt(&parse_prompt("a small dog <c> in ukiyo-e style <s>").unwrap(), None).unwrap();
    let cfg = GuidanceConfig { alpha_min: 1.0, alpha_max: 1.0, ..GuidanceConfig::default() };
    let a = acfg_sample(&net, w, &set, &cond, &cfg, 9, None).unwrap();
    let b = acfg_sample(&net, w, &set, &cond, &cfg, 9, None).unwrap();
    assert_eq!(a, b);

    // constant α: gains change only at window edges 35→34 and 15→14
    let mut acfg = Acfg::new(&net, w, &set, &cfg, cond.clone()).unwrap();
    let mut trace = Vec::new();
    acfg.trajectory(9, Some(&mut trace)).unwrap();
    assert_eq!(trace.len(), 50);
    assert_eq!(acfg.rebuilds(), 3);
    assert!(trace.iter().all(|r| r.gamma_c_eff == if r.t <= 35 { 1.0 } else { 0.0 }));
    assert!(trace.iter().all(|r| r.gamma_s_eff == if r.t >= 15 { 1.0 } else { 0.0 }));
}
