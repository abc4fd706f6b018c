mod common;

use common::*;
use craftlora::backbone::Layer;
use craftlora::pairgen::{generate_pair_dataset, DatasetConfig};
use craftlora::perceptual::ConvFeatureExtractor;
use craftlora::rng;
use craftlora::subspace::{
    apply_rank_limited_update, draw_trunk_batch, finetune_trunk, merge_subspaces, rank_limited_backbone, trunk_loss,
    RankSchedule, SubspaceBases, TrunkConfig, TrunkLossWeights,
};
use craftlora::denoiser::DenoiserConfig;
use craftlora::tensorcore::{low_rank_update, project_out, qr_decompose, qr_q_backward};
use craftlora::{LayeredBackbone, Matrix};

#[test]
fn qr_matches_nalgebra_up_to_column_signs() {
    let mut rng = rng::seeded(1);
    let b = gaussian_matrix(&mut rng, 8, 3);
    let ours = qr_decompose(&b).unwrap();
    let theirs = to_na(&b).qr();
    let (q, r) = (theirs.q(), theirs.r());
    for k in 0..3 {
        let s = r[(k, k)].signum();
        assert!((ours.r[(k, k)] - r[(k, k)].abs()).abs() < 1e-12);
        for i in 0..8 {
            assert!((ours.q[(i, k)] - s * q[(i, k)]).abs() < 1e-12);
        }
    }
    assert!(inf_norm(&ours.q.matmul_tn(&ours.q).unwrap().sub(&Matrix::identity(3)).unwrap()) < 1e-10);
    assert!(inf_norm(&ours.q.matmul(&ours.r).unwrap().sub(&b).unwrap()) < 1e-9);
}

#[test]
fn projection_matches_explicit_complement() {
    let mut rng = rng::seeded(2);
    let w = gaussian_matrix(&mut rng, 16, 16);
    let q = qr_decompose(&gaussian_matrix(&mut rng, 16, 4)).unwrap().q;
    let ours = project_out(&w, &q).unwrap();
    let nq = to_na(&q);
    let explicit = (nalgebra::DMatrix::<f64>::identity(16, 16) - &nq * nq.transpose()) * to_na(&w);
    assert!((to_na(&ours) - explicit).abs().max() < 1e-12);
    assert!(inf_norm(&q.matmul_tn(&ours).unwrap()) < 1e-8);
}

#[test]
fn low_rank_update_hand_example() {
    let b = Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
    let a = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
    let w = low_rank_update(&Matrix::identity(2), &b, &a).unwrap();
    assert_eq!(w, Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap());
}

#[test]
fn merge_identical_and_orthogonal_spans() {
    let mut rng = rng::seeded(3);
    let qc = qr_decompose(&gaussian_matrix(&mut rng, 10, 3)).unwrap().q;
    let same = merge_subspaces(&qc, &qc).unwrap();
    assert_eq!(same.cols(), 3);
    assert_eq!(same.cols(), svd_rank(&qc.hcat(&qc).unwrap(), 1e-8));

    let axes = |cols: &[usize]| Matrix::from_fn(10, cols.len(), |r, c| if r == cols[c] { 1.0 } else { 0.0 });
    let (a, b) = (axes(&[0, 1, 2]), axes(&[5, 7]));
    let merged = merge_subspaces(&a, &b).unwrap();
    assert_eq!(merged.cols(), 5);
    assert_eq!(merged.cols(), svd_rank(&a.hcat(&b).unwrap(), 1e-8));
}

#[test]
fn rank_limited_update_annihilates_each_basis() {
    let mut rng = rng::seeded(4);
    let layers = (0..4)
        .map(|i| Layer { name: format!("l{i}"), weight: gaussian_matrix(&mut rng, 12, 12) })
        .collect();
    let bb = LayeredBackbone::new(layers).unwrap();
    let qs: Vec<Matrix> = (0..4).map(|_| qr_decompose(&gaussian_matrix(&mut rng, 12, 2)).unwrap().q).collect();
    let out = apply_rank_limited_update(&bb, &qs).unwrap();
    for (l, q) in qs.iter().enumerate() {
        assert!(inf_norm(&q.matmul_tn(out.weight(l)).unwrap()) < 1e-8);
    }
}

#[test]
fn qr_backward_matches_finite_differences() {
    // scalar L = <G, Q(B)> for a fixed random G
    let mut rng = rng::seeded(5);
    let b = gaussian_matrix(&mut rng, 7, 3);
    let g = gaussian_matrix(&mut rng, 7, 3);
    let qr = qr_decompose(&b).unwrap();
    let grad = qr_q_backward(&qr.q, &qr.r, &g).unwrap();
    let loss = |m: &Matrix| craftlora::tensorcore::dot(qr_decompose(m).unwrap().q.values(), g.values());
    let h = 1e-6;
    for r in 0..7 {
        for c in 0..3 {
            let (mut p, mut n) = (b.clone(), b.clone());
            p[(r, c)] += h;
            n[(r, c)] -= h;
            let numeric = (loss(&p) - loss(&n)) / (2.0 * h);
            assert!(rel_err(grad[(r, c)], numeric) < 1e-6, "({r},{c}): {} vs {numeric}", grad[(r, c)]);
        }
    }
}

fn toy_setup(seed: u64) -> (craftlora::denoiser::Denoiser, Vec<craftlora::pairgen::ContrastPair>) {
    let cfg = DenoiserConfig { side: 8, hidden: 24, layers: 4, time_dim: 8, cond_dim: 64 };
    let net = craftlora::denoiser::Denoiser::init(cfg, schedule(50), seed).unwrap();
    let data = DatasetConfig { side: 8, n_content: 3, n_style: 3, ..DatasetConfig::default() };
    (net, generate_pair_dataset(&data, seed, None).unwrap())
}

#[test]
fn empty_bases_leave_only_the_task_loss() {
    let (net, pairs) = toy_setup(6);
    let w0 = net.backbone();
    let empty = SubspaceBases {
        content: w0.layers().iter().map(|l| Matrix::zeros(l.weight.rows(), 0)).collect(),
        style: w0.layers().iter().map(|l| Matrix::zeros(l.weight.rows(), 0)).collect(),
    };
    let batch = draw_trunk_batch(&net, &pairs, &[0, 4], &mut rng::seeded(6));
    let fx = ConvFeatureExtractor::new(6);
    let out = trunk_loss(&net, w0, &empty, &batch, TrunkLossWeights { lambda_reg: 0.5, alpha_perc: 0.0 }, &fx).unwrap();
    assert_eq!(out.regularizer, 0.0);
    assert_eq!(out.total, out.l1);
    assert_eq!(out.perceptual, 0.0);
}

#[test]
fn two_layer_trunk_gradient_on_one_pair() {
    let cfg = DenoiserConfig { side: 4, hidden: 8, layers: 2, time_dim: 8, cond_dim: 64 };
    let net = craftlora::denoiser::Denoiser::init(cfg, schedule(20), 7).unwrap();
    let data = DatasetConfig { side: 4, n_content: 1, n_style: 1, ..DatasetConfig::default() };
    let pairs = generate_pair_dataset(&data, 7, None).unwrap();
    let mut rng = rng::seeded(7);
    let batch = draw_trunk_batch(&net, &pairs, &[0], &mut rng);
    let bases = SubspaceBases::init(&RankSchedule::new(3, 2, 2).unwrap(), net.backbone(), 0.5, &mut rng).unwrap();
    let fx = ConvFeatureExtractor::new(7);
    let w = TrunkLossWeights { lambda_reg: 1e-2, alpha_perc: 0.2 };
    let grads = trunk_loss(&net, net.backbone(), &bases, &batch, w, &fx).unwrap().grads;
    let h = 1e-5;
    for l in 0..2 {
        for (member, g) in [(0, &grads.content[l]), (1, &grads.style[l])] {
            for r in 0..g.rows() {
                for c in 0..g.cols() {
                    let shifted = |d: f64| {
                        let mut b = bases.clone();
                        let m = if member == 0 { &mut b.content[l] } else { &mut b.style[l] };
                        m[(r, c)] += d;
                        trunk_loss(&net, net.backbone(), &b, &batch, w, &fx).unwrap().total
                    };
                    let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
                    assert!(rel_err(g[(r, c)], numeric) < 1e-4, "layer {l} ({r},{c}): {} vs {numeric}", g[(r, c)]);
                }
            }
        }
    }
}

#[test]
fn zero_step_trunk_is_the_initial_projection() {
    let (net, pairs) = toy_setup(8);
    let cfg = TrunkConfig { steps: 0, r_max: 6, r_min: 2, ..TrunkConfig::default() };
    let out = finetune_trunk(&net, &pairs, &cfg, 8).unwrap();
    let (expected, merged) = rank_limited_backbone(net.backbone(), &out.bases).unwrap();
    assert_eq!(out.w_init, expected);
    assert_eq!(out.merged, merged);
    assert!(out.losses.is_empty());
    assert_eq!(out.initial_eval_loss, out.final_eval_loss);
    assert_eq!(out.bases.content[0].cols(), 6);
    assert_eq!(out.bases.content[3].cols(), 2);
}

#[test]
fn trunk_training_lowers_the_loss_on_three_seeds() {
    for seed in 0..3 {
        let (net, pairs) = toy_setup(100 + seed);
        let cfg = TrunkConfig { r_max: 6, r_min: 2, eval_pairs: 8, ..TrunkConfig::default() };
        let out = finetune_trunk(&net, &pairs, &cfg, seed).unwrap();
        assert_eq!(out.losses.len(), 500);
        assert!(out.final_eval_loss < out.initial_eval_loss, "seed {seed}: {} -> {}", out.initial_eval_loss, out.final_eval_loss);
        for (q, w) in out.merged.iter().zip(out.w_init.layers()) {
            assert!(inf_norm(&q.matmul_tn(&w.weight).unwrap()) < 1e-8);
        }
    }
}

#[test]
fn trunk_training_is_deterministic() {
    let (net, pairs) = toy_setup(9);
    let cfg = TrunkConfig { steps: 30, r_max: 6, r_min: 2, ..TrunkConfig::default() };
    let a = finetune_trunk(&net, &pairs, &cfg, 9).unwrap();
    let b = finetune_trunk(&net, &pairs, &cfg, 9).unwrap();
    assert_eq!(a.w_init, b.w_init);
    assert_eq!(a.losses, b.losses);
}
