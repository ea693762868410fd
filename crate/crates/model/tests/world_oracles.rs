mod common;

use autodiff::{check_gradients, Graph, ParamStore};
use common::*;
use model::util::softmax;
use model::world::{
    codebook_losses, codebook_usage, component_token_scores, loss_weighted_from_scores,
    nearest_components, noisy_option_scores, sample_and_decode, world_losses, WorldModel, LAMBDA,
};
use rand::Rng;

fn tiny_world(m: usize, seed: u64) -> (ParamStore<f64>, WorldModel) {
    let cfg = tiny_cfg();
    let mut store = ParamStore::<f64>::new();
    let model = WorldModel::new(&mut store, &mut rng(seed), &cfg, m).unwrap();
    (store, model)
}

#[test]
fn nearest_component_examples_and_scan_oracle() {
    // codebook {[0,0],[1,1]}, u=[0.1,0] -> component 0
    let cb = vec![0.0, 0.0, 1.0, 1.0];
    assert_eq!(nearest_components(&[0.1, 0.0], 1, 2, &cb, 2), vec![0]);
    // exact tie -> lowest index
    assert_eq!(nearest_components(&[0.5, 0.5], 1, 2, &cb, 2), vec![0]);

    // random scan against a naive oracle, M = 512
    let mut r = rng(1);
    let (m, d, rows) = (512usize, 8usize, 40usize);
    let cb: Vec<f64> = (0..m * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let u: Vec<f64> = (0..rows * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let got = nearest_components(&u, rows, d, &cb, m);
    for row in 0..rows {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..m {
            let dist: f64 = (0..d)
                .map(|i| (u[row * d + i] - cb[c * d + i]).powi(2))
                .sum();
            if dist < best_d {
                best_d = dist;
                best = c;
            }
        }
        assert_eq!(got[row], best, "row {row}");
    }
}

#[test]
fn quantization_losses_vanish_when_features_sit_on_components() {
    let (mut store, model) = tiny_world(4, 2);
    let cfg = tiny_cfg();
    let (n, d) = (cfg.tokens(), cfg.dim);
    // u rows are exact copies of codebook rows
    let cb = store.get(model.codebook).data.clone();
    let mut u = Vec::with_capacity(16 * n * d);
    for i in 0..16 * n {
        let c = i % 4;
        u.extend_from_slice(&cb[c * d..(c + 1) * d]);
    }
    let g = Graph::new();
    let u_t = g.constant(u, &[1, 16, n, d]).unwrap();
    let b_t = g.zeros(&[1, 16, n, d]);
    let x_t = g.zeros(&[16, cfg.raster_size * cfg.raster_size]);
    let mut r = rng(3);
    let losses = codebook_losses(&g, &store, &model, &u_t, &b_t, &x_t, &mut r).unwrap();
    assert!(losses.l1.item().abs() < 1e-20);
    assert!(losses.l3.item().abs() < 1e-20);
    let _ = store.data_mut(model.tau);
}

#[test]
fn stop_gradient_placement_l1_l3() {
    // l1 must not move the codebook; l3 must not move the features
    let (mut store, model) = tiny_world(4, 4);
    let cfg = tiny_cfg();
    let (n, d) = (cfg.tokens(), cfg.dim);
    let mut r = rng(5);
    let u_data: Vec<f64> = (0..16 * n * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let u_param = store.add("test.u", &[1, 16, n, d], u_data);

    let g = Graph::new();
    let u_t = g.param(&store, u_param);
    let b_t = g.zeros(&[1, 16, n, d]);
    let x_t = g.zeros(&[16, cfg.raster_size * cfg.raster_size]);
    let mut rr = rng(6);
    let losses = codebook_losses(&g, &store, &model, &u_t, &b_t, &x_t, &mut rr).unwrap();

    let mut grads = g.backward(&losses.l1).unwrap();
    let by = g.param_grads(&mut grads);
    let cb_grad = by.iter().find(|(id, _)| *id == model.codebook).unwrap();
    assert!(cb_grad.1.iter().all(|&v| v == 0.0), "l1 must not touch the codebook");
    let u_grad = by.iter().find(|(id, _)| *id == u_param).unwrap();
    assert!(u_grad.1.iter().any(|&v| v != 0.0), "l1 must move the features");

    let mut grads = g.backward(&losses.l3).unwrap();
    let by = g.param_grads(&mut grads);
    let u_grad = by.iter().find(|(id, _)| *id == u_param).unwrap();
    assert!(u_grad.1.iter().all(|&v| v == 0.0), "l3 must not touch the features");
    let cb_grad = by.iter().find(|(id, _)| *id == model.codebook).unwrap();
    assert!(cb_grad.1.iter().any(|&v| v != 0.0), "l3 must move the codebook");
}

#[test]
fn straight_through_passes_decoder_gradients_to_features_unchanged() {
    let (mut store, model) = tiny_world(4, 7);
    let cfg = tiny_cfg();
    let (n, d) = (cfg.tokens(), cfg.dim);
    let mut r = rng(8);
    let u_data: Vec<f64> = (0..16 * n * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let x_data: Vec<f64> = (0..16 * cfg.raster_size * cfg.raster_size)
        .map(|_| r.gen_range(0.0..1.0))
        .collect();
    let b_data: Vec<f64> = (0..16 * n * d).map(|_| r.gen_range(-0.5..0.5)).collect();
    let u_param = store.add("test.u", &[1, 16, n, d], u_data.clone());

    // route A: full straight-through path, gradient w.r.t. u
    let g = Graph::new();
    let u_t = g.param(&store, u_param);
    let b_t = g.constant(b_data.clone(), &[1, 16, n, d]).unwrap();
    let x_t = g
        .constant(x_data.clone(), &[16, cfg.raster_size * cfg.raster_size])
        .unwrap();
    let codebook = g.param(&store, model.codebook);
    let assignments = nearest_components(u_t.value(), 16 * n, d, codebook.value(), 4);
    let u_sel = codebook
        .index_select(0, &assignments)
        .unwrap()
        .reshape(&[1, 16, n, d])
        .unwrap();
    let u_hat = u_sel.sub(&u_t.stop_gradient()).unwrap().add(&u_t).unwrap();
    // forward value of the quantized feature is the component (the - u + u
    // composition reassociates, so equality holds to rounding)
    for (a, b) in u_hat.value().iter().zip(u_sel.value()) {
        assert!((a - b).abs() < 1e-12);
    }
    let tokens = u_hat.add(&b_t).unwrap().reshape(&[16, n, d]).unwrap();
    let recon = model.decoder.forward(&g, &store, &tokens, &cfg).unwrap();
    let l4 = x_t.sub(&recon).unwrap().square().unwrap().sum_all();
    let mut grads = g.backward(&l4).unwrap();
    let by = g.param_grads(&mut grads);
    let grad_u = by.iter().find(|(id, _)| *id == u_param).unwrap().1.clone();

    // route B: the quantized value as an independent leaf.
    // d(l4)/d(u_hat) must equal route A's d(l4)/d(u): the pass-through is
    // the identity.
    let q_values = u_hat.value().to_vec();
    let mut store_b = ParamStore::<f64>::new();
    let q_param = store_b.add("q", &[1, 16, n, d], q_values);
    // decoder params live in `store`; rebuild path reading q from store_b
    let g2 = Graph::new();
    let q_t = g2.param(&store_b, q_param);
    let b2 = g2.constant(b_data.clone(), &[1, 16, n, d]).unwrap();
    let x2 = g2
        .constant(x_data.clone(), &[16, cfg.raster_size * cfg.raster_size])
        .unwrap();
    let tokens2 = q_t.add(&b2).unwrap().reshape(&[16, n, d]).unwrap();
    let recon2 = model.decoder.forward(&g2, &store, &tokens2, &cfg).unwrap();
    let l4b = x2.sub(&recon2).unwrap().square().unwrap().sum_all();
    let grads2 = g2.backward(&l4b).unwrap();
    let grad_q = grads2.wrt(&q_t).unwrap().to_vec();

    assert_eq!(grad_u.len(), grad_q.len());
    for (a, b) in grad_u.iter().zip(&grad_q) {
        assert!((a - b).abs() < 1e-9, "pass-through gradient {a} vs {b}");
    }

    // and the gradient w.r.t. the quantized value is finite-difference real
    let report = check_gradients(&mut store_b, &[q_param], 1e-5, |g, sb| {
        let q = g.param(sb, q_param);
        let b2 = g.constant(b_data.clone(), &[1, 16, n, d])?;
        let x2 = g.constant(x_data.clone(), &[16, cfg.raster_size * cfg.raster_size])?;
        let tokens = q.add(&b2)?.reshape(&[16, n, d])?;
        let recon = model.decoder.forward(g, &store, &tokens, &cfg)?;
        Ok::<_, model::ModelError>(x2.sub(&recon)?.square()?.sum_all())
    })
    .unwrap();
    assert!(report.passes(1e-3), "{report:?}");
}

#[test]
fn world_total_weights_l3_by_lambda() {
    let (store, model) = tiny_world(8, 9);
    let insts = toy_instances(1);
    let images = images_of(&insts);
    let g = Graph::new();
    let mut r = rng(10);
    let l = world_losses(&g, &store, &model, &images, &mut r).unwrap();
    let total = l.l1.item() + l.l2.item() + LAMBDA * l.l3.item() + l.l4.item() + l.l5.item();
    assert!((l.total.item() - total).abs() < 1e-12);
    assert!((LAMBDA - 0.25).abs() < f64::EPSILON);
}

#[test]
fn modified_feedforward_with_noise_off_scores_u_alone() {
    let (mut store, model) = tiny_world(8, 11);
    randomize_head(&mut store, "core.head.1.w");
    let store = store;
    let insts = toy_instances(1);
    let images = images_of(&insts);
    let g = Graph::new();
    let (u, _b) = model.dual_features(&g, &store, &images).unwrap();
    let mut r1 = rng(12);
    let quiet = noisy_option_scores(&g, &store, &model, &u, &mut r1, false).unwrap();
    let ctx = u.slice_axis(1, 0, 8).unwrap();
    let cands = u.slice_axis(1, 8, 16).unwrap();
    let plain = model
        .core
        .score_candidates(&g, &store, &ctx, &cands, &model.cfg)
        .unwrap();
    assert_eq!(quiet.scores.value(), plain.scores.value());

    // stochastic path: two draws differ
    let mut r2 = rng(13);
    let a = noisy_option_scores(&g, &store, &model, &u, &mut r2, true).unwrap();
    let b = noisy_option_scores(&g, &store, &model, &u, &mut r2, true).unwrap();
    assert_ne!(a.scores.value(), b.scores.value());
}

#[test]
fn score_variance_under_noise_is_finite() {
    let (mut store, model) = tiny_world(8, 14);
    randomize_head(&mut store, "core.head.1.w");
    let insts = toy_instances(1);
    let images = images_of(&insts);
    let g = Graph::new();
    let (u, _b) = model.dual_features(&g, &store, &images).unwrap();
    let mut r = rng(15);
    let mut samples = Vec::with_capacity(100);
    for _ in 0..100 {
        let out = noisy_option_scores(&g, &store, &model, &u, &mut r, true).unwrap();
        samples.push(out.scores.value()[0]);
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / samples.len() as f64;
    assert!(var.is_finite() && var > 0.0, "variance {var}");
}

#[test]
fn duplicated_components_receive_equal_weights() {
    let (mut store, model) = tiny_world(4, 16);
    randomize_head(&mut store, "core.head.1.w");
    // duplicate component 2 onto component 0
    let cb = store.data_mut(model.codebook);
    let d = tiny_cfg().dim;
    let row2: Vec<f64> = cb[2 * d..3 * d].to_vec();
    cb[..d].copy_from_slice(&row2);

    let insts = toy_instances(1);
    let images = images_of(&insts);
    let g = Graph::new();
    let (u, bf) = model.dual_features(&g, &store, &images).unwrap();
    let z = u.add(&bf).unwrap();
    let ctx = z.slice_axis(1, 0, 8).unwrap();
    let weights = component_token_scores(&g, &store, &model, &ctx, None, 2).unwrap();
    let n = model.cfg.tokens();
    let w = weights.value();
    for j in 0..n {
        let a = w[j]; // component 0, token j
        let b = w[2 * n + j]; // component 2, token j
        assert!((a - b).abs() < 1e-12, "token {j}: {a} vs {b}");
    }
}

#[test]
fn weighted_loss_closed_forms() {
    // all component scores equal -> per-token term = ln(M - 1)
    let g = Graph::<f64>::new();
    let (b, m, n) = (2usize, 6usize, 3usize);
    let scores = g.constant(vec![0.7; b * m * n], &[b, m, n]).unwrap();
    let tau = g.constant(vec![1.0], &[1]).unwrap();
    let pos = vec![0usize; b * n];
    let l = loss_weighted_from_scores(&scores, &tau, &pos).unwrap();
    let expected = (m as f64 - 1.0).ln() * n as f64; // per instance, summed over tokens
    assert!((l.item() - expected).abs() < 1e-12, "{} vs {expected}", l.item());

    // M = 2 reduces to the score gap scaled by 1/|tau|
    let s_pos = 1.3;
    let s_other = 0.2;
    for tau_v in [1.0, 0.5, 0.25] {
        let scores = g
            .constant(vec![s_pos, s_other], &[1, 2, 1])
            .unwrap();
        let tau = g.constant(vec![tau_v], &[1]).unwrap();
        let l = loss_weighted_from_scores(&scores, &tau, &[0]).unwrap();
        let expected = (s_other - s_pos) / tau_v;
        assert!((l.item() - expected).abs() < 1e-12);
    }
}

#[test]
fn gumbel_max_matches_softmax_within_tv() {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng(17);
    let m = 512;
    let logits: Vec<f64> = (0..m)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut r);
            v * 4.0
        })
        .collect();
    let p = softmax(&logits);
    let draws = 100_000;
    let mut counts = vec![0usize; m];
    for _ in 0..draws {
        counts[model::util::gumbel_max(&logits, &mut r)] += 1;
    }
    let tv: f64 = counts
        .iter()
        .zip(&p)
        .map(|(&c, &q)| (c as f64 / draws as f64 - q).abs())
        .sum::<f64>()
        / 2.0;
    assert!(tv < 0.01, "total variation {tv}");
}

#[test]
fn dominant_weight_column_always_selected() {
    let (store, model) = tiny_world(8, 18);
    let n = model.cfg.tokens();
    let m = model.components;
    let mut weights = vec![0.0; m * n];
    for j in 0..n {
        weights[5 * n + j] = 1e9;
    }
    let g = Graph::new();
    let mut r = rng(19);
    for _ in 0..10 {
        let ans = sample_and_decode(&g, &store, &model, &weights, &mut r).unwrap();
        assert_eq!(ans.component_indices, vec![5; n]);
        assert_eq!(ans.raster.len(), model.cfg.raster_size * model.cfg.raster_size);
    }
}

#[test]
fn decoder_output_shape_and_range() {
    let (store, model) = tiny_world(4, 20);
    let cfg = tiny_cfg();
    let g = Graph::new();
    let mut r = rng(21);
    let tokens = g.randn(&mut r, &[3, cfg.tokens(), cfg.dim]);
    let out = model.decoder.forward(&g, &store, &tokens, &cfg).unwrap();
    assert_eq!(out.shape(), &[3, cfg.raster_size * cfg.raster_size]);
    for &v in out.value() {
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn usage_fraction_counts_distinct_components() {
    assert_eq!(codebook_usage(&[0, 0, 1, 3], 8), 3.0 / 8.0);
    assert_eq!(codebook_usage(&[], 4), 0.0);
}

#[test]
fn too_small_codebook_is_a_config_error() {
    let cfg = tiny_cfg();
    let mut store = ParamStore::<f64>::new();
    let err = match WorldModel::new(&mut store, &mut rng(22), &cfg, 1) {
        Err(e) => e,
        Ok(_) => panic!("single-component codebook must be rejected"),
    };
    assert!(format!("{err}").contains("components"));
}
