mod common;

use autodiff::{check_gradients, Graph, ParamStore};
use common::*;
use model::config::ModelConfig;
use model::dio::{
    bound_value, check_bound_ordering, dio_loss_from_distribution, dio_loss_from_scores, loss_dio,
    DioModel,
};
use model::util::{argmax, softmax};
use rand::Rng;

#[test]
fn patch_grid_gives_sixteen_tokens_at_full_size() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.raster_size, 32);
    assert_eq!(cfg.patch, 8);
    assert_eq!(cfg.tokens(), 16);
    let tiny = tiny_cfg();
    assert_eq!(tiny.tokens(), 4);
}

#[test]
fn identical_images_get_identical_features_and_permutation_tracks() {
    let cfg = tiny_cfg();
    let mut store = ParamStore::<f64>::new();
    let model = DioModel::new(&mut store, &mut rng(1), &cfg);
    let insts = toy_instances(1);
    let mut images = images_of(&insts);
    // make two identical images
    images[9] = images[10];

    let g = Graph::new();
    let z = model.features(&g, &store, &images).unwrap();
    let (n, d) = (cfg.tokens(), cfg.dim);
    let per = n * d;
    let zv = z.value();
    assert_eq!(zv[9 * per..10 * per], zv[10 * per..11 * per]);

    // permuting option images permutes their features correspondingly
    let mut permuted = images.clone();
    permuted.swap(8, 15);
    let g2 = Graph::new();
    let z2 = model.features(&g2, &store, &permuted).unwrap();
    let z2v = z2.value();
    assert_eq!(zv[8 * per..9 * per], z2v[15 * per..16 * per]);
    assert_eq!(zv[15 * per..16 * per], z2v[8 * per..9 * per]);
    assert_eq!(zv[..8 * per], z2v[..8 * per]);
}

#[test]
fn pattern_tensor_shape_and_score_shapes() {
    let cfg = tiny_cfg();
    let mut store = ParamStore::<f64>::new();
    let model = DioModel::new(&mut store, &mut rng(2), &cfg);
    let insts = toy_instances(2);
    let images = images_of(&insts);
    let g = Graph::new();
    let z = model.features(&g, &store, &images).unwrap();
    let out = model.score_options(&g, &store, &z).unwrap();
    assert_eq!(out.patterns.shape(), &[2, 8, cfg.tokens(), 9, 4, cfg.dim]);
    assert_eq!(out.token_scores.shape(), &[2, 8, cfg.tokens()]);
    assert_eq!(out.scores.shape(), &[2, 8]);
}

#[test]
fn masked_variant_collapses_selections() {
    let mut cfg = tiny_cfg();
    cfg.masked_ppim = true;
    let mut store = ParamStore::<f64>::new();
    let model = DioModel::new(&mut store, &mut rng(3), &cfg);
    let insts = toy_instances(1);
    let images = images_of(&insts);
    let g = Graph::new();
    let z = model.features(&g, &store, &images).unwrap();
    let out = model.score_options(&g, &store, &z).unwrap();
    assert_eq!(out.patterns.shape(), &[1, 8, cfg.tokens(), 1, 4, cfg.dim]);
}

#[test]
fn probe_outputs_invariant_to_input_swap_without_pos_enc() {
    // swapping the two selected row features permutes a set-encoder's
    // inputs; probe outputs must not move when positions carry no encoding
    let cfg = tiny_cfg();
    let mut store = ParamStore::<f64>::new();
    let model = DioModel::new(&mut store, &mut rng(4), &cfg);
    let d = cfg.dim;
    let mut r = rng(5);
    let seq: Vec<f64> = (0..8 * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let g = Graph::new();
    let x = g.constant(seq.clone(), &[1, 8, d]).unwrap();
    let enc = model.core.ppim.forward(&g, &store, &x).unwrap();

    let mut swapped = seq;
    for i in 0..d {
        swapped.swap(i, d + i); // swap the two "row" slots
    }
    let x2 = g.constant(swapped, &[1, 8, d]).unwrap();
    let enc2 = model.core.ppim.forward(&g, &store, &x2).unwrap();

    let probes_a = &enc.value()[4 * d..8 * d];
    let probes_b = &enc2.value()[4 * d..8 * d];
    for (a, b) in probes_a.iter().zip(probes_b) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn option_pixel_change_touches_only_that_candidate() {
    let cfg = tiny_cfg();
    let mut store = ParamStore::<f64>::new();
    let model = DioModel::new(&mut store, &mut rng(6), &cfg);
    let insts = toy_instances(1);
    let images = images_of(&insts);

    let mut altered_img = images[9].to_vec();
    altered_img[40] = altered_img[40].wrapping_add(120);
    let mut altered = images.clone();
    altered[9] = &altered_img;

    let run = |imgs: &[&[u8]]| {
        let g = Graph::new();
        let z = model.features(&g, &store, imgs).unwrap();
        let out = model.score_options(&g, &store, &z).unwrap();
        out.patterns.value().to_vec()
    };
    let p0 = run(&images);
    let p1 = run(&altered);

    // patterns: [1, 8, N, 9, 4, D]; candidate index 1 (image 10) changed
    let (n, d) = (cfg.tokens(), cfg.dim);
    let per_cand = n * 9 * 4 * d;
    for c in 0..8 {
        let a = &p0[c * per_cand..(c + 1) * per_cand];
        let b = &p1[c * per_cand..(c + 1) * per_cand];
        if c != 1 {
            assert_eq!(a, b, "candidate {c} must be untouched");
            continue;
        }
        // within the changed candidate: selections touching the third row
        // or column (every k except rows{1,2} x cols{1,2}) move
        for j in 0..n {
            for k in 0..9 {
                let base = j * 9 * 4 * d + k * 4 * d;
                let same = a[base..base + 4 * d] == b[base..base + 4 * d];
                if k == 0 {
                    assert!(same, "selection without the candidate row/col moved");
                } else {
                    assert!(!same, "selection {k} should see the candidate");
                }
            }
        }
    }
}

#[test]
fn consistency_encoder_treats_selections_as_a_set() {
    let cfg = tiny_cfg();
    let mut store = ParamStore::<f64>::new();
    let model = DioModel::new(&mut store, &mut rng(7), &cfg);
    let d = cfg.dim;
    let mut r = rng(8);
    let row: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let mut nine = Vec::new();
    for _ in 0..9 {
        nine.extend_from_slice(&row);
    }
    let g = Graph::new();
    let x = g.constant(nine, &[1, 9, d]).unwrap();
    let enc = model.core.pcem.forward(&g, &store, &x).unwrap();
    let s = model.core.head.forward(&g, &store, &enc).unwrap();
    let vals = s.value();
    for &v in vals.iter() {
        assert!((v - vals[0]).abs() < 1e-12, "equal inputs must score equally");
    }
}

#[test]
fn zero_initialized_head_scores_its_bias_at_step_zero() {
    let cfg = tiny_cfg();
    let mut store = ParamStore::<f64>::new();
    let model = DioModel::new(&mut store, &mut rng(9), &cfg);
    let insts = toy_instances(1);
    let images = images_of(&insts);
    let g = Graph::new();
    let z = model.features(&g, &store, &images).unwrap();
    let out = model.score_options(&g, &store, &z).unwrap();
    for &s in out.scores.value() {
        assert_eq!(s, 0.0, "zero final layer and zero bias give zero scores");
    }
    let probs = out.scores.softmax_last().unwrap();
    for &p in probs.value() {
        assert!((p - 0.125).abs() < 1e-15);
    }
}

#[test]
fn option_score_is_mean_of_token_scores() {
    let cfg = tiny_cfg();
    let mut store = ParamStore::<f64>::new();
    randomize_head(&mut store, "nothing-yet");
    let model = DioModel::new(&mut store, &mut rng(10), &cfg);
    randomize_head(&mut store, "core.head.1.w");
    let insts = toy_instances(2);
    let images = images_of(&insts);
    let g = Graph::new();
    let z = model.features(&g, &store, &images).unwrap();
    let out = model.score_options(&g, &store, &z).unwrap();
    let n = cfg.tokens();
    for (c, &s) in out.scores.value().iter().enumerate() {
        let toks = &out.token_scores.value()[c * n..(c + 1) * n];
        let mean: f64 = toks.iter().sum::<f64>() / n as f64;
        assert!((s - mean).abs() < 1e-12, "score {s} vs token mean {mean}");
    }
}

#[test]
fn option_distribution_examples() {
    // equal scores -> uniform 1/8
    let p = softmax(&[0.0; 8]);
    for &v in &p {
        assert!((v - 0.125).abs() < 1e-15);
    }
    // shift invariance
    let mut r = rng(11);
    let scores: Vec<f64> = (0..8).map(|_| r.gen_range(-2.0..2.0)).collect();
    let shifted: Vec<f64> = scores.iter().map(|s| s + 3.7).collect();
    for (a, b) in softmax(&scores).iter().zip(softmax(&shifted)) {
        assert!((a - b).abs() < 1e-12);
    }
    // one-hot logits
    let p = softmax(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    let e = std::f64::consts::E;
    assert!((p[0] - e / (e + 7.0)).abs() < 1e-12);
    assert!((p[0] - 0.2797).abs() < 1e-4);
}

#[test]
fn uniform_distribution_loss_is_log_seven() {
    let probs = [0.125; 8];
    let loss = dio_loss_from_distribution(&probs, 3);
    assert!((loss - 7.0f64.ln()).abs() < 1e-12);
    assert!((loss - 1.9459).abs() < 1e-4);

    // tensor route agrees
    let g = Graph::<f64>::new();
    let scores = g.constant(vec![0.0; 8], &[1, 8]).unwrap();
    let l = loss_dio(&scores, &[3]).unwrap();
    assert!((l.item() - 7.0f64.ln()).abs() < 1e-12);
}

#[test]
fn loss_is_monotone_decreasing_in_answer_probability() {
    let mut last = f64::INFINITY;
    for i in 1..99 {
        let p = i as f64 / 100.0;
        let rest = (1.0 - p) / 7.0;
        let probs = [p, rest, rest, rest, rest, rest, rest, rest];
        let loss = dio_loss_from_distribution(&probs, 0);
        assert!(loss < last, "loss must fall as answer mass grows");
        last = loss;
    }
    // clamp keeps the loss finite as the answer mass reaches 1
    let probs = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    assert!(dio_loss_from_distribution(&probs, 0).is_finite());
}

#[test]
fn bound_identity_holds_for_arbitrary_scores() {
    let mut r = rng(12);
    for _ in 0..1000 {
        let scores: Vec<f64> = (0..8).map(|_| r.gen_range(-5.0..5.0)).collect();
        let alpha = r.gen_range(0..8);
        let bound = bound_value(&scores, alpha, 7);
        let loss = dio_loss_from_scores(&scores, alpha);
        assert!(
            (bound - (-loss + 7.0f64.ln())).abs() < 1e-9,
            "identity violated: bound {bound}, loss {loss}"
        );
    }
}

#[test]
fn objective_ordering_against_cross_entropy() {
    // uniform case: -log 7 > -log 8
    let (neg_loss, ce, ok) = check_bound_ordering(&[0.125; 8], 2);
    assert!(ok);
    assert!((neg_loss - (-(7.0f64.ln()))).abs() < 1e-12);
    assert!((ce - (-(8.0f64.ln()))).abs() < 1e-12);

    // high-confidence case
    let mut probs = [0.001 / 7.0; 8];
    probs[5] = 0.999;
    assert!(check_bound_ordering(&probs, 5).2);

    // random sweep
    let mut r = rng(13);
    for _ in 0..1000 {
        let raw: Vec<f64> = (0..8).map(|_| r.gen_range(-4.0..4.0)).collect();
        let probs = softmax(&raw);
        let alpha = r.gen_range(0..8);
        let (nl, ce, ok) = check_bound_ordering(&probs, alpha);
        assert!(ok, "ordering failed: -loss {nl} vs ce {ce}");
    }
}

#[test]
fn argmax_over_scores_equals_argmax_over_distribution() {
    let mut r = rng(14);
    for _ in 0..500 {
        let scores: Vec<f64> = (0..8).map(|_| r.gen_range(-3.0..3.0)).collect();
        assert_eq!(argmax(&scores), argmax(&softmax(&scores)));
    }
}

#[test]
fn option_permutation_leaves_loss_unchanged() {
    let cfg = tiny_cfg();
    let mut store = ParamStore::<f64>::new();
    let model = DioModel::new(&mut store, &mut rng(15), &cfg);
    randomize_head(&mut store, "core.head.1.w");
    let insts = toy_instances(1);
    let images = images_of(&insts);
    let alpha = insts[0].answer as usize - 9;

    let loss_of = |imgs: &[&[u8]], a: usize| {
        let g = Graph::new();
        let z = model.features(&g, &store, imgs).unwrap();
        let out = model.score_options(&g, &store, &z).unwrap();
        loss_dio(&out.scores, &[a]).unwrap().item()
    };
    let base = loss_of(&images, alpha);

    let mut permuted = images.clone();
    let perm = [3usize, 0, 6, 1, 7, 2, 5, 4];
    for (dst, &src) in perm.iter().enumerate() {
        permuted[8 + dst] = images[8 + src];
    }
    let new_alpha = perm.iter().position(|&s| s == alpha).unwrap();
    let shuffled = loss_of(&permuted, new_alpha);
    assert!(
        (base - shuffled).abs() < 1e-12,
        "{base} vs {shuffled} after permutation"
    );
}

#[test]
fn dio_loss_gradients_match_finite_differences_on_key_params() {
    let cfg = tiny_cfg();
    let mut store = ParamStore::<f64>::new();
    let model = DioModel::new(&mut store, &mut rng(16), &cfg);
    randomize_head(&mut store, "core.head.1.w");
    let insts = toy_instances(1);
    let images = images_of(&insts);
    let answers = answers_of(&insts);

    let params: Vec<_> = ["core.probes", "core.rowcol.0.w", "core.head.1.w", "fem.embed.b"]
        .iter()
        .map(|n| store.find(n).unwrap())
        .collect();
    let report = check_gradients(&mut store, &params, 1e-5, |g, store| {
        let z = model.features(g, store, &images)?;
        let out = model.score_options(g, store, &z)?;
        loss_dio(&out.scores, &answers)
    })
    .unwrap();
    assert!(
        report.passes(1e-3),
        "max rel err {} at {:?}",
        report.max_rel_err,
        report.worst
    );
}
