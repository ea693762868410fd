mod common;

use autodiff::{check_gradients, Graph, ParamStore};
use common::*;
use forge::META_VOCAB_SIZE;
use model::diego::{
    concat_pooled, intra_group_mean, loss_diego, meta_mask, pooled_patterns, predict_slots,
    similarity_matrix, slot_accuracy, slots_match, DiegoHead, DiegoModel, DEFAULT_L_META,
};
use model::dio::DioModel;
use rand::Rng;

fn head(store: &mut ParamStore<f64>, seed: u64) -> DiegoHead {
    DiegoHead::new(store, &mut rng(seed), tiny_cfg().dim, DEFAULT_L_META)
}

#[test]
fn zero_patterns_give_uniform_alignment_loss() {
    let mut store = ParamStore::<f64>::new();
    let h = head(&mut store, 1);
    let insts = toy_instances(3);
    let refs: Vec<&forge::PuzzleInstance> = insts.iter().collect();
    let (mask, mshape) = meta_mask::<f64>(&refs, h.l_meta);
    let g = Graph::new();
    let (n, k, d) = (4usize, 9usize, tiny_cfg().dim);
    let patterns = g.zeros(&[3, n, k, 4, d]);
    let mask_t = g.constant(mask, &mshape).unwrap();
    let loss = loss_diego(&g, &store, &h, &patterns, &mask_t).unwrap();
    // each flagged slot contributes N*K uniform-softmax terms of ln F
    let expected = 2.0 * (n * k) as f64 * (META_VOCAB_SIZE as f64).ln();
    assert!(
        (loss.item() - expected).abs() < 1e-9,
        "{} vs {expected}",
        loss.item()
    );
}

#[test]
fn empty_metadata_mask_zeroes_the_loss() {
    let mut store = ParamStore::<f64>::new();
    let h = head(&mut store, 2);
    let g = Graph::new();
    let (n, k, d) = (2usize, 9usize, tiny_cfg().dim);
    let mut r = rng(3);
    let pat: Vec<f64> = (0..n * k * 4 * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let patterns = g.constant(pat, &[1, n, k, 4, d]).unwrap();
    let mask_t = g.zeros(&[1, 4, META_VOCAB_SIZE]);
    let loss = loss_diego(&g, &store, &h, &patterns, &mask_t).unwrap();
    assert_eq!(loss.item(), 0.0);
}

#[test]
fn sharper_temperature_reduces_loss_when_flagged_dot_is_maximal() {
    // patterns aligned with the flagged dictionary entry: shrinking |tau|
    // concentrates the softmax on the winner and lowers the loss
    let mut store = ParamStore::<f64>::new();
    let h = head(&mut store, 4);
    let d = tiny_cfg().dim;
    let dict = store.get(h.dict).data.clone();
    let flagged = 4usize; // count:ap in vocabulary order
    let pattern_vec: Vec<f64> = dict[flagged * d..(flagged + 1) * d].to_vec();

    let mut losses = Vec::new();
    for tau in [1.0, 0.5, 0.1] {
        store.set_data(h.tau, vec![tau]).unwrap();
        let g = Graph::new();
        let mut pat = Vec::new();
        for _ in 0..9 {
            pat.extend_from_slice(&pattern_vec);
        }
        // N=1, K=9, probes broadcast along l: use slot 0 flagged only
        let mut full = Vec::new();
        for _ in 0..4 {
            full.extend_from_slice(&pat);
        }
        // reorder to [1, 1, 9, 4, D]
        let patterns = g
            .constant(full, &[1, 4, 9, d])
            .unwrap()
            .permute(&[0, 2, 1, 3])
            .unwrap()
            .reshape(&[1, 1, 9, 4, d])
            .unwrap();
        let mut mask = vec![0.0; 4 * META_VOCAB_SIZE];
        mask[flagged] = 1.0; // slot 0 flags `flagged`
        let mask_t = g.constant(mask, &[1, 4, META_VOCAB_SIZE]).unwrap();
        let loss = loss_diego(&g, &store, &h, &patterns, &mask_t).unwrap();
        losses.push(loss.item());
    }
    assert!(
        losses[0] > losses[1] && losses[1] > losses[2],
        "losses must fall as |tau| shrinks: {losses:?}"
    );
}

#[test]
fn logits_are_invariant_to_compatible_rescaling() {
    // (cP)·(cV) / (c^2 |tau|) == P·V / |tau|
    let d = 6;
    let mut r = rng(5);
    let p: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let tau = 0.7;
    let c = 3.2;
    let logit = |p: &[f64], v: &[f64], tau: f64| -> f64 {
        p.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / tau
    };
    let base = logit(&p, &v, tau);
    let scaled_p: Vec<f64> = p.iter().map(|x| x * c).collect();
    let scaled_v: Vec<f64> = v.iter().map(|x| x * c).collect();
    let scaled = logit(&scaled_p, &scaled_v, tau * c * c);
    assert!((base - scaled).abs() < 1e-12);
}

#[test]
fn similarity_matrix_is_symmetric_with_unit_diagonal() {
    let mut r = rng(6);
    let reps: Vec<Vec<f64>> = (0..5)
        .map(|_| (0..12).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect();
    let m = similarity_matrix(&reps);
    for i in 0..5 {
        assert!((m[i][i] - 1.0).abs() < 1e-6, "diagonal {}", m[i][i]);
        for j in 0..5 {
            assert!((m[i][j] - m[j][i]).abs() < 1e-12);
        }
    }

    // duplicated instance set: constant matrix of ones
    let dup = vec![reps[0].clone(); 4];
    let md = similarity_matrix(&dup);
    for row in &md {
        for &v in row {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn intra_group_mean_splits_by_label() {
    let reps = vec![
        vec![1.0, 0.0],
        vec![1.0, 0.0],
        vec![0.0, 1.0],
        vec![0.0, 1.0],
    ];
    let m = similarity_matrix(&reps);
    let labels = vec!["a".into(), "a".into(), "b".into(), "b".into()];
    assert!((intra_group_mean(&m, &labels) - 1.0).abs() < 1e-12);
    let mixed = vec!["a".into(), "b".into(), "a".into(), "b".into()];
    assert!(intra_group_mean(&m, &mixed) < 1e-12);
}

#[test]
fn pooled_prediction_and_slot_accuracy() {
    let d = tiny_cfg().dim;
    let mut store = ParamStore::<f64>::new();
    let h = head(&mut store, 7);
    let insts = toy_instances(2);
    let refs: Vec<&forge::PuzzleInstance> = insts.iter().collect();

    // patterns equal to the flagged dictionary vectors -> perfect slots
    let dict = store.get(h.dict).data.clone();
    let (n, k) = (2usize, 9usize);
    let mut values = Vec::new();
    for inst in &insts {
        for _ in 0..n * k {
            for l in 0..4 {
                let f = inst
                    .metadata
                    .get(l)
                    .map(forge::vocab_index)
                    .unwrap_or(0);
                values.extend_from_slice(&dict[f * d..(f + 1) * d]);
            }
        }
    }
    let pooled = pooled_patterns(&values, 2, n, k, d);
    let preds = predict_slots(&pooled, &dict, META_VOCAB_SIZE, d);
    assert!((slot_accuracy(&preds, &refs, 2) - 1.0).abs() < 1e-12);
    for (pred, inst) in preds.iter().zip(&refs) {
        assert!(slots_match(pred, inst, 2));
    }

    // chance-level sanity: random patterns land near 1/F per slot
    let mut r = rng(8);
    let mut hits = 0;
    let trials = 4000;
    for _ in 0..trials {
        let rep: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let logits: Vec<f64> = (0..META_VOCAB_SIZE)
            .map(|f| (0..d).map(|i| rep[i] * dict[f * d + i]).sum())
            .collect();
        if model::util::argmax(&logits) == 4 {
            hits += 1;
        }
    }
    let rate = hits as f64 / trials as f64;
    assert!(
        rate > 0.01 && rate < 0.25,
        "chance-level prediction should be near 1/{META_VOCAB_SIZE}, got {rate}"
    );
}

#[test]
fn prediction_invariant_to_option_pool_permutation() {
    let cfg = tiny_cfg();
    let mut store = ParamStore::<f64>::new();
    let dio = DioModel::new(&mut store, &mut rng(9), &cfg);
    randomize_head(&mut store, "core.head.1.w");
    let h = DiegoHead::new(&mut store, &mut rng(10), cfg.dim, DEFAULT_L_META);
    let model = DiegoModel { dio, head: h };

    let insts = toy_instances(1);
    let inst = &insts[0];
    let mut permuted = inst.clone();
    let rot = |i: usize| (i + 5) % 8;
    for i in 0..8 {
        permuted.panels[8 + rot(i)] = inst.panels[8 + i];
        permuted.images[8 + rot(i)] = inst.images[8 + i].clone();
    }
    permuted.answer = 9 + rot(inst.answer as usize - 9) as u8;

    let patterns_of = |inst: &forge::PuzzleInstance| {
        let g = Graph::new();
        let t = model.answer_patterns(&g, &store, &[inst]).unwrap();
        t.value().to_vec()
    };
    let a = patterns_of(inst);
    let b = patterns_of(&permuted);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn alignment_gradients_match_finite_differences() {
    let cfg = tiny_cfg();
    let mut store = ParamStore::<f64>::new();
    let dio = DioModel::new(&mut store, &mut rng(11), &cfg);
    randomize_head(&mut store, "core.head.1.w");
    let h = DiegoHead::new(&mut store, &mut rng(12), cfg.dim, DEFAULT_L_META);
    let model = DiegoModel { dio, head: h };
    let insts = toy_instances(1);
    let refs: Vec<&forge::PuzzleInstance> = insts.iter().collect();
    let (mask, mshape) = meta_mask::<f64>(&refs, 2);

    let params: Vec<_> = ["diego.dict", "diego.tau", "core.probes"]
        .iter()
        .map(|n| store.find(n).unwrap())
        .collect();
    let report = check_gradients(&mut store, &params, 1e-5, |g, store| {
        let patterns = model.answer_patterns(g, store, &refs)?;
        let mask_t = g.constant(mask.clone(), &mshape)?;
        loss_diego(g, store, &model.head, &patterns, &mask_t)
    })
    .unwrap();
    assert!(
        report.passes(1e-3),
        "max rel err {} at {:?}",
        report.max_rel_err,
        report.worst
    );
}
