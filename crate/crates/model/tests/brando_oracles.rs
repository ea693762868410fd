mod common;

use autodiff::{check_gradients, Graph, ParamStore};
use common::*;
use model::brando::{
    memory_read, memory_update, BrandoModel, LayerOptions, LogicalLayer, MemoryState, SEQ,
};
use model::dio::loss_brando;
use rand::Rng;

fn phi_host(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

/// Independent recomputation of the read/update recurrences with naive loops.
struct NaiveMemory {
    m: Vec<f64>,
    b: Vec<f64>,
    d: usize,
}

impl NaiveMemory {
    fn new(d: usize) -> Self {
        NaiveMemory {
            m: vec![0.0; d * d],
            b: vec![1e-9; d],
            d,
        }
    }

    fn read_row(&self, q: &[f64]) -> Vec<f64> {
        let d = self.d;
        let pq: Vec<f64> = q.iter().map(|&v| phi_host(v)).collect();
        let den: f64 = (0..d).map(|i| pq[i] * self.b[i]).sum::<f64>().max(1e-12);
        (0..d)
            .map(|c| (0..d).map(|i| pq[i] * self.m[i * d + c]).sum::<f64>() / den)
            .collect()
    }

    fn update(&mut self, k: &[f64], v: &[f64]) {
        // The recurrences apply the pre-batch state to every row: the
        // prediction term reads M_{n-1}, B_{n-1} in matrix form.
        let d = self.d;
        let rows = k.len() / d;
        let preds: Vec<Vec<f64>> = (0..rows)
            .map(|r| self.read_row(&k[r * d..(r + 1) * d]))
            .collect();
        for r in 0..rows {
            let krow = &k[r * d..(r + 1) * d];
            let vrow = &v[r * d..(r + 1) * d];
            let pk: Vec<f64> = krow.iter().map(|&x| phi_host(x)).collect();
            for i in 0..d {
                for c in 0..d {
                    self.m[i * d + c] += pk[i] * (vrow[c] - preds[r][c]);
                }
            }
            for i in 0..d {
                self.b[i] += pk[i];
            }
        }
    }
}

#[test]
fn first_update_is_phi_k_transpose_v() {
    let d = 6;
    let rows = 11;
    let mut r = rng(1);
    let k: Vec<f64> = (0..rows * d).map(|_| r.gen_range(-2.0..2.0)).collect();
    let v: Vec<f64> = (0..rows * d).map(|_| r.gen_range(-2.0..2.0)).collect();
    let m0 = vec![0.0; d * d];
    let b0 = vec![1e-9; d];
    let (m1, b1) = memory_update(&k, &v, &m0, &b0, d);

    // expected: M1 = phi(K)^T V, B1 = sum phi(K) + 1e-9
    let mut em = vec![0.0; d * d];
    let mut eb = vec![1e-9; d];
    for row in 0..rows {
        for i in 0..d {
            let pk = phi_host(k[row * d + i]);
            eb[i] += pk;
            for c in 0..d {
                em[i * d + c] += pk * v[row * d + c];
            }
        }
    }
    for (a, b) in m1.iter().zip(&em) {
        assert!((a - b).abs() < 1e-10, "bank entry {a} vs {b}");
    }
    for (a, b) in b1.iter().zip(&eb) {
        assert!((a - b).abs() < 1e-10, "buffer entry {a} vs {b}");
    }
}

#[test]
fn second_read_matches_naive_recurrence_replay() {
    // two consecutive identical batches: the second read must equal the
    // linear-attention prediction from the first batch's K, V
    let d = 5;
    let rows = 7;
    let mut r = rng(2);
    let q: Vec<f64> = (0..rows * d).map(|_| r.gen_range(-1.5..1.5)).collect();
    let k = q.clone();
    let v: Vec<f64> = (0..rows * d).map(|_| r.gen_range(-1.5..1.5)).collect();

    let m0 = vec![0.0; d * d];
    let b0 = vec![1e-9; d];
    let (m1, b1) = memory_update(&k, &v, &m0, &b0, d);

    let mut naive = NaiveMemory::new(d);
    naive.update(&k, &v);

    let g = Graph::<f64>::new();
    let phi_q = {
        let qt = g.constant(q.clone(), &[rows, d]).unwrap();
        qt.elu().add_scalar(1.0)
    };
    let read = memory_read(&g, &phi_q, &m1, &b1, d).unwrap();
    for row in 0..rows {
        let expected = naive.read_row(&q[row * d..(row + 1) * d]);
        for c in 0..d {
            let got = read.value()[row * d + c];
            assert!(
                (got - expected[c]).abs() < 1e-6,
                "row {row} col {c}: {got} vs {}",
                expected[c]
            );
        }
    }
}

#[test]
fn memory_updates_are_deterministic_and_order_dependent() {
    let d = 4;
    let mut r = rng(3);
    let batch1: Vec<f64> = (0..6 * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let batch2: Vec<f64> = (0..6 * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let run = |a: &Vec<f64>, b: &Vec<f64>| {
        let m0 = vec![0.0; d * d];
        let b0 = vec![1e-9; d];
        let (m1, b1) = memory_update(a, a, &m0, &b0, d);
        let (m2, b2) = memory_update(b, b, &m1, &b1, d);
        (
            m2.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b2.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(&batch1, &batch2), run(&batch1, &batch2));
    assert_ne!(run(&batch1, &batch2), run(&batch2, &batch1));
}

#[test]
fn gate_at_negative_infinity_disables_memory_in_the_forward_pass() {
    let cfg = tiny_cfg();
    let mut store = ParamStore::<f64>::new();
    let layer = LogicalLayer::new(&mut store, &mut rng(4), "l", &cfg, -40.0);
    let d = cfg.dim;
    let rows = 3;
    let mut r = rng(5);
    let x: Vec<f64> = (0..rows * SEQ * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    // nonzero memory so a leaky gate would show
    let mem_m: Vec<f64> = (0..d * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let mem_b: Vec<f64> = (0..d).map(|_| r.gen_range(0.5..1.5)).collect();

    let run = |history: bool| {
        let g = Graph::new();
        let xt = g.constant(x.clone(), &[rows, SEQ, d]).unwrap();
        let opts = LayerOptions {
            update_memory: false,
            history,
            noise: false,
        };
        let mut rr = rng(6);
        let (out, _) = layer
            .forward(&g, &store, &xt, &mem_m, &mem_b, &opts, &mut rr)
            .unwrap();
        out.value().to_vec()
    };
    let with_gate = run(true);
    let without = run(false);
    for (a, b) in with_gate.iter().zip(&without) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn beta_of_24_yields_eight_hypotheses_with_noise_controls() {
    let cfg = tiny_cfg();
    let mut store = ParamStore::<f64>::new();
    let model = BrandoModel::new(&mut store, &mut rng(7), &cfg, 24, 2, 0.0).unwrap();
    assert_eq!(model.hypothesis_count(), 8);
    let (b, n, d) = (2usize, cfg.tokens(), cfg.dim);
    let mut r = rng(8);
    let ctx: Vec<f64> = (0..b * 8 * n * d).map(|_| r.gen_range(-1.0..1.0)).collect();

    let run = |noise: bool, seed: u64| {
        let g = Graph::new();
        let ctx_t = g.constant(ctx.clone(), &[b, 8, n, d]).unwrap();
        let mut mem = MemoryState::new(2, d);
        let opts = LayerOptions {
            update_memory: false,
            history: true,
            noise,
        };
        let mut rr = rng(seed);
        model
            .map_hypotheses(&g, &store, &ctx_t, &mut mem, &opts, &mut rr)
            .unwrap()
            .value()
            .to_vec()
    };

    // reparameterization noise fixed off + identical promoters -> identical
    let quiet = run(false, 100);
    let per_h = n * d;
    for h in 1..8 {
        for i in 0..per_h {
            let a = quiet[i];
            let bq = quiet[h * per_h + i];
            assert!((a - bq).abs() < 1e-12, "hypotheses must coincide");
        }
    }

    // noise on: pairwise distances strictly positive
    let noisy = run(true, 101);
    for h1 in 0..8 {
        for h2 in (h1 + 1)..8 {
            let dist: f64 = (0..per_h)
                .map(|i| (noisy[h1 * per_h + i] - noisy[h2 * per_h + i]).powi(2))
                .sum();
            assert!(dist > 0.0, "hypotheses {h1} and {h2} collided");
        }
    }
    assert_eq!(run(true, 101), run(true, 101), "same seed, same hypotheses");
}

#[test]
fn brando_loss_closed_forms_at_equal_scores() {
    // beta = 24: up has 15 denominator terms, down has 7; the hypothesis
    // sum carries the written 1/(beta-17) normalizer over beta-16 terms
    let g = Graph::<f64>::new();
    let scores = g.constant(vec![0.0; 16], &[1, 16]).unwrap();
    let l = loss_brando(&scores, &[2], 24).unwrap();
    assert!((l.up.item() - 15.0f64.ln()).abs() < 1e-12);
    let expected_down = (8.0 / 7.0) * 7.0f64.ln();
    assert!(
        (l.down.item() - expected_down).abs() < 1e-12,
        "down {} vs {}",
        l.down.item(),
        expected_down
    );
    assert!((l.total.item() - (l.up.item() + l.down.item())).abs() < 1e-15);
}

#[test]
fn silent_hypotheses_degenerate_to_the_seven_option_objective() {
    let mut r = rng(9);
    let base: Vec<f64> = (0..8).map(|_| r.gen_range(-2.0..2.0)).collect();
    let mut scores = base.clone();
    scores.extend(std::iter::repeat(-60.0).take(8));
    let g = Graph::<f64>::new();
    let t = g.constant(scores, &[1, 16]).unwrap();
    let l = loss_brando(&t, &[4], 24).unwrap();
    let plain = model::dio::dio_loss_from_scores(&base, 4);
    assert!(
        (l.up.item() - plain).abs() < 1e-9,
        "up {} vs baseline {plain}",
        l.up.item()
    );
}

#[test]
fn hypothesis_score_raises_up_and_lowers_down() {
    let mut r = rng(10);
    let mut scores: Vec<f64> = (0..16).map(|_| r.gen_range(-1.0..1.0)).collect();
    let eval = |s: &[f64]| {
        let g = Graph::<f64>::new();
        let t = g.constant(s.to_vec(), &[1, 16]).unwrap();
        let l = loss_brando(&t, &[0], 24).unwrap();
        (l.up.item(), l.down.item())
    };
    let (up0, down0) = eval(&scores);
    scores[12] += 0.5; // a hypothesis slot
    let (up1, down1) = eval(&scores);
    assert!(up1 > up0, "up must increase when a hypothesis scores higher");
    assert!(down1 < down0, "down must decrease when a hypothesis scores higher");
}

#[test]
fn extra_hypothesis_term_strictly_increases_up() {
    let mut r = rng(11);
    let scores: Vec<f64> = (0..16).map(|_| r.gen_range(-1.0..1.0)).collect();
    let up_of = |s: &[f64], beta: usize| {
        let g = Graph::<f64>::new();
        let t = g.constant(s.to_vec(), &[1, s.len()]).unwrap();
        loss_brando(&t, &[3], beta).unwrap().up.item()
    };
    let base = up_of(&scores[..10], 18); // two hypotheses
    let mut more = scores[..10].to_vec();
    more.push(0.3);
    assert!(up_of(&more, 19) > base);
}

#[test]
fn beta_without_hypotheses_is_a_config_error() {
    let g = Graph::<f64>::new();
    let t = g.constant(vec![0.0; 9], &[1, 9]).unwrap();
    let err = loss_brando(&t, &[0], 17).unwrap_err();
    assert!(format!("{err}").contains("beta"));
}

#[test]
fn phi_is_positive_for_all_finite_inputs() {
    let g = Graph::<f64>::new();
    let xs: Vec<f64> = vec![-700.0, -30.0, -1.0, -1e-9, 0.0, 1e-9, 1.0, 30.0, 700.0];
    let t = g.constant(xs.clone(), &[xs.len()]).unwrap();
    let p = model::brando::phi(&t);
    for (&x, &v) in xs.iter().zip(p.value()) {
        assert!(v > 0.0, "phi({x}) = {v} not positive");
    }
}

#[test]
fn logical_layer_gradients_with_constant_memory() {
    let cfg = tiny_cfg();
    let mut store = ParamStore::<f64>::new();
    let layer = LogicalLayer::new(&mut store, &mut rng(12), "l", &cfg, 0.3);
    let d = cfg.dim;
    let mut r = rng(13);
    let x: Vec<f64> = (0..2 * SEQ * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let mem_m: Vec<f64> = (0..d * d).map(|_| r.gen_range(-0.5..0.5)).collect();
    let mem_b: Vec<f64> = (0..d).map(|_| r.gen_range(0.5..1.5)).collect();
    let w: Vec<f64> = (0..2 * SEQ * d).map(|_| r.gen_range(-1.0..1.0)).collect();

    let params: Vec<_> = ["l.wq.w", "l.tau", "l.ff.0.w", "l.rep.1.w", "l.lnq.g", "l.pos"]
        .iter()
        .map(|n| store.find(n).unwrap())
        .collect();
    let report = check_gradients(&mut store, &params, 1e-5, |g, store| {
        let xt = g.constant(x.clone(), &[2, SEQ, d])?;
        let opts = LayerOptions {
            update_memory: false,
            history: true,
            noise: false,
        };
        let mut rr = rng(14);
        let (out, _) = layer.forward(g, store, &xt, &mem_m, &mem_b, &opts, &mut rr)?;
        let wt = g.constant(w.clone(), &[2, SEQ, d])?;
        Ok::<_, model::ModelError>(out.mul(&wt)?.sum_all())
    })
    .unwrap();
    assert!(
        report.passes(1e-3),
        "max rel err {} at {:?}",
        report.max_rel_err,
        report.worst
    );
}
