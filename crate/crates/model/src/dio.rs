//! The four-stage solver core: row/column feature induction over every
//! two-row/two-column selection, probe-vector pattern readout, set-encoded
//! consistency scoring, and option evaluation by averaging.

use autodiff::{Graph, ParamId, ParamStore, Scalar, Tensor};
use rand::Rng;

use crate::config::ModelConfig;
use crate::extractor::{patchify, FeatureExtractor};
use crate::nn::{normal_init, FinalInit, Mlp, TransformerEncoder};
use crate::util::logsumexp;
use crate::{ModelError, Result};

/// Row pairs and column pairs for the 9 = C(3,2)*C(3,2) selections.
/// Indices address the six induced features: rows 0..3, columns 3..6.
const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

fn selection_indices() -> Vec<usize> {
    let mut idx = Vec::with_capacity(36);
    for &(ra, rb) in &PAIRS {
        for &(ca, cb) in &PAIRS {
            idx.extend_from_slice(&[ra, rb, 3 + ca, 3 + cb]);
        }
    }
    idx
}

/// Column-major cell order, for reading the 3x3 matrix by columns.
const COL_ORDER: [usize; 9] = [0, 3, 6, 1, 4, 7, 2, 5, 8];

/// Scores plus the pattern tensor needed by metadata alignment.
pub struct CoreOutput<T: Scalar> {
    /// [B, C] option scores.
    pub scores: Tensor<T>,
    /// [B, C, N] per-token scores (mean over selections and probes).
    pub token_scores: Tensor<T>,
    /// [B, C, N, K, 4, D] progressive-pattern representations.
    pub patterns: Tensor<T>,
}

/// Everything downstream of feature extraction; scores image features
/// directly, which is also what the codebook-weighting path needs.
pub struct DioCore {
    pub rowcol: Mlp,
    pub probes: ParamId,
    pub ppim_pos: ParamId,
    pub ppim: TransformerEncoder,
    pub pcem: TransformerEncoder,
    pub head: Mlp,
    sel_idx: Vec<usize>,
}

impl DioCore {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cfg: &ModelConfig,
    ) -> Self {
        let d = cfg.dim;
        let rowcol = Mlp::new(
            store,
            rng,
            &format!("{name}.rowcol"),
            &[3 * d, d, d],
            FinalInit::Kaiming,
        );
        let probes = store.add(
            format!("{name}.probes"),
            &[4, d],
            normal_init(rng, 4 * d, 1.0 / (d as f64).sqrt()),
        );
        let seq_len = if cfg.masked_ppim { 10 } else { 8 };
        let ppim_pos = store.add(
            format!("{name}.ppim_pos"),
            &[seq_len, d],
            normal_init(rng, seq_len * d, 0.02),
        );
        let ppim = TransformerEncoder::new(
            store,
            rng,
            &format!("{name}.ppim"),
            d,
            cfg.heads,
            cfg.ppim_depth,
            cfg.ff_hidden(),
        );
        // The consistency encoder treats the selections as a set: no
        // positional encoding.
        let pcem = TransformerEncoder::new(
            store,
            rng,
            &format!("{name}.pcem"),
            d,
            cfg.heads,
            cfg.pcem_depth,
            cfg.ff_hidden(),
        );
        let head = Mlp::new(
            store,
            rng,
            &format!("{name}.head"),
            &[d, d, 1],
            FinalInit::Zero,
        );
        DioCore {
            rowcol,
            probes,
            ppim_pos,
            ppim,
            pcem,
            head,
            sel_idx: selection_indices(),
        }
    }

    /// Score candidates against a context.
    /// ctx: [B, 8, N, D]; cands: [B, C, N, D].
    pub fn score_candidates<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        ctx: &Tensor<T>,
        cands: &Tensor<T>,
        cfg: &ModelConfig,
    ) -> Result<CoreOutput<T>> {
        let (b, n, d) = (ctx.shape()[0], ctx.shape()[2], ctx.shape()[3]);
        let c = cands.shape()[1];
        let k = cfg.k_selections();

        // Assemble the 3x3 cell grid per (batch, candidate, token).
        let ctx_e = ctx
            .reshape(&[b, 1, 8, n, d])?
            .broadcast_to(&[b, c, 8, n, d])?;
        let cand_e = cands.reshape(&[b, c, 1, n, d])?;
        let cells = g.concat(&[&ctx_e, &cand_e], 2)?; // [B, C, 9, N, D]
        let cells = cells
            .permute(&[0, 1, 3, 2, 4])? // [B, C, N, 9, D]
            .reshape(&[b * c * n, 9, d])?;

        // Row features from row-major cells, column features from the
        // column-major rearrangement; one shared MLP over each triple.
        let rows_in = cells.reshape(&[b * c * n, 3, 3 * d])?;
        let cols_in = cells
            .index_select(1, &COL_ORDER)?
            .reshape(&[b * c * n, 3, 3 * d])?;
        let rows = self.rowcol.forward(g, store, &rows_in)?;
        let cols = self.rowcol.forward(g, store, &cols_in)?;
        let six = g.concat(&[&rows, &cols], 1)?; // [G, 6, D]

        let (selected, sel_len) = if cfg.masked_ppim {
            (six, 6)
        } else {
            let sel = six
                .index_select(1, &self.sel_idx)? // [G, 36, D]
                .reshape(&[b * c * n * k, 4, d])?;
            (sel, 4)
        };

        let rows_total = b * c * n * k;
        let probes = g
            .param(store, self.probes)
            .reshape(&[1, 4, d])?
            .broadcast_to(&[rows_total, 4, d])?;
        let mut seq = g.concat(&[&selected, &probes], 1)?; // [G*K, sel_len+4, D]
        if cfg.ppim_pos_enc {
            seq = seq.add(&g.param(store, self.ppim_pos))?;
        }
        let enc = self.ppim.forward(g, store, &seq)?;
        let patterns = enc.slice_axis(1, sel_len, sel_len + 4)?; // [G*K, 4, D]

        // Consistency over the selection axis, separately per probe slot.
        let p_groups = patterns
            .reshape(&[b * c * n, k, 4, d])?
            .permute(&[0, 2, 1, 3])? // [G, 4, K, D]
            .reshape(&[b * c * n * 4, k, d])?;
        let encoded = self.pcem.forward(g, store, &p_groups)?;
        let s = self.head.forward(g, store, &encoded)?; // [G*4, K, 1]

        let token_scores = s
            .reshape(&[b, c, n, 4 * k])?
            .mean_axis(3, false)?; // [B, C, N]
        let scores = token_scores.mean_axis(2, false)?; // [B, C]
        let patterns = patterns.reshape(&[b, c, n, k, 4, d])?;
        Ok(CoreOutput {
            scores,
            token_scores,
            patterns,
        })
    }
}

/// Feature extraction plus the scoring core.
pub struct DioModel {
    pub fem: FeatureExtractor,
    pub core: DioCore,
    pub cfg: ModelConfig,
}

impl DioModel {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        cfg: &ModelConfig,
    ) -> Self {
        let fem = FeatureExtractor::new(store, rng, "fem", cfg, false);
        let core = DioCore::new(store, rng, "core", cfg);
        DioModel {
            fem,
            core,
            cfg: cfg.clone(),
        }
    }

    /// Features for whole instances: images as 16 rasters each.
    /// Returns z: [B, 16, N, D].
    pub fn features<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        images: &[&[u8]],
    ) -> Result<Tensor<T>> {
        debug_assert_eq!(images.len() % 16, 0);
        let b = images.len() / 16;
        let (data, shape) = patchify::<T>(images, self.cfg.raster_size, self.cfg.patch);
        let patches = g.constant(data, &shape)?;
        let z = self.fem.forward(g, store, &patches)?;
        Ok(z.reshape(&[b, 16, self.cfg.tokens(), self.cfg.dim])?)
    }

    /// Scores of the 8 pool options. z: [B, 16, N, D] -> [B, 8] (+patterns).
    pub fn score_options<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        z: &Tensor<T>,
    ) -> Result<CoreOutput<T>> {
        let ctx = z.slice_axis(1, 0, 8)?;
        let cands = z.slice_axis(1, 8, 16)?;
        self.core.score_candidates(g, store, &ctx, &cands, &self.cfg)
    }
}

/// Gather, per batch row, the score of the answer and the logsumexp of the
/// remaining candidates. `answers` are 0-based candidate slots.
fn own_and_others<T: Scalar>(
    scores: &Tensor<T>,
    answers: &[usize],
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, c) = (scores.shape()[0], scores.shape()[1]);
    debug_assert_eq!(answers.len(), b);
    let flat = scores.reshape(&[b * c])?;
    let own_idx: Vec<usize> = answers.iter().enumerate().map(|(i, &a)| i * c + a).collect();
    let mut other_idx = Vec::with_capacity(b * (c - 1));
    for (i, &a) in answers.iter().enumerate() {
        for j in 0..c {
            if j != a {
                other_idx.push(i * c + j);
            }
        }
    }
    let own = flat.index_select(0, &own_idx)?; // [B]
    let others = flat
        .index_select(0, &other_idx)?
        .reshape(&[b, c - 1])?
        .logsumexp_last(false)?; // [B]
    Ok((own, others))
}

/// Training objective: the answer's probability against the summed
/// probability of the incorrect options,
/// mean over the batch of log(sum_{c != a} e^{s_c}) - s_a.
pub fn loss_dio<T: Scalar>(scores: &Tensor<T>, answers: &[usize]) -> Result<Tensor<T>> {
    let (own, others) = own_and_others(scores, answers)?;
    Ok(others.sub(&own)?.mean_all())
}

/// Classical cross-entropy objective (ablation): the denominator keeps the
/// answer, mean of log(sum_c e^{s_c}) - s_a.
pub fn loss_ce<T: Scalar>(scores: &Tensor<T>, answers: &[usize]) -> Result<Tensor<T>> {
    let (b, c) = (scores.shape()[0], scores.shape()[1]);
    let flat = scores.reshape(&[b * c])?;
    let own_idx: Vec<usize> = answers.iter().enumerate().map(|(i, &a)| i * c + a).collect();
    let own = flat.index_select(0, &own_idx)?;
    let all = scores.logsumexp_last(false)?;
    Ok(all.sub(&own)?.mean_all())
}

/// Distribution-level objective for a single option distribution, with the
/// documented clamp at 1e-12 on the incorrect-option mass.
pub fn dio_loss_from_distribution(probs: &[f64], alpha: usize) -> f64 {
    let p = probs[alpha];
    let rest = (1.0 - p).max(1e-12);
    -(p.ln() - rest.ln())
}

/// Parameterized mutual-information bound value
/// log( e^{s_a} / (1/K * sum_{c != a} e^{s_c}) ), evaluated directly.
pub fn bound_value(scores: &[f64], alpha: usize, k: usize) -> f64 {
    let others: Vec<f64> = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != alpha)
        .map(|(_, &s)| s)
        .collect();
    scores[alpha] - (logsumexp(&others) - (k as f64).ln())
}

/// Objective value from raw scores (negated bound without the log K shift).
pub fn dio_loss_from_scores(scores: &[f64], alpha: usize) -> f64 {
    let others: Vec<f64> = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != alpha)
        .map(|(_, &s)| s)
        .collect();
    logsumexp(&others) - scores[alpha]
}

/// Both objective forms and whether the strict ordering holds: the
/// incorrect-options denominator makes -loss exceed the classical
/// cross-entropy objective whenever the answer mass is below 1.
pub fn check_bound_ordering(probs: &[f64], alpha: usize) -> (f64, f64, bool) {
    let neg_loss = -dio_loss_from_distribution(probs, alpha);
    let total: f64 = probs.iter().sum();
    let ce_form = (probs[alpha] / total).ln();
    (neg_loss, ce_form, neg_loss > ce_form)
}

/// Hypothetical-option objective. Scores are [B, 8 + H] with the original
/// pool first; `beta` = 16 + H.
#[derive(Debug)]
pub struct BrandoLoss<T: Scalar> {
    pub up: Tensor<T>,
    pub down: Tensor<T>,
    pub total: Tensor<T>,
}

/// `down_stop_gradient` detaches the incorrect-option denominator of the
/// down term, preventing the model from satisfying it by lowering real
/// distractor scores.
pub fn loss_brando<T: Scalar>(
    scores: &Tensor<T>,
    answers: &[usize],
    beta: usize,
) -> Result<BrandoLoss<T>> {
    loss_brando_opts(scores, answers, beta, false)
}

pub fn loss_brando_opts<T: Scalar>(
    scores: &Tensor<T>,
    answers: &[usize],
    beta: usize,
    down_stop_gradient: bool,
) -> Result<BrandoLoss<T>> {
    if beta <= 17 {
        return Err(ModelError::Config(format!(
            "beta {beta} leaves no hypothetical options (need > 17)"
        )));
    }
    let (b, c) = (scores.shape()[0], scores.shape()[1]);
    let h = beta - 16;
    if c != 8 + h {
        return Err(ModelError::Config(format!(
            "scores have {c} candidates, expected {} for beta {beta}",
            8 + h
        )));
    }
    // up: answer against every other candidate, hypotheses included
    let (own, others) = own_and_others(scores, answers)?;
    let up = others.sub(&own)?.mean_all();

    // down: each hypothesis against the original incorrect options
    let flat = scores.reshape(&[b * c])?;
    let mut incorrect_idx = Vec::with_capacity(b * 7);
    for (i, &a) in answers.iter().enumerate() {
        for j in 0..8 {
            if j != a {
                incorrect_idx.push(i * c + j);
            }
        }
    }
    let mut lse_incorrect = flat
        .index_select(0, &incorrect_idx)?
        .reshape(&[b, 7])?
        .logsumexp_last(true)?; // [B, 1]
    if down_stop_gradient {
        lse_incorrect = lse_incorrect.stop_gradient();
    }
    let hyp = scores.slice_axis(1, 8, c)?; // [B, H]
    let per_hyp = lse_incorrect.sub(&hyp)?; // [B, H]
    let norm = T::from_f64(1.0 / (beta - 17) as f64);
    let down = per_hyp.sum_axis(1, false)?.scale(norm).mean_all();

    let total = up.add(&down)?;
    Ok(BrandoLoss { up, down, total })
}
