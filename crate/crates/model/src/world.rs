//! Codebook modeling of image features: a dual-head extractor whose `u`
//! half is pulled onto trainable component means and whose `b` half is
//! regularized toward standard normal, a reconstruction decoder, the five
//! codebook losses, the component-weighted fine-tuning loss, and the
//! estimate -> sample -> decode generation pipeline.

use autodiff::{Graph, ParamId, ParamStore, Scalar, Tensor};
use rand::Rng;

use crate::config::ModelConfig;
use crate::dio::DioCore;
use crate::extractor::{patchify, FeatureExtractor};
use crate::nn::{normal_init, Linear, TransformerEncoder};
use crate::util::gumbel_max;
use crate::{ModelError, Result};

/// Depth-reversed counterpart of the extractor: tokens back to a raster,
/// sigmoid output in [0,1].
pub struct Decoder {
    pub pos: ParamId,
    pub encoder: TransformerEncoder,
    pub unpatch: Linear,
}

impl Decoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cfg: &ModelConfig,
    ) -> Self {
        Decoder {
            pos: store.add(
                format!("{name}.pos"),
                &[cfg.tokens(), cfg.dim],
                normal_init(rng, cfg.tokens() * cfg.dim, 0.02),
            ),
            encoder: TransformerEncoder::new(
                store,
                rng,
                &format!("{name}.enc"),
                cfg.dim,
                cfg.heads,
                cfg.vit_depth,
                cfg.ff_hidden(),
            ),
            unpatch: Linear::new(
                store,
                rng,
                &format!("{name}.unpatch"),
                cfg.dim,
                cfg.patch_dim(),
                true,
            ),
        }
    }

    /// tokens: [R, N, D] -> rasters [R, raster^2].
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        tokens: &Tensor<T>,
        cfg: &ModelConfig,
    ) -> Result<Tensor<T>> {
        let r = tokens.shape()[0];
        let grid = cfg.raster_size / cfg.patch;
        let p = cfg.patch;
        let h = tokens.add(&g.param(store, self.pos))?;
        let h = self.encoder.forward(g, store, &h)?;
        let px = self.unpatch.forward(g, store, &h)?.sigmoid(); // [R, N, p*p]
        let img = px
            .reshape(&[r, grid, grid, p, p])?
            .permute(&[0, 1, 3, 2, 4])? // [R, gy, py, gx, px]
            .reshape(&[r, cfg.raster_size * cfg.raster_size])?;
        Ok(img)
    }
}

pub struct WorldModel {
    pub extractor: FeatureExtractor,
    pub core: DioCore,
    pub codebook: ParamId,
    pub decoder: Decoder,
    pub tau: ParamId,
    pub components: usize,
    pub cfg: ModelConfig,
}

impl WorldModel {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        cfg: &ModelConfig,
        components: usize,
    ) -> Result<Self> {
        if components < 2 {
            return Err(ModelError::Config(format!(
                "codebook needs at least 2 components, got {components}"
            )));
        }
        let extractor = FeatureExtractor::new(store, rng, "fem", cfg, true);
        let core = DioCore::new(store, rng, "core", cfg);
        // component means start as draws from N(0, 1/D)
        let codebook = store.add(
            "world.codebook",
            &[components, cfg.dim],
            normal_init(rng, components * cfg.dim, 1.0 / (cfg.dim as f64).sqrt()),
        );
        let decoder = Decoder::new(store, rng, "world.dec", cfg);
        let tau = store.add("world.tau", &[1], vec![T::one()]);
        Ok(WorldModel {
            extractor,
            core,
            codebook,
            decoder,
            tau,
            components,
            cfg: cfg.clone(),
        })
    }

    /// Dual features for a batch of instances. Returns (u, b): [B, 16, N, D].
    pub fn dual_features<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        images: &[&[u8]],
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let b = images.len() / 16;
        let (data, shape) = patchify::<T>(images, self.cfg.raster_size, self.cfg.patch);
        let patches = g.constant(data, &shape)?;
        let (u, bf) = self.extractor.forward_dual(g, store, &patches)?;
        let n = self.cfg.tokens();
        Ok((
            u.reshape(&[b, 16, n, self.cfg.dim])?,
            bf.reshape(&[b, 16, n, self.cfg.dim])?,
        ))
    }
}

/// Nearest component per row of `u` (squared Euclidean distance, ties to the
/// lowest index).
pub fn nearest_components<T: Scalar>(
    u: &[T],
    rows: usize,
    dim: usize,
    codebook: &[T],
    m: usize,
) -> Vec<usize> {
    // dist^2 = |u|^2 - 2 u.U + |U|^2; the |u|^2 term is constant per row.
    let mut cb_t = vec![T::zero(); dim * m];
    for c in 0..m {
        for d in 0..dim {
            cb_t[d * m + c] = codebook[c * dim + d];
        }
    }
    let mut dots = vec![T::zero(); rows * m];
    T::gemm(rows, dim, m, T::one(), u, &cb_t, T::zero(), &mut dots);
    let norms: Vec<T> = (0..m)
        .map(|c| {
            codebook[c * dim..(c + 1) * dim]
                .iter()
                .map(|&v| v * v)
                .sum()
        })
        .collect();
    let two = T::from_f64(2.0);
    (0..rows)
        .map(|r| {
            let mut best = 0usize;
            let mut best_d = norms[0] - two * dots[r * m];
            for c in 1..m {
                let d = norms[c] - two * dots[r * m + c];
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub struct WorldLosses<T: Scalar> {
    pub l1: Tensor<T>,
    pub l2: Tensor<T>,
    pub l3: Tensor<T>,
    pub l4: Tensor<T>,
    pub l5: Tensor<T>,
    pub total: Tensor<T>,
    /// u features [B, 16, N, D] for downstream scoring.
    pub u: Tensor<T>,
    /// Component index chosen per (image, token) row.
    pub assignments: Vec<usize>,
}

/// λ weighting of the component-training term against the feature-commitment
/// term, as in vector-quantization commitment weighting.
pub const LAMBDA: f64 = 0.25;

/// The five codebook losses over one batch. Sums run over all 16 images and
/// tokens per instance; the batch dimension is averaged.
pub fn world_losses<T: Scalar>(
    g: &Graph<T>,
    store: &ParamStore<T>,
    model: &WorldModel,
    images: &[&[u8]],
    rng: &mut impl Rng,
) -> Result<WorldLosses<T>> {
    let bsz = images.len() / 16;
    let (u, bf) = model.dual_features(g, store, images)?;

    let raster2 = model.cfg.raster_size * model.cfg.raster_size;
    let mut px = Vec::with_capacity(images.len() * raster2);
    for img in images {
        px.extend(img.iter().map(|&v| T::from_f64(v as f64 / 255.0)));
    }
    let x = g.constant(px, &[bsz * 16, raster2])?;
    codebook_losses(g, store, model, &u, &bf, &x, rng)
}

/// Loss terms from already-extracted dual features u, b ([B, 16, N, D]) and
/// target rasters x ([B*16, raster^2]).
pub fn codebook_losses<T: Scalar>(
    g: &Graph<T>,
    store: &ParamStore<T>,
    model: &WorldModel,
    u: &Tensor<T>,
    bf: &Tensor<T>,
    x: &Tensor<T>,
    rng: &mut impl Rng,
) -> Result<WorldLosses<T>> {
    let (bsz, n, d) = (u.shape()[0], u.shape()[2], u.shape()[3]);
    let inv_b = T::from_f64(1.0 / bsz as f64);
    let rows = bsz * 16 * n;

    let codebook = g.param(store, model.codebook);
    let assignments = nearest_components(u.value(), rows, d, codebook.value(), model.components);
    let u_sel = codebook
        .index_select(0, &assignments)?
        .reshape(&[bsz, 16, n, d])?;

    // l1 pulls features onto (stop-gradient) selected components
    let l1 = u
        .sub(&u_sel.stop_gradient())?
        .square()?
        .sum_all()
        .scale(inv_b);
    // l2 pushes the b head toward standard normal, fresh draw each step
    let eps2 = g.randn(rng, &[bsz, 16, n, d]);
    let l2 = bf.sub(&eps2)?.square()?.sum_all().scale(inv_b);
    // l3 trains the components toward (stop-gradient) features
    let l3 = u_sel
        .sub(&u.stop_gradient())?
        .square()?
        .sum_all()
        .scale(inv_b);

    // straight-through quantization: forward value is the component, the
    // backward path through u is the identity
    let u_hat = u_sel.sub(&u.stop_gradient())?.add(u)?;

    let tokens4 = u_hat.add(bf)?.reshape(&[bsz * 16, n, d])?;
    let recon4 = model.decoder.forward(g, store, &tokens4, &model.cfg)?;
    let l4 = x.sub(&recon4)?.square()?.sum_all().scale(inv_b);

    let eps5 = g.randn(rng, &[bsz, 16, n, d]);
    let tokens5 = u_hat.add(&eps5)?.reshape(&[bsz * 16, n, d])?;
    let recon5 = model.decoder.forward(g, store, &tokens5, &model.cfg)?;
    let l5 = x.sub(&recon5)?.square()?.sum_all().scale(inv_b);

    let total = l1
        .add(&l2)?
        .add(&l3.scale(T::from_f64(LAMBDA)))?
        .add(&l4)?
        .add(&l5)?;
    Ok(WorldLosses {
        l1,
        l2,
        l3,
        l4,
        l5,
        total,
        u: u.clone(),
        assignments,
    })
}

/// Modified feedforward: the induction module consumes u + eps for both the
/// context and the candidates. `noise` off reproduces scoring on u alone.
pub fn noisy_option_scores<T: Scalar>(
    g: &Graph<T>,
    store: &ParamStore<T>,
    model: &WorldModel,
    u: &Tensor<T>,
    rng: &mut impl Rng,
    noise: bool,
) -> Result<crate::dio::CoreOutput<T>> {
    let (b, n, d) = (u.shape()[0], u.shape()[2], u.shape()[3]);
    let noisy = if noise {
        let eps = g.randn(rng, &[b, 16, n, d]);
        u.add(&eps)?
    } else {
        u.clone()
    };
    let ctx = noisy.slice_axis(1, 0, 8)?;
    let cands = noisy.slice_axis(1, 8, 16)?;
    model.core.score_candidates(g, store, &ctx, &cands, &model.cfg)
}

/// Token-level component weights S[b, m, j]: each component, placed in the
/// candidate slot with per-component noise `eps_m` (None for the
/// generation-time weights), scored against the context by the feature-level
/// core. Components are processed in chunks to bound the live graph.
pub fn component_token_scores<T: Scalar>(
    g: &Graph<T>,
    store: &ParamStore<T>,
    model: &WorldModel,
    ctx: &Tensor<T>,
    eps_m: Option<&Tensor<T>>,
    chunk: usize,
) -> Result<Tensor<T>> {
    let (b, n, d) = (ctx.shape()[0], ctx.shape()[2], ctx.shape()[3]);
    let m = model.components;
    let codebook = g.param(store, model.codebook);
    let cands_all = match eps_m {
        Some(e) => codebook.add(e)?,
        None => codebook,
    };
    let mut parts = Vec::new();
    let mut lo = 0;
    while lo < m {
        let hi = (lo + chunk).min(m);
        let mc = hi - lo;
        let cand = cands_all
            .slice_axis(0, lo, hi)?
            .reshape(&[1, mc, 1, d])?
            .broadcast_to(&[b, mc, n, d])?;
        let out = model.core.score_candidates(g, store, ctx, &cand, &model.cfg)?;
        parts.push(out.token_scores); // [B, mc, N]
        lo = hi;
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Ok(g.concat(&refs, 1)?) // [B, M, N]
}

/// Fine-tuning loss: per token index, the component matching the correct
/// option's feature against all other components, at temperature |tau|
/// (clamped at 1e-6).
pub fn loss_weighted<T: Scalar>(
    g: &Graph<T>,
    store: &ParamStore<T>,
    model: &WorldModel,
    u: &Tensor<T>,
    answers: &[usize],
    rng: &mut impl Rng,
    chunk: usize,
) -> Result<Tensor<T>> {
    let (b, n, d) = (u.shape()[0], u.shape()[2], u.shape()[3]);
    let m = model.components;

    // positive component per (instance, token): nearest to the correct
    // option's feature
    let uval = u.value();
    let cbval = g.param(store, model.codebook);
    let cbval = cbval.value();
    let mut pos = Vec::with_capacity(b * n);
    for (i, &a) in answers.iter().enumerate() {
        let img = 8 + a;
        let base = ((i * 16) + img) * n * d;
        let rows = &uval[base..base + n * d];
        pos.extend(nearest_components(rows, n, d, cbval, m));
    }

    let eps_ctx = g.randn(rng, &[b, 8, n, d]);
    let ctx = u.slice_axis(1, 0, 8)?.add(&eps_ctx)?;
    let eps_m = g.randn(rng, &[m, d]);
    let token_scores = component_token_scores(g, store, model, &ctx, Some(&eps_m), chunk)?;

    let tau = g
        .param(store, model.tau)
        .abs()
        .clamp_min(T::from_f64(1e-6));
    loss_weighted_from_scores(&token_scores, &tau, &pos)
}

/// Weighted loss from precomputed token scores [B, M, N], a positive
/// temperature tensor, and the positive component per (instance, token):
/// sum over tokens of the positive's log-ratio against all other
/// components, averaged over the batch.
pub fn loss_weighted_from_scores<T: Scalar>(
    token_scores: &Tensor<T>,
    tau: &Tensor<T>,
    pos: &[usize],
) -> Result<Tensor<T>> {
    let (b, m, n) = (
        token_scores.shape()[0],
        token_scores.shape()[1],
        token_scores.shape()[2],
    );
    debug_assert_eq!(pos.len(), b * n);
    let logits = token_scores.div(tau)?; // [B, M, N]
    let flat = logits
        .permute(&[0, 2, 1])? // [B, N, M]
        .reshape(&[b * n * m])?;
    let own_idx: Vec<usize> = pos.iter().enumerate().map(|(r, &p)| r * m + p).collect();
    let mut other_idx = Vec::with_capacity(b * n * (m - 1));
    for (r, &p) in pos.iter().enumerate() {
        for c in 0..m {
            if c != p {
                other_idx.push(r * m + c);
            }
        }
    }
    let own = flat.index_select(0, &own_idx)?;
    let others = flat
        .index_select(0, &other_idx)?
        .reshape(&[b * n, m - 1])?
        .logsumexp_last(false)?;
    Ok(others
        .sub(&own)?
        .sum_all()
        .scale(T::from_f64(1.0 / b as f64)))
}

/// One generated answer: raster bytes plus the sampled component per token.
pub struct GeneratedAnswer {
    pub raster: Vec<u8>,
    pub component_indices: Vec<usize>,
}

/// Gumbel-Max over each token's column of weights, then decode the selected
/// component means (plus unit noise) back to a raster.
pub fn sample_and_decode<T: Scalar>(
    g: &Graph<T>,
    store: &ParamStore<T>,
    model: &WorldModel,
    weights: &[f64],
    rng: &mut impl Rng,
) -> Result<GeneratedAnswer> {
    let m = model.components;
    let n = model.cfg.tokens();
    let d = model.cfg.dim;
    debug_assert_eq!(weights.len(), m * n);
    let mut chosen = Vec::with_capacity(n);
    for j in 0..n {
        let col: Vec<f64> = (0..m).map(|c| weights[c * n + j]).collect();
        chosen.push(gumbel_max(&col, rng));
    }
    let codebook = g.param(store, model.codebook);
    let eps = g.randn(rng, &[n, d]);
    let tokens = codebook
        .index_select(0, &chosen)?
        .add(&eps)?
        .reshape(&[1, n, d])?;
    let img = model.decoder.forward(g, store, &tokens, &model.cfg)?;
    let raster = img
        .value()
        .iter()
        .map(|&v| (v.to_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(GeneratedAnswer {
        raster,
        component_indices: chosen,
    })
}

/// Fraction of components selected at least once.
pub fn codebook_usage(assignments: &[usize], components: usize) -> f64 {
    let mut seen = vec![false; components];
    for &a in assignments {
        seen[a] = true;
    }
    seen.iter().filter(|&&s| s).count() as f64 / components as f64
}
