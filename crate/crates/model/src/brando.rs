//! Hypothetical-option generator: a stack of logical layers that refine a
//! Gaussian promoter against the context features. Each layer couples
//! multi-head attention with a linear-attention memory bank that accumulates
//! feature statistics across training batches, a learned gate to mix the
//! memory read into the promoter, and a reparameterization head.

use autodiff::{Graph, ParamId, ParamStore, Scalar, Tensor};
use rand::Rng;

use crate::config::ModelConfig;
use crate::nn::{normal_init, FinalInit, LayerNorm, Linear, Mlp};
use crate::{ModelError, Result};

/// Sequence layout inside a logical layer: 8 context tokens + the promoter.
pub const SEQ: usize = 9;
const PROMOTER: usize = 8;

/// phi for the linear-attention kernel: elementwise ELU + 1. Mathematically
/// positive everywhere; the composed float form (e^x - 1) + 1 cancels to 0
/// below x ~ -37, so the result is floored at the smallest positive normal.
pub fn phi<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.elu().add_scalar(T::one()).clamp_min(T::min_positive_value())
}

fn phi_host<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v + T::one()
    } else {
        v.exp().max(T::min_positive_value())
    }
}

/// Per-layer memory: bank `m` is [D, D], buffer `b` is [D].
#[derive(Clone)]
pub struct MemoryState<T: Scalar> {
    pub m: Vec<Vec<T>>,
    pub b: Vec<Vec<T>>,
    pub dim: usize,
}

impl<T: Scalar> MemoryState<T> {
    /// Initial values: banks at zero, buffers at 1e-9.
    pub fn new(layers: usize, dim: usize) -> Self {
        MemoryState {
            m: vec![vec![T::zero(); dim * dim]; layers],
            b: vec![vec![T::from_f64(1e-9); dim]; layers],
            dim,
        }
    }

    pub fn reset(&mut self) {
        for m in self.m.iter_mut() {
            m.fill(T::zero());
        }
        for b in self.b.iter_mut() {
            b.fill(T::from_f64(1e-9));
        }
    }
}

/// Read `phi(Q) M / phi(Q) B` with the state as constants; gradients flow
/// only through the query path. Denominator entries are clamped at 1e-12.
pub fn memory_read<T: Scalar>(
    g: &Graph<T>,
    phi_q: &Tensor<T>,
    m: &[T],
    b: &[T],
    dim: usize,
) -> Result<Tensor<T>> {
    let rows = phi_q.numel() / dim;
    let flat = phi_q.reshape(&[rows, dim])?;
    let m_c = g.constant(m.to_vec(), &[dim, dim])?;
    let b_c = g.constant(b.to_vec(), &[dim, 1])?;
    let num = flat.matmul(&m_c)?;
    let den = flat.matmul(&b_c)?.clamp_min(T::from_f64(1e-12));
    let mut shape = phi_q.shape().to_vec();
    shape.pop();
    shape.push(dim);
    Ok(num.div(&den)?.reshape(&shape)?)
}

/// Bank/buffer update from the current batch's keys and values (host math,
/// detached from the tape):
///   M_n = M_{n-1} + phi(K)^T (V - phi(K) M_{n-1} / phi(K) B_{n-1})
///   B_n = B_{n-1} + sum phi(K)
pub fn memory_update<T: Scalar>(
    k: &[T],
    v: &[T],
    m_prev: &[T],
    b_prev: &[T],
    dim: usize,
) -> (Vec<T>, Vec<T>) {
    let rows = k.len() / dim;
    let mut m_new = m_prev.to_vec();
    let mut b_new = b_prev.to_vec();
    let mut phi_k_row = vec![T::zero(); dim];
    let mut pred = vec![T::zero(); dim];
    for r in 0..rows {
        let krow = &k[r * dim..(r + 1) * dim];
        let vrow = &v[r * dim..(r + 1) * dim];
        for d in 0..dim {
            phi_k_row[d] = phi_host(krow[d]);
        }
        // prediction phi(k) M_{n-1} / phi(k) B_{n-1} for this row
        let mut den = T::zero();
        for d in 0..dim {
            den += phi_k_row[d] * b_prev[d];
        }
        let den = if den > T::from_f64(1e-12) {
            den
        } else {
            T::from_f64(1e-12)
        };
        for c in 0..dim {
            let mut acc = T::zero();
            for d in 0..dim {
                acc += phi_k_row[d] * m_prev[d * dim + c];
            }
            pred[c] = acc / den;
        }
        for d in 0..dim {
            let pk = phi_k_row[d];
            b_new[d] += pk;
            let row = &mut m_new[d * dim..(d + 1) * dim];
            for c in 0..dim {
                row[c] += pk * (vrow[c] - pred[c]);
            }
        }
    }
    (m_new, b_new)
}

/// Trainable promoter distribution: mean and log-variance vectors.
pub struct GaussianSource {
    pub mu: ParamId,
    pub logvar: ParamId,
    pub dim: usize,
}

impl GaussianSource {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        GaussianSource {
            mu: store.add(format!("{name}.mu"), &[dim], vec![T::zero(); dim]),
            logvar: store.add(format!("{name}.logvar"), &[dim], vec![T::zero(); dim]),
            dim,
        }
    }

    /// o = mu + exp(logvar/2) * eps, one promoter per row; `noise` off
    /// collapses every promoter onto the mean.
    pub fn sample<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        rng: &mut impl Rng,
        count: usize,
        noise: bool,
    ) -> Result<Tensor<T>> {
        let mu = g.param(store, self.mu).reshape(&[1, self.dim])?;
        let base = mu.broadcast_to(&[count, self.dim])?;
        if !noise {
            return Ok(base);
        }
        let sigma = g
            .param(store, self.logvar)
            .scale(T::from_f64(0.5))
            .exp()
            .reshape(&[1, self.dim])?;
        let eps = g.randn(rng, &[count, self.dim]);
        Ok(base.add(&sigma.mul(&eps)?)?)
    }
}

pub struct LogicalLayer {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub pos: ParamId,
    pub ln_q: LayerNorm,
    pub ln_k: LayerNorm,
    pub ln_v: LayerNorm,
    pub tau: ParamId,
    pub ff: Mlp,
    pub reparam: Mlp,
    pub heads: usize,
    pub dim: usize,
}

pub struct LayerOptions {
    /// Write the batch's keys/values into the memory (training only).
    pub update_memory: bool,
    /// Gate the memory read into the promoter; off mirrors the ablation
    /// that deactivates history learning (gate forced to zero).
    pub history: bool,
    /// Reparameterization noise; off makes the head deterministic.
    pub noise: bool,
}

impl LogicalLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cfg: &ModelConfig,
        gate_init: f64,
    ) -> Self {
        let d = cfg.dim;
        let layer = LogicalLayer {
            wq: Linear::new(store, rng, &format!("{name}.wq"), d, d, false),
            wk: Linear::new(store, rng, &format!("{name}.wk"), d, d, false),
            wv: Linear::new(store, rng, &format!("{name}.wv"), d, d, false),
            pos: store.add(
                format!("{name}.pos"),
                &[SEQ, d],
                normal_init(rng, SEQ * d, 0.02),
            ),
            ln_q: LayerNorm::new(store, &format!("{name}.lnq"), d),
            ln_k: LayerNorm::new(store, &format!("{name}.lnk"), d),
            ln_v: LayerNorm::new(store, &format!("{name}.lnv"), d),
            tau: store.add(format!("{name}.tau"), &[1], vec![T::from_f64(gate_init)]),
            ff: Mlp::new(
                store,
                rng,
                &format!("{name}.ff"),
                &[d, cfg.ff_hidden(), d],
                FinalInit::Kaiming,
            ),
            reparam: Mlp::new(
                store,
                rng,
                &format!("{name}.rep"),
                &[d, 2 * d, 2 * d],
                FinalInit::Kaiming,
            ),
            heads: cfg.heads,
            dim: d,
        };
        // Start the reparameterization head near-deterministic: log-sigma
        // half of the final bias at -4.
        let bias_id = layer.reparam.layers.last().unwrap().b.unwrap();
        let bias = store.data_mut(bias_id);
        for i in d..2 * d {
            bias[i] = T::from_f64(-4.0);
        }
        layer
    }

    /// x: [R, 9, D] (context rows then promoter). Returns the layer output
    /// and, when requested, the updated memory for this layer.
    #[allow(clippy::type_complexity)]
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        mem_m: &[T],
        mem_b: &[T],
        opts: &LayerOptions,
        rng: &mut impl Rng,
    ) -> Result<(Tensor<T>, Option<(Vec<T>, Vec<T>)>)> {
        let r = x.shape()[0];
        let d = self.dim;

        // 1. projections; 2. positional encoding + layer norm
        let pos = g.param(store, self.pos);
        let q = self
            .ln_q
            .forward(g, store, &self.wq.forward(g, store, x)?.add(&pos)?)?;
        let k = self
            .ln_k
            .forward(g, store, &self.wk.forward(g, store, x)?.add(&pos)?)?;
        let v = self
            .ln_v
            .forward(g, store, &self.wv.forward(g, store, x)?.add(&pos)?)?;

        // multi-head self-attention (no output projection)
        let attn = crate::nn::attention(&q, &k, &v, self.heads)?;

        // 3. memory read on the normalized queries (promoter row is the one
        // that gets mixed in)
        let mut attn = attn;
        let mut update = None;
        if opts.history || opts.update_memory {
            let phi_q = phi(&q);
            if opts.history {
                let tilde = memory_read(g, &phi_q, mem_m, mem_b, d)?;
                let coef = g.param(store, self.tau).sigmoid(); // [1]
                let one_minus = g.scalar(T::one()).sub(&coef)?;
                let o_hat = attn.slice_axis(1, PROMOTER, SEQ)?;
                let o_tilde = tilde.slice_axis(1, PROMOTER, SEQ)?;
                let mixed = o_hat.mul(&one_minus)?.add(&o_tilde.mul(&coef)?)?;
                let ctx_rows = attn.slice_axis(1, 0, PROMOTER)?;
                attn = g.concat(&[&ctx_rows, &mixed], 1)?;
            }
            // 4. read-then-write: the update sees the same batch's K, V
            if opts.update_memory {
                update = Some(memory_update(k.value(), v.value(), mem_m, mem_b, d));
            }
        }

        // 6. two residual connections around the feedforward layer
        let z1 = x.add(&attn)?;
        let z2 = self.ff.forward(g, store, &z1)?;
        let out = z1.add(&z2)?;

        // 7. reparameterization head on the promoter slot
        let prom = out.slice_axis(1, PROMOTER, SEQ)?.reshape(&[r, d])?;
        let stats = self.reparam.forward(g, store, &prom)?; // [R, 2D]
        let mu = stats.slice_axis(1, 0, d)?;
        let lnsig = stats.slice_axis(1, d, 2 * d)?;
        let new_prom = if opts.noise {
            let eps = g.randn(rng, &[r, d]);
            mu.add(&lnsig.scale(T::from_f64(0.5)).exp().mul(&eps)?)?
        } else {
            mu
        };
        let ctx_rows = out.slice_axis(1, 0, PROMOTER)?;
        let out = g.concat(&[&ctx_rows, &new_prom.reshape(&[r, 1, d])?], 1)?;
        Ok((out, update))
    }
}

pub struct BrandoModel {
    pub source: GaussianSource,
    pub layers: Vec<LogicalLayer>,
    pub beta: usize,
}

impl BrandoModel {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        cfg: &ModelConfig,
        beta: usize,
        layers: usize,
        gate_init: f64,
    ) -> Result<Self> {
        if beta <= 17 {
            return Err(ModelError::Config(format!(
                "beta {beta} leaves no hypothetical options (need > 17)"
            )));
        }
        let source = GaussianSource::new(store, "brando.src", cfg.dim);
        let layers = (0..layers)
            .map(|i| LogicalLayer::new(store, rng, &format!("brando.l{i}"), cfg, gate_init))
            .collect();
        Ok(BrandoModel {
            source,
            layers,
            beta,
        })
    }

    pub fn hypothesis_count(&self) -> usize {
        self.beta - 16
    }

    /// Map promoters to hypothetical-option representations.
    /// z_ctx: [B, 8, N, D] -> [B, beta-16, N, D].
    pub fn map_hypotheses<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        z_ctx: &Tensor<T>,
        memory: &mut MemoryState<T>,
        opts: &LayerOptions,
        rng: &mut impl Rng,
    ) -> Result<Tensor<T>> {
        let (b, n, d) = (z_ctx.shape()[0], z_ctx.shape()[2], z_ctx.shape()[3]);
        let h = self.hypothesis_count();

        // one promoter per hypothesis, shared across token indices
        let promoters = self.source.sample(g, store, rng, b * h, opts.noise)?;
        let prom = promoters
            .reshape(&[b, h, 1, 1, d])?
            .broadcast_to(&[b, h, n, 1, d])?;
        let ctx = z_ctx
            .permute(&[0, 2, 1, 3])? // [B, N, 8, D]
            .reshape(&[b, 1, n, 8, d])?
            .broadcast_to(&[b, h, n, 8, d])?;
        let mut x = g
            .concat(&[&ctx, &prom], 3)?
            .reshape(&[b * h * n, SEQ, d])?;

        for (li, layer) in self.layers.iter().enumerate() {
            let (out, update) =
                layer.forward(g, store, &x, &memory.m[li], &memory.b[li], opts, rng)?;
            if let Some((m_new, b_new)) = update {
                memory.m[li] = m_new;
                memory.b[li] = b_new;
            }
            x = out;
        }

        // final promoter slots are the hypothesis representations
        Ok(x
            .slice_axis(1, PROMOTER, SEQ)?
            .reshape(&[b, h, n, d])?)
    }
}
