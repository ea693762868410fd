//! Small neural building blocks over the autodiff substrate.

use autodiff::{Graph, ParamId, ParamStore, Scalar, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Result;

fn normal_vec<T: Scalar>(rng: &mut impl Rng, n: usize, std: f64) -> Vec<T> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::from_f64(v * std)
        })
        .collect()
}

/// Kaiming fan-in init for weight matrices; biases start at zero.
pub fn kaiming<T: Scalar>(rng: &mut impl Rng, fan_in: usize, n: usize) -> Vec<T> {
    normal_vec(rng, n, (2.0 / fan_in as f64).sqrt())
}

pub fn normal_init<T: Scalar>(rng: &mut impl Rng, n: usize, std: f64) -> Vec<T> {
    normal_vec(rng, n, std)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinalInit {
    Kaiming,
    Zero,
}

pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        Self::with_init(store, rng, name, in_dim, out_dim, bias, FinalInit::Kaiming)
    }

    pub fn with_init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: FinalInit,
    ) -> Self {
        let w_data = match init {
            FinalInit::Kaiming => kaiming(rng, in_dim, in_dim * out_dim),
            FinalInit::Zero => vec![T::zero(); in_dim * out_dim],
        };
        let w = store.add(format!("{name}.w"), &[in_dim, out_dim], w_data);
        let b = bias.then(|| store.add(format!("{name}.b"), &[out_dim], vec![T::zero(); out_dim]));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    /// x: [..., in_dim] -> [..., out_dim]; inner dims are flattened through
    /// one 2-D matmul.
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let shape = x.shape().to_vec();
        let rows = x.numel() / self.in_dim;
        let flat = x.reshape(&[rows, self.in_dim])?;
        let w = g.param(store, self.w);
        let mut y = flat.matmul(&w)?;
        if let Some(b) = self.b {
            y = y.add(&g.param(store, b))?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        Ok(y.reshape(&out_shape)?)
    }
}

/// Linear / ELU stacks. `dims` lists layer widths including input and output.
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        dims: &[usize],
        final_init: FinalInit,
    ) -> Self {
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let init = if i == dims.len() - 2 {
                final_init
            } else {
                FinalInit::Kaiming
            };
            layers.push(Linear::with_init(
                store,
                rng,
                &format!("{name}.{i}"),
                dims[i],
                dims[i + 1],
                true,
                init,
            ));
        }
        Mlp { layers }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, &h)?;
            if i + 1 < self.layers.len() {
                h = h.elu();
            }
        }
        Ok(h)
    }
}

pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.g"), &[dim], vec![T::one(); dim]),
            beta: store.add(format!("{name}.b"), &[dim], vec![T::zero(); dim]),
            dim,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let n = x.layer_norm_last(T::from_f64(1e-6))?;
        Ok(n.mul(&g.param(store, self.gamma))?.add(&g.param(store, self.beta))?)
    }
}

/// Scaled dot-product attention over [R, S, D] with `heads` heads.
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    let shape = q.shape().to_vec();
    let (r, s, d) = (shape[0], shape[1], shape[2]);
    debug_assert_eq!(d % heads, 0, "dim {d} not divisible by {heads} heads");
    let hd = d / heads;
    let split = |t: &Tensor<T>| -> Result<Tensor<T>> {
        Ok(t.reshape(&[r, s, heads, hd])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[r * heads, s, hd])?)
    };
    let qh = split(q)?;
    let kh = split(k)?;
    let vh = split(v)?;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let scores = qh.bmm(&kh.transpose_last2()?)?.scale(scale);
    let probs = scores.softmax_last()?;
    let ctx = probs.bmm(&vh)?;
    Ok(ctx
        .reshape(&[r, heads, s, hd])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[r, s, d])?)
}

pub struct Mhsa {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl Mhsa {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        Mhsa {
            wq: Linear::new(store, rng, &format!("{name}.q"), dim, dim, true),
            wk: Linear::new(store, rng, &format!("{name}.k"), dim, dim, true),
            wv: Linear::new(store, rng, &format!("{name}.v"), dim, dim, true),
            wo: Linear::new(store, rng, &format!("{name}.o"), dim, dim, true),
            heads,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let q = self.wq.forward(g, store, x)?;
        let k = self.wk.forward(g, store, x)?;
        let v = self.wv.forward(g, store, x)?;
        let ctx = attention(&q, &k, &v, self.heads)?;
        self.wo.forward(g, store, &ctx)
    }
}

/// Pre-norm encoder layer: x + MHSA(LN(x)), then x + FF(LN(x)).
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: Mhsa,
    pub ln2: LayerNorm,
    pub ff: Mlp,
}

impl EncoderLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
    ) -> Self {
        EncoderLayer {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: Mhsa::new(store, rng, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ff: Mlp::new(
                store,
                rng,
                &format!("{name}.ff"),
                &[dim, ff_hidden, dim],
                FinalInit::Kaiming,
            ),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let a = self.attn.forward(g, store, &self.ln1.forward(g, store, x)?)?;
        let x1 = x.add(&a)?;
        let f = self.ff.forward(g, store, &self.ln2.forward(g, store, &x1)?)?;
        Ok(x1.add(&f)?)
    }
}

pub struct TransformerEncoder {
    pub layers: Vec<EncoderLayer>,
}

impl TransformerEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        depth: usize,
        ff_hidden: usize,
    ) -> Self {
        let layers = (0..depth)
            .map(|i| EncoderLayer::new(store, rng, &format!("{name}.{i}"), dim, heads, ff_hidden))
            .collect();
        TransformerEncoder { layers }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(g, store, &h)?;
        }
        Ok(h)
    }
}
