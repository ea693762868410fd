//! Tokenizing image feature extraction: patch embedding + transformer
//! encoder. The dual-head variant doubles the output width and splits it
//! into the codebook-facing part `u` and the noise-facing part `b`.

use autodiff::{Graph, ParamId, ParamStore, Scalar, Tensor};
use rand::Rng;

use crate::config::ModelConfig;
use crate::nn::{normal_init, Linear, TransformerEncoder};
use crate::Result;

/// Cut rasters into row-major patches: one [n_images, N, patch*patch] host
/// buffer scaled to [0,1]. Inputs carry no gradient, so this never touches
/// the tape.
pub fn patchify<T: Scalar>(images: &[&[u8]], raster: usize, patch: usize) -> (Vec<T>, Vec<usize>) {
    let grid = raster / patch;
    let n = grid * grid;
    let pd = patch * patch;
    let mut out = Vec::with_capacity(images.len() * n * pd);
    let scale = 1.0 / 255.0;
    for img in images {
        debug_assert_eq!(img.len(), raster * raster);
        for gy in 0..grid {
            for gx in 0..grid {
                for py in 0..patch {
                    for px in 0..patch {
                        let y = gy * patch + py;
                        let x = gx * patch + px;
                        out.push(T::from_f64(img[y * raster + x] as f64 * scale));
                    }
                }
            }
        }
    }
    (out, vec![images.len(), n, pd])
}

pub struct FeatureExtractor {
    pub embed: Linear,
    pub pos: ParamId,
    pub encoder: TransformerEncoder,
    pub dim: usize,
    pub dual: bool,
}

impl FeatureExtractor {
    /// `dual` doubles the working width; forward_dual splits it in half.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cfg: &ModelConfig,
        dual: bool,
    ) -> Self {
        let width = if dual { 2 * cfg.dim } else { cfg.dim };
        let embed = Linear::new(store, rng, &format!("{name}.embed"), cfg.patch_dim(), width, true);
        let pos = store.add(
            format!("{name}.pos"),
            &[cfg.tokens(), width],
            normal_init(rng, cfg.tokens() * width, 0.02),
        );
        let encoder = TransformerEncoder::new(
            store,
            rng,
            &format!("{name}.enc"),
            width,
            cfg.heads,
            cfg.vit_depth,
            cfg.ff_mult * width,
        );
        FeatureExtractor {
            embed,
            pos,
            encoder,
            dim: cfg.dim,
            dual,
        }
    }

    /// patches: [R, N, patch_dim] -> tokens [R, N, width].
    fn encode<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        patches: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let h = self.embed.forward(g, store, patches)?;
        let h = h.add(&g.param(store, self.pos))?;
        self.encoder.forward(g, store, &h)
    }

    /// Single-head features z: [R, N, D].
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        patches: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        debug_assert!(!self.dual);
        self.encode(g, store, patches)
    }

    /// Dual-head features (u, b), each [R, N, D].
    pub fn forward_dual<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        patches: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        debug_assert!(self.dual);
        let h = self.encode(g, store, patches)?;
        let last = h.ndim() - 1;
        let u = h.slice_axis(last, 0, self.dim)?;
        let b = h.slice_axis(last, self.dim, 2 * self.dim)?;
        Ok((u, b))
    }
}
