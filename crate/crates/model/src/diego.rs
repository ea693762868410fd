//! Metadata alignment: a trainable reference dictionary with one vector per
//! attribute-rule modality, an alignment loss that pulls each
//! progressive-pattern representation toward its annotated modality vector,
//! pooled-pattern prediction/similarity diagnostics, and the
//! progressive-pattern verifier for generated answers.

use autodiff::{Graph, ParamId, ParamStore, Scalar, Tensor};
use forge::{vocab_index, PuzzleInstance, META_VOCAB_SIZE};
use rand::Rng;

use crate::dio::DioModel;
use crate::nn::normal_init;
use crate::util::{argmax, cosine};
use crate::Result;

/// Metadata slots supervised by the alignment loss; the pattern tensor has
/// four probe slots but only the first `l_meta` carry annotations.
pub const DEFAULT_L_META: usize = 2;

pub struct DiegoHead {
    pub dict: ParamId,
    pub tau: ParamId,
    pub vocab: usize,
    pub l_meta: usize,
}

impl DiegoHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        dim: usize,
        l_meta: usize,
    ) -> Self {
        let vocab = META_VOCAB_SIZE;
        DiegoHead {
            dict: store.add(
                "diego.dict",
                &[vocab, dim],
                normal_init(rng, vocab * dim, 1.0 / (dim as f64).sqrt()),
            ),
            tau: store.add("diego.tau", &[1], vec![T::one()]),
            vocab,
            l_meta,
        }
    }
}

/// One-hot slot mask [B, 4, F]: slot l flags the vocabulary index of the
/// l-th metadata entry; slots without an entry stay zero and contribute
/// nothing to the loss.
pub fn meta_mask<T: Scalar>(
    instances: &[&PuzzleInstance],
    l_meta: usize,
) -> (Vec<T>, Vec<usize>) {
    let b = instances.len();
    let f = META_VOCAB_SIZE;
    let mut mask = vec![T::zero(); b * 4 * f];
    for (i, inst) in instances.iter().enumerate() {
        for (l, spec) in inst.metadata.iter().take(l_meta.min(4)).enumerate() {
            mask[(i * 4 + l) * f + vocab_index(spec)] = T::one();
        }
    }
    (mask, vec![b, 4, f])
}

/// Alignment loss over the answer's pattern tensor [B, N, K, 4, D]:
/// softmax over dictionary entries at temperature |tau| (clamped at 1e-6),
/// cross-entropy against the flagged modality, summed over flagged slots
/// and averaged over the batch.
pub fn loss_diego<T: Scalar>(
    g: &Graph<T>,
    store: &ParamStore<T>,
    head: &DiegoHead,
    patterns: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    let shape = patterns.shape().to_vec();
    let (b, n, k, d) = (shape[0], shape[1], shape[2], shape[4]);
    let f = head.vocab;
    let rows = b * n * k * 4;
    let dict_t = g.param(store, head.dict).transpose_last2()?; // [D, F]
    let logits = patterns.reshape(&[rows, d])?.matmul(&dict_t)?;
    let tau = g.param(store, head.tau).abs().clamp_min(T::from_f64(1e-6));
    let logits = logits.div(&tau)?;
    let logp = logits.sub(&logits.logsumexp_last(true)?)?; // [rows, F]
    let logp = logp.reshape(&[b, n, k, 4, f])?;
    let mask = mask.reshape(&[b, 1, 1, 4, f])?;
    Ok(logp.mul(&mask)?.sum_all().neg().scale(T::from_f64(1.0 / b as f64)))
}

/// Pool patterns over tokens and selections: [B, N, K, 4, D] values ->
/// per-slot vectors [B][4][D].
pub fn pooled_patterns(
    values: &[f64],
    b: usize,
    n: usize,
    k: usize,
    d: usize,
) -> Vec<Vec<Vec<f64>>> {
    let mut out = vec![vec![vec![0.0; d]; 4]; b];
    let scale = 1.0 / (n * k) as f64;
    for bi in 0..b {
        for j in 0..n {
            for ki in 0..k {
                for l in 0..4 {
                    let base = ((((bi * n) + j) * k + ki) * 4 + l) * d;
                    for di in 0..d {
                        out[bi][l][di] += values[base + di] * scale;
                    }
                }
            }
        }
    }
    out
}

/// Per-slot modality prediction: argmax over dictionary dot products.
pub fn predict_slots(pooled: &[Vec<Vec<f64>>], dict: &[f64], f: usize, d: usize) -> Vec<[usize; 4]> {
    pooled
        .iter()
        .map(|slots| {
            let mut labels = [0usize; 4];
            for (l, rep) in slots.iter().enumerate() {
                let logits: Vec<f64> = (0..f)
                    .map(|fi| {
                        (0..d)
                            .map(|di| rep[di] * dict[fi * d + di])
                            .sum::<f64>()
                    })
                    .collect();
                labels[l] = argmax(&logits);
            }
            labels
        })
        .collect()
}

/// Slot-level accuracy of predictions against instance metadata.
pub fn slot_accuracy(
    predictions: &[[usize; 4]],
    instances: &[&PuzzleInstance],
    l_meta: usize,
) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (pred, inst) in predictions.iter().zip(instances) {
        for (l, spec) in inst.metadata.iter().take(l_meta.min(4)).enumerate() {
            total += 1;
            if pred[l] == vocab_index(spec) {
                hits += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Accept iff every annotated slot is predicted exactly.
pub fn slots_match(pred: &[usize; 4], inst: &PuzzleInstance, l_meta: usize) -> bool {
    inst.metadata
        .iter()
        .take(l_meta.min(4))
        .enumerate()
        .all(|(l, spec)| pred[l] == vocab_index(spec))
}

/// Per-instance pooled representation for similarity analysis: slot vectors
/// concatenated.
pub fn concat_pooled(pooled: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    pooled
        .iter()
        .map(|slots| slots.iter().flatten().copied().collect())
        .collect()
}

/// Pairwise cosine similarity matrix.
pub fn similarity_matrix(reps: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = reps.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            m[i][j] = cosine(&reps[i], &reps[j]);
        }
    }
    m
}

/// Mean off-diagonal similarity within groups sharing a partition label.
pub fn intra_group_mean(matrix: &[Vec<f64>], labels: &[String]) -> f64 {
    let n = matrix.len();
    let mut acc = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i != j && labels[i] == labels[j] {
                acc += matrix[i][j];
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        acc / count as f64
    }
}

/// Pick each batch row's answer candidate out of the pattern tensor:
/// [B, C, N, K, 4, D] -> [B, N, K, 4, D]. `answers` are 0-based slots.
pub fn gather_answer_patterns<T: Scalar>(
    patterns: &Tensor<T>,
    answers: &[usize],
) -> Result<Tensor<T>> {
    let shape = patterns.shape().to_vec();
    let (b, c) = (shape[0], shape[1]);
    let rest: usize = shape[2..].iter().product();
    let flat = patterns.reshape(&[b * c, rest])?;
    let idx: Vec<usize> = answers.iter().enumerate().map(|(i, &a)| i * c + a).collect();
    let picked = flat.index_select(0, &idx)?;
    let mut pshape = vec![b];
    pshape.extend_from_slice(&shape[2..]);
    Ok(picked.reshape(&pshape)?)
}

pub struct DiegoModel {
    pub dio: DioModel,
    pub head: DiegoHead,
}

impl DiegoModel {
    /// Pattern tensor values for the candidate in each instance's answer
    /// slot (or a spliced candidate raster).
    pub fn answer_patterns<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        instances: &[&PuzzleInstance],
    ) -> Result<Tensor<T>> {
        let images: Vec<&[u8]> = instances
            .iter()
            .flat_map(|inst| inst.images.iter().map(|i| i.as_slice()))
            .collect();
        let z = self.dio.features(g, store, &images)?;
        let out = self.dio.score_options(g, store, &z)?;
        let answers: Vec<usize> = instances
            .iter()
            .map(|inst| inst.answer as usize - 9)
            .collect();
        gather_answer_patterns(&out.patterns, &answers)
    }

    /// Predicted slot labels for a candidate raster spliced into the option
    /// slot of each instance's context.
    pub fn predict_for_candidate<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        inst: &PuzzleInstance,
        candidate: &[u8],
    ) -> Result<[usize; 4]> {
        let mut images: Vec<&[u8]> = inst.images[..8].iter().map(|i| i.as_slice()).collect();
        images.push(candidate);
        let cfg = &self.dio.cfg;
        let (data, shape) = patchify_images::<T>(&images, cfg.raster_size, cfg.patch);
        let patches = g.constant(data, &shape)?;
        let z = self.dio.fem.forward(g, store, &patches)?;
        let n = cfg.tokens();
        let z = z.reshape(&[1, 9, n, cfg.dim])?;
        let ctx = z.slice_axis(1, 0, 8)?;
        let cand = z.slice_axis(1, 8, 9)?;
        let out = self.dio.core.score_candidates(g, store, &ctx, &cand, cfg)?;
        let pshape = out.patterns.shape().to_vec(); // [1, 1, N, K, 4, D]
        let pooled = pooled_patterns(out.patterns.value_f64().as_slice(), 1, pshape[2], pshape[3], pshape[5]);
        let dict = store.get(self.head.dict);
        let dict64: Vec<f64> = dict.data.iter().map(|&v| Scalar::to_f64(v)).collect();
        Ok(predict_slots(&pooled, &dict64, self.head.vocab, pshape[5])[0])
    }

    /// Progressive-pattern verification of a generated raster: accept iff the
    /// predicted labels match the instance metadata on every annotated slot.
    pub fn verify_generated<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        inst: &PuzzleInstance,
        candidate: &[u8],
    ) -> Result<(bool, [usize; 4])> {
        let pred = self.predict_for_candidate::<T>(g, store, inst, candidate)?;
        Ok((slots_match(&pred, inst, self.head.l_meta), pred))
    }
}

fn patchify_images<T: Scalar>(
    images: &[&[u8]],
    raster: usize,
    patch: usize,
) -> (Vec<T>, Vec<usize>) {
    crate::extractor::patchify::<T>(images, raster, patch)
}
