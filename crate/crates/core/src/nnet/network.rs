use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::layers::{self, Chw};
use super::tensor::{Scalar, Tensor};
use super::NnetError;
use crate::embeddings::EmbeddingVector;
use crate::imagecore::{PatchImage, RasterImage};

/// Architecture of the plain CNN: `len(block_channels)` blocks of
/// conv3×3 → ReLU → maxpool2×2, global average pooling, one affine head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_side: usize,
    pub block_channels: Vec<usize>,
    pub num_classes: usize,
}

impl NetworkSpec {
    pub const DEFAULT_BLOCKS: [usize; 4] = [8, 16, 32, 64];

    pub fn new(
        input_side: usize,
        block_channels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self, NnetError> {
        let spec = Self {
            input_side,
            block_channels,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Default 4-block network for the 7-way pretext task.
    pub fn pretext(input_side: usize) -> Result<Self, NnetError> {
        Self::new(input_side, Self::DEFAULT_BLOCKS.to_vec(), 7)
    }

    pub fn validate(&self) -> Result<(), NnetError> {
        let bad = |why: String| Err(NnetError::InvalidSpec(why));
        if self.block_channels.is_empty() || self.block_channels.contains(&0) {
            return bad("block_channels must be non-empty and positive".into());
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        let div = 1usize
            .checked_shl(self.block_channels.len() as u32)
            .unwrap_or(usize::MAX);
        if self.input_side == 0 || self.input_side % div != 0 {
            return bad(format!(
                "input_side {} not divisible by 2^{}",
                self.input_side,
                self.block_channels.len()
            ));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        *self.block_channels.last().unwrap()
    }
}

/// How the parameters were initialised.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InitRecord {
    pub scheme: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    /// `[c_out, c_in, 3, 3]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T = f32> {
    pub spec: NetworkSpec,
    pub convs: Vec<ConvParams<T>>,
    /// `[num_classes, embedding_dim]`
    pub head_weight: Tensor<T>,
    pub head_bias: Tensor<T>,
    pub init: InitRecord,
}

impl<T: Scalar> NetworkParams<T> {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let mut c_in = 3;
        let convs = spec
            .block_channels
            .iter()
            .map(|&c_out| {
                let p = ConvParams {
                    weight: Tensor::zeros(&[c_out, c_in, 3, 3]),
                    bias: Tensor::zeros(&[c_out]),
                };
                c_in = c_out;
                p
            })
            .collect();
        Self {
            spec: spec.clone(),
            convs,
            head_weight: Tensor::zeros(&[spec.num_classes, spec.embedding_dim()]),
            head_bias: Tensor::zeros(&[spec.num_classes]),
            init: InitRecord {
                scheme: "zeros".into(),
                seed: 0,
            },
        }
    }

    /// He-uniform: weights ~ U(±√(6 / fan_in)), biases zero.
    pub fn he_uniform(spec: &NetworkSpec, seed: u64) -> Self {
        let mut params = Self::zeros(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |t: &mut Tensor<T>, fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            for v in t.data_mut() {
                *v = T::lit(dist.sample(&mut rng));
            }
        };
        let mut c_in = 3;
        for conv in &mut params.convs {
            fill(&mut conv.weight, c_in * 9);
            c_in = conv.bias.len();
        }
        fill(&mut params.head_weight, spec.embedding_dim());
        params.init = InitRecord {
            scheme: "he-uniform".into(),
            seed,
        };
        params
    }

    /// Named tensors in canonical order: `block{i}.weight`, `block{i}.bias`, ..., `head.weight`, `head.bias`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * self.convs.len() + 2);
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("block{i}.weight"), &c.weight));
            out.push((format!("block{i}.bias"), &c.bias));
        }
        out.push(("head.weight".into(), &self.head_weight));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::with_capacity(2 * self.convs.len() + 2);
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        NetworkParams {
            spec: self.spec.clone(),
            convs: self
                .convs
                .iter()
                .map(|c| ConvParams {
                    weight: c.weight.cast(),
                    bias: c.bias.cast(),
                })
                .collect(),
            head_weight: self.head_weight.cast(),
            head_bias: self.head_bias.cast(),
            init: self.init.clone(),
        }
    }

    fn zeroed_like(&self) -> Self {
        let mut g = self.clone();
        g.tensors_mut().into_iter().for_each(|t| t.fill(T::zero()));
        g
    }

    fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.named_tensors()) {
            a.add_assign(b.1);
        }
    }
}

/// Scales 8-bit RGB to `[0, 1]` in CHW order.
pub fn raster_to_input<T: Scalar>(image: &RasterImage) -> Vec<T> {
    let hw = image.width() * image.height();
    let mut out = vec![T::zero(); 3 * hw];
    let scale = T::one() / T::lit(255.0);
    for (i, px) in image.pixels().chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * hw + i] = T::from_u8(px[c]).unwrap() * scale;
        }
    }
    out
}

struct BlockCache<T> {
    shape: Chw,
    cols: Vec<T>,
    activated: Vec<T>,
    argmax: Vec<usize>,
}

struct ForwardCache<T> {
    blocks: Vec<BlockCache<T>>,
    last: Chw,
    embedding: Vec<T>,
    logits: Vec<T>,
}

fn forward_one<T: Scalar>(params: &NetworkParams<T>, input: &[T], side: usize) -> ForwardCache<T> {
    let mut shape = Chw { c: 3, h: side, w: side };
    let mut x = input.to_vec();
    let mut blocks = Vec::with_capacity(params.convs.len());
    for conv in &params.convs {
        let mut cols = Vec::new();
        let mut y = layers::conv3x3_forward(&x, shape, conv.weight.data(), conv.bias.data(), &mut cols);
        layers::relu_forward(&mut y);
        let act_shape = Chw { c: conv.bias.len(), ..shape };
        let (pooled, argmax) = layers::maxpool2x2_forward(&y, act_shape);
        blocks.push(BlockCache {
            shape,
            cols,
            activated: y,
            argmax,
        });
        shape = Chw {
            c: act_shape.c,
            h: shape.h / 2,
            w: shape.w / 2,
        };
        x = pooled;
    }
    let embedding = layers::gap_forward(&x, shape);
    let logits = layers::affine_forward(&embedding, params.head_weight.data(), params.head_bias.data());
    ForwardCache {
        blocks,
        last: shape,
        embedding,
        logits,
    }
}

fn backward_one<T: Scalar>(
    params: &NetworkParams<T>,
    cache: &ForwardCache<T>,
    d_logits: &[T],
    grads: &mut NetworkParams<T>,
) {
    let d_emb = layers::affine_backward(
        d_logits,
        &cache.embedding,
        params.head_weight.data(),
        grads.head_weight.data_mut(),
        grads.head_bias.data_mut(),
    );
    let mut d_x = layers::gap_backward(&d_emb, cache.last);
    for (i, block) in cache.blocks.iter().enumerate().rev() {
        let act_shape = Chw {
            c: params.convs[i].bias.len(),
            ..block.shape
        };
        let mut d_act = layers::maxpool2x2_backward(&d_x, &block.argmax, act_shape.len());
        layers::relu_backward(&block.activated, &mut d_act);
        let g = &mut grads.convs[i];
        let d_in = layers::conv3x3_backward(
            &d_act,
            block.shape,
            params.convs[i].weight.data(),
            &block.cols,
            g.weight.data_mut(),
            g.bias.data_mut(),
            i > 0,
        );
        if let Some(d) = d_in {
            d_x = d;
        }
    }
}

fn check_batch<T: Scalar>(params: &NetworkParams<T>, batch: &Tensor<T>) -> Result<usize, NnetError> {
    let s = params.spec.input_side;
    match batch.shape() {
        [n, 3, h, w] if *h == s && *w == s => Ok(*n),
        other => Err(NnetError::ShapeMismatch(format!(
            "expected [N, 3, {s}, {s}], got {other:?}"
        ))),
    }
}

/// Batched inference. Returns `(logits [N, num_classes], embedding [N, embedding_dim])`.
pub fn forward<T: Scalar>(
    params: &NetworkParams<T>,
    batch: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>), NnetError> {
    let n = check_batch(params, batch)?;
    let side = params.spec.input_side;
    let outs: Vec<ForwardCache<T>> = (0..n)
        .into_par_iter()
        .map(|i| forward_one(params, batch.row(i), side))
        .collect();
    let k = params.spec.num_classes;
    let d = params.spec.embedding_dim();
    let mut logits = Vec::with_capacity(n * k);
    let mut emb = Vec::with_capacity(n * d);
    for o in outs {
        logits.extend(o.logits);
        emb.extend(o.embedding);
    }
    Ok((
        Tensor::from_vec(&[n, k], logits).unwrap(),
        Tensor::from_vec(&[n, d], emb).unwrap(),
    ))
}

/// Per-batch statistics from [`loss_and_grad`].
#[derive(Clone, Debug)]
pub struct BatchResult<T> {
    pub loss: T,
    pub correct: usize,
    pub grads: NetworkParams<T>,
}

/// Mean cross-entropy over the batch and its gradient w.r.t. every parameter.
///
/// Per-example work runs in parallel; the reduction is in example order so
/// the result does not depend on thread scheduling.
pub fn loss_and_grad<T: Scalar>(
    params: &NetworkParams<T>,
    batch: &Tensor<T>,
    labels: &[usize],
) -> Result<BatchResult<T>, NnetError> {
    let n = check_batch(params, batch)?;
    if labels.len() != n {
        return Err(NnetError::ShapeMismatch(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= params.spec.num_classes) {
        return Err(NnetError::LabelOutOfRange {
            label: bad,
            num_classes: params.spec.num_classes,
        });
    }
    let side = params.spec.input_side;
    let per_example: Vec<(T, bool, NetworkParams<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let cache = forward_one(params, batch.row(i), side);
            let (loss, d_logits) = layers::softmax_cross_entropy(&cache.logits, labels[i]);
            let correct = argmax(&cache.logits) == labels[i];
            let mut g = params.zeroed_like();
            backward_one(params, &cache, &d_logits, &mut g);
            (loss, correct, g)
        })
        .collect();

    let mut grads = params.zeroed_like();
    let mut loss = T::zero();
    let mut correct = 0;
    for (l, c, g) in &per_example {
        loss += *l;
        correct += *c as usize;
        grads.accumulate(g);
    }
    let inv = T::one() / T::from_usize(n).unwrap();
    grads.tensors_mut().into_iter().for_each(|t| t.scale(inv));
    Ok(BatchResult {
        loss: loss * inv,
        correct,
        grads,
    })
}

/// Loss only; used by finite-difference checks and evaluation.
pub fn batch_loss<T: Scalar>(
    params: &NetworkParams<T>,
    batch: &Tensor<T>,
    labels: &[usize],
) -> Result<T, NnetError> {
    let (logits, _) = forward(params, batch)?;
    let n = labels.len();
    let mut total = T::zero();
    for (i, &l) in labels.iter().enumerate() {
        if l >= params.spec.num_classes {
            return Err(NnetError::LabelOutOfRange {
                label: l,
                num_classes: params.spec.num_classes,
            });
        }
        total += layers::softmax_cross_entropy(logits.row(i), l).0;
    }
    Ok(total / T::from_usize(n).unwrap())
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn extract_embedding(
    params: &NetworkParams<f32>,
    patch: &PatchImage,
) -> Result<EmbeddingVector, NnetError> {
    if patch.side() != params.spec.input_side {
        return Err(NnetError::ShapeMismatch(format!(
            "patch side {} but network expects {}",
            patch.side(),
            params.spec.input_side
        )));
    }
    let input = raster_to_input::<f32>(patch.image());
    let cache = forward_one(params, &input, patch.side());
    Ok(EmbeddingVector::new(patch.id(), cache.embedding).expect("finite embedding"))
}

/// [`extract_embedding`] over many patches, in input order.
pub fn extract_embeddings(
    params: &NetworkParams<f32>,
    patches: &[PatchImage],
) -> Result<Vec<EmbeddingVector>, NnetError> {
    patches
        .par_iter()
        .map(|p| extract_embedding(params, p))
        .collect()
}

/// Stacks patches into a `[N, 3, S, S]` batch.
pub fn batch_from_rasters<'a, T: Scalar>(
    images: impl IntoIterator<Item = &'a RasterImage>,
) -> Tensor<T> {
    let mut data = Vec::new();
    let mut n = 0;
    let mut side = 0;
    for img in images {
        side = img.width();
        data.extend(raster_to_input::<T>(img));
        n += 1;
    }
    Tensor::from_vec(&[n, 3, side, side], data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::PatchOrigin;
    use rand::Rng;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec::new(8, vec![3, 4], 5).unwrap()
    }

    fn random_batch(n: usize, side: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3 * side * side).map(|_| rng.gen::<f64>()).collect();
        Tensor::from_vec(&[n, 3, side, side], data).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(NetworkSpec::new(12, vec![8, 16, 32], 7).is_err());
        assert!(NetworkSpec::new(16, vec![], 7).is_err());
        assert!(NetworkSpec::new(16, vec![4], 1).is_err());
        let s = NetworkSpec::pretext(128).unwrap();
        assert_eq!(s.embedding_dim(), 64);
    }

    #[test]
    fn zero_network_outputs_bias() {
        let spec = tiny_spec();
        let mut params = NetworkParams::<f32>::zeros(&spec);
        params.head_bias = Tensor::from_vec(&[5], vec![1.0, -2.0, 0.5, 0.0, 3.0]).unwrap();
        let batch = Tensor::zeros(&[2, 3, 8, 8]);
        let (logits, emb) = forward(&params, &batch).unwrap();
        assert!(emb.data().iter().all(|&v| v == 0.0));
        assert_eq!(logits.row(1), params.head_bias.data());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let params = NetworkParams::<f32>::he_uniform(&tiny_spec(), 4);
        let (logits, _) = forward(&params, &random_batch(3, 8, 1).cast()).unwrap();
        for i in 0..3 {
            let p = layers::softmax(logits.row(i));
            assert!((p.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn rejects_bad_shapes_and_labels() {
        let params = NetworkParams::<f64>::he_uniform(&tiny_spec(), 4);
        let batch = random_batch(2, 8, 1);
        assert!(matches!(
            loss_and_grad(&params, &batch, &[0, 5]),
            Err(NnetError::LabelOutOfRange { label: 5, .. })
        ));
        assert!(matches!(
            loss_and_grad(&params, &random_batch(2, 16, 1), &[0, 1]),
            Err(NnetError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn full_network_gradient_matches_finite_differences() {
        let spec = tiny_spec();
        let params = NetworkParams::<f64>::he_uniform(&spec, 21);
        let batch = random_batch(3, 8, 22);
        let labels = [0, 3, 4];
        let analytic = loss_and_grad(&params, &batch, &labels).unwrap().grads;
        let h = 1e-6;
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (ti, name) in names.iter().enumerate() {
            let len = params.named_tensors()[ti].1.len();
            for j in 0..len {
                let eval = |delta: f64| {
                    let mut p = params.clone();
                    p.tensors_mut()[ti].data_mut()[j] += delta;
                    batch_loss(&p, &batch, &labels).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.named_tensors()[ti].1.data()[j];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(rel <= 1e-3, "{name}[{j}]: analytic {a} vs fd {fd}");
            }
        }
    }

    #[test]
    fn embedding_is_deterministic() {
        let spec = NetworkSpec::pretext(16).unwrap();
        let params = NetworkParams::<f32>::he_uniform(&spec, 9);
        let img = RasterImage::from_fn(16, 16, |x, y| [(x * 13) as u8, (y * 7) as u8, 90]).unwrap();
        let patch = PatchImage::new(PatchOrigin::new("s", 0, 1), img).unwrap();
        let a = extract_embedding(&params, &patch).unwrap();
        let b = extract_embedding(&params, &patch).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 64);
        assert_eq!(a.patch_id, "s#r0c1");

        let zero = NetworkParams::<f32>::zeros(&spec);
        let black = PatchImage::new(PatchOrigin::new("s", 0, 0), RasterImage::filled(16, 16, [0; 3]).unwrap()).unwrap();
        assert!(extract_embedding(&zero, &black).unwrap().values.iter().all(|&v| v == 0.0));

        let wrong = PatchImage::new(PatchOrigin::new("s", 0, 0), RasterImage::filled(8, 8, [0; 3]).unwrap()).unwrap();
        assert!(matches!(extract_embedding(&params, &wrong), Err(NnetError::ShapeMismatch(_))));
    }
}
