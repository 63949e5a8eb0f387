//! Single-example layer kernels in CHW layout, each with its backward pass.
//!
//! Every function here is deterministic and allocation-explicit; batching and
//! parallelism live one level up in [`super::network`].

use super::tensor::Scalar;

/// Shape of a CHW activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Chw {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Chw {
    pub fn len(self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

/// Unfolds 3×3 neighbourhoods (zero padding 1) into a `[c*9, h*w]` matrix.
pub fn im2col3x3<T: Scalar>(input: &[T], s: Chw, cols: &mut Vec<T>) {
    let hw = s.h * s.w;
    cols.clear();
    cols.resize(s.c * 9 * hw, T::zero());
    for ci in 0..s.c {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..s.h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= s.h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * s.w..][..s.w];
                    let dst = &mut row[y * s.w..][..s.w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..s.w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..s.w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3x3`]: accumulates column gradients back onto the input.
pub fn col2im3x3<T: Scalar>(cols: &[T], s: Chw, out: &mut [T]) {
    let hw = s.h * s.w;
    out.iter_mut().for_each(|v| *v = T::zero());
    for ci in 0..s.c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..s.h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= s.h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * s.w..][..s.w];
                    let src = &row[y * s.w..][..s.w];
                    match kx {
                        0 => dst[..s.w - 1]
                            .iter_mut()
                            .zip(&src[1..])
                            .for_each(|(d, &v)| *d += v),
                        1 => dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v),
                        _ => dst[1..]
                            .iter_mut()
                            .zip(&src[..s.w - 1])
                            .for_each(|(d, &v)| *d += v),
                    }
                }
            }
        }
    }
}

/// 3×3 convolution, stride 1, zero padding 1. `weight` is `[c_out, c_in, 3, 3]`.
///
/// Returns the output `[c_out, h, w]`; `cols` keeps the unfolded input for
/// the backward pass.
pub fn conv3x3_forward<T: Scalar>(
    input: &[T],
    s: Chw,
    weight: &[T],
    bias: &[T],
    cols: &mut Vec<T>,
) -> Vec<T> {
    let c_out = bias.len();
    let hw = s.h * s.w;
    im2col3x3(input, s, cols);
    let mut out = vec![T::zero(); c_out * hw];
    for (o, &b) in bias.iter().enumerate() {
        out[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = b);
    }
    T::gemm(c_out, s.c * 9, hw, weight, false, cols, false, &mut out, true);
    out
}

/// Backward of [`conv3x3_forward`]. Accumulates into `d_weight`/`d_bias`;
/// returns the input gradient when `need_input` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward<T: Scalar>(
    d_out: &[T],
    s: Chw,
    weight: &[T],
    cols: &[T],
    d_weight: &mut [T],
    d_bias: &mut [T],
    need_input: bool,
) -> Option<Vec<T>> {
    let c_out = d_bias.len();
    let hw = s.h * s.w;
    let k = s.c * 9;
    for (o, db) in d_bias.iter_mut().enumerate() {
        *db += d_out[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
    }
    T::gemm(c_out, hw, k, d_out, false, cols, true, d_weight, true);
    if !need_input {
        return None;
    }
    let mut d_cols = vec![T::zero(); k * hw];
    T::gemm(k, c_out, hw, weight, true, d_out, false, &mut d_cols, false);
    let mut d_in = vec![T::zero(); s.len()];
    col2im3x3(&d_cols, s, &mut d_in);
    Some(d_in)
}

pub fn relu_forward<T: Scalar>(x: &mut [T]) {
    x.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Masks `grad` where the forward output was not positive.
pub fn relu_backward<T: Scalar>(output: &[T], grad: &mut [T]) {
    for (g, &y) in grad.iter_mut().zip(output) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2×2 max-pool, stride 2. Returns pooled values and, per output cell, the
/// flat input index that won (first maximum on ties).
pub fn maxpool2x2_forward<T: Scalar>(input: &[T], s: Chw) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(s.c * oh * ow);
    let mut idx = Vec::with_capacity(s.c * oh * ow);
    for c in 0..s.c {
        let base = c * s.h * s.w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * s.w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * s.w + 2 * x + dx;
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                out.push(input[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

pub fn maxpool2x2_backward<T: Scalar>(d_out: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
    let mut d_in = vec![T::zero(); input_len];
    for (&g, &i) in d_out.iter().zip(argmax) {
        d_in[i] += g;
    }
    d_in
}

/// Global average pool: `[c, h, w]` → `[c]`.
pub fn gap_forward<T: Scalar>(input: &[T], s: Chw) -> Vec<T> {
    let hw = s.h * s.w;
    let inv = T::one() / T::from_usize(hw).unwrap();
    input
        .chunks_exact(hw)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect()
}

pub fn gap_backward<T: Scalar>(d_out: &[T], s: Chw) -> Vec<T> {
    let hw = s.h * s.w;
    let inv = T::one() / T::from_usize(hw).unwrap();
    d_out
        .iter()
        .flat_map(|&g| std::iter::repeat(g * inv).take(hw))
        .collect()
}

/// `y = W x + b` with `W` stored `[out, in]`.
pub fn affine_forward<T: Scalar>(x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let mut y = bias.to_vec();
    T::gemm(bias.len(), x.len(), 1, weight, false, x, false, &mut y, true);
    y
}

/// Accumulates parameter gradients and returns `dL/dx`.
pub fn affine_backward<T: Scalar>(
    d_y: &[T],
    x: &[T],
    weight: &[T],
    d_weight: &mut [T],
    d_bias: &mut [T],
) -> Vec<T> {
    let (out, inp) = (d_y.len(), x.len());
    for (db, &g) in d_bias.iter_mut().zip(d_y) {
        *db += g;
    }
    T::gemm(out, 1, inp, d_y, false, x, false, d_weight, true);
    let mut d_x = vec![T::zero(); inp];
    T::gemm(inp, out, 1, weight, true, d_y, false, &mut d_x, false);
    d_x
}

/// Numerically stable softmax of one logit row.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy of one row against `label`; returns `(loss, dL/dlogits)`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let log_z = logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
    let loss = log_z - logits[label];
    let mut grad = softmax(logits);
    grad[label] -= T::one();
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    // Every check below projects the layer output onto a fixed random
    // direction so the scalar objective exercises all output entries.

    fn check_input_grad(
        n_in: usize,
        f: impl Fn(&[f64]) -> Vec<f64>,
        analytic: impl Fn(&[f64], &[f64]) -> Vec<f64>,
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(n_in, &mut rng);
        let probe = random(f(&x).len(), &mut rng);
        let obj = |x: &[f64]| f(x).iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>();
        let grad = analytic(&x, &probe);
        let h = 1e-3;
        for i in 0..n_in {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (obj(&xp) - obj(&xm)) / (2.0 * h);
            assert!(rel_err(grad[i], fd) <= 1e-3, "entry {i}: {} vs {fd}", grad[i]);
        }
    }

    #[test]
    fn im2col_identity_kernel_reproduces_input() {
        let s = Chw { c: 1, h: 4, w: 5 };
        let x: Vec<f64> = (0..20).map(|v| v as f64).collect();
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let mut cols = Vec::new();
        assert_eq!(conv3x3_forward(&x, s, &w, &[0.0], &mut cols), x);

        let constant = vec![0.7; 20];
        assert_eq!(conv3x3_forward(&constant, s, &w, &[0.0], &mut cols), constant);
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Chw { c: 2, h: 5, w: 4 };
        let x = random(s.len(), &mut rng);
        let w = random(3 * 2 * 9, &mut rng);
        let b = random(3, &mut rng);
        let mut cols = Vec::new();
        let out = conv3x3_forward(&x, s, &w, &b, &mut cols);
        for o in 0..3 {
            for y in 0..s.h {
                for xx in 0..s.w {
                    let mut acc = b[o];
                    for c in 0..s.c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as isize + ky - 1, xx as isize + kx - 1);
                                if sy >= 0 && sx >= 0 && (sy as usize) < s.h && (sx as usize) < s.w {
                                    acc += w[((o * 2 + c) * 3 + ky as usize) * 3 + kx as usize]
                                        * x[(c * s.h + sy as usize) * s.w + sx as usize];
                                }
                            }
                        }
                    }
                    assert!((out[(o * s.h + y) * s.w + xx] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_input_and_weight_gradients() {
        let s = Chw { c: 2, h: 4, w: 6 };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random(3 * 2 * 9, &mut rng);
        let b = random(3, &mut rng);
        check_input_grad(
            s.len(),
            |x| conv3x3_forward(x, s, &w, &b, &mut Vec::new()),
            |x, probe| {
                let mut cols = Vec::new();
                conv3x3_forward(x, s, &w, &b, &mut cols);
                let (mut dw, mut db) = (vec![0.0; w.len()], vec![0.0; 3]);
                conv3x3_backward(probe, s, &w, &cols, &mut dw, &mut db, true).unwrap()
            },
            1,
        );

        let x = random(s.len(), &mut rng);
        check_input_grad(
            w.len() + b.len(),
            |wb| conv3x3_forward(&x, s, &wb[..54], &wb[54..], &mut Vec::new()),
            |wb, probe| {
                let mut cols = Vec::new();
                conv3x3_forward(&x, s, &wb[..54], &wb[54..], &mut cols);
                let (mut dw, mut db) = (vec![0.0; 54], vec![0.0; 3]);
                conv3x3_backward(probe, s, &wb[..54], &cols, &mut dw, &mut db, false);
                [dw, db].concat()
            },
            2,
        );
    }

    #[test]
    fn relu_pool_gap_gradients() {
        let s = Chw { c: 2, h: 4, w: 4 };
        check_input_grad(
            s.len(),
            |x| {
                let mut y = x.to_vec();
                relu_forward(&mut y);
                y
            },
            |x, probe| {
                let mut y = x.to_vec();
                relu_forward(&mut y);
                let mut g = probe.to_vec();
                relu_backward(&y, &mut g);
                g
            },
            4,
        );
        check_input_grad(
            s.len(),
            |x| maxpool2x2_forward(x, s).0,
            |x, probe| {
                let (_, idx) = maxpool2x2_forward(x, s);
                maxpool2x2_backward(probe, &idx, s.len())
            },
            5,
        );
        check_input_grad(s.len(), |x| gap_forward(x, s), |_, probe| gap_backward(probe, s), 6);
    }

    #[test]
    fn affine_and_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = random(4 * 5, &mut rng);
        let b = random(4, &mut rng);
        check_input_grad(
            5,
            |x| affine_forward(x, &w, &b),
            |x, probe| {
                let (mut dw, mut db) = (vec![0.0; 20], vec![0.0; 4]);
                affine_backward(probe, x, &w, &mut dw, &mut db)
            },
            9,
        );
        let x = random(5, &mut rng);
        check_input_grad(
            24,
            |wb| affine_forward(&x, &wb[..20], &wb[20..]),
            |wb, probe| {
                let (mut dw, mut db) = (vec![0.0; 20], vec![0.0; 4]);
                affine_backward(probe, &x, &wb[..20], &mut dw, &mut db);
                [dw, db].concat()
            },
            10,
        );
        check_input_grad(
            7,
            |z| vec![softmax_cross_entropy(z, 3).0],
            |z, probe| softmax_cross_entropy(z, 3).1.iter().map(|g| g * probe[0]).collect(),
            12,
        );
    }

    #[test]
    fn softmax_rows_are_simplex() {
        let p = softmax(&[1000.0f32, -3.0, 2.5, 0.0]);
        assert!(p.iter().all(|&v| v >= 0.0));
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_reference_points() {
        let (loss, _) = softmax_cross_entropy(&[0.0f64; 7], 2);
        assert!((loss - 7f64.ln()).abs() < 1e-12);
        let (loss, _) = softmax_cross_entropy(&[0.0f64, 1000.0, 0.0], 1);
        assert_eq!(loss, 0.0);
    }
}
