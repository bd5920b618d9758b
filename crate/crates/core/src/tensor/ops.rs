//! Differentiable layer primitives: 3x3 same-padding convolution, 2x2 max
//! pooling, nearest-neighbor 2x upsampling, fully connected layers,
//! activations, and inverted dropout.
//!
//! All reductions run in a fixed order (16-lane partial sums folded in a
//! fixed tree), so results are bitwise reproducible while still leaving the
//! compiler free to vectorize.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{shape_err, Mat, Scalar, Tensor4, TensorError};

const LANES: usize = 16;

/// Fixed-order dot product: lane-parallel partial sums, then a fixed
/// reduction tree, then the scalar tail.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let ta = ca.remainder();
    let tb = cb.remainder();
    for (xa, xb) in ca.zip(cb) {
        for l in 0..LANES {
            lanes[l] = xa[l].mul_add(xb[l], lanes[l]);
        }
    }
    let mut acc = T::zero();
    for step in [8usize, 4, 2, 1] {
        if step < LANES {
            for l in 0..step {
                lanes[l] = lanes[l] + lanes[l + step];
            }
        }
    }
    for (xa, xb) in ta.iter().zip(tb) {
        acc = xa.mul_add(*xb, acc);
    }
    lanes[0] + acc
}

/// `out[i] += s * k[i]` over a contiguous slice.
#[inline]
fn axpy<T: Scalar>(s: T, k: &[T], out: &mut [T]) {
    for (o, &kv) in out.iter_mut().zip(k) {
        *o = s.mul_add(kv, *o);
    }
}

/// 3x3 convolution with stride 1 and zero padding, bias added per output
/// channel. Kernel layout is `[ky][kx][c_in][c_out]` with `c_out` innermost.
pub fn conv2d<T: Scalar>(
    input: &Tensor4<T>,
    kernel: &[T],
    bias: &[T],
    c_out: usize,
) -> Result<Tensor4<T>, TensorError> {
    let (n, h, w, c_in) = input.dims();
    if kernel.len() != 9 * c_in * c_out {
        return Err(shape_err(format!(
            "kernel length {} for 3x3 conv {c_in}->{c_out}",
            kernel.len()
        )));
    }
    if bias.len() != c_out {
        return Err(shape_err(format!(
            "bias length {} for {c_out} output channels",
            bias.len()
        )));
    }
    let mut out = Tensor4::zeros(n, h, w, c_out);
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let out_px = out.pixel_mut(b, y, x);
                out_px.copy_from_slice(bias);
                for ky in 0..3usize {
                    let yy = y + ky;
                    if yy < 1 || yy > h {
                        continue;
                    }
                    let yy = yy - 1;
                    for kx in 0..3usize {
                        let xx = x + kx;
                        if xx < 1 || xx > w {
                            continue;
                        }
                        let xx = xx - 1;
                        let in_px = input.pixel(b, yy, xx);
                        let tap = &kernel[(ky * 3 + kx) * c_in * c_out..];
                        for ci in 0..c_in {
                            let s = in_px[ci];
                            let krow = &tap[ci * c_out..(ci + 1) * c_out];
                            axpy(s, krow, out_px);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub struct Conv2dGrads<T> {
    pub input: Tensor4<T>,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

/// Gradients of [`conv2d`] with respect to input, kernel, and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    kernel: &[T],
    c_out: usize,
    grad_out: &Tensor4<T>,
) -> Result<Conv2dGrads<T>, TensorError> {
    let (n, h, w, c_in) = input.dims();
    if kernel.len() != 9 * c_in * c_out {
        return Err(shape_err(format!(
            "kernel length {} for 3x3 conv {c_in}->{c_out}",
            kernel.len()
        )));
    }
    if grad_out.dims() != (n, h, w, c_out) {
        return Err(shape_err(format!(
            "grad_out {:?} for conv output {:?}",
            grad_out.dims(),
            (n, h, w, c_out)
        )));
    }
    let mut grad_input = Tensor4::zeros(n, h, w, c_in);
    let mut grad_kernel = vec![T::zero(); kernel.len()];
    let mut grad_bias = vec![T::zero(); c_out];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let g_px = grad_out.pixel(b, y, x);
                axpy(T::one(), g_px, &mut grad_bias);
                for ky in 0..3usize {
                    let yy = y + ky;
                    if yy < 1 || yy > h {
                        continue;
                    }
                    let yy = yy - 1;
                    for kx in 0..3usize {
                        let xx = x + kx;
                        if xx < 1 || xx > w {
                            continue;
                        }
                        let xx = xx - 1;
                        let in_px = input.pixel(b, yy, xx);
                        let gi_px = grad_input.pixel_mut(b, yy, xx);
                        let tap_base = (ky * 3 + kx) * c_in * c_out;
                        for ci in 0..c_in {
                            let krow = &kernel[tap_base + ci * c_out..tap_base + (ci + 1) * c_out];
                            let gkrow =
                                &mut grad_kernel[tap_base + ci * c_out..tap_base + (ci + 1) * c_out];
                            axpy(in_px[ci], g_px, gkrow);
                            gi_px[ci] = gi_px[ci] + dot(g_px, krow);
                        }
                    }
                }
            }
        }
    }
    Ok(Conv2dGrads {
        input: grad_input,
        kernel: grad_kernel,
        bias: grad_bias,
    })
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, per output
/// element, the flat index of the winning input element (first occurrence in
/// row-major scan order wins ties).
pub fn maxpool2<T: Scalar>(input: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<u32>), TensorError> {
    let (n, h, w, c) = input.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err(format!("maxpool2 on odd dims {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor4::zeros(n, oh, ow, c);
    let mut argmax = vec![0u32; n * oh * ow * c];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0u32;
                    for dy in 0..2usize {
                        for dx in 0..2usize {
                            let iy = oy * 2 + dy;
                            let ix = ox * 2 + dx;
                            let flat = ((b * h + iy) * w + ix) * c + ch;
                            let v = input.values()[flat];
                            if v > best {
                                best = v;
                                best_idx = flat as u32;
                            }
                        }
                    }
                    out.set(b, oy, ox, ch, best);
                    argmax[((b * oh + oy) * ow + ox) * c + ch] = best_idx;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Scatter `grad_out` back through the recorded argmax positions.
pub fn maxpool2_backward<T: Scalar>(
    input_dims: (usize, usize, usize, usize),
    argmax: &[u32],
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>, TensorError> {
    let (n, h, w, c) = input_dims;
    if grad_out.dims() != (n, h / 2, w / 2, c) || argmax.len() != grad_out.len() {
        return Err(shape_err(format!(
            "maxpool2_backward grad {:?} / argmax {} for input {:?}",
            grad_out.dims(),
            argmax.len(),
            input_dims
        )));
    }
    let mut grad_input = Tensor4::zeros(n, h, w, c);
    let gi = grad_input.values_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.values()) {
        gi[idx as usize] = gi[idx as usize] + g;
    }
    Ok(grad_input)
}

/// Nearest-neighbor 2x upsampling: each input element fills a 2x2 block.
pub fn upsample2<T: Scalar>(input: &Tensor4<T>) -> Tensor4<T> {
    let (n, h, w, c) = input.dims();
    let mut out = Tensor4::zeros(n, h * 2, w * 2, c);
    for b in 0..n {
        for y in 0..h * 2 {
            let iy = y / 2;
            for x in 0..w * 2 {
                let src = input.pixel(b, iy, x / 2).to_vec();
                out.pixel_mut(b, y, x).copy_from_slice(&src);
            }
        }
    }
    out
}

/// Gradient of [`upsample2`]: sum each 2x2 output block back to its source.
pub fn upsample2_backward<T: Scalar>(grad_out: &Tensor4<T>) -> Result<Tensor4<T>, TensorError> {
    let (n, h2, w2, c) = grad_out.dims();
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(shape_err(format!("upsample2_backward on odd dims {h2}x{w2}")));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let mut grad_input = Tensor4::zeros(n, h, w, c);
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                for dy in 0..2usize {
                    for dx in 0..2usize {
                        let g_px = grad_out.pixel(b, y * 2 + dy, x * 2 + dx).to_vec();
                        axpy(T::one(), &g_px, grad_input.pixel_mut(b, y, x));
                    }
                }
            }
        }
    }
    Ok(grad_input)
}

/// Fully connected layer: `y = x W + b` with weights laid out
/// `[in][out]`, `out` innermost.
pub fn dense<T: Scalar>(
    x: &Mat<T>,
    weights: &[T],
    bias: &[T],
    out_dim: usize,
) -> Result<Mat<T>, TensorError> {
    let (rows, in_dim) = (x.rows(), x.cols());
    if weights.len() != in_dim * out_dim || bias.len() != out_dim {
        return Err(shape_err(format!(
            "dense weights {} bias {} for {in_dim}->{out_dim}",
            weights.len(),
            bias.len()
        )));
    }
    let mut y = Mat::zeros(rows, out_dim);
    for r in 0..rows {
        let x_row = x.row(r);
        let y_row = y.row_mut(r);
        y_row.copy_from_slice(bias);
        for (i, &xi) in x_row.iter().enumerate() {
            axpy(xi, &weights[i * out_dim..(i + 1) * out_dim], y_row);
        }
    }
    Ok(y)
}

pub struct DenseGrads<T> {
    pub input: Mat<T>,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// Gradients of [`dense`] with respect to input, weights, and bias.
pub fn dense_backward<T: Scalar>(
    x: &Mat<T>,
    weights: &[T],
    out_dim: usize,
    grad_out: &Mat<T>,
) -> Result<DenseGrads<T>, TensorError> {
    let (rows, in_dim) = (x.rows(), x.cols());
    if weights.len() != in_dim * out_dim {
        return Err(shape_err(format!(
            "dense weights {} for {in_dim}->{out_dim}",
            weights.len()
        )));
    }
    if grad_out.rows() != rows || grad_out.cols() != out_dim {
        return Err(shape_err(format!(
            "dense grad_out {}x{} for output {rows}x{out_dim}",
            grad_out.rows(),
            grad_out.cols()
        )));
    }
    let mut grad_x = Mat::zeros(rows, in_dim);
    let mut grad_w = vec![T::zero(); weights.len()];
    let mut grad_b = vec![T::zero(); out_dim];
    for r in 0..rows {
        let g_row = grad_out.row(r);
        axpy(T::one(), g_row, &mut grad_b);
        let x_row = x.row(r);
        let gx_row = grad_x.row_mut(r);
        for i in 0..in_dim {
            let w_row = &weights[i * out_dim..(i + 1) * out_dim];
            axpy(x_row[i], g_row, &mut grad_w[i * out_dim..(i + 1) * out_dim]);
            gx_row[i] = dot(g_row, w_row);
        }
    }
    Ok(DenseGrads {
        input: grad_x,
        weights: grad_w,
        bias: grad_b,
    })
}

/// Pointwise nonlinearities. Backward passes are computed from the forward
/// *output*, which is sufficient for all four kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
    Tanh,
}

pub fn activation_forward<T: Scalar>(act: Activation, data: &mut [T]) {
    match act {
        Activation::Linear => {}
        Activation::Relu => {
            for v in data {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
        Activation::Sigmoid => {
            for v in data {
                *v = T::one() / (T::one() + (-*v).exp());
            }
        }
        Activation::Tanh => {
            for v in data {
                *v = v.tanh();
            }
        }
    }
}

/// Multiply `grad` in place by the activation derivative, reconstructed from
/// the saved forward output `out`.
pub fn activation_backward<T: Scalar>(act: Activation, out: &[T], grad: &mut [T]) {
    match act {
        Activation::Linear => {}
        Activation::Relu => {
            for (g, &o) in grad.iter_mut().zip(out) {
                if o <= T::zero() {
                    *g = T::zero();
                }
            }
        }
        Activation::Sigmoid => {
            for (g, &o) in grad.iter_mut().zip(out) {
                *g = *g * o * (T::one() - o);
            }
        }
        Activation::Tanh => {
            for (g, &o) in grad.iter_mut().zip(out) {
                *g = *g * (T::one() - o * o);
            }
        }
    }
}

/// Draw a keep mask (1 = keep) for inverted dropout from a dedicated seeded
/// stream.
pub fn dropout_mask(len: usize, rate: f64, seed: u64) -> Result<Vec<u8>, TensorError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::BadArgument {
            msg: format!("dropout rate {rate} outside [0,1)"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..len)
        .map(|_| (rng.random::<f64>() >= rate) as u8)
        .collect())
}

/// Apply a fixed keep mask with inverted-dropout scaling `1/(1-rate)`.
pub fn dropout_forward<T: Scalar>(data: &mut [T], keep: &[u8], rate: f64) {
    let scale = T::from_f64(1.0 / (1.0 - rate));
    for (v, &k) in data.iter_mut().zip(keep) {
        *v = if k == 1 { *v * scale } else { T::zero() };
    }
}

/// Backward of [`dropout_forward`] for the same mask.
pub fn dropout_backward<T: Scalar>(grad: &mut [T], keep: &[u8], rate: f64) {
    dropout_forward(grad, keep, rate);
}

/// Inverted dropout. In training mode, zero each element with probability
/// `rate` and scale survivors by `1/(1-rate)`, returning the keep mask for
/// the backward pass; in inference mode the data passes through unchanged.
pub fn dropout<T: Scalar>(
    data: &mut [T],
    rate: f64,
    training: bool,
    seed: u64,
) -> Result<Option<Vec<u8>>, TensorError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::BadArgument {
            msg: format!("dropout rate {rate} outside [0,1)"),
        });
    }
    if !training || rate == 0.0 {
        return Ok(None);
    }
    let keep = dropout_mask(data.len(), rate, seed)?;
    dropout_forward(data, &keep, rate);
    Ok(Some(keep))
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::{check_gradient, GradCheckConfig};
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Reference convolution written as the plainest possible loop nest.
    fn conv2d_naive(
        input: &Tensor4<f64>,
        kernel: &[f64],
        bias: &[f64],
        c_out: usize,
    ) -> Tensor4<f64> {
        let (n, h, w, c_in) = input.dims();
        let mut out = Tensor4::zeros(n, h, w, c_out);
        for b in 0..n {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    for co in 0..c_out {
                        let mut acc = bias[co];
                        for ky in -1isize..=1 {
                            for kx in -1isize..=1 {
                                let (yy, xx) = (y + ky, x + kx);
                                if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                for ci in 0..c_in {
                                    let k = kernel[(((ky + 1) as usize * 3 + (kx + 1) as usize)
                                        * c_in
                                        + ci)
                                        * c_out
                                        + co];
                                    acc += input.at(b, yy as usize, xx as usize, ci) * k;
                                }
                            }
                        }
                        out.set(b, y as usize, x as usize, co, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let (n, h, w, c_in, c_out) = (2, 5, 4, 3, 6);
            let input =
                Tensor4::from_vec(n, h, w, c_in, rand_vec(&mut rng, n * h * w * c_in)).unwrap();
            let kernel = rand_vec(&mut rng, 9 * c_in * c_out);
            let bias = rand_vec(&mut rng, c_out);
            let fast = conv2d(&input, &kernel, &bias, c_out).unwrap();
            let slow = conv2d_naive(&input, &kernel, &bias, c_out);
            for (a, b) in fast.values().iter().zip(slow.values()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv2d_gradients_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = GradCheckConfig::default();
        for trial in 0..20 {
            let (n, h, w, c_in, c_out) = (1, 4, 4, 2, 3);
            let input =
                Tensor4::from_vec(n, h, w, c_in, rand_vec(&mut rng, n * h * w * c_in)).unwrap();
            let kernel = rand_vec(&mut rng, 9 * c_in * c_out);
            let bias = rand_vec(&mut rng, c_out);
            // Random linear functional of the output makes the loss scalar.
            let probe = rand_vec(&mut rng, n * h * w * c_out);

            let loss = |inp: &[f64], ker: &[f64], bi: &[f64]| {
                let t = Tensor4::from_vec(n, h, w, c_in, inp.to_vec()).unwrap();
                let out = conv2d(&t, ker, bi, c_out).unwrap();
                out.values().iter().zip(&probe).map(|(a, p)| a * p).sum()
            };

            let gprobe = Tensor4::from_vec(n, h, w, c_out, probe.clone()).unwrap();
            let grads = conv2d_backward(&input, &kernel, c_out, &gprobe).unwrap();

            let r1 = check_gradient(
                input.values(),
                grads.input.values(),
                |v| loss(v, &kernel, &bias),
                &cfg,
                &mut rng,
            );
            let r2 = check_gradient(
                &kernel,
                &grads.kernel,
                |v| loss(input.values(), v, &bias),
                &cfg,
                &mut rng,
            );
            let r3 = check_gradient(
                &bias,
                &grads.bias,
                |v| loss(input.values(), &kernel, v),
                &cfg,
                &mut rng,
            );
            for (which, r) in [("input", r1), ("kernel", r2), ("bias", r3)] {
                assert!(
                    r.max_rel_err < 1e-4,
                    "trial {trial} conv {which} grad rel err {}",
                    r.max_rel_err
                );
            }
        }
    }

    #[test]
    fn maxpool_forward_and_backward() {
        let input = Tensor4::from_vec(
            1,
            2,
            4,
            1,
            vec![1.0f64, 5.0, 2.0, 2.0, 3.0, 4.0, 2.0, 0.0],
        )
        .unwrap();
        let (out, argmax) = maxpool2(&input).unwrap();
        assert_eq!(out.values(), &[5.0, 2.0]);
        // 2.0 appears three times in the second window; the first in scan
        // order (index 2) must win.
        assert_eq!(argmax, vec![1, 2]);
        let g = Tensor4::from_vec(1, 1, 2, 1, vec![10.0, 20.0]).unwrap();
        let gi = maxpool2_backward((1, 2, 4, 1), &argmax, &g).unwrap();
        assert_eq!(gi.values(), &[0.0, 10.0, 20.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_gradient_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = GradCheckConfig::default();
        for _ in 0..20 {
            let (n, h, w, c) = (1, 4, 4, 2);
            let input = Tensor4::from_vec(n, h, w, c, rand_vec(&mut rng, n * h * w * c)).unwrap();
            let probe = rand_vec(&mut rng, n * (h / 2) * (w / 2) * c);
            let loss = |v: &[f64]| {
                let t = Tensor4::from_vec(n, h, w, c, v.to_vec()).unwrap();
                let (out, _) = maxpool2(&t).unwrap();
                out.values().iter().zip(&probe).map(|(a, p)| a * p).sum()
            };
            let (_, argmax) = maxpool2(&input).unwrap();
            let gprobe = Tensor4::from_vec(n, h / 2, w / 2, c, probe.clone()).unwrap();
            let gi = maxpool2_backward((n, h, w, c), &argmax, &gprobe).unwrap();
            let r = check_gradient(input.values(), gi.values(), loss, &cfg, &mut rng);
            assert!(r.max_rel_err < 1e-4, "maxpool grad rel err {}", r.max_rel_err);
        }
    }

    #[test]
    fn upsample_forward_and_gradient() {
        let input = Tensor4::from_vec(1, 1, 2, 1, vec![3.0f64, 7.0]).unwrap();
        let out = upsample2(&input);
        assert_eq!(out.values(), &[3.0, 3.0, 7.0, 7.0, 3.0, 3.0, 7.0, 7.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cfg = GradCheckConfig::default();
        for _ in 0..20 {
            let (n, h, w, c) = (2, 3, 2, 2);
            let input = Tensor4::from_vec(n, h, w, c, rand_vec(&mut rng, n * h * w * c)).unwrap();
            let probe = rand_vec(&mut rng, n * h * 2 * w * 2 * c);
            let loss = |v: &[f64]| {
                let t = Tensor4::from_vec(n, h, w, c, v.to_vec()).unwrap();
                upsample2(&t)
                    .values()
                    .iter()
                    .zip(&probe)
                    .map(|(a, p)| a * p)
                    .sum()
            };
            let gprobe = Tensor4::from_vec(n, h * 2, w * 2, c, probe.clone()).unwrap();
            let gi = upsample2_backward(&gprobe).unwrap();
            let r = check_gradient(input.values(), gi.values(), loss, &cfg, &mut rng);
            assert!(r.max_rel_err < 1e-4, "upsample grad rel err {}", r.max_rel_err);
        }
    }

    #[test]
    fn dense_matches_naive_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let cfg = GradCheckConfig::default();
        for _ in 0..20 {
            let (rows, in_dim, out_dim) = (3, 5, 4);
            let x = Mat::from_vec(rows, in_dim, rand_vec(&mut rng, rows * in_dim)).unwrap();
            let w = rand_vec(&mut rng, in_dim * out_dim);
            let b = rand_vec(&mut rng, out_dim);
            let y = dense(&x, &w, &b, out_dim).unwrap();
            for r in 0..rows {
                for o in 0..out_dim {
                    let mut acc = b[o];
                    for i in 0..in_dim {
                        acc += x.at(r, i) * w[i * out_dim + o];
                    }
                    assert!((y.at(r, o) - acc).abs() < 1e-12);
                }
            }

            let probe = rand_vec(&mut rng, rows * out_dim);
            let loss = |xv: &[f64], wv: &[f64], bv: &[f64]| {
                let xm = Mat::from_vec(rows, in_dim, xv.to_vec()).unwrap();
                let y = dense(&xm, wv, bv, out_dim).unwrap();
                y.values().iter().zip(&probe).map(|(a, p)| a * p).sum()
            };
            let gprobe = Mat::from_vec(rows, out_dim, probe.clone()).unwrap();
            let grads = dense_backward(&x, &w, out_dim, &gprobe).unwrap();
            let r1 = check_gradient(x.values(), grads.input.values(), |v| loss(v, &w, &b), &cfg, &mut rng);
            let r2 = check_gradient(&w, &grads.weights, |v| loss(x.values(), v, &b), &cfg, &mut rng);
            let r3 = check_gradient(&b, &grads.bias, |v| loss(x.values(), &w, v), &cfg, &mut rng);
            for (which, r) in [("input", r1), ("weights", r2), ("bias", r3)] {
                assert!(
                    r.max_rel_err < 1e-4,
                    "dense {which} grad rel err {}",
                    r.max_rel_err
                );
            }
        }
    }

    #[test]
    fn activation_values_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let cfg = GradCheckConfig::default();
        for act in [
            Activation::Linear,
            Activation::Relu,
            Activation::Sigmoid,
            Activation::Tanh,
        ] {
            for _ in 0..20 {
                // Keep ReLU probes away from the kink at zero.
                let x: Vec<f64> = (0..12)
                    .map(|_| {
                        let v: f64 = rng.random_range(-2.0..2.0);
                        if v.abs() < 0.05 {
                            v + 0.1
                        } else {
                            v
                        }
                    })
                    .collect();
                let probe = rand_vec(&mut rng, x.len());
                let loss = |v: &[f64]| {
                    let mut y = v.to_vec();
                    activation_forward(act, &mut y);
                    y.iter().zip(&probe).map(|(a, p)| a * p).sum()
                };
                let mut out = x.clone();
                activation_forward(act, &mut out);
                let mut grad = probe.clone();
                activation_backward(act, &out, &mut grad);
                let r = check_gradient(&x, &grad, loss, &cfg, &mut rng);
                assert!(
                    r.max_rel_err < 1e-4,
                    "{act:?} grad rel err {}",
                    r.max_rel_err
                );
            }
        }
    }

    #[test]
    fn sigmoid_and_tanh_reference_values() {
        let mut v = vec![0.0f64, 2.0, -2.0];
        activation_forward(Activation::Sigmoid, &mut v);
        assert!((v[0] - 0.5).abs() < 1e-15);
        assert!((v[1] - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
        let mut t = vec![0.5f64];
        activation_forward(Activation::Tanh, &mut t);
        assert!((t[0] - 0.5f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn dropout_inference_is_identity_and_training_scales() {
        let x: Vec<f32> = (0..1000).map(|i| i as f32 * 0.01 + 1.0).collect();
        let mut pass = x.clone();
        assert!(dropout(&mut pass, 0.3, false, 5).unwrap().is_none());
        assert_eq!(pass, x);

        let mut train = x.clone();
        let keep = dropout(&mut train, 0.3, true, 5).unwrap().unwrap();
        let kept = keep.iter().filter(|&&k| k == 1).count();
        // Keep fraction concentrates near 0.7 for 1000 draws.
        assert!((kept as f64 / 1000.0 - 0.7).abs() < 0.08, "kept {kept}");
        for ((&t, &orig), &k) in train.iter().zip(&x).zip(&keep) {
            if k == 1 {
                assert!((t - orig / 0.7).abs() < 1e-5);
            } else {
                assert_eq!(t, 0.0);
            }
        }

        // Same seed, same mask; different seed, different mask.
        let again = dropout_mask(1000, 0.3, 5).unwrap();
        assert_eq!(again, keep);
        assert_ne!(dropout_mask(1000, 0.3, 6).unwrap(), keep);

        assert!(matches!(
            dropout(&mut train, 1.0, true, 5),
            Err(TensorError::BadArgument { .. })
        ));
    }

    #[test]
    fn dropout_fixed_mask_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let cfg = GradCheckConfig::default();
        for trial in 0..20 {
            let x = rand_vec(&mut rng, 16);
            let keep = dropout_mask(16, 0.25, trial).unwrap();
            let probe = rand_vec(&mut rng, 16);
            let loss = |v: &[f64]| {
                let mut y = v.to_vec();
                dropout_forward(&mut y, &keep, 0.25);
                y.iter().zip(&probe).map(|(a, p)| a * p).sum()
            };
            let mut grad = probe.clone();
            dropout_backward(&mut grad, &keep, 0.25);
            let r = check_gradient(&x, &grad, loss, &cfg, &mut rng);
            assert!(r.max_rel_err < 1e-4, "dropout grad rel err {}", r.max_rel_err);
        }
    }

    #[test]
    fn fixed_order_dot_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for len in [1usize, 7, 16, 33, 128] {
            let a = rand_vec(&mut rng, len);
            let b = rand_vec(&mut rng, len);
            let fast = dot(&a, &b);
            let slow: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert!((fast - slow).abs() < 1e-12 * (1.0 + slow.abs()));
        }
    }
}
