//! A single-layer LSTM: step-level forward/backward plus a sequence driver
//! with full backpropagation through time.
//!
//! Gate preactivations are `x Wx + h_prev Wh + b` with the four gates packed
//! `[input | forget | cell | output]` along the last axis. Weight layouts
//! are `[in][4*units]` (`Wx`), `[units][4*units]` (`Wh`), `[4*units]` (`b`).

use super::ops::{activation_forward, Activation};
use super::{shape_err, Mat, Scalar, TensorError};

/// Borrowed weight bundle for one LSTM layer.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights<'a, T> {
    pub wx: &'a [T],
    pub wh: &'a [T],
    pub b: &'a [T],
    pub units: usize,
}

impl<'a, T: Scalar> LstmWeights<'a, T> {
    fn validate(&self, input_dim: usize) -> Result<(), TensorError> {
        let u4 = 4 * self.units;
        if self.wx.len() != input_dim * u4 || self.wh.len() != self.units * u4 || self.b.len() != u4
        {
            return Err(shape_err(format!(
                "lstm weights wx={} wh={} b={} for input_dim={input_dim} units={}",
                self.wx.len(),
                self.wh.len(),
                self.b.len(),
                self.units
            )));
        }
        Ok(())
    }
}

/// Cached activations for one step, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LstmStepTape<T> {
    x: Mat<T>,
    h_prev: Mat<T>,
    c_prev: Mat<T>,
    i: Mat<T>,
    f: Mat<T>,
    g: Mat<T>,
    o: Mat<T>,
    tanh_c: Mat<T>,
}

/// Output of one LSTM step.
#[derive(Debug, Clone)]
pub struct LstmStepOut<T> {
    pub h: Mat<T>,
    pub c: Mat<T>,
    pub tape: LstmStepTape<T>,
}

/// `out[r] += x Wrow` accumulation: for every row of `x`, add
/// `x[r][i] * w[i][..]` into the output row.
fn matmul_acc<T: Scalar>(x: &Mat<T>, w: &[T], out: &mut Mat<T>) {
    let cols = out.cols();
    for r in 0..x.rows() {
        let x_row = x.row(r);
        let out_row = out.row_mut(r);
        for (i, &xi) in x_row.iter().enumerate() {
            let w_row = &w[i * cols..(i + 1) * cols];
            for (o, &wv) in out_row.iter_mut().zip(w_row) {
                *o = xi.mul_add(wv, *o);
            }
        }
    }
}

/// One LSTM step over a batch of rows.
pub fn lstm_step<T: Scalar>(
    x: &Mat<T>,
    h_prev: &Mat<T>,
    c_prev: &Mat<T>,
    weights: LstmWeights<'_, T>,
) -> Result<LstmStepOut<T>, TensorError> {
    let units = weights.units;
    weights.validate(x.cols())?;
    let rows = x.rows();
    if h_prev.rows() != rows
        || c_prev.rows() != rows
        || h_prev.cols() != units
        || c_prev.cols() != units
    {
        return Err(shape_err(format!(
            "lstm state h {}x{} c {}x{} for batch {rows} units {units}",
            h_prev.rows(),
            h_prev.cols(),
            c_prev.rows(),
            c_prev.cols()
        )));
    }
    let u4 = 4 * units;
    let mut pre = Mat::zeros(rows, u4);
    for r in 0..rows {
        pre.row_mut(r).copy_from_slice(weights.b);
    }
    matmul_acc(x, weights.wx, &mut pre);
    matmul_acc(h_prev, weights.wh, &mut pre);

    let mut i = Mat::zeros(rows, units);
    let mut f = Mat::zeros(rows, units);
    let mut g = Mat::zeros(rows, units);
    let mut o = Mat::zeros(rows, units);
    for r in 0..rows {
        let p = pre.row(r);
        i.row_mut(r).copy_from_slice(&p[0..units]);
        f.row_mut(r).copy_from_slice(&p[units..2 * units]);
        g.row_mut(r).copy_from_slice(&p[2 * units..3 * units]);
        o.row_mut(r).copy_from_slice(&p[3 * units..4 * units]);
    }
    activation_forward(Activation::Sigmoid, i.values_mut());
    activation_forward(Activation::Sigmoid, f.values_mut());
    activation_forward(Activation::Tanh, g.values_mut());
    activation_forward(Activation::Sigmoid, o.values_mut());

    let mut c = Mat::zeros(rows, units);
    for idx in 0..rows * units {
        c.values_mut()[idx] =
            f.values()[idx] * c_prev.values()[idx] + i.values()[idx] * g.values()[idx];
    }
    let mut tanh_c = c.clone();
    activation_forward(Activation::Tanh, tanh_c.values_mut());
    let mut h = Mat::zeros(rows, units);
    for idx in 0..rows * units {
        h.values_mut()[idx] = o.values()[idx] * tanh_c.values()[idx];
    }
    Ok(LstmStepOut {
        h,
        c,
        tape: LstmStepTape {
            x: x.clone(),
            h_prev: h_prev.clone(),
            c_prev: c_prev.clone(),
            i,
            f,
            g,
            o,
            tanh_c,
        },
    })
}

/// Gradients of one step with respect to inputs, state, and weights.
#[derive(Debug, Clone)]
pub struct LstmStepGrads<T> {
    pub x: Mat<T>,
    pub h_prev: Mat<T>,
    pub c_prev: Mat<T>,
    pub wx: Vec<T>,
    pub wh: Vec<T>,
    pub b: Vec<T>,
}

/// Backward through one step given upstream gradients on `h` and `c`.
pub fn lstm_step_backward<T: Scalar>(
    tape: &LstmStepTape<T>,
    weights: LstmWeights<'_, T>,
    grad_h: &Mat<T>,
    grad_c: &Mat<T>,
) -> Result<LstmStepGrads<T>, TensorError> {
    let units = weights.units;
    let input_dim = tape.x.cols();
    weights.validate(input_dim)?;
    let rows = tape.x.rows();
    if grad_h.rows() != rows || grad_h.cols() != units || grad_c.rows() != rows
        || grad_c.cols() != units
    {
        return Err(shape_err(format!(
            "lstm step grads {}x{} / {}x{} for batch {rows} units {units}",
            grad_h.rows(),
            grad_h.cols(),
            grad_c.rows(),
            grad_c.cols()
        )));
    }
    let one = T::one();
    let n = rows * units;
    // dc = grad_c + grad_h * o * (1 - tanh_c^2)
    let mut dc = vec![T::zero(); n];
    let mut dpre = Mat::zeros(rows, 4 * units);
    for idx in 0..n {
        let tc = tape.tanh_c.values()[idx];
        dc[idx] = grad_c.values()[idx]
            + grad_h.values()[idx] * tape.o.values()[idx] * (one - tc * tc);
    }
    for r in 0..rows {
        let p = dpre.row_mut(r);
        for u in 0..units {
            let idx = r * units + u;
            let (iv, fv, gv, ov) = (
                tape.i.values()[idx],
                tape.f.values()[idx],
                tape.g.values()[idx],
                tape.o.values()[idx],
            );
            let di = dc[idx] * gv;
            let df = dc[idx] * tape.c_prev.values()[idx];
            let dg = dc[idx] * iv;
            let do_ = grad_h.values()[idx] * tape.tanh_c.values()[idx];
            p[u] = di * iv * (one - iv);
            p[units + u] = df * fv * (one - fv);
            p[2 * units + u] = dg * (one - gv * gv);
            p[3 * units + u] = do_ * ov * (one - ov);
        }
    }
    // grad_c_prev = dc * f
    let mut grad_c_prev = Mat::zeros(rows, units);
    for idx in 0..n {
        grad_c_prev.values_mut()[idx] = dc[idx] * tape.f.values()[idx];
    }

    let u4 = 4 * units;
    let mut grad_wx = vec![T::zero(); input_dim * u4];
    let mut grad_wh = vec![T::zero(); units * u4];
    let mut grad_b = vec![T::zero(); u4];
    let mut grad_x = Mat::zeros(rows, input_dim);
    let mut grad_h_prev = Mat::zeros(rows, units);
    for r in 0..rows {
        let dp = dpre.row(r);
        for (acc, &d) in grad_b.iter_mut().zip(dp) {
            *acc += d;
        }
        let x_row = tape.x.row(r);
        for (i, &xi) in x_row.iter().enumerate() {
            let w_row = &weights.wx[i * u4..(i + 1) * u4];
            let gw_row = &mut grad_wx[i * u4..(i + 1) * u4];
            let mut acc = T::zero();
            for k in 0..u4 {
                gw_row[k] = xi.mul_add(dp[k], gw_row[k]);
                acc = w_row[k].mul_add(dp[k], acc);
            }
            grad_x.set(r, i, acc);
        }
        let h_row = tape.h_prev.row(r);
        for (i, &hi) in h_row.iter().enumerate() {
            let w_row = &weights.wh[i * u4..(i + 1) * u4];
            let gw_row = &mut grad_wh[i * u4..(i + 1) * u4];
            let mut acc = T::zero();
            for k in 0..u4 {
                gw_row[k] = hi.mul_add(dp[k], gw_row[k]);
                acc = w_row[k].mul_add(dp[k], acc);
            }
            grad_h_prev.set(r, i, acc);
        }
    }
    Ok(LstmStepGrads {
        x: grad_x,
        h_prev: grad_h_prev,
        c_prev: grad_c_prev,
        wx: grad_wx,
        wh: grad_wh,
        b: grad_b,
    })
}

/// Per-step tapes from a sequence forward pass.
#[derive(Debug, Clone)]
pub struct LstmTape<T> {
    steps: Vec<LstmStepTape<T>>,
    units: usize,
}

/// Run the LSTM over a sequence of inputs (zero initial state), returning
/// the hidden state after every step plus the tape for BPTT.
pub fn lstm_forward<T: Scalar>(
    xs: &[Mat<T>],
    weights: LstmWeights<'_, T>,
) -> Result<(Vec<Mat<T>>, LstmTape<T>), TensorError> {
    let first = xs
        .first()
        .ok_or_else(|| shape_err("lstm_forward on empty sequence".to_string()))?;
    let rows = first.rows();
    let units = weights.units;
    let mut h = Mat::zeros(rows, units);
    let mut c = Mat::zeros(rows, units);
    let mut hs = Vec::with_capacity(xs.len());
    let mut steps = Vec::with_capacity(xs.len());
    for x in xs {
        if x.rows() != rows {
            return Err(shape_err(format!(
                "lstm sequence rows {} then {}",
                rows,
                x.rows()
            )));
        }
        let out = lstm_step(x, &h, &c, weights)?;
        h = out.h.clone();
        c = out.c;
        hs.push(out.h);
        steps.push(out.tape);
    }
    Ok((hs, LstmTape { steps, units }))
}

/// Gradients from BPTT over a full sequence.
#[derive(Debug, Clone)]
pub struct LstmGrads<T> {
    pub xs: Vec<Mat<T>>,
    pub wx: Vec<T>,
    pub wh: Vec<T>,
    pub b: Vec<T>,
}

/// Backpropagate through time: `grad_hs[t]` is the upstream gradient on the
/// hidden state emitted at step `t`.
pub fn lstm_backward<T: Scalar>(
    tape: &LstmTape<T>,
    weights: LstmWeights<'_, T>,
    grad_hs: &[Mat<T>],
) -> Result<LstmGrads<T>, TensorError> {
    if grad_hs.len() != tape.steps.len() {
        return Err(shape_err(format!(
            "{} upstream gradients for {} steps",
            grad_hs.len(),
            tape.steps.len()
        )));
    }
    let units = tape.units;
    let input_dim = tape.steps[0].x.cols();
    let rows = tape.steps[0].x.rows();
    let u4 = 4 * units;
    let mut grads = LstmGrads {
        xs: Vec::with_capacity(tape.steps.len()),
        wx: vec![T::zero(); input_dim * u4],
        wh: vec![T::zero(); units * u4],
        b: vec![T::zero(); u4],
    };
    let mut dh_carry = Mat::zeros(rows, units);
    let mut dc_carry = Mat::zeros(rows, units);
    let mut xs_rev = Vec::with_capacity(tape.steps.len());
    for (t, step) in tape.steps.iter().enumerate().rev() {
        let mut dh = dh_carry.clone();
        for (a, &b) in dh.values_mut().iter_mut().zip(grad_hs[t].values()) {
            *a += b;
        }
        let sg = lstm_step_backward(step, weights, &dh, &dc_carry)?;
        for (a, &b) in grads.wx.iter_mut().zip(&sg.wx) {
            *a += b;
        }
        for (a, &b) in grads.wh.iter_mut().zip(&sg.wh) {
            *a += b;
        }
        for (a, &b) in grads.b.iter_mut().zip(&sg.b) {
            *a += b;
        }
        xs_rev.push(sg.x);
        dh_carry = sg.h_prev;
        dc_carry = sg.c_prev;
    }
    xs_rev.reverse();
    grads.xs = xs_rev;
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::{check_gradient, GradCheckConfig};
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-0.8..0.8)).collect()
    }

    #[test]
    fn step_matches_hand_rolled_gates() {
        // One unit, one row: verify against the scalar recurrence.
        let (x_v, h_v, c_v) = (0.3f64, -0.2, 0.4);
        let wx = vec![0.5, -0.3, 0.8, 0.1]; // [i f g o]
        let wh = vec![-0.6, 0.2, 0.4, 0.9];
        let b = vec![0.05, 1.0, -0.1, 0.2];
        let x = Mat::from_vec(1, 1, vec![x_v]).unwrap();
        let h = Mat::from_vec(1, 1, vec![h_v]).unwrap();
        let c = Mat::from_vec(1, 1, vec![c_v]).unwrap();
        let out = lstm_step(
            &x,
            &h,
            &c,
            LstmWeights {
                wx: &wx,
                wh: &wh,
                b: &b,
                units: 1,
            },
        )
        .unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i = sig(x_v * wx[0] + h_v * wh[0] + b[0]);
        let f = sig(x_v * wx[1] + h_v * wh[1] + b[1]);
        let g = (x_v * wx[2] + h_v * wh[2] + b[2]).tanh();
        let o = sig(x_v * wx[3] + h_v * wh[3] + b[3]);
        let c_new = f * c_v + i * g;
        let h_new = o * c_new.tanh();
        assert!((out.c.at(0, 0) - c_new).abs() < 1e-14);
        assert!((out.h.at(0, 0) - h_new).abs() < 1e-14);
    }

    #[test]
    fn step_gradients_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let cfg = GradCheckConfig::default();
        let (rows, input_dim, units) = (2, 3, 4);
        for trial in 0..20 {
            let x = Mat::from_vec(rows, input_dim, rand_vec(&mut rng, rows * input_dim)).unwrap();
            let h = Mat::from_vec(rows, units, rand_vec(&mut rng, rows * units)).unwrap();
            let c = Mat::from_vec(rows, units, rand_vec(&mut rng, rows * units)).unwrap();
            let wx = rand_vec(&mut rng, input_dim * 4 * units);
            let wh = rand_vec(&mut rng, units * 4 * units);
            let b = rand_vec(&mut rng, 4 * units);
            let probe_h = rand_vec(&mut rng, rows * units);
            let probe_c = rand_vec(&mut rng, rows * units);

            let loss = |xv: &[f64], hv: &[f64], cv: &[f64], wxv: &[f64], whv: &[f64], bv: &[f64]| {
                let out = lstm_step(
                    &Mat::from_vec(rows, input_dim, xv.to_vec()).unwrap(),
                    &Mat::from_vec(rows, units, hv.to_vec()).unwrap(),
                    &Mat::from_vec(rows, units, cv.to_vec()).unwrap(),
                    LstmWeights {
                        wx: wxv,
                        wh: whv,
                        b: bv,
                        units,
                    },
                )
                .unwrap();
                let lh: f64 = out.h.values().iter().zip(&probe_h).map(|(a, p)| a * p).sum();
                let lc: f64 = out.c.values().iter().zip(&probe_c).map(|(a, p)| a * p).sum();
                lh + lc
            };

            let weights = LstmWeights {
                wx: &wx,
                wh: &wh,
                b: &b,
                units,
            };
            let out = lstm_step(&x, &h, &c, weights).unwrap();
            let gh = Mat::from_vec(rows, units, probe_h.clone()).unwrap();
            let gc = Mat::from_vec(rows, units, probe_c.clone()).unwrap();
            let sg = lstm_step_backward(&out.tape, weights, &gh, &gc).unwrap();

            let checks: Vec<(&str, &[f64], Box<dyn Fn(&[f64]) -> f64>)> = vec![
                ("x", sg.x.values(), {
                    let (h, c, wx, wh, b) = (h.clone(), c.clone(), wx.clone(), wh.clone(), b.clone());
                    Box::new(move |v: &[f64]| loss(v, h.values(), c.values(), &wx, &wh, &b))
                }),
                ("h_prev", sg.h_prev.values(), {
                    let (x, c, wx, wh, b) = (x.clone(), c.clone(), wx.clone(), wh.clone(), b.clone());
                    Box::new(move |v: &[f64]| loss(x.values(), v, c.values(), &wx, &wh, &b))
                }),
                ("c_prev", sg.c_prev.values(), {
                    let (x, h, wx, wh, b) = (x.clone(), h.clone(), wx.clone(), wh.clone(), b.clone());
                    Box::new(move |v: &[f64]| loss(x.values(), h.values(), v, &wx, &wh, &b))
                }),
                ("wx", &sg.wx, {
                    let (x, h, c, wh, b) = (x.clone(), h.clone(), c.clone(), wh.clone(), b.clone());
                    Box::new(move |v: &[f64]| loss(x.values(), h.values(), c.values(), v, &wh, &b))
                }),
                ("wh", &sg.wh, {
                    let (x, h, c, wx, b) = (x.clone(), h.clone(), c.clone(), wx.clone(), b.clone());
                    Box::new(move |v: &[f64]| loss(x.values(), h.values(), c.values(), &wx, v, &b))
                }),
                ("b", &sg.b, {
                    let (x, h, c, wx, wh) = (x.clone(), h.clone(), c.clone(), wx.clone(), wh.clone());
                    Box::new(move |v: &[f64]| loss(x.values(), h.values(), c.values(), &wx, &wh, v))
                }),
            ];
            for (which, analytic, f) in checks {
                let x0: &[f64] = match which {
                    "x" => x.values(),
                    "h_prev" => h.values(),
                    "c_prev" => c.values(),
                    "wx" => &wx,
                    "wh" => &wh,
                    _ => &b,
                };
                let r = check_gradient(x0, analytic, f, &cfg, &mut rng);
                assert!(
                    r.max_rel_err < 1e-4,
                    "trial {trial} lstm step {which} rel err {}",
                    r.max_rel_err
                );
            }
        }
    }

    #[test]
    fn sequence_gradients_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let cfg = GradCheckConfig::default();
        let (rows, input_dim, units, steps) = (2, 3, 3, 5);
        for trial in 0..10 {
            let xs: Vec<Mat<f64>> = (0..steps)
                .map(|_| Mat::from_vec(rows, input_dim, rand_vec(&mut rng, rows * input_dim)).unwrap())
                .collect();
            let wx = rand_vec(&mut rng, input_dim * 4 * units);
            let wh = rand_vec(&mut rng, units * 4 * units);
            let b = rand_vec(&mut rng, 4 * units);
            // Probe every step's hidden output so BPTT paths all matter.
            let probes: Vec<Vec<f64>> = (0..steps).map(|_| rand_vec(&mut rng, rows * units)).collect();

            let loss = |xflat: &[f64], wxv: &[f64], whv: &[f64], bv: &[f64]| {
                let xs: Vec<Mat<f64>> = xflat
                    .chunks(rows * input_dim)
                    .map(|c| Mat::from_vec(rows, input_dim, c.to_vec()).unwrap())
                    .collect();
                let (hs, _) = lstm_forward(
                    &xs,
                    LstmWeights {
                        wx: wxv,
                        wh: whv,
                        b: bv,
                        units,
                    },
                )
                .unwrap();
                hs.iter()
                    .zip(&probes)
                    .map(|(h, p)| h.values().iter().zip(p).map(|(a, q)| a * q).sum::<f64>())
                    .sum()
            };

            let weights = LstmWeights {
                wx: &wx,
                wh: &wh,
                b: &b,
                units,
            };
            let (_, tape) = lstm_forward(&xs, weights).unwrap();
            let grad_hs: Vec<Mat<f64>> = probes
                .iter()
                .map(|p| Mat::from_vec(rows, units, p.clone()).unwrap())
                .collect();
            let grads = lstm_backward(&tape, weights, &grad_hs).unwrap();

            let xflat: Vec<f64> = xs.iter().flat_map(|m| m.values().to_vec()).collect();
            let gxflat: Vec<f64> = grads.xs.iter().flat_map(|m| m.values().to_vec()).collect();
            let r = check_gradient(&xflat, &gxflat, |v| loss(v, &wx, &wh, &b), &cfg, &mut rng);
            assert!(r.max_rel_err < 1e-4, "trial {trial} bptt x rel err {}", r.max_rel_err);
            let r = check_gradient(&wx, &grads.wx, |v| loss(&xflat, v, &wh, &b), &cfg, &mut rng);
            assert!(r.max_rel_err < 1e-4, "trial {trial} bptt wx rel err {}", r.max_rel_err);
            let r = check_gradient(&wh, &grads.wh, |v| loss(&xflat, &wx, v, &b), &cfg, &mut rng);
            assert!(r.max_rel_err < 1e-4, "trial {trial} bptt wh rel err {}", r.max_rel_err);
            let r = check_gradient(&b, &grads.b, |v| loss(&xflat, &wx, &wh, v), &cfg, &mut rng);
            assert!(r.max_rel_err < 1e-4, "trial {trial} bptt b rel err {}", r.max_rel_err);
        }
    }

    #[test]
    fn state_propagates_across_steps() {
        // A forget gate biased strongly open should carry cell state forward:
        // feeding zeros after a nonzero first input still yields nonzero h.
        let units = 2;
        let wx = vec![0.5; 4 * units];
        let wh = vec![0.0; units * 4 * units];
        let mut b = vec![0.0; 4 * units];
        for u in 0..units {
            b[units + u] = 3.0; // forget gate ~ open
        }
        let weights = LstmWeights {
            wx: &wx,
            wh: &wh,
            b: &b,
            units,
        };
        let xs = vec![
            Mat::from_vec(1, 1, vec![1.0f64]).unwrap(),
            Mat::from_vec(1, 1, vec![0.0]).unwrap(),
            Mat::from_vec(1, 1, vec![0.0]).unwrap(),
        ];
        let (hs, _) = lstm_forward(&xs, weights).unwrap();
        assert!(hs[2].at(0, 0).abs() > 0.05, "h = {}", hs[2].at(0, 0));
    }
}
