//! Forward and backward passes for the two windowed architectures.
//!
//! Both push every window step through a shared convolutional trunk
//! (conv 32 + pool, conv 64 + pool), flatten, and run an LSTM across the
//! window. Each step's hidden state is then projected back to a pooled
//! feature plane and decoded to full resolution:
//!
//! `cnn_lstm`: dropout on the hidden state, dense to a 32-channel plane,
//! upsample, conv 32, upsample, conv to the output bands.
//!
//! `autoencoder_lstm`: dropout 0.3, dense to a 64-channel plane, upsample,
//! conv 64, upsample, conv 32, then conv to the output bands.

use super::{ModelError, ModelKind, ModelSpec};
use crate::tensor::{
    activation_backward, activation_forward, conv2d, conv2d_backward, dense, dense_backward,
    dropout_backward, dropout_forward, dropout_mask, lstm_backward, lstm_forward, maxpool2,
    maxpool2_backward, upsample2, upsample2_backward, Activation, LstmTape, LstmWeights, Mat,
    ParamSet, Scalar, Tensor4, TensorError,
};

fn shape_mismatch(context: String) -> TensorError {
    TensorError::ShapeMismatch { context }
}

mod ix {
    pub const T1K: usize = 0;
    pub const T1B: usize = 1;
    pub const T2K: usize = 2;
    pub const T2B: usize = 3;
    pub const WX: usize = 4;
    pub const WH: usize = 5;
    pub const LB: usize = 6;
    pub const PW: usize = 7;
    pub const PB: usize = 8;
    pub const D1K: usize = 9;
    pub const D1B: usize = 10;
    // cnn_lstm: output conv follows dec1; autoencoder_lstm inserts dec2.
    pub const CL_OK: usize = 11;
    pub const CL_OB: usize = 12;
    pub const AE_D2K: usize = 11;
    pub const AE_D2B: usize = 12;
    pub const AE_OK: usize = 13;
    pub const AE_OB: usize = 14;
}

struct TrunkTape<T> {
    x: Tensor4<T>,
    t1: Tensor4<T>,
    am1: Vec<u32>,
    q1: Tensor4<T>,
    t2: Tensor4<T>,
    am2: Vec<u32>,
    q2_dims: (usize, usize, usize, usize),
}

struct HeadTape<T> {
    keep: Vec<u8>,
    hd: Mat<T>,
    z: Mat<T>,
    u1: Tensor4<T>,
    d1: Tensor4<T>,
    u2: Tensor4<T>,
    d2: Option<Tensor4<T>>,
}

/// Saved activations from a training-mode temporal forward pass.
pub struct TemporalTape<T> {
    trunks: Vec<TrunkTape<T>>,
    lstm: LstmTape<T>,
    heads: Vec<HeadTape<T>>,
}

fn step_seed(seed: u64, t: usize) -> u64 {
    seed.wrapping_add((t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Decoder plane channels after the hidden-state projection.
fn plane_channels(kind: ModelKind) -> usize {
    match kind {
        ModelKind::CnnLstm => 32,
        ModelKind::AutoencoderLstm => 64,
        _ => unreachable!("temporal kinds only"),
    }
}

/// Run a temporal model over one window (one tensor per step). `train`
/// carries the dropout seed; `None` means inference.
pub fn forward_temporal<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamSet<T>,
    xs: &[Tensor4<T>],
    train: Option<u64>,
) -> Result<(Vec<Tensor4<T>>, Option<TemporalTape<T>>), ModelError> {
    use ix::*;
    if !spec.kind.is_temporal() {
        return Err(ModelError::WrongInputArity {
            expected: "temporal kind",
            got: spec.kind.name(),
        });
    }
    if xs.len() != spec.timesteps {
        return Err(shape_mismatch(format!(
            "{} window steps where {} expected",
            xs.len(),
            spec.timesteps
        ))
        .into());
    }
    let (n, h, w, _) = xs[0].dims();
    let (ph, pw_) = (h / 4, w / 4);
    let c_dec = plane_channels(spec.kind);

    // Shared trunk per step, then the LSTM across steps.
    let mut feats = Vec::with_capacity(xs.len());
    let mut trunks = Vec::with_capacity(xs.len());
    for x in xs {
        if x.dims() != (n, h, w, spec.in_channels) {
            return Err(shape_mismatch(format!(
                "window step {:?} where {:?} expected",
                x.dims(),
                (n, h, w, spec.in_channels)
            ))
            .into());
        }
        let mut t1 = conv2d(x, params.data(T1K), params.data(T1B), 32)?;
        activation_forward(Activation::Relu, t1.values_mut());
        let (q1, am1) = maxpool2(&t1)?;
        let mut t2 = conv2d(&q1, params.data(T2K), params.data(T2B), 64)?;
        activation_forward(Activation::Relu, t2.values_mut());
        let (q2, am2) = maxpool2(&t2)?;
        feats.push(q2.flatten_rows());
        trunks.push(TrunkTape {
            x: x.clone(),
            t1,
            am1,
            q1,
            t2,
            am2,
            q2_dims: q2.dims(),
        });
    }
    let weights = LstmWeights {
        wx: params.data(WX),
        wh: params.data(WH),
        b: params.data(LB),
        units: spec.lstm_units,
    };
    let (hs, lstm_tape) = lstm_forward(&feats, weights)?;

    // Per-step head: dropout, project, reshape, decode.
    let plane = ph * pw_ * c_dec;
    let mut outputs = Vec::with_capacity(xs.len());
    let mut heads = Vec::with_capacity(xs.len());
    for (t, h_t) in hs.iter().enumerate() {
        let mut hd = h_t.clone();
        let keep = match train {
            Some(seed) => {
                let keep = dropout_mask(hd.values().len(), spec.dropout_rate, step_seed(seed, t))?;
                dropout_forward(hd.values_mut(), &keep, spec.dropout_rate);
                keep
            }
            None => Vec::new(),
        };
        let mut z = dense(&hd, params.data(PW), params.data(PB), plane)?;
        activation_forward(Activation::Relu, z.values_mut());
        let r = Tensor4::from_mat(&z, ph, pw_, c_dec)?;
        let u1 = upsample2(&r);
        let (d1_c, d1_act) = match spec.kind {
            ModelKind::CnnLstm => (32, Activation::Relu),
            _ => (64, Activation::Relu),
        };
        let mut d1 = conv2d(&u1, params.data(D1K), params.data(D1B), d1_c)?;
        activation_forward(d1_act, d1.values_mut());
        let u2 = upsample2(&d1);
        let (y, d2) = match spec.kind {
            ModelKind::CnnLstm => {
                let y = conv2d(&u2, params.data(CL_OK), params.data(CL_OB), spec.out_channels)?;
                (y, None)
            }
            _ => {
                let mut d2 = conv2d(&u2, params.data(AE_D2K), params.data(AE_D2B), 32)?;
                activation_forward(Activation::Relu, d2.values_mut());
                let y = conv2d(&d2, params.data(AE_OK), params.data(AE_OB), spec.out_channels)?;
                (y, Some(d2))
            }
        };
        outputs.push(y);
        heads.push(HeadTape {
            keep,
            hd,
            z,
            u1,
            d1,
            u2,
            d2,
        });
    }
    let tape = train.map(|_| TemporalTape {
        trunks,
        lstm: lstm_tape,
        heads,
    });
    Ok((outputs, tape))
}

fn acc<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Backpropagate a temporal model given one upstream gradient per window
/// step, returning parameter gradients aligned with the parameter set.
pub fn backward_temporal<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamSet<T>,
    tape: &TemporalTape<T>,
    grad_outs: &[Tensor4<T>],
) -> Result<ParamSet<T>, ModelError> {
    use ix::*;
    if grad_outs.len() != tape.heads.len() {
        return Err(shape_mismatch(format!(
            "{} upstream gradients for {} window steps",
            grad_outs.len(),
            tape.heads.len()
        ))
        .into());
    }
    let mut grads = params.zeros_like();
    let c_dec = plane_channels(spec.kind);

    // Heads first: collect the gradient flowing into each hidden state.
    let mut grad_hs = Vec::with_capacity(tape.heads.len());
    for (t, head) in tape.heads.iter().enumerate() {
        let g_u2_input = match spec.kind {
            ModelKind::CnnLstm => {
                let go = conv2d_backward(
                    &head.u2,
                    params.data(CL_OK),
                    spec.out_channels,
                    &grad_outs[t],
                )?;
                acc(grads.data_mut(CL_OK), &go.kernel);
                acc(grads.data_mut(CL_OB), &go.bias);
                go.input
            }
            _ => {
                let d2 = head.d2.as_ref().expect("autoencoder head saves dec2");
                let go = conv2d_backward(d2, params.data(AE_OK), spec.out_channels, &grad_outs[t])?;
                acc(grads.data_mut(AE_OK), &go.kernel);
                acc(grads.data_mut(AE_OB), &go.bias);
                let mut g = go.input;
                activation_backward(Activation::Relu, d2.values(), g.values_mut());
                let gd2 = conv2d_backward(&head.u2, params.data(AE_D2K), 32, &g)?;
                acc(grads.data_mut(AE_D2K), &gd2.kernel);
                acc(grads.data_mut(AE_D2B), &gd2.bias);
                gd2.input
            }
        };
        let mut g = upsample2_backward(&g_u2_input)?;
        activation_backward(Activation::Relu, head.d1.values(), g.values_mut());
        let d1_c = if spec.kind == ModelKind::CnnLstm { 32 } else { 64 };
        let gd1 = conv2d_backward(&head.u1, params.data(D1K), d1_c, &g)?;
        acc(grads.data_mut(D1K), &gd1.kernel);
        acc(grads.data_mut(D1B), &gd1.bias);
        let g_r = upsample2_backward(&gd1.input)?;
        let mut g_z = g_r.flatten_rows();
        debug_assert_eq!(g_z.cols(), head.z.cols());
        activation_backward(Activation::Relu, head.z.values(), g_z.values_mut());
        let plane = g_z.cols();
        let gd = dense_backward(&head.hd, params.data(PW), plane, &g_z)?;
        acc(grads.data_mut(PW), &gd.weights);
        acc(grads.data_mut(PB), &gd.bias);
        let mut g_h = gd.input;
        if !head.keep.is_empty() {
            dropout_backward(g_h.values_mut(), &head.keep, spec.dropout_rate);
        }
        grad_hs.push(g_h);
    }
    let _ = c_dec;

    // Through the LSTM.
    let weights = LstmWeights {
        wx: params.data(WX),
        wh: params.data(WH),
        b: params.data(LB),
        units: spec.lstm_units,
    };
    let lstm_grads = lstm_backward(&tape.lstm, weights, &grad_hs)?;
    acc(grads.data_mut(WX), &lstm_grads.wx);
    acc(grads.data_mut(WH), &lstm_grads.wh);
    acc(grads.data_mut(LB), &lstm_grads.b);

    // Down the shared trunk for every step.
    for (trunk, g_feat) in tape.trunks.iter().zip(&lstm_grads.xs) {
        let (qn, qh, qw, qc) = trunk.q2_dims;
        let g_q2 = Tensor4::from_mat(g_feat, qh, qw, qc)?;
        debug_assert_eq!(g_q2.n(), qn);
        let mut g = maxpool2_backward(trunk.t2.dims(), &trunk.am2, &g_q2)?;
        activation_backward(Activation::Relu, trunk.t2.values(), g.values_mut());
        let gt2 = conv2d_backward(&trunk.q1, params.data(T2K), 64, &g)?;
        acc(grads.data_mut(T2K), &gt2.kernel);
        acc(grads.data_mut(T2B), &gt2.bias);
        let mut g = maxpool2_backward(trunk.t1.dims(), &trunk.am1, &gt2.input)?;
        activation_backward(Activation::Relu, trunk.t1.values(), g.values_mut());
        let gt1 = conv2d_backward(&trunk.x, params.data(T1K), 32, &g)?;
        acc(grads.data_mut(T1K), &gt1.kernel);
        acc(grads.data_mut(T1B), &gt1.bias);
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::super::{build_model, ModelKind, ModelSpec};
    use super::*;
    use crate::tensor::{check_gradient, GradCheckConfig};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec(kind: ModelKind) -> ModelSpec {
        ModelSpec {
            kind,
            height: 8,
            width: 8,
            in_channels: 2,
            out_channels: 2,
            lstm_units: 3,
            dropout_rate: 0.25,
            timesteps: 3,
        }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, c: usize) -> Tensor4<f64> {
        let data = (0..n * h * w * c)
            .map(|_| rng.random_range(-0.6..0.6))
            .collect();
        Tensor4::from_vec(n, h, w, c, data).unwrap()
    }

    #[test]
    fn output_shapes_and_window_length() {
        for kind in [ModelKind::CnnLstm, ModelKind::AutoencoderLstm] {
            let spec = ModelSpec::new(kind, 16, 16).unwrap();
            let params = build_model(&spec, 2);
            let xs: Vec<Tensor4<f32>> = (0..5).map(|_| Tensor4::zeros(2, 16, 16, 9)).collect();
            let (ys, tape) = forward_temporal(&spec, &params, &xs, None).unwrap();
            assert_eq!(ys.len(), 5, "{kind}");
            for y in &ys {
                assert_eq!(y.dims(), (2, 16, 16, 8));
            }
            assert!(tape.is_none());
            // Wrong window length is rejected.
            assert!(forward_temporal(&spec, &params, &xs[..3], None).is_err());
        }
    }

    #[test]
    fn temporal_state_influences_later_predictions() {
        let spec = ModelSpec::new(ModelKind::CnnLstm, 16, 16).unwrap();
        let params = build_model(&spec, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let xs: Vec<Tensor4<f32>> = (0..5)
            .map(|_| rand_tensor(&mut rng, 1, 16, 16, 9).map_into(|v| v as f32))
            .collect();
        let (ys, _) = forward_temporal(&spec, &params, &xs, None).unwrap();
        // Perturb only the first frame: the last step's prediction must move,
        // proving state flows through the recurrence.
        let mut xs2 = xs.clone();
        let bumped = xs2[0].map_into(|v| v + 0.2);
        xs2[0] = bumped;
        let (ys2, _) = forward_temporal(&spec, &params, &xs2, None).unwrap();
        let diff: f32 = ys[4]
            .values()
            .iter()
            .zip(ys2[4].values())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-3, "last-step outputs identical: {diff}");
    }

    #[test]
    fn whole_model_gradients_pass_finite_differences() {
        // A finer step than the per-op default: in a deep composite the
        // probability that some ReLU pre-activation sits within the step's
        // reach of zero (a kink the central difference straddles) grows with
        // depth, and 64-bit precision leaves ample headroom at 1e-6.
        let cfg = GradCheckConfig {
            max_probes: 40,
            step: 1e-6,
            ..GradCheckConfig::default()
        };
        for kind in [ModelKind::CnnLstm, ModelKind::AutoencoderLstm] {
            let spec = tiny_spec(kind);
            let params64: ParamSet<f64> = build_model(&spec, 21).cast();
            let mut rng = ChaCha8Rng::seed_from_u64(321);
            let xs: Vec<Tensor4<f64>> = (0..spec.timesteps)
                .map(|_| rand_tensor(&mut rng, 1, spec.height, spec.width, spec.in_channels))
                .collect();
            let probes: Vec<Tensor4<f64>> = (0..spec.timesteps)
                .map(|_| rand_tensor(&mut rng, 1, spec.height, spec.width, spec.out_channels))
                .collect();
            let dropout_seed = 17u64;

            let loss = |flat: &[f64]| {
                let mut p = params64.clone();
                p.assign_flat(flat).unwrap();
                let (ys, _) = forward_temporal(&spec, &p, &xs, Some(dropout_seed)).unwrap();
                ys.iter()
                    .zip(&probes)
                    .map(|(y, pr)| {
                        y.values()
                            .iter()
                            .zip(pr.values())
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                    })
                    .sum()
            };

            let (_, tape) = forward_temporal(&spec, &params64, &xs, Some(dropout_seed)).unwrap();
            let grads = backward_temporal(&spec, &params64, &tape.unwrap(), &probes).unwrap();
            let r = check_gradient(&params64.flatten(), &grads.flatten(), loss, &cfg, &mut rng);
            let mut worst = String::from("?");
            let mut off = 0;
            for e in params64.entries() {
                if r.worst_index < off + e.data.len() {
                    worst = format!("{}[{}]", e.name, r.worst_index - off);
                    break;
                }
                off += e.data.len();
            }
            assert!(
                r.max_rel_err < 1e-4,
                "{kind} whole-model grad rel err {} at {worst}",
                r.max_rel_err
            );
        }
    }
}
