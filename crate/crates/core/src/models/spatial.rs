//! Forward and backward passes for the two single-image architectures.
//!
//! `cnn`: four full-resolution 3x3 convolutions (32, 64, 128, out) with ReLU
//! between and dropout after the second block.
//!
//! `autoencoder_cnn`: a two-level encoder (32, 64 with 2x2 pooling), a 128-
//! channel bottleneck with dropout, and a mirrored decoder using nearest-
//! neighbor upsampling.

use super::{ModelError, ModelKind, ModelSpec};
use crate::tensor::{
    activation_backward, activation_forward, conv2d, conv2d_backward, dropout_backward,
    dropout_forward, dropout_mask, maxpool2, maxpool2_backward, upsample2, upsample2_backward,
    Activation, ParamSet, Scalar, Tensor4,
};

// Entry indices fixed by construction order in `build_model`.
mod cnn_ix {
    pub const C1K: usize = 0;
    pub const C1B: usize = 1;
    pub const C2K: usize = 2;
    pub const C2B: usize = 3;
    pub const C3K: usize = 4;
    pub const C3B: usize = 5;
    pub const C4K: usize = 6;
    pub const C4B: usize = 7;
}

mod ae_ix {
    pub const E1K: usize = 0;
    pub const E1B: usize = 1;
    pub const E2K: usize = 2;
    pub const E2B: usize = 3;
    pub const BNK: usize = 4;
    pub const BNB: usize = 5;
    pub const D1K: usize = 6;
    pub const D1B: usize = 7;
    pub const D2K: usize = 8;
    pub const D2B: usize = 9;
    pub const OK: usize = 10;
    pub const OB: usize = 11;
}

fn conv_relu<T: Scalar>(
    x: &Tensor4<T>,
    params: &ParamSet<T>,
    k: usize,
    b: usize,
    c_out: usize,
    act: Activation,
) -> Result<Tensor4<T>, ModelError> {
    let mut out = conv2d(x, params.data(k), params.data(b), c_out)?;
    activation_forward(act, out.values_mut());
    Ok(out)
}

/// Saved activations from a training-mode spatial forward pass.
pub struct SpatialTape<T> {
    x: Tensor4<T>,
    acts: Vec<Tensor4<T>>,
    argmaxes: Vec<Vec<u32>>,
    keep: Vec<u8>,
}

/// Run a spatial model forward. `train` carries the dropout seed; `None`
/// means inference (dropout off, no tape).
pub fn forward_spatial<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamSet<T>,
    x: &Tensor4<T>,
    train: Option<u64>,
) -> Result<(Tensor4<T>, Option<SpatialTape<T>>), ModelError> {
    match spec.kind {
        ModelKind::Cnn => forward_cnn(spec, params, x, train),
        ModelKind::AutoencoderCnn => forward_ae(spec, params, x, train),
        other => Err(ModelError::WrongInputArity {
            expected: "spatial kind",
            got: other.name(),
        }),
    }
}

fn forward_cnn<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamSet<T>,
    x: &Tensor4<T>,
    train: Option<u64>,
) -> Result<(Tensor4<T>, Option<SpatialTape<T>>), ModelError> {
    use cnn_ix::*;
    let a1 = conv_relu(x, params, C1K, C1B, 32, Activation::Relu)?;
    let a2 = conv_relu(&a1, params, C2K, C2B, 64, Activation::Relu)?;
    let mut d2 = a2.clone();
    let keep = match train {
        Some(seed) => {
            let keep = dropout_mask(d2.len(), spec.dropout_rate, seed)?;
            dropout_forward(d2.values_mut(), &keep, spec.dropout_rate);
            keep
        }
        None => Vec::new(),
    };
    let a3 = conv_relu(&d2, params, C3K, C3B, 128, Activation::Relu)?;
    let y = conv_relu(&a3, params, C4K, C4B, spec.out_channels, Activation::Linear)?;
    let tape = train.map(|_| SpatialTape {
        x: x.clone(),
        acts: vec![a1, a2, d2, a3],
        argmaxes: Vec::new(),
        keep,
    });
    Ok((y, tape))
}

fn forward_ae<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamSet<T>,
    x: &Tensor4<T>,
    train: Option<u64>,
) -> Result<(Tensor4<T>, Option<SpatialTape<T>>), ModelError> {
    use ae_ix::*;
    let e1 = conv_relu(x, params, E1K, E1B, 32, Activation::Relu)?;
    let (p1, am1) = maxpool2(&e1)?;
    let e2 = conv_relu(&p1, params, E2K, E2B, 64, Activation::Relu)?;
    let (p2, am2) = maxpool2(&e2)?;
    let bn = conv_relu(&p2, params, BNK, BNB, 128, Activation::Relu)?;
    let mut db = bn.clone();
    let keep = match train {
        Some(seed) => {
            let keep = dropout_mask(db.len(), spec.dropout_rate, seed)?;
            dropout_forward(db.values_mut(), &keep, spec.dropout_rate);
            keep
        }
        None => Vec::new(),
    };
    let u1 = upsample2(&db);
    let d1 = conv_relu(&u1, params, D1K, D1B, 64, Activation::Relu)?;
    let u2 = upsample2(&d1);
    let d2 = conv_relu(&u2, params, D2K, D2B, 32, Activation::Relu)?;
    let y = conv_relu(&d2, params, OK, OB, spec.out_channels, Activation::Linear)?;
    let tape = train.map(|_| SpatialTape {
        x: x.clone(),
        acts: vec![e1, p1, e2, p2, bn, u1, d1, u2, d2],
        argmaxes: vec![am1, am2],
        keep,
    });
    Ok((y, tape))
}

/// Backpropagate a spatial model, returning parameter gradients aligned with
/// the parameter set.
pub fn backward_spatial<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamSet<T>,
    tape: &SpatialTape<T>,
    grad_out: &Tensor4<T>,
) -> Result<ParamSet<T>, ModelError> {
    match spec.kind {
        ModelKind::Cnn => backward_cnn(spec, params, tape, grad_out),
        ModelKind::AutoencoderCnn => backward_ae(spec, params, tape, grad_out),
        other => Err(ModelError::WrongInputArity {
            expected: "spatial kind",
            got: other.name(),
        }),
    }
}

fn backward_cnn<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamSet<T>,
    tape: &SpatialTape<T>,
    grad_out: &Tensor4<T>,
) -> Result<ParamSet<T>, ModelError> {
    use cnn_ix::*;
    let mut grads = params.zeros_like();
    let [a1, a2, d2, a3] = match tape.acts.as_slice() {
        [a, b, c, d] => [a, b, c, d],
        _ => unreachable!("cnn tape holds four activations"),
    };
    let g4 = conv2d_backward(a3, params.data(C4K), spec.out_channels, grad_out)?;
    grads.data_mut(C4K).copy_from_slice(&g4.kernel);
    grads.data_mut(C4B).copy_from_slice(&g4.bias);
    let mut g = g4.input;
    activation_backward(Activation::Relu, a3.values(), g.values_mut());

    let g3 = conv2d_backward(d2, params.data(C3K), 128, &g)?;
    grads.data_mut(C3K).copy_from_slice(&g3.kernel);
    grads.data_mut(C3B).copy_from_slice(&g3.bias);
    let mut g = g3.input;
    if !tape.keep.is_empty() {
        dropout_backward(g.values_mut(), &tape.keep, spec.dropout_rate);
    }
    activation_backward(Activation::Relu, a2.values(), g.values_mut());

    let g2 = conv2d_backward(a1, params.data(C2K), 64, &g)?;
    grads.data_mut(C2K).copy_from_slice(&g2.kernel);
    grads.data_mut(C2B).copy_from_slice(&g2.bias);
    let mut g = g2.input;
    activation_backward(Activation::Relu, a1.values(), g.values_mut());

    let g1 = conv2d_backward(&tape.x, params.data(C1K), 32, &g)?;
    grads.data_mut(C1K).copy_from_slice(&g1.kernel);
    grads.data_mut(C1B).copy_from_slice(&g1.bias);
    Ok(grads)
}

fn backward_ae<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamSet<T>,
    tape: &SpatialTape<T>,
    grad_out: &Tensor4<T>,
) -> Result<ParamSet<T>, ModelError> {
    use ae_ix::*;
    let mut grads = params.zeros_like();
    let [e1, p1, e2, p2, bn, u1, d1, u2, d2] = match tape.acts.as_slice() {
        [a, b, c, d, e, f, g, h, i] => [a, b, c, d, e, f, g, h, i],
        _ => unreachable!("autoencoder tape holds nine activations"),
    };
    let [am1, am2] = match tape.argmaxes.as_slice() {
        [a, b] => [a, b],
        _ => unreachable!("autoencoder tape holds two pooling argmaxes"),
    };

    let go = conv2d_backward(d2, params.data(OK), spec.out_channels, grad_out)?;
    grads.data_mut(OK).copy_from_slice(&go.kernel);
    grads.data_mut(OB).copy_from_slice(&go.bias);
    let mut g = go.input;
    activation_backward(Activation::Relu, d2.values(), g.values_mut());

    let gd2 = conv2d_backward(u2, params.data(D2K), 32, &g)?;
    grads.data_mut(D2K).copy_from_slice(&gd2.kernel);
    grads.data_mut(D2B).copy_from_slice(&gd2.bias);
    let mut g = upsample2_backward(&gd2.input)?;
    activation_backward(Activation::Relu, d1.values(), g.values_mut());

    let gd1 = conv2d_backward(u1, params.data(D1K), 64, &g)?;
    grads.data_mut(D1K).copy_from_slice(&gd1.kernel);
    grads.data_mut(D1B).copy_from_slice(&gd1.bias);
    let mut g = upsample2_backward(&gd1.input)?;
    if !tape.keep.is_empty() {
        dropout_backward(g.values_mut(), &tape.keep, spec.dropout_rate);
    }
    activation_backward(Activation::Relu, bn.values(), g.values_mut());

    let gbn = conv2d_backward(p2, params.data(BNK), 128, &g)?;
    grads.data_mut(BNK).copy_from_slice(&gbn.kernel);
    grads.data_mut(BNB).copy_from_slice(&gbn.bias);
    let g = maxpool2_backward(e2.dims(), am2, &gbn.input)?;
    let mut g = g;
    activation_backward(Activation::Relu, e2.values(), g.values_mut());

    let ge2 = conv2d_backward(p1, params.data(E2K), 64, &g)?;
    grads.data_mut(E2K).copy_from_slice(&ge2.kernel);
    grads.data_mut(E2B).copy_from_slice(&ge2.bias);
    let g = maxpool2_backward(e1.dims(), am1, &ge2.input)?;
    let mut g = g;
    activation_backward(Activation::Relu, e1.values(), g.values_mut());

    let ge1 = conv2d_backward(&tape.x, params.data(E1K), 32, &g)?;
    grads.data_mut(E1K).copy_from_slice(&ge1.kernel);
    grads.data_mut(E1B).copy_from_slice(&ge1.bias);
    Ok(grads)
}
