//! The four imputation architectures: specification, parameter
//! initialization, forward/backward passes, and checkpoint serialization.
//!
//! All models consume 9-channel inputs (8 reflectance bands with missing
//! values zero-filled, plus a binary gap-indicator channel) and emit
//! 8-channel reconstructions at full resolution. Spatial models map one
//! image at a time; temporal models consume sliding windows of consecutive
//! dates through a shared convolutional trunk and an LSTM.

mod spatial;
mod temporal;

pub use spatial::{backward_spatial, forward_spatial, SpatialTape};
pub use temporal::{backward_temporal, forward_temporal, TemporalTape};

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::raster::{CloudMask, MultibandImage};
use crate::tensor::{ParamSet, Tensor4, TensorError};

const CHECKPOINT_MAGIC: [u8; 4] = *b"PRM1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unsupported model kind {0:?}")]
    UnsupportedKind(String),
    #[error("model geometry {height}x{width} must be nonzero and divisible by 4")]
    BadGeometry { height: usize, width: usize },
    #[error("input tensor contains non-finite values")]
    NonFiniteInput,
    #[error("expected {expected} input, got {got}")]
    WrongInputArity {
        expected: &'static str,
        got: &'static str,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint {path}: {msg}")]
    BadCheckpoint { path: PathBuf, msg: String },
}

/// The four supported architectures plus their canonical CLI names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Cnn,
    AutoencoderCnn,
    CnnLstm,
    AutoencoderLstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Cnn,
        ModelKind::AutoencoderCnn,
        ModelKind::CnnLstm,
        ModelKind::AutoencoderLstm,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Cnn => "cnn",
            ModelKind::AutoencoderCnn => "autoencoder_cnn",
            ModelKind::CnnLstm => "cnn_lstm",
            ModelKind::AutoencoderLstm => "autoencoder_lstm",
        }
    }

    /// Temporal models consume windows of consecutive dates; spatial models
    /// consume single images.
    pub fn is_temporal(&self) -> bool {
        matches!(self, ModelKind::CnnLstm | ModelKind::AutoencoderLstm)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cnn" => Ok(ModelKind::Cnn),
            "autoencoder_cnn" => Ok(ModelKind::AutoencoderCnn),
            "cnn_lstm" => Ok(ModelKind::CnnLstm),
            "autoencoder_lstm" => Ok(ModelKind::AutoencoderLstm),
            other => Err(ModelError::UnsupportedKind(other.to_string())),
        }
    }
}

/// Hyperparameters fixing a model's exact shape. Geometry matters for the
/// temporal models, whose dense layers are sized to the pooled feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub lstm_units: usize,
    pub dropout_rate: f64,
    pub timesteps: usize,
}

impl ModelSpec {
    /// The standard configuration for a given kind and image geometry:
    /// 9 input channels, 8 output bands, LSTM width 64, a 5-date window for
    /// temporal kinds, and dropout 0.2 (0.3 for the autoencoder LSTM).
    pub fn new(kind: ModelKind, height: usize, width: usize) -> Result<Self, ModelError> {
        if height == 0 || width == 0 || height % 4 != 0 || width % 4 != 0 {
            return Err(ModelError::BadGeometry { height, width });
        }
        Ok(Self {
            kind,
            height,
            width,
            in_channels: 9,
            out_channels: 8,
            lstm_units: 64,
            dropout_rate: if kind == ModelKind::AutoencoderLstm {
                0.3
            } else {
                0.2
            },
            timesteps: if kind.is_temporal() { 5 } else { 1 },
        })
    }

    /// Flattened width of the twice-pooled convolutional feature map that
    /// feeds the LSTM.
    pub fn trunk_features(&self) -> usize {
        (self.height / 4) * (self.width / 4) * 64
    }
}

/// Glorot-uniform fill: `U(-sqrt(6/(fan_in+fan_out)), +...)`.
fn glorot(rng: &mut ChaCha8Rng, len: usize, fan_in: usize, fan_out: usize) -> Vec<f32> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len)
        .map(|_| rng.random_range(-limit..limit) as f32)
        .collect()
}

/// Recurrent-matrix fill: `U(-sqrt(1/units), +...)`.
fn recurrent(rng: &mut ChaCha8Rng, len: usize, units: usize) -> Vec<f32> {
    let limit = (1.0 / units as f64).sqrt();
    (0..len)
        .map(|_| rng.random_range(-limit..limit) as f32)
        .collect()
}

fn push_conv(
    params: &mut ParamSet<f32>,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_in: usize,
    c_out: usize,
) {
    let fan_in = 9 * c_in;
    let fan_out = 9 * c_out;
    params.push(
        format!("{name}.kernel"),
        vec![3, 3, c_in, c_out],
        glorot(rng, 9 * c_in * c_out, fan_in, fan_out),
    );
    params.push(format!("{name}.bias"), vec![c_out], vec![0.0; c_out]);
}

fn push_lstm(params: &mut ParamSet<f32>, rng: &mut ChaCha8Rng, input_dim: usize, units: usize) {
    let u4 = 4 * units;
    params.push(
        "lstm.wx",
        vec![input_dim, u4],
        glorot(rng, input_dim * u4, input_dim, u4),
    );
    params.push("lstm.wh", vec![units, u4], recurrent(rng, units * u4, units));
    // Zero biases except the forget gate, opened to 1 so early training
    // retains cell state.
    let mut b = vec![0.0f32; u4];
    for v in &mut b[units..2 * units] {
        *v = 1.0;
    }
    params.push("lstm.b", vec![u4], b);
}

fn push_dense(
    params: &mut ParamSet<f32>,
    rng: &mut ChaCha8Rng,
    name: &str,
    in_dim: usize,
    out_dim: usize,
) {
    params.push(
        format!("{name}.weights"),
        vec![in_dim, out_dim],
        glorot(rng, in_dim * out_dim, in_dim, out_dim),
    );
    params.push(format!("{name}.bias"), vec![out_dim], vec![0.0; out_dim]);
}

/// Initialize a parameter set for `spec`, deterministically from `seed`.
/// Convolution and dense layers get Glorot-uniform weights and zero biases;
/// the LSTM recurrent matrix is uniform `+-sqrt(1/units)` and its forget
/// gate bias starts at 1.
pub fn build_model(spec: &ModelSpec, seed: u64) -> ParamSet<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let cin = spec.in_channels;
    let cout = spec.out_channels;
    match spec.kind {
        ModelKind::Cnn => {
            push_conv(&mut p, &mut rng, "conv1", cin, 32);
            push_conv(&mut p, &mut rng, "conv2", 32, 64);
            push_conv(&mut p, &mut rng, "conv3", 64, 128);
            push_conv(&mut p, &mut rng, "conv4", 128, cout);
        }
        ModelKind::AutoencoderCnn => {
            push_conv(&mut p, &mut rng, "enc1", cin, 32);
            push_conv(&mut p, &mut rng, "enc2", 32, 64);
            push_conv(&mut p, &mut rng, "bottleneck", 64, 128);
            push_conv(&mut p, &mut rng, "dec1", 128, 64);
            push_conv(&mut p, &mut rng, "dec2", 64, 32);
            push_conv(&mut p, &mut rng, "out", 32, cout);
        }
        ModelKind::CnnLstm => {
            push_conv(&mut p, &mut rng, "trunk1", cin, 32);
            push_conv(&mut p, &mut rng, "trunk2", 32, 64);
            push_lstm(&mut p, &mut rng, spec.trunk_features(), spec.lstm_units);
            let plane = (spec.height / 4) * (spec.width / 4) * 32;
            push_dense(&mut p, &mut rng, "project", spec.lstm_units, plane);
            push_conv(&mut p, &mut rng, "dec1", 32, 32);
            push_conv(&mut p, &mut rng, "out", 32, cout);
        }
        ModelKind::AutoencoderLstm => {
            push_conv(&mut p, &mut rng, "trunk1", cin, 32);
            push_conv(&mut p, &mut rng, "trunk2", 32, 64);
            push_lstm(&mut p, &mut rng, spec.trunk_features(), spec.lstm_units);
            let plane = (spec.height / 4) * (spec.width / 4) * 64;
            push_dense(&mut p, &mut rng, "project", spec.lstm_units, plane);
            push_conv(&mut p, &mut rng, "dec1", 64, 64);
            push_conv(&mut p, &mut rng, "dec2", 64, 32);
            push_conv(&mut p, &mut rng, "out", 32, cout);
        }
    }
    p
}

/// Model inputs: one batch tensor for spatial kinds, one tensor per window
/// step for temporal kinds.
pub enum ModelInput<'a> {
    Spatial(&'a Tensor4<f32>),
    Temporal(&'a [Tensor4<f32>]),
}

/// Model outputs, mirroring [`ModelInput`].
#[derive(Debug, Clone)]
pub enum ModelOutput {
    Spatial(Tensor4<f32>),
    Temporal(Vec<Tensor4<f32>>),
}

impl ModelOutput {
    pub fn spatial(self) -> Tensor4<f32> {
        match self {
            ModelOutput::Spatial(t) => t,
            ModelOutput::Temporal(_) => panic!("temporal output where spatial expected"),
        }
    }

    pub fn temporal(self) -> Vec<Tensor4<f32>> {
        match self {
            ModelOutput::Temporal(t) => t,
            ModelOutput::Spatial(_) => panic!("spatial output where temporal expected"),
        }
    }
}

fn check_finite(t: &Tensor4<f32>) -> Result<(), ModelError> {
    if t.values().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFiniteInput)
    }
}

/// Run a model forward in inference mode (dropout disabled).
pub fn forward(
    spec: &ModelSpec,
    params: &ParamSet<f32>,
    input: &ModelInput<'_>,
) -> Result<ModelOutput, ModelError> {
    match (spec.kind.is_temporal(), input) {
        (false, ModelInput::Spatial(x)) => {
            check_finite(x)?;
            let (out, _) = forward_spatial(spec, params, x, None)?;
            Ok(ModelOutput::Spatial(out))
        }
        (true, ModelInput::Temporal(xs)) => {
            for x in *xs {
                check_finite(x)?;
            }
            let (out, _) = forward_temporal(spec, params, xs, None)?;
            Ok(ModelOutput::Temporal(out))
        }
        (false, ModelInput::Temporal(_)) => Err(ModelError::WrongInputArity {
            expected: "spatial",
            got: "temporal",
        }),
        (true, ModelInput::Spatial(_)) => Err(ModelError::WrongInputArity {
            expected: "temporal",
            got: "spatial",
        }),
    }
}

/// Assemble the 9-channel model input for one image: bands with NaN replaced
/// by zero, then the binary gap indicator from `mask`.
pub fn prepare_input(img: &MultibandImage, mask: &CloudMask) -> Result<Tensor4<f32>, ModelError> {
    prepare_batch(&[img], &[mask])
}

/// Stack several images into one batch tensor of 9-channel inputs.
pub fn prepare_batch(
    images: &[&MultibandImage],
    masks: &[&CloudMask],
) -> Result<Tensor4<f32>, ModelError> {
    if images.is_empty() || images.len() != masks.len() {
        return Err(TensorError::ShapeMismatch {
            context: format!("{} images with {} masks", images.len(), masks.len()),
        }
        .into());
    }
    let (h, w, b) = (images[0].height(), images[0].width(), images[0].bands());
    let c = b + 1;
    let mut out = Tensor4::zeros(images.len(), h, w, c);
    for (n, (img, mask)) in images.iter().zip(masks).enumerate() {
        if img.height() != h || img.width() != w || img.bands() != b {
            return Err(TensorError::ShapeMismatch {
                context: format!(
                    "image {} is {}x{}x{}, batch is {h}x{w}x{b}",
                    n,
                    img.height(),
                    img.width(),
                    img.bands()
                ),
            }
            .into());
        }
        if mask.height() != h || mask.width() != w {
            return Err(TensorError::ShapeMismatch {
                context: format!("mask {}x{} for {h}x{w} image", mask.height(), mask.width()),
            }
            .into());
        }
        for y in 0..h {
            for x in 0..w {
                let px = out.pixel_mut(n, y, x);
                for (ch, &v) in img.pixel(y, x).iter().enumerate() {
                    px[ch] = if v.is_finite() { v } else { 0.0 };
                }
                px[b] = mask.is_masked(y, x) as u8 as f32;
            }
        }
    }
    Ok(out)
}

fn meta_string(spec: &ModelSpec) -> String {
    format!(
        "kind={}\nheight={}\nwidth={}\nin_channels={}\nout_channels={}\nlstm_units={}\ndropout={}\ntimesteps={}\n",
        spec.kind, spec.height, spec.width, spec.in_channels, spec.out_channels,
        spec.lstm_units, spec.dropout_rate, spec.timesteps
    )
}

fn parse_meta(path: &Path, text: &str) -> Result<ModelSpec, ModelError> {
    let bad = |msg: String| ModelError::BadCheckpoint {
        path: path.to_path_buf(),
        msg,
    };
    let mut fields = std::collections::HashMap::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("meta line {line:?}")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| {
        fields
            .get(k)
            .cloned()
            .ok_or_else(|| bad(format!("missing meta field {k}")))
    };
    let parse_usize = |k: &str| -> Result<usize, ModelError> {
        get(k)?.parse().map_err(|e| bad(format!("field {k}: {e}")))
    };
    Ok(ModelSpec {
        kind: get("kind")?
            .parse()
            .map_err(|_| bad(format!("unknown kind {}", fields["kind"])))?,
        height: parse_usize("height")?,
        width: parse_usize("width")?,
        in_channels: parse_usize("in_channels")?,
        out_channels: parse_usize("out_channels")?,
        lstm_units: parse_usize("lstm_units")?,
        dropout_rate: get("dropout")?
            .parse()
            .map_err(|e| bad(format!("field dropout: {e}")))?,
        timesteps: parse_usize("timesteps")?,
    })
}

/// Serialize a model to the `PRM1` container: magic, meta text block, then
/// each parameter tensor with its name, shape, and little-endian f32 data.
/// The write is atomic (temp file + rename).
pub fn save_model(
    path: impl AsRef<Path>,
    spec: &ModelSpec,
    params: &ParamSet<f32>,
) -> Result<(), ModelError> {
    let path = path.as_ref();
    let meta = meta_string(spec);
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    bytes.extend_from_slice(meta.as_bytes());
    bytes.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for entry in params.entries() {
        bytes.extend_from_slice(&(entry.name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(entry.name.as_bytes());
        bytes.extend_from_slice(&(entry.shape.len() as u32).to_le_bytes());
        for &d in &entry.shape {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &entry.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| ModelError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    tmp.write_all(&bytes).map_err(|e| ModelError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    tmp.persist(path).map_err(|e| ModelError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

/// Load a model saved by [`save_model`], validating parameter counts
/// against the architecture recorded in the header.
pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelSpec, ParamSet<f32>), ModelError> {
    let path = path.as_ref();
    let mut file = std::fs::File::open(path).map_err(|e| ModelError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| ModelError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let bad = |msg: String| ModelError::BadCheckpoint {
        path: path.to_path_buf(),
        msg,
    };
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], ModelError> {
        if *pos + n > bytes.len() {
            return Err(ModelError::BadCheckpoint {
                path: path.to_path_buf(),
                msg: format!("truncated at offset {pos}"),
            });
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let take_u32 = |pos: &mut usize| -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };
    if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic (expected PRM1)".into()));
    }
    let meta_len = take_u32(&mut pos)? as usize;
    let meta = std::str::from_utf8(take(&mut pos, meta_len)?)
        .map_err(|e| bad(format!("meta not utf-8: {e}")))?
        .to_string();
    let spec = parse_meta(path, &meta)?;
    let n_entries = take_u32(&mut pos)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..n_entries {
        let name_len = take_u32(&mut pos)? as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|e| bad(format!("entry name not utf-8: {e}")))?
            .to_string();
        let ndims = take_u32(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(take_u32(&mut pos)? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = take(&mut pos, count * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(name, shape, data);
    }
    if pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
    }
    // The stored tensors must structurally match a freshly built model.
    let reference = build_model(&spec, 0);
    if reference.len() != params.len() {
        return Err(bad(format!(
            "{} entries where {} expected for kind {}",
            params.len(),
            reference.len(),
            spec.kind
        )));
    }
    for (got, want) in params.entries().iter().zip(reference.entries()) {
        if got.name != want.name || got.shape != want.shape {
            return Err(bad(format!(
                "entry {} shape {:?} where {} {:?} expected",
                got.name, got.shape, want.name, want.shape
            )));
        }
    }
    Ok((spec, params))
}
