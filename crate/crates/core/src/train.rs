//! Dataset splitting, masked-MSE training with early stopping, and the
//! repeated-run harness used for model comparison.
//!
//! Training follows the gap-filling setup: each image in the series gets an
//! artificial cloud mask, the model sees the image with those cells blanked
//! (plus a gap-indicator channel), and the loss is the masked MSE over the
//! artificially hidden cells whose true values are finite. Genuinely missing
//! pixels (NaN in the source image) never contribute to the loss.

use std::env;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::eval::{self, BandMetrics, EvalError};
use crate::maskgen::{apply_mask, MaskError};
use crate::models::{
    build_model, forward_spatial, forward_temporal, prepare_batch, ModelError, ModelSpec,
};
use crate::models::{backward_spatial, backward_temporal};
use crate::raster::{CloudMask, ImageSeries, MultibandImage};
use crate::tensor::{
    masked_mse, AdamConfig, AdamState, MaskTensor, ParamSet, Tensor4, TensorError,
};

/// Errors from splitting, training, or the multi-run harness.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training needs at least {needed} images, got {got}")]
    TooFewImages { needed: usize, got: usize },
    #[error("artificial mask for image {index} selects no pixels")]
    EmptyMask { index: usize },
    #[error("loss diverged at epoch {epoch} during {phase}: {loss}")]
    DivergedLoss {
        epoch: usize,
        phase: &'static str,
        loss: f64,
    },
    #[error("invalid training configuration: {msg}")]
    BadConfig { msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Hyperparameters for one training run and the repetition harness.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Epochs without validation improvement before training stops.
    pub early_stop_patience: usize,
    /// Number of independent runs in [`multi_run`].
    pub n_runs: usize,
    /// Train/validation/test fractions; must sum to 1 within 1e-9.
    pub split_fractions: (f64, f64, f64),
    /// Run `i` of [`multi_run`] uses seed `base_seed + i`.
    pub base_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 50,
            lr: 0.001,
            batch_size: 4,
            early_stop_patience: 5,
            n_runs: 30,
            split_fractions: (0.55, 0.25, 0.20),
            base_seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::BadConfig { msg });
        let (a, b, c) = self.split_fractions;
        if !(a > 0.0 && b > 0.0 && c > 0.0) {
            return bad(format!("split fractions must be positive, got {a}/{b}/{c}"));
        }
        if (a + b + c - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions sum to {}, expected 1", a + b + c));
        }
        if self.early_stop_patience < 1 {
            return bad("early-stop patience must be at least 1".into());
        }
        if self.n_runs < 1 {
            return bad("n_runs must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch size must be at least 1".into());
        }
        if self.max_epochs < 1 {
            return bad("max_epochs must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        Ok(())
    }
}

/// Disjoint image-index lists covering `0..n`, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffle `0..n_images` with a seeded RNG and partition by the configured
/// fractions: `|train| = floor(f_train * n)`, `|val| = floor(f_val * n)`,
/// and the remainder is the test set. Each list is returned sorted so that
/// temporal windows see dates in chronological order.
pub fn split_dataset(
    n_images: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<DataSplit, TrainError> {
    cfg.validate()?;
    if n_images < 5 {
        return Err(TrainError::TooFewImages {
            needed: 5,
            got: n_images,
        });
    }
    let mut order: Vec<usize> = (0..n_images).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n = n_images as f64;
    let n_train = (cfg.split_fractions.0 * n).floor() as usize;
    let n_val = (cfg.split_fractions.1 * n).floor() as usize;
    let mut train: Vec<usize> = order[..n_train].to_vec();
    let mut val: Vec<usize> = order[n_train..n_train + n_val].to_vec();
    let mut test: Vec<usize> = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(DataSplit { train, val, test })
}

/// Everything recorded about one completed training run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub seed: u64,
    /// Pooled masked-MSE over each epoch's training batches (computed on the
    /// pre-update forward pass of every step).
    pub train_history: Vec<f64>,
    /// Pooled masked-MSE over the validation set after each epoch. Empty when
    /// the validation split yields no usable unit (tiny temporal splits).
    pub val_history: Vec<f64>,
    /// 1-based epoch whose validation loss was best; 0 when no validation
    /// loss was available (then the final weights are returned).
    pub best_epoch: usize,
    /// Per-band RMSE / Pearson R over the test split's masked cells. Empty
    /// when the test split yields no usable unit.
    pub test_metrics: Vec<BandMetrics>,
}

impl RunRecord {
    /// Best (minimum) validation loss, if validation ran.
    pub fn best_val_loss(&self) -> Option<f64> {
        self.val_history.iter().copied().fold(None, |acc, v| {
            Some(match acc {
                Some(a) if a <= v => a,
                _ => v,
            })
        })
    }
}

/// Per-band aggregate over the completed runs of [`multi_run`].
#[derive(Debug, Clone)]
pub struct BandAggregate {
    pub band: usize,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub r_mean: f64,
    pub r_std: f64,
}

/// Output of [`multi_run`]: completed runs, seeds of diverged runs (excluded
/// from the aggregate), and the per-band mean/standard deviation of the test
/// metrics across completed runs.
#[derive(Debug, Clone)]
pub struct MultiRunResult {
    pub runs: Vec<RunRecord>,
    pub diverged_seeds: Vec<u64>,
    pub aggregate: Vec<BandAggregate>,
}

impl MultiRunResult {
    pub fn warning_count(&self) -> usize {
        self.diverged_seeds.len()
    }
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

/// Union of the artificial mask and any genuinely missing pixel, so the gap
/// indicator channel flags every cell the model cannot observe.
fn gap_union(img: &MultibandImage, mask: &CloudMask) -> CloudMask {
    let mut m = mask.clone();
    for r in 0..img.height() {
        for c in 0..img.width() {
            if !m.is_masked(r, c) && img.pixel(r, c).iter().any(|v| !v.is_finite()) {
                m.set(r, c, true);
            }
        }
    }
    m
}

/// Stack the images at `idxs` into one batch: masked 9-channel inputs, raw
/// targets (NaN kept), and the artificial-mask tensor broadcast over bands.
fn stack_units(
    series: &ImageSeries,
    masks: &[CloudMask],
    idxs: &[usize],
) -> Result<(Tensor4<f32>, Tensor4<f32>, MaskTensor), TrainError> {
    let imgs = series.images();
    let masked: Vec<MultibandImage> = idxs
        .iter()
        .map(|&i| apply_mask(&imgs[i], &masks[i]))
        .collect::<Result<_, _>>()?;
    let unions: Vec<CloudMask> = idxs.iter().map(|&i| gap_union(&imgs[i], &masks[i])).collect();
    let irefs: Vec<&MultibandImage> = masked.iter().collect();
    let urefs: Vec<&CloudMask> = unions.iter().collect();
    let x = prepare_batch(&irefs, &urefs)?;

    let (h, w, b) = (series.height(), series.width(), series.n_bands());
    let mut y = Tensor4::zeros(idxs.len(), h, w, b);
    let plane = h * w * b;
    for (n, &i) in idxs.iter().enumerate() {
        y.values_mut()[n * plane..(n + 1) * plane].copy_from_slice(imgs[i].values());
    }
    let mrefs: Vec<&CloudMask> = idxs.iter().map(|&i| &masks[i]).collect();
    let vm = MaskTensor::broadcast_masks(&mrefs, b)?;
    Ok((x, y, vm))
}

/// Number of loss-bearing cells: mask set and target finite.
fn masked_count(y: &Tensor4<f32>, vm: &MaskTensor) -> usize {
    y.values()
        .iter()
        .zip(vm.cells())
        .filter(|(v, &m)| m == 1 && v.is_finite())
        .count()
}

/// Sliding windows of `timesteps` consecutive entries of `split` (already
/// sorted by date index). Windows never straddle split boundaries.
fn windows_of(split: &[usize], timesteps: usize) -> Vec<Vec<usize>> {
    if split.len() < timesteps {
        return Vec::new();
    }
    (0..=split.len() - timesteps)
        .map(|j| split[j..j + timesteps].to_vec())
        .collect()
}

// ---------------------------------------------------------------------------
// Early stopping
// ---------------------------------------------------------------------------

struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_improvement: usize,
}

impl EarlyStopper {
    fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_improvement: 0,
        }
    }

    /// Record the validation loss of `epoch` (1-based). Returns true when
    /// this epoch improved on the best loss so far.
    fn observe(&mut self, epoch: usize, val: f64) -> bool {
        if val < self.best {
            self.best = val;
            self.best_epoch = epoch;
            self.since_improvement = 0;
            true
        } else {
            self.since_improvement += 1;
            false
        }
    }

    fn should_stop(&self) -> bool {
        self.since_improvement >= self.patience
    }
}

// ---------------------------------------------------------------------------
// Loss evaluation (no dropout, no updates)
// ---------------------------------------------------------------------------

/// Pooled masked-MSE of the current parameters over a list of spatial images,
/// or `None` when no loss-bearing cell exists.
fn eval_loss_spatial(
    spec: &ModelSpec,
    params: &ParamSet<f32>,
    series: &ImageSeries,
    masks: &[CloudMask],
    idxs: &[usize],
    batch_size: usize,
) -> Result<Option<f64>, TrainError> {
    let mut sum_sq = 0.0f64;
    let mut count = 0usize;
    for chunk in idxs.chunks(batch_size) {
        let (x, y, vm) = stack_units(series, masks, chunk)?;
        let n = masked_count(&y, &vm);
        if n == 0 {
            continue;
        }
        let (out, _) = forward_spatial(spec, params, &x, None)?;
        let (loss, _) = masked_mse(&y, &out, &vm)?;
        sum_sq += loss as f64 * n as f64;
        count += n;
    }
    Ok((count > 0).then(|| sum_sq / count as f64))
}

/// Pooled masked-MSE over a list of temporal windows (all window steps).
fn eval_loss_temporal(
    spec: &ModelSpec,
    params: &ParamSet<f32>,
    series: &ImageSeries,
    masks: &[CloudMask],
    windows: &[Vec<usize>],
    batch_size: usize,
) -> Result<Option<f64>, TrainError> {
    let mut sum_sq = 0.0f64;
    let mut count = 0usize;
    for chunk in windows.chunks(batch_size) {
        let mut xs = Vec::with_capacity(spec.timesteps);
        let mut per_step = Vec::with_capacity(spec.timesteps);
        for t in 0..spec.timesteps {
            let idxs: Vec<usize> = chunk.iter().map(|w| w[t]).collect();
            let (x, y, vm) = stack_units(series, masks, &idxs)?;
            xs.push(x);
            per_step.push((y, vm));
        }
        let (outs, _) = forward_temporal(spec, params, &xs, None)?;
        for (t, (y, vm)) in per_step.iter().enumerate() {
            let n = masked_count(y, vm);
            if n == 0 {
                continue;
            }
            let (loss, _) = masked_mse(y, &outs[t], vm)?;
            sum_sq += loss as f64 * n as f64;
            count += n;
        }
    }
    Ok((count > 0).then(|| sum_sq / count as f64))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Split the series with the run's seed, then train on the resulting split.
pub fn train_model(
    spec: &ModelSpec,
    series: &ImageSeries,
    masks: &[CloudMask],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ParamSet<f32>, RunRecord), TrainError> {
    let split = split_dataset(series.len(), cfg, seed)?;
    train_model_on_split(spec, series, masks, cfg, seed, &split)
}

/// Train with an explicit split. Exposed so callers can pin a split (e.g.
/// overfitting one image with train = val = test).
pub fn train_model_on_split(
    spec: &ModelSpec,
    series: &ImageSeries,
    masks: &[CloudMask],
    cfg: &TrainConfig,
    seed: u64,
    split: &DataSplit,
) -> Result<(ParamSet<f32>, RunRecord), TrainError> {
    cfg.validate()?;
    if masks.len() != series.len() {
        return Err(TrainError::BadConfig {
            msg: format!("{} masks for {} images", masks.len(), series.len()),
        });
    }
    if series.height() != spec.height || series.width() != spec.width {
        return Err(TrainError::BadConfig {
            msg: format!(
                "series is {}x{}, model spec expects {}x{}",
                series.height(),
                series.width(),
                spec.height,
                spec.width
            ),
        });
    }
    if spec.out_channels != series.n_bands() {
        return Err(TrainError::BadConfig {
            msg: format!(
                "model predicts {} bands, series has {}",
                spec.out_channels,
                series.n_bands()
            ),
        });
    }
    for &i in &split.train {
        if masks[i].count_masked() == 0 {
            return Err(TrainError::EmptyMask { index: i });
        }
    }
    let temporal = spec.kind.is_temporal();
    if temporal && split.train.len() < spec.timesteps {
        return Err(TrainError::TooFewImages {
            needed: spec.timesteps,
            got: split.train.len(),
        });
    }

    // One RNG stream drives initialisation, epoch shuffles, and dropout
    // seeds, so (spec, data, cfg, seed) determine every number exactly.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init_seed: u64 = rng.random();
    let mut params = build_model(spec, init_seed);
    let mut adam = AdamState::new(
        &params,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );

    let train_windows = windows_of(&split.train, spec.timesteps);
    let val_windows = windows_of(&split.val, spec.timesteps);
    let has_val = if temporal {
        !val_windows.is_empty()
    } else {
        !split.val.is_empty()
    };

    let mut train_history = Vec::new();
    let mut val_history = Vec::new();
    let mut stopper = EarlyStopper::new(cfg.early_stop_patience);
    let mut best_params: Option<ParamSet<f32>> = None;

    for epoch in 1..=cfg.max_epochs {
        let mut epoch_sum_sq = 0.0f64;
        let mut epoch_count = 0usize;

        if temporal {
            let mut order = train_windows.clone();
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let step_seed: u64 = rng.random();
                let mut xs = Vec::with_capacity(spec.timesteps);
                let mut per_step = Vec::with_capacity(spec.timesteps);
                for t in 0..spec.timesteps {
                    let idxs: Vec<usize> = chunk.iter().map(|w| w[t]).collect();
                    let (x, y, vm) = stack_units(series, masks, &idxs)?;
                    xs.push(x);
                    per_step.push((y, vm));
                }
                let total: usize = per_step.iter().map(|(y, vm)| masked_count(y, vm)).sum();
                if total == 0 {
                    continue;
                }
                let (outs, tape) = forward_temporal(spec, &params, &xs, Some(step_seed))?;
                let tape = tape.expect("training forward returns a tape");
                let mut grad_outs = Vec::with_capacity(spec.timesteps);
                let mut batch_sum_sq = 0.0f64;
                for (t, (y, vm)) in per_step.iter().enumerate() {
                    let n = masked_count(y, vm);
                    if n == 0 {
                        grad_outs.push(Tensor4::zeros(
                            outs[t].n(),
                            outs[t].h(),
                            outs[t].w(),
                            outs[t].c(),
                        ));
                        continue;
                    }
                    let (loss, grad) = masked_mse(y, &outs[t], vm)?;
                    batch_sum_sq += loss as f64 * n as f64;
                    // masked_mse averages within the step; rescale so the
                    // combined gradient matches the pooled mean over all
                    // steps of the window batch.
                    let scale = (n as f64 / total as f64) as f32;
                    grad_outs.push(grad.map_into(|g| g * scale));
                }
                let batch_loss = batch_sum_sq / total as f64;
                if !batch_loss.is_finite() {
                    return Err(TrainError::DivergedLoss {
                        epoch,
                        phase: "training",
                        loss: batch_loss,
                    });
                }
                let grads = backward_temporal(spec, &params, &tape, &grad_outs)?;
                adam.step(&mut params, &grads)?;
                epoch_sum_sq += batch_sum_sq;
                epoch_count += total;
            }
        } else {
            let mut order = split.train.clone();
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let step_seed: u64 = rng.random();
                let (x, y, vm) = stack_units(series, masks, chunk)?;
                let n = masked_count(&y, &vm);
                if n == 0 {
                    continue;
                }
                let (out, tape) = forward_spatial(spec, &params, &x, Some(step_seed))?;
                let tape = tape.expect("training forward returns a tape");
                let (loss, grad) = masked_mse(&y, &out, &vm)?;
                let loss = loss as f64;
                if !loss.is_finite() {
                    return Err(TrainError::DivergedLoss {
                        epoch,
                        phase: "training",
                        loss,
                    });
                }
                let grads = backward_spatial(spec, &params, &tape, &grad)?;
                adam.step(&mut params, &grads)?;
                epoch_sum_sq += loss * n as f64;
                epoch_count += n;
            }
        }

        let epoch_loss = if epoch_count > 0 {
            epoch_sum_sq / epoch_count as f64
        } else {
            f64::NAN
        };
        train_history.push(epoch_loss);

        if has_val {
            let val = if temporal {
                eval_loss_temporal(spec, &params, series, masks, &val_windows, cfg.batch_size)?
            } else {
                eval_loss_spatial(spec, &params, series, masks, &split.val, cfg.batch_size)?
            };
            let val = val.unwrap_or(f64::NAN);
            if !val.is_finite() {
                return Err(TrainError::DivergedLoss {
                    epoch,
                    phase: "validation",
                    loss: val,
                });
            }
            val_history.push(val);
            if stopper.observe(epoch, val) {
                best_params = Some(params.clone());
            }
            if stopper.should_stop() {
                break;
            }
        }
    }

    let best_epoch = if has_val { stopper.best_epoch } else { 0 };
    let final_params = best_params.unwrap_or(params);

    let test_metrics = test_metrics(spec, &final_params, series, masks, &split.test)?;
    let record = RunRecord {
        seed,
        train_history,
        val_history,
        best_epoch,
        test_metrics,
    };
    Ok((final_params, record))
}

/// Per-band metrics of the trained model over the test split's masked cells.
/// Empty when the split yields no usable unit (e.g. a temporal split shorter
/// than the window length).
fn test_metrics(
    spec: &ModelSpec,
    params: &ParamSet<f32>,
    series: &ImageSeries,
    masks: &[CloudMask],
    test_idx: &[usize],
) -> Result<Vec<BandMetrics>, TrainError> {
    if test_idx.is_empty() || (spec.kind.is_temporal() && test_idx.len() < spec.timesteps) {
        return Ok(Vec::new());
    }
    let observed: Vec<MultibandImage> = test_idx
        .iter()
        .map(|&i| series.images()[i].clone())
        .collect();
    let test_masks: Vec<CloudMask> = test_idx.iter().map(|&i| masks[i].clone()).collect();
    let imputed = impute_series(spec, params, &observed, &test_masks)?;
    Ok(eval::evaluate_model(&observed, &imputed, &test_masks)?)
}

/// Fill the masked cells of each image with model predictions; every other
/// cell passes through unchanged. Temporal models slide a window along the
/// list and each date takes its prediction from the first window covering it.
pub fn impute_series(
    spec: &ModelSpec,
    params: &ParamSet<f32>,
    images: &[MultibandImage],
    masks: &[CloudMask],
) -> Result<Vec<MultibandImage>, TrainError> {
    if images.len() != masks.len() {
        return Err(TrainError::BadConfig {
            msg: format!("{} masks for {} images", masks.len(), images.len()),
        });
    }
    let bands = spec.out_channels;
    let mut out: Vec<MultibandImage> = images.to_vec();
    if !spec.kind.is_temporal() {
        for (i, img) in images.iter().enumerate() {
            let masked = apply_mask(img, &masks[i])?;
            let union = gap_union(img, &masks[i]);
            let x = prepare_batch(&[&masked], &[&union])?;
            let (pred, _) = forward_spatial(spec, params, &x, None)?;
            fill_from_prediction(&mut out[i], &masks[i], &pred, 0, bands);
        }
        return Ok(out);
    }

    if images.len() < spec.timesteps {
        return Err(TrainError::TooFewImages {
            needed: spec.timesteps,
            got: images.len(),
        });
    }
    let mut filled = vec![false; images.len()];
    for j in 0..=images.len() - spec.timesteps {
        if (j..j + spec.timesteps).all(|k| filled[k]) {
            continue;
        }
        let mut xs = Vec::with_capacity(spec.timesteps);
        for k in j..j + spec.timesteps {
            let masked = apply_mask(&images[k], &masks[k])?;
            let union = gap_union(&images[k], &masks[k]);
            xs.push(prepare_batch(&[&masked], &[&union])?);
        }
        let (preds, _) = forward_temporal(spec, params, &xs, None)?;
        for (t, pred) in preds.iter().enumerate() {
            let k = j + t;
            if !filled[k] {
                fill_from_prediction(&mut out[k], &masks[k], pred, 0, bands);
                filled[k] = true;
            }
        }
    }
    Ok(out)
}

fn fill_from_prediction(
    img: &mut MultibandImage,
    mask: &CloudMask,
    pred: &Tensor4<f32>,
    batch_row: usize,
    bands: usize,
) {
    for (r, c) in mask.masked_cells() {
        for b in 0..bands {
            img.set(r, c, b, pred.at(batch_row, r, c, b));
        }
    }
}

// ---------------------------------------------------------------------------
// Multi-run harness
// ---------------------------------------------------------------------------

/// Number of runs to execute concurrently: `CLOUDPATCH_THREADS` when set,
/// otherwise the machine's available parallelism, never more than `n_runs`.
fn run_parallelism(n_runs: usize) -> usize {
    let configured = env::var("CLOUDPATCH_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&t| t >= 1);
    let threads = configured.unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    });
    threads.max(1).min(n_runs.max(1))
}

/// Run `cfg.n_runs` independent trainings (run `i` seeded `base_seed + i`),
/// aggregating per-band test RMSE and R across the completed runs. A run that
/// fails with [`TrainError::DivergedLoss`] is excluded from the aggregate and
/// recorded by seed; any other error aborts the harness.
pub fn multi_run(
    spec: &ModelSpec,
    series: &ImageSeries,
    masks: &[CloudMask],
    cfg: &TrainConfig,
) -> Result<MultiRunResult, TrainError> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.n_runs as u64)
        .map(|i| cfg.base_seed.wrapping_add(i))
        .collect();
    let threads = run_parallelism(cfg.n_runs);
    let results: Vec<Result<RunRecord, TrainError>> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| TrainError::BadConfig {
                msg: format!("thread pool: {e}"),
            })?;
        pool.install(|| {
            seeds
                .par_iter()
                .map(|&s| train_model(spec, series, masks, cfg, s).map(|(_, rec)| rec))
                .collect()
        })
    } else {
        seeds
            .iter()
            .map(|&s| train_model(spec, series, masks, cfg, s).map(|(_, rec)| rec))
            .collect()
    };

    let mut runs = Vec::new();
    let mut diverged_seeds = Vec::new();
    for (result, &seed) in results.into_iter().zip(&seeds) {
        match result {
            Ok(rec) => runs.push(rec),
            Err(TrainError::DivergedLoss { .. }) => diverged_seeds.push(seed),
            Err(e) => return Err(e),
        }
    }

    let aggregate = aggregate_runs(&runs);
    Ok(MultiRunResult {
        runs,
        diverged_seeds,
        aggregate,
    })
}

/// Mean and sample standard deviation of per-band test metrics across runs
/// that produced test metrics.
pub fn aggregate_runs(runs: &[RunRecord]) -> Vec<BandAggregate> {
    let with_metrics: Vec<&RunRecord> =
        runs.iter().filter(|r| !r.test_metrics.is_empty()).collect();
    let Some(first) = with_metrics.first() else {
        return Vec::new();
    };
    let n_bands = first.test_metrics.len();
    (0..n_bands)
        .map(|b| {
            let rmses: Vec<f64> = with_metrics
                .iter()
                .map(|r| r.test_metrics[b].rmse)
                .collect();
            let rs: Vec<f64> = with_metrics
                .iter()
                .map(|r| r.test_metrics[b].pearson_r)
                .collect();
            let (rmse_mean, rmse_std) = eval::mean_std(&rmses);
            let (r_mean, r_std) = eval::mean_std(&rs);
            BandAggregate {
                band: first.test_metrics[b].band,
                rmse_mean,
                rmse_std,
                r_mean,
                r_std,
            }
        })
        .collect()
}
