//! Masked-pixel evaluation: RMSE and Pearson R per band, pooled across the
//! test images, plus the cross-run CSV report.
//!
//! Metrics only ever see cells that are masked *and* have a finite observed
//! value; everything else — including imputed values at unmasked cells — is
//! invisible to them.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::raster::{CloudMask, MultibandImage};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no masked cell with a finite observed value")]
    EmptyMask,
    #[error("constant series: correlation undefined")]
    ConstantSeries,
    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },
    #[error("band {band} out of range for {bands}-band image")]
    BandOutOfRange { band: usize, bands: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Pooled masked-cell metrics for one band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandMetrics {
    pub band: usize,
    pub rmse: f64,
    pub pearson_r: f64,
    pub n_pixels: usize,
}

fn check_triplet(
    observed: &MultibandImage,
    imputed: &MultibandImage,
    mask: &CloudMask,
    band: usize,
) -> Result<(), EvalError> {
    if !observed.same_shape(imputed) {
        return Err(EvalError::ShapeMismatch {
            context: "observed and imputed images differ in shape".to_string(),
        });
    }
    if mask.height() != observed.height() || mask.width() != observed.width() {
        return Err(EvalError::ShapeMismatch {
            context: "mask does not match image grid".to_string(),
        });
    }
    if band >= observed.bands() {
        return Err(EvalError::BandOutOfRange {
            band,
            bands: observed.bands(),
        });
    }
    Ok(())
}

/// Masked finite (observed, imputed) pairs for one band of one image.
fn masked_pairs(
    observed: &MultibandImage,
    imputed: &MultibandImage,
    mask: &CloudMask,
    band: usize,
    out: &mut Vec<(f64, f64)>,
) {
    for (row, col) in mask.masked_cells() {
        let y = observed.get(row, col, band);
        if y.is_finite() {
            out.push((y as f64, imputed.get(row, col, band) as f64));
        }
    }
}

fn rmse_of(pairs: &[(f64, f64)]) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyMask);
    }
    let sq: f64 = pairs.iter().map(|(y, p)| (y - p) * (y - p)).sum();
    Ok((sq / pairs.len() as f64).sqrt())
}

/// Two-pass product-moment correlation.
fn pearson_of(pairs: &[(f64, f64)]) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyMask);
    }
    let n = pairs.len() as f64;
    let my: f64 = pairs.iter().map(|(y, _)| y).sum::<f64>() / n;
    let mp: f64 = pairs.iter().map(|(_, p)| p).sum::<f64>() / n;
    let mut syy = 0.0;
    let mut spp = 0.0;
    let mut syp = 0.0;
    for (y, p) in pairs {
        let dy = y - my;
        let dp = p - mp;
        syy += dy * dy;
        spp += dp * dp;
        syp += dy * dp;
    }
    if syy == 0.0 || spp == 0.0 {
        return Err(EvalError::ConstantSeries);
    }
    Ok(syp / (syy * spp).sqrt())
}

/// Root mean squared error over one image's masked finite cells of `band`.
pub fn rmse(
    observed: &MultibandImage,
    imputed: &MultibandImage,
    mask: &CloudMask,
    band: usize,
) -> Result<f64, EvalError> {
    check_triplet(observed, imputed, mask, band)?;
    let mut pairs = Vec::new();
    masked_pairs(observed, imputed, mask, band, &mut pairs);
    rmse_of(&pairs)
}

/// Pearson correlation over one image's masked finite cells of `band`.
pub fn pearson_r(
    observed: &MultibandImage,
    imputed: &MultibandImage,
    mask: &CloudMask,
    band: usize,
) -> Result<f64, EvalError> {
    check_triplet(observed, imputed, mask, band)?;
    let mut pairs = Vec::new();
    masked_pairs(observed, imputed, mask, band, &mut pairs);
    pearson_of(&pairs)
}

/// Pool masked cells across all images and compute per-band metrics. The
/// three slices are aligned by position (one mask per evaluated image).
pub fn evaluate_model(
    observed: &[MultibandImage],
    imputed: &[MultibandImage],
    masks: &[CloudMask],
) -> Result<Vec<BandMetrics>, EvalError> {
    if observed.len() != imputed.len() || observed.len() != masks.len() {
        return Err(EvalError::ShapeMismatch {
            context: format!(
                "{} observed, {} imputed, {} masks",
                observed.len(),
                imputed.len(),
                masks.len()
            ),
        });
    }
    let bands = observed.first().map(|img| img.bands()).unwrap_or(0);
    let mut metrics = Vec::with_capacity(bands);
    let mut pairs = Vec::new();
    for band in 0..bands {
        pairs.clear();
        for ((obs, imp), mask) in observed.iter().zip(imputed).zip(masks) {
            check_triplet(obs, imp, mask, band)?;
            masked_pairs(obs, imp, mask, band, &mut pairs);
        }
        metrics.push(BandMetrics {
            band,
            rmse: rmse_of(&pairs)?,
            pearson_r: pearson_of(&pairs)?,
            n_pixels: pairs.len(),
        });
    }
    Ok(metrics)
}

/// 6-significant-digit scientific notation with a locale-independent
/// decimal point.
/// Six-significant-digit scientific format used across report files.
pub fn fmt6(v: f64) -> String {
    format!("{v:.5e}")
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Write the cross-run report: one row per (model, band) with the mean and
/// sample standard deviation of each metric across runs. Row order is
/// model name, then band, so identical input always produces identical
/// bytes.
pub fn write_report(
    path: impl AsRef<Path>,
    by_model: &BTreeMap<String, Vec<Vec<BandMetrics>>>,
) -> Result<(), EvalError> {
    let path = path.as_ref();
    let io_err = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = String::from("model,band,rmse_mean,rmse_std,r_mean,r_std,n_runs\n");
    for (model, runs) in by_model {
        let bands = runs.first().map(|r| r.len()).unwrap_or(0);
        for band in 0..bands {
            let rmses: Vec<f64> = runs.iter().map(|r| r[band].rmse).collect();
            let rs: Vec<f64> = runs.iter().map(|r| r[band].pearson_r).collect();
            let (rm, rsd) = mean_std(&rmses);
            let (cm, csd) = mean_std(&rs);
            out.push_str(&format!(
                "{model},{band},{},{},{},{},{}\n",
                fmt6(rm),
                fmt6(rsd),
                fmt6(cm),
                fmt6(csd),
                runs.len()
            ));
        }
    }
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    file.write_all(out.as_bytes()).map_err(io_err)?;
    Ok(())
}
