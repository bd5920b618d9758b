//! Linear-interpolation gap filler: the non-learned comparison method.
//!
//! Each band is filled independently. A gap cell takes the mean of up to two
//! axis estimates: linear interpolation between the nearest finite cells to
//! its left and right along the row, and the same along the column. With a
//! finite neighbour on only one side of an axis the estimate degrades to
//! that nearest value; a cell whose row and column hold no finite value at
//! all falls back to the band's global finite mean. Finite cells pass
//! through bit-for-bit.

use thiserror::Error;

use crate::raster::MultibandImage;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("band has no finite values")]
    AllMissing,
    #[error("band {0} has no finite values")]
    AllMissingBand(usize),
    #[error("plane length {got} does not match {height}x{width}")]
    ShapeMismatch {
        got: usize,
        height: usize,
        width: usize,
    },
}

/// Nearest-finite linear estimate along one axis. `pos` is the gap index on
/// that axis; `get` reads the axis cell and `len` is the axis length.
/// Two-sided gaps interpolate, one-sided gaps clamp to the nearest value.
fn axis_estimate(pos: usize, len: usize, get: impl Fn(usize) -> f64) -> Option<f64> {
    let mut left = None;
    for k in (0..pos).rev() {
        let v = get(k);
        if v.is_finite() {
            left = Some((k, v));
            break;
        }
    }
    let mut right = None;
    for k in pos + 1..len {
        let v = get(k);
        if v.is_finite() {
            right = Some((k, v));
            break;
        }
    }
    match (left, right) {
        (Some((kl, vl)), Some((kr, vr))) => {
            let t = (pos - kl) as f64 / (kr - kl) as f64;
            Some(vl + (vr - vl) * t)
        }
        (Some((_, v)), None) | (None, Some((_, v))) => Some(v),
        (None, None) => None,
    }
}

/// Fill every non-finite cell of a row-major `height x width` band.
pub fn interpolate_band(
    values: &[f32],
    height: usize,
    width: usize,
) -> Result<Vec<f32>, BaselineError> {
    if values.len() != height * width {
        return Err(BaselineError::ShapeMismatch {
            got: values.len(),
            height,
            width,
        });
    }
    let mut sum = 0.0f64;
    let mut n_finite = 0usize;
    for &v in values {
        if v.is_finite() {
            sum += v as f64;
            n_finite += 1;
        }
    }
    if n_finite == 0 {
        return Err(BaselineError::AllMissing);
    }
    let global_mean = sum / n_finite as f64;

    let mut out = values.to_vec();
    for i in 0..height {
        for j in 0..width {
            if values[i * width + j].is_finite() {
                continue;
            }
            let row = axis_estimate(j, width, |k| values[i * width + k] as f64);
            let col = axis_estimate(i, height, |k| values[k * width + j] as f64);
            let fill = match (row, col) {
                (Some(r), Some(c)) => (r + c) / 2.0,
                (Some(v), None) | (None, Some(v)) => v,
                (None, None) => global_mean,
            };
            out[i * width + j] = fill as f32;
        }
    }
    Ok(out)
}

/// Fill every band of an image independently; finite cells are untouched.
pub fn interpolate_image(image: &MultibandImage) -> Result<MultibandImage, BaselineError> {
    let (h, w, b) = (image.height(), image.width(), image.bands());
    let mut out = image.clone();
    let mut plane = vec![0.0f32; h * w];
    for band in 0..b {
        for (cell, slot) in plane.iter_mut().enumerate() {
            *slot = image.values()[cell * b + band];
        }
        let filled = interpolate_band(&plane, h, w)
            .map_err(|_| BaselineError::AllMissingBand(band))?;
        let values = out.values_mut();
        for (cell, v) in filled.iter().enumerate() {
            if !plane[cell].is_finite() {
                values[cell * b + band] = *v;
            }
        }
    }
    Ok(out)
}

/// Fill a whole series of gapped images.
pub fn interpolate_series(
    images: &[MultibandImage],
) -> Result<Vec<MultibandImage>, BaselineError> {
    images.iter().map(interpolate_image).collect()
}
