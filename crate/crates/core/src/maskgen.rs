//! Synthetic cloud-mask generation.
//!
//! Cloud cover is simulated by drawing a Gaussian random field with an
//! exponential covariance over the unit square and masking the cells with
//! the lowest field values, so masks form spatially coherent blobs rather
//! than salt-and-pepper speckle. The masked-cell count is exact: a requested
//! ratio of 0.1 on a 64x64 grid masks exactly round(0.1 * 4096) = 410 cells,
//! every time.
//!
//! Sampling is exact (dense Cholesky of the full covariance) up to a 64x64
//! grid. Larger grids are sampled exactly on a 64-capped coarse grid and
//! bilinearly interpolated, which preserves the blob structure at a small
//! cost in between-knot variance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::raster::{CloudMask, ImageSeries, MultibandImage};
use crate::tensor::dot;

/// Largest grid side factored exactly; beyond this the sampler draws on a
/// coarse grid and interpolates.
const MAX_EXACT_SIDE: usize = 64;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("grid dimensions must be nonzero, got {height}x{width}")]
    EmptyGrid { height: usize, width: usize },
    #[error("mask ratio must lie in [0, 1], got {0}")]
    BadRatio(f64),
    #[error("covariance parameters must be positive, got sigma2={sigma2}, range={range}")]
    BadCovariance { sigma2: f64, range: f64 },
    #[error("covariance matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { pivot: f64, index: usize },
    #[error("field length {got} does not match grid {height}x{width}")]
    FieldShape {
        got: usize,
        height: usize,
        width: usize,
    },
    #[error("mask shape {mask_height}x{mask_width} does not match image {height}x{width}")]
    ShapeMismatch {
        mask_height: usize,
        mask_width: usize,
        height: usize,
        width: usize,
    },
}

/// Exponential-covariance parameters for the cloud field, over pixel centers
/// mapped into the unit square.
#[derive(Debug, Clone, Copy)]
pub struct GrfConfig {
    /// Marginal variance of the field.
    pub sigma2: f64,
    /// Correlation range: covariance decays as `sigma2 * exp(-dist / range)`.
    pub range: f64,
    /// Diagonal jitter keeping the Cholesky factorization stable.
    pub nugget: f64,
}

impl Default for GrfConfig {
    fn default() -> Self {
        Self {
            sigma2: 0.95,
            range: 0.4,
            nugget: 1e-10,
        }
    }
}

/// A reusable sampler for Gaussian random fields on a fixed grid. The
/// Cholesky factor is computed once at construction and shared by every
/// draw, which makes repeated sampling (one mask per acquisition date)
/// cheap.
pub struct GrfSampler {
    height: usize,
    width: usize,
    grid_h: usize,
    grid_w: usize,
    /// Lower-triangular Cholesky factor of the coarse-grid covariance,
    /// dense row-major `n x n` with `n = grid_h * grid_w`.
    chol: Vec<f64>,
    config: GrfConfig,
}

impl GrfSampler {
    pub fn new(height: usize, width: usize, config: GrfConfig) -> Result<Self, MaskError> {
        if height == 0 || width == 0 {
            return Err(MaskError::EmptyGrid { height, width });
        }
        if !(config.sigma2 > 0.0) || !(config.range > 0.0) {
            return Err(MaskError::BadCovariance {
                sigma2: config.sigma2,
                range: config.range,
            });
        }
        let grid_h = height.min(MAX_EXACT_SIDE);
        let grid_w = width.min(MAX_EXACT_SIDE);
        let n = grid_h * grid_w;
        let mut cov = vec![0.0f64; n * n];
        for a in 0..n {
            let (ia, ja) = (a / grid_w, a % grid_w);
            let ya = (ia as f64 + 0.5) / grid_h as f64;
            let xa = (ja as f64 + 0.5) / grid_w as f64;
            for b in 0..=a {
                let (ib, jb) = (b / grid_w, b % grid_w);
                let yb = (ib as f64 + 0.5) / grid_h as f64;
                let xb = (jb as f64 + 0.5) / grid_w as f64;
                let dist = ((ya - yb).powi(2) + (xa - xb).powi(2)).sqrt();
                let mut c = config.sigma2 * (-dist / config.range).exp();
                if a == b {
                    c += config.nugget;
                }
                cov[a * n + b] = c;
                cov[b * n + a] = c;
            }
        }
        cholesky_in_place(&mut cov, n)?;
        Ok(Self {
            height,
            width,
            grid_h,
            grid_w,
            chol: cov,
            config,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn config(&self) -> GrfConfig {
        self.config
    }

    /// Draw one field realization, row-major `height * width`.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = self.grid_h * self.grid_w;
        let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let mut coarse = vec![0.0f64; n];
        for (i, out) in coarse.iter_mut().enumerate() {
            *out = dot(&self.chol[i * n..i * n + i + 1], &z[..i + 1]);
        }
        if self.grid_h == self.height && self.grid_w == self.width {
            return coarse;
        }
        bilinear_expand(
            &coarse,
            self.grid_h,
            self.grid_w,
            self.height,
            self.width,
        )
    }
}

/// In-place Cholesky (lower triangle) of a dense row-major `n x n` matrix.
/// The strict upper triangle is zeroed. Row-prefix dot products keep the
/// inner loops on contiguous memory.
fn cholesky_in_place(m: &mut [f64], n: usize) -> Result<(), MaskError> {
    for j in 0..n {
        let (head, tail) = m.split_at_mut(j * n + j + 1);
        let pivot = {
            let row_j = &head[j * n..j * n + j];
            head[j * n + j] - dot(row_j, row_j)
        };
        if pivot <= 0.0 {
            return Err(MaskError::NotPositiveDefinite { pivot, index: j });
        }
        let diag = pivot.sqrt();
        head[j * n + j] = diag;
        let row_j = &head[j * n..j * n + j];
        // Column j below the diagonal; each row prefix is contiguous.
        for i in j + 1..n {
            let row_i_start = i * n - (j * n + j + 1);
            let row_i = &tail[row_i_start..row_i_start + j];
            let v = (tail[row_i_start + j] - dot(row_i, row_j)) / diag;
            tail[row_i_start + j] = v;
        }
    }
    // Zero the strict upper triangle so draws can treat rows as prefixes.
    for i in 0..n {
        for j in i + 1..n {
            m[i * n + j] = 0.0;
        }
    }
    Ok(())
}

/// Bilinear interpolation of a coarse field onto a finer grid, matching
/// pixel centers in normalized coordinates and clamping at the borders.
fn bilinear_expand(coarse: &[f64], gh: usize, gw: usize, h: usize, w: usize) -> Vec<f64> {
    let mut fine = vec![0.0f64; h * w];
    for i in 0..h {
        let u = ((i as f64 + 0.5) / h as f64) * gh as f64 - 0.5;
        let u = u.clamp(0.0, (gh - 1) as f64);
        let i0 = u.floor() as usize;
        let i1 = (i0 + 1).min(gh - 1);
        let fu = u - i0 as f64;
        for j in 0..w {
            let v = ((j as f64 + 0.5) / w as f64) * gw as f64 - 0.5;
            let v = v.clamp(0.0, (gw - 1) as f64);
            let j0 = v.floor() as usize;
            let j1 = (j0 + 1).min(gw - 1);
            let fv = v - j0 as f64;
            let top = coarse[i0 * gw + j0] * (1.0 - fv) + coarse[i0 * gw + j1] * fv;
            let bot = coarse[i1 * gw + j0] * (1.0 - fv) + coarse[i1 * gw + j1] * fv;
            fine[i * w + j] = top * (1.0 - fu) + bot * fu;
        }
    }
    fine
}

/// Mask exactly `round(ratio * height * width)` cells: the ones with the
/// lowest field values, ties broken by row-major position so the result is
/// fully determined by the field.
pub fn threshold_mask(
    field: &[f64],
    height: usize,
    width: usize,
    ratio: f64,
) -> Result<CloudMask, MaskError> {
    if height == 0 || width == 0 {
        return Err(MaskError::EmptyGrid { height, width });
    }
    if field.len() != height * width {
        return Err(MaskError::FieldShape {
            got: field.len(),
            height,
            width,
        });
    }
    if !(0.0..=1.0).contains(&ratio) || ratio.is_nan() {
        return Err(MaskError::BadRatio(ratio));
    }
    let k = (ratio * (height * width) as f64).round() as usize;
    let mut order: Vec<u32> = (0..field.len() as u32).collect();
    // Total order: field value, then row-major index. NaNs (which the
    // sampler never produces) would sort last and stay unmasked.
    order.sort_by(|&a, &b| {
        let (fa, fb) = (field[a as usize], field[b as usize]);
        fa.partial_cmp(&fb)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut mask = CloudMask::zeros(height, width);
    for &cell in order.iter().take(k) {
        mask.set(
            cell as usize / width,
            cell as usize % width,
            true,
        );
    }
    Ok(mask)
}

/// Draw a field and threshold it in one step.
pub fn generate_mask(
    sampler: &GrfSampler,
    ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<CloudMask, MaskError> {
    let field = sampler.sample(rng);
    threshold_mask(&field, sampler.height(), sampler.width(), ratio)
}

/// Return a copy of `image` with every masked cell's bands set to NaN.
pub fn apply_mask(image: &MultibandImage, mask: &CloudMask) -> Result<MultibandImage, MaskError> {
    if mask.height() != image.height() || mask.width() != image.width() {
        return Err(MaskError::ShapeMismatch {
            mask_height: mask.height(),
            mask_width: mask.width(),
            height: image.height(),
            width: image.width(),
        });
    }
    let mut out = image.clone();
    let bands = out.bands();
    let width = out.width();
    let values = out.values_mut();
    for (row, col) in mask.masked_cells() {
        let start = (row * width + col) * bands;
        for v in &mut values[start..start + bands] {
            *v = f32::NAN;
        }
    }
    Ok(out)
}

/// Per-date seed stream: decorrelates dates while keeping the whole series
/// reproducible from one base seed.
pub(crate) fn date_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Generate one mask per date in the series, all with the same coverage
/// ratio, deterministically from `seed`.
pub fn mask_series(
    series: &ImageSeries,
    ratio: f64,
    seed: u64,
) -> Result<Vec<CloudMask>, MaskError> {
    mask_series_with(series, ratio, seed, GrfConfig::default())
}

/// [`mask_series`] with an explicit field configuration.
pub fn mask_series_with(
    series: &ImageSeries,
    ratio: f64,
    seed: u64,
    config: GrfConfig,
) -> Result<Vec<CloudMask>, MaskError> {
    let (height, width) = (series.height(), series.width());
    let sampler = GrfSampler::new(height, width, config)?;
    let mut masks = Vec::with_capacity(series.len());
    for index in 0..series.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(date_seed(seed, index));
        masks.push(generate_mask(&sampler, ratio, &mut rng)?);
    }
    Ok(masks)
}
