//! Water-quality indices over imputed imagery: Green/Red ratio, the
//! normalised difference chlorophyll index (NDCI), bloom-risk
//! classification, and daily time-series comparison.
//!
//! Index cells are computed in f64 from the f32 reflectances so that exact
//! rational fixtures (0.25 / 1.25 = 0.2) survive to the classification
//! boundaries.

use chrono::NaiveDate;
use thiserror::Error;

use crate::raster::{CloudMask, ImageSeries, MultibandImage};

/// Zero-based channel positions in the 8-band layout.
pub const GREEN_BAND: usize = 3; // green, 565 nm (band 4)
pub const RED_BAND: usize = 5; // red, 665 nm (band 6)
pub const RED_EDGE_BAND: usize = 6; // red edge, 705 nm (band 7)

/// Denominators smaller than this produce an undefined (NaN) index cell.
const DENOM_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("expected an 8-band image, got {0} bands")]
    NotEightBands(usize),
    #[error("region mask is {mask_height}x{mask_width}, image is {height}x{width}")]
    RegionMismatch {
        mask_height: usize,
        mask_width: usize,
        height: usize,
        width: usize,
    },
    #[error("region contains no cells")]
    EmptyRegion,
    #[error("cannot classify a non-finite index value")]
    NonFinite,
    #[error("series dates differ at position {position}: {left} vs {right}")]
    DateMismatch {
        position: usize,
        left: String,
        right: String,
    },
    #[error("constant series: correlation undefined")]
    ConstantSeries,
    #[error("comparison requires NDCI series on both sides")]
    NotNdci,
    #[error("comparison requires at least 2 shared dates, got {0}")]
    TooShort(usize),
}

/// Which index to derive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexKind {
    GreenRed,
    Ndci,
}

impl IndexKind {
    pub fn name(&self) -> &'static str {
        match self {
            IndexKind::GreenRed => "green_red",
            IndexKind::Ndci => "ndci",
        }
    }
}

impl std::str::FromStr for IndexKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "green_red" => Ok(IndexKind::GreenRed),
            "ndci" => Ok(IndexKind::Ndci),
            other => Err(format!("unknown index kind {other:?}")),
        }
    }
}

/// NDCI sign convention. `Standard` is (RedEdge − Red) / (RedEdge + Red),
/// under which the bloom thresholds are coherent; `Printed` is its exact
/// negation, kept selectable for comparability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NdciOrientation {
    #[default]
    Standard,
    Printed,
}

impl NdciOrientation {
    pub fn name(&self) -> &'static str {
        match self {
            NdciOrientation::Standard => "standard",
            NdciOrientation::Printed => "printed",
        }
    }
}

impl std::str::FromStr for NdciOrientation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" => Ok(NdciOrientation::Standard),
            "printed" => Ok(NdciOrientation::Printed),
            other => Err(format!("unknown NDCI orientation {other:?}")),
        }
    }
}

/// Algal-level category from the standard-orientation NDCI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BloomCategory {
    Low,
    ModerateHigh,
    BloomRisk,
}

impl BloomCategory {
    pub fn name(&self) -> &'static str {
        match self {
            BloomCategory::Low => "low",
            BloomCategory::ModerateHigh => "moderate_high",
            BloomCategory::BloomRisk => "bloom_risk",
        }
    }

    fn slot(&self) -> usize {
        match self {
            BloomCategory::Low => 0,
            BloomCategory::ModerateHigh => 1,
            BloomCategory::BloomRisk => 2,
        }
    }
}

/// One per-pixel index plane; NaN marks cells outside the region or with
/// undefined values.
#[derive(Debug, Clone)]
pub struct IndexField {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl IndexField {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Mean over finite cells; None when every cell is undefined. Pairwise
    /// summation keeps the error logarithmic in the cell count (and exact
    /// for uniform fields over power-of-two regions).
    pub fn finite_mean(&self) -> Option<f64> {
        let finite: Vec<f64> = self.values.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            return None;
        }
        Some(pairwise_sum(&finite) / finite.len() as f64)
    }
}

fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => {
            let (a, b) = xs.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

fn check_image(img: &MultibandImage, region: &CloudMask) -> Result<(), IndexError> {
    if img.bands() != 8 {
        return Err(IndexError::NotEightBands(img.bands()));
    }
    if region.height() != img.height() || region.width() != img.width() {
        return Err(IndexError::RegionMismatch {
            mask_height: region.height(),
            mask_width: region.width(),
            height: img.height(),
            width: img.width(),
        });
    }
    Ok(())
}

fn index_field(
    img: &MultibandImage,
    region: &CloudMask,
    f: impl Fn(&[f32]) -> f64,
) -> Result<IndexField, IndexError> {
    check_image(img, region)?;
    let (h, w) = (img.height(), img.width());
    let mut values = vec![f64::NAN; h * w];
    for row in 0..h {
        for col in 0..w {
            if region.is_masked(row, col) {
                values[row * w + col] = f(img.pixel(row, col));
            }
        }
    }
    Ok(IndexField {
        height: h,
        width: w,
        values,
    })
}

/// Green/Red band ratio inside the region; NaN where red is below 1e-6 or
/// either input is not finite.
pub fn green_red(img: &MultibandImage, region: &CloudMask) -> Result<IndexField, IndexError> {
    index_field(img, region, |px| {
        let green = px[GREEN_BAND] as f64;
        let red = px[RED_BAND] as f64;
        if !green.is_finite() || !red.is_finite() || red < DENOM_FLOOR {
            f64::NAN
        } else {
            green / red
        }
    })
}

/// NDCI inside the region. Cells with non-finite or negative reflectance in
/// either band, or a denominator below 1e-6, are undefined; finite values
/// therefore always lie in [−1, 1].
pub fn ndci(
    img: &MultibandImage,
    region: &CloudMask,
    orientation: NdciOrientation,
) -> Result<IndexField, IndexError> {
    index_field(img, region, move |px| {
        let red = px[RED_BAND] as f64;
        let edge = px[RED_EDGE_BAND] as f64;
        if !red.is_finite() || !edge.is_finite() || red < 0.0 || edge < 0.0 {
            return f64::NAN;
        }
        let denom = edge + red;
        if denom < DENOM_FLOOR {
            return f64::NAN;
        }
        match orientation {
            NdciOrientation::Standard => (edge - red) / denom,
            NdciOrientation::Printed => (red - edge) / denom,
        }
    })
}

/// Thresholds on the standard-orientation NDCI: below 0 is low; up to and
/// including 0.1 is moderate-to-high; above 0.1 is bloom risk.
pub fn classify_ndci(value: f64) -> Result<BloomCategory, IndexError> {
    if !value.is_finite() {
        return Err(IndexError::NonFinite);
    }
    Ok(if value < 0.0 {
        BloomCategory::Low
    } else if value <= 0.1 {
        BloomCategory::ModerateHigh
    } else {
        BloomCategory::BloomRisk
    })
}

/// One day of the spatial-mean index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexDay {
    pub date: NaiveDate,
    pub mean: f64,
    /// Set for NDCI series only.
    pub category: Option<BloomCategory>,
}

/// Daily spatial means for one index over a series, with any all-undefined
/// dates recorded separately rather than silently dropped.
#[derive(Debug, Clone)]
pub struct IndexSeries {
    pub kind: IndexKind,
    pub orientation: Option<NdciOrientation>,
    pub days: Vec<IndexDay>,
    pub dropped: Vec<NaiveDate>,
}

/// Spatially average the index inside the lake region for every date.
/// NDCI days are additionally classified from the daily mean.
pub fn series_mean_index(
    series: &ImageSeries,
    kind: IndexKind,
    orientation: NdciOrientation,
) -> Result<IndexSeries, IndexError> {
    let region = series.region();
    if region.count_masked() == 0 {
        return Err(IndexError::EmptyRegion);
    }
    let mut days = Vec::with_capacity(series.len());
    let mut dropped = Vec::new();
    for img in series.images() {
        let field = match kind {
            IndexKind::GreenRed => green_red(img, region)?,
            IndexKind::Ndci => ndci(img, region, orientation)?,
        };
        match field.finite_mean() {
            Some(mean) => {
                let category = match kind {
                    IndexKind::Ndci => Some(classify_ndci(mean)?),
                    IndexKind::GreenRed => None,
                };
                days.push(IndexDay {
                    date: img.date,
                    mean,
                    category,
                });
            }
            None => dropped.push(img.date),
        }
    }
    Ok(IndexSeries {
        kind,
        orientation: match kind {
            IndexKind::Ndci => Some(orientation),
            IndexKind::GreenRed => None,
        },
        days,
        dropped,
    })
}

/// Agreement between two daily NDCI series over the same dates.
#[derive(Debug, Clone, Copy)]
pub struct SeriesComparison {
    pub pearson_r: f64,
    pub rmse: f64,
    /// Day fractions per category (low, moderate_high, bloom_risk).
    pub observed_fractions: [f64; 3],
    pub imputed_fractions: [f64; 3],
}

fn category_fractions(days: &[IndexDay]) -> Result<[f64; 3], IndexError> {
    let mut counts = [0usize; 3];
    for day in days {
        let cat = day.category.ok_or(IndexError::NotNdci)?;
        counts[cat.slot()] += 1;
    }
    let n = days.len() as f64;
    Ok([
        counts[0] as f64 / n,
        counts[1] as f64 / n,
        counts[2] as f64 / n,
    ])
}

/// Pearson R and RMSE between the paired daily means, plus each side's
/// category composition.
pub fn compare_series(
    observed: &IndexSeries,
    imputed: &IndexSeries,
) -> Result<SeriesComparison, IndexError> {
    if observed.kind != IndexKind::Ndci || imputed.kind != IndexKind::Ndci {
        return Err(IndexError::NotNdci);
    }
    if observed.days.len() != imputed.days.len() {
        return Err(IndexError::DateMismatch {
            position: observed.days.len().min(imputed.days.len()),
            left: format!("{} days", observed.days.len()),
            right: format!("{} days", imputed.days.len()),
        });
    }
    for (pos, (a, b)) in observed.days.iter().zip(&imputed.days).enumerate() {
        if a.date != b.date {
            return Err(IndexError::DateMismatch {
                position: pos,
                left: a.date.to_string(),
                right: b.date.to_string(),
            });
        }
    }
    if observed.days.len() < 2 {
        return Err(IndexError::TooShort(observed.days.len()));
    }
    let n = observed.days.len() as f64;
    let xs: Vec<f64> = observed.days.iter().map(|d| d.mean).collect();
    let ys: Vec<f64> = imputed.days.iter().map(|d| d.mean).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    let mut sq = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        let dx = x - mx;
        let dy = y - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
        sq += (x - y) * (x - y);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(IndexError::ConstantSeries);
    }
    Ok(SeriesComparison {
        pearson_r: sxy / (sxx * syy).sqrt(),
        rmse: (sq / n).sqrt(),
        observed_fractions: category_fractions(&observed.days)?,
        imputed_fractions: category_fractions(&imputed.days)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::default_bands;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn day(k: u64) -> NaiveDate {
        NaiveDate::from_ymd_opt(2024, 1, 1).unwrap() + chrono::Days::new(k)
    }

    /// 4x4 single-pixel-varying image with fixed red / red-edge values.
    fn uniform_image(k: u64, red: f32, edge: f32, green: f32) -> MultibandImage {
        let mut img = MultibandImage::filled(day(k), 4, 4, 8, 0.05);
        for r in 0..4 {
            for c in 0..4 {
                img.set(r, c, RED_BAND, red);
                img.set(r, c, RED_EDGE_BAND, edge);
                img.set(r, c, GREEN_BAND, green);
            }
        }
        img
    }

    #[test]
    fn green_red_hand_cases() {
        let region = CloudMask::ones(4, 4);
        let img = uniform_image(0, 0.05, 0.05, 0.05);
        let f = green_red(&img, &region).unwrap();
        assert_eq!(f.get(0, 0), 1.0);
        let img = uniform_image(0, 0.03, 0.05, 0.06);
        let f = green_red(&img, &region).unwrap();
        assert_eq!(f.get(2, 2), 2.0);
        let img = uniform_image(0, 0.0, 0.05, 0.06);
        let f = green_red(&img, &region).unwrap();
        assert!(f.get(1, 1).is_nan());
    }

    #[test]
    fn ndci_orientations_and_region() {
        let mut region = CloudMask::ones(4, 4);
        region.set(3, 3, false);
        let img = uniform_image(0, 0.04, 0.06, 0.05);
        let std = ndci(&img, &region, NdciOrientation::Standard).unwrap();
        let prt = ndci(&img, &region, NdciOrientation::Printed).unwrap();
        assert!((std.get(0, 0) - 0.2).abs() < 1e-9);
        assert!((prt.get(0, 0) + 0.2).abs() < 1e-9);
        assert!(std.get(3, 3).is_nan(), "outside region");
        // Equal bands -> exactly zero both ways.
        let img = uniform_image(0, 0.05, 0.05, 0.05);
        let std = ndci(&img, &region, NdciOrientation::Standard).unwrap();
        assert_eq!(std.get(1, 2), 0.0);
    }

    #[test]
    fn ndci_antisymmetry_is_exact_cellwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let region = CloudMask::ones(8, 8);
        let mut img = MultibandImage::filled(day(0), 8, 8, 8, 0.0);
        for r in 0..8 {
            for c in 0..8 {
                for b in 0..8 {
                    img.set(r, c, b, rng.random_range(0.0..0.3));
                }
            }
        }
        let std = ndci(&img, &region, NdciOrientation::Standard).unwrap();
        let prt = ndci(&img, &region, NdciOrientation::Printed).unwrap();
        for (a, b) in std.values().iter().zip(prt.values()) {
            if a.is_finite() {
                assert_eq!(*a, -*b, "printed must be the exact negation");
                assert!((-1.0..=1.0).contains(a));
            } else {
                assert!(b.is_nan());
            }
        }
    }

    #[test]
    fn negative_reflectance_is_undefined_not_out_of_range() {
        let region = CloudMask::ones(4, 4);
        let img = uniform_image(0, -0.05, 0.1, 0.05);
        let f = ndci(&img, &region, NdciOrientation::Standard).unwrap();
        assert!(f.get(0, 0).is_nan());
    }

    #[test]
    fn classify_boundaries() {
        assert_eq!(classify_ndci(-0.05).unwrap(), BloomCategory::Low);
        assert_eq!(classify_ndci(0.0).unwrap(), BloomCategory::ModerateHigh);
        assert_eq!(classify_ndci(0.1).unwrap(), BloomCategory::ModerateHigh);
        assert_eq!(classify_ndci(0.15).unwrap(), BloomCategory::BloomRisk);
        assert!(matches!(
            classify_ndci(f64::NAN),
            Err(IndexError::NonFinite)
        ));
    }

    fn series_of(images: Vec<MultibandImage>, region: CloudMask) -> ImageSeries {
        ImageSeries::new(images, region, default_bands()).unwrap()
    }

    #[test]
    fn series_mean_classifies_daily_means() {
        let region = CloudMask::ones(4, 4);
        // Day 0: uniform NDCI 0.2 -> bloom risk. Day 1: half 0, half 0.2
        // -> mean exactly 0.1 -> moderate_high.
        let img0 = uniform_image(0, 0.5, 0.75, 0.05);
        let mut img1 = uniform_image(1, 0.5, 0.5, 0.05);
        for r in 0..2 {
            for c in 0..4 {
                img1.set(r, c, RED_BAND, 0.5);
                img1.set(r, c, RED_EDGE_BAND, 0.75);
            }
        }
        let series = series_of(vec![img0, img1], region);
        let out = series_mean_index(&series, IndexKind::Ndci, NdciOrientation::Standard).unwrap();
        assert_eq!(out.days.len(), 2);
        assert_eq!(out.days[0].mean, 0.2);
        assert_eq!(out.days[0].category, Some(BloomCategory::BloomRisk));
        assert_eq!(out.days[1].mean, 0.1);
        assert_eq!(out.days[1].category, Some(BloomCategory::ModerateHigh));
        assert!(out.dropped.is_empty());
    }

    #[test]
    fn all_undefined_date_is_dropped_and_flagged() {
        let region = CloudMask::ones(4, 4);
        let img0 = uniform_image(0, 0.04, 0.06, 0.05);
        let mut img1 = uniform_image(1, 0.0, 0.0, 0.05);
        for r in 0..4 {
            for c in 0..4 {
                img1.set(r, c, RED_BAND, f32::NAN);
            }
        }
        let series = series_of(vec![img0, img1], region);
        let out = series_mean_index(&series, IndexKind::Ndci, NdciOrientation::Standard).unwrap();
        assert_eq!(out.days.len(), 1);
        assert_eq!(out.dropped, vec![day(1)]);
    }

    #[test]
    fn empty_region_is_rejected() {
        let region = CloudMask::zeros(4, 4);
        let series = series_of(vec![uniform_image(0, 0.04, 0.06, 0.05)], region);
        assert!(matches!(
            series_mean_index(&series, IndexKind::Ndci, NdciOrientation::Standard),
            Err(IndexError::EmptyRegion)
        ));
    }

    /// Red / red-edge pairs whose standard NDCI is exactly the target value.
    fn pair_for(target: f64) -> (f32, f32) {
        // (e - r) / (e + r) = t with e + r = 1 -> e = (1 + t) / 2.
        let e = (1.0 + target) / 2.0;
        let r = 1.0 - e;
        (r as f32, e as f32)
    }

    fn ten_day_series(targets: &[f64]) -> IndexSeries {
        let region = CloudMask::ones(4, 4);
        let images: Vec<MultibandImage> = targets
            .iter()
            .enumerate()
            .map(|(k, &t)| {
                let (r, e) = pair_for(t);
                uniform_image(k as u64, r, e, 0.05)
            })
            .collect();
        series_mean_index(
            &series_of(images, region),
            IndexKind::Ndci,
            NdciOrientation::Standard,
        )
        .unwrap()
    }

    #[test]
    fn fixture_fractions_are_exact() {
        let targets = [
            -0.25, -0.125, -0.5, -0.0625, -0.375, -0.75, // 6 low
            0.03125, 0.0625, 0.09375, // 3 moderate_high
            0.25, // 1 bloom risk
        ];
        let obs = ten_day_series(&targets);
        let cmp = compare_series(&obs, &obs.clone()).unwrap();
        assert_eq!(cmp.observed_fractions, [0.6, 0.3, 0.1]);
        assert_eq!(cmp.imputed_fractions, [0.6, 0.3, 0.1]);
        assert_eq!(cmp.rmse, 0.0);
        assert!((cmp.pearson_r - 1.0).abs() < 1e-12);
        let total: f64 = cmp.observed_fractions.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn comparison_rejects_mismatched_dates_and_constants() {
        let obs = ten_day_series(&[-0.25, 0.0625, 0.25]);
        let mut shifted = obs.clone();
        shifted.days[1].date = day(30);
        assert!(matches!(
            compare_series(&obs, &shifted),
            Err(IndexError::DateMismatch { position: 1, .. })
        ));
        let flat = ten_day_series(&[0.0625, 0.0625, 0.0625]);
        assert!(matches!(
            compare_series(&obs, &flat),
            Err(IndexError::ConstantSeries)
        ));
        let short = ten_day_series(&[-0.25, 0.0625]);
        assert!(matches!(
            compare_series(&obs, &short),
            Err(IndexError::DateMismatch { .. })
        ));
    }
}
