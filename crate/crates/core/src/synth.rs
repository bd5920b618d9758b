//! Deterministic synthetic lake-scene generator.
//!
//! Scenes combine, per band: a constant water-leaving reflectance level, one
//! shared low-frequency spatial field (long-range Gaussian random field), a
//! drifting plane-wave texture (surface waves / glint streaks), a moving
//! seasonal bloom patch that raises green and red-edge reflectance inside the
//! lake, and seeded Gaussian pixel noise. Values are clamped to ≥ 0. The
//! shared spatial structure is drawn once from the scene seed; each date's
//! noise comes from a seed derived from the date index, so dates are
//! independently reproducible.

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::maskgen::{date_seed, GrfConfig, GrfSampler, MaskError};
use crate::raster::{default_bands, CloudMask, ImageSeries, MultibandImage, RasterError};

/// Errors from scene generation.
#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene configuration: {msg}")]
    BadConfig { msg: String },
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Parameters of a synthetic scene.
#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub n_dates: usize,
    pub seed: u64,
    /// Peak reflectance added by the bloom patch (scaled per band).
    pub bloom_amplitude: f64,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise_sd: f64,
    /// Amplitude of the drifting plane-wave surface texture (scaled per
    /// band). Zero gives a purely smooth scene.
    pub wave_amplitude: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            n_dates: 60,
            seed: 0,
            bloom_amplitude: 0.05,
            noise_sd: 0.01,
            wave_amplitude: 0.035,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::BadConfig { msg });
        if self.height < 4 || self.width < 4 || self.height % 4 != 0 || self.width % 4 != 0 {
            return bad(format!(
                "scene dimensions must be multiples of 4, got {}x{}",
                self.height, self.width
            ));
        }
        if self.n_dates < 6 {
            return bad(format!("need at least 6 dates, got {}", self.n_dates));
        }
        for (name, v) in [
            ("bloom_amplitude", self.bloom_amplitude),
            ("noise_sd", self.noise_sd),
            ("wave_amplitude", self.wave_amplitude),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// Mean water reflectance per band (coastal blue .. NIR).
const BAND_LEVELS: [f64; 8] = [0.05, 0.055, 0.06, 0.065, 0.06, 0.0575, 0.0525, 0.045];
/// Standard deviation of the shared low-frequency field's contribution.
const SMOOTH_AMPLITUDE: f64 = 0.015;
/// Per-band weight of the bloom patch: strongest on red-edge (6) and green
/// (3), absent from red (5) and coastal blue (0), so the bloom raises
/// standard-orientation NDCI.
const BLOOM_WEIGHTS: [f64; 8] = [0.0, 0.1, 0.4, 0.6, 0.1, 0.0, 1.0, 0.5];
/// Per-band weight of the wave texture.
const WAVE_WEIGHTS: [f64; 8] = [1.0, 1.1, 0.9, 1.0, 0.85, 1.2, 0.95, 0.8];
/// Plane-wave components: (wavelength px, direction rad, phase speed rad/date).
const WAVE_SPECS: [(f64, f64, f64); 3] = [
    (7.0, 0.45, 0.31),
    (9.0, 1.85, -0.22),
    (6.0, 1.15, 0.17),
];

/// The elliptical lake footprint used by every date of a scene.
pub fn lake_region(height: usize, width: usize) -> CloudMask {
    let (cy, cx) = (height as f64 / 2.0, width as f64 / 2.0);
    let (ry, rx) = (0.38 * height as f64, 0.43 * width as f64);
    let mut region = CloudMask::zeros(height, width);
    for r in 0..height {
        for c in 0..width {
            let dy = (r as f64 - cy) / ry;
            let dx = (c as f64 - cx) / rx;
            if dy * dy + dx * dx <= 1.0 {
                region.set(r, c, true);
            }
        }
    }
    region
}

/// Generate the full image series for `cfg`, deterministic given the seed.
pub fn generate_scene(cfg: &SceneConfig) -> Result<ImageSeries, SynthError> {
    cfg.validate()?;
    let (h, w, n) = (cfg.height, cfg.width, cfg.n_dates);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sampler = GrfSampler::new(
        h,
        w,
        GrfConfig {
            range: 0.8,
            ..GrfConfig::default()
        },
    )?;
    let sigma = sampler.config().sigma2.sqrt();
    // Shared unit-variance smooth field.
    let smooth: Vec<f64> = sampler.sample(&mut rng).iter().map(|v| v / sigma).collect();
    let phases: Vec<f64> = (0..WAVE_SPECS.len())
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();

    let region = lake_region(h, w);
    let start = NaiveDate::from_ymd_opt(2024, 3, 1).expect("valid fixed start date");
    let mut images = Vec::with_capacity(n);
    for t in 0..n {
        let date = start
            .checked_add_days(Days::new(t as u64))
            .expect("date range fits in chrono");
        let mut img = MultibandImage::filled(date, h, w, 8, 0.0);

        // Seasonal bloom: a Gaussian patch moving on an ellipse, strongest
        // mid-series.
        let season = (std::f64::consts::PI * t as f64 / (n - 1) as f64).sin().powi(2);
        let ang = std::f64::consts::TAU * t as f64 / n as f64;
        let bloom_cy = h as f64 / 2.0 + 0.125 * h as f64 * ang.sin();
        let bloom_cx = w as f64 / 2.0 + 0.1875 * w as f64 * ang.cos();
        let bloom_sigma = 0.125 * h as f64;

        // Wave phase advances with the date; spatial normalisation keeps the
        // summed texture at unit variance.
        let wave_norm = (WAVE_SPECS.len() as f64 / 2.0).sqrt();

        let mut noise_rng = ChaCha8Rng::seed_from_u64(date_seed(cfg.seed, t));
        for r in 0..h {
            for c in 0..w {
                let mut wave = 0.0;
                for (k, &(lam, dir, speed)) in WAVE_SPECS.iter().enumerate() {
                    let proj = r as f64 * dir.sin() + c as f64 * dir.cos();
                    wave += (std::f64::consts::TAU * proj / lam + phases[k] + speed * t as f64)
                        .sin();
                }
                wave /= wave_norm;

                let dy = r as f64 - bloom_cy;
                let dx = c as f64 - bloom_cx;
                let bloom = if region.is_masked(r, c) {
                    (-(dy * dy + dx * dx) / (2.0 * bloom_sigma * bloom_sigma)).exp() * season
                } else {
                    0.0
                };

                let base = SMOOTH_AMPLITUDE * smooth[r * w + c];
                for b in 0..8 {
                    let noise: f64 = StandardNormal.sample(&mut noise_rng);
                    let v = BAND_LEVELS[b]
                        + base
                        + cfg.wave_amplitude * wave * WAVE_WEIGHTS[b]
                        + cfg.bloom_amplitude * bloom * BLOOM_WEIGHTS[b]
                        + cfg.noise_sd * noise;
                    img.set(r, c, b, v.max(0.0) as f32);
                }
            }
        }
        images.push(img);
    }
    Ok(ImageSeries::new(images, region, default_bands())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::indices::{series_mean_index, IndexKind, NdciOrientation};

    fn small_cfg() -> SceneConfig {
        SceneConfig {
            height: 16,
            width: 16,
            n_dates: 12,
            seed: 7,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn rejects_bad_dimensions_and_date_counts() {
        let mut cfg = small_cfg();
        cfg.height = 10;
        assert!(matches!(
            generate_scene(&cfg),
            Err(SynthError::BadConfig { .. })
        ));
        let mut cfg = small_cfg();
        cfg.n_dates = 5;
        assert!(matches!(
            generate_scene(&cfg),
            Err(SynthError::BadConfig { .. })
        ));
        let mut cfg = small_cfg();
        cfg.noise_sd = -0.1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn same_seed_is_bitwise_identical_and_seeds_differ() {
        let cfg = small_cfg();
        let a = generate_scene(&cfg).unwrap();
        let b = generate_scene(&cfg).unwrap();
        for (ia, ib) in a.images().iter().zip(b.images()) {
            let bits_a: Vec<u32> = ia.values().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = ib.values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        let mut other = small_cfg();
        other.seed = 8;
        let c = generate_scene(&other).unwrap();
        assert_ne!(a.images()[0].values(), c.images()[0].values());
        assert_eq!(a.region().cells(), c.region().cells());
    }

    #[test]
    fn values_are_non_negative_and_region_is_constant() {
        let series = generate_scene(&small_cfg()).unwrap();
        assert_eq!(series.len(), 12);
        for img in series.images() {
            assert!(img.values().iter().all(|v| v.is_finite() && *v >= 0.0));
        }
        let inside = series.region().count_masked();
        assert!(inside > 0 && inside < 16 * 16);
    }

    #[test]
    fn neighbouring_pixels_correlate_above_half_in_every_band() {
        let cfg = SceneConfig {
            height: 32,
            width: 32,
            n_dates: 6,
            seed: 3,
            ..SceneConfig::default()
        };
        let series = generate_scene(&cfg).unwrap();
        let img = &series.images()[0];
        for b in 0..8 {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for r in 0..31 {
                for c in 0..32 {
                    xs.push(img.get(r, c, b) as f64);
                    ys.push(img.get(r + 1, c, b) as f64);
                }
            }
            let r = pearson(&xs, &ys);
            assert!(r > 0.5, "band {b}: neighbour correlation {r}");
        }
    }

    #[test]
    fn bloom_raises_ndci_at_peak_versus_off_peak() {
        let cfg = SceneConfig {
            height: 32,
            width: 32,
            n_dates: 30,
            seed: 5,
            ..SceneConfig::default()
        };
        let series = generate_scene(&cfg).unwrap();
        let idx = series_mean_index(&series, IndexKind::Ndci, NdciOrientation::Standard).unwrap();
        let means: Vec<f64> = idx.days.iter().map(|d| d.mean).collect();
        let peak = means[12..18].iter().sum::<f64>() / 6.0;
        let off = (means[..3].iter().sum::<f64>() + means[27..].iter().sum::<f64>()) / 6.0;
        assert!(peak > off, "peak {peak} vs off-peak {off}");
    }

    #[test]
    fn zero_bloom_keeps_daily_ndci_means_stable() {
        let cfg = SceneConfig {
            height: 32,
            width: 32,
            n_dates: 30,
            seed: 5,
            bloom_amplitude: 0.0,
            ..SceneConfig::default()
        };
        let series = generate_scene(&cfg).unwrap();
        let idx = series_mean_index(&series, IndexKind::Ndci, NdciOrientation::Standard).unwrap();
        let means: Vec<f64> = idx.days.iter().map(|d| d.mean).collect();
        let overall = means.iter().sum::<f64>() / means.len() as f64;
        for (t, m) in means.iter().enumerate() {
            assert!(
                (m - overall).abs() <= 0.05,
                "date {t}: mean {m} vs baseline {overall}"
            );
        }
    }

    fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        let mut syy = 0.0;
        for (x, y) in xs.iter().zip(ys) {
            sxy += (x - mx) * (y - my);
            sxx += (x - mx) * (x - mx);
            syy += (y - my) * (y - my);
        }
        sxy / (sxx.sqrt() * syy.sqrt())
    }
}
