//! Minimal deterministic chart rendering for `report --png`: a grouped bar
//! chart of per-band RMSE and a line chart of the daily index series, both
//! drawn pixel-by-pixel so the output depends only on the CSV contents.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::CliError;

const WIDTH: u32 = 720;
const HEIGHT: u32 = 400;
const MARGIN: u32 = 48;

const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    for y in MARGIN..=HEIGHT - MARGIN {
        img.put_pixel(MARGIN, y, axis);
    }
    for x in MARGIN..=WIDTH - MARGIN {
        img.put_pixel(x, HEIGHT - MARGIN, axis);
    }
    img
}

fn save(img: &RgbImage, path: &Path) -> Result<(), CliError> {
    img.save(path)
        .map_err(|e| CliError::Internal(format!("writing {}: {e}", path.display())))
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < WIDTH && (y as u32) < HEIGHT {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn line(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as i64;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        put(
            img,
            (x0 + (x1 - x0) * t).round() as i64,
            (y0 + (y1 - y0) * t).round() as i64,
            color,
        );
    }
}

/// Legend swatches along the top margin, one per series.
fn legend(img: &mut RgbImage, n: usize) {
    for (i, color) in PALETTE.iter().take(n).enumerate() {
        let x0 = MARGIN + 10 + (i as u32) * 30;
        for dx in 0..20u32 {
            for dy in 0..8u32 {
                put(img, (x0 + dx) as i64, (MARGIN / 2 + dy) as i64, *color);
            }
        }
    }
}

fn parse_fields(line: &str) -> Vec<&str> {
    line.split(',').map(str::trim).collect()
}

/// Grouped bar chart of rmse_mean per band, one bar color per model, from the
/// evaluation CSV (columns model,band,rmse_mean,...).
pub fn evaluation_png(csv: &Path, out: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(csv)
        .map_err(|e| CliError::Internal(format!("reading {}: {e}", csv.display())))?;
    let mut models: Vec<String> = Vec::new();
    let mut rows: Vec<(usize, usize, f64)> = Vec::new(); // (model idx, band, rmse)
    for line in text.lines().skip(1) {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields = parse_fields(line);
        if fields.len() < 3 {
            continue;
        }
        let model = fields[0].to_string();
        let model_idx = match models.iter().position(|m| *m == model) {
            Some(i) => i,
            None => {
                models.push(model);
                models.len() - 1
            }
        };
        let band: usize = fields[1].parse().unwrap_or(0);
        let rmse: f64 = fields[2].parse().unwrap_or(f64::NAN);
        if rmse.is_finite() {
            rows.push((model_idx, band, rmse));
        }
    }
    let mut img = canvas();
    let n_bands = rows.iter().map(|r| r.1 + 1).max().unwrap_or(1);
    let max_rmse = rows.iter().map(|r| r.2).fold(0.0f64, f64::max).max(1e-12);
    let plot_w = (WIDTH - 2 * MARGIN) as f64;
    let plot_h = (HEIGHT - 2 * MARGIN) as f64;
    let group_w = plot_w / n_bands as f64;
    let bar_w = (group_w / (models.len() + 1) as f64).max(1.0);
    for (model_idx, band, rmse) in &rows {
        let color = PALETTE[model_idx % PALETTE.len()];
        let x0 = MARGIN as f64 + *band as f64 * group_w + (*model_idx as f64 + 0.5) * bar_w;
        let height = (rmse / max_rmse * plot_h).round() as i64;
        let base = (HEIGHT - MARGIN) as i64;
        for dx in 0..bar_w.round().max(1.0) as i64 {
            for dy in 0..height {
                put(&mut img, x0.round() as i64 + dx, base - 1 - dy, color);
            }
        }
    }
    legend(&mut img, models.len());
    save(&img, out)
}

/// Line chart of the daily mean-index series, one polyline per CSV.
/// `series` pairs a label with a CSV of columns date,index_kind,mean_value,…
pub fn indices_png(series: &[(String, std::path::PathBuf)], out: &Path) -> Result<(), CliError> {
    let mut curves: Vec<Vec<f64>> = Vec::new();
    for (_, path) in series {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Internal(format!("reading {}: {e}", path.display())))?;
        let mut values = Vec::new();
        for line in text.lines().skip(1) {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields = parse_fields(line);
            if fields.len() < 3 {
                continue;
            }
            values.push(fields[2].parse::<f64>().unwrap_or(f64::NAN));
        }
        curves.push(values);
    }
    let finite: Vec<f64> = curves
        .iter()
        .flatten()
        .copied()
        .filter(|v| v.is_finite())
        .collect();
    let (mut lo, mut hi) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !lo.is_finite() || !hi.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let mut img = canvas();
    let plot_w = (WIDTH - 2 * MARGIN) as f64;
    let plot_h = (HEIGHT - 2 * MARGIN) as f64;
    for (ci, values) in curves.iter().enumerate() {
        let color = PALETTE[ci % PALETTE.len()];
        let n = values.len().max(2);
        let mut prev: Option<(f64, f64)> = None;
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let x = MARGIN as f64 + i as f64 / (n - 1) as f64 * plot_w;
            let y = (HEIGHT - MARGIN) as f64 - (v - lo) / (hi - lo) * plot_h;
            if let Some((px, py)) = prev {
                line(&mut img, px, py, x, y, color);
            }
            prev = Some((x, y));
        }
    }
    legend(&mut img, curves.len());
    save(&img, out)
}
