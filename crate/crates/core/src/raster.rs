//! Multiband raster containers, cloud masks, image series, and disk I/O.
//!
//! Rasters are stored in a small binary container: the magic bytes `MBR1`,
//! three little-endian `u32` values (height, width, bands), then
//! `height * width * bands` little-endian IEEE-754 `f32` values in row-major
//! order (row, column, band). NaN payloads survive a write/read round trip
//! bit-exactly. Masks reuse the container with `bands = 1` and values in
//! `{0.0, 1.0}`.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use thiserror::Error;

const MAGIC: [u8; 4] = *b"MBR1";

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic bytes (expected MBR1)")]
    BadMagic { path: PathBuf },
    #[error("{path}: bad dimensions {height}x{width}x{bands} (height and width must be nonzero multiples of 4, bands nonzero)")]
    BadDims {
        path: PathBuf,
        height: u32,
        width: u32,
        bands: u32,
    },
    #[error("{path}: truncated payload (expected {expected} bytes, found {found})")]
    TruncatedFile {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("invalid image geometry {height}x{width}x{bands}: height and width must be nonzero multiples of 4, bands nonzero")]
    BadGeometry {
        height: usize,
        width: usize,
        bands: usize,
    },
    #[error("data length {got} does not match {height}x{width}x{bands} = {want}")]
    LengthMismatch {
        height: usize,
        width: usize,
        bands: usize,
        want: usize,
        got: usize,
    },
    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },
    #[error("{path}: mask value {value} at cell {index} is neither 0.0 nor 1.0")]
    BadMaskValue {
        path: PathBuf,
        index: usize,
        value: f32,
    },
    #[error("series dates must be strictly increasing: {prev} then {next}")]
    DateOrder { prev: NaiveDate, next: NaiveDate },
    #[error("series must contain at least one image")]
    EmptySeries,
    #[error("{path}:{line}: manifest parse error: {msg}")]
    ManifestParse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> RasterError {
    RasterError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Spectral band descriptor: a short name plus center wavelength and
/// bandwidth in nanometres.
#[derive(Debug, Clone, PartialEq)]
pub struct BandMetadata {
    pub name: String,
    pub center_nm: f64,
    pub width_nm: f64,
}

impl BandMetadata {
    pub fn new(name: &str, center_nm: f64, width_nm: f64) -> Self {
        Self {
            name: name.to_string(),
            center_nm,
            width_nm,
        }
    }
}

/// The eight-band layout used throughout the pipeline, ordered by wavelength.
pub fn default_bands() -> Vec<BandMetadata> {
    vec![
        BandMetadata::new("coastal_blue", 443.0, 20.0),
        BandMetadata::new("blue", 490.0, 50.0),
        BandMetadata::new("green_i", 531.0, 36.0),
        BandMetadata::new("green", 565.0, 36.0),
        BandMetadata::new("yellow", 610.0, 20.0),
        BandMetadata::new("red", 665.0, 31.0),
        BandMetadata::new("red_edge", 705.0, 15.0),
        BandMetadata::new("nir", 865.0, 40.0),
    ]
}

/// Number of spectral bands in the standard layout.
pub const N_BANDS: usize = 8;

fn geometry_ok(height: usize, width: usize, bands: usize) -> bool {
    height >= 4 && width >= 4 && height % 4 == 0 && width % 4 == 0 && bands >= 1
}

/// A single multiband acquisition: `height * width * bands` f32 samples in
/// row-major (row, column, band) order. Height and width are multiples of 4
/// so two levels of 2x2 pooling stay aligned. Missing observations are NaN;
/// reflectances are used unnormalized and never clipped.
#[derive(Debug, Clone, PartialEq)]
pub struct MultibandImage {
    pub date: NaiveDate,
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f32>,
}

impl MultibandImage {
    pub fn new(
        date: NaiveDate,
        height: usize,
        width: usize,
        bands: usize,
        data: Vec<f32>,
    ) -> Result<Self, RasterError> {
        if !geometry_ok(height, width, bands) {
            return Err(RasterError::BadGeometry {
                height,
                width,
                bands,
            });
        }
        let want = height * width * bands;
        if data.len() != want {
            return Err(RasterError::LengthMismatch {
                height,
                width,
                bands,
                want,
                got: data.len(),
            });
        }
        Ok(Self {
            date,
            height,
            width,
            bands,
            data,
        })
    }

    pub fn filled(date: NaiveDate, height: usize, width: usize, bands: usize, value: f32) -> Self {
        Self::new(date, height, width, bands, vec![value; height * width * bands])
            .expect("filled image geometry")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize, band: usize) -> usize {
        (row * self.width + col) * self.bands + band
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, band: usize) -> f32 {
        self.data[self.idx(row, col, band)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, band: usize, value: f32) {
        let i = self.idx(row, col, band);
        self.data[i] = value;
    }

    /// All bands at one pixel, contiguous.
    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.bands;
        &self.data[start..start + self.bands]
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &MultibandImage) -> bool {
        self.height == other.height && self.width == other.width && self.bands == other.bands
    }
}

/// A binary cloud mask: 1 marks a masked (cloud-covered, removed) pixel and
/// 0 an available one. The footprint is shared by every band of the image it
/// applies to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CloudMask {
    height: usize,
    width: usize,
    cells: Vec<u8>,
}

impl CloudMask {
    pub fn new(height: usize, width: usize, cells: Vec<u8>) -> Result<Self, RasterError> {
        if height == 0 || width == 0 {
            return Err(RasterError::BadGeometry {
                height,
                width,
                bands: 1,
            });
        }
        if cells.len() != height * width {
            return Err(RasterError::LengthMismatch {
                height,
                width,
                bands: 1,
                want: height * width,
                got: cells.len(),
            });
        }
        if let Some(pos) = cells.iter().position(|&c| c > 1) {
            return Err(RasterError::BadMaskValue {
                path: PathBuf::new(),
                index: pos,
                value: cells[pos] as f32,
            });
        }
        Ok(Self {
            height,
            width,
            cells,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![0u8; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![1u8; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn is_masked(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.width + col] == 1
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, masked: bool) {
        self.cells[row * self.width + col] = masked as u8;
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    /// Row-major (row, col) coordinates of the masked cells.
    pub fn masked_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let width = self.width;
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 1)
            .map(move |(i, _)| (i / width, i % width))
    }

    pub fn count_masked(&self) -> usize {
        self.cells.iter().filter(|&&c| c == 1).count()
    }

    pub fn ratio(&self) -> f64 {
        self.count_masked() as f64 / (self.height * self.width) as f64
    }
}

/// A date-ordered stack of co-registered images over one scene, together with
/// the region-of-interest footprint (1 = inside the water body) and per-band
/// metadata.
#[derive(Debug, Clone)]
pub struct ImageSeries {
    images: Vec<MultibandImage>,
    region: CloudMask,
    bands: Vec<BandMetadata>,
}

impl ImageSeries {
    pub fn new(
        images: Vec<MultibandImage>,
        region: CloudMask,
        bands: Vec<BandMetadata>,
    ) -> Result<Self, RasterError> {
        let first = images.first().ok_or(RasterError::EmptySeries)?;
        let (h, w, b) = (first.height, first.width, first.bands);
        for img in &images {
            if img.height != h || img.width != w || img.bands != b {
                return Err(RasterError::ShapeMismatch {
                    context: format!(
                        "image {} is {}x{}x{}, series is {}x{}x{}",
                        img.date, img.height, img.width, img.bands, h, w, b
                    ),
                });
            }
        }
        for pair in images.windows(2) {
            if pair[1].date <= pair[0].date {
                return Err(RasterError::DateOrder {
                    prev: pair[0].date,
                    next: pair[1].date,
                });
            }
        }
        if region.height != h || region.width != w {
            return Err(RasterError::ShapeMismatch {
                context: format!(
                    "region footprint is {}x{}, images are {}x{}",
                    region.height, region.width, h, w
                ),
            });
        }
        if bands.len() != b {
            return Err(RasterError::LengthMismatch {
                height: h,
                width: w,
                bands: b,
                want: b,
                got: bands.len(),
            });
        }
        Ok(Self {
            images,
            region,
            bands,
        })
    }

    pub fn images(&self) -> &[MultibandImage] {
        &self.images
    }

    pub fn region(&self) -> &CloudMask {
        &self.region
    }

    pub fn band_metadata(&self) -> &[BandMetadata] {
        &self.bands
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn height(&self) -> usize {
        self.images[0].height
    }

    pub fn width(&self) -> usize {
        self.images[0].width
    }

    pub fn n_bands(&self) -> usize {
        self.images[0].bands
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        self.images.iter().map(|img| img.date).collect()
    }

    /// Replace the image stack, keeping region and band metadata. Shapes and
    /// date order are re-validated.
    pub fn with_images(&self, images: Vec<MultibandImage>) -> Result<Self, RasterError> {
        Self::new(images, self.region.clone(), self.bands.clone())
    }
}

/// Write `bytes` to `path` atomically: a temp file in the same directory is
/// written, flushed, then renamed over the target.
fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), RasterError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let dir = dir.unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(path, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.flush().map_err(|e| io_err(path, e))?;
    tmp.persist(path)
        .map_err(|e| io_err(path, e.error))?;
    Ok(())
}

fn encode_container(height: u32, width: u32, bands: u32, values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + values.len() * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&height.to_le_bytes());
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&bands.to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct RawContainer {
    height: usize,
    width: usize,
    bands: usize,
    values: Vec<f32>,
}

fn decode_container(path: &Path, check_geometry: bool) -> Result<RawContainer, RasterError> {
    let mut file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut header = [0u8; 16];
    let mut read_total = 0usize;
    while read_total < header.len() {
        match file.read(&mut header[read_total..]) {
            Ok(0) => break,
            Ok(n) => read_total += n,
            Err(e) => return Err(io_err(path, e)),
        }
    }
    if read_total < 4 || header[..4] != MAGIC {
        return Err(RasterError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    if read_total < 16 {
        return Err(RasterError::TruncatedFile {
            path: path.to_path_buf(),
            expected: 16,
            found: read_total,
        });
    }
    let height = u32::from_le_bytes(header[4..8].try_into().unwrap());
    let width = u32::from_le_bytes(header[8..12].try_into().unwrap());
    let bands = u32::from_le_bytes(header[12..16].try_into().unwrap());
    let bad = height == 0 || width == 0 || bands == 0;
    let bad = bad || (check_geometry && !geometry_ok(height as usize, width as usize, bands as usize));
    if bad {
        return Err(RasterError::BadDims {
            path: path.to_path_buf(),
            height,
            width,
            bands,
        });
    }
    let count = height as usize * width as usize * bands as usize;
    let mut payload = vec![0u8; count * 4];
    let mut got = 0usize;
    while got < payload.len() {
        match file.read(&mut payload[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) => return Err(io_err(path, e)),
        }
    }
    if got < payload.len() {
        return Err(RasterError::TruncatedFile {
            path: path.to_path_buf(),
            expected: 16 + payload.len(),
            found: 16 + got,
        });
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(RawContainer {
        height: height as usize,
        width: width as usize,
        bands: bands as usize,
        values,
    })
}

/// Write an image to the binary container, atomically.
pub fn write_raster(path: impl AsRef<Path>, img: &MultibandImage) -> Result<(), RasterError> {
    let bytes = encode_container(
        img.height as u32,
        img.width as u32,
        img.bands as u32,
        &img.data,
    );
    atomic_write(path.as_ref(), &bytes)
}

/// Read an image from the binary container. The container carries no
/// acquisition date; the returned image is stamped with 1970-01-01 and
/// callers that track dates (series manifests) overwrite the field.
pub fn read_raster(path: impl AsRef<Path>) -> Result<MultibandImage, RasterError> {
    let path = path.as_ref();
    let raw = decode_container(path, true)?;
    MultibandImage::new(
        NaiveDate::default(),
        raw.height,
        raw.width,
        raw.bands,
        raw.values,
    )
}

/// Write a mask as a 1-band container of 0.0/1.0 values, atomically.
pub fn write_mask(path: impl AsRef<Path>, mask: &CloudMask) -> Result<(), RasterError> {
    let values: Vec<f32> = mask.cells.iter().map(|&c| c as f32).collect();
    let bytes = encode_container(mask.height as u32, mask.width as u32, 1, &values);
    atomic_write(path.as_ref(), &bytes)
}

/// Read a mask from a 1-band container; every value must be exactly 0.0 or
/// 1.0.
pub fn read_mask(path: impl AsRef<Path>) -> Result<CloudMask, RasterError> {
    let path = path.as_ref();
    let raw = decode_container(path, false)?;
    if raw.bands != 1 {
        return Err(RasterError::BadDims {
            path: path.to_path_buf(),
            height: raw.height as u32,
            width: raw.width as u32,
            bands: raw.bands as u32,
        });
    }
    let mut cells = Vec::with_capacity(raw.values.len());
    for (i, &v) in raw.values.iter().enumerate() {
        if v == 0.0 {
            cells.push(0u8);
        } else if v == 1.0 {
            cells.push(1u8);
        } else {
            return Err(RasterError::BadMaskValue {
                path: path.to_path_buf(),
                index: i,
                value: v,
            });
        }
    }
    Ok(CloudMask {
        height: raw.height,
        width: raw.width,
        cells,
    })
}

/// Merge a prediction into an observed image: masked cells take the predicted
/// value, unmasked cells pass through bit-exactly (NaN payloads included).
pub fn composite(
    observed: &MultibandImage,
    predicted: &MultibandImage,
    mask: &CloudMask,
) -> Result<MultibandImage, RasterError> {
    if !observed.same_shape(predicted) {
        return Err(RasterError::ShapeMismatch {
            context: format!(
                "observed {}x{}x{} vs predicted {}x{}x{}",
                observed.height,
                observed.width,
                observed.bands,
                predicted.height,
                predicted.width,
                predicted.bands
            ),
        });
    }
    if mask.height != observed.height || mask.width != observed.width {
        return Err(RasterError::ShapeMismatch {
            context: format!(
                "mask {}x{} vs image {}x{}",
                mask.height, mask.width, observed.height, observed.width
            ),
        });
    }
    let mut out = observed.clone();
    let bands = observed.bands;
    for row in 0..observed.height {
        for col in 0..observed.width {
            if mask.is_masked(row, col) {
                let start = (row * observed.width + col) * bands;
                out.data[start..start + bands]
                    .copy_from_slice(&predicted.data[start..start + bands]);
            }
        }
    }
    Ok(out)
}

/// A series loaded from or destined for disk: the stack itself plus the
/// per-date cloud masks (None where the manifest lists `-`).
pub struct SeriesBundle {
    pub series: ImageSeries,
    pub masks: Vec<Option<CloudMask>>,
}

/// Write a series under `dir`: `images/DATE.mbr`, `masks/DATE.mbr` (where
/// present), `region.mbr`, and a `manifest.txt` listing them. Paths in the
/// manifest are relative to `dir`. Returns the manifest path.
pub fn write_series(
    dir: impl AsRef<Path>,
    series: &ImageSeries,
    masks: &[Option<CloudMask>],
) -> Result<PathBuf, RasterError> {
    let dir = dir.as_ref();
    if masks.len() != series.len() {
        return Err(RasterError::ShapeMismatch {
            context: format!(
                "{} masks for {} images",
                masks.len(),
                series.len()
            ),
        });
    }
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    std::fs::create_dir_all(&images_dir).map_err(|e| io_err(&images_dir, e))?;
    std::fs::create_dir_all(&masks_dir).map_err(|e| io_err(&masks_dir, e))?;
    write_mask(dir.join("region.mbr"), series.region())?;
    let mut manifest = String::from("region=region.mbr\n");
    for (img, mask) in series.images().iter().zip(masks) {
        let image_rel = format!("images/{}.mbr", img.date);
        write_raster(dir.join(&image_rel), img)?;
        let mask_rel = match mask {
            Some(m) => {
                let rel = format!("masks/{}.mbr", img.date);
                write_mask(dir.join(&rel), m)?;
                rel
            }
            None => "-".to_string(),
        };
        let _ = writeln!(manifest, "{},{},{}", img.date, image_rel, mask_rel);
    }
    let manifest_path = dir.join("manifest.txt");
    atomic_write(&manifest_path, manifest.as_bytes())?;
    Ok(manifest_path)
}

/// Load a series from a manifest written by [`write_series`] (or by hand).
/// The first non-blank line must be `region=<path>`; each following line is
/// `date,image_path,mask_path` with `-` for an absent mask. Paths are
/// resolved relative to the manifest's directory. Band metadata is the
/// standard eight-band layout.
pub fn load_series(manifest_path: impl AsRef<Path>) -> Result<SeriesBundle, RasterError> {
    let manifest_path = manifest_path.as_ref();
    let text =
        std::fs::read_to_string(manifest_path).map_err(|e| io_err(manifest_path, e))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let parse_err = |line: usize, msg: String| RasterError::ManifestParse {
        path: manifest_path.to_path_buf(),
        line,
        msg,
    };

    let mut region: Option<CloudMask> = None;
    let mut images = Vec::new();
    let mut masks = Vec::new();
    for (lineno, raw_line) in text.lines().enumerate() {
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if region.is_none() {
            let rel = line
                .strip_prefix("region=")
                .ok_or_else(|| parse_err(lineno + 1, "expected region=<path>".into()))?;
            region = Some(read_mask(base.join(rel.trim()))?);
            continue;
        }
        let mut parts = line.split(',');
        let date_s = parts.next().unwrap_or("").trim();
        let image_rel = parts.next().map(str::trim);
        let mask_rel = parts.next().map(str::trim);
        if parts.next().is_some() || image_rel.is_none() || mask_rel.is_none() {
            return Err(parse_err(
                lineno + 1,
                "expected date,image_path,mask_path".into(),
            ));
        }
        let date = NaiveDate::parse_from_str(date_s, "%Y-%m-%d")
            .map_err(|e| parse_err(lineno + 1, format!("bad date {date_s:?}: {e}")))?;
        let mut img = read_raster(base.join(image_rel.unwrap()))?;
        img.date = date;
        images.push(img);
        masks.push(match mask_rel.unwrap() {
            "-" => None,
            rel => Some(read_mask(base.join(rel))?),
        });
    }
    let region = region.ok_or_else(|| parse_err(1, "missing region=<path> line".into()))?;
    let series = ImageSeries::new(images, region, default_bands())?;
    Ok(SeriesBundle { series, masks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn date(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn ramp_image(d: &str, h: usize, w: usize, b: usize) -> MultibandImage {
        let data: Vec<f32> = (0..h * w * b).map(|i| i as f32 * 0.01).collect();
        MultibandImage::new(date(d), h, w, b, data).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.mbr");
        let mut img = ramp_image("2024-05-01", 8, 4, 3);
        // A quiet NaN with a nonstandard payload, a signalling-style pattern,
        // and a negative zero must all survive untouched.
        img.set(0, 0, 0, f32::from_bits(0x7fc0_1234));
        img.set(1, 2, 1, f32::from_bits(0xffc0_0001));
        img.set(7, 3, 2, -0.0);
        write_raster(&path, &img).unwrap();
        let back = read_raster(&path).unwrap();
        assert_eq!(back.height(), 8);
        assert_eq!(back.width(), 4);
        assert_eq!(back.bands(), 3);
        for (a, b) in img.values().iter().zip(back.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.mbr");
        std::fs::write(&path, b"JUNKxxxxxxxxxxxxxxxx").unwrap();
        match read_raster(&path) {
            Err(RasterError::BadMagic { .. }) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.mbr");
        let img = ramp_image("2024-05-01", 4, 4, 2);
        let bytes = encode_container(4, 4, 2, img.values());
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match read_raster(&path) {
            Err(RasterError::TruncatedFile { .. }) => {}
            other => panic!("expected TruncatedFile, got {other:?}"),
        }
    }

    #[test]
    fn bad_dims_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for (h, w, b) in [(0u32, 4u32, 1u32), (6, 4, 1), (4, 10, 2)] {
            let path = dir.path().join(format!("bad_{h}_{w}_{b}.mbr"));
            let n = (h * w * b) as usize;
            let bytes = encode_container(h, w, b, &vec![0.0f32; n]);
            std::fs::write(&path, bytes).unwrap();
            match read_raster(&path) {
                Err(RasterError::BadDims { .. }) => {}
                other => panic!("expected BadDims for {h}x{w}x{b}, got {other:?}"),
            }
        }
    }

    #[test]
    fn geometry_validation_on_construction() {
        let r = MultibandImage::new(date("2024-01-01"), 6, 4, 1, vec![0.0; 24]);
        assert!(matches!(r, Err(RasterError::BadGeometry { .. })));
        let r = MultibandImage::new(date("2024-01-01"), 4, 4, 1, vec![0.0; 15]);
        assert!(matches!(r, Err(RasterError::LengthMismatch { .. })));
    }

    #[test]
    fn mask_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.mbr");
        let mut mask = CloudMask::zeros(4, 8);
        mask.set(0, 0, true);
        mask.set(3, 7, true);
        mask.set(2, 4, true);
        write_mask(&path, &mask).unwrap();
        let back = read_mask(&path).unwrap();
        assert_eq!(mask, back);
        assert_eq!(back.count_masked(), 3);

        // A container holding 0.5 is not a valid mask.
        let bad = dir.path().join("bad_mask.mbr");
        let bytes = encode_container(4, 4, 1, &[0.5f32; 16]);
        std::fs::write(&bad, bytes).unwrap();
        assert!(matches!(
            read_mask(&bad),
            Err(RasterError::BadMaskValue { .. })
        ));
    }

    #[test]
    fn composite_merges_by_mask() {
        let observed = ramp_image("2024-05-01", 4, 4, 2);
        let mut predicted = observed.clone();
        for v in predicted.values_mut() {
            *v += 100.0;
        }
        let mut mask = CloudMask::zeros(4, 4);
        mask.set(1, 1, true);
        mask.set(2, 3, true);
        let merged = composite(&observed, &predicted, &mask).unwrap();
        for row in 0..4 {
            for col in 0..4 {
                for band in 0..2 {
                    let want = if mask.is_masked(row, col) {
                        predicted.get(row, col, band)
                    } else {
                        observed.get(row, col, band)
                    };
                    assert_eq!(merged.get(row, col, band).to_bits(), want.to_bits());
                }
            }
        }
    }

    #[test]
    fn composite_rejects_shape_mismatch() {
        let a = ramp_image("2024-05-01", 4, 4, 2);
        let b = ramp_image("2024-05-01", 4, 8, 2);
        let mask = CloudMask::zeros(4, 4);
        assert!(matches!(
            composite(&a, &b, &mask),
            Err(RasterError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn series_requires_increasing_dates() {
        let imgs = vec![
            ramp_image("2024-05-02", 4, 4, 8),
            ramp_image("2024-05-01", 4, 4, 8),
        ];
        let r = ImageSeries::new(imgs, CloudMask::ones(4, 4), default_bands());
        assert!(matches!(r, Err(RasterError::DateOrder { .. })));
    }

    #[test]
    fn series_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = vec![
            ramp_image("2024-05-01", 8, 8, 8),
            ramp_image("2024-05-06", 8, 8, 8),
            ramp_image("2024-05-11", 8, 8, 8),
        ];
        let mut region = CloudMask::zeros(8, 8);
        for r in 2..6 {
            for c in 2..6 {
                region.set(r, c, true);
            }
        }
        let series = ImageSeries::new(imgs, region, default_bands()).unwrap();
        let mut m1 = CloudMask::zeros(8, 8);
        m1.set(3, 3, true);
        let masks = vec![Some(m1.clone()), None, Some(m1.clone())];
        let manifest = write_series(dir.path(), &series, &masks).unwrap();

        let bundle = load_series(&manifest).unwrap();
        assert_eq!(bundle.series.len(), 3);
        assert_eq!(
            bundle.series.dates(),
            vec![date("2024-05-01"), date("2024-05-06"), date("2024-05-11")]
        );
        assert_eq!(bundle.series.region(), series.region());
        assert_eq!(bundle.masks[0].as_ref(), Some(&m1));
        assert!(bundle.masks[1].is_none());
        for (a, b) in series.images().iter().zip(bundle.series.images()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn manifest_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        std::fs::write(&path, "not-a-region-line\n").unwrap();
        assert!(matches!(
            load_series(&path),
            Err(RasterError::ManifestParse { .. })
        ));
    }

    proptest! {
        /// Any f32 bit pattern survives the container round trip bit-exactly.
        #[test]
        fn prop_round_trip_any_bits(bits in proptest::collection::vec(any::<u32>(), 16)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("prop.mbr");
            let data: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
            let img = MultibandImage::new(NaiveDate::default(), 4, 4, 1, data.clone()).unwrap();
            write_raster(&path, &img).unwrap();
            let back = read_raster(&path).unwrap();
            for (a, b) in data.iter().zip(back.values()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        /// Composite never touches unmasked cells and always takes predicted
        /// values at masked cells.
        #[test]
        fn prop_composite_partition(maskbits in proptest::collection::vec(0u8..=1, 16)) {
            let observed = ramp_image("2024-01-01", 4, 4, 2);
            let mut predicted = observed.clone();
            for v in predicted.values_mut() { *v = -*v - 1.0; }
            let mask = CloudMask::new(4, 4, maskbits).unwrap();
            let merged = composite(&observed, &predicted, &mask).unwrap();
            for row in 0..4 {
                for col in 0..4 {
                    for band in 0..2 {
                        let want = if mask.is_masked(row, col) {
                            predicted.get(row, col, band)
                        } else {
                            observed.get(row, col, band)
                        };
                        prop_assert_eq!(merged.get(row, col, band).to_bits(), want.to_bits());
                    }
                }
            }
        }
    }
}
