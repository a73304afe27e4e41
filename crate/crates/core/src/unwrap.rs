//! Grayscale projection of deviation maps and overlapping tiling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::DeviationMap;
use crate::scalar::Scalar;

pub const DEFAULT_TILE: usize = 64;
pub const DEFAULT_OVERLAP: f64 = 50.0;
pub const DEFAULT_Z_RANGE: (f64, f64) = (-1.0, 1.0);
/// Fill value for tile pixels that fall outside the image.
pub const PAD_GRAY: u8 = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UnwrapError {
    #[error("gray mapping range ({0}, {1}) is empty or not finite")]
    BadRange(f64, f64),
    #[error("invalid image: {0}")]
    InvalidImage(String),
}

/// Physical calibration shared by an image and every row source derived
/// from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    /// Pixels per row (angular samples).
    pub width: usize,
    /// Mm of arc per pixel.
    pub theta_pitch_mm: f64,
    /// Mm per pixel along the cable.
    pub axial_pitch_mm: f64,
    /// Axial position of row 0, mm.
    pub axial_origin: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl ImageMeta {
    /// Deviation in mm represented by a gray level.
    pub fn gray_to_z(&self, gray: f64) -> f64 {
        self.z_min + gray / 255.0 * (self.z_max - self.z_min)
    }

    /// Millimetres per gray level.
    pub fn gray_step(&self) -> f64 {
        (self.z_max - self.z_min) / 255.0
    }

    pub fn circumference(&self) -> f64 {
        self.width as f64 * self.theta_pitch_mm
    }

    /// Extent of pixel columns `[col, col + n)` in mm of arc, cell edges
    /// half a pixel around sample centers; may exceed the circumference.
    pub fn theta_extent(&self, col: usize, n: usize) -> (f64, f64) {
        let p = self.theta_pitch_mm;
        ((col as f64 - 0.5) * p, (col as f64 + n as f64 - 0.5) * p)
    }

    pub fn y_extent(&self, row: usize, n: usize) -> (f64, f64) {
        let p = self.axial_pitch_mm;
        (
            self.axial_origin + (row as f64 - 0.5) * p,
            self.axial_origin + (row as f64 + n as f64 - 0.5) * p,
        )
    }

    /// Gray level for deviation `z`: 255·clamp((z − z_min)/(z_max − z_min)),
    /// rounded half up.
    pub fn z_to_gray(&self, z: f64) -> u8 {
        let t = ((z - self.z_min) / (self.z_max - self.z_min)).clamp(0.0, 1.0);
        // absorb representation error so exact halves like 178.5 round up
        (255.0 * t + 0.5 + 1e-9).floor().min(255.0) as u8
    }
}

/// Unwrapped surface: rows are profiles, columns angular samples.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub meta: ImageMeta,
    pub height: usize,
    /// Row-major gray levels.
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(meta: ImageMeta, height: usize, pixels: Vec<u8>) -> Result<Self, UnwrapError> {
        if meta.width == 0 || height == 0 {
            return Err(UnwrapError::InvalidImage("zero-size image".into()));
        }
        if pixels.len() != meta.width * height {
            return Err(UnwrapError::InvalidImage(format!(
                "{} pixels for a {}x{} image",
                pixels.len(),
                meta.width,
                height
            )));
        }
        if !(meta.z_min < meta.z_max) {
            return Err(UnwrapError::BadRange(meta.z_min, meta.z_max));
        }
        Ok(Self { meta, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.meta.width
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.meta.width + col]
    }
}

/// Random access to image rows; lets tiles be cut from a full image or
/// from a rolling buffer of recent rows.
pub trait GrayRows {
    fn meta(&self) -> &ImageMeta;
    /// Number of rows seen so far (absolute row indices are `0..height`).
    fn height(&self) -> usize;
    /// Row `j`; callers only ask for rows still held by the source.
    fn row(&self, j: usize) -> &[u8];
}

impl GrayRows for GrayImage {
    fn meta(&self) -> &ImageMeta {
        &self.meta
    }

    fn height(&self) -> usize {
        self.height
    }

    fn row(&self, j: usize) -> &[u8] {
        let w = self.meta.width;
        &self.pixels[j * w..(j + 1) * w]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrayTile {
    pub size: usize,
    /// Row-major `size × size` gray levels.
    pub pixels: Vec<u8>,
    /// (row, col) of the top-left pixel in the source image.
    pub origin: (usize, usize),
    /// Mm of arc; may run past the circumference when the tile wraps.
    pub theta_range: (f64, f64),
    pub y_range: (f64, f64),
    pub pad_flag: bool,
}

impl GrayTile {
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.size + col]
    }
}

/// Projects a deviation map onto 8-bit gray levels over `z_range`.
pub fn unwrap_to_gray<T: Scalar>(dev: &DeviationMap<T>, z_range: (f64, f64)) -> Result<GrayImage, UnwrapError> {
    let (z_min, z_max) = z_range;
    if !(z_min < z_max) || !z_min.is_finite() || !z_max.is_finite() {
        return Err(UnwrapError::BadRange(z_min, z_max));
    }
    let width = dev.cols();
    let meta = ImageMeta {
        width,
        theta_pitch_mm: std::f64::consts::TAU * dev.reference_radius.as_f64() / width.max(1) as f64,
        axial_pitch_mm: dev.axial_pitch.as_f64(),
        axial_origin: dev.axial_origin.as_f64(),
        z_min,
        z_max,
    };
    let pixels = dev.z.iter().flatten().map(|z| meta.z_to_gray(z.as_f64())).collect();
    GrayImage::new(meta, dev.rows(), pixels)
}

/// Stride between tile origins for a given overlap percentage.
pub fn tile_stride(tile: usize, overlap: f64) -> usize {
    ((tile as f64 * (1.0 - overlap / 100.0)).round() as usize).max(1)
}

/// Tile origins along one axis: every multiple of `stride` whose tile fits,
/// plus one tile flush with the far edge when a remainder is left.
pub fn tile_starts(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let last = len - tile;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if *starts.last().unwrap() != last {
        starts.push(last);
    }
    starts
}

/// Cuts a `size × size` tile at `(row, col)`. Columns wrap around the θ
/// seam when the image is at least one tile wide; anything else outside the
/// image is padded with mid-gray.
pub fn extract_tile<S: GrayRows + ?Sized>(src: &S, row: usize, col: usize, size: usize) -> GrayTile {
    let meta = *src.meta();
    let width = meta.width;
    let wraps = width >= size;
    let mut pixels = vec![PAD_GRAY; size * size];
    let mut pad_flag = false;
    for r in 0..size {
        let j = row + r;
        if j >= src.height() {
            pad_flag = true;
            continue;
        }
        let line = src.row(j);
        let out = &mut pixels[r * size..(r + 1) * size];
        if wraps {
            let first = (width - col % width).min(size);
            out[..first].copy_from_slice(&line[col % width..col % width + first]);
            if first < size {
                out[first..].copy_from_slice(&line[..size - first]);
            }
        } else {
            let n = width.saturating_sub(col).min(size);
            out[..n].copy_from_slice(&line[col..col + n]);
            pad_flag |= n < size;
        }
    }
    GrayTile {
        size,
        pixels,
        origin: (row, col % width.max(1)),
        theta_range: meta.theta_extent(col % width.max(1), size),
        y_range: meta.y_extent(row, size),
        pad_flag,
    }
}

/// Overlapping tiles covering the whole image; `overlap` is a percentage.
pub fn make_tiles(img: &GrayImage, tile: usize, overlap: f64) -> Vec<GrayTile> {
    assert!(tile >= 8, "tile must be at least 8 pixels");
    assert!((0.0..100.0).contains(&overlap), "overlap must lie in [0, 100)");
    let stride = tile_stride(tile, overlap);
    let rows = tile_starts(img.height, tile, stride);
    let cols = tile_starts(img.width(), tile, stride);
    rows.iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .map(|(r, c)| extract_tile(img, r, c, tile))
        .collect()
}
