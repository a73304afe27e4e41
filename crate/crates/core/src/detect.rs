//! Two-phase defect detection: screen overlapping tiles with one classifier,
//! confirm candidates with a second, merge confirmed tiles into regions.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Profile, SurfaceMesh};
use crate::nn::{argmax, median3x3, NnError, Taxonomy, TileClassifier, CLEAN_LABEL};
use crate::scalar::Scalar;
use crate::unwrap::{extract_tile, make_tiles, tile_starts, tile_stride, GrayImage, GrayRows, GrayTile, ImageMeta, UnwrapError};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Unwrap(#[from] UnwrapError),
    #[error("mesh has {rows} profiles, fewer than one {tile}-row tile")]
    MeshTooShort { rows: usize, tile: usize },
    #[error("classifier labels must start with \"clean\", got {0:?}")]
    Labels(Vec<String>),
    #[error("invalid detection config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    /// Phase-one candidate threshold on the weighted defect probability.
    pub tau1: f64,
    /// Phase-two confirmation threshold.
    pub tau2: f64,
    /// Tile overlap, percent.
    pub overlap: f64,
    pub tile: usize,
    /// Per-label multipliers applied to defect-class probabilities.
    pub class_weights: Option<Vec<f64>>,
    pub taxonomy: Taxonomy,
    /// Deviation range mapped onto gray 0–255, mm.
    pub z_range: (f64, f64),
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            tau1: 0.5,
            tau2: 0.5,
            overlap: 50.0,
            tile: 64,
            class_weights: None,
            taxonomy: Taxonomy::Binary,
            z_range: (-1.0, 1.0),
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        let unit = |t: f64| t > 0.0 && t < 1.0;
        if !unit(self.tau1) || !unit(self.tau2) {
            return Err(DetectError::InvalidConfig(format!("thresholds must lie in (0, 1): {} {}", self.tau1, self.tau2)));
        }
        if !(0.0..100.0).contains(&self.overlap) {
            return Err(DetectError::InvalidConfig(format!("overlap {} outside [0, 100)", self.overlap)));
        }
        if self.tile < 8 {
            return Err(DetectError::InvalidConfig(format!("tile {} below 8 pixels", self.tile)));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|v| !(*v >= 0.0)) {
                return Err(DetectError::InvalidConfig("class weights must be non-negative".into()));
            }
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        tile_stride(self.tile, self.overlap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Screened,
    Confirmed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// (row, col) of the tile in the source image.
    pub origin: (usize, usize),
    pub size: usize,
    pub theta_range: (f64, f64),
    pub y_range: (f64, f64),
    pub phase: Phase,
    /// Most probable defect label.
    pub class: String,
    /// Weighted defect probability that was thresholded.
    pub probability: f64,
    pub class_probs: Vec<f64>,
    /// Whether the tile was re-centered on a candidate's peak.
    pub recentered: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefectRegion {
    /// Mm of arc; the end may exceed the circumference when the region wraps.
    pub theta_range: (f64, f64),
    pub y_range: (f64, f64),
    pub class: String,
    /// Highest member probability.
    pub confidence: f64,
    pub members: usize,
    /// Image rows `[start, end)`.
    pub rows: (usize, usize),
    /// First column and column count, wrapping past the image width.
    pub cols: (usize, usize),
}

fn check_labels(labels: &[String]) -> Result<(), DetectError> {
    if labels.len() < 2 || labels[0] != CLEAN_LABEL {
        return Err(DetectError::Labels(labels.to_vec()));
    }
    Ok(())
}

/// Weighted probability of any defect class (index 0 is `clean`).
pub fn defect_score(probs: &[f64], weights: Option<&[f64]>) -> f64 {
    let s: f64 = probs
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, p)| p * weights.and_then(|w| w.get(i)).copied().unwrap_or(1.0))
        .sum();
    s.clamp(0.0, 1.0)
}

fn defect_class(probs: &[f64], labels: &[String]) -> String {
    labels[1 + argmax(&probs[1..])].clone()
}

fn detection(tile: &GrayTile, probs: Vec<f64>, labels: &[String], cfg: &DetectConfig, phase: Phase, recentered: bool) -> Detection {
    Detection {
        origin: tile.origin,
        size: tile.size,
        theta_range: tile.theta_range,
        y_range: tile.y_range,
        phase,
        class: defect_class(&probs, labels),
        probability: defect_score(&probs, cfg.class_weights.as_deref()),
        class_probs: probs,
        recentered,
    }
}

/// Classifies every tile with `model`.
pub fn classify_all<C: TileClassifier + ?Sized>(tiles: &[GrayTile], model: &C) -> Result<Vec<Vec<f64>>, DetectError> {
    check_labels(model.class_labels())?;
    Ok(tiles.iter().map(|t| model.classify(t)).collect::<Result<_, _>>()?)
}

/// Phase one on precomputed probabilities.
pub fn screen_scored(tiles: &[GrayTile], probs: &[Vec<f64>], labels: &[String], cfg: &DetectConfig) -> Vec<Detection> {
    tiles
        .iter()
        .zip(probs)
        .filter(|(_, p)| defect_score(p, cfg.class_weights.as_deref()) >= cfg.tau1)
        .map(|(t, p)| detection(t, p.clone(), labels, cfg, Phase::Screened, false))
        .collect()
}

/// Phase one: a tile is a candidate when its weighted defect probability
/// reaches `tau1`.
pub fn screen<C: TileClassifier + ?Sized>(tiles: &[GrayTile], model: &C, cfg: &DetectConfig) -> Result<Vec<Detection>, DetectError> {
    let probs = classify_all(tiles, model)?;
    Ok(screen_scored(tiles, &probs, model.class_labels(), cfg))
}

/// Pixel of largest departure from the tile median after 3×3 median
/// smoothing, as (row, col) within the tile; first in row-major order on ties.
pub fn peak_pixel(tile: &GrayTile) -> (usize, usize) {
    let smooth = median3x3(&tile.pixels, tile.size);
    let mut sorted = smooth.clone();
    sorted.sort_unstable();
    let median = sorted[sorted.len() / 2] as i32;
    let k = smooth
        .iter()
        .enumerate()
        .fold((0, -1), |best, (k, &g)| {
            let d = (g as i32 - median).abs();
            if d > best.1 {
                (k, d)
            } else {
                best
            }
        })
        .0;
    (k / tile.size, k % tile.size)
}

/// Origin of the tile centered on `tile`'s peak pixel: rows clamped to the
/// rows available in `src`, columns wrapped around the θ seam.
pub fn recentered_origin<S: GrayRows + ?Sized>(tile: &GrayTile, src: &S) -> (usize, usize) {
    let (pr, pc) = peak_pixel(tile);
    let half = tile.size / 2;
    let width = src.meta().width;
    let row = (tile.origin.0 + pr).saturating_sub(half).min(src.height().saturating_sub(tile.size));
    let col = (tile.origin.1 + pc + width - half % width) % width;
    (row, col)
}

/// Phase two: the confirming model sees each candidate tile and a tile
/// re-centered on its peak; each evaluation reaching `tau2` is emitted.
pub fn confirm<S: GrayRows + ?Sized, C: TileClassifier + ?Sized>(
    candidates: &[Detection],
    src: &S,
    model: &C,
    cfg: &DetectConfig,
) -> Result<Vec<Detection>, DetectError> {
    check_labels(model.class_labels())?;
    let mut out = Vec::new();
    for cand in candidates {
        let tile = extract_tile(src, cand.origin.0, cand.origin.1, cand.size);
        let (r, c) = recentered_origin(&tile, src);
        let centered = extract_tile(src, r, c, cand.size);
        for (t, recentered) in [(&tile, false), (&centered, true)] {
            if recentered && t.origin == tile.origin {
                continue;
            }
            let probs = model.classify(t)?;
            if defect_score(&probs, cfg.class_weights.as_deref()) >= cfg.tau2 {
                out.push(detection(t, probs, model.class_labels(), cfg, Phase::Confirmed, recentered));
            }
        }
    }
    Ok(out)
}

/// Whether two tiles overlap or touch (closed rectangles), columns circular
/// over `width`.
pub fn tiles_touch(a: &Detection, b: &Detection, width: usize) -> bool {
    let rows = a.origin.0 <= b.origin.0 + b.size && b.origin.0 <= a.origin.0 + a.size;
    if !rows {
        return false;
    }
    if width <= a.size || width <= b.size {
        return true;
    }
    let d = (b.origin.1 + width - a.origin.1 % width) % width;
    d <= a.size || width - d <= b.size
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Smallest arc `(start, len)` covering intervals `(start, len)` on a circle.
fn circular_cover(mut spans: Vec<(usize, usize)>, width: usize) -> (usize, usize) {
    if spans.iter().any(|s| s.1 >= width) {
        return (0, width);
    }
    spans.sort_unstable();
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for (s, l) in spans {
        match merged.last_mut() {
            Some(last) if s <= last.0 + last.1 => last.1 = last.1.max(s + l - last.0),
            _ => merged.push((s, l)),
        }
    }
    // widest uncovered gap, including the one across the seam
    let mut best_gap = 0usize;
    let mut start = 0usize;
    for i in 0..merged.len() {
        let end = merged[i].0 + merged[i].1;
        let next = if i + 1 < merged.len() { merged[i + 1].0 } else { merged[0].0 + width };
        if next > end && next - end > best_gap {
            best_gap = next - end;
            start = next % width;
        }
    }
    if best_gap == 0 {
        (0, width)
    } else {
        (start, width - best_gap)
    }
}

/// Connected components of confirmed tiles (overlap or edge contact, θ
/// wrapping). Each region spans its members' union bounding box and takes
/// the defect class with the largest summed probability.
pub fn merge_regions(confirmed: &[Detection], meta: &ImageMeta) -> Vec<DefectRegion> {
    let n = confirmed.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if tiles_touch(&confirmed[i], &confirmed[j], meta.width) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let root = find(&mut parent, i);
        if slot[root] == usize::MAX {
            slot[root] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[root]].push(i);
    }
    groups
        .into_iter()
        .map(|members| {
            let first = &confirmed[members[0]];
            let row0 = members.iter().map(|&i| confirmed[i].origin.0).min().unwrap();
            let row1 = members.iter().map(|&i| confirmed[i].origin.0 + confirmed[i].size).max().unwrap();
            let cols = circular_cover(members.iter().map(|&i| (confirmed[i].origin.1, confirmed[i].size)).collect(), meta.width);
            let mut sums = vec![0.0; first.class_probs.len()];
            for &i in &members {
                for (s, p) in sums.iter_mut().zip(&confirmed[i].class_probs) {
                    *s += p;
                }
            }
            let best = 1 + argmax(&sums[1..]);
            // recover the label from any member that carries it
            let class = members
                .iter()
                .map(|&i| &confirmed[i])
                .find(|d| 1 + argmax(&d.class_probs[1..]) == best)
                .map(|d| d.class.clone())
                .unwrap_or_else(|| first.class.clone());
            DefectRegion {
                theta_range: meta.theta_extent(cols.0, cols.1),
                y_range: meta.y_extent(row0, row1 - row0),
                class,
                confidence: members.iter().map(|&i| confirmed[i].probability).fold(0.0, f64::max),
                members: members.len(),
                rows: (row0, row1),
                cols,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    pub regions: Vec<DefectRegion>,
    pub candidates: Vec<Detection>,
    pub confirmed: Vec<Detection>,
    pub tiles_analyzed: usize,
}

/// Screen → confirm → merge on a whole image.
pub fn detect_image<A: TileClassifier + ?Sized, B: TileClassifier + ?Sized>(
    img: &GrayImage,
    model_a: &A,
    model_b: &B,
    cfg: &DetectConfig,
) -> Result<DetectionReport, DetectError> {
    let tiles = make_tiles(img, cfg.tile, cfg.overlap);
    let candidates = screen(&tiles, model_a, cfg)?;
    let confirmed = confirm(&candidates, img, model_b, cfg)?;
    Ok(DetectionReport {
        regions: merge_regions(&confirmed, &img.meta),
        candidates,
        confirmed,
        tiles_analyzed: tiles.len(),
    })
}

/// Rows retained by the streaming detector.
struct RowBuffer {
    meta: ImageMeta,
    first: usize,
    rows: VecDeque<Vec<u8>>,
}

impl GrayRows for RowBuffer {
    fn meta(&self) -> &ImageMeta {
        &self.meta
    }

    fn height(&self) -> usize {
        self.first + self.rows.len()
    }

    fn row(&self, j: usize) -> &[u8] {
        &self.rows[j - self.first]
    }
}

/// Two-phase detection over a stream of gray rows, holding only a rolling
/// window of about two tile heights.
pub struct StreamingDetector<'m, A: ?Sized, B: ?Sized> {
    cfg: DetectConfig,
    model_a: &'m A,
    model_b: &'m B,
    buf: RowBuffer,
    cols: Vec<usize>,
    next_band: usize,
    last_band: Option<usize>,
    candidates: Vec<Detection>,
    confirmed: Vec<Detection>,
    tiles_analyzed: usize,
    peak_rows: usize,
}

impl<'m, A: TileClassifier + ?Sized, B: TileClassifier + ?Sized> StreamingDetector<'m, A, B> {
    pub fn new(meta: ImageMeta, model_a: &'m A, model_b: &'m B, cfg: DetectConfig) -> Result<Self, DetectError> {
        check_labels(model_a.class_labels())?;
        check_labels(model_b.class_labels())?;
        if cfg.tile < 8 || !(0.0..100.0).contains(&cfg.overlap) {
            return Err(DetectError::InvalidConfig(format!("tile {} overlap {}", cfg.tile, cfg.overlap)));
        }
        let cols = tile_starts(meta.width, cfg.tile, cfg.stride());
        Ok(Self {
            cfg,
            model_a,
            model_b,
            buf: RowBuffer {
                meta,
                first: 0,
                rows: VecDeque::new(),
            },
            cols,
            next_band: 0,
            last_band: None,
            candidates: Vec::new(),
            confirmed: Vec::new(),
            tiles_analyzed: 0,
            peak_rows: 0,
        })
    }

    /// Most rows held at once so far.
    pub fn peak_buffered_rows(&self) -> usize {
        self.peak_rows
    }

    /// Gray row for a profile measured against `reference_radius`.
    pub fn profile_row<T: Scalar>(&self, profile: &Profile<T>, reference_radius: T) -> Vec<u8> {
        profile.radii.iter().map(|r| self.buf.meta.z_to_gray((*r - reference_radius).as_f64())).collect()
    }

    pub fn push_profile<T: Scalar>(&mut self, profile: &Profile<T>, reference_radius: T) -> Result<(), DetectError> {
        let row = self.profile_row(profile, reference_radius);
        self.push_row(row)
    }

    pub fn push_row(&mut self, row: Vec<u8>) -> Result<(), DetectError> {
        if row.len() != self.buf.meta.width {
            return Err(DetectError::InvalidConfig(format!("row of {} pixels, expected {}", row.len(), self.buf.meta.width)));
        }
        self.buf.rows.push_back(row);
        self.peak_rows = self.peak_rows.max(self.buf.rows.len());
        let t = self.cfg.tile;
        // a band is final once re-centered tiles below it can be cut
        while self.buf.height() >= self.next_band + t + t / 2 {
            self.process_band(self.next_band)?;
            self.next_band += self.cfg.stride();
            let keep_from = self.next_band.saturating_sub(t / 2);
            while self.buf.first < keep_from && !self.buf.rows.is_empty() {
                self.buf.rows.pop_front();
                self.buf.first += 1;
            }
        }
        Ok(())
    }

    fn process_band(&mut self, row: usize) -> Result<(), DetectError> {
        let tiles: Vec<GrayTile> = self.cols.iter().map(|&c| extract_tile(&self.buf, row, c, self.cfg.tile)).collect();
        let candidates = screen(&tiles, self.model_a, &self.cfg)?;
        let confirmed = confirm(&candidates, &self.buf, self.model_b, &self.cfg)?;
        self.tiles_analyzed += tiles.len();
        self.candidates.extend(candidates);
        self.confirmed.extend(confirmed);
        self.last_band = Some(row);
        Ok(())
    }

    /// Processes the remaining bands, including the one flush with the last
    /// row, and merges everything confirmed.
    pub fn finish(mut self) -> Result<DetectionReport, DetectError> {
        let h = self.buf.height();
        let t = self.cfg.tile;
        if h == 0 {
            return Err(DetectError::MeshTooShort { rows: 0, tile: t });
        }
        let bands = tile_starts(h, t, self.cfg.stride());
        for band in bands {
            if self.last_band.is_none_or(|last| band > last) {
                self.process_band(band)?;
            }
        }
        Ok(DetectionReport {
            regions: merge_regions(&self.confirmed, &self.buf.meta),
            candidates: self.candidates,
            confirmed: self.confirmed,
            tiles_analyzed: self.tiles_analyzed,
        })
    }
}

/// Runs the full pipeline over a mesh, streaming profiles through the
/// rolling detector. Deviations are taken from the nominal radius.
pub fn detect_pipeline<T: Scalar, A: TileClassifier + ?Sized, B: TileClassifier + ?Sized>(
    mesh: &SurfaceMesh<T>,
    model_a: &A,
    model_b: &B,
    cfg: &DetectConfig,
) -> Result<DetectionReport, DetectError> {
    if mesh.rows() < cfg.tile {
        return Err(DetectError::MeshTooShort {
            rows: mesh.rows(),
            tile: cfg.tile,
        });
    }
    let (z_min, z_max) = cfg.z_range;
    if !(z_min < z_max) {
        return Err(UnwrapError::BadRange(z_min, z_max).into());
    }
    let meta = ImageMeta {
        width: mesh.cols(),
        theta_pitch_mm: std::f64::consts::TAU * mesh.nominal_radius.as_f64() / mesh.cols() as f64,
        axial_pitch_mm: mesh.axial_pitch.as_f64(),
        axial_origin: mesh.profiles[0].axial_pos.as_f64(),
        z_min,
        z_max,
    };
    let mut det = StreamingDetector::new(meta, model_a, model_b, cfg.clone())?;
    for p in &mesh.profiles {
        det.push_profile(p, mesh.nominal_radius)?;
    }
    det.finish()
}
