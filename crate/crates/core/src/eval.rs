//! Detection quality against ground truth: hit ratio, false positives, and
//! sweeps over tile overlap and thresholds for three system variants.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{
    classify_all, defect_score, merge_regions, recentered_origin, screen_scored, DefectRegion, DetectConfig, DetectError, Detection, Phase,
};
use crate::library::TestCase;
use crate::nn::{argmax, TileClassifier};
use crate::synth::Annotation;
use crate::unwrap::{extract_tile, make_tiles, GrayImage, GrayTile};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no annotations to score against")]
    NoAnnotations,
    #[error("no tiles analyzed")]
    NoTiles,
    #[error("empty sweep: {0}")]
    EmptySweep(&'static str),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error("csv: {0}")]
    Csv(String),
}

/// Annotation footprint as arc/axial millimetre intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extent {
    pub arc: (f64, f64),
    pub y: (f64, f64),
}

impl Extent {
    pub fn of_region(r: &DefectRegion) -> Self {
        Self { arc: r.theta_range, y: r.y_range }
    }

    /// 3σ footprint of an annotation on a cable of `radius`.
    pub fn of_annotation(a: &Annotation<f64>, radius: f64) -> Self {
        let fp = a.footprint();
        let arc = radius * a.theta;
        Self {
            arc: (arc + fp.arc_min, arc + fp.arc_max),
            y: (a.y + fp.y_min, a.y + fp.y_max),
        }
    }

    pub fn area(&self, circumference: f64) -> f64 {
        (self.arc.1 - self.arc.0).clamp(0.0, circumference) * (self.y.1 - self.y.0).max(0.0)
    }
}

fn interval_overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0.0)
}

/// Overlap length of two arcs on a circle of `period`.
pub fn arc_overlap(a: (f64, f64), b: (f64, f64), period: f64) -> f64 {
    let (la, lb) = (a.1 - a.0, b.1 - b.0);
    if la <= 0.0 || lb <= 0.0 {
        return 0.0;
    }
    if la >= period {
        return lb.min(period);
    }
    if lb >= period {
        return la;
    }
    let a0 = a.0.rem_euclid(period);
    let b0 = b.0.rem_euclid(period);
    let a = (a0, a0 + la);
    [-1.0, 0.0, 1.0]
        .iter()
        .map(|k| interval_overlap(a, (b0 + k * period, b0 + k * period + lb)))
        .sum::<f64>()
        .min(la.min(lb))
}

/// Overlap area of two extents, θ circular.
pub fn overlap_area(a: &Extent, b: &Extent, circumference: f64) -> f64 {
    arc_overlap(a.arc, b.arc, circumference) * interval_overlap(a.y, b.y)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matching {
    pub annotation_hit: Vec<bool>,
    pub region_true: Vec<bool>,
    /// Per annotation, IoU with its best-overlapping region.
    pub best_iou: Vec<f64>,
}

impl Matching {
    pub fn hits(&self) -> usize {
        self.annotation_hit.iter().filter(|h| **h).count()
    }

    pub fn false_regions(&self) -> usize {
        self.region_true.iter().filter(|t| !**t).count()
    }

    /// Concatenates matchings from separate meshes.
    pub fn extend(&mut self, other: Matching) {
        self.annotation_hit.extend(other.annotation_hit);
        self.region_true.extend(other.region_true);
        self.best_iou.extend(other.best_iou);
    }
}

/// An annotation is hit when any region overlaps its footprint with
/// nonzero area; a region is true when it overlaps any annotation.
pub fn match_detections(regions: &[Extent], annotations: &[Extent], circumference: f64) -> Matching {
    let mut m = Matching {
        annotation_hit: vec![false; annotations.len()],
        region_true: vec![false; regions.len()],
        best_iou: vec![0.0; annotations.len()],
    };
    for (i, a) in annotations.iter().enumerate() {
        for (j, r) in regions.iter().enumerate() {
            let inter = overlap_area(a, r, circumference);
            if inter > 0.0 {
                m.annotation_hit[i] = true;
                m.region_true[j] = true;
                let union = a.area(circumference) + r.area(circumference) - inter;
                m.best_iou[i] = m.best_iou[i].max(inter / union);
            }
        }
    }
    m
}

/// Matches detected regions against a test case's annotations.
pub fn match_case(regions: &[DefectRegion], case: &TestCase) -> Matching {
    let r = case.mesh.nominal_radius;
    let regions: Vec<Extent> = regions.iter().map(Extent::of_region).collect();
    let annotations: Vec<Extent> = case.annotations.iter().map(|a| Extent::of_annotation(a, r)).collect();
    match_detections(&regions, &annotations, std::f64::consts::TAU * r)
}

pub fn hit_ratio(m: &Matching) -> Result<f64, EvalError> {
    if m.annotation_hit.is_empty() {
        return Err(EvalError::NoAnnotations);
    }
    Ok(m.hits() as f64 / m.annotation_hit.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FalsePositives {
    pub count: usize,
    /// False regions per tile analyzed.
    pub rate: f64,
    pub per_metre: f64,
}

pub fn false_positive_rate(m: &Matching, tiles_analyzed: usize, length_mm: f64) -> Result<FalsePositives, EvalError> {
    if tiles_analyzed == 0 {
        return Err(EvalError::NoTiles);
    }
    let count = m.false_regions();
    Ok(FalsePositives {
        count,
        rate: count as f64 / tiles_analyzed as f64,
        per_metre: if length_mm > 0.0 { count as f64 * 1000.0 / length_mm } else { 0.0 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    AOnly,
    BOnly,
    TwoPhase,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::AOnly, Variant::BOnly, Variant::TwoPhase];

    pub fn name(self) -> &'static str {
        match self {
            Variant::AOnly => "a_only",
            Variant::BOnly => "b_only",
            Variant::TwoPhase => "two_phase",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub overlaps: Vec<f64>,
    pub tau1: Vec<f64>,
    pub tau2: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            overlaps: vec![0.0, 25.0, 50.0, 75.0],
            tau1: vec![0.5],
            tau2: vec![0.5],
        }
    }
}

impl SweepGrid {
    pub fn cells(&self) -> usize {
        self.overlaps.len() * self.tau1.len() * self.tau2.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub variant: Variant,
    pub overlap: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub tile: usize,
    pub annotations: usize,
    pub hits: usize,
    pub hit_ratio: f64,
    pub regions: usize,
    pub false_regions: usize,
    pub fpr: f64,
    pub false_per_metre: f64,
    pub tiles: usize,
    pub mean_iou: f64,
    /// Tile classifications the variant performs.
    pub inferences: usize,
    /// Inference count priced at the measured mean time per classification.
    pub runtime_s: f64,
}

/// Column order of the CSV export.
pub const EVAL_COLUMNS: [&str; 16] = [
    "variant",
    "overlap",
    "tau1",
    "tau2",
    "tile",
    "annotations",
    "hits",
    "hit_ratio",
    "regions",
    "false_regions",
    "fpr",
    "false_per_metre",
    "tiles",
    "mean_iou",
    "inferences",
    "runtime_s",
];

/// Assumptions written as `#` comment lines above the CSV header.
pub const EVAL_ASSUMPTIONS: [&str; 3] = [
    "fpr = false regions / tiles analyzed; false_per_metre = false regions per metre of cable",
    "hit = nonzero-area overlap between a region and an annotation's 3-sigma footprint, theta circular",
    "a_only screens with tau1, b_only screens with tau2, two_phase screens with A at tau1 and confirms with B at tau2",
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// CSV with the assumption header; `runtime_s` only when timing is
    /// wanted, so reports stay byte-stable otherwise.
    pub fn to_csv(&self, include_timing: bool) -> Result<String, EvalError> {
        let ncol = if include_timing { EVAL_COLUMNS.len() } else { EVAL_COLUMNS.len() - 1 };
        let mut out = String::new();
        for line in EVAL_ASSUMPTIONS {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| EvalError::Csv(e.to_string());
        w.write_record(&EVAL_COLUMNS[..ncol]).map_err(err)?;
        for r in &self.rows {
            let fields = [
                r.variant.name().to_string(),
                r.overlap.to_string(),
                r.tau1.to_string(),
                r.tau2.to_string(),
                r.tile.to_string(),
                r.annotations.to_string(),
                r.hits.to_string(),
                format!("{:.6}", r.hit_ratio),
                r.regions.to_string(),
                r.false_regions.to_string(),
                format!("{:.8}", r.fpr),
                format!("{:.4}", r.false_per_metre),
                r.tiles.to_string(),
                format!("{:.4}", r.mean_iou),
                r.inferences.to_string(),
                format!("{:.3}", r.runtime_s),
            ];
            w.write_record(&fields[..ncol]).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| EvalError::Csv(e.to_string()))?;
        out.push_str(&String::from_utf8(bytes).map_err(|e| EvalError::Csv(e.to_string()))?);
        Ok(out)
    }

    /// Best row of `variant`: highest hit ratio, then lowest FPR, then
    /// fewest inferences; earliest grid position on exact ties.
    pub fn best(&self, variant: Variant) -> Option<&EvalRow> {
        self.rows.iter().filter(|r| r.variant == variant).fold(None, |best: Option<&EvalRow>, r| match best {
            Some(b) if (b.hit_ratio, -b.fpr, -(b.inferences as f64)) >= (r.hit_ratio, -r.fpr, -(r.inferences as f64)) => Some(b),
            _ => Some(r),
        })
    }

    /// Row of `variant` with the same grid position as `like`.
    pub fn row_at(&self, variant: Variant, like: &EvalRow) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.overlap == like.overlap && r.tau1 == like.tau1 && r.tau2 == like.tau2)
    }

    /// Whether the best two-phase row has at least the hit ratio and at most
    /// the FPR of both single-phase rows at the same grid position.
    pub fn two_phase_dominates(&self) -> bool {
        let Some(best) = self.best(Variant::TwoPhase) else {
            return false;
        };
        [Variant::AOnly, Variant::BOnly].iter().all(|&v| {
            self.row_at(v, best)
                .is_some_and(|r| best.hit_ratio >= r.hit_ratio && best.fpr <= r.fpr)
        })
    }
}

/// Per-mesh, per-overlap state cached across thresholds.
struct OverlapCache {
    img: GrayImage,
    tiles: Vec<GrayTile>,
    probs_a: Vec<Vec<f64>>,
    probs_b: Vec<Vec<f64>>,
    /// B probabilities of re-centered tiles, keyed by origin.
    recentered_b: HashMap<(usize, usize), Vec<f64>>,
    /// Re-centered origin of each tile.
    recentered: Vec<(usize, usize)>,
}

#[derive(Default)]
struct Timer {
    a: (f64, usize),
    b: (f64, usize),
}

impl Timer {
    fn mean(s: (f64, usize)) -> f64 {
        if s.1 == 0 {
            0.0
        } else {
            s.0 / s.1 as f64
        }
    }
}

fn timed<T>(acc: &mut (f64, usize), n: usize, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let out = f();
    acc.0 += t.elapsed().as_secs_f64();
    acc.1 += n;
    out
}

fn detection_of(tile: &GrayTile, probs: &[f64], labels: &[String], cfg: &DetectConfig, phase: Phase, recentered: bool) -> Detection {
    Detection {
        origin: tile.origin,
        size: tile.size,
        theta_range: tile.theta_range,
        y_range: tile.y_range,
        phase,
        class: labels[1 + argmax(&probs[1..])].clone(),
        probability: defect_score(probs, cfg.class_weights.as_deref()),
        class_probs: probs.to_vec(),
        recentered,
    }
}

/// Evaluates every grid cell for the three variants on `cases`. Tile
/// classifications are computed once per mesh and overlap and reused
/// across thresholds, which gives the same detections as running each
/// configuration from scratch.
pub fn sweep<A: TileClassifier + ?Sized, B: TileClassifier + ?Sized>(
    cases: &[TestCase],
    model_a: &A,
    model_b: &B,
    grid: &SweepGrid,
    base: &DetectConfig,
) -> Result<EvalReport, EvalError> {
    if cases.is_empty() {
        return Err(EvalError::EmptySweep("no test meshes"));
    }
    if grid.cells() == 0 {
        return Err(EvalError::EmptySweep("empty grid"));
    }
    let labels_a = model_a.class_labels().to_vec();
    let labels_b = model_b.class_labels().to_vec();
    let mut timer = Timer::default();
    let mut rows = Vec::new();
    let total_annotations: usize = cases.iter().map(|c| c.annotations.len()).sum();
    let total_length: f64 = cases.iter().map(TestCase::length).sum();

    for &overlap in &grid.overlaps {
        let mut caches = Vec::with_capacity(cases.len());
        for case in cases {
            let img = case.image(base.z_range).map_err(DetectError::from)?;
            let tiles = make_tiles(&img, base.tile, overlap);
            let probs_a = timed(&mut timer.a, tiles.len(), || classify_all(&tiles, model_a))?;
            let probs_b = timed(&mut timer.b, tiles.len(), || classify_all(&tiles, model_b))?;
            let recentered = tiles.iter().map(|t| recentered_origin(t, &img)).collect();
            caches.push(OverlapCache {
                img,
                tiles,
                probs_a,
                probs_b,
                recentered_b: HashMap::new(),
                recentered,
            });
        }
        let tiles_total: usize = caches.iter().map(|c| c.tiles.len()).sum();

        for &tau1 in &grid.tau1 {
            for &tau2 in &grid.tau2 {
                let cfg = DetectConfig {
                    tau1,
                    tau2,
                    overlap,
                    ..base.clone()
                };
                for variant in Variant::ALL {
                    let mut matching = Matching::default();
                    let mut regions = 0;
                    let mut inferences = (0usize, 0usize);
                    for (case, cache) in cases.iter().zip(caches.iter_mut()) {
                        let confirmed = match variant {
                            Variant::AOnly => {
                                inferences.0 += cache.tiles.len();
                                screen_scored(&cache.tiles, &cache.probs_a, &labels_a, &DetectConfig { tau1, ..cfg.clone() })
                            }
                            Variant::BOnly => {
                                inferences.1 += cache.tiles.len();
                                screen_scored(&cache.tiles, &cache.probs_b, &labels_b, &DetectConfig { tau1: tau2, ..cfg.clone() })
                            }
                            Variant::TwoPhase => {
                                inferences.0 += cache.tiles.len();
                                two_phase(cache, model_b, &labels_b, &cfg, &mut timer, &mut inferences.1)?
                            }
                        };
                        let found = merge_regions(&confirmed, &cache.img.meta);
                        regions += found.len();
                        matching.extend(match_case(&found, case));
                    }
                    let fp = false_positive_rate(&matching, tiles_total, total_length)?;
                    let hit = if total_annotations == 0 { 1.0 } else { hit_ratio(&matching)? };
                    let iou = matching.best_iou.iter().sum::<f64>() / matching.best_iou.len().max(1) as f64;
                    rows.push(EvalRow {
                        variant,
                        overlap,
                        tau1,
                        tau2,
                        tile: base.tile,
                        annotations: total_annotations,
                        hits: matching.hits(),
                        hit_ratio: hit,
                        regions,
                        false_regions: fp.count,
                        fpr: fp.rate,
                        false_per_metre: fp.per_metre,
                        tiles: tiles_total,
                        mean_iou: iou,
                        inferences: inferences.0 + inferences.1,
                        runtime_s: inferences.0 as f64 * Timer::mean(timer.a) + inferences.1 as f64 * Timer::mean(timer.b),
                    });
                }
            }
        }
    }
    // rows grouped by grid cell in (overlap, tau1, tau2, variant) order
    Ok(EvalReport { rows })
}

/// Screen with cached A probabilities, confirm with cached or freshly
/// computed B probabilities; same result as `detect::confirm`.
fn two_phase<B: TileClassifier + ?Sized>(
    cache: &mut OverlapCache,
    model_b: &B,
    labels_b: &[String],
    cfg: &DetectConfig,
    timer: &mut Timer,
    b_inferences: &mut usize,
) -> Result<Vec<Detection>, EvalError> {
    let mut out = Vec::new();
    for k in 0..cache.tiles.len() {
        if defect_score(&cache.probs_a[k], cfg.class_weights.as_deref()) < cfg.tau1 {
            continue;
        }
        let tile = &cache.tiles[k];
        *b_inferences += 1;
        if defect_score(&cache.probs_b[k], cfg.class_weights.as_deref()) >= cfg.tau2 {
            out.push(detection_of(tile, &cache.probs_b[k], labels_b, cfg, Phase::Confirmed, false));
        }
        let origin = cache.recentered[k];
        if origin == tile.origin {
            continue;
        }
        *b_inferences += 1;
        let centered = extract_tile(&cache.img, origin.0, origin.1, tile.size);
        if let std::collections::hash_map::Entry::Vacant(slot) = cache.recentered_b.entry(origin) {
            slot.insert(timed(&mut timer.b, 1, || model_b.classify(&centered)).map_err(DetectError::from)?);
        }
        let p = &cache.recentered_b[&origin];
        if defect_score(p, cfg.class_weights.as_deref()) >= cfg.tau2 {
            out.push(detection_of(&centered, p, labels_b, cfg, Phase::Confirmed, true));
        }
    }
    Ok(out)
}
