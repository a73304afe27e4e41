//! Synthetic annotated cable library: held-out test meshes with planted
//! defects and labelled training tiles drawn from the same surface model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{deviation_map, Reference, SurfaceMesh};
use crate::nn::{Sample, Taxonomy};
use crate::synth::{generate_mesh, Annotation, CableSpec, DefectClass, DefectSpec, ScrewVariation, SynthError, SynthSurface, WavinessSpec};
use crate::unwrap::{unwrap_to_gray, GrayImage, ImageMeta, UnwrapError};

/// Surface model and imaging parameters shared by training and test data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LibraryConfig {
    pub nominal_radius: f64,
    /// Angular samples per profile.
    pub n_points: usize,
    pub axial_pitch: f64,
    /// Ellipse `a − b`, mm.
    pub ovality: f64,
    pub waviness_rms: f64,
    pub correlation_length_theta: f64,
    pub correlation_length_y: f64,
    pub z_range: (f64, f64),
    pub tile: usize,
    /// Defect grid: cells around the circumference and along each mesh.
    pub cells_around: usize,
    pub cell_rows: usize,
    /// Axial cell length, mm.
    pub cell_length: f64,
}

impl Default for LibraryConfig {
    fn default() -> Self {
        Self {
            nominal_radius: 30.0,
            n_points: 2048,
            axial_pitch: 0.09,
            ovality: 0.1,
            waviness_rms: 0.005,
            correlation_length_theta: 3.0,
            correlation_length_y: 20.0,
            z_range: (-0.5, 0.5),
            tile: 32,
            cells_around: 6,
            cell_rows: 3,
            cell_length: 30.0,
        }
    }
}

impl LibraryConfig {
    pub fn theta_pitch_mm(&self) -> f64 {
        std::f64::consts::TAU * self.nominal_radius / self.n_points as f64
    }

    pub fn image_meta(&self) -> ImageMeta {
        ImageMeta {
            width: self.n_points,
            theta_pitch_mm: self.theta_pitch_mm(),
            axial_pitch_mm: self.axial_pitch,
            axial_origin: 0.0,
            z_min: self.z_range.0,
            z_max: self.z_range.1,
        }
    }

    /// Cable spec with this library's base geometry and a waviness seed.
    pub fn cable(&self, length: f64, waviness_seed: u64, defects: Vec<DefectSpec<f64>>) -> CableSpec<f64> {
        let r = self.nominal_radius;
        CableSpec {
            nominal_radius: r,
            length,
            ellipse_axes: (r + self.ovality / 2.0, r - self.ovality / 2.0),
            screw_variation: ScrewVariation { amplitude: 0.0, period: 100.0 },
            waviness: WavinessSpec {
                rms_amplitude: self.waviness_rms,
                correlation_length_theta: self.correlation_length_theta,
                correlation_length_y: self.correlation_length_y,
                seed: waviness_seed,
                components: 64,
            },
            defects,
            size_bins: Default::default(),
        }
    }
}

/// Random defect of `class` centered at `(theta, y)`; every height is at
/// least 0.05 mm in magnitude.
pub fn random_defect<R: Rng>(class: DefectClass, theta: f64, y: f64, rng: &mut R) -> DefectSpec<f64> {
    let (w, l, h) = match class {
        DefectClass::ScorchSmall => (rng.random_range(0.5..2.5), rng.random_range(0.5..2.5), rng.random_range(0.05..0.25)),
        DefectClass::ScorchLarge => (rng.random_range(3.0..9.0), rng.random_range(3.0..9.0), rng.random_range(0.1..0.4)),
        DefectClass::ContactDamage => (rng.random_range(2.0..6.0), rng.random_range(2.0..6.0), -rng.random_range(0.05..0.25)),
        DefectClass::Scratch => (rng.random_range(0.3..0.8), rng.random_range(5.0..12.0), -rng.random_range(0.05..0.15)),
    };
    DefectSpec::new(class, theta, y, w, l, h)
}

/// The smallest planted defect of the benchmark: 0.6 × 0.7 × 0.06 mm.
pub fn small_scorch(theta: f64, y: f64) -> DefectSpec<f64> {
    DefectSpec::new(DefectClass::ScorchSmall, theta, y, 0.6, 0.7, 0.06)
}

/// A 9 × 5 × 0.4 mm scorch.
pub fn large_scorch(theta: f64, y: f64) -> DefectSpec<f64> {
    DefectSpec::new(DefectClass::ScorchLarge, theta, y, 9.0, 5.0, 0.4)
}

#[derive(Debug, Clone)]
pub struct TestCase {
    pub mesh: SurfaceMesh<f64>,
    pub annotations: Vec<Annotation<f64>>,
}

impl TestCase {
    pub fn image(&self, z_range: (f64, f64)) -> Result<GrayImage, UnwrapError> {
        unwrap_to_gray(&deviation_map(&self.mesh, Reference::FixedRadius(self.mesh.nominal_radius)), z_range)
    }

    pub fn length(&self) -> f64 {
        self.mesh.axial_extent()
    }
}

/// Test meshes with one defect per grid cell, classes cycling through all
/// four. The first mesh carries the 0.6 × 0.7 × 0.06 mm and 9 × 5 × 0.4 mm
/// defects in its first two cells.
pub fn test_set(cfg: &LibraryConfig, meshes: usize, seed: u64) -> Result<Vec<TestCase>, SynthError> {
    let circumference = std::f64::consts::TAU * cfg.nominal_radius;
    let cell_arc = circumference / cfg.cells_around as f64;
    let length = cfg.cell_rows as f64 * cfg.cell_length;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(meshes);
    let mut k = 0usize;
    for m in 0..meshes {
        // random grid phase so some defects straddle the θ seam
        let phase = rng.random_range(0.0..cell_arc);
        let mut defects = Vec::new();
        for row in 0..cfg.cell_rows {
            for col in 0..cfg.cells_around {
                let arc = phase + (col as f64 + 0.5 + rng.random_range(-0.15..0.15)) * cell_arc;
                let y = (row as f64 + 0.5 + rng.random_range(-0.05..0.05)) * cfg.cell_length;
                let theta = arc / cfg.nominal_radius;
                let d = match (m, defects.len()) {
                    (0, 0) => small_scorch(theta, y),
                    (0, 1) => large_scorch(theta, y),
                    _ => random_defect(DefectClass::ALL[k % 4], theta, y, &mut rng),
                };
                k += 1;
                defects.push(d);
            }
        }
        let spec = cfg.cable(length, rng.random(), defects);
        let (mesh, annotations) = generate_mesh(&spec, cfg.n_points, cfg.axial_pitch)?;
        out.push(TestCase { mesh, annotations });
    }
    Ok(out)
}

/// Renders one `tile × tile` patch of `surface` with its top-left pixel at
/// angular column `col0` and axial position `y0`.
pub fn render_tile(surface: &SynthSurface<f64>, cfg: &LibraryConfig, col0: usize, y0: f64) -> Vec<u8> {
    let meta = cfg.image_meta();
    let dtheta = std::f64::consts::TAU / cfg.n_points as f64;
    let mut px = Vec::with_capacity(cfg.tile * cfg.tile);
    for r in 0..cfg.tile {
        let y = y0 + r as f64 * cfg.axial_pitch;
        for c in 0..cfg.tile {
            let theta = ((col0 + c) % cfg.n_points) as f64 * dtheta;
            let z = surface.radius_at(theta, y).expect("tile inside sample") - cfg.nominal_radius;
            px.push(meta.z_to_gray(z));
        }
    }
    px
}

/// Balanced labelled tiles: even indices clean, odd indices hold one defect
/// (classes cycling) whose center lies in the middle three quarters of the
/// tile. Each tile gets its own waviness field. Tiles draw from generator
/// streams 1.. while test meshes use stream 0, so equal seeds still give
/// disjoint surfaces.
pub fn training_set(cfg: &LibraryConfig, n: usize, taxonomy: Taxonomy, seed: u64) -> Result<Vec<Sample>, SynthError> {
    let length = 400.0;
    let span = cfg.tile as f64 * cfg.axial_pitch;
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let col0 = rng.random_range(0..cfg.n_points);
            let y0 = rng.random_range(span..length - 2.0 * span);
            let defect = (i % 2 == 1).then(|| {
                let class = DefectClass::ALL[(i / 2) % 4];
                let lo = cfg.tile as f64 / 8.0;
                let hi = cfg.tile as f64 * 7.0 / 8.0;
                let pc = rng.random_range(lo..hi);
                let pr = rng.random_range(lo..hi);
                let theta = (col0 as f64 + pc) * std::f64::consts::TAU / cfg.n_points as f64;
                let mut d = random_defect(class, theta, y0 + pr * cfg.axial_pitch, &mut rng);
                // a share of the hardest case: tiny, shallow scorch particles
                if class == DefectClass::ScorchSmall && rng.random_bool(0.5) {
                    d = DefectSpec::new(class, d.theta, d.y, rng.random_range(0.5..1.0), rng.random_range(0.5..1.0), rng.random_range(0.05..0.08));
                }
                d
            });
            let label = taxonomy.label_of(defect.as_ref().map(|d| d.class));
            let surface = SynthSurface::new(cfg.cable(length, rng.random(), defect.into_iter().collect()))?;
            Ok(Sample {
                pixels: render_tile(&surface, cfg, col0, y0),
                label,
            })
        })
        .collect()
}
