//! Analytic ground-truth cable surfaces with planted, annotated defects.
//!
//! The radius at `(θ, y)` is a superposition of independent features:
//! an ellipse, a screw-period diameter oscillation, a band-limited waviness
//! field and truncated-Gaussian defect bumps. Every feature is a pure
//! function of the `CableSpec`, so meshes are bit-reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Point2, Profile, SurfaceMesh};
use crate::scalar::{angle_diff, wrap_angle, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("axial position {y} outside the sample [0, {length}]")]
    OutOfRange { y: f64, length: f64 },
    #[error("invalid cable spec: {0}")]
    InvalidSpec(String),
}

/// Truncation of the defect Gaussians, in standard deviations.
pub const DEFECT_CUTOFF_SIGMA: f64 = 3.0;

/// `exp(-q)` bumps use `q = (Δ/(w/2))²`, i.e. `σ = w / (2√2)`; a 3σ cut is `q ≤ 4.5`.
const CUTOFF_Q: f64 = DEFECT_CUTOFF_SIGMA * DEFECT_CUTOFF_SIGMA / 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectClass {
    ScorchSmall,
    ScorchLarge,
    ContactDamage,
    Scratch,
}

impl DefectClass {
    pub const ALL: [DefectClass; 4] = [
        DefectClass::ScorchSmall,
        DefectClass::ScorchLarge,
        DefectClass::ContactDamage,
        DefectClass::Scratch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DefectClass::ScorchSmall => "scorch_small",
            DefectClass::ScorchLarge => "scorch_large",
            DefectClass::ContactDamage => "contact_damage",
            DefectClass::Scratch => "scratch",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SizeCategory {
    XS,
    S,
    M,
    L,
}

impl SizeCategory {
    pub fn name(self) -> &'static str {
        match self {
            SizeCategory::XS => "XS",
            SizeCategory::S => "S",
            SizeCategory::M => "M",
            SizeCategory::L => "L",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Self::XS, Self::S, Self::M, Self::L].into_iter().find(|c| c.name() == s)
    }
}

/// Upper edges (mm) of the XS, S and M size categories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeBins {
    pub edges: [f64; 3],
}

impl Default for SizeBins {
    fn default() -> Self {
        Self { edges: [1.0, 3.0, 10.0] }
    }
}

impl SizeBins {
    pub fn categorize(&self, max_dimension: f64) -> SizeCategory {
        match max_dimension {
            d if d < self.edges[0] => SizeCategory::XS,
            d if d < self.edges[1] => SizeCategory::S,
            d if d <= self.edges[2] => SizeCategory::M,
            _ => SizeCategory::L,
        }
    }
}

/// A planted defect; doubles as its own ground-truth annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec<T> {
    pub class: DefectClass,
    /// Polar angle of the defect center, radians.
    pub theta: T,
    /// Axial position of the defect center, mm.
    pub y: T,
    /// Circumferential extent, mm of arc.
    pub width: T,
    /// Axial extent, mm.
    pub length: T,
    /// Signed peak height, mm; bumps positive, dents and scratches negative.
    pub height: T,
    pub size_category: SizeCategory,
}

pub type Annotation<T> = DefectSpec<T>;

/// One Gaussian lobe of a defect, offsets in (arc mm, axial mm).
#[derive(Debug, Clone, Copy)]
struct Lobe<T> {
    d_arc: T,
    d_y: T,
    half_w: T,
    half_l: T,
    height: T,
}

/// Axis-aligned footprint in (arc mm, axial mm) around the defect center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint<T> {
    pub arc_min: T,
    pub arc_max: T,
    pub y_min: T,
    pub y_max: T,
}

impl<T: Scalar> DefectSpec<T> {
    pub fn new(class: DefectClass, theta: T, y: T, width: T, length: T, height: T) -> Self {
        Self::with_bins(class, theta, y, width, length, height, &SizeBins::default())
    }

    pub fn with_bins(class: DefectClass, theta: T, y: T, width: T, length: T, height: T, bins: &SizeBins) -> Self {
        Self {
            class,
            theta: wrap_angle(theta),
            y,
            width,
            length,
            height,
            size_category: bins.categorize(width.max(length).as_f64()),
        }
    }

    pub fn validate(&self, bins: &SizeBins) -> Result<(), SynthError> {
        if !(self.width > T::zero() && self.length > T::zero()) {
            return Err(SynthError::InvalidSpec("defect width and length must be positive".into()));
        }
        if !(self.height.abs() > T::zero()) || !self.height.is_finite() {
            return Err(SynthError::InvalidSpec("defect height must be nonzero".into()));
        }
        let expected = bins.categorize(self.width.max(self.length).as_f64());
        if expected != self.size_category {
            return Err(SynthError::InvalidSpec(format!(
                "defect size category {:?} does not match its {} mm extent ({:?})",
                self.size_category,
                self.width.max(self.length),
                expected
            )));
        }
        Ok(())
    }

    fn lobes(&self) -> impl Iterator<Item = Lobe<T>> {
        let half = T::lit(0.5);
        let main = Lobe {
            d_arc: T::zero(),
            d_y: T::zero(),
            half_w: self.width * half,
            half_l: self.length * half,
            height: self.height,
        };
        // contact damage is an irregular dent: a second, smaller offset lobe
        let second = (self.class == DefectClass::ContactDamage).then(|| Lobe {
            d_arc: self.width * T::lit(0.35),
            d_y: self.length * T::lit(0.3),
            half_w: self.width * T::lit(0.3),
            half_l: self.length * T::lit(0.3),
            height: self.height * T::lit(0.6),
        });
        std::iter::once(main).chain(second)
    }

    /// Height contributed at circumferential offset `d_arc` (mm of arc,
    /// already wrapped) and axial offset `d_y` from the defect center.
    pub fn bump_at_offset(&self, d_arc: T, d_y: T) -> T {
        let cut = T::lit(CUTOFF_Q);
        let mut sum = T::zero();
        for lobe in self.lobes() {
            let u = (d_arc - lobe.d_arc) / lobe.half_w;
            let v = (d_y - lobe.d_y) / lobe.half_l;
            let q = u * u + v * v;
            if q <= cut {
                sum += lobe.height * (-q).exp();
            }
        }
        sum
    }

    /// Bump height at `(theta, y)` on a cylinder of `radius` (arc scaling).
    pub fn bump(&self, radius: T, theta: T, y: T) -> T {
        self.bump_at_offset(radius * angle_diff(theta, self.theta), y - self.y)
    }

    /// Support of the truncated Gaussians (their 3σ box), relative to center.
    pub fn footprint(&self) -> Footprint<T> {
        // 3σ with σ = half-width / √2
        let k = T::lit(DEFECT_CUTOFF_SIGMA / std::f64::consts::SQRT_2);
        let mut fp = Footprint {
            arc_min: T::infinity(),
            arc_max: T::neg_infinity(),
            y_min: T::infinity(),
            y_max: T::neg_infinity(),
        };
        for lobe in self.lobes() {
            fp.arc_min = fp.arc_min.min(lobe.d_arc - k * lobe.half_w);
            fp.arc_max = fp.arc_max.max(lobe.d_arc + k * lobe.half_w);
            fp.y_min = fp.y_min.min(lobe.d_y - k * lobe.half_l);
            fp.y_max = fp.y_max.max(lobe.d_y + k * lobe.half_l);
        }
        fp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScrewVariation<T> {
    pub amplitude: T,
    /// Period along the cable, mm.
    pub period: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WavinessSpec<T> {
    pub rms_amplitude: T,
    /// Mm of arc.
    pub correlation_length_theta: T,
    pub correlation_length_y: T,
    pub seed: u64,
    #[serde(default = "default_components")]
    pub components: usize,
}

fn default_components() -> usize {
    64
}

impl<T: Scalar> WavinessSpec<T> {
    pub fn none() -> Self {
        Self {
            rms_amplitude: T::zero(),
            correlation_length_theta: T::lit(10.0),
            correlation_length_y: T::lit(10.0),
            seed: 0,
            components: default_components(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CableSpec<T> {
    /// Nominal core radius, mm.
    pub nominal_radius: T,
    pub length: T,
    /// Ellipse semi-axes `(a, b)`, `a ≥ b`, major axis along θ = 0.
    pub ellipse_axes: (T, T),
    pub screw_variation: ScrewVariation<T>,
    pub waviness: WavinessSpec<T>,
    #[serde(default)]
    pub defects: Vec<DefectSpec<T>>,
    #[serde(default)]
    pub size_bins: SizeBins,
}

impl<T: Scalar> CableSpec<T> {
    /// Featureless cylinder.
    pub fn cylinder(radius: T, length: T) -> Self {
        Self {
            nominal_radius: radius,
            length,
            ellipse_axes: (radius, radius),
            screw_variation: ScrewVariation {
                amplitude: T::zero(),
                period: T::lit(100.0),
            },
            waviness: WavinessSpec::none(),
            defects: Vec::new(),
            size_bins: SizeBins::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let (a, b) = self.ellipse_axes;
        if !(b > T::zero() && a >= b) {
            return Err(SynthError::InvalidSpec(format!("ellipse axes must satisfy a ≥ b > 0, got ({a}, {b})")));
        }
        if !(self.nominal_radius > T::zero()) {
            return Err(SynthError::InvalidSpec("nominal radius must be positive".into()));
        }
        if !(self.length > T::zero()) {
            return Err(SynthError::InvalidSpec("length must be positive".into()));
        }
        let sv = &self.screw_variation;
        if !(sv.amplitude >= T::zero()) || (sv.amplitude > T::zero() && !(sv.period > T::zero())) {
            return Err(SynthError::InvalidSpec("screw variation needs amplitude ≥ 0 and period > 0".into()));
        }
        let w = &self.waviness;
        if !(w.rms_amplitude >= T::zero()) {
            return Err(SynthError::InvalidSpec("waviness amplitude must be ≥ 0".into()));
        }
        if w.rms_amplitude > T::zero()
            && !(w.correlation_length_theta > T::zero() && w.correlation_length_y > T::zero() && w.components > 0)
        {
            return Err(SynthError::InvalidSpec("waviness needs positive correlation lengths".into()));
        }
        for d in &self.defects {
            d.validate(&self.size_bins)?;
        }
        Ok(())
    }

    /// Smallest and largest radius any point of the surface can reach.
    pub fn radius_bounds(&self) -> (T, T) {
        let (a, b) = self.ellipse_axes;
        let screw = self.screw_variation.amplitude.abs();
        let wav = WavinessField::amplitude_bound(&self.waviness);
        let mut up = T::zero();
        let mut down = T::zero();
        for d in &self.defects {
            let peak = d.height.abs() * if d.class == DefectClass::ContactDamage { T::lit(1.6) } else { T::one() };
            if d.height > T::zero() {
                up += peak;
            } else {
                down += peak;
            }
        }
        (b - screw - wav - down, a + screw + wav + up)
    }
}

/// Sum of random-phase plane waves on the unrolled cylinder, normalized to a
/// target RMS. Angular wavenumbers are integers so the field is periodic in θ.
#[derive(Debug, Clone)]
pub struct WavinessField<T> {
    waves: Vec<Wave<T>>,
}

#[derive(Debug, Clone, Copy)]
struct Wave<T> {
    /// Angular wavenumber, ≥ 1.
    m: u32,
    /// Axial wavenumber, rad/mm (signed).
    k_y: T,
    phase: T,
    amplitude: T,
}

impl<T: Scalar> WavinessField<T> {
    pub fn new(spec: &WavinessSpec<T>, radius: T) -> Self {
        if spec.rms_amplitude <= T::zero() || spec.components == 0 {
            return Self { waves: Vec::new() };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let lo = spec.correlation_length_theta.min(spec.correlation_length_y).as_f64();
        let hi = spec.correlation_length_theta.max(spec.correlation_length_y).as_f64();
        let r = radius.as_f64();
        let amplitude = spec.rms_amplitude * T::lit((2.0 / spec.components as f64).sqrt());
        let waves = (0..spec.components)
            .map(|_| {
                let wavelength = if hi > lo { rng.random_range(lo..hi) } else { lo };
                let dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let k = std::f64::consts::TAU / wavelength;
                let m = (k * dir.cos() * r).abs().round().max(1.0) as u32;
                Wave {
                    m,
                    k_y: T::lit(k * dir.sin()),
                    phase: T::lit(phase),
                    amplitude,
                }
            })
            .collect();
        Self { waves }
    }

    /// Upper bound on |field|.
    pub fn amplitude_bound(spec: &WavinessSpec<T>) -> T {
        if spec.rms_amplitude <= T::zero() {
            return T::zero();
        }
        spec.rms_amplitude * T::lit((2.0 * spec.components as f64).sqrt())
    }

    pub fn is_zero(&self) -> bool {
        self.waves.is_empty()
    }

    pub fn value(&self, theta: T, y: T) -> T {
        self.waves
            .iter()
            .map(|w| w.amplitude * (T::from_u32(w.m).unwrap() * theta + w.k_y * y + w.phase).cos())
            .sum()
    }

    /// Field along the profile at `y`, sampled at `θ_i = 2πi/n`, added into `out`.
    ///
    /// Uses a cosine table: `m·θ_i` is `2π(m·i mod n)/n`.
    fn add_row(&self, y: T, table: &[(T, T)], out: &mut [T]) {
        let n = table.len();
        for w in &self.waves {
            let c = w.k_y * y + w.phase;
            let (sc, cc) = c.sin_cos();
            let m = w.m as usize % n;
            let mut k = 0usize;
            for o in out.iter_mut() {
                let (s, co) = table[k];
                *o += w.amplitude * (co * cc - s * sc);
                k += m;
                if k >= n {
                    k -= n;
                }
            }
        }
    }
}

/// A cable cross-section that can be queried at any `(θ, y)`.
pub trait Surface<T: Scalar>: Sync {
    /// Radius about the cable axis.
    fn radius(&self, theta: T, y: T) -> T;

    /// Bounds on the radius over the whole surface.
    fn radius_bounds(&self) -> (T, T);

    /// Cable axis position in the scanner frame.
    fn center(&self) -> Point2<T> {
        Point2::origin()
    }
}

/// Evaluator for a validated [`CableSpec`].
#[derive(Debug, Clone)]
pub struct SynthSurface<T> {
    spec: CableSpec<T>,
    field: WavinessField<T>,
    bounds: (T, T),
}

impl<T: Scalar> SynthSurface<T> {
    pub fn new(spec: CableSpec<T>) -> Result<Self, SynthError> {
        spec.validate()?;
        let field = WavinessField::new(&spec.waviness, spec.nominal_radius);
        let bounds = spec.radius_bounds();
        Ok(Self { spec, field, bounds })
    }

    pub fn spec(&self) -> &CableSpec<T> {
        &self.spec
    }

    fn base(&self, theta: T, y: T) -> T {
        let (a, b) = self.spec.ellipse_axes;
        let (s, c) = theta.sin_cos();
        let ellipse = if a == b {
            a
        } else {
            a * b / ((b * c).powi(2) + (a * s).powi(2)).sqrt()
        };
        ellipse + self.screw(y)
    }

    fn screw(&self, y: T) -> T {
        let sv = &self.spec.screw_variation;
        if sv.amplitude > T::zero() {
            sv.amplitude * (T::TAU() * y / sv.period).sin()
        } else {
            T::zero()
        }
    }

    /// Exact radius at `(θ, y)`; errors outside the sample.
    pub fn radius_at(&self, theta: T, y: T) -> Result<T, SynthError> {
        let tol = T::lit(1e-9) * (T::one() + self.spec.length);
        if !(y >= -tol && y <= self.spec.length + tol) {
            return Err(SynthError::OutOfRange {
                y: y.as_f64(),
                length: self.spec.length.as_f64(),
            });
        }
        Ok(self.radius_unchecked(theta, y))
    }

    fn radius_unchecked(&self, theta: T, y: T) -> T {
        let mut r = self.base(theta, y);
        if !self.field.is_zero() {
            r += self.field.value(theta, y);
        }
        for d in &self.spec.defects {
            r += d.bump(self.spec.nominal_radius, theta, y);
        }
        r
    }

    /// Number of profiles at `axial_pitch` over the sample length.
    pub fn profile_count(&self, axial_pitch: T) -> usize {
        ((self.spec.length / axial_pitch).as_f64() + 1e-9).floor() as usize + 1
    }

    /// Ground-truth radii of one profile at `y`, `n` equally spaced angles.
    pub fn profile_radii(&self, y: T, n: usize) -> Vec<T> {
        let table = cos_table::<T>(n);
        self.profile_radii_with_table(y, &table)
    }

    fn profile_radii_with_table(&self, y: T, table: &[(T, T)]) -> Vec<T> {
        let n = table.len();
        let screw = self.screw(y);
        let (a, b) = self.spec.ellipse_axes;
        let mut radii: Vec<T> = table
            .iter()
            .map(|&(s, c)| {
                let e = if a == b {
                    a
                } else {
                    a * b / ((b * c).powi(2) + (a * s).powi(2)).sqrt()
                };
                e + screw
            })
            .collect();
        self.field.add_row(y, table, &mut radii);

        let radius = self.spec.nominal_radius;
        let step = T::TAU() / T::from_usize_lossy(n);
        for d in &self.spec.defects {
            let fp = d.footprint();
            let d_y = y - d.y;
            if d_y < fp.y_min || d_y > fp.y_max {
                continue;
            }
            // columns whose wrapped arc offset can fall inside the footprint
            let lo = (d.theta + fp.arc_min / radius) / step;
            let hi = (d.theta + fp.arc_max / radius) / step;
            let lo = lo.floor().to_i64().unwrap() - 1;
            let hi = hi.ceil().to_i64().unwrap() + 1;
            let span = (hi - lo + 1).min(n as i64);
            for k in 0..span {
                let i = (lo + k).rem_euclid(n as i64) as usize;
                let theta = step * T::from_usize_lossy(i);
                radii[i] += d.bump_at_offset(radius * angle_diff(theta, d.theta), d_y);
            }
        }
        radii
    }
}

impl<T: Scalar> Surface<T> for SynthSurface<T> {
    fn radius(&self, theta: T, y: T) -> T {
        self.radius_unchecked(theta, y.max(T::zero()).min(self.spec.length))
    }

    fn radius_bounds(&self) -> (T, T) {
        self.bounds
    }
}

/// `(sin, cos)` of `2πk/n` for `k` in `0..n`.
pub(crate) fn cos_table<T: Scalar>(n: usize) -> Vec<(T, T)> {
    (0..n)
        .map(|k| (T::TAU() * T::from_usize_lossy(k) / T::from_usize_lossy(n)).sin_cos())
        .collect()
}

/// Radius of the analytic surface at `(θ, y)`.
pub fn radius_at<T: Scalar>(spec: &CableSpec<T>, theta: T, y: T) -> Result<T, SynthError> {
    SynthSurface::new(spec.clone())?.radius_at(theta, y)
}

/// Sample the analytic surface on the regular `(θ, y)` grid.
pub fn generate_mesh<T: Scalar>(
    spec: &CableSpec<T>,
    n_points: usize,
    axial_pitch: T,
) -> Result<(SurfaceMesh<T>, Vec<Annotation<T>>), SynthError> {
    if !(axial_pitch > T::zero()) {
        return Err(SynthError::InvalidSpec("axial pitch must be positive".into()));
    }
    if n_points < 8 {
        return Err(SynthError::InvalidSpec("need at least 8 points per profile".into()));
    }
    let surface = SynthSurface::new(spec.clone())?;
    let table = cos_table::<T>(n_points);
    let rows = surface.profile_count(axial_pitch);
    let profiles = (0..rows)
        .map(|j| {
            let y = axial_pitch * T::from_usize_lossy(j);
            Profile {
                frame_index: j as u64,
                axial_pos: y,
                center: Point2::origin(),
                radii: surface.profile_radii_with_table(y, &table),
            }
        })
        .collect();
    let mesh = SurfaceMesh::new(profiles, axial_pitch, spec.nominal_radius)
        .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    Ok((mesh, spec.defects.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, TAU};

    fn large_scorch_at(theta: f64, y: f64) -> DefectSpec<f64> {
        DefectSpec::new(DefectClass::ScorchLarge, theta, y, 9.0, 5.0, 0.4)
    }

    #[test]
    fn plain_cylinder_radius() {
        let spec = CableSpec::<f64>::cylinder(50.0, 100.0);
        for &(t, y) in &[(0.0, 0.0), (1.0, 50.0), (6.0, 100.0)] {
            assert_eq!(radius_at(&spec, t, y).unwrap(), 50.0);
        }
    }

    #[test]
    fn ellipse_axes_radius() {
        let mut spec = CableSpec::<f64>::cylinder(50.0, 100.0);
        spec.ellipse_axes = (50.65, 50.0);
        assert!((radius_at(&spec, 0.0, 10.0).unwrap() - 50.65).abs() < 1e-12);
        assert!((radius_at(&spec, FRAC_PI_2, 10.0).unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn defect_peak_height() {
        let mut spec = CableSpec::<f64>::cylinder(50.0, 100.0);
        spec.defects.push(large_scorch_at(1.0, 40.0));
        assert_eq!(radius_at(&spec, 1.0, 40.0).unwrap(), 50.4);
        assert_eq!(spec.defects[0].size_category, SizeCategory::M);
    }

    #[test]
    fn out_of_range() {
        let spec = CableSpec::<f64>::cylinder(50.0, 100.0);
        assert!(matches!(radius_at(&spec, 0.0, 100.5), Err(SynthError::OutOfRange { .. })));
        assert!(matches!(radius_at(&spec, 0.0, -0.1), Err(SynthError::OutOfRange { .. })));
    }

    #[test]
    fn invalid_specs() {
        let mut spec = CableSpec::<f64>::cylinder(50.0, 100.0);
        spec.ellipse_axes = (49.0, 50.0);
        assert!(spec.validate().is_err());
        let mut spec = CableSpec::<f64>::cylinder(50.0, 100.0);
        let mut d = large_scorch_at(0.0, 1.0);
        d.size_category = SizeCategory::XS;
        spec.defects.push(d);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn cylinder_mesh_shape() {
        let (mesh, ann) = generate_mesh(&CableSpec::<f64>::cylinder(50.0, 100.0), 360, 0.5).unwrap();
        assert_eq!(mesh.rows(), 201);
        assert!(ann.is_empty());
        assert!(mesh.profiles.iter().flat_map(|p| &p.radii).all(|&r| r == 50.0));
    }

    #[test]
    fn annotations_echo_defects() {
        let mut spec = CableSpec::<f64>::cylinder(50.0, 100.0);
        spec.defects = vec![
            large_scorch_at(1.0, 20.0),
            DefectSpec::new(DefectClass::Scratch, 2.0, 50.0, 0.5, 12.0, -0.1),
            DefectSpec::new(DefectClass::ContactDamage, 4.0, 80.0, 4.0, 3.0, -0.2),
        ];
        let (_, ann) = generate_mesh(&spec, 720, 0.5).unwrap();
        assert_eq!(ann.len(), 3);
        let classes: Vec<_> = ann.iter().map(|a| a.class).collect();
        assert_eq!(classes, vec![DefectClass::ScorchLarge, DefectClass::Scratch, DefectClass::ContactDamage]);
    }

    #[test]
    fn mesh_matches_pointwise_evaluation() {
        let mut spec = CableSpec::<f64>::cylinder(50.0, 30.0);
        spec.ellipse_axes = (50.3, 50.0);
        spec.screw_variation = ScrewVariation { amplitude: 0.05, period: 7.0 };
        spec.waviness = WavinessSpec {
            rms_amplitude: 0.05,
            correlation_length_theta: 5.0,
            correlation_length_y: 9.0,
            seed: 7,
            components: 16,
        };
        spec.defects = vec![
            large_scorch_at(0.02, 10.0),
            DefectSpec::new(DefectClass::ContactDamage, 6.2, 20.0, 4.0, 3.0, -0.2),
        ];
        let surf = SynthSurface::new(spec.clone()).unwrap();
        let (mesh, _) = generate_mesh(&spec, 360, 0.25).unwrap();
        for p in mesh.profiles.iter().step_by(7) {
            for i in (0..360).step_by(3) {
                let direct = surf.radius_at(p.angle(i), p.axial_pos).unwrap();
                assert!((p.radii[i] - direct).abs() < 1e-12, "{} vs {direct}", p.radii[i]);
            }
        }
    }

    #[test]
    fn waviness_rms_and_mean() {
        let n = 720;
        let mut rms_values = Vec::new();
        for seed in [1, 2, 3, 4] {
            let mut spec = CableSpec::<f64>::cylinder(50.0, 400.0);
            spec.waviness = WavinessSpec {
                rms_amplitude: 0.1,
                correlation_length_theta: 8.0,
                correlation_length_y: 20.0,
                seed,
                components: 64,
            };
            let (mesh, _) = generate_mesh(&spec, n, 0.5).unwrap();
            let z: Vec<f64> = mesh.profiles.iter().flat_map(|p| p.radii.iter().map(|r| r - 50.0)).collect();
            let mean = z.iter().sum::<f64>() / z.len() as f64;
            let rms = (z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64).sqrt();
            assert!(mean.abs() < 0.05 * 0.1, "seed {seed}: mean {mean}");
            rms_values.push(rms);
        }
        let avg = rms_values.iter().sum::<f64>() / rms_values.len() as f64;
        assert!((avg - 0.1).abs() < 0.01, "{rms_values:?}");
    }

    #[test]
    fn superposition_of_defects() {
        let mut plain = CableSpec::<f64>::cylinder(50.0, 60.0);
        plain.ellipse_axes = (50.4, 50.0);
        plain.waviness = WavinessSpec {
            rms_amplitude: 0.03,
            correlation_length_theta: 6.0,
            correlation_length_y: 12.0,
            seed: 3,
            components: 32,
        };
        let mut with = plain.clone();
        with.defects = vec![
            large_scorch_at(TAU - 0.01, 20.0),
            DefectSpec::new(DefectClass::ScorchSmall, 3.0, 40.0, 0.6, 0.7, 0.06),
            DefectSpec::new(DefectClass::ContactDamage, 5.0, 30.0, 4.0, 3.0, -0.2),
        ];
        let (a, _) = generate_mesh(&plain, 720, 0.2).unwrap();
        let (b, _) = generate_mesh(&with, 720, 0.2).unwrap();
        for (pa, pb) in a.profiles.iter().zip(&b.profiles) {
            for i in 0..720 {
                let expected: f64 = with.defects.iter().map(|d| d.bump(50.0, pa.angle(i), pa.axial_pos)).sum();
                assert!((pb.radii[i] - pa.radii[i] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn truncation_bounds_support() {
        let d = large_scorch_at(0.0, 0.0);
        let fp = d.footprint();
        assert!((fp.arc_max - 9.0 * 1.5 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(d.bump_at_offset(fp.arc_max + 1e-9, 0.0), 0.0);
        assert!(d.bump_at_offset(fp.arc_max - 1e-9, 0.0) > 0.0);
    }

    proptest! {
        #[test]
        fn mesh_is_deterministic(seed in 0u64..50) {
            let mut spec = CableSpec::<f64>::cylinder(40.0, 10.0);
            spec.waviness = WavinessSpec { rms_amplitude: 0.05, correlation_length_theta: 4.0, correlation_length_y: 6.0, seed, components: 8 };
            let (a, _) = generate_mesh(&spec, 64, 0.5).unwrap();
            let (b, _) = generate_mesh(&spec, 64, 0.5).unwrap();
            for (pa, pb) in a.profiles.iter().zip(&b.profiles) {
                for (x, y) in pa.radii.iter().zip(&pb.radii) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }
}
