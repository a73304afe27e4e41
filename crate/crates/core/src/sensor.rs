//! Simulated ring of laser line profilers around the moving cable.
//!
//! Each sensor is a 2-D fan of rays in the cross-section plane. A ray's
//! reading is the distance to the first crossing of the cable surface,
//! found by marching through the annulus that bounds the surface and then
//! bisecting the bracketing step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Point2;
use crate::scalar::Scalar;
use crate::synth::{CableSpec, Surface, SynthError, SynthSurface};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensorError {
    #[error("sensor geometry cannot cover 360°: {0}")]
    CoverageImpossible(String),
    #[error("invalid scan config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

/// Root-finding tolerance along a ray, mm.
pub const RAY_TOLERANCE: f64 = 1e-7;

/// Marching step through the surface annulus, mm.
const MARCH_STEP: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorPose<T> {
    pub position: Point2<T>,
    /// Aim direction in the scanner frame, radians.
    pub boresight: T,
    pub fan_half_angle: T,
    pub rays: usize,
}

impl<T: Scalar> SensorPose<T> {
    /// Ray angle relative to boresight for ray `j`.
    pub fn ray_angle(&self, j: usize) -> T {
        let span = T::lit(2.0) * self.fan_half_angle;
        -self.fan_half_angle + span * T::from_usize_lossy(j) / T::from_usize_lossy(self.rays - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reading<T> {
    /// Angle from boresight, radians.
    pub ray_angle: T,
    /// `None` marks an invalid reading (miss, out of range or dropout).
    pub distance: Option<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawFrame<T> {
    pub frame_index: u64,
    pub axial_pos: T,
    pub per_sensor: Vec<Vec<Reading<T>>>,
}

impl<T: Scalar> RawFrame<T> {
    pub fn valid_count(&self) -> usize {
        self.per_sensor
            .iter()
            .flatten()
            .filter(|r| r.distance.is_some())
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanConfig {
    pub sensor_count: usize,
    /// Sensor ring radius, mm.
    pub ring_radius: f64,
    /// Profiles per second, Hz.
    pub sample_rate: f64,
    /// Cable speed, mm/s.
    pub line_speed: f64,
    /// Gaussian distance noise, mm.
    pub noise_sigma: f64,
    /// Per-ray probability of an invalid reading.
    pub dropout_prob: f64,
    pub rays_per_sensor: usize,
    /// Required overlap of neighbouring sensor arcs on the nominal cylinder.
    pub min_overlap_deg: f64,
    /// Extra arc beyond the required overlap, when the geometry allows it.
    pub coverage_margin_deg: f64,
    pub seed: u64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            sensor_count: 6,
            ring_radius: 250.0,
            sample_rate: 200.0,
            line_speed: 1000.0 / 60.0,
            noise_sigma: 0.01,
            dropout_prob: 0.0,
            rays_per_sensor: 400,
            min_overlap_deg: 5.0,
            coverage_margin_deg: 10.0,
            seed: 0,
        }
    }
}

/// `m/min` to `mm/s`.
pub fn metres_per_minute(v: f64) -> f64 {
    v * 1000.0 / 60.0
}

impl ScanConfig {
    pub fn validate(&self) -> Result<(), SensorError> {
        let bad = |m: String| Err(SensorError::InvalidConfig(m));
        if !(200.0..=800.0).contains(&self.sample_rate) {
            return bad(format!("sample rate {} Hz outside 200–800 Hz", self.sample_rate));
        }
        if !(8.33..=33.34).contains(&self.line_speed) {
            return bad(format!("line speed {} mm/s outside 0.5–2.0 m/min", self.line_speed));
        }
        if self.rays_per_sensor < 2 {
            return bad("need at least 2 rays per sensor".into());
        }
        if !(self.noise_sigma >= 0.0) || !(0.0..1.0).contains(&self.dropout_prob) {
            return bad("noise must be ≥ 0 and dropout in [0, 1)".into());
        }
        if !(self.ring_radius > 0.0) {
            return bad("ring radius must be positive".into());
        }
        Ok(())
    }

    /// Distance between consecutive profiles, mm.
    pub fn axial_pitch(&self) -> f64 {
        self.line_speed / self.sample_rate
    }

    /// Profiles captured over a sample of `length` mm.
    pub fn frame_count(&self, length: f64) -> usize {
        (length / self.axial_pitch() + 1e-9).floor() as usize + 1
    }
}

/// Polar half-angle (about the cable axis) reached by a ray at fan angle
/// `alpha` from a sensor at distance `ring` from a cylinder of `radius`.
fn arc_half_angle(alpha: f64, ring: f64, radius: f64) -> f64 {
    let (s, c) = alpha.sin_cos();
    let t = ring * c - (radius * radius - ring * ring * s * s).sqrt();
    (t * s).atan2(ring - t * c)
}

/// Fan angle whose ray meets the cylinder at polar half-angle `beta`.
fn fan_angle_for_arc(beta: f64, ring: f64, radius: f64) -> f64 {
    (radius * beta.sin()).atan2(ring - radius * beta.cos())
}

/// Equally spaced sensors on the ring, all aimed at the axis, with fans
/// sized so neighbouring arcs overlap on the nominal cylinder.
pub fn place_sensors<T: Scalar>(cfg: &ScanConfig, nominal_radius: T) -> Result<Vec<SensorPose<T>>, SensorError> {
    let n = cfg.sensor_count;
    let radius = nominal_radius.as_f64();
    let ring = cfg.ring_radius;
    if !(radius > 0.0 && radius < ring) {
        return Err(SensorError::InvalidConfig(format!(
            "cable radius {radius} must be positive and inside the {ring} mm ring"
        )));
    }
    if n < 3 {
        return Err(SensorError::CoverageImpossible(format!("{n} sensors cannot see the far side")));
    }
    let visible = (radius / ring).acos();
    let required = std::f64::consts::PI / n as f64 + cfg.min_overlap_deg.to_radians() / 2.0;
    if required >= visible {
        return Err(SensorError::CoverageImpossible(format!(
            "each sensor must cover ±{:.2}° but sees at most ±{:.2}°",
            required.to_degrees(),
            visible.to_degrees()
        )));
    }
    let target = (required + cfg.coverage_margin_deg.to_radians()).min(0.5 * (required + visible));
    let fan = fan_angle_for_arc(target, ring, radius);
    Ok((0..n)
        .map(|k| {
            let phi = std::f64::consts::TAU * k as f64 / n as f64;
            SensorPose {
                position: Point2::origin().polar_offset(T::lit(ring), T::lit(phi)),
                boresight: T::lit(phi + std::f64::consts::PI),
                fan_half_angle: T::lit(fan),
                rays: cfg.rays_per_sensor,
            }
        })
        .collect())
}

/// Polar arc (radians) a pose covers on a centred cylinder of `radius`.
pub fn pose_arc_half_angle<T: Scalar>(pose: &SensorPose<T>, radius: f64) -> f64 {
    let ring = pose.position.dist(Point2::origin()).as_f64();
    arc_half_angle(pose.fan_half_angle.as_f64(), ring, radius)
}

/// Ray entry/exit parameters for a circle of `radius` around `center`.
fn ray_circle<T: Scalar>(origin: Point2<T>, dir: (T, T), center: Point2<T>, radius: T) -> Option<(T, T)> {
    let rel = origin - center;
    let b = rel.x * dir.0 + rel.y * dir.1;
    let c = rel.x * rel.x + rel.y * rel.y - radius * radius;
    let disc = b * b - c;
    if disc < T::zero() {
        return None;
    }
    let s = disc.sqrt();
    Some((-b - s, -b + s))
}

/// Distance along a ray to the first crossing of the surface at axial `y`.
pub fn ray_distance<T: Scalar, S: Surface<T> + ?Sized>(surface: &S, origin: Point2<T>, direction: T, y: T) -> Option<T> {
    let dir = direction.sin_cos();
    let dir = (dir.1, dir.0);
    let center = surface.center();
    let (r_lo, r_hi) = surface.radius_bounds();
    let (t_enter, t_exit) = ray_circle(origin, dir, center, r_hi)?;
    if t_exit < T::zero() {
        return None;
    }
    let t_start = t_enter.max(T::zero());
    let t_end = if r_lo > T::zero() {
        ray_circle(origin, dir, center, r_lo).map_or(t_exit, |(t_in, _)| t_in.max(t_start))
    } else {
        t_exit
    };

    let g = |t: T| -> T {
        let p = Point2::new(origin.x + dir.0 * t, origin.y + dir.1 * t);
        p.dist(center) - surface.radius(p.angle_from(center), y)
    };

    let step = T::lit(MARCH_STEP);
    let mut lo = t_start;
    if g(lo) <= T::zero() {
        return Some(lo);
    }
    let mut hi;
    loop {
        hi = (lo + step).min(t_end);
        if g(hi) <= T::zero() {
            break;
        }
        if hi >= t_end {
            // a grazing ray that leaves the annulus without touching the surface
            if t_end >= t_exit {
                return None;
            }
            // t_end was the inner bound and the surface must lie before it
            return Some(t_end);
        }
        lo = hi;
    }
    let tol = T::lit(RAY_TOLERANCE);
    for _ in 0..64 {
        if hi - lo <= tol {
            break;
        }
        let mid = lo + (hi - lo) * T::lit(0.5);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) <= T::zero() {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(lo + (hi - lo) * T::lit(0.5))
}

fn stream_seed(seed: u64, frame: u64, sensor: usize) -> u64 {
    // splitmix64 over the combined key
    let mut z = seed
        .wrapping_add(frame.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((sensor as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Capture one frame of all sensors at axial position `y`.
pub fn capture_frame<T: Scalar, S: Surface<T> + ?Sized>(
    surface: &S,
    poses: &[SensorPose<T>],
    y: T,
    frame_index: u64,
    cfg: &ScanConfig,
) -> RawFrame<T> {
    let max_range = T::lit(2.0 * cfg.ring_radius);
    let sigma = T::lit(cfg.noise_sigma);
    let per_sensor = poses
        .iter()
        .enumerate()
        .map(|(s, pose)| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, frame_index, s));
            (0..pose.rays)
                .map(|j| {
                    let ray_angle = pose.ray_angle(j);
                    // draw both variates for every ray so streams stay aligned
                    let drop = rng.random::<f64>() < cfg.dropout_prob;
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let distance = if drop {
                        None
                    } else {
                        ray_distance(surface, pose.position, pose.boresight + ray_angle, y)
                            .map(|d| d + sigma * T::lit(noise))
                            .filter(|d| *d > T::zero() && *d < max_range)
                    };
                    Reading { ray_angle, distance }
                })
                .collect()
        })
        .collect();
    RawFrame {
        frame_index,
        axial_pos: y,
        per_sensor,
    }
}

/// Ordered stream of frames while the cable moves through the ring.
pub struct ScanRun<T: Scalar> {
    surface: SynthSurface<T>,
    poses: Vec<SensorPose<T>>,
    cfg: ScanConfig,
    pitch: T,
    count: usize,
    next: usize,
}

impl<T: Scalar> ScanRun<T> {
    pub fn poses(&self) -> &[SensorPose<T>] {
        &self.poses
    }

    pub fn axial_pitch(&self) -> T {
        self.pitch
    }

    pub fn frame_count(&self) -> usize {
        self.count
    }

    pub fn surface(&self) -> &SynthSurface<T> {
        &self.surface
    }
}

impl<T: Scalar> Iterator for ScanRun<T> {
    type Item = RawFrame<T>;

    fn next(&mut self) -> Option<RawFrame<T>> {
        if self.next >= self.count {
            return None;
        }
        let k = self.next;
        self.next += 1;
        let y = (self.pitch * T::from_usize_lossy(k)).min(self.surface.spec().length);
        Some(capture_frame(&self.surface, &self.poses, y, k as u64, &self.cfg))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.count - self.next;
        (left, Some(left))
    }
}

/// Scan a synthetic cable: frames every `line_speed / sample_rate` mm.
pub fn run_scan<T: Scalar>(spec: &CableSpec<T>, cfg: &ScanConfig) -> Result<ScanRun<T>, SensorError> {
    cfg.validate()?;
    let surface = SynthSurface::new(spec.clone())?;
    let poses = place_sensors(cfg, spec.nominal_radius)?;
    Ok(ScanRun {
        count: cfg.frame_count(spec.length.as_f64()),
        pitch: T::lit(cfg.axial_pitch()),
        surface,
        poses,
        cfg: cfg.clone(),
        next: 0,
    })
}
