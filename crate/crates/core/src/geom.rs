//! Cross-section geometry: circle fitting, angular regularization of merged
//! sensor points, diameter extraction and deviation maps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{wrap_angle, Scalar};

/// Default number of regularized samples per profile.
pub const DEFAULT_PROFILE_POINTS: usize = 3600;

/// Default largest tolerated angular gap between merged points (degrees).
pub const DEFAULT_GAP_MAX_DEG: f64 = 5.0;

/// Mesh pitch consistency tolerance in millimetres.
pub const PITCH_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("need at least 3 points, got {0}")]
    FewPoints(usize),
    #[error("points are collinear or coincident")]
    DegenerateGeometry,
    #[error("angular coverage gap of {gap_deg:.3}° exceeds the {max_deg:.3}° limit")]
    CoverageGap { gap_deg: f64, max_deg: f64 },
    #[error("profile point count {0} is odd; diameters need opposite pairs")]
    OddPointCount(usize),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2<T> {
    pub x: T,
    pub y: T,
}

impl<T: Scalar> Point2<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn origin() -> Self {
        Self::new(T::zero(), T::zero())
    }

    /// Point at `radius` along polar angle `theta` around `self`.
    pub fn polar_offset(self, radius: T, theta: T) -> Self {
        let (s, c) = theta.sin_cos();
        Self::new(self.x + radius * c, self.y + radius * s)
    }

    pub fn dist(self, other: Self) -> T {
        let (dx, dy) = (self.x - other.x, self.y - other.y);
        (dx * dx + dy * dy).sqrt()
    }

    /// Polar angle in `[0, 2π)` of `self` seen from `center`.
    pub fn angle_from(self, center: Self) -> T {
        wrap_angle((self.y - center.y).atan2(self.x - center.x))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl<T: Scalar> std::ops::Add for Point2<T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl<T: Scalar> std::ops::Sub for Point2<T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.x - rhs.x, self.y - rhs.y)
    }
}

/// One regularized cross-section: radii at equally spaced polar angles
/// `2πi/N` about a fitted center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile<T> {
    pub frame_index: u64,
    pub axial_pos: T,
    pub center: Point2<T>,
    pub radii: Vec<T>,
}

impl<T: Scalar> Profile<T> {
    pub fn new(frame_index: u64, axial_pos: T, center: Point2<T>, radii: Vec<T>) -> Result<Self, GeomError> {
        let p = Self {
            frame_index,
            axial_pos,
            center,
            radii,
        };
        p.validate()?;
        Ok(p)
    }

    /// A perfect circle of `n` samples.
    pub fn circle(radius: T, n: usize) -> Self {
        Self {
            frame_index: 0,
            axial_pos: T::zero(),
            center: Point2::origin(),
            radii: vec![radius; n],
        }
    }

    pub fn n_points(&self) -> usize {
        self.radii.len()
    }

    /// Polar angle of sample `i`.
    pub fn angle(&self, i: usize) -> T {
        T::TAU() * T::from_usize_lossy(i) / T::from_usize_lossy(self.radii.len())
    }

    pub fn mean_radius(&self) -> T {
        self.radii.iter().copied().sum::<T>() / T::from_usize_lossy(self.radii.len())
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if self.radii.len() < 8 {
            return Err(GeomError::InvalidProfile(format!(
                "{} samples, need at least 8",
                self.radii.len()
            )));
        }
        if let Some(i) = self.radii.iter().position(|r| !(r.is_finite() && *r > T::zero())) {
            return Err(GeomError::InvalidProfile(format!(
                "radius {} at index {i} is not positive and finite",
                self.radii[i]
            )));
        }
        if !self.axial_pos.is_finite() || !self.center.is_finite() {
            return Err(GeomError::InvalidProfile("non-finite position".into()));
        }
        Ok(())
    }
}

/// M axial profiles of N angular samples; the topographic surface map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceMesh<T> {
    pub profiles: Vec<Profile<T>>,
    pub axial_pitch: T,
    pub nominal_radius: T,
}

impl<T: Scalar> SurfaceMesh<T> {
    pub fn new(profiles: Vec<Profile<T>>, axial_pitch: T, nominal_radius: T) -> Result<Self, GeomError> {
        let m = Self {
            profiles,
            axial_pitch,
            nominal_radius,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.profiles.len()
    }

    pub fn cols(&self) -> usize {
        self.profiles.first().map_or(0, |p| p.n_points())
    }

    /// Axial extent from first to last profile.
    pub fn axial_extent(&self) -> T {
        match (self.profiles.first(), self.profiles.last()) {
            (Some(a), Some(b)) => b.axial_pos - a.axial_pos,
            _ => T::zero(),
        }
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        let first = self
            .profiles
            .first()
            .ok_or_else(|| GeomError::InvalidMesh("mesh has no profiles".into()))?;
        if !(self.axial_pitch > T::zero()) {
            return Err(GeomError::InvalidMesh("axial pitch must be positive".into()));
        }
        if !(self.nominal_radius > T::zero()) {
            return Err(GeomError::InvalidMesh("nominal radius must be positive".into()));
        }
        let n = first.n_points();
        for (j, p) in self.profiles.iter().enumerate() {
            p.validate()?;
            if p.n_points() != n {
                return Err(GeomError::InvalidMesh(format!(
                    "profile {j} has {} samples, expected {n}",
                    p.n_points()
                )));
            }
            let expected = first.axial_pos + self.axial_pitch * T::from_usize_lossy(j);
            // f32 positions cannot hold the pitch to 1e-9 mm
            let tol = T::lit(PITCH_TOLERANCE).max(T::epsilon() * T::lit(16.0) * expected.abs());
            if (p.axial_pos - expected).abs() > tol {
                return Err(GeomError::InvalidMesh(format!(
                    "profile {j} at {} breaks the uniform pitch (expected {expected})",
                    p.axial_pos
                )));
            }
        }
        Ok(())
    }
}

/// Surface deviation from a reference cylinder, `z[j][i] = radii[j][i] - reference`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationMap<T> {
    pub z: Vec<Vec<T>>,
    pub reference_radius: T,
    pub theta_pitch: T,
    pub axial_pitch: T,
    /// Axial position of row 0.
    pub axial_origin: T,
}

impl<T: Scalar> DeviationMap<T> {
    pub fn rows(&self) -> usize {
        self.z.len()
    }

    pub fn cols(&self) -> usize {
        self.z.first().map_or(0, Vec::len)
    }
}

/// How the ideal cylinder of a deviation map is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference<T> {
    FixedRadius(T),
    PerMeshMeanRadius,
}

/// Algebraic (Kåsa) least-squares circle through `points`.
///
/// Coordinates are centered on the centroid before forming the normal
/// equations, which keeps the 2x2 system well conditioned for cables far
/// from the scanner origin.
pub fn fit_circle<T: Scalar>(points: &[Point2<T>]) -> Result<(Point2<T>, T), GeomError> {
    if points.len() < 3 {
        return Err(GeomError::FewPoints(points.len()));
    }
    let n = T::from_usize_lossy(points.len());
    let mx = points.iter().map(|p| p.x).sum::<T>() / n;
    let my = points.iter().map(|p| p.y).sum::<T>() / n;

    let (mut suu, mut svv, mut suv) = (T::zero(), T::zero(), T::zero());
    let (mut suuu, mut svvv, mut suvv, mut svuu) = (T::zero(), T::zero(), T::zero(), T::zero());
    for p in points {
        let u = p.x - mx;
        let v = p.y - my;
        let (uu, vv) = (u * u, v * v);
        suu += uu;
        svv += vv;
        suv += u * v;
        suuu += uu * u;
        svvv += vv * v;
        suvv += u * vv;
        svuu += v * uu;
    }
    let det = suu * svv - suv * suv;
    let scale = (suu + svv) * (suu + svv);
    if !(scale > T::zero()) || det <= T::lit(1e-9) * scale {
        return Err(GeomError::DegenerateGeometry);
    }
    let half = T::lit(0.5);
    let b1 = half * (suuu + suvv);
    let b2 = half * (svvv + svuu);
    let uc = (b1 * svv - b2 * suv) / det;
    let vc = (suu * b2 - suv * b1) / det;
    let r2 = uc * uc + vc * vc + (suu + svv) / n;
    let radius = r2.sqrt();
    if !(radius > T::zero() && radius.is_finite()) {
        return Err(GeomError::DegenerateGeometry);
    }
    Ok((Point2::new(uc + mx, vc + my), radius))
}

/// Regularize scattered cross-section points into `n` radii at equal angles
/// about `center`, using the default coverage gap limit.
pub fn resample_profile<T: Scalar>(points: &[Point2<T>], center: Point2<T>, n: usize) -> Result<Profile<T>, GeomError> {
    resample_profile_with_gap(points, center, n, T::lit(DEFAULT_GAP_MAX_DEG.to_radians()))
}

/// As [`resample_profile`] with an explicit maximum angular gap (radians).
pub fn resample_profile_with_gap<T: Scalar>(
    points: &[Point2<T>],
    center: Point2<T>,
    n: usize,
    gap_max: T,
) -> Result<Profile<T>, GeomError> {
    let polar = polar_samples(points, center);
    resample_polar(&polar, n, gap_max).and_then(|radii| Profile::new(0, T::zero(), center, radii))
}

/// `(angle, radius)` pairs about `center`, sorted by angle, equal angles averaged.
pub(crate) fn polar_samples<T: Scalar>(points: &[Point2<T>], center: Point2<T>) -> Vec<(T, T)> {
    let mut polar: Vec<(T, T)> = points
        .iter()
        .map(|p| (p.angle_from(center), p.dist(center)))
        .collect();
    polar.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite angles"));

    let mut merged: Vec<(T, T)> = Vec::with_capacity(polar.len());
    let mut i = 0;
    while i < polar.len() {
        let a = polar[i].0;
        let mut j = i;
        let mut sum = T::zero();
        while j < polar.len() && polar[j].0 == a {
            sum += polar[j].1;
            j += 1;
        }
        merged.push((a, sum / T::from_usize_lossy(j - i)));
        i = j;
    }
    merged
}

/// Largest angular gap between consecutive sorted angles, seam included.
pub(crate) fn max_angular_gap<T: Scalar>(sorted: &[(T, T)]) -> T {
    match (sorted.first(), sorted.last()) {
        (Some(first), Some(last)) if sorted.len() > 1 => {
            let seam = first.0 + T::TAU() - last.0;
            sorted.windows(2).map(|w| w[1].0 - w[0].0).fold(seam, T::max)
        }
        _ => T::TAU(),
    }
}

/// Piecewise-linear resampling of sorted polar samples, wrapping across the
/// 0/2π seam.
pub(crate) fn resample_polar<T: Scalar>(sorted: &[(T, T)], n: usize, gap_max: T) -> Result<Vec<T>, GeomError> {
    let gap = max_angular_gap(sorted);
    if gap >= gap_max {
        return Err(GeomError::CoverageGap {
            gap_deg: gap.as_f64().to_degrees(),
            max_deg: gap_max.as_f64().to_degrees(),
        });
    }
    let m = sorted.len();
    let tau = T::TAU();
    let step = tau / T::from_usize_lossy(n);
    let mut radii = Vec::with_capacity(n);
    // index of the first sample with angle > query
    let mut next = 0;
    for i in 0..n {
        let q = step * T::from_usize_lossy(i);
        while next < m && sorted[next].0 <= q {
            next += 1;
        }
        let (a0, r0) = if next == 0 {
            let (a, r) = sorted[m - 1];
            (a - tau, r)
        } else {
            sorted[next - 1]
        };
        let (a1, r1) = if next == m {
            let (a, r) = sorted[0];
            (a + tau, r)
        } else {
            sorted[next]
        };
        let span = a1 - a0;
        let r = if span > T::zero() {
            r0 + (r1 - r0) * (q - a0) / span
        } else {
            r0
        };
        radii.push(r);
    }
    Ok(radii)
}

/// Minimum and maximum diameter of a profile and the angle of the maximum.
///
/// Diameter `i` pairs sample `i` with the opposite sample `i + N/2`.
pub fn diameter_extremes<T: Scalar>(p: &Profile<T>) -> Result<(T, T, T), GeomError> {
    let n = p.n_points();
    if !n.is_multiple_of(2) {
        return Err(GeomError::OddPointCount(n));
    }
    let half = n / 2;
    let mut d_min = T::infinity();
    let mut d_max = T::neg_infinity();
    let mut i_max = 0;
    for i in 0..half {
        let d = p.radii[i] + p.radii[i + half];
        if d < d_min {
            d_min = d;
        }
        if d > d_max {
            d_max = d;
            i_max = i;
        }
    }
    Ok((d_min, d_max, p.angle(i_max)))
}

/// Deviation of every mesh radius from the chosen reference cylinder.
pub fn deviation_map<T: Scalar>(mesh: &SurfaceMesh<T>, reference: Reference<T>) -> DeviationMap<T> {
    let reference_radius = match reference {
        Reference::FixedRadius(r) => r,
        Reference::PerMeshMeanRadius => mesh_mean_radius(mesh),
    };
    let z = mesh
        .profiles
        .iter()
        .map(|p| p.radii.iter().map(|&r| r - reference_radius).collect())
        .collect();
    DeviationMap {
        z,
        reference_radius,
        theta_pitch: T::TAU() / T::from_usize_lossy(mesh.cols().max(1)),
        axial_pitch: mesh.axial_pitch,
        axial_origin: mesh.profiles.first().map_or(T::zero(), |p| p.axial_pos),
    }
}

/// Mean of all radii in the mesh, accumulated in f64.
pub fn mesh_mean_radius<T: Scalar>(mesh: &SurfaceMesh<T>) -> T {
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in &mesh.profiles {
        sum += p.radii.iter().map(|r| r.as_f64()).sum::<f64>();
        count += p.radii.len();
    }
    T::lit(sum / count.max(1) as f64)
}
