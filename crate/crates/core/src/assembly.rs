//! Raw sensor frames to regularized profiles: merge, outlier rejection,
//! circle fit, resampling and light angular smoothing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{fit_circle, max_angular_gap, polar_samples, resample_polar, GeomError, Point2, Profile, SurfaceMesh};
use crate::scalar::Scalar;
use crate::sensor::{run_scan, RawFrame, ScanConfig, SensorError, SensorPose};
use crate::synth::CableSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssemblyError {
    #[error("frame {0} has no valid readings")]
    EmptyFrame(u64),
    #[error("outlier rejection removed {removed} of {total} points")]
    TooManyOutliers { removed: usize, total: usize },
    #[error("frame layout does not match the sensor poses")]
    LayoutMismatch,
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssemblyConfig {
    /// Regularized samples per profile; must be even.
    pub n_points: usize,
    pub gap_max_deg: f64,
    /// Full width of the angular window for the local median.
    pub outlier_window_deg: f64,
    /// Rejection threshold in multiples of the window MAD.
    pub outlier_k: f64,
    /// MAD never counts as smaller than this, mm.
    pub mad_floor: f64,
    pub max_outlier_fraction: f64,
    /// Circular moving-average width applied to resampled radii; 0 disables.
    pub smooth_window_deg: f64,
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        Self {
            n_points: crate::geom::DEFAULT_PROFILE_POINTS,
            gap_max_deg: crate::geom::DEFAULT_GAP_MAX_DEG,
            outlier_window_deg: 5.0,
            outlier_k: 5.0,
            mad_floor: 1e-4,
            max_outlier_fraction: 0.2,
            smooth_window_deg: 1.0,
        }
    }
}

/// Map every valid reading into the scanner frame.
pub fn merge_frame<T: Scalar>(frame: &RawFrame<T>, poses: &[SensorPose<T>]) -> Result<Vec<Point2<T>>, AssemblyError> {
    if frame.per_sensor.len() != poses.len() {
        return Err(AssemblyError::LayoutMismatch);
    }
    let mut points = Vec::with_capacity(frame.valid_count());
    for (pose, readings) in poses.iter().zip(&frame.per_sensor) {
        for r in readings {
            if let Some(d) = r.distance {
                points.push(pose.position.polar_offset(d, pose.boresight + r.ray_angle));
            }
        }
    }
    if points.is_empty() {
        return Err(AssemblyError::EmptyFrame(frame.frame_index));
    }
    Ok(points)
}

/// Centroid of a non-empty point set.
pub fn centroid<T: Scalar>(points: &[Point2<T>]) -> Point2<T> {
    let n = T::from_usize_lossy(points.len());
    Point2::new(
        points.iter().map(|p| p.x).sum::<T>() / n,
        points.iter().map(|p| p.y).sum::<T>() / n,
    )
}

/// Sorted window of radii supporting insertion, removal, median and MAD.
struct SortedWindow<T> {
    values: Vec<T>,
}

impl<T: Scalar> SortedWindow<T> {
    fn insert(&mut self, v: T) {
        let at = self.values.partition_point(|x| *x < v);
        self.values.insert(at, v);
    }

    fn remove(&mut self, v: T) {
        let at = self.values.partition_point(|x| *x < v);
        debug_assert!(self.values[at] == v);
        self.values.remove(at);
    }

    fn median(&self) -> T {
        median_sorted(&self.values)
    }

    /// Median absolute deviation from `m`. Deviations below and above the
    /// split form two ascending runs; order statistics come from selecting
    /// across both runs.
    fn mad(&self, m: T) -> T {
        let v = &self.values;
        let n = v.len();
        let split = v.partition_point(|x| *x < m);
        let below = |i: usize| m - v[split - 1 - i];
        let above = |j: usize| v[split + j] - m;
        let at = kth_of_two(below, split, above, n - split, n / 2);
        if n % 2 == 1 {
            at
        } else {
            (kth_of_two(below, split, above, n - split, n / 2 - 1) + at) * T::lit(0.5)
        }
    }
}

impl<T: Scalar> SortedWindow<T> {
    /// Whether `|r - m| <= k * max(MAD, floor)` about the window median `m`.
    fn accepts(&self, r: T, m: T, k: T, mad_floor: T) -> bool {
        let e = (r - m).abs();
        if e <= k * mad_floor {
            return true;
        }
        // MAD clearly exceeds `d` when fewer than half the deviations fall
        // below it; the margin keeps this agreeing with the exact test
        let d = e / k * T::lit(1.0 + 1e-9);
        let v = &self.values;
        let n = v.len();
        let most = if n % 2 == 1 { n / 2 } else { n / 2 - 1 };
        let split = v.partition_point(|x| *x < m);
        let (mut l, mut r) = (split, split);
        while l > 0 && m - v[l - 1] < d && (r - l) <= most {
            l -= 1;
        }
        while r < n && v[r] - m < d && (r - l) <= most {
            r += 1;
        }
        if r - l <= most {
            return true;
        }
        e <= k * self.mad(m).max(mad_floor)
    }
}

/// `k`-th smallest (0-based) of the union of two ascending sequences.
fn kth_of_two<T: Scalar>(a: impl Fn(usize) -> T, na: usize, b: impl Fn(usize) -> T, nb: usize, k: usize) -> T {
    debug_assert!(k < na + nb);
    // i = how many of the k + 1 smallest come from `a`
    let (mut lo, mut hi) = ((k + 1).saturating_sub(nb), (k + 1).min(na));
    while lo < hi {
        let i = (lo + hi) / 2;
        if a(i) < b(k - i) {
            lo = i + 1;
        } else {
            hi = i;
        }
    }
    let j = k + 1 - lo;
    match (lo > 0, j > 0) {
        (true, true) => a(lo - 1).max(b(j - 1)),
        (true, false) => a(lo - 1),
        (false, _) => b(j - 1),
    }
}

pub(crate) fn median_sorted<T: Scalar>(v: &[T]) -> T {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) * T::lit(0.5)
    }
}

/// One rejection pass over angle-sorted `(angle, radius)` samples; returns
/// the keep mask.
/// Points with `dirty[i] == false` are kept without evaluation.
fn rejection_pass<T: Scalar>(samples: &[(T, T)], dirty: &[bool], half_window: T, k: T, mad_floor: T) -> Vec<bool> {
    let n = samples.len();
    let tau = T::TAU();
    if half_window >= T::PI() {
        let mut all: Vec<T> = samples.iter().map(|s| s.1).collect();
        all.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        let w = SortedWindow { values: all };
        let m = w.median();
        let limit = k * w.mad(m).max(mad_floor);
        return samples.iter().zip(dirty).map(|(s, d)| !d || (s.1 - m).abs() <= limit).collect();
    }
    // unrolled angles and radii of virtual indices [-n, 2n), stored at v + n
    let unrolled: Vec<(T, T)> = (0..3 * n)
        .map(|u| {
            let (a, r) = samples[u % n];
            (a + tau * T::from_isize((u / n) as isize - 1).unwrap(), r)
        })
        .collect();
    let angle = |v: isize| unrolled[(v + n as isize) as usize].0;
    let radius = |v: isize| unrolled[(v + n as isize) as usize].1;

    let mut window = SortedWindow { values: Vec::new() };
    // window holds virtual indices [lo, hi), at most n of them
    let a0 = samples[0].0;
    let mut lo: isize = 0;
    while lo - 1 > -(n as isize) && angle(lo - 1) >= a0 - half_window {
        lo -= 1;
    }
    let mut hi = lo;
    let mut keep = Vec::with_capacity(n);
    for i in 0..n as isize {
        let a = angle(i);
        while angle(lo) < a - half_window {
            if lo < hi {
                window.remove(radius(lo));
            }
            lo += 1;
            hi = hi.max(lo);
        }
        while hi - lo < n as isize && angle(hi) <= a + half_window {
            window.insert(radius(hi));
            hi += 1;
        }
        if !dirty[i as usize] {
            keep.push(true);
            continue;
        }
        let m = window.median();
        keep.push(window.accepts(samples[i as usize].1, m, k, mad_floor));
    }
    keep
}

/// Whether some angle in ascending `sorted` lies within `half` of `a`,
/// measured around the circle.
fn near_any<T: Scalar>(sorted: &[T], a: T, half: T) -> bool {
    if sorted.is_empty() {
        return false;
    }
    if half >= T::PI() {
        return true;
    }
    let tau = T::TAU();
    let at = sorted.partition_point(|x| *x < a);
    let next = if at < sorted.len() { sorted[at] } else { sorted[0] + tau };
    let prev = if at > 0 { sorted[at - 1] } else { sorted[sorted.len() - 1] - tau };
    next - a <= half || a - prev <= half
}

fn reject_sorted<T: Scalar>(
    samples: Vec<(T, T, usize)>,
    cfg: &AssemblyConfig,
) -> Result<Vec<(T, T, usize)>, AssemblyError> {
    let total = samples.len();
    let half = T::lit(cfg.outlier_window_deg.to_radians() * 0.5);
    let k = T::lit(cfg.outlier_k);
    let floor = T::lit(cfg.mad_floor);
    let max_removed = (cfg.max_outlier_fraction * total as f64).floor() as usize;
    let mut kept = samples;
    let mut dirty = vec![true; total];
    // iterate to a fixed point so a second call removes nothing; after the
    // first pass only windows that lost a member can change their verdict
    loop {
        let pairs: Vec<(T, T)> = kept.iter().map(|s| (s.0, s.1)).collect();
        let mask = rejection_pass(&pairs, &dirty, half, k, floor);
        if mask.iter().all(|&m| m) {
            return Ok(kept);
        }
        let removed: Vec<T> = kept.iter().zip(&mask).filter(|(_, m)| !**m).map(|(s, _)| s.0).collect();
        kept = kept.into_iter().zip(mask).filter_map(|(s, m)| m.then_some(s)).collect();
        dirty = kept.iter().map(|s| near_any(&removed, s.0, half)).collect();
        let removed = total - kept.len();
        if removed > max_removed {
            return Err(AssemblyError::TooManyOutliers { removed, total });
        }
        if kept.len() < 3 {
            return Err(AssemblyError::TooManyOutliers { removed, total });
        }
    }
}

/// Drop points whose radius about `center_hint` deviates from the median of
/// their angular neighbourhood by more than `k` MADs. Order is preserved.
pub fn reject_outliers<T: Scalar>(
    points: &[Point2<T>],
    center_hint: Point2<T>,
    cfg: &AssemblyConfig,
) -> Result<Vec<Point2<T>>, AssemblyError> {
    if points.len() < 8 {
        return Err(GeomError::FewPoints(points.len()).into());
    }
    let mut samples: Vec<(T, T, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (p.angle_from(center_hint), p.dist(center_hint), i))
        .collect();
    // stable: equal angles keep index order; sensor runs arrive presorted
    samples.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let kept = reject_sorted(samples, cfg)?;
    let mut idx: Vec<usize> = kept.into_iter().map(|s| s.2).collect();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| points[i]).collect())
}

/// Circular moving average over `window` samples (odd).
pub fn smooth_circular<T: Scalar>(radii: &[T], window: usize) -> Vec<T> {
    let n = radii.len();
    if window <= 1 || n == 0 {
        return radii.to_vec();
    }
    let half = (window / 2).min((n - 1) / 2);
    let w = (2 * half + 1) as f64;
    // prefix sums over the wrapped sequence, in f64
    let mut prefix = Vec::with_capacity(n + 2 * half + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for k in 0..n + 2 * half {
        acc += radii[(k + n - half) % n].as_f64();
        prefix.push(acc);
    }
    (0..n).map(|i| T::lit((prefix[i + 2 * half + 1] - prefix[i]) / w)).collect()
}

/// Full conditioning chain for one frame.
pub fn assemble_profile<T: Scalar>(
    frame: &RawFrame<T>,
    poses: &[SensorPose<T>],
    cfg: &AssemblyConfig,
) -> Result<Profile<T>, AssemblyError> {
    let points = merge_frame(frame, poses)?;
    let hint = centroid(&points);
    let points = reject_outliers(&points, hint, cfg)?;
    let (center, _) = fit_circle(&points)?;
    let polar = polar_samples(&points, center);
    let gap_max = T::lit(cfg.gap_max_deg.to_radians());
    debug_assert!(max_angular_gap(&polar) >= T::zero());
    let radii = resample_polar(&polar, cfg.n_points, gap_max)?;
    let window = (cfg.smooth_window_deg / 360.0 * cfg.n_points as f64).round() as usize;
    let radii = smooth_circular(&radii, window | 1);
    Ok(Profile::new(frame.frame_index, frame.axial_pos, center, radii)?)
}

/// Scans `spec` and assembles every frame into a mesh.
pub fn scan_to_mesh<T: Scalar>(spec: &CableSpec<T>, scan: &ScanConfig, cfg: &AssemblyConfig) -> Result<SurfaceMesh<T>, AssemblyError> {
    let run = run_scan(spec, scan)?;
    let poses = run.poses().to_vec();
    let pitch = run.axial_pitch();
    let profiles = run.map(|f| assemble_profile(&f, &poses, cfg)).collect::<Result<Vec<_>, _>>()?;
    Ok(SurfaceMesh::new(profiles, pitch, spec.nominal_radius)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensor::{capture_frame, place_sensors, ScanConfig};
    use crate::synth::{CableSpec, Surface, SynthSurface};
    use proptest::prelude::*;
    use std::f64::consts::TAU;

    fn noiseless() -> ScanConfig {
        ScanConfig {
            noise_sigma: 0.0,
            ..ScanConfig::default()
        }
    }

    fn cylinder(r: f64) -> SynthSurface<f64> {
        SynthSurface::new(CableSpec::cylinder(r, 1000.0)).unwrap()
    }

    struct Shifted<'a> {
        inner: &'a SynthSurface<f64>,
        center: Point2<f64>,
    }

    impl Surface<f64> for Shifted<'_> {
        fn radius(&self, theta: f64, y: f64) -> f64 {
            self.inner.radius(theta, y)
        }
        fn radius_bounds(&self) -> (f64, f64) {
            self.inner.radius_bounds()
        }
        fn center(&self) -> Point2<f64> {
            self.center
        }
    }

    /// Brute-force windowed median/MAD decision for every point.
    fn brute_force_keep(points: &[Point2<f64>], hint: Point2<f64>, cfg: &AssemblyConfig) -> Vec<bool> {
        let half = cfg.outlier_window_deg.to_radians() / 2.0;
        let polar: Vec<(f64, f64)> = points.iter().map(|p| (p.angle_from(hint), p.dist(hint))).collect();
        let med = |mut v: Vec<f64>| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                (v[n / 2 - 1] + v[n / 2]) / 2.0
            }
        };
        polar
            .iter()
            .map(|&(a, r)| {
                let win: Vec<f64> = polar
                    .iter()
                    .filter(|(b, _)| crate::scalar::angle_diff(*b, a).abs() <= half + 1e-12)
                    .map(|p| p.1)
                    .collect();
                let m = med(win.clone());
                let mad = med(win.iter().map(|v| (v - m).abs()).collect());
                (r - m).abs() <= cfg.outlier_k * mad.max(cfg.mad_floor)
            })
            .collect()
    }

    #[test]
    fn merge_central_ray() {
        let pose = SensorPose {
            position: Point2::new(250.0, 0.0),
            boresight: std::f64::consts::PI,
            fan_half_angle: 0.1,
            rays: 3,
        };
        let frame = RawFrame {
            frame_index: 0,
            axial_pos: 0.0,
            per_sensor: vec![vec![
                crate::sensor::Reading { ray_angle: -0.1, distance: None },
                crate::sensor::Reading { ray_angle: 0.0, distance: Some(200.0) },
                crate::sensor::Reading { ray_angle: 0.1, distance: None },
            ]],
        };
        let pts = merge_frame(&frame, &[pose]).unwrap();
        assert_eq!(pts.len(), 1);
        assert!((pts[0].x - 50.0).abs() < 1e-12 && pts[0].y.abs() < 1e-12);

        let mut empty = frame.clone();
        empty.per_sensor[0][1].distance = None;
        assert_eq!(merge_frame(&empty, &[pose]), Err(AssemblyError::EmptyFrame(0)));
    }

    #[test]
    fn merged_noiseless_points_lie_on_cylinder() {
        let cfg = noiseless();
        let poses = place_sensors::<f64>(&cfg, 50.0).unwrap();
        let frame = capture_frame(&cylinder(50.0), &poses, 0.0, 0, &cfg);
        let pts = merge_frame(&frame, &poses).unwrap();
        assert_eq!(pts.len(), 2400);
        for p in &pts {
            assert!((p.dist(Point2::origin()) - 50.0).abs() < 1e-6);
        }
    }

    fn circle_points(n: usize, r: f64) -> Vec<Point2<f64>> {
        (0..n)
            .map(|i| Point2::origin().polar_offset(r + 0.002 * (7.0 * TAU * i as f64 / n as f64).sin(), TAU * i as f64 / n as f64))
            .collect()
    }

    #[test]
    fn clean_points_survive() {
        let pts = circle_points(2400, 50.0);
        let out = reject_outliers(&pts, Point2::origin(), &AssemblyConfig::default()).unwrap();
        assert_eq!(out, pts);
    }

    #[test]
    fn single_spike_removed() {
        let mut pts = circle_points(2400, 50.0);
        let spike = 1234;
        pts[spike] = Point2::origin().polar_offset(55.0, TAU * spike as f64 / 2400.0);
        let cfg = AssemblyConfig::default();
        let keep = brute_force_keep(&pts, Point2::origin(), &cfg);
        assert_eq!(keep.iter().filter(|k| !**k).count(), 1);
        assert!(!keep[spike]);
        let out = reject_outliers(&pts, Point2::origin(), &cfg).unwrap();
        assert_eq!(out.len(), 2399);
        assert!(!out.contains(&pts[spike]));
    }

    #[test]
    fn mass_offsets_are_sensor_failure() {
        let mut pts = circle_points(2400, 50.0);
        for (i, p) in pts.iter_mut().enumerate() {
            if i % 10 < 3 {
                *p = Point2::origin().polar_offset(55.0, TAU * i as f64 / 2400.0);
            }
        }
        // offsets interleaved with clean points land in every window
        let res = reject_outliers(&pts, Point2::origin(), &AssemblyConfig::default());
        assert!(matches!(res, Err(AssemblyError::TooManyOutliers { .. })), "{res:?}");
    }

    #[test]
    fn too_few_points() {
        let pts = circle_points(7, 50.0);
        assert!(matches!(
            reject_outliers(&pts, Point2::origin(), &AssemblyConfig::default()),
            Err(AssemblyError::Geom(GeomError::FewPoints(7)))
        ));
    }

    #[test]
    fn sliding_window_matches_brute_force_on_noise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<_> = (0..900)
            .map(|_| {
                let a: f64 = rng.random_range(0.0..TAU);
                let r = 50.0 + rng.random_range(-0.03..0.03) + if rng.random::<f64>() < 0.01 { 2.0 } else { 0.0 };
                Point2::origin().polar_offset(r, a)
            })
            .collect();
        let cfg = AssemblyConfig::default();
        let keep = brute_force_keep(&pts, Point2::origin(), &cfg);
        let mut samples: Vec<(f64, f64)> = pts.iter().map(|p| (p.angle_from(Point2::origin()), p.dist(Point2::origin()))).collect();
        let order = {
            let mut idx: Vec<usize> = (0..pts.len()).collect();
            idx.sort_by(|a, b| samples[*a].0.partial_cmp(&samples[*b].0).unwrap());
            idx
        };
        samples = order.iter().map(|&i| samples[i]).collect();
        let all = vec![true; samples.len()];
        let fast = rejection_pass(&samples, &all, cfg.outlier_window_deg.to_radians() / 2.0, cfg.outlier_k, cfg.mad_floor);
        for (pos, &i) in order.iter().enumerate() {
            assert_eq!(fast[pos], keep[i], "point {i}");
        }
    }

    #[test]
    fn noiseless_cylinder_profile() {
        let cfg = noiseless();
        let poses = place_sensors::<f64>(&cfg, 50.0).unwrap();
        let frame = capture_frame(&cylinder(50.0), &poses, 2.0, 4, &cfg);
        let p = assemble_profile(&frame, &poses, &AssemblyConfig::default()).unwrap();
        assert_eq!(p.frame_index, 4);
        assert_eq!(p.axial_pos, 2.0);
        assert_eq!(p.n_points(), 3600);
        for r in &p.radii {
            assert!((r - 50.0).abs() < 1e-6);
        }
    }

    #[test]
    fn noisy_profiles_average_out() {
        let cfg = ScanConfig {
            noise_sigma: 0.01,
            seed: 3,
            ..ScanConfig::default()
        };
        let poses = place_sensors::<f64>(&cfg, 50.0).unwrap();
        let surf = cylinder(50.0);
        for k in 0..20 {
            let frame = capture_frame(&surf, &poses, k as f64 * 0.1, k, &cfg);
            let p = assemble_profile(&frame, &poses, &AssemblyConfig::default()).unwrap();
            assert!((p.mean_radius() - 50.0).abs() < 0.005);
        }
    }

    #[test]
    fn ellipse_ovality_through_the_chain() {
        let cfg = ScanConfig {
            noise_sigma: 0.01,
            seed: 9,
            ..ScanConfig::default()
        };
        let mut spec = CableSpec::cylinder(50.0, 100.0);
        spec.ellipse_axes = (50.65, 50.0);
        let surf = SynthSurface::new(spec).unwrap();
        let poses = place_sensors::<f64>(&cfg, 50.0).unwrap();
        for k in 0..10 {
            let frame = capture_frame(&surf, &poses, k as f64, k, &cfg);
            let p = assemble_profile(&frame, &poses, &AssemblyConfig::default()).unwrap();
            let (lo, hi, _) = crate::geom::diameter_extremes(&p).unwrap();
            assert!((hi - lo - 1.3).abs() < 0.05, "{}", hi - lo);
        }
    }

    #[test]
    fn off_center_cable_gives_same_radii() {
        let cfg = noiseless();
        let poses = place_sensors::<f64>(&cfg, 50.0).unwrap();
        let surf = cylinder(50.0);
        for (dx, dy) in [(10.0, 0.0), (0.0, -10.0), (7.0, 7.0)] {
            let shifted = Shifted {
                inner: &surf,
                center: Point2::new(dx, dy),
            };
            let frame = capture_frame(&shifted, &poses, 0.0, 0, &cfg);
            let p = assemble_profile(&frame, &poses, &AssemblyConfig::default()).unwrap();
            assert!((p.center.x - dx).abs() < 1e-6 && (p.center.y - dy).abs() < 1e-6);
            for r in &p.radii {
                assert!((r - 50.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn smoothing_preserves_constants() {
        let v = vec![2.5; 100];
        assert_eq!(smooth_circular(&v, 11), v);
        let mut spike = vec![0.0_f64; 10];
        spike[0] = 3.0;
        let s = smooth_circular(&spike, 3);
        assert!((s[9] - 1.0).abs() < 1e-12 && (s[1] - 1.0).abs() < 1e-12 && s[5] == 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn rejection_is_idempotent(seed in 0u64..10_000) {
            use rand::{Rng, SeedableRng};
            use rand_distr::{Distribution, Normal};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, 0.01).unwrap();
            let pts: Vec<_> = (0..1200)
                .map(|i| {
                    let a = TAU * (i as f64 + rng.random::<f64>()) / 1200.0;
                    let spike = if rng.random::<f64>() < 0.01 { 1.0 } else { 0.0 };
                    Point2::origin().polar_offset(50.0 + noise.sample(&mut rng) + spike, a)
                })
                .collect();
            let cfg = AssemblyConfig::default();
            let once = reject_outliers(&pts, Point2::origin(), &cfg).unwrap();
            let twice = reject_outliers(&once, Point2::origin(), &cfg).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn window_mad_matches_sorting(mut v in proptest::collection::vec(-5.0f64..5.0, 1..60), pick in 0usize..60, r in -8.0f64..8.0) {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let w = SortedWindow { values: v.clone() };
            // probe at a window value as well as at the true median
            for m in [w.median(), v[pick % v.len()]] {
                let mut dev: Vec<f64> = v.iter().map(|x| (x - m).abs()).collect();
                dev.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mad = median_sorted(&dev);
                prop_assert_eq!(w.mad(m), mad);
                prop_assert_eq!(w.accepts(r, m, 5.0, 1e-4), (r - m).abs() <= 5.0 * mad.max(1e-4));
            }
        }

        #[test]
        fn fixed_point_matches_repeated_brute_force(seed in 0u64..10_000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            // clustered spikes need several passes to peel off
            let pts: Vec<_> = (0..400)
                .map(|i| {
                    let a = TAU * i as f64 / 400.0;
                    let burst = if (i / 4) % 23 == 0 { rng.random_range(0.2..1.5) } else { 0.0 };
                    Point2::origin().polar_offset(50.0 + rng.random_range(-0.02..0.02) + burst, a)
                })
                .collect();
            let cfg = AssemblyConfig {
                max_outlier_fraction: 0.5,
                ..AssemblyConfig::default()
            };
            let mut naive = pts.clone();
            loop {
                let keep = brute_force_keep(&naive, Point2::origin(), &cfg);
                if keep.iter().all(|k| *k) {
                    break;
                }
                naive = naive.into_iter().zip(keep).filter_map(|(p, k)| k.then_some(p)).collect();
            }
            prop_assert_eq!(reject_outliers(&pts, Point2::origin(), &cfg).unwrap(), naive);
        }
    }
}
