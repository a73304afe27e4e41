//! Cross-section and lengthwise quality metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{diameter_extremes, DeviationMap, GeomError, Profile, SurfaceMesh};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("mesh extent {extent:.3} mm is too short for a {needed:.3} mm waviness evaluation")]
    TooShort { extent: f64, needed: f64 },
    #[error("invalid waviness window: {0}")]
    InvalidWindow(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    /// Moving-average width used to remove long trends, mm.
    pub detrend_window: f64,
    /// Length over which the residual RMS is taken, mm.
    pub eval_length: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            detrend_window: 200.0,
            eval_length: 400.0,
        }
    }
}

/// Absolute ovality `D_max - D_min`.
pub fn ovality<T: Scalar>(p: &Profile<T>) -> Result<T, MetricsError> {
    let (d_min, d_max, _) = diameter_extremes(p)?;
    Ok(d_max - d_min)
}

/// Relative roundness `D_min / D_max`.
pub fn roundness<T: Scalar>(p: &Profile<T>) -> Result<T, MetricsError> {
    let (d_min, d_max, _) = diameter_extremes(p)?;
    Ok(d_min / d_max)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WavinessReport<T> {
    pub per_angle_rms: Vec<T>,
    pub mean_waviness: T,
    pub max_waviness: T,
    pub detrend_window: T,
    pub eval_length: T,
}

/// Lengthwise waviness: each angular column is detrended by a centered
/// moving average of `detrend_window` and the residual RMS is taken over a
/// centered stretch of `eval_length` where the full window fits.
pub fn waviness<T: Scalar>(dev: &DeviationMap<T>, detrend_window: T, eval_length: T) -> Result<WavinessReport<T>, MetricsError> {
    let pitch = dev.axial_pitch.as_f64();
    let window = detrend_window.as_f64();
    let eval = eval_length.as_f64();
    if !(window >= 3.0 * pitch) {
        return Err(MetricsError::InvalidWindow(format!(
            "detrend window {window} mm is under three axial pitches ({pitch} mm)"
        )));
    }
    if !(eval >= window) {
        return Err(MetricsError::InvalidWindow(format!(
            "evaluation length {eval} mm is shorter than the {window} mm detrend window"
        )));
    }
    let rows = dev.rows();
    let cols = dev.cols();
    let half = (window / (2.0 * pitch)).round() as usize;
    let extent = rows.saturating_sub(1) as f64 * pitch;
    let needed = eval + 2.0 * half as f64 * pitch;
    let eval_rows = (eval / pitch).round() as usize + 1;
    let valid = rows.saturating_sub(2 * half);
    if valid < eval_rows || extent + 1e-9 < needed {
        return Err(MetricsError::TooShort { extent, needed });
    }
    // keep the evaluated stretch centered so axial reversal maps it onto itself
    let mut eval_rows = eval_rows;
    if (valid - eval_rows) % 2 == 1 {
        eval_rows += 1;
    }
    let start = half + (valid - eval_rows) / 2;
    let end = start + eval_rows;

    let width = (2 * half + 1) as f64;
    let mut window_sum = vec![0.0f64; cols];
    for row in &dev.z[start - half..=start + half] {
        for (s, z) in window_sum.iter_mut().zip(row) {
            *s += z.as_f64();
        }
    }
    let mut sq = vec![0.0f64; cols];
    for j in start..end {
        if j > start {
            let (enter, leave) = (&dev.z[j + half], &dev.z[j - half - 1]);
            for ((s, a), b) in window_sum.iter_mut().zip(enter).zip(leave) {
                *s += a.as_f64() - b.as_f64();
            }
        }
        for ((q, s), z) in sq.iter_mut().zip(&window_sum).zip(&dev.z[j]) {
            let r = z.as_f64() - s / width;
            *q += r * r;
        }
    }
    let per_angle: Vec<f64> = sq.iter().map(|q| (q / eval_rows as f64).sqrt()).collect();
    let mean = per_angle.iter().sum::<f64>() / cols.max(1) as f64;
    let max = per_angle.iter().copied().fold(0.0, f64::max);
    Ok(WavinessReport {
        per_angle_rms: per_angle.into_iter().map(T::lit).collect(),
        mean_waviness: T::lit(mean),
        max_waviness: T::lit(max),
        detrend_window,
        eval_length,
    })
}

/// One row of the per-profile metric series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricRecord<T> {
    pub frame_index: u64,
    pub axial_pos: T,
    pub d_min: T,
    pub d_max: T,
    pub ovality: T,
    pub roundness: T,
}

pub fn profile_metrics<T: Scalar>(p: &Profile<T>) -> Result<MetricRecord<T>, MetricsError> {
    let (d_min, d_max, _) = diameter_extremes(p)?;
    Ok(MetricRecord {
        frame_index: p.frame_index,
        axial_pos: p.axial_pos,
        d_min,
        d_max,
        ovality: d_max - d_min,
        roundness: d_min / d_max,
    })
}

/// Metric series in axial order, one record per profile.
pub fn mesh_metrics<T: Scalar>(mesh: &SurfaceMesh<T>) -> Result<Vec<MetricRecord<T>>, MetricsError> {
    mesh.profiles.iter().map(profile_metrics).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{deviation_map, Point2, Reference};
    use crate::synth::{generate_mesh, CableSpec, ScrewVariation};
    use proptest::prelude::*;
    use std::f64::consts::TAU;

    fn ellipse_profile(a: f64, b: f64, n: usize) -> Profile<f64> {
        let radii = (0..n)
            .map(|i| {
                let t = TAU * i as f64 / n as f64;
                a * b / ((b * t.cos()).powi(2) + (a * t.sin()).powi(2)).sqrt()
            })
            .collect();
        Profile::new(0, 0.0, Point2::origin(), radii).unwrap()
    }

    fn map_from_fn(rows: usize, cols: usize, pitch: f64, f: impl Fn(f64, usize) -> f64) -> DeviationMap<f64> {
        DeviationMap {
            z: (0..rows).map(|j| (0..cols).map(|i| f(j as f64 * pitch, i)).collect()).collect(),
            reference_radius: 50.0,
            theta_pitch: TAU / cols as f64,
            axial_pitch: pitch,
            axial_origin: 0.0,
        }
    }

    #[test]
    fn circle_metrics() {
        let p = Profile::circle(50.0, 3600);
        assert_eq!(ovality(&p).unwrap(), 0.0);
        assert_eq!(roundness(&p).unwrap(), 1.0);
    }

    #[test]
    fn ellipse_metrics() {
        let p = ellipse_profile(50.65, 50.0, 3600);
        assert!((ovality(&p).unwrap() - 1.3).abs() < 1e-9);
        assert!((roundness(&p).unwrap() - 100.0 / 101.3).abs() < 1e-12);
        assert!((roundness(&p).unwrap() - 0.987166).abs() < 1e-6);
    }

    #[test]
    fn single_lobe_bump() {
        let mut p = Profile::circle(50.0, 360);
        p.radii[0] += 0.5;
        // brute force over every diameter pair
        let n = p.radii.len();
        let ds: Vec<f64> = (0..n / 2).map(|i| p.radii[i] + p.radii[i + n / 2]).collect();
        let brute = ds.iter().cloned().fold(f64::MIN, f64::max) - ds.iter().cloned().fold(f64::MAX, f64::min);
        assert_eq!(ovality(&p).unwrap(), brute);
        assert!((brute - 0.5).abs() < 1e-12);
    }

    #[test]
    fn scaled_circle_stays_round() {
        let p = Profile::circle(55.0, 64);
        assert_eq!(roundness(&p).unwrap(), 1.0);
        assert!(matches!(ovality(&Profile::circle(50.0, 63)), Err(MetricsError::Geom(GeomError::OddPointCount(63)))));
    }

    #[test]
    fn flat_map_has_zero_waviness() {
        let dev = map_from_fn(1201, 8, 0.5, |_, _| 0.0);
        let w = waviness(&dev, 200.0, 200.0).unwrap();
        assert!(w.per_angle_rms.iter().all(|&v| v == 0.0));
        assert_eq!(w.max_waviness, 0.0);
    }

    /// RMS of `x - MA(x)` for a sampled sinusoid, by direct summation.
    fn sinusoid_residual_oracle(amp: f64, wavelength: f64, pitch: f64, half: usize, rows: std::ops::Range<usize>) -> f64 {
        let f = |j: i64| amp * (TAU * j as f64 * pitch / wavelength).sin();
        let mut sq = 0.0;
        let count = rows.len();
        for j in rows {
            let j = j as i64;
            let ma: f64 = (j - half as i64..=j + half as i64).map(f).sum::<f64>() / (2 * half + 1) as f64;
            sq += (f(j) - ma).powi(2);
        }
        (sq / count as f64).sqrt()
    }

    #[test]
    fn short_sinusoid_waviness() {
        let (pitch, rows) = (0.5, 2001);
        let dev = map_from_fn(rows, 4, pitch, |y, _| 0.2 * (TAU * y / 30.0).sin());
        let w = waviness(&dev, 200.0, 400.0).unwrap();
        // the box average of width 200 still passes sinc(200/30) ≈ 4% of a λ = 30 wave
        let oracle = sinusoid_residual_oracle(0.2, 30.0, pitch, 200, 600..1401);
        for v in &w.per_angle_rms {
            assert!((v - oracle).abs() / oracle < 0.02, "{v} vs {oracle}");
            assert!((v - 0.2 / 2f64.sqrt()).abs() / 0.1414 < 0.05);
        }
    }

    #[test]
    fn long_trend_is_removed() {
        let (pitch, rows) = (0.5, 2001);
        let dev = map_from_fn(rows, 4, pitch, |y, _| 0.2 * (TAU * y / 2000.0).sin());
        let w = waviness(&dev, 200.0, 400.0).unwrap();
        let oracle = sinusoid_residual_oracle(0.2, 2000.0, pitch, 200, 600..1401);
        assert!((w.max_waviness - oracle).abs() < 1e-9);
        assert!(w.max_waviness < 0.02);
    }

    #[test]
    fn waviness_window_errors() {
        let dev = map_from_fn(100, 4, 0.5, |_, _| 0.0);
        assert!(matches!(waviness(&dev, 200.0, 200.0), Err(MetricsError::TooShort { .. })));
        assert!(matches!(waviness(&dev, 1.0, 10.0), Err(MetricsError::InvalidWindow(_))));
        assert!(matches!(waviness(&dev, 10.0, 5.0), Err(MetricsError::InvalidWindow(_))));
    }

    #[test]
    fn cylinder_series_is_constant() {
        let (mesh, _) = generate_mesh(&CableSpec::<f64>::cylinder(50.0, 10.0), 360, 0.5).unwrap();
        let series = mesh_metrics(&mesh).unwrap();
        assert_eq!(series.len(), 21);
        assert!(series.iter().all(|r| r.ovality == 0.0 && r.d_max == 100.0));
        let (one, _) = generate_mesh(&CableSpec::<f64>::cylinder(50.0, 0.2), 360, 0.5).unwrap();
        assert_eq!(mesh_metrics(&one).unwrap().len(), 1);
    }

    #[test]
    fn screw_variation_period_in_series() {
        let mut spec = CableSpec::<f64>::cylinder(50.0, 400.0);
        spec.screw_variation = ScrewVariation { amplitude: 0.1, period: 50.0 };
        let (mesh, _) = generate_mesh(&spec, 360, 0.25).unwrap();
        let series = mesh_metrics(&mesh).unwrap();
        let d: Vec<f64> = series.iter().map(|r| r.d_max).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        // DFT peak scan over candidate periods
        let best = (400..=800)
            .map(|k| 0.1 * k as f64)
            .map(|period| {
                let (mut re, mut im) = (0.0, 0.0);
                for (j, v) in d.iter().enumerate() {
                    let ph = TAU * j as f64 * 0.25 / period;
                    re += (v - mean) * ph.cos();
                    im += (v - mean) * ph.sin();
                }
                (re * re + im * im, period)
            })
            .fold((0.0, 0.0), |a, b| if b.0 > a.0 { b } else { a });
        assert!((best.1 - 50.0).abs() <= 1.0, "{best:?}");
        // the radius term moves both ends of every diameter
        let p2p = d.iter().cloned().fold(f64::MIN, f64::max) - d.iter().cloned().fold(f64::MAX, f64::min);
        assert!((p2p - 0.4).abs() < 0.04, "{p2p}");
    }

    proptest! {
        #[test]
        fn ovality_invariances(radii in proptest::collection::vec(49.0..51.0f64, 16..80), shift in 0usize..80, c in -2.0..2.0f64, s in 0.5..2.0f64) {
            let mut radii = radii;
            if radii.len() % 2 == 1 { radii.pop(); }
            let n = radii.len();
            let p = Profile::new(0, 0.0, Point2::origin(), radii.clone()).unwrap();
            let base = ovality(&p).unwrap();
            let rotated: Vec<f64> = (0..n).map(|i| radii[(i + shift) % n]).collect();
            prop_assert!((ovality(&Profile::new(0, 0.0, Point2::origin(), rotated).unwrap()).unwrap() - base).abs() < 1e-12);
            let offset: Vec<f64> = radii.iter().map(|r| r + c).collect();
            prop_assert!((ovality(&Profile::new(0, 0.0, Point2::origin(), offset).unwrap()).unwrap() - base).abs() < 1e-9);
            let scaled = Profile::new(0, 0.0, Point2::origin(), radii.iter().map(|r| r * s).collect()).unwrap();
            prop_assert!((roundness(&scaled).unwrap() - roundness(&p).unwrap()).abs() < 1e-12);
            prop_assert!((ovality(&scaled).unwrap() - s * base).abs() < 1e-9);
        }

        #[test]
        fn waviness_constant_and_reversal_invariance(seed in 0u64..1000, c in -1.0..1.0f64) {
            let rows = 301;
            let f = |y: f64, i: usize| {
                let k = (seed % 7) as f64 + 1.0;
                0.05 * (TAU * y / (3.0 + k)).sin() + 0.02 * (y * 0.37 + i as f64 + seed as f64).cos()
            };
            let dev = map_from_fn(rows, 6, 0.2, f);
            let shifted = map_from_fn(rows, 6, 0.2, |y, i| f(y, i) + c);
            let mut reversed = dev.clone();
            reversed.z.reverse();
            let a = waviness(&dev, 10.0, 30.0).unwrap();
            let b = waviness(&shifted, 10.0, 30.0).unwrap();
            let r = waviness(&reversed, 10.0, 30.0).unwrap();
            for ((x, y), z) in a.per_angle_rms.iter().zip(&b.per_angle_rms).zip(&r.per_angle_rms) {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!((x - z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deviation_map_waviness_from_screw() {
        let mut spec = CableSpec::<f64>::cylinder(50.0, 1000.0);
        spec.screw_variation = ScrewVariation { amplitude: 0.2, period: 30.0 };
        let (mesh, _) = generate_mesh(&spec, 16, 0.5).unwrap();
        let dev = deviation_map(&mesh, Reference::FixedRadius(50.0));
        let w = waviness(&dev, 200.0, 400.0).unwrap();
        assert!((w.mean_waviness - 0.2 / 2f64.sqrt()).abs() / 0.1414 < 0.05);
    }
}
