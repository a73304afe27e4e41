//! Acceptance criteria, one PASS/FAIL line each. Pass criterion numbers as
//! arguments to run a subset, e.g. `cargo test --test acceptance -- 1 10`.

use std::f64::consts::TAU;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use cabletopo::assembly::{assemble_profile, scan_to_mesh, AssemblyConfig};
use cabletopo::detect::{merge_regions, tiles_touch, DetectConfig, Detection, Phase};
use cabletopo::eval::{match_detections, sweep, EvalReport, Extent, Variant};
use cabletopo::geom::{deviation_map, fit_circle, resample_profile, Point2, Reference};
use cabletopo::library::{test_set, training_set};
use cabletopo::metrics::{profile_metrics, waviness};
use cabletopo::nn::{accuracy, gradient_check, train, ClassifierModel, Sample, Taxonomy, ARCH_A, ARCH_B};
use cabletopo::sensor::{place_sensors, ray_distance, run_scan, ScanConfig};
use cabletopo::synth::{generate_mesh, CableSpec, SynthSurface};
use cabletopo::unwrap::ImageMeta;
use cabletopo_io::config::AppConfig;
use cabletopo_io::server::{publish_run, Delivery, PubSubServer, ServerConfig, Subscriber, SubscriberPolicy};
use cabletopo_io::wire::{decode, encode, ProfileMsg, StreamDecoder, WireMessage, TOPIC_PROFILE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn config(name: &str) -> AppConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    AppConfig::load(&path).unwrap()
}

struct EllipseRun {
    ovality: Vec<f64>,
    roundness: Vec<f64>,
    seconds: f64,
}

fn ellipse_run() -> &'static EllipseRun {
    static RUN: OnceLock<EllipseRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = config("ellipse.toml");
        let start = Instant::now();
        let mesh = scan_to_mesh(cfg.cable.as_ref().unwrap(), &cfg.scan, &cfg.assembly).unwrap();
        let mut run = EllipseRun {
            ovality: vec![],
            roundness: vec![],
            seconds: 0.0,
        };
        for p in &mesh.profiles {
            let m = profile_metrics(p).unwrap();
            run.ovality.push(m.ovality);
            run.roundness.push(m.roundness);
        }
        run.seconds = start.elapsed().as_secs_f64();
        run
    })
}

fn range(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(*x), hi.max(*x)))
}

fn c1_ovality() -> Outcome {
    let run = ellipse_run();
    let (lo, hi) = range(&run.ovality);
    let ok = (lo - 1.3).abs() <= 0.05 && (hi - 1.3).abs() <= 0.05 && run.seconds < 60.0;
    check(ok, format!("{} profiles, ovality {lo:.4}..{hi:.4} mm (1.3 ± 0.05), {:.1} s (< 60 s)", run.ovality.len(), run.seconds))
}

fn c2_roundness() -> Outcome {
    let (lo, hi) = range(&ellipse_run().roundness);
    check((lo - 0.9872).abs() <= 5e-4 && (hi - 0.9872).abs() <= 5e-4, format!("roundness {lo:.5}..{hi:.5} (0.9872 ± 0.0005)"))
}

/// Mean per-angle waviness RMS of a lengthwise sinusoid r += a·sin(2πy/λ).
fn sinusoid_waviness(amplitude: f64, wavelength: f64) -> f64 {
    let mut spec = CableSpec::<f64>::cylinder(50.0, 700.0);
    spec.screw_variation.amplitude = amplitude;
    spec.screw_variation.period = wavelength;
    let (mesh, _) = generate_mesh(&spec, 360, 0.25).unwrap();
    let dev = deviation_map(&mesh, Reference::FixedRadius(50.0));
    waviness(&dev, 200.0, 400.0).unwrap().mean_waviness
}

fn c3_waviness() -> Outcome {
    let wave = sinusoid_waviness(0.2, 30.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut trends = vec![2000.0];
    for _ in 0..5 {
        trends.push(rng.random_range(1500.0f64..4000.0).round());
    }
    for &lambda in &trends {
        let amplitude = rng.random_range(0.05..0.3);
        worst = worst.max(sinusoid_waviness(amplitude, lambda) / (amplitude / 2f64.sqrt()));
    }
    let trends: Vec<String> = trends.iter().map(|l| format!("{l:.0}")).collect();
    let ok = (wave / 0.1414 - 1.0).abs() <= 0.05 && worst < 0.15;
    check(
        ok,
        format!(
            "λ 30 mm: {wave:.4} mm (0.1414 ± 5%); trend share ≤ {:.1}% at λ {} mm (< 15%)",
            worst * 100.0,
            trends.join("/")
        ),
    )
}

fn c4_geometry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut fit_err: f64 = 0.0;
    for _ in 0..200 {
        let (cx, cy, r) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(30.0..90.0));
        let n = rng.random_range(8..400);
        let pts: Vec<Point2<f64>> = (0..n)
            .map(|_| {
                let t: f64 = rng.random_range(0.0..TAU);
                Point2::new(cx + r * t.cos(), cy + r * t.sin())
            })
            .collect();
        let (c, fr) = fit_circle(&pts).unwrap();
        fit_err = fit_err.max((c.x - cx).abs()).max((c.y - cy).abs()).max((fr - r).abs());
    }

    let mut ray_err: f64 = 0.0;
    let mut hits = 0;
    let scan = ScanConfig {
        noise_sigma: 0.0,
        ..ScanConfig::default()
    };
    for case in 0..50 {
        // ellipses force the march-and-bisect path; circles take the direct one
        let b_axis = rng.random_range(30.0..90.0);
        let a_axis = if case % 2 == 0 { b_axis } else { b_axis + rng.random_range(0.1..2.0) };
        let mut spec = CableSpec::<f64>::cylinder(b_axis, 100.0);
        spec.ellipse_axes = (a_axis, b_axis);
        let surface = SynthSurface::new(spec).unwrap();
        for pose in place_sensors::<f64>(&scan, b_axis).unwrap() {
            for j in (0..pose.rays).step_by(7) {
                let dir = pose.boresight + pose.ray_angle(j);
                let (ox, oy) = (pose.position.x, pose.position.y);
                let (dx, dy) = (dir.cos(), dir.sin());
                let (ia, ib) = (1.0 / (a_axis * a_axis), 1.0 / (b_axis * b_axis));
                let qa = dx * dx * ia + dy * dy * ib;
                let qb = 2.0 * (ox * dx * ia + oy * dy * ib);
                let qc = ox * ox * ia + oy * oy * ib - 1.0;
                let disc = qb * qb - 4.0 * qa * qc;
                let closed = (disc >= 0.0).then(|| (-qb - disc.sqrt()) / (2.0 * qa));
                let chord = if disc >= 0.0 { disc.sqrt() / qa } else { 0.0 };
                match (ray_distance(&surface, pose.position, dir, 10.0), closed) {
                    (Some(d), Some(e)) => {
                        ray_err = ray_err.max((d - e).abs());
                        hits += 1;
                    }
                    (None, None) => {}
                    // a march step can skip a chord shorter than itself
                    (None, Some(_)) if chord < 0.2 => {}
                    (d, e) => return Err(format!("ray hit mismatch {d:?} vs {e:?}")),
                }
            }
        }
    }

    let mut resample_err: f64 = 0.0;
    for _ in 0..50 {
        let n = 2 * rng.random_range(37..1800);
        let radii: Vec<f64> = (0..n).map(|_| rng.random_range(40.0..60.0)).collect();
        let pts: Vec<Point2<f64>> = radii
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let t = TAU * i as f64 / n as f64;
                Point2::new(r * t.cos(), r * t.sin())
            })
            .collect();
        let p = resample_profile(&pts, Point2::origin(), n).unwrap();
        for (a, b) in p.radii.iter().zip(&radii) {
            resample_err = resample_err.max((a - b).abs());
        }
    }
    check(
        fit_err <= 1e-9 && ray_err <= 1e-6 && resample_err <= 1e-9,
        format!("circle fit {fit_err:.1e} (≤ 1e-9), ray distance {ray_err:.1e} mm over {hits} hits (≤ 1e-6), resampling {resample_err:.1e} mm"),
    )
}

fn c5_gradient_check() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    let mut checked = 0;
    for seed in [11u64, 22, 33] {
        for arch in [ARCH_A, ARCH_B] {
            let model = ClassifierModel::with_arch(arch, 16, Taxonomy::Binary.labels(), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch: Vec<(Vec<f64>, usize)> = (0..2)
                .map(|k| ((0..256).map(|_| rng.random_range(-0.1..0.1)).collect(), k % 2))
                .collect();
            let gc = gradient_check(&model, &batch, 1e-3, 1000, seed).unwrap();
            worst = worst.max(gc.max_rel_error);
            skipped += gc.skipped;
            checked += gc.checked;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-4 && secs < 120.0 && skipped * 20 <= checked,
        format!("max relative error {worst:.2e} (< 1e-4) over {checked} parameters ({skipped} kinked), {secs:.1} s (< 120 s)"),
    )
}

struct Trained {
    a: ClassifierModel,
    b: ClassifierModel,
    acc: [(f64, usize); 2],
    held_out: [f64; 2],
    seconds: f64,
}

fn trained() -> &'static Trained {
    static MODELS: OnceLock<Trained> = OnceLock::new();
    MODELS.get_or_init(|| {
        let cfg = config("benchmark.toml");
        let start = Instant::now();
        let seed = cfg.train.params.seed;
        let data: Vec<Sample> = training_set(&cfg.library, cfg.train.tiles, Taxonomy::Binary, seed).unwrap();
        let held: Vec<Sample> = training_set(&cfg.library, 1000, Taxonomy::Binary, seed + 1000).unwrap();
        let mut out = Vec::new();
        for (arch, salt) in [(ARCH_A, 1), (ARCH_B, 2)] {
            let mut m = ClassifierModel::with_arch(arch, cfg.library.tile, Taxonomy::Binary.labels(), seed + salt).unwrap();
            let params = cabletopo::nn::TrainConfig {
                seed: seed + salt,
                ..cfg.train.params
            };
            let report = train(&mut m, &data, &params).unwrap();
            let acc = (accuracy(&m, &data).unwrap(), report.epochs_run());
            let h = accuracy(&m, &held).unwrap();
            out.push((m, acc, h));
        }
        let (b, acc_b, h_b) = out.pop().unwrap();
        let (a, acc_a, h_a) = out.pop().unwrap();
        Trained {
            a,
            b,
            acc: [acc_a, acc_b],
            held_out: [h_a, h_b],
            seconds: start.elapsed().as_secs_f64(),
        }
    })
}

fn c6_training() -> Outcome {
    let t = trained();
    let ok = t.acc.iter().all(|(a, e)| *a >= 0.98 && *e <= 20) && t.seconds < 600.0;
    check(
        ok,
        format!(
            "A {:.2}% in {} epochs, B {:.2}% in {} epochs (≥ 98%, ≤ 20); held-out {:.2}% / {:.2}%; {:.0} s (< 600 s)",
            t.acc[0].0 * 100.0,
            t.acc[0].1,
            t.acc[1].0 * 100.0,
            t.acc[1].1,
            t.held_out[0] * 100.0,
            t.held_out[1] * 100.0,
            t.seconds
        ),
    )
}

fn benchmark_report() -> &'static (EvalReport, usize) {
    static REPORT: OnceLock<(EvalReport, usize)> = OnceLock::new();
    REPORT.get_or_init(|| {
        let cfg = config("benchmark.toml");
        let t = trained();
        let cases = test_set(&cfg.library, cfg.eval.meshes, 7).unwrap();
        let defects = cases.iter().map(|c| c.annotations.len()).sum();
        let base = DetectConfig {
            z_range: cfg.library.z_range,
            ..cfg.detect.clone()
        };
        (sweep(&cases, &t.a, &t.b, &cfg.eval.grid, &base).unwrap(), defects)
    })
}

fn c7_detection() -> Outcome {
    let (report, defects) = benchmark_report();
    let best = report.best(Variant::TwoPhase).unwrap();
    check(
        *defects >= 30 && best.hit_ratio == 1.0 && best.fpr <= 0.005,
        format!(
            "{defects} defects; best two-phase (overlap {}%, τ1 {}, τ2 {}): hit ratio {:.3} (= 1), FPR {:.4}% ({} false / {} tiles, ≤ 0.5%)",
            best.overlap,
            best.tau1,
            best.tau2,
            best.hit_ratio,
            best.fpr * 100.0,
            best.false_regions,
            best.tiles
        ),
    )
}

fn c8_dominance() -> Outcome {
    let (report, _) = benchmark_report();
    let best = report.best(Variant::TwoPhase).unwrap();
    let a = report.row_at(Variant::AOnly, best).unwrap();
    let b = report.row_at(Variant::BOnly, best).unwrap();
    check(
        report.two_phase_dominates(),
        format!(
            "overlap {}%: two-phase hit {:.3} / {} false, A only {:.3} / {}, B only {:.3} / {}",
            best.overlap, best.hit_ratio, best.false_regions, a.hit_ratio, a.false_regions, b.hit_ratio, b.false_regions
        ),
    )
}

fn random_detection(rng: &mut ChaCha8Rng, width: usize) -> Detection {
    let p = rng.random_range(0.5..1.0);
    Detection {
        origin: (rng.random_range(0..40), rng.random_range(0..width)),
        size: 8,
        theta_range: (0.0, 0.0),
        y_range: (0.0, 0.0),
        phase: Phase::Confirmed,
        class: "not_clean".into(),
        probability: p,
        class_probs: vec![1.0 - p, p],
        recentered: false,
    }
}

/// Connected components by repeated relabeling over all pairs.
fn components_oracle(d: &[Detection], width: usize) -> Vec<usize> {
    let mut label: Vec<usize> = (0..d.len()).collect();
    loop {
        let mut changed = false;
        for i in 0..d.len() {
            for j in 0..d.len() {
                let rows = d[i].origin.0.abs_diff(d[j].origin.0) <= 8;
                let dc = d[i].origin.1.abs_diff(d[j].origin.1);
                let cols = dc.min(width - dc) <= 8;
                if rows && cols && label[j] < label[i] {
                    label[i] = label[j];
                    changed = true;
                }
            }
        }
        if !changed {
            return label;
        }
    }
}

fn c9_merge_and_match() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let width = 60;
    let meta = ImageMeta {
        width,
        theta_pitch_mm: 0.5,
        axial_pitch_mm: 0.5,
        axial_origin: 0.0,
        z_min: -1.0,
        z_max: 1.0,
    };
    for instance in 0..100 {
        let n = rng.random_range(0..16);
        let d: Vec<Detection> = (0..n).map(|_| random_detection(&mut rng, width)).collect();
        let regions = merge_regions(&d, &meta);
        let labels = components_oracle(&d, width);
        let mut distinct = labels.clone();
        distinct.sort_unstable();
        distinct.dedup();
        if regions.len() != distinct.len() {
            return Err(format!("instance {instance}: {} regions, oracle {}", regions.len(), distinct.len()));
        }
        for i in 0..n {
            for j in 0..n {
                if tiles_touch(&d[i], &d[j], width) && labels[i] != labels[j] {
                    return Err(format!("instance {instance}: adjacency disagrees"));
                }
            }
        }
        let mut sizes: Vec<usize> = regions.iter().map(|r| r.members).collect();
        let mut want: Vec<usize> = distinct.iter().map(|l| labels.iter().filter(|x| *x == l).count()).collect();
        sizes.sort_unstable();
        want.sort_unstable();
        if sizes != want {
            return Err(format!("instance {instance}: member counts {sizes:?} vs {want:?}"));
        }

        let circ = 30.0;
        let extent = |rng: &mut ChaCha8Rng| {
            let (a, y) = (rng.random_range(-10.0..40.0), rng.random_range(0.0..20.0));
            Extent {
                arc: (a, a + rng.random_range(0.1..12.0)),
                y: (y, y + rng.random_range(0.1..6.0)),
            }
        };
        let rs: Vec<Extent> = (0..rng.random_range(0..6)).map(|_| extent(&mut rng)).collect();
        let an: Vec<Extent> = (0..rng.random_range(0..6)).map(|_| extent(&mut rng)).collect();
        let m = match_detections(&rs, &an, circ);
        // pairwise oracle: unroll both arcs onto [0, 2C) and compare copies
        let overlaps = |a: &Extent, b: &Extent| {
            let y = a.y.1.min(b.y.1) > a.y.0.max(b.y.0);
            let arc = (-2..=2).any(|k: i32| {
                let s = k as f64 * circ;
                a.arc.1.min(b.arc.1 + s) > a.arc.0.max(b.arc.0 + s)
            });
            y && arc
        };
        for (i, a) in an.iter().enumerate() {
            if m.annotation_hit[i] != rs.iter().any(|r| overlaps(a, r)) {
                return Err(format!("instance {instance}: hit flag {i} disagrees"));
            }
        }
        for (j, r) in rs.iter().enumerate() {
            if m.region_true[j] != an.iter().any(|a| overlaps(a, r)) {
                return Err(format!("instance {instance}: truth flag {j} disagrees"));
            }
        }
    }
    Ok("100 random instances agree with brute-force components and pairwise overlap".into())
}

fn c10_throughput() -> Outcome {
    let mut spec = CableSpec::<f64>::cylinder(50.0, 60.0);
    spec.ellipse_axes = (50.65, 50.0);
    let scan = ScanConfig::default();
    let run = run_scan(&spec, &scan).unwrap();
    let poses = run.poses().to_vec();
    let frames: Vec<_> = run.collect();
    let cfg = AssemblyConfig::default();
    let start = Instant::now();
    for f in &frames {
        let p = assemble_profile(f, &poses, &cfg).unwrap();
        std::hint::black_box(profile_metrics(&p).unwrap());
    }
    let rate = frames.len() as f64 / start.elapsed().as_secs_f64();
    check(rate >= 800.0, format!("{rate:.0} profiles/s at {} points (≥ 800)", cfg.n_points))
}

fn c11_protocol() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut stream = Vec::new();
    let mut sent = Vec::new();
    for k in 0..10_000u64 {
        let m = WireMessage::Profile(ProfileMsg {
            frame_index: rng.random(),
            axial_pos: rng.random_range(-1e6..1e6),
            radii: (0..rng.random_range(0..200)).map(|_| rng.random_range(20.0f32..100.0)).collect(),
        });
        let m = if k % 3 == 0 {
            WireMessage::Heartbeat(cabletopo_io::wire::HeartbeatMsg {
                sequence: k,
                dropped: rng.random(),
            })
        } else {
            m
        };
        let bytes = encode(&m);
        if decode(&bytes).map(|(d, _)| d != m).unwrap_or(true) {
            return Err(format!("message {k} did not round-trip"));
        }
        stream.extend_from_slice(&bytes);
        sent.push(m);
    }
    let mut dec = StreamDecoder::new();
    let mut got = Vec::new();
    let mut pos = 0;
    while pos < stream.len() {
        let n = rng.random_range(1..=3000).min(stream.len() - pos);
        dec.push(&stream[pos..pos + n]);
        pos += n;
        while let Some(m) = dec.next_message().map_err(|e| e.to_string())? {
            got.push(m);
        }
    }
    if got != sent {
        return Err("re-chunked stream decoded differently".into());
    }

    let server = PubSubServer::bind("127.0.0.1:0", ServerConfig {
        lossless_high_water: 8,
        ..ServerConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let mut sub = Subscriber::connect(server.local_addr(), SubscriberPolicy {
        topic_mask: TOPIC_PROFILE,
        delivery: Delivery::Lossless,
    })
    .map_err(|e| e.to_string())?;
    server.wait_for_subscribers(1, Duration::from_secs(5));
    let reader = std::thread::spawn(move || {
        let mut frames = Vec::new();
        while let Some(m) = sub.recv().unwrap() {
            if let Some(f) = m.frame_index() {
                frames.push(f);
                std::thread::sleep(Duration::from_micros(200));
            }
        }
        frames
    });
    let profiles = (0..2000u64).map(|i| {
        WireMessage::Profile(ProfileMsg {
            frame_index: i,
            axial_pos: i as f64,
            radii: vec![50.0; 3600],
        })
    });
    let summary = publish_run(server, profiles);
    let frames = reader.join().unwrap();
    check(
        frames == (0..2000).collect::<Vec<_>>() && summary.subscribers[0].dropped == 0,
        format!("10000 frames round-trip and re-chunk exactly; slow lossless subscriber got {}/2000 in order", frames.len()),
    )
}

fn main() {
    let criteria: [Criterion; 11] = [
        (1, "ovality end-to-end", c1_ovality),
        (2, "roundness", c2_roundness),
        (3, "waviness recovery", c3_waviness),
        (4, "geometry oracles", c4_geometry),
        (5, "gradient check", c5_gradient_check),
        (6, "training", c6_training),
        (7, "detection headline", c7_detection),
        (8, "two-phase dominance", c8_dominance),
        (9, "merge and match oracles", c9_merge_and_match),
        (10, "throughput", c10_throughput),
        (11, "protocol", c11_protocol),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    // panics are reported on the criterion's own line
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {n:>2} {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {n:>2} {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
