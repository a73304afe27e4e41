//! `cabletopo` command-line front end.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use cabletopo::assembly::{assemble_profile, scan_to_mesh};
use cabletopo::detect::{detect_pipeline, StreamingDetector};
use cabletopo::eval::sweep;
use cabletopo::geom::{deviation_map, Reference, SurfaceMesh};
use cabletopo::library::{test_set, training_set};
use cabletopo::metrics::{mesh_metrics, profile_metrics, waviness, MetricsError};
use cabletopo::nn::{augment_dihedral, load_model, save_model, train, ClassifierModel, ARCH_A, ARCH_B};
use cabletopo::sensor::run_scan;
use cabletopo::synth::{generate_mesh, CableSpec};
use cabletopo::unwrap::unwrap_to_gray;
use cabletopo_io::config::AppConfig;
use cabletopo_io::files::{
    atomic_write_bytes, read_mesh, render_pgm, write_annotations, write_mesh, write_metrics, write_regions, write_waviness,
};
use cabletopo_io::server::PubSubServer;
use cabletopo_io::wire::{DetectionMsg, MetricsMsg, ProfileMsg, WireMessage};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cabletopo", version, about = "Cable core topography scanning and defect detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; missing sections use defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random choice the command makes.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<AppConfig> {
        match &self.config {
            Some(p) => AppConfig::load(p).with_context(|| format!("loading {}", p.display())),
            None => Ok(AppConfig::default()),
        }
    }
}

#[derive(Args)]
struct Models {
    /// Screening model (phase one).
    #[arg(long)]
    model_a: PathBuf,
    /// Confirming model (phase two).
    #[arg(long)]
    model_b: PathBuf,
}

impl Models {
    fn load(&self) -> Result<(ClassifierModel, ClassifierModel)> {
        let a = load_model(&self.model_a).with_context(|| format!("loading {}", self.model_a.display()))?;
        let b = load_model(&self.model_b).with_context(|| format!("loading {}", self.model_b.display()))?;
        Ok((a, b))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic mesh and its defect annotations.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Annotation CSV; defaults to the mesh path with `.annotations.csv`.
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Simulate the sensor ring over a synthetic cable and assemble a mesh.
    Scan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-profile metrics CSV plus a waviness report.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Waviness report (TOML); skipped when the mesh is too short.
        #[arg(long)]
        waviness: Option<PathBuf>,
    },
    /// Two-phase defect detection; writes a regions CSV.
    Detect {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: Models,
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the screening and confirming classifiers on synthetic tiles.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_a: PathBuf,
        #[arg(long)]
        out_b: PathBuf,
        /// Add the dihedral transforms of every training tile.
        #[arg(long)]
        augment: bool,
    },
    /// Sweep overlap and thresholds on held-out synthetic meshes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: Models,
        #[arg(long)]
        out: PathBuf,
        /// Include the runtime column (not byte-stable).
        #[arg(long)]
        timing: bool,
    },
    /// Scan a cable and publish profiles, metrics and detections.
    Serve {
        #[command(flatten)]
        common: Common,
        /// Publish as fast as possible instead of at the sample rate.
        #[arg(long)]
        fast: bool,
        /// Models for live detection; both or neither.
        #[arg(long, requires = "model_b")]
        model_a: Option<PathBuf>,
        #[arg(long, requires = "model_a")]
        model_b: Option<PathBuf>,
    },
    /// Render a mesh's deviation map as a PGM image.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn cable(cfg: &AppConfig) -> Result<CableSpec<f64>> {
    cfg.cable.clone().context("the config needs a [cable] section")
}

fn sidecar(mesh: &Path) -> PathBuf {
    mesh.with_extension("annotations.csv")
}

fn synth(common: &Common, out: &Path, annotations: Option<&Path>) -> Result<()> {
    let cfg = common.load()?;
    let mut spec = cable(&cfg)?;
    if let Some(seed) = common.seed {
        spec.waviness.seed = seed;
    }
    let (mesh, ann) = generate_mesh(&spec, cfg.assembly.n_points, cfg.scan.axial_pitch())?;
    write_mesh(out, &mesh)?;
    let ann_path = annotations.map(Path::to_path_buf).unwrap_or_else(|| sidecar(out));
    write_annotations(&ann_path, &ann)?;
    println!("{} profiles × {} points, {} annotations", mesh.rows(), mesh.cols(), ann.len());
    Ok(())
}

fn scan(common: &Common, out: &Path) -> Result<()> {
    let mut cfg = common.load()?;
    if let Some(seed) = common.seed {
        cfg.scan.seed = seed;
    }
    let spec = cable(&cfg)?;
    let start = Instant::now();
    let mesh = scan_to_mesh(&spec, &cfg.scan, &cfg.assembly)?;
    let secs = start.elapsed().as_secs_f64();
    write_mesh(out, &mesh)?;
    println!("{} profiles in {secs:.2} s ({:.0} profiles/s)", mesh.rows(), mesh.rows() as f64 / secs);
    Ok(())
}

fn metrics(common: &Common, mesh: &Path, out: &Path, wav: Option<&Path>) -> Result<()> {
    let cfg = common.load()?;
    let mesh = read_mesh(mesh)?;
    let records = mesh_metrics(&mesh)?;
    write_metrics(out, &records)?;
    if let Some(path) = wav {
        let dev = deviation_map(&mesh, Reference::PerMeshMeanRadius);
        match waviness(&dev, cfg.metrics.detrend_window, cfg.metrics.eval_length) {
            Ok(report) => {
                write_waviness(path, &report)?;
                println!("waviness mean {:.5} mm, max {:.5} mm", report.mean_waviness, report.max_waviness);
            }
            Err(e @ MetricsError::TooShort { .. }) => log::warn!("no waviness report: {e}"),
            Err(e) => return Err(e.into()),
        }
    }
    println!("{} metric records", records.len());
    Ok(())
}

fn detect(common: &Common, models: &Models, mesh: &Path, out: &Path) -> Result<()> {
    let cfg = common.load()?;
    cfg.detect.validate()?;
    let (a, b) = models.load()?;
    let mesh = read_mesh(mesh)?;
    let report = detect_pipeline(&mesh, &a, &b, &cfg.detect)?;
    write_regions(out, &report.regions)?;
    println!(
        "{} tiles, {} candidates, {} confirmed, {} regions",
        report.tiles_analyzed,
        report.candidates.len(),
        report.confirmed.len(),
        report.regions.len()
    );
    Ok(())
}

fn train_cmd(common: &Common, out_a: &Path, out_b: &Path, augment: bool) -> Result<()> {
    let cfg = common.load()?;
    let seed = common.seed.unwrap_or(cfg.train.params.seed);
    let lib = &cfg.library;
    if lib.tile != cfg.detect.tile {
        log::warn!("training tile {} differs from detection tile {}", lib.tile, cfg.detect.tile);
    }
    let mut data = training_set(lib, cfg.train.tiles, cfg.detect.taxonomy, seed)?;
    if augment {
        data = augment_dihedral(&data, lib.tile);
    }
    let labels = cfg.detect.taxonomy.labels();
    for (arch, path, name, salt) in [(ARCH_A, out_a, "A", 1), (ARCH_B, out_b, "B", 2)] {
        let mut model = ClassifierModel::with_arch(arch, lib.tile, labels.clone(), seed.wrapping_add(salt))?;
        let params = cabletopo::nn::TrainConfig {
            seed: seed.wrapping_add(salt),
            ..cfg.train.params
        };
        let start = Instant::now();
        let report = train(&mut model, &data, &params)?;
        save_model(&model, path)?;
        println!(
            "model {name}: {} epochs, accuracy {:.4}, {:.1} s",
            report.epochs_run(),
            report.final_accuracy(),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

fn eval_cmd(common: &Common, models: &Models, out: &Path, timing: bool) -> Result<()> {
    let cfg = common.load()?;
    let (a, b) = models.load()?;
    let seed = common.seed.unwrap_or(0);
    let cases = test_set(&cfg.library, cfg.eval.meshes, seed)?;
    let detect = cabletopo::detect::DetectConfig {
        z_range: cfg.library.z_range,
        tile: a.input_size,
        ..cfg.detect.clone()
    };
    let report = sweep(&cases, &a, &b, &cfg.eval.grid, &detect)?;
    atomic_write_bytes(out, report.to_csv(timing)?.as_bytes())?;
    for r in &report.rows {
        println!(
            "{:>9} overlap {:>4} tau1 {:.2} tau2 {:.2}: hit {:.3} fpr {:.5} ({} false / {} tiles)",
            r.variant.name(),
            r.overlap,
            r.tau1,
            r.tau2,
            r.hit_ratio,
            r.fpr,
            r.false_regions,
            r.tiles
        );
    }
    Ok(())
}

fn serve(common: &Common, fast: bool, model_a: Option<&Path>, model_b: Option<&Path>) -> Result<()> {
    let mut cfg = common.load()?;
    if let Some(seed) = common.seed {
        cfg.scan.seed = seed;
    }
    let spec = cable(&cfg)?;
    let models = match (model_a, model_b) {
        (Some(a), Some(b)) => Some((load_model(a)?, load_model(b)?)),
        _ => None,
    };
    let mut server = PubSubServer::bind(cfg.serve.bind.as_str(), cfg.serve.server)?;
    println!("listening on {}", server.local_addr());
    if cfg.serve.wait_for > 0 && !server.wait_for_subscribers(cfg.serve.wait_for, Duration::from_millis(cfg.serve.wait_timeout_ms)) {
        bail!("only {} of {} subscribers connected", server.subscriber_count(), cfg.serve.wait_for);
    }
    let run = run_scan(&spec, &cfg.scan)?;
    let poses = run.poses().to_vec();
    let pitch = run.axial_pitch();
    let period = Duration::from_secs_f64(1.0 / cfg.scan.sample_rate);
    let meta = cabletopo::unwrap::ImageMeta {
        width: cfg.assembly.n_points,
        theta_pitch_mm: std::f64::consts::TAU * spec.nominal_radius / cfg.assembly.n_points as f64,
        axial_pitch_mm: pitch,
        axial_origin: 0.0,
        z_min: cfg.detect.z_range.0,
        z_max: cfg.detect.z_range.1,
    };
    let mut detector = match &models {
        Some((a, b)) => Some(StreamingDetector::new(meta, a, b, cfg.detect.clone())?),
        None => None,
    };
    let start = Instant::now();
    let mut last_frame = 0;
    for (k, frame) in run.enumerate() {
        if !fast {
            let due = start + period * k as u32;
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
        let profile = assemble_profile(&frame, &poses, &cfg.assembly)?;
        let m = profile_metrics(&profile)?;
        server.publish(&WireMessage::Profile(ProfileMsg {
            frame_index: profile.frame_index,
            axial_pos: profile.axial_pos,
            radii: profile.radii.iter().map(|r| *r as f32).collect(),
        }));
        server.publish(&WireMessage::Metrics(MetricsMsg {
            frame_index: m.frame_index,
            d_min: m.d_min as f32,
            d_max: m.d_max as f32,
            ovality: m.ovality as f32,
            roundness: m.roundness as f32,
            waviness: 0.0,
        }));
        if let Some(d) = detector.as_mut() {
            d.push_profile(&profile, spec.nominal_radius)?;
        }
        last_frame = profile.frame_index;
    }
    if let Some(d) = detector {
        for r in d.finish()?.regions {
            server.publish(&WireMessage::Detection(DetectionMsg {
                frame_index: last_frame,
                theta_min: r.theta_range.0 as f32,
                theta_max: r.theta_range.1 as f32,
                y_min: r.y_range.0 as f32,
                y_max: r.y_range.1 as f32,
                confidence: r.confidence as f32,
                members: r.members as u32,
                class: r.class,
            }));
        }
    }
    let summary = server.finish();
    println!("published {} messages in {:.2} s", summary.published, start.elapsed().as_secs_f64());
    for s in &summary.subscribers {
        println!(
            "subscriber {}: {:?}, delivered {}, dropped {}{}",
            s.id,
            s.policy.delivery,
            s.delivered,
            s.dropped,
            if s.vanished { ", vanished" } else { "" }
        );
    }
    Ok(())
}

fn render(common: &Common, mesh: &Path, out: &Path) -> Result<()> {
    let cfg = common.load()?;
    let mesh: SurfaceMesh<f64> = read_mesh(mesh)?;
    let img = unwrap_to_gray(&deviation_map(&mesh, Reference::FixedRadius(mesh.nominal_radius)), cfg.detect.z_range)?;
    render_pgm(&img, out)?;
    println!("{} × {} image", img.width(), img.height);
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth { common, out, annotations } => synth(common, out, annotations.as_deref()),
        Command::Scan { common, out } => scan(common, out),
        Command::Metrics { common, mesh, out, waviness } => metrics(common, mesh, out, waviness.as_deref()),
        Command::Detect { common, models, mesh, out } => detect(common, models, mesh, out),
        Command::Train { common, out_a, out_b, augment } => train_cmd(common, out_a, out_b, *augment),
        Command::Eval { common, models, out, timing } => eval_cmd(common, models, out, *timing),
        Command::Serve {
            common,
            fast,
            model_a,
            model_b,
        } => serve(common, *fast, model_a.as_deref(), model_b.as_deref()),
        Command::Render { common, mesh, out } => render(common, mesh, out),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
