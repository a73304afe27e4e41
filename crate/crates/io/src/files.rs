//! On-disk formats: TMSH meshes, annotation/metrics/region CSVs, binary PGM.
//! Every writer goes through a temporary file in the target directory and
//! an atomic rename.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use cabletopo::detect::DefectRegion;
use cabletopo::geom::{Point2, Profile, SurfaceMesh};
use cabletopo::metrics::{MetricRecord, WavinessReport};
use cabletopo::synth::{Annotation, DefectClass, SizeCategory};
use cabletopo::unwrap::{GrayImage, ImageMeta};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FileError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("toml: {0}")]
    Toml(String),
}

fn format_err(path: &Path, msg: impl Into<String>) -> FileError {
    FileError::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Writes `path` through a sibling temporary file, so readers never see a
/// partial file.
pub fn atomic_write<F>(path: &Path, fill: F) -> Result<(), FileError>
where
    F: FnOnce(&mut dyn Write) -> Result<(), FileError>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| FileError::Io(e.error))?;
    Ok(())
}

pub fn atomic_write_bytes(path: &Path, bytes: &[u8]) -> Result<(), FileError> {
    atomic_write(path, |w| Ok(w.write_all(bytes)?))
}

pub const TMSH_MAGIC: &[u8; 4] = b"TMSH";
pub const TMSH_VERSION: u8 = 1;

/// TMSH layout, little-endian:
///
/// ```text
/// "TMSH" | version u8 | rows u32 | cols u32 | axial_pitch f64 | nominal_radius f64
/// rows × (frame_index u64 | axial_pos f64 | center_x f64 | center_y f64 | cols × radius f32)
/// crc32 u32 over everything before it
/// ```
pub fn mesh_to_bytes(mesh: &SurfaceMesh<f64>) -> Vec<u8> {
    let (rows, cols) = (mesh.rows(), mesh.cols());
    let mut b = Vec::with_capacity(29 + rows * (32 + 4 * cols) + 4);
    b.extend_from_slice(TMSH_MAGIC);
    b.push(TMSH_VERSION);
    b.extend_from_slice(&(rows as u32).to_le_bytes());
    b.extend_from_slice(&(cols as u32).to_le_bytes());
    b.extend_from_slice(&mesh.axial_pitch.to_le_bytes());
    b.extend_from_slice(&mesh.nominal_radius.to_le_bytes());
    for p in &mesh.profiles {
        b.extend_from_slice(&p.frame_index.to_le_bytes());
        b.extend_from_slice(&p.axial_pos.to_le_bytes());
        b.extend_from_slice(&p.center.x.to_le_bytes());
        b.extend_from_slice(&p.center.y.to_le_bytes());
        for r in &p.radii {
            b.extend_from_slice(&(*r as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&b);
    b.extend_from_slice(&crc.to_le_bytes());
    b
}

pub fn mesh_from_bytes(bytes: &[u8], path: &Path) -> Result<SurfaceMesh<f64>, FileError> {
    let err = |m: &str| format_err(path, m);
    if bytes.len() < 33 || &bytes[..4] != TMSH_MAGIC {
        return Err(err("not a TMSH mesh"));
    }
    if bytes[4] != TMSH_VERSION {
        return Err(err(&format!("unsupported TMSH version {}", bytes[4])));
    }
    let body = &bytes[..bytes.len() - 4];
    let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(body) != crc {
        return Err(err("checksum mismatch"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(body[o..o + 4].try_into().unwrap()) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(body[o..o + 8].try_into().unwrap());
    let (rows, cols) = (u32_at(5), u32_at(9));
    let row_len = 32 + 4 * cols;
    if body.len() != 29 + rows * row_len {
        return Err(err("size disagrees with header"));
    }
    let (pitch, radius) = (f64_at(13), f64_at(21));
    let mut profiles = Vec::with_capacity(rows);
    for r in 0..rows {
        let o = 29 + r * row_len;
        let frame_index = u64::from_le_bytes(body[o..o + 8].try_into().unwrap());
        let radii = (0..cols)
            .map(|c| {
                let k = o + 32 + 4 * c;
                f32::from_le_bytes(body[k..k + 4].try_into().unwrap()) as f64
            })
            .collect();
        let p = Profile::new(frame_index, f64_at(o + 8), Point2::new(f64_at(o + 16), f64_at(o + 24)), radii)
            .map_err(|e| err(&e.to_string()))?;
        profiles.push(p);
    }
    SurfaceMesh::new(profiles, pitch, radius).map_err(|e| err(&e.to_string()))
}

pub fn write_mesh(path: &Path, mesh: &SurfaceMesh<f64>) -> Result<(), FileError> {
    atomic_write_bytes(path, &mesh_to_bytes(mesh))
}

pub fn read_mesh(path: &Path) -> Result<SurfaceMesh<f64>, FileError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    mesh_from_bytes(&bytes, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AnnotationRow {
    class: String,
    theta_rad: f64,
    y_mm: f64,
    width_mm: f64,
    length_mm: f64,
    height_mm: f64,
    size_category: String,
}

fn csv_bytes<S: Serialize>(rows: impl IntoIterator<Item = S>) -> Result<Vec<u8>, FileError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| FileError::Io(e.into_error()))
}

/// Annotation CSV: `class,theta_rad,y_mm,width_mm,length_mm,height_mm,size_category`.
pub fn write_annotations(path: &Path, annotations: &[Annotation<f64>]) -> Result<(), FileError> {
    let rows = annotations.iter().map(|a| AnnotationRow {
        class: a.class.name().to_string(),
        theta_rad: a.theta,
        y_mm: a.y,
        width_mm: a.width,
        length_mm: a.length,
        height_mm: a.height,
        size_category: a.size_category.name().to_string(),
    });
    let mut bytes = csv_bytes(rows)?;
    if annotations.is_empty() {
        bytes = b"class,theta_rad,y_mm,width_mm,length_mm,height_mm,size_category\n".to_vec();
    }
    atomic_write_bytes(path, &bytes)
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation<f64>>, FileError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<AnnotationRow>()
        .map(|row| {
            let row = row?;
            let class = DefectClass::from_name(&row.class).ok_or_else(|| format_err(path, format!("unknown class {}", row.class)))?;
            let size = SizeCategory::from_name(&row.size_category)
                .ok_or_else(|| format_err(path, format!("unknown size category {}", row.size_category)))?;
            let mut a = Annotation::new(class, row.theta_rad, row.y_mm, row.width_mm, row.length_mm, row.height_mm);
            a.size_category = size;
            Ok(a)
        })
        .collect()
}

/// Metrics CSV: `frame_index,axial_pos,d_min,d_max,ovality,roundness`.
pub fn write_metrics(path: &Path, records: &[MetricRecord<f64>]) -> Result<(), FileError> {
    atomic_write(path, |w| {
        writeln!(w, "frame_index,axial_pos,d_min,d_max,ovality,roundness")?;
        for r in records {
            writeln!(
                w,
                "{},{:.6},{:.6},{:.6},{:.6},{:.8}",
                r.frame_index, r.axial_pos, r.d_min, r.d_max, r.ovality, r.roundness
            )?;
        }
        Ok(())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub frame_index: u64,
    pub axial_pos: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub ovality: f64,
    pub roundness: f64,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, FileError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Waviness summary followed by per-angle RMS, as TOML.
pub fn write_waviness(path: &Path, report: &WavinessReport<f64>) -> Result<(), FileError> {
    let text = toml::to_string(report).map_err(|e| FileError::Toml(e.to_string()))?;
    atomic_write_bytes(path, text.as_bytes())
}

/// Regions CSV: `region,theta_min_mm,theta_max_mm,y_min_mm,y_max_mm,class,confidence,members`.
pub fn write_regions(path: &Path, regions: &[DefectRegion]) -> Result<(), FileError> {
    atomic_write(path, |w| {
        writeln!(w, "region,theta_min_mm,theta_max_mm,y_min_mm,y_max_mm,class,confidence,members")?;
        for (i, r) in regions.iter().enumerate() {
            writeln!(
                w,
                "{i},{:.4},{:.4},{:.4},{:.4},{},{:.6},{}",
                r.theta_range.0, r.theta_range.1, r.y_range.0, r.y_range.1, r.class, r.confidence, r.members
            )?;
        }
        Ok(())
    })
}

/// Binary PGM bytes: `P5\n<W> <H>\n255\n` then row-major pixels.
pub fn pgm_bytes(img: &GrayImage) -> Result<Vec<u8>, FileError> {
    if img.width() == 0 || img.height == 0 {
        return Err(format_err(Path::new("<pgm>"), "empty image"));
    }
    let mut b = format!("P5\n{} {}\n255\n", img.width(), img.height).into_bytes();
    b.extend_from_slice(&img.pixels);
    Ok(b)
}

pub fn render_pgm(img: &GrayImage, path: &Path) -> Result<(), FileError> {
    let bytes = pgm_bytes(img).map_err(|_| format_err(path, "empty image"))?;
    atomic_write_bytes(path, &bytes)
}

/// Reads a binary 8-bit PGM; calibration is taken from `meta` with its
/// width replaced by the file's.
pub fn read_pgm(path: &Path, meta: ImageMeta) -> Result<GrayImage, FileError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let err = |m: &str| format_err(path, m);
    // header tokens separated by whitespace, comments not supported
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| err("bad header"))?.to_string());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(err("only 8-bit binary PGM is supported"));
    }
    let w: usize = fields[1].parse().map_err(|_| err("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| err("bad height"))?;
    let pixels = bytes.get(pos..).filter(|p| p.len() == w * h).ok_or_else(|| err("pixel count disagrees with header"))?;
    GrayImage::new(ImageMeta { width: w, ..meta }, h, pixels.to_vec()).map_err(|e| err(&e.to_string()))
}
