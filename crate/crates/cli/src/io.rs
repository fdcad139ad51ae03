//! On-disk formats: PLY clouds, `.rimg` range images, trajectory text,
//! field checkpoints and the CSV logs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use geonlf_core::field::FieldParams;
use geonlf_core::geometry::{Mat4, Trajectory, Vec3};
use geonlf_core::metrics::MetricsRow;
use geonlf_core::trainer::LossRow;
use geonlf_core::{PointCloud, RangeImage};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io { path: path.to_path_buf(), source }
    }

    fn format(path: &Path, msg: impl Into<String>) -> Self {
        IoError::Format { path: path.to_path_buf(), msg: msg.into() }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    File::create(path).map(BufWriter::new).map_err(|e| IoError::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>, IoError> {
    File::open(path).map(BufReader::new).map_err(|e| IoError::io(path, e))
}

/// Writes `s` to `path`, mapping errors with path context.
pub fn write_text(path: &Path, s: &str) -> Result<(), IoError> {
    std::fs::write(path, s).map_err(|e| IoError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))
}

// ---------------------------------------------------------------- PLY

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    Binary,
}

pub fn write_ply(path: &Path, cloud: &PointCloud, format: PlyFormat) -> Result<(), IoError> {
    let mut w = create(path)?;
    ply_to_writer(&mut w, cloud, format).and_then(|_| w.flush()).map_err(|e| IoError::io(path, e))
}

fn ply_to_writer<W: Write>(w: &mut W, cloud: &PointCloud, format: PlyFormat) -> std::io::Result<()> {
    let (fmt, ty) = match format {
        PlyFormat::Ascii => ("ascii", "float"),
        PlyFormat::Binary => ("binary_little_endian", "double"),
    };
    writeln!(w, "ply\nformat {fmt} 1.0\nelement vertex {}", cloud.len())?;
    let mut props = vec!["x", "y", "z"];
    if cloud.intensity.is_some() {
        props.push("intensity");
    }
    if cloud.normals.is_some() {
        props.extend(["nx", "ny", "nz"]);
    }
    for p in &props {
        writeln!(w, "property {ty} {p}")?;
    }
    writeln!(w, "end_header")?;
    for i in 0..cloud.len() {
        let mut row = cloud.points[i].as_slice().to_vec();
        if let Some(v) = &cloud.intensity {
            row.push(v[i]);
        }
        if let Some(n) = &cloud.normals {
            row.extend_from_slice(n[i].as_slice());
        }
        match format {
            PlyFormat::Ascii => {
                let s: Vec<String> = row.iter().map(|v| format!("{v:.8e}")).collect();
                writeln!(w, "{}", s.join(" "))?;
            }
            PlyFormat::Binary => {
                for v in row {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Scalar {
    F32,
    F64,
}

pub fn read_ply(path: &Path) -> Result<PointCloud, IoError> {
    let mut r = open(path)?;
    let bad = |m: &str| IoError::format(path, m);
    let mut line = String::new();
    let next = |r: &mut BufReader<File>, line: &mut String| -> Result<String, IoError> {
        line.clear();
        if r.read_line(line).map_err(|e| IoError::io(path, e))? == 0 {
            return Err(IoError::format(path, "truncated header"));
        }
        Ok(line.trim().to_string())
    };
    if next(&mut r, &mut line)? != "ply" {
        return Err(bad("missing ply magic"));
    }
    let mut binary = None;
    let mut count = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    loop {
        let l = next(&mut r, &mut line)?;
        let t: Vec<&str> = l.split_whitespace().collect();
        match t.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => binary = Some(false),
            ["format", "binary_little_endian", _] => binary = Some(true),
            ["format", other, _] => return Err(bad(&format!("unsupported format {other}"))),
            ["element", "vertex", n] => count = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?),
            ["element", ..] => return Err(bad("only a vertex element is supported")),
            ["property", ty, name] => {
                let s = match *ty {
                    "float" | "float32" => Scalar::F32,
                    "double" | "float64" => Scalar::F64,
                    _ => return Err(bad(&format!("unsupported property type {ty}"))),
                };
                props.push((name.to_string(), s));
            }
            ["comment", ..] | [] => {}
            _ => return Err(bad(&format!("unexpected header line '{l}'"))),
        }
    }
    let binary = binary.ok_or_else(|| bad("missing format line"))?;
    let n = count.ok_or_else(|| bad("missing vertex element"))?;
    let col = |name: &str| props.iter().position(|p| p.0 == name);
    let (ix, iy, iz) = match (col("x"), col("y"), col("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(bad("x, y, z properties required")),
    };
    let ii = col("intensity");
    let inormal = match (col("nx"), col("ny"), col("nz")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    if binary {
        let mut buf = [0u8; 8];
        for _ in 0..n {
            let mut row = Vec::with_capacity(props.len());
            for (_, s) in &props {
                let v = match s {
                    Scalar::F32 => {
                        r.read_exact(&mut buf[..4]).map_err(|_| bad("truncated binary body"))?;
                        f32::from_le_bytes(buf[..4].try_into().expect("4 bytes")) as f64
                    }
                    Scalar::F64 => {
                        r.read_exact(&mut buf).map_err(|_| bad("truncated binary body"))?;
                        f64::from_le_bytes(buf)
                    }
                };
                row.push(v);
            }
            rows.push(row);
        }
    } else {
        for k in 0..n {
            let l = next(&mut r, &mut line).map_err(|_| bad(&format!("expected {n} vertices, got {k}")))?;
            let row: Vec<f64> = l
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| bad(&format!("bad number in vertex {k}")))?;
            if row.len() != props.len() {
                return Err(bad(&format!("vertex {k} has {} values, expected {}", row.len(), props.len())));
            }
            rows.push(row);
        }
    }
    Ok(PointCloud {
        points: rows.iter().map(|r| Vec3::new(r[ix], r[iy], r[iz])).collect(),
        intensity: ii.map(|i| rows.iter().map(|r| r[i]).collect()),
        normals: inormal.map(|(a, b, c)| rows.iter().map(|r| Vec3::new(r[a], r[b], r[c])).collect()),
    })
}

// ---------------------------------------------------------------- RIMG

const RIMG_MAGIC: &[u8; 4] = b"RIMG";
const RIMG_VERSION: u32 = 1;
/// Field flags: depth, intensity and drop planes are all present.
const RIMG_FLAGS: u32 = 0b111;

pub fn rimg_bytes(img: &RangeImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 12 * img.len());
    out.extend_from_slice(RIMG_MAGIC);
    for v in [RIMG_VERSION, img.height as u32, img.width as u32, RIMG_FLAGS] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (i, d) in img.depth.iter().enumerate() {
        let d = if img.drop[i] { -1.0f32 } else { *d as f32 };
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in &img.intensity {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for &d in &img.drop {
        out.extend_from_slice(&(if d { 1.0f32 } else { 0.0f32 }).to_le_bytes());
    }
    out
}

pub fn rimg_from_bytes(bytes: &[u8], path: &Path) -> Result<RangeImage, IoError> {
    let bad = |m: &str| IoError::format(path, m);
    if bytes.len() < 20 || &bytes[..4] != RIMG_MAGIC {
        return Err(bad("missing RIMG magic"));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes"));
    if word(0) != RIMG_VERSION {
        return Err(bad(&format!("unsupported version {}", word(0))));
    }
    let (h, w, flags) = (word(1) as usize, word(2) as usize, word(3));
    if flags != RIMG_FLAGS {
        return Err(bad(&format!("unsupported field flags {flags:#b}")));
    }
    let n = h * w;
    if bytes.len() != 20 + 12 * n {
        return Err(bad(&format!("expected {} bytes for {h}x{w}, got {}", 20 + 12 * n, bytes.len())));
    }
    let plane = |k: usize| -> Vec<f32> {
        bytes[20 + 4 * n * k..20 + 4 * n * (k + 1)]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect()
    };
    let (depth, intensity, drop) = (plane(0), plane(1), plane(2));
    let mut img = RangeImage::empty(h, w);
    for i in 0..n {
        if drop[i] == 0.0 {
            img.drop[i] = false;
            img.depth[i] = depth[i] as f64;
            img.intensity[i] = intensity[i] as f64;
        } else {
            img.set_dropped(i);
        }
    }
    Ok(img)
}

/// Depth and intensity are stored as f32.
pub fn write_rimg(path: &Path, img: &RangeImage) -> Result<(), IoError> {
    std::fs::write(path, rimg_bytes(img)).map_err(|e| IoError::io(path, e))
}

pub fn read_rimg(path: &Path) -> Result<RangeImage, IoError> {
    let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
    rimg_from_bytes(&bytes, path)
}

// ---------------------------------------------------------------- trajectories

/// One line per frame: `id r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2`.
pub fn trajectory_to_string(traj: &Trajectory) -> String {
    let mut s = String::from("# id r00 r01 r02 tx r10 r11 r12 ty r20 r21 r22 tz\n");
    for (id, m) in traj.frames() {
        s.push_str(&id.to_string());
        for r in 0..3 {
            for c in 0..4 {
                s.push_str(&format!(" {:e}", m[(r, c)]));
            }
        }
        s.push('\n');
    }
    s
}

pub fn trajectory_from_str(text: &str, path: &Path) -> Result<Trajectory, IoError> {
    let mut frames = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: &str| IoError::format(path, format!("line {}: {m}", ln + 1));
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 13 {
            return Err(bad(&format!("expected 13 fields, got {}", tok.len())));
        }
        let id: u32 = tok[0].parse().map_err(|_| bad("bad frame id"))?;
        let mut m = Mat4::identity();
        for k in 0..12 {
            m[(k / 4, k % 4)] = tok[k + 1].parse().map_err(|_| bad("bad number"))?;
        }
        frames.push((id, m));
    }
    Trajectory::new(frames).map_err(|e| IoError::format(path, e.to_string()))
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<(), IoError> {
    write_text(path, &trajectory_to_string(traj))
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory, IoError> {
    trajectory_from_str(&read_text(path)?, path)
}

// ---------------------------------------------------------------- checkpoint

const GNLF_MAGIC: &[u8; 4] = b"GNLF";
const GNLF_VERSION: u32 = 1;

/// `GNLF`, version, config text length and bytes, parameter count, then
/// little-endian f32 parameters.
pub fn write_checkpoint(path: &Path, field: &FieldParams, config_text: &str) -> Result<(), IoError> {
    let mut out = Vec::with_capacity(16 + config_text.len() + 4 * field.len());
    out.extend_from_slice(GNLF_MAGIC);
    out.extend_from_slice(&GNLF_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&(field.len() as u64).to_le_bytes());
    for v in &field.values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| IoError::io(path, e))
}

/// Returns the stored config text and parameter values.
pub fn read_checkpoint(path: &Path) -> Result<(String, Vec<f64>), IoError> {
    let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
    let bad = |m: &str| IoError::format(path, m);
    if bytes.len() < 12 || &bytes[..4] != GNLF_MAGIC {
        return Err(bad("missing GNLF magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    if u32_at(4) != GNLF_VERSION {
        return Err(bad("unsupported checkpoint version"));
    }
    let clen = u32_at(8) as usize;
    let body = 12 + clen;
    if bytes.len() < body + 8 {
        return Err(bad("truncated checkpoint"));
    }
    let text = String::from_utf8(bytes[12..body].to_vec()).map_err(|_| bad("config text is not UTF-8"))?;
    let n = u64::from_le_bytes(bytes[body..body + 8].try_into().expect("8 bytes")) as usize;
    let data = &bytes[body + 8..];
    if data.len() != 4 * n {
        return Err(bad(&format!("expected {n} parameters")));
    }
    let values = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    Ok((text, values))
}

// ---------------------------------------------------------------- CSV

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("iter,phase,total,depth,intensity,raydrop,cd,normal,alpha,t_temp\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.iter,
            r.phase.name(),
            r.total,
            r.depth,
            r.intensity,
            r.raydrop,
            r.cd,
            r.normal,
            r.alpha,
            r.temperature
        ));
    }
    s
}

pub const METRICS_HEADER: &str = "seq,ate,rpe_t,rpe_r,cd,fscore,rmse_d,medae_d,psnr_d,rmse_i,medae_i,psnr_i";

/// One row per sequence plus a trailing `mean` row.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let line = |seq: &str, vals: &[f64]| {
        let v: Vec<String> = vals.iter().map(|x| x.to_string()).collect();
        format!("{seq},{}\n", v.join(","))
    };
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&line(&r.seq, &r.values()));
    }
    if !rows.is_empty() {
        s.push_str(&line("mean", &MetricsRow::mean(rows).values()));
    }
    s
}
