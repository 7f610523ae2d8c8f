//! File formats: PLY point clouds, trajectory and convergence CSV, and
//! JSON-lines frame streams.
//!
//! PLY files are written as binary little-endian `float` vertices; the
//! reader also accepts ASCII and `double` properties. Frame streams hold one
//! JSON object per line:
//!
//! ```text
//! {"index":0,"timestamp":0.0,"pose":{"t":[..],"q":[x,y,z,w]},"blur_level":1.2,
//!  "features":[[id,u,v],..],"board_corners":null}
//! ```

use std::fmt::Write as _;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blur_sim::{Feature, Frame};
use crate::geometry::{Pixel, Point3, PoseRecord, RigidTransform};
use crate::reconstruction::ConvergenceRecord;
use crate::slam_graph::Keyframe;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed PLY: {0}")]
    Ply(String),
    #[error("line {line}: field `{field}`: {reason}")]
    Frame {
        line: usize,
        field: String,
        reason: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ArtifactError + '_ {
    move |source| ArtifactError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Formats `v` with 9 significant digits in its shortest round-trip form.
pub fn format_sig9(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    let rounded: f64 = format!("{v:.8e}").parse().expect("formatted float parses");
    rounded.to_string()
}

/// `timestamp,tx,ty,tz,qx,qy,qz,qw` per keyframe.
pub fn trajectory_csv(keyframes: &[Keyframe]) -> String {
    let mut out = String::from("timestamp,tx,ty,tz,qx,qy,qz,qw\n");
    for kf in keyframes {
        let t = kf.pose.translation;
        let q = kf.pose.rotation.coords;
        let row = [kf.timestamp, t.x, t.y, t.z, q.x, q.y, q.z, q.w].map(format_sig9);
        writeln!(out, "{}", row.join(",")).expect("string write");
    }
    out
}

/// One row per optimizer iteration, tagged with a stage label.
pub fn convergence_csv(records: &[(&str, &ConvergenceRecord)]) -> String {
    let mut out = String::from("stage,iteration,e_surf,e_rend,e_reg,total,damping,accepted\n");
    for (stage, rec) in records {
        for r in &rec.iterations {
            let vals = [r.e_surf, r.e_rend, r.e_reg, r.total, r.damping].map(format_sig9);
            writeln!(out, "{stage},{},{},{}", r.iteration, vals.join(","), r.accepted).expect("string write");
        }
    }
    out
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ArtifactError> {
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn ply_bytes(points: &[Point3]) -> Vec<u8> {
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        points.len()
    );
    let mut out = header.into_bytes();
    out.reserve(points.len() * 12);
    for p in points {
        for v in [p.x, p.y, p.z] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_ply(path: &Path, points: &[Point3]) -> Result<(), ArtifactError> {
    write_file(path, &ply_bytes(points))
}

#[derive(Clone, Copy, PartialEq)]
enum PlyFormat {
    Ascii,
    BinaryLe,
}

#[derive(Clone, Copy)]
enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

/// Parses the vertex positions of a PLY file. Only the `vertex` element is
/// read; it must come first and use scalar properties.
pub fn parse_ply(bytes: &[u8]) -> Result<Vec<Point3>, ArtifactError> {
    let bad = |m: &str| ArtifactError::Ply(m.to_string());
    let end = b"end_header\n";
    let header_end = bytes
        .windows(end.len())
        .position(|w| w == end)
        .ok_or_else(|| bad("missing end_header"))?
        + end.len();
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| bad("header is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(bad("missing magic"));
    }
    let mut format = None;
    let mut count = None;
    let mut props: Vec<(String, PlyType)> = Vec::new();
    let mut in_vertex = false;
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLe),
            ["format", other, _] => return Err(ArtifactError::Ply(format!("unsupported format {other}"))),
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(bad("duplicate vertex element"));
                }
                count = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?);
                in_vertex = true;
            }
            ["element", ..] => {
                if count.is_none() {
                    return Err(bad("vertex element must come first"));
                }
                in_vertex = false;
            }
            ["property", "list", ..] if in_vertex => return Err(bad("list property on vertex")),
            ["property", ty, name] if in_vertex => {
                let t = PlyType::parse(ty).ok_or_else(|| ArtifactError::Ply(format!("unknown type {ty}")))?;
                props.push((name.to_string(), t));
            }
            _ => {}
        }
    }
    let format = format.ok_or_else(|| bad("missing format"))?;
    let count = count.ok_or_else(|| bad("missing vertex element"))?;
    let idx = |n: &str| props.iter().position(|(p, _)| p == n).ok_or_else(|| ArtifactError::Ply(format!("missing property {n}")));
    let (ix, iy, iz) = (idx("x")?, idx("y")?, idx("z")?);
    let body = &bytes[header_end..];
    let mut out = Vec::with_capacity(count);
    match format {
        PlyFormat::BinaryLe => {
            let stride: usize = props.iter().map(|(_, t)| t.size()).sum();
            let offsets: Vec<usize> = props
                .iter()
                .scan(0, |o, (_, t)| {
                    let cur = *o;
                    *o += t.size();
                    Some(cur)
                })
                .collect();
            if body.len() < stride * count {
                return Err(bad("truncated binary body"));
            }
            for v in 0..count {
                let row = &body[v * stride..(v + 1) * stride];
                let get = |i: usize| props[i].1.read_le(&row[offsets[i]..]);
                out.push(Point3::new(get(ix), get(iy), get(iz)));
            }
        }
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(body).map_err(|_| bad("ASCII body is not UTF-8"))?;
            let mut rows = text.lines().filter(|l| !l.trim().is_empty());
            for v in 0..count {
                let row = rows.next().ok_or_else(|| ArtifactError::Ply(format!("missing vertex {v}")))?;
                let vals: Vec<f64> = row
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| ArtifactError::Ply(format!("bad number in vertex {v}")))?;
                if vals.len() < props.len() {
                    return Err(ArtifactError::Ply(format!("short vertex row {v}")));
                }
                out.push(Point3::new(vals[ix], vals[iy], vals[iz]));
            }
        }
    }
    Ok(out)
}

pub fn read_ply(path: &Path) -> Result<Vec<Point3>, ArtifactError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    parse_ply(&bytes)
}

/// Serialized form of a [`Frame`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub index: usize,
    pub timestamp: f64,
    pub pose: PoseRecord,
    pub blur_level: f64,
    /// `(landmark id, u, v)` triples.
    pub features: Vec<(u64, f64, f64)>,
    pub board_corners: Option<Vec<[f64; 2]>>,
}

impl From<&Frame> for FrameRecord {
    fn from(f: &Frame) -> Self {
        Self {
            index: f.index,
            timestamp: f.timestamp,
            pose: PoseRecord::from(&f.pose),
            blur_level: f.blur_level,
            features: f.features.iter().map(|ft| (ft.landmark_id, ft.pixel.x, ft.pixel.y)).collect(),
            board_corners: f.board_corners.clone(),
        }
    }
}

pub fn frames_to_jsonl(frames: &[Frame]) -> String {
    let mut out = String::new();
    for f in frames {
        out.push_str(&serde_json::to_string(&FrameRecord::from(f)).expect("frame serializes"));
        out.push('\n');
    }
    out
}

pub fn write_frames(path: &Path, frames: &[Frame]) -> Result<(), ArtifactError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    file.write_all(frames_to_jsonl(frames).as_bytes()).map_err(io_err(path))?;
    file.flush().map_err(io_err(path))
}

fn frame_error(line: usize, field: &str, reason: impl Into<String>) -> ArtifactError {
    ArtifactError::Frame {
        line,
        field: field.to_string(),
        reason: reason.into(),
    }
}

/// Guesses the offending field from a serde message such as
/// ``unknown field `foo` `` or ``missing field `pose` ``.
fn field_from_message(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("<record>").to_string()
}

fn frame_from_record(line: usize, r: FrameRecord, prev: Option<f64>) -> Result<Frame, ArtifactError> {
    if !r.timestamp.is_finite() {
        return Err(frame_error(line, "timestamp", "non-finite"));
    }
    if let Some(p) = prev {
        if r.timestamp <= p {
            return Err(frame_error(line, "timestamp", format!("{} does not follow {}", r.timestamp, p)));
        }
    }
    let pose = RigidTransform::try_from(&r.pose).map_err(|e| frame_error(line, "pose", e.to_string()))?;
    if !(r.blur_level >= 0.0 && r.blur_level.is_finite()) {
        return Err(frame_error(line, "blur_level", "must be finite and non-negative"));
    }
    let mut features = Vec::with_capacity(r.features.len());
    for (id, u, v) in r.features {
        if !(u.is_finite() && v.is_finite()) {
            return Err(frame_error(line, "features", format!("non-finite pixel for landmark {id}")));
        }
        features.push(Feature {
            landmark_id: id,
            pixel: Pixel::new(u, v),
        });
    }
    if let Some(c) = &r.board_corners {
        if c.iter().flatten().any(|v| !v.is_finite()) {
            return Err(frame_error(line, "board_corners", "non-finite corner"));
        }
    }
    Ok(Frame {
        index: r.index,
        timestamp: r.timestamp,
        pose,
        blur_level: r.blur_level,
        features,
        board_corners: r.board_corners,
    })
}

/// Parses and validates a JSON-lines frame stream. Blank lines are skipped;
/// errors cite the 1-based line number.
pub fn parse_frames(reader: impl BufRead) -> Result<Vec<Frame>, ArtifactError> {
    let mut frames: Vec<Frame> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| frame_error(n, "<line>", e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(&line).map_err(|e| {
            let msg = e.to_string();
            frame_error(n, &field_from_message(&msg), msg)
        })?;
        let frame = frame_from_record(n, rec, frames.last().map(|f| f.timestamp))?;
        frames.push(frame);
    }
    Ok(frames)
}

pub fn read_frames(path: &Path) -> Result<Vec<Frame>, ArtifactError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    parse_frames(std::io::BufReader::new(file))
}
