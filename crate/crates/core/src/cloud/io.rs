use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Point, PointCloud};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloudFormat {
    Xyz,
    PlyAscii,
    PlyBinary,
}

impl CloudFormat {
    /// Guesses the format from the file extension. `.ply` defaults to binary on write;
    /// on read the header decides.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "xyz" | "txt" => Some(CloudFormat::Xyz),
            "ply" => Some(CloudFormat::PlyBinary),
            _ => None,
        }
    }
}

impl FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xyz" => Ok(CloudFormat::Xyz),
            "ply" | "ply-binary" | "ply_binary" => Ok(CloudFormat::PlyBinary),
            "ply-ascii" | "ply_ascii" => Ok(CloudFormat::PlyAscii),
            other => Err(Error::InvalidSpec(format!("unknown cloud format '{other}'"))),
        }
    }
}

/// Reads a cloud. PLY files may be ASCII or binary little-endian regardless
/// of which PLY variant `format` names.
pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let points = match format {
        CloudFormat::Xyz => parse_xyz(path, &bytes)?,
        CloudFormat::PlyAscii | CloudFormat::PlyBinary => parse_ply(path, &bytes)?,
    };
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(PointCloud::from_points_unchecked(points))
}

pub fn save_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = match format {
        CloudFormat::Xyz => write_xyz(&mut w, cloud),
        CloudFormat::PlyAscii => write_ply_ascii(&mut w, cloud),
        CloudFormat::PlyBinary => write_ply_binary(&mut w, cloud),
    };
    res.and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn write_xyz(w: &mut impl Write, cloud: &PointCloud) -> std::io::Result<()> {
    for p in cloud {
        writeln!(w, "{:.8e} {:.8e} {:.8e}", p[0], p[1], p[2])?;
    }
    Ok(())
}

fn write_ply_ascii(w: &mut impl Write, cloud: &PointCloud) -> std::io::Result<()> {
    write!(
        w,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        cloud.len()
    )?;
    write_xyz(w, cloud)
}

// Binary coordinates are written as doubles so a save/load round trip is exact.
fn write_ply_binary(w: &mut impl Write, cloud: &PointCloud) -> std::io::Result<()> {
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        cloud.len()
    )?;
    for p in cloud {
        for c in p {
            w.write_all(&c.to_le_bytes())?;
        }
    }
    Ok(())
}

fn parse_xyz(path: &Path, bytes: &[u8]) -> Result<Vec<Point>> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::malformed(path, "not UTF-8 text"))?;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::malformed(
                path,
                format!("line {}: expected 3 fields, got {}", lineno + 1, fields.len()),
            ));
        }
        let mut p = [0.0; 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            *slot = parse_coord(f)
                .ok_or_else(|| Error::malformed(path, format!("line {}: bad coordinate '{f}'", lineno + 1)))?;
        }
        points.push(p);
    }
    Ok(points)
}

fn parse_coord(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar(String, Scalar),
    List(Scalar, Scalar),
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

#[derive(Debug, PartialEq)]
enum Encoding {
    Ascii,
    BinaryLe,
}

fn parse_ply(path: &Path, bytes: &[u8]) -> Result<Vec<Point>> {
    let bad = |reason: &str| Error::malformed(path, reason.to_string());
    let marker = b"end_header";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| bad("missing end_header"))?;
    let mut body_start = end + marker.len();
    if bytes.get(body_start) == Some(&b'\r') {
        body_start += 1;
    }
    if bytes.get(body_start) != Some(&b'\n') {
        return Err(bad("end_header not followed by newline"));
    }
    body_start += 1;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not text"))?;

    let mut lines = header.lines().map(str::trim);
    if lines.next() != Some("ply") {
        return Err(bad("missing 'ply' magic"));
    }
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", "1.0"] => encoding = Some(Encoding::Ascii),
            ["format", "binary_little_endian", "1.0"] => encoding = Some(Encoding::BinaryLe),
            ["format", ..] => return Err(bad("unsupported PLY format")),
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| bad("bad element count"))?,
                props: Vec::new(),
            }),
            ["property", "list", ct, it, _name] => {
                let el = elements.last_mut().ok_or_else(|| bad("property before element"))?;
                let ct = Scalar::parse(ct).ok_or_else(|| bad("bad list count type"))?;
                let it = Scalar::parse(it).ok_or_else(|| bad("bad list item type"))?;
                el.props.push(Property::List(ct, it));
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| bad("property before element"))?;
                let ty = Scalar::parse(ty).ok_or_else(|| bad("bad property type"))?;
                el.props.push(Property::Scalar(name.to_string(), ty));
            }
            _ => return Err(bad(&format!("unrecognized header line '{line}'"))),
        }
    }
    let encoding = encoding.ok_or_else(|| bad("missing format line"))?;
    let vertex_pos = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| bad("no vertex element"))?;
    let axis_slots: Vec<Option<usize>> = elements[vertex_pos]
        .props
        .iter()
        .map(|p| match p {
            Property::Scalar(name, _) => ["x", "y", "z"].iter().position(|a| a == name),
            Property::List(..) => None,
        })
        .collect();
    for a in 0..3 {
        if !axis_slots.contains(&Some(a)) {
            return Err(bad("vertex element lacks x/y/z"));
        }
    }

    let body = &bytes[body_start..];
    let mut reader: Box<dyn ValueReader> = match encoding {
        Encoding::Ascii => Box::new(AsciiReader {
            tokens: std::str::from_utf8(body)
                .map_err(|_| bad("ASCII body is not text"))?
                .split_whitespace(),
        }),
        Encoding::BinaryLe => Box::new(BinaryReader { data: body, pos: 0 }),
    };

    let mut points = Vec::new();
    for (ei, el) in elements.iter().enumerate().take(vertex_pos + 1) {
        let is_vertex = ei == vertex_pos;
        if is_vertex {
            points.reserve(el.count);
        }
        for _ in 0..el.count {
            let mut p = [0.0; 3];
            for (pi, prop) in el.props.iter().enumerate() {
                match prop {
                    Property::Scalar(_, ty) => {
                        let v = reader.read(*ty).ok_or_else(|| bad("truncated body"))?;
                        if let (true, Some(a)) = (is_vertex, axis_slots[pi]) {
                            if !v.is_finite() {
                                return Err(bad("non-finite coordinate"));
                            }
                            p[a] = v;
                        }
                    }
                    Property::List(ct, it) => {
                        let n = reader.read(*ct).ok_or_else(|| bad("truncated body"))?;
                        if !(n >= 0.0) {
                            return Err(bad("negative list length"));
                        }
                        for _ in 0..n as usize {
                            reader.read(*it).ok_or_else(|| bad("truncated body"))?;
                        }
                    }
                }
            }
            if is_vertex {
                points.push(p);
            }
        }
    }
    Ok(points)
}

trait ValueReader {
    fn read(&mut self, ty: Scalar) -> Option<f64>;
}

struct AsciiReader<'a> {
    tokens: std::str::SplitWhitespace<'a>,
}

impl ValueReader for AsciiReader<'_> {
    fn read(&mut self, _ty: Scalar) -> Option<f64> {
        // "nan"/"inf" parse here and are rejected by the caller
        self.tokens.next()?.parse::<f64>().ok()
    }
}

struct BinaryReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl ValueReader for BinaryReader<'_> {
    fn read(&mut self, ty: Scalar) -> Option<f64> {
        let n = ty.size();
        let bytes = self.data.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(ty.read_le(bytes))
    }
}
