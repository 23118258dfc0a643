use std::path::Path;

use nalgebra::{Point3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlyEncoding {
    #[default]
    Ascii,
    BinaryLittleEndian,
}

/// A point cloud read from or written to PLY, with optional vertex colors.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyCloud {
    pub cloud: PointCloud,
    pub colors: Option<Vec<[u8; 3]>>,
    /// Properties and elements that were read but not understood.
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { name: String, count: Scalar, item: Scalar },
}

impl Property {
    fn name(&self) -> &str {
        match self {
            Self::Scalar { name, .. } | Self::List { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

struct Header {
    encoding: PlyEncoding,
    elements: Vec<Element>,
    /// Byte offset of the body.
    body: usize,
    /// Line number (1-based) of the first body line.
    body_line: usize,
}

fn perr(location: String, message: impl Into<String>) -> Error {
    Error::Parse {
        location,
        message: message.into(),
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut pos = 0;
    let mut line_no = 0;
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| perr(format!("line {}", line_no + 1), "header has no end_header line"))?;
        let raw = &bytes[pos..pos + end];
        pos += end + 1;
        line_no += 1;
        let loc = || format!("line {line_no}");
        let line = std::str::from_utf8(raw)
            .map_err(|_| perr(loc(), "header is not valid UTF-8"))?
            .trim();
        let mut f = line.split_whitespace();
        let key = f.next().unwrap_or("");
        if line_no == 1 {
            if line != "ply" {
                return Err(perr(loc(), "missing `ply` magic"));
            }
            continue;
        }
        match key {
            "" | "comment" | "obj_info" => {}
            "format" => {
                encoding = Some(match (f.next(), f.next()) {
                    (Some("ascii"), Some("1.0")) => PlyEncoding::Ascii,
                    (Some("binary_little_endian"), Some("1.0")) => PlyEncoding::BinaryLittleEndian,
                    _ => return Err(perr(loc(), format!("unsupported format `{line}`"))),
                });
            }
            "element" => {
                let name = f.next().ok_or_else(|| perr(loc(), "element without a name"))?;
                let count = f
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| perr(loc(), "element without a valid count"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            "property" => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| perr(loc(), "property before any element"))?;
                let parts: Vec<&str> = f.collect();
                let bad = || perr(loc(), format!("malformed property `{line}`"));
                let prop = match parts.as_slice() {
                    ["list", c, i, name] => Property::List {
                        name: name.to_string(),
                        count: Scalar::parse(c).ok_or_else(bad)?,
                        item: Scalar::parse(i).ok_or_else(bad)?,
                    },
                    [ty, name] => Property::Scalar {
                        name: name.to_string(),
                        ty: Scalar::parse(ty).ok_or_else(bad)?,
                    },
                    _ => return Err(bad()),
                };
                el.properties.push(prop);
            }
            "end_header" => break,
            other => return Err(perr(loc(), format!("unknown header keyword `{other}`"))),
        }
    }
    let encoding = encoding.ok_or_else(|| perr("line 2".into(), "missing format line"))?;
    Ok(Header {
        encoding,
        elements,
        body: pos,
        body_line: line_no + 1,
    })
}

/// Reads the body row by row, handing each vertex row to `sink`.
struct BodyReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    line: usize,
    encoding: PlyEncoding,
}

impl BodyReader<'_> {
    fn location(&self) -> String {
        match self.encoding {
            PlyEncoding::Ascii => format!("line {}", self.line),
            PlyEncoding::BinaryLittleEndian => format!("byte {}", self.pos),
        }
    }

    /// Values of one row; list properties are flattened into the row but
    /// reported as `None` slots so callers can skip them.
    fn row(&mut self, el: &Element) -> Result<Vec<Option<f64>>> {
        match self.encoding {
            PlyEncoding::Ascii => self.ascii_row(el),
            PlyEncoding::BinaryLittleEndian => self.binary_row(el),
        }
    }

    fn ascii_row(&mut self, el: &Element) -> Result<Vec<Option<f64>>> {
        let text = loop {
            if self.pos >= self.bytes.len() {
                return Err(perr(
                    self.location(),
                    format!("unexpected end of file inside element `{}`", el.name),
                ));
            }
            let end = self.bytes[self.pos..]
                .iter()
                .position(|&b| b == b'\n')
                .map_or(self.bytes.len(), |e| self.pos + e);
            let raw = &self.bytes[self.pos..end];
            self.pos = (end + 1).min(self.bytes.len().max(end + 1));
            self.line += 1;
            let s = std::str::from_utf8(raw)
                .map_err(|_| perr(format!("line {}", self.line - 1), "row is not valid UTF-8"))?
                .trim();
            if !s.is_empty() {
                break s.to_string();
            }
        };
        let loc = format!("line {}", self.line - 1);
        let mut tokens = text.split_whitespace();
        let mut next = |what: &str| -> Result<f64> {
            tokens
                .next()
                .ok_or_else(|| perr(loc.clone(), format!("missing value for `{what}`")))?
                .parse::<f64>()
                .map_err(|e| perr(loc.clone(), format!("bad value for `{what}`: {e}")))
        };
        let mut row = Vec::with_capacity(el.properties.len());
        for p in &el.properties {
            match p {
                Property::Scalar { name, .. } => row.push(Some(next(name)?)),
                Property::List { name, .. } => {
                    let n = next(name)? as usize;
                    for _ in 0..n {
                        next(name)?;
                    }
                    row.push(None);
                }
            }
        }
        if tokens.next().is_some() {
            return Err(perr(loc, format!("too many values in `{}` row", el.name)));
        }
        Ok(row)
    }

    fn take(&mut self, n: usize, el: &Element) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(perr(
                self.location(),
                format!("unexpected end of file inside element `{}`", el.name),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn binary_row(&mut self, el: &Element) -> Result<Vec<Option<f64>>> {
        let mut row = Vec::with_capacity(el.properties.len());
        for p in &el.properties {
            match p {
                Property::Scalar { ty, .. } => {
                    let v = ty.read_le(self.take(ty.size(), el)?);
                    row.push(Some(v));
                }
                Property::List { count, item, .. } => {
                    let n = count.read_le(self.take(count.size(), el)?) as usize;
                    self.take(n * item.size(), el)?;
                    row.push(None);
                }
            }
        }
        Ok(row)
    }
}

pub fn parse_ply(bytes: &[u8]) -> Result<PlyCloud> {
    let header = parse_header(bytes)?;
    let mut warnings = Vec::new();
    let mut reader = BodyReader {
        bytes,
        pos: header.body,
        line: header.body_line,
        encoding: header.encoding,
    };
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut colors = Vec::new();
    let mut seen_vertex = false;
    for el in &header.elements {
        if el.name != "vertex" {
            warnings.push(format!("skipped element `{}` ({} rows)", el.name, el.count));
            for _ in 0..el.count {
                reader.row(el)?;
            }
            continue;
        }
        seen_vertex = true;
        let find = |n: &str| el.properties.iter().position(|p| p.name() == n && matches!(p, Property::Scalar { .. }));
        let xyz = [find("x"), find("y"), find("z")];
        let [Some(ix), Some(iy), Some(iz)] = xyz else {
            return Err(perr("header".into(), "vertex element lacks x, y or z"));
        };
        let nrm = match (find("nx"), find("ny"), find("nz")) {
            (Some(a), Some(b), Some(c)) => Some([a, b, c]),
            _ => None,
        };
        let rgb = match (find("red"), find("green"), find("blue")) {
            (Some(a), Some(b), Some(c)) => Some([a, b, c]),
            _ => None,
        };
        let known = ["x", "y", "z", "nx", "ny", "nz", "red", "green", "blue"];
        for p in &el.properties {
            if !known.contains(&p.name()) || matches!(p, Property::List { .. }) {
                warnings.push(format!("skipped vertex property `{}`", p.name()));
            }
        }
        for _ in 0..el.count {
            let row = reader.row(el)?;
            let v = |i: usize| row[i].expect("scalar slot");
            points.push(Point3::new(v(ix), v(iy), v(iz)));
            if let Some([a, b, c]) = nrm {
                normals.push(Vector3::new(v(a), v(b), v(c)));
            }
            if let Some([r, g, b]) = rgb {
                colors.push([v(r) as u8, v(g) as u8, v(b) as u8]);
            }
        }
    }
    if !seen_vertex {
        return Err(perr("header".into(), "no vertex element"));
    }
    let trailing = match header.encoding {
        PlyEncoding::Ascii => bytes[reader.pos.min(bytes.len())..]
            .iter()
            .any(|b| !b.is_ascii_whitespace()),
        PlyEncoding::BinaryLittleEndian => reader.pos < bytes.len(),
    };
    if trailing {
        return Err(perr(reader.location(), "data beyond the declared element counts"));
    }
    if points.iter().any(|p| !p.coords.iter().all(|v| v.is_finite())) {
        return Err(Error::InvalidInput("PLY contains non-finite coordinates".into()));
    }
    let mut cloud = PointCloud::new(points);
    if !normals.is_empty() {
        let mut fixed = 0;
        let mut usable = true;
        for n in normals.iter_mut() {
            let len = n.norm();
            if !(len > 0.0 && len.is_finite()) {
                usable = false;
                break;
            }
            if (len - 1.0).abs() > 1e-6 {
                *n /= len;
                fixed += 1;
            }
        }
        if usable {
            if fixed > 0 {
                warnings.push(format!("renormalized {fixed} normals"));
            }
            cloud.set_normals(normals)?;
        } else {
            warnings.push("dropped normals: zero or non-finite vector present".into());
        }
    }
    Ok(PlyCloud {
        cloud,
        colors: (!colors.is_empty()).then_some(colors),
        warnings,
    })
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PlyCloud> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    let ply = parse_ply(&bytes)?;
    for w in &ply.warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(ply)
}

/// Encodes coordinates and normals as doubles, colors as uchar.
pub fn ply_bytes(cloud: &PointCloud, colors: Option<&[[u8; 3]]>, encoding: PlyEncoding) -> Result<Vec<u8>> {
    if let Some(c) = colors {
        if c.len() != cloud.len() {
            return Err(Error::Shape(format!("{} colors for {} points", c.len(), cloud.len())));
        }
    }
    let mut out = String::from("ply\n");
    out.push_str(match encoding {
        PlyEncoding::Ascii => "format ascii 1.0\n",
        PlyEncoding::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    out.push_str(&format!("element vertex {}\n", cloud.len()));
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    let normals = cloud.normals();
    if normals.is_some() {
        out.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    if colors.is_some() {
        out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    out.push_str("end_header\n");
    let mut bytes = out.into_bytes();
    for i in 0..cloud.len() {
        let p = cloud.point(i);
        let mut vals: Vec<f64> = p.coords.iter().copied().collect();
        if let Some(n) = normals {
            vals.extend(n[i].iter().copied());
        }
        let rgb = colors.map(|c| c[i]);
        match encoding {
            PlyEncoding::Ascii => {
                let mut line: Vec<String> = vals.iter().map(|v| format!("{v:?}")).collect();
                if let Some(c) = rgb {
                    line.extend(c.iter().map(|v| v.to_string()));
                }
                bytes.extend_from_slice(line.join(" ").as_bytes());
                bytes.push(b'\n');
            }
            PlyEncoding::BinaryLittleEndian => {
                for v in vals {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                if let Some(c) = rgb {
                    bytes.extend_from_slice(&c);
                }
            }
        }
    }
    Ok(bytes)
}

pub fn write_ply(
    path: impl AsRef<Path>,
    cloud: &PointCloud,
    colors: Option<&[[u8; 3]]>,
    encoding: PlyEncoding,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = ply_bytes(cloud, colors, encoding)?;
    std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, normals: bool) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let pts: Vec<_> = (0..n)
            .map(|_| Point3::new(rng.random::<f64>(), rng.random::<f64>() * 1e3, -rng.random::<f64>()))
            .collect();
        if normals {
            let ns = (0..n)
                .map(|_| Vector3::new(rng.random::<f64>() + 0.1, rng.random(), rng.random()).normalize())
                .collect();
            PointCloud::with_normals(pts, ns).unwrap()
        } else {
            PointCloud::new(pts)
        }
    }

    #[test]
    fn round_trip_both_encodings() {
        for enc in [PlyEncoding::Ascii, PlyEncoding::BinaryLittleEndian] {
            let c = random_cloud(50, true);
            let colors: Vec<[u8; 3]> = (0..50).map(|i| [i as u8, 255 - i as u8, 7]).collect();
            let bytes = ply_bytes(&c, Some(&colors), enc).unwrap();
            let back = parse_ply(&bytes).unwrap();
            assert_eq!(back.cloud.points(), c.points());
            assert_eq!(back.cloud.normals(), c.normals());
            assert_eq!(back.colors.as_deref(), Some(&colors[..]));
            assert!(back.warnings.is_empty());
            let again = ply_bytes(&back.cloud, back.colors.as_deref(), enc).unwrap();
            assert_eq!(again, bytes);
        }
    }

    #[test]
    fn short_body_is_parse_error() {
        let mut text = String::from("ply\nformat ascii 1.0\nelement vertex 10\nproperty float x\nproperty float y\nproperty float z\nend_header\n");
        for i in 0..9 {
            text.push_str(&format!("{i} 0 0\n"));
        }
        let err = parse_ply(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { ref location, .. } if location == "line 17"), "{err}");
        let c = random_cloud(4, false);
        let bytes = ply_bytes(&c, None, PlyEncoding::BinaryLittleEndian).unwrap();
        let err = parse_ply(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(matches!(err, Error::Parse { ref location, .. } if location.starts_with("byte")));
    }

    #[test]
    fn unknown_properties_and_elements_warn() {
        let text = "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty float intensity\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0 0.5\n1 0 0 0.7\n3 0 1 1\n";
        let p = parse_ply(text.as_bytes()).unwrap();
        assert_eq!(p.cloud.len(), 2);
        assert_eq!(p.warnings.len(), 2);
        assert!(!p.cloud.has_normals());
    }

    #[test]
    fn malformed_header() {
        assert!(parse_ply(b"plx\n").is_err());
        assert!(parse_ply(b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n").is_err());
        let no_z = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n0 0\n";
        assert!(parse_ply(no_z.as_bytes()).is_err());
    }
}
