//! PLY vertex clouds: `x y z` float32, optional `red green blue` uint8,
//! optional `label` int32. Reads ascii and binary little-endian; other
//! elements and properties are skipped.

use std::fmt::Write as _;

use super::PointCloud;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

#[derive(Debug)]
enum PropKind {
    Scalar(Scalar),
    List { count: Scalar, item: Scalar },
}

#[derive(Debug)]
struct Property {
    name: String,
    kind: PropKind,
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    encoding: PlyEncoding,
    elements: Vec<Element>,
    body_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut offset = 0;
    let next_line = |offset: &mut usize| -> Result<(usize, String)> {
        let start = *offset;
        let rest = &bytes[start..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(start, "unterminated header"))?;
        *offset = start + end + 1;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::parse(start, "header is not utf-8"))?;
        Ok((start, line.trim_end_matches('\r').trim().to_string()))
    };

    let (at, magic) = next_line(&mut offset)?;
    if magic != "ply" {
        return Err(Error::parse(at, "missing 'ply' magic"));
    }
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let (at, line) = next_line(&mut offset)?;
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                encoding = Some(match tok.next() {
                    Some("ascii") => PlyEncoding::Ascii,
                    Some("binary_little_endian") => PlyEncoding::BinaryLittleEndian,
                    other => {
                        return Err(Error::parse(at, format!("unsupported format {other:?}")));
                    }
                });
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                let name = tok
                    .next()
                    .ok_or_else(|| Error::parse(at, "element without name"))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::parse(at, "element without valid count"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(at, "property before any element"))?;
                let parts: Vec<&str> = tok.collect();
                let bad = || Error::parse(at, format!("malformed property line {line:?}"));
                let prop = match parts.as_slice() {
                    ["list", c, i, name] => Property {
                        name: name.to_string(),
                        kind: PropKind::List {
                            count: Scalar::parse(c).ok_or_else(bad)?,
                            item: Scalar::parse(i).ok_or_else(bad)?,
                        },
                    },
                    [ty, name] => Property {
                        name: name.to_string(),
                        kind: PropKind::Scalar(Scalar::parse(ty).ok_or_else(bad)?),
                    },
                    _ => return Err(bad()),
                };
                element.props.push(prop);
            }
            Some("end_header") => break,
            Some(other) => return Err(Error::parse(at, format!("unknown header keyword {other:?}"))),
        }
    }
    let encoding = encoding.ok_or_else(|| Error::parse(0, "header has no format line"))?;
    Ok(Header {
        encoding,
        elements,
        body_start: offset,
    })
}

struct VertexLayout {
    xyz: [usize; 3],
    rgb: Option<([usize; 3], bool)>,
    label: Option<usize>,
}

fn vertex_layout(el: &Element, header_end: usize) -> Result<VertexLayout> {
    let find = |name: &str| el.props.iter().position(|p| p.name == name);
    let scalar = |i: usize| -> Result<Scalar> {
        match el.props[i].kind {
            PropKind::Scalar(s) => Ok(s),
            PropKind::List { .. } => Err(Error::parse(
                header_end,
                format!("vertex property {} must be scalar", el.props[i].name),
            )),
        }
    };
    let mut xyz = [0; 3];
    for (a, name) in ["x", "y", "z"].iter().enumerate() {
        xyz[a] = find(name)
            .ok_or_else(|| Error::parse(header_end, format!("vertex lacks property {name}")))?;
        scalar(xyz[a])?;
    }
    let rgb = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => {
            let integral = !matches!(scalar(r)?, Scalar::F32 | Scalar::F64);
            Some(([r, g, b], integral))
        }
        (None, None, None) => None,
        _ => return Err(Error::parse(header_end, "partial red/green/blue properties")),
    };
    let label = find("label");
    if let Some(l) = label {
        scalar(l)?;
    }
    Ok(VertexLayout { xyz, rgb, label })
}

pub fn read_ply(bytes: &[u8]) -> Result<PointCloud> {
    let header = parse_header(bytes)?;
    let vertex_idx = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::parse(header.body_start, "no vertex element"))?;
    let layout = vertex_layout(&header.elements[vertex_idx], header.body_start)?;
    let n = header.elements[vertex_idx].count;

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut offset = header.body_start;
    for (ei, el) in header.elements.iter().enumerate() {
        for _ in 0..el.count {
            let values = match header.encoding {
                PlyEncoding::Ascii => read_ascii_row(bytes, &mut offset, el)?,
                PlyEncoding::BinaryLittleEndian => read_binary_row(bytes, &mut offset, el)?,
            };
            if ei == vertex_idx {
                rows.push(values);
            }
        }
        if ei == vertex_idx {
            break;
        }
    }

    let mut cloud = PointCloud::new(rows.iter().map(|r| layout.xyz.map(|i| r[i])).collect());
    if let Some((idx, integral)) = layout.rgb {
        let div = if integral { 255.0 } else { 1.0 };
        cloud.colors = Some(rows.iter().map(|r| idx.map(|i| r[i] / div)).collect());
    }
    if let Some(li) = layout.label {
        let labels = rows
            .iter()
            .map(|r| {
                let v = r[li];
                if v < 0.0 || v.fract() != 0.0 {
                    Err(Error::parse(header.body_start, format!("invalid label value {v}")))
                } else {
                    Ok(v as u32)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        cloud.labels = Some(labels);
    }
    Ok(cloud)
}

/// Returns only the scalar properties' values (lists are skipped but
/// consume their items) in property order; list slots hold `NaN`.
fn read_ascii_row(bytes: &[u8], offset: &mut usize, el: &Element) -> Result<Vec<f64>> {
    let start = *offset;
    if start >= bytes.len() {
        return Err(Error::parse(start, format!("unexpected end of {} data", el.name)));
    }
    let rest = &bytes[start..];
    let end = rest.iter().position(|&b| b == b'\n').unwrap_or(rest.len());
    *offset = start + end + 1;
    let line = std::str::from_utf8(&rest[..end]).map_err(|_| Error::parse(start, "non-utf-8 data"))?;
    let mut tokens = line.split_whitespace();
    let mut next = |what: &str| -> Result<f64> {
        tokens
            .next()
            .ok_or_else(|| Error::parse(start, format!("missing value for {what}")))?
            .parse::<f64>()
            .map_err(|_| Error::parse(start, format!("bad number for {what}")))
    };
    let mut out = Vec::with_capacity(el.props.len());
    for p in &el.props {
        match p.kind {
            // float32 values round through f32, matching the binary path
            PropKind::Scalar(Scalar::F32) => out.push(next(&p.name)? as f32 as f64),
            PropKind::Scalar(_) => out.push(next(&p.name)?),
            PropKind::List { .. } => {
                let n = next(&p.name)? as usize;
                for _ in 0..n {
                    next(&p.name)?;
                }
                out.push(f64::NAN);
            }
        }
    }
    if tokens.next().is_some() {
        return Err(Error::parse(
            start,
            format!("too many values in {} row", el.name),
        ));
    }
    Ok(out)
}

fn read_binary_row(bytes: &[u8], offset: &mut usize, el: &Element) -> Result<Vec<f64>> {
    let take = |ty: Scalar, offset: &mut usize| -> Result<f64> {
        let end = *offset + ty.size();
        if end > bytes.len() {
            return Err(Error::parse(*offset, format!("truncated {} data", el.name)));
        }
        let v = ty.read_le(&bytes[*offset..end]);
        *offset = end;
        Ok(v)
    };
    let mut out = Vec::with_capacity(el.props.len());
    for p in &el.props {
        match p.kind {
            PropKind::Scalar(ty) => out.push(take(ty, offset)?),
            PropKind::List { count, item } => {
                let n = take(count, offset)? as usize;
                for _ in 0..n {
                    take(item, offset)?;
                }
                out.push(f64::NAN);
            }
        }
    }
    Ok(out)
}

pub fn write_ply(cloud: &PointCloud, encoding: PlyEncoding) -> Vec<u8> {
    let mut header = String::from("ply\n");
    header.push_str(match encoding {
        PlyEncoding::Ascii => "format ascii 1.0\n",
        PlyEncoding::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    let _ = writeln!(header, "element vertex {}", cloud.len());
    header.push_str("property float x\nproperty float y\nproperty float z\n");
    if cloud.colors.is_some() {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    if cloud.labels.is_some() {
        header.push_str("property int label\n");
    }
    header.push_str("end_header\n");

    let mut out = header.into_bytes();
    let to_u8 = |c: f64| (c.clamp(0.0, 1.0) * 255.0).round() as u8;
    for i in 0..cloud.len() {
        let p = cloud.points[i].map(|v| v as f32);
        let rgb = cloud.colors.as_ref().map(|c| c[i].map(to_u8));
        let label = cloud.labels.as_ref().map(|l| l[i] as i32);
        match encoding {
            PlyEncoding::Ascii => {
                let mut line = format!("{} {} {}", p[0], p[1], p[2]);
                if let Some(c) = rgb {
                    let _ = write!(line, " {} {} {}", c[0], c[1], c[2]);
                }
                if let Some(l) = label {
                    let _ = write!(line, " {l}");
                }
                line.push('\n');
                out.extend_from_slice(line.as_bytes());
            }
            PlyEncoding::BinaryLittleEndian => {
                for v in p {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                if let Some(c) = rgb {
                    out.extend_from_slice(&c);
                }
                if let Some(l) = label {
                    out.extend_from_slice(&l.to_le_bytes());
                }
            }
        }
    }
    out
}
