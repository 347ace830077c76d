//! Gaussian clouds as PLY vertex elements with the properties
//! `x y z rot_0..rot_3 scale_0..scale_2 opacity red green blue`.
//!
//! Scales and opacity are stored activated (`exp`, sigmoid) and converted
//! back to log / logit on load. Writing produces binary little-endian
//! float32; reading also accepts ASCII and any scalar property type, and
//! skips unknown properties and elements.

use std::path::Path;

use nalgebra::{Vector3, Vector4};

use crate::error::{malformed, Result};
use crate::gaussian::{logit, sigmoid, GaussianCloud};

const PROPS: [&str; 14] = [
    "x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3", "scale_0", "scale_1", "scale_2", "opacity", "red", "green",
    "blue",
];

pub fn encode_ply(cloud: &GaussianCloud) -> Vec<u8> {
    let mut out = format!(
        "ply\nformat binary_little_endian 1.0\ncomment gaussian cloud\nelement vertex {}\n",
        cloud.len()
    );
    for p in PROPS {
        out.push_str(&format!("property float {p}\n"));
    }
    out.push_str("end_header\n");
    let mut out = out.into_bytes();
    out.reserve(cloud.len() * PROPS.len() * 4);
    for i in 0..cloud.len() {
        let p = cloud.positions()[i];
        let q = cloud.rotations()[i];
        let s = cloud.log_scales()[i].map(f64::exp);
        let c = cloud.colors()[i];
        let row = [
            p.x,
            p.y,
            p.z,
            q[0],
            q[1],
            q[2],
            q[3],
            s.x,
            s.y,
            s.z,
            sigmoid(cloud.opacity_logits()[i]),
            c.x,
            c.y,
            c.z,
        ];
        for v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
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
    fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            other => return Err(malformed("ply header", format!("unknown type {other:?}"))),
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
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
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

#[derive(Clone, Copy, PartialEq)]
enum Encoding {
    Ascii,
    BinaryLe,
}

fn parse_header(bytes: &[u8]) -> Result<(Encoding, Vec<Element>, usize)> {
    const END: &[u8] = b"end_header";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| malformed("ply header", "missing end_header"))?;
    let mut body = end + END.len();
    if bytes.get(body) == Some(&b'\r') {
        body += 1;
    }
    if bytes.get(body) != Some(&b'\n') {
        return Err(malformed("ply header", "end_header not followed by a newline"));
    }
    body += 1;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| malformed("ply header", "not UTF-8"))?;
    let mut lines = text.lines().map(str::trim);
    if lines.next() != Some("ply") {
        return Err(malformed("ply header", "missing 'ply' magic line"));
    }
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", _] => encoding = Some(Encoding::Ascii),
            ["format", "binary_little_endian", _] => encoding = Some(Encoding::BinaryLe),
            ["format", other, ..] => {
                return Err(malformed("ply header", format!("unsupported format {other}")));
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| malformed("ply header", format!("bad element count {count:?}")))?,
                props: Vec::new(),
            }),
            ["property", "list", count, item, _] => {
                let e = elements
                    .last_mut()
                    .ok_or_else(|| malformed("ply header", "property before element"))?;
                e.props.push(Property::List(Scalar::parse(count)?, Scalar::parse(item)?));
            }
            ["property", ty, name] => {
                let e = elements
                    .last_mut()
                    .ok_or_else(|| malformed("ply header", "property before element"))?;
                e.props.push(Property::Scalar(name.to_string(), Scalar::parse(ty)?));
            }
            _ => return Err(malformed("ply header", format!("unrecognized line {line:?}"))),
        }
    }
    let encoding = encoding.ok_or_else(|| malformed("ply header", "missing format line"))?;
    Ok((encoding, elements, body))
}

/// Scalar columns of one element, row-major.
struct Rows {
    columns: Vec<String>,
    values: Vec<f64>,
}

fn read_binary(bytes: &[u8], pos: &mut usize, e: &Element) -> Result<Rows> {
    let truncated = || malformed("ply body", format!("element {} is truncated", e.name));
    let columns: Vec<String> = e
        .props
        .iter()
        .filter_map(|p| match p {
            Property::Scalar(n, _) => Some(n.clone()),
            Property::List(..) => None,
        })
        .collect();
    let mut values = Vec::with_capacity(e.count.saturating_mul(columns.len()).min(bytes.len()));
    for _ in 0..e.count {
        for p in &e.props {
            match p {
                Property::Scalar(_, t) => {
                    let b = bytes.get(*pos..*pos + t.size()).ok_or_else(truncated)?;
                    values.push(t.read_le(b));
                    *pos += t.size();
                }
                Property::List(ct, it) => {
                    let b = bytes.get(*pos..*pos + ct.size()).ok_or_else(truncated)?;
                    let n = ct.read_le(b) as usize;
                    *pos += ct.size() + n * it.size();
                    if *pos > bytes.len() {
                        return Err(truncated());
                    }
                }
            }
        }
    }
    Ok(Rows { columns, values })
}

fn read_ascii<'a>(tokens: &mut impl Iterator<Item = &'a str>, e: &Element) -> Result<Rows> {
    let mut next = || -> Result<f64> {
        let t = tokens
            .next()
            .ok_or_else(|| malformed("ply body", format!("element {} is truncated", e.name)))?;
        t.parse::<f64>()
            .map_err(|_| malformed("ply body", format!("bad number {t:?}")))
    };
    let mut columns = Vec::new();
    for p in &e.props {
        if let Property::Scalar(n, _) = p {
            columns.push(n.clone());
        }
    }
    let mut values = Vec::new();
    for _ in 0..e.count {
        for p in &e.props {
            match p {
                Property::Scalar(..) => values.push(next()?),
                Property::List(..) => {
                    let n = next()? as usize;
                    for _ in 0..n {
                        next()?;
                    }
                }
            }
        }
    }
    Ok(Rows { columns, values })
}

pub fn decode_ply(bytes: &[u8]) -> Result<GaussianCloud> {
    let (encoding, elements, body) = parse_header(bytes)?;
    let mut vertex = None;
    let mut pos = body;
    let text;
    let mut tokens = match encoding {
        Encoding::Ascii => {
            text = std::str::from_utf8(&bytes[body..]).map_err(|_| malformed("ply body", "not UTF-8"))?;
            Some(text.split_whitespace())
        }
        Encoding::BinaryLe => None,
    };
    for e in &elements {
        let rows = match tokens.as_mut() {
            Some(t) => read_ascii(t, e)?,
            None => read_binary(bytes, &mut pos, e)?,
        };
        if e.name == "vertex" {
            let types: Vec<Scalar> = e
                .props
                .iter()
                .filter_map(|p| match p {
                    Property::Scalar(_, t) => Some(*t),
                    Property::List(..) => None,
                })
                .collect();
            vertex = Some((rows, types, e.count));
        }
    }
    match tokens {
        Some(mut t) => {
            if t.next().is_some() {
                return Err(malformed("ply body", "trailing data after the last element"));
            }
        }
        None => {
            if pos != bytes.len() {
                return Err(malformed("ply body", format!("{} trailing bytes", bytes.len() - pos)));
            }
        }
    }
    let (rows, types, count) = vertex.ok_or_else(|| malformed("ply header", "no vertex element"))?;
    let width = rows.columns.len();
    let col = |name: &str| -> Result<usize> {
        rows.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| malformed("ply header", format!("missing vertex property {name}")))
    };
    let idx: Vec<usize> = PROPS.iter().map(|p| col(p)).collect::<Result<_>>()?;
    let color_scale: Vec<f64> = idx[11..]
        .iter()
        .map(|&i| if types[i] == Scalar::U8 { 1.0 / 255.0 } else { 1.0 })
        .collect();
    let mut cloud = GaussianCloud::default();
    for r in 0..count {
        let row = &rows.values[r * width..(r + 1) * width];
        let v = |k: usize| row[idx[k]];
        let scale = Vector3::new(v(7), v(8), v(9));
        if !scale.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(malformed("ply body", format!("vertex {r}: scale {scale:?} is not positive")));
        }
        let opacity = v(10);
        if !(0.0..=1.0).contains(&opacity) {
            return Err(malformed("ply body", format!("vertex {r}: opacity {opacity} outside [0, 1]")));
        }
        cloud.push(
            Vector3::new(v(0), v(1), v(2)),
            Vector4::new(v(3), v(4), v(5), v(6)),
            scale.map(f64::ln),
            logit(opacity),
            Vector3::new(v(11) * color_scale[0], v(12) * color_scale[1], v(13) * color_scale[2]),
        )?;
    }
    Ok(cloud)
}

pub fn save_ply(cloud: &GaussianCloud, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ply(cloud))?;
    Ok(())
}

pub fn load_ply(path: &Path) -> Result<GaussianCloud> {
    decode_ply(&std::fs::read(path)?)
}
