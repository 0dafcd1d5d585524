//! Binary little-endian PLY reader/writer for the standard 3DGS vertex layout:
//! `x y z [nx ny nz] f_dc_0..2 f_rest_0..44 opacity scale_0..2 rot_0..3`.
//!
//! `f_rest` is channel-major: `f_rest_{c * 15 + (k - 1)}` holds channel `c` of
//! SH coefficient `k` for `k` in `1..16`.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::gaussian::{normalize_quaternion, GaussianModel, SH_COEFFS};

const REST_PER_CHANNEL: usize = SH_COEFFS - 1;

#[derive(Debug, Clone, Copy, PartialEq)]
enum ScalarKind {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarKind {
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

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Header {
    vertex_count: usize,
    /// (name, kind, byte offset within a vertex record)
    properties: Vec<(String, ScalarKind, usize)>,
    stride: usize,
    body_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    const END: &[u8] = b"end_header";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::Format("missing end_header".into()))?;
    let mut body_offset = end + END.len();
    if bytes.get(body_offset) == Some(&b'\r') {
        body_offset += 1;
    }
    if bytes.get(body_offset) != Some(&b'\n') {
        return Err(Error::Format("end_header not followed by newline".into()));
    }
    body_offset += 1;

    let text = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::Format("header is not valid UTF-8".into()))?;
    let mut lines = text.lines().map(str::trim);
    if lines.next() != Some("ply") {
        return Err(Error::Format("missing 'ply' magic".into()));
    }

    let mut format_ok = false;
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut seen_element = false;
    let mut properties = Vec::new();
    let mut stride = 0;
    for line in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, _version] => {
                if *fmt != "binary_little_endian" {
                    return Err(Error::Format(format!("unsupported format '{fmt}'")));
                }
                format_ok = true;
            }
            ["element", name, count] => {
                let count: usize = count
                    .parse()
                    .map_err(|_| Error::Format(format!("bad element count '{count}'")))?;
                if *name == "vertex" {
                    if seen_element {
                        return Err(Error::Format("vertex must be the first element".into()));
                    }
                    vertex_count = Some(count);
                    in_vertex = true;
                } else {
                    in_vertex = false;
                }
                seen_element = true;
            }
            ["property", "list", ..] if in_vertex => {
                return Err(Error::Format(
                    "list properties are not supported on vertices".into(),
                ));
            }
            ["property", ty, name] => {
                if in_vertex {
                    let kind = ScalarKind::parse(ty)
                        .ok_or_else(|| Error::Format(format!("unknown property type '{ty}'")))?;
                    properties.push((name.to_string(), kind, stride));
                    stride += kind.size();
                }
            }
            ["property", ..] => {}
            _ => return Err(Error::Format(format!("unrecognized header line '{line}'"))),
        }
    }
    if !format_ok {
        return Err(Error::Format(
            "missing binary_little_endian format line".into(),
        ));
    }
    let vertex_count =
        vertex_count.ok_or_else(|| Error::Format("missing vertex element".into()))?;
    Ok(Header {
        vertex_count,
        properties,
        stride,
        body_offset,
    })
}

fn rest_name(channel: usize, coeff: usize) -> String {
    format!("f_rest_{}", channel * REST_PER_CHANNEL + coeff - 1)
}

pub fn load_ply(bytes: &[u8]) -> Result<GaussianModel> {
    let header = parse_header(bytes)?;
    let n = header.vertex_count;
    let lookup: HashMap<&str, (ScalarKind, usize)> = header
        .properties
        .iter()
        .map(|(name, kind, off)| (name.as_str(), (*kind, *off)))
        .collect();
    let field = |name: &str| -> Result<(ScalarKind, usize)> {
        lookup
            .get(name)
            .copied()
            .ok_or_else(|| Error::Format(format!("missing property {name}")))
    };

    let pos = ["x", "y", "z"].map(field);
    let dc = ["f_dc_0", "f_dc_1", "f_dc_2"].map(field);
    let scale = ["scale_0", "scale_1", "scale_2"].map(field);
    let rot = ["rot_0", "rot_1", "rot_2", "rot_3"].map(field);
    let opacity = field("opacity")?;
    let pos = pos.into_iter().collect::<Result<Vec<_>>>()?;
    let dc = dc.into_iter().collect::<Result<Vec<_>>>()?;
    let mut rest = Vec::with_capacity(3 * REST_PER_CHANNEL);
    for c in 0..3 {
        for k in 1..SH_COEFFS {
            rest.push(((c, k), field(&rest_name(c, k))?));
        }
    }
    let scale = scale.into_iter().collect::<Result<Vec<_>>>()?;
    let rot = rot.into_iter().collect::<Result<Vec<_>>>()?;

    if n == 0 {
        return Err(Error::EmptyInput("PLY has no vertices"));
    }
    let body = &bytes[header.body_offset..];
    if body.len() < n * header.stride {
        return Err(Error::Format(format!(
            "vertex data truncated: need {} bytes, have {}",
            n * header.stride,
            body.len()
        )));
    }

    let mut model = GaussianModel::default();
    for i in 0..n {
        let rec = &body[i * header.stride..(i + 1) * header.stride];
        let get = |(kind, off): (ScalarKind, usize)| -> f32 { kind.read(&rec[off..]) as f32 };
        let p = [get(pos[0]), get(pos[1]), get(pos[2])];
        let mut sh = [[0f32; 3]; SH_COEFFS];
        for c in 0..3 {
            sh[0][c] = get(dc[c]);
        }
        for &((c, k), f) in &rest {
            sh[k][c] = get(f);
        }
        let s = [get(scale[0]), get(scale[1]), get(scale[2])];
        let q = [get(rot[0]), get(rot[1]), get(rot[2]), get(rot[3])];
        let o = get(opacity);

        let finite = p
            .iter()
            .chain(&s)
            .chain(&q)
            .chain(sh.iter().flatten())
            .all(|v| v.is_finite())
            && o.is_finite();
        if !finite {
            return Err(Error::Data {
                index: i,
                message: "non-finite value".into(),
            });
        }
        let q = normalize_quaternion(q).ok_or_else(|| Error::Data {
            index: i,
            message: "zero-norm rotation quaternion".into(),
        })?;
        model.positions.push(p);
        model.sh.push(sh);
        model.scales.push(s);
        model.rotations.push(q);
        model.opacities.push(o);
    }
    Ok(model)
}

fn canonical_property_names() -> Vec<String> {
    let mut names: Vec<String> = [
        "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    names.extend((0..3 * REST_PER_CHANNEL).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

/// Writes the canonical 62-float layout (normals zeroed).
pub fn save_ply(model: &GaussianModel) -> Result<Vec<u8>> {
    model.validate()?;
    let n = model.len();
    let mut header = String::new();
    header.push_str("ply\nformat binary_little_endian 1.0\n");
    writeln!(header, "element vertex {n}").unwrap();
    for name in canonical_property_names() {
        writeln!(header, "property float {name}").unwrap();
    }
    header.push_str("end_header\n");

    let mut out = header.into_bytes();
    out.reserve(n * 62 * 4);
    let mut put = |v: f32| out.extend_from_slice(&v.to_le_bytes());
    for i in 0..n {
        model.positions[i].iter().for_each(|&v| put(v));
        (0..3).for_each(|_| put(0.0));
        model.sh[i][0].iter().for_each(|&v| put(v));
        for c in 0..3 {
            for k in 1..SH_COEFFS {
                put(model.sh[i][k][c]);
            }
        }
        put(model.opacities[i]);
        model.scales[i].iter().for_each(|&v| put(v));
        model.rotations[i].iter().for_each(|&v| put(v));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_gaussian() -> GaussianModel {
        let mut sh = [[0f32; 3]; SH_COEFFS];
        for (k, row) in sh.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = k as f32 * 0.25 - c as f32;
            }
        }
        GaussianModel {
            positions: vec![[1.5, -2.0, 0.125]],
            scales: vec![[-3.0, -2.5, -4.0]],
            rotations: vec![[1.0, 0.0, 0.0, 0.0]],
            sh: vec![sh],
            opacities: vec![0.75],
        }
    }

    #[test]
    fn one_gaussian_roundtrips_byte_identically() {
        let m = one_gaussian();
        let bytes = save_ply(&m).unwrap();
        let back = load_ply(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(save_ply(&back).unwrap(), bytes);
    }

    #[test]
    fn empty_model_cannot_be_saved() {
        assert!(matches!(
            save_ply(&GaussianModel::default()),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn missing_property_is_named() {
        let bytes = save_ply(&one_gaussian()).unwrap();
        let text = String::from_utf8_lossy(&bytes)
            .replace("property float rot_3\n", "property float rot_x\n");
        let err = load_ply(text.as_bytes()).unwrap_err();
        match err {
            Error::Format(msg) => assert!(msg.contains("rot_3"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_value_reports_index() {
        let mut m = one_gaussian();
        m.positions.push([0.0; 3]);
        m.scales.push([0.0; 3]);
        m.rotations.push([1.0, 0.0, 0.0, 0.0]);
        m.sh.push([[0.0; 3]; 16]);
        m.opacities.push(0.0);
        let mut bytes = save_ply(&m).unwrap();
        // opacity of vertex 1 sits at float index 62 + 54.
        let body = bytes.len() - 2 * 62 * 4;
        let at = body + (62 + 54) * 4;
        bytes[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        match load_ply(&bytes) {
            Err(Error::Data { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_body_is_rejected() {
        let bytes = save_ply(&one_gaussian()).unwrap();
        assert!(load_ply(&bytes[..bytes.len() - 4]).is_err());
        assert!(load_ply(b"ply\nformat ascii 1.0\nelement vertex 1\nend_header\n").is_err());
    }

    /// Writes a file in a non-canonical property order with extra and
    /// double-typed properties, then checks every value against the numbers
    /// used to write it.
    #[test]
    fn handcrafted_file_matches_text_dump() {
        let mut names = vec!["opacity".to_string(), "red".to_string()];
        names.extend((0..4).map(|i| format!("rot_{i}")));
        names.extend(["z", "y", "x"].iter().map(|s| s.to_string()));
        names.extend((0..3).map(|i| format!("scale_{i}")));
        names.extend((0..3).map(|i| format!("f_dc_{i}")));
        names.extend((0..45).rev().map(|i| format!("f_rest_{i}")));

        let mut header = String::from(
            "ply\nformat binary_little_endian 1.0\ncomment handmade\nelement vertex 3\n",
        );
        for name in &names {
            let ty = if name == "x" {
                "double"
            } else if name == "red" {
                "uchar"
            } else {
                "float"
            };
            header.push_str(&format!("property {ty} {name}\n"));
        }
        header.push_str("element face 0\nproperty list uchar int vertex_indices\nend_header\n");

        // Text dump: name -> value per vertex.
        let value = |v: usize, name: &str| -> f64 {
            let h = name.bytes().fold(v as u64 * 31 + 7, |a, b| {
                a.wrapping_mul(131).wrapping_add(b as u64)
            });
            match name {
                "rot_0" => 1.0,
                "rot_1" | "rot_2" | "rot_3" => 0.0,
                _ => ((h % 2001) as f64 - 1000.0) / 64.0,
            }
        };
        let mut bytes = header.into_bytes();
        for v in 0..3 {
            for name in &names {
                match name.as_str() {
                    "x" => bytes.extend_from_slice(&value(v, name).to_le_bytes()),
                    "red" => bytes.push(200),
                    _ => bytes.extend_from_slice(&(value(v, name) as f32).to_le_bytes()),
                }
            }
        }

        let m = load_ply(&bytes).unwrap();
        assert_eq!(m.len(), 3);
        for v in 0..3 {
            assert_eq!(m.positions[v][0] as f64, value(v, "x"));
            assert_eq!(m.positions[v][2] as f64, value(v, "z"));
            assert_eq!(m.opacities[v] as f64, value(v, "opacity"));
            assert_eq!(m.scales[v][1] as f64, value(v, "scale_1"));
            for c in 0..3 {
                assert_eq!(m.sh[v][0][c] as f64, value(v, &format!("f_dc_{c}")));
                for k in 1..16 {
                    let name = format!("f_rest_{}", c * 15 + k - 1);
                    assert_eq!(m.sh[v][k][c] as f64, value(v, &name));
                }
            }
            assert_eq!(m.rotations[v], [1.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn quaternions_are_renormalized() {
        let mut m = one_gaussian();
        m.rotations = vec![[2.0, 0.0, 0.0, 0.0]];
        let back = load_ply(&save_ply(&m).unwrap()).unwrap();
        assert_eq!(back.rotations[0], [1.0, 0.0, 0.0, 0.0]);
    }
}
