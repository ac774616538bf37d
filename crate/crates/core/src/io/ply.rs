//! PLY reading and writing for labeled point clouds.
//!
//! Only the `vertex` element is interpreted. Recognized vertex properties are
//! `x`, `y`, `z` (required), `red`, `green`, `blue`, `label` and `intensity`;
//! anything else is parsed and skipped. Other elements (faces, edges, ...) are
//! skipped as well, including list properties.
//!
//! Files are written with `float` coordinates, `uchar` colors and an `int`
//! label, where [`UNLABELED`] is stored as `-1`.

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use thiserror::Error;

use super::cloud::{CloudError, PointCloud, UNLABELED};

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("header line {line}: {msg}")]
    Header { line: usize, msg: String },
    #[error("body line {line}: {msg}")]
    AsciiBody { line: usize, msg: String },
    #[error("truncated body at byte offset {offset}: {msg}")]
    Truncated { offset: usize, msg: String },
    #[error("invalid cloud: {0}")]
    Cloud(#[from] CloudError),
    #[error("cannot colorize by labels: the cloud has no labels")]
    MissingLabels,
    #[error("label {0} has no palette color ({n} available)", n = LABEL_PALETTE.len())]
    PaletteTooSmall(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

/// Source of the colors written to the output file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorBy {
    /// A fixed palette color per class label.
    Labels,
    /// The cloud's own colors, if it has any.
    Rgb,
}

/// Fixed class palette used when colorizing by label.
pub const LABEL_PALETTE: [[u8; 3]; 20] = [
    [174, 199, 232],
    [152, 223, 138],
    [31, 119, 180],
    [255, 187, 120],
    [188, 189, 34],
    [140, 86, 75],
    [255, 152, 150],
    [214, 39, 40],
    [197, 176, 213],
    [148, 103, 189],
    [196, 156, 148],
    [23, 190, 207],
    [247, 182, 210],
    [219, 219, 141],
    [255, 127, 14],
    [158, 218, 229],
    [44, 160, 44],
    [112, 128, 144],
    [227, 119, 194],
    [82, 84, 163],
];

const UNLABELED_COLOR: [u8; 3] = [0, 0, 0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
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

    fn is_integer(self) -> bool {
        !matches!(self, Self::F32 | Self::F64)
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => LittleEndian::read_i16(b) as f64,
            Self::U16 => LittleEndian::read_u16(b) as f64,
            Self::I32 => LittleEndian::read_i32(b) as f64,
            Self::U32 => LittleEndian::read_u32(b) as f64,
            Self::F32 => LittleEndian::read_f32(b) as f64,
            Self::F64 => LittleEndian::read_f64(b),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: ScalarType },
    List { count: ScalarType, item: ScalarType },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    body_offset: usize,
    body_line: usize,
}

fn header_err(line: usize, msg: impl Into<String>) -> PlyError {
    PlyError::Header {
        line,
        msg: msg.into(),
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header, PlyError> {
    let mut offset = 0;
    let mut line_no = 0;
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let rest = &bytes[offset..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| header_err(line_no + 1, "missing end_header"))?;
        line_no += 1;
        let raw = std::str::from_utf8(&rest[..end])
            .map_err(|_| header_err(line_no, "header is not valid text"))?;
        offset += end + 1;
        let line = raw.trim_end_matches('\r').trim();
        let mut words = line.split_whitespace();
        let keyword = words.next().unwrap_or("");
        if line_no == 1 {
            if line != "ply" {
                return Err(header_err(1, "file does not start with 'ply'"));
            }
            continue;
        }
        match keyword {
            "" | "comment" | "obj_info" => {}
            "format" => {
                let kind = words.next().unwrap_or("");
                format = Some(match kind {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => {
                        return Err(header_err(line_no, format!("unsupported format '{other}'")))
                    }
                });
            }
            "element" => {
                let name = words
                    .next()
                    .ok_or_else(|| header_err(line_no, "element without name"))?;
                let count = words
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| header_err(line_no, "element without a valid count"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            "property" => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| header_err(line_no, "property before any element"))?;
                let first = words
                    .next()
                    .ok_or_else(|| header_err(line_no, "property without type"))?;
                let prop = if first == "list" {
                    let count_ty = words.next().and_then(ScalarType::parse);
                    let item_ty = words.next().and_then(ScalarType::parse);
                    match (count_ty, item_ty) {
                        (Some(count), Some(item)) if count.is_integer() => {
                            Property::List { count, item }
                        }
                        _ => return Err(header_err(line_no, "unsupported list property type")),
                    }
                } else {
                    let ty = ScalarType::parse(first).ok_or_else(|| {
                        header_err(line_no, format!("unsupported property type '{first}'"))
                    })?;
                    let name = words
                        .next()
                        .ok_or_else(|| header_err(line_no, "property without name"))?;
                    Property::Scalar {
                        name: name.to_string(),
                        ty,
                    }
                };
                element.properties.push(prop);
            }
            "end_header" => break,
            other => return Err(header_err(line_no, format!("unknown keyword '{other}'"))),
        }
    }
    let format = format.ok_or_else(|| header_err(line_no, "missing format line"))?;
    Ok(Header {
        format,
        elements,
        body_offset: offset,
        body_line: line_no + 1,
    })
}

/// Column positions of the properties we interpret, within the vertex element.
struct VertexLayout {
    xyz: [usize; 3],
    rgb: Option<([usize; 3], ScalarType)>,
    label: Option<usize>,
    intensity: Option<usize>,
}

fn vertex_layout(element: &Element, line: usize) -> Result<VertexLayout, PlyError> {
    let find = |key: &str| {
        element.properties.iter().position(
            |p| matches!(p, Property::Scalar { name, .. } if name == key),
        )
    };
    let ty_of = |i: usize| match &element.properties[i] {
        Property::Scalar { ty, .. } => *ty,
        Property::List { .. } => unreachable!(),
    };
    let mut xyz = [0; 3];
    for (slot, key) in xyz.iter_mut().zip(["x", "y", "z"]) {
        *slot = find(key).ok_or_else(|| header_err(line, format!("vertex has no '{key}'")))?;
    }
    let rgb = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => {
            let ty = ty_of(r);
            if ty_of(g) != ty || ty_of(b) != ty {
                return Err(header_err(line, "color channels have different types"));
            }
            if !matches!(ty, ScalarType::U8 | ScalarType::F32 | ScalarType::F64) {
                return Err(header_err(line, "colors must be uchar, float or double"));
            }
            Some(([r, g, b], ty))
        }
        (None, None, None) => None,
        _ => return Err(header_err(line, "incomplete red/green/blue properties")),
    };
    let label = find("label");
    if let Some(i) = label {
        if !ty_of(i).is_integer() {
            return Err(header_err(line, "label must be an integer property"));
        }
    }
    Ok(VertexLayout {
        xyz,
        rgb,
        label,
        intensity: find("intensity"),
    })
}

struct VertexColumns {
    positions: Vec<[f64; 3]>,
    colors: Vec<[f64; 3]>,
    labels: Vec<u32>,
    intensity: Vec<f64>,
}

impl VertexColumns {
    fn with_capacity(n: usize) -> Self {
        Self {
            positions: Vec::with_capacity(n),
            colors: Vec::new(),
            labels: Vec::new(),
            intensity: Vec::new(),
        }
    }

    fn push(&mut self, layout: &VertexLayout, values: &[f64]) {
        self.positions
            .push(layout.xyz.map(|i| values[i]));
        if let Some((idx, ty)) = layout.rgb {
            let scale = if ty == ScalarType::U8 { 255.0 } else { 1.0 };
            self.colors.push(idx.map(|i| values[i] / scale));
        }
        if let Some(i) = layout.label {
            let v = values[i];
            self.labels
                .push(if v < 0.0 || v >= UNLABELED as f64 { UNLABELED } else { v as u32 });
        }
        if let Some(i) = layout.intensity {
            self.intensity.push(values[i]);
        }
    }

    fn into_cloud(self, layout: &VertexLayout) -> Result<PointCloud, CloudError> {
        let mut cloud = PointCloud::new(self.positions)?;
        if layout.rgb.is_some() {
            cloud = cloud.with_colors(self.colors)?;
        }
        if layout.label.is_some() {
            cloud = cloud.with_labels(self.labels)?;
        }
        if layout.intensity.is_some() {
            cloud = cloud.with_intensity(self.intensity)?;
        }
        Ok(cloud)
    }
}

/// Parse a PLY file held in memory.
pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud, PlyError> {
    let header = parse_header(bytes)?;
    let vertex_pos = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| header_err(header.body_line - 1, "no vertex element"))?;
    let layout = vertex_layout(&header.elements[vertex_pos], header.body_line - 1)?;
    let vertex_count = header.elements[vertex_pos].count;
    let mut columns = VertexColumns::with_capacity(vertex_count);
    match header.format {
        PlyFormat::Ascii => read_ascii_body(bytes, &header, vertex_pos, &layout, &mut columns)?,
        PlyFormat::BinaryLittleEndian => {
            read_binary_body(bytes, &header, vertex_pos, &layout, &mut columns)?
        }
    }
    Ok(columns.into_cloud(&layout)?)
}

fn read_ascii_body(
    bytes: &[u8],
    header: &Header,
    vertex_pos: usize,
    layout: &VertexLayout,
    columns: &mut VertexColumns,
) -> Result<(), PlyError> {
    let text = std::str::from_utf8(&bytes[header.body_offset..]).map_err(|e| {
        PlyError::Truncated {
            offset: header.body_offset + e.valid_up_to(),
            msg: "ascii body is not valid text".into(),
        }
    })?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (header.body_line + i, l))
        .filter(|(_, l)| !l.trim().is_empty());
    let mut values = Vec::new();
    for (ei, element) in header.elements.iter().enumerate() {
        for _ in 0..element.count {
            let (line_no, line) = lines.next().ok_or_else(|| PlyError::AsciiBody {
                line: header.body_line + text.lines().count(),
                msg: format!("unexpected end of file in element '{}'", element.name),
            })?;
            let err = |msg: String| PlyError::AsciiBody { line: line_no, msg };
            let mut tokens = line.split_whitespace();
            let mut next = || {
                tokens
                    .next()
                    .ok_or_else(|| err("too few values".into()))
                    .and_then(|t| {
                        t.parse::<f64>()
                            .map_err(|_| err(format!("cannot parse '{t}' as a number")))
                    })
            };
            values.clear();
            for prop in &element.properties {
                match prop {
                    Property::Scalar { .. } => values.push(next()?),
                    Property::List { .. } => {
                        let n = next()?;
                        if n < 0.0 || n.fract() != 0.0 {
                            return Err(err(format!("invalid list length {n}")));
                        }
                        for _ in 0..n as usize {
                            next()?;
                        }
                        values.push(f64::NAN);
                    }
                }
            }
            if ei == vertex_pos {
                columns.push(layout, &values);
            }
        }
    }
    Ok(())
}

fn read_binary_body(
    bytes: &[u8],
    header: &Header,
    vertex_pos: usize,
    layout: &VertexLayout,
    columns: &mut VertexColumns,
) -> Result<(), PlyError> {
    let mut offset = header.body_offset;
    let take = |offset: &mut usize, n: usize, what: &str| -> Result<&[u8], PlyError> {
        if *offset + n > bytes.len() {
            return Err(PlyError::Truncated {
                offset: *offset,
                msg: format!("need {n} more bytes for {what}"),
            });
        }
        let s = &bytes[*offset..*offset + n];
        *offset += n;
        Ok(s)
    };
    let mut values = Vec::new();
    for (ei, element) in header.elements.iter().enumerate() {
        for _ in 0..element.count {
            values.clear();
            for prop in &element.properties {
                match prop {
                    Property::Scalar { ty, name } => {
                        let b = take(&mut offset, ty.size(), name)?;
                        values.push(ty.decode(b));
                    }
                    Property::List { count, item } => {
                        let n = count.decode(take(&mut offset, count.size(), "list length")?);
                        if n < 0.0 {
                            return Err(PlyError::Truncated {
                                offset,
                                msg: format!("negative list length {n}"),
                            });
                        }
                        take(&mut offset, n as usize * item.size(), "list items")?;
                        values.push(f64::NAN);
                    }
                }
            }
            if ei == vertex_pos {
                columns.push(layout, &values);
            }
        }
    }
    Ok(())
}

/// Read a PLY point cloud. Colors stored as `uchar` are scaled to `[0, 1]`.
pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud, PlyError> {
    parse_ply(&fs::read(path)?)
}

/// Serialize a cloud to PLY bytes.
pub fn encode_ply(
    cloud: &PointCloud,
    color_by: ColorBy,
    format: PlyFormat,
) -> Result<Vec<u8>, PlyError> {
    let colors: Option<Vec<[u8; 3]>> = match color_by {
        ColorBy::Labels => {
            let labels = cloud.labels().ok_or(PlyError::MissingLabels)?;
            Some(
                labels
                    .iter()
                    .map(|&l| {
                        if l == UNLABELED {
                            Ok(UNLABELED_COLOR)
                        } else {
                            LABEL_PALETTE
                                .get(l as usize)
                                .copied()
                                .ok_or(PlyError::PaletteTooSmall(l))
                        }
                    })
                    .collect::<Result<_, _>>()?,
            )
        }
        ColorBy::Rgb => cloud.colors().map(|c| {
            c.iter()
                .map(|rgb| rgb.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
                .collect()
        }),
    };
    let labels = cloud.labels();
    let intensity = cloud.intensity();

    let mut out = Vec::with_capacity(cloud.len() * 20 + 256);
    let format_name = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    write!(out, "ply\nformat {format_name} 1.0\nelement vertex {}\n", cloud.len())?;
    out.extend_from_slice(b"property float x\nproperty float y\nproperty float z\n");
    if colors.is_some() {
        out.extend_from_slice(b"property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    if intensity.is_some() {
        out.extend_from_slice(b"property float intensity\n");
    }
    if labels.is_some() {
        out.extend_from_slice(b"property int label\n");
    }
    out.extend_from_slice(b"end_header\n");

    let label_value = |l: u32| if l == UNLABELED { -1 } else { l as i32 };
    for (i, p) in cloud.positions().iter().enumerate() {
        match format {
            PlyFormat::Ascii => {
                write!(out, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32)?;
                if let Some(c) = &colors {
                    write!(out, " {} {} {}", c[i][0], c[i][1], c[i][2])?;
                }
                if let Some(v) = intensity {
                    write!(out, " {}", v[i] as f32)?;
                }
                if let Some(l) = labels {
                    write!(out, " {}", label_value(l[i]))?;
                }
                out.push(b'\n');
            }
            PlyFormat::BinaryLittleEndian => {
                for c in p {
                    out.write_f32::<LittleEndian>(*c as f32)?;
                }
                if let Some(c) = &colors {
                    out.extend_from_slice(&c[i]);
                }
                if let Some(v) = intensity {
                    out.write_f32::<LittleEndian>(v[i] as f32)?;
                }
                if let Some(l) = labels {
                    out.write_i32::<LittleEndian>(label_value(l[i]))?;
                }
            }
        }
    }
    Ok(out)
}

/// Write a cloud as binary little-endian PLY.
pub fn write_ply(cloud: &PointCloud, path: impl AsRef<Path>, color_by: ColorBy) -> Result<(), PlyError> {
    write_ply_with_format(cloud, path, color_by, PlyFormat::BinaryLittleEndian)
}

pub fn write_ply_with_format(
    cloud: &PointCloud,
    path: impl AsRef<Path>,
    color_by: ColorBy,
    format: PlyFormat,
) -> Result<(), PlyError> {
    let bytes = encode_ply(cloud, color_by, format)?;
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 0 0\n0 1 0.5\n";

    #[test]
    fn minimal_ascii() {
        let cloud = parse_ply(MINIMAL.as_bytes()).unwrap();
        assert_eq!(cloud.len(), 3);
        assert!(cloud.colors().is_none());
        assert_eq!(cloud.positions()[2], [0.0, 1.0, 0.5]);
    }

    #[test]
    fn uchar_colors_are_normalized() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty double x\nproperty double y\nproperty double z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nproperty int label\nend_header\n1 2 3 255 0 0 4\n";
        let cloud = parse_ply(text.as_bytes()).unwrap();
        assert_eq!(cloud.colors().unwrap()[0], [1.0, 0.0, 0.0]);
        assert_eq!(cloud.labels().unwrap()[0], 4);
    }

    #[test]
    fn negative_label_is_unlabeled() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty int label\nend_header\n0 0 0 -1\n";
        let cloud = parse_ply(text.as_bytes()).unwrap();
        assert_eq!(cloud.labels().unwrap()[0], UNLABELED);
    }

    #[test]
    fn skips_faces_and_unknown_properties() {
        let text = "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 2\nproperty float x\nproperty float nx\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n1 9 2 3\n4 9 5 6\n3 0 1 1\n";
        let cloud = parse_ply(text.as_bytes()).unwrap();
        assert_eq!(cloud.positions(), &[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
    }

    #[test]
    fn header_errors_name_the_line() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty quad x\nend_header\n";
        match parse_ply(text.as_bytes()) {
            Err(PlyError::Header { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        let big = "ply\nformat binary_big_endian 1.0\nend_header\n";
        assert!(matches!(parse_ply(big.as_bytes()), Err(PlyError::Header { line: 2, .. })));
        assert!(matches!(parse_ply(b"ply\nformat ascii 1.0\n"), Err(PlyError::Header { .. })));
    }

    #[test]
    fn truncated_binary_names_offset() {
        let cloud = PointCloud::new(vec![[1.0, 2.0, 3.0]; 4]).unwrap();
        let mut bytes = encode_ply(&cloud, ColorBy::Rgb, PlyFormat::BinaryLittleEndian).unwrap();
        let full = bytes.len();
        bytes.truncate(full - 5);
        match parse_ply(&bytes) {
            Err(PlyError::Truncated { offset, .. }) => assert_eq!(offset, full - 8),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ascii_body_errors_name_the_line() {
        let text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n0 zero 0\n";
        assert!(matches!(
            parse_ply(text.as_bytes()),
            Err(PlyError::AsciiBody { line: 9, .. })
        ));
    }

    #[test]
    fn empty_cloud_is_valid() {
        let cloud = PointCloud::new(vec![]).unwrap().with_labels(vec![]).unwrap();
        for format in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
            let bytes = encode_ply(&cloud, ColorBy::Labels, format).unwrap();
            assert!(String::from_utf8_lossy(&bytes).contains("element vertex 0"));
            assert_eq!(parse_ply(&bytes).unwrap().len(), 0);
        }
    }

    #[test]
    fn label_colors_are_distinct() {
        let cloud = PointCloud::new(vec![[0.0; 3]; 2])
            .unwrap()
            .with_labels(vec![0, 1])
            .unwrap();
        let bytes = encode_ply(&cloud, ColorBy::Labels, PlyFormat::BinaryLittleEndian).unwrap();
        let back = parse_ply(&bytes).unwrap();
        let c = back.colors().unwrap();
        assert_ne!(c[0], c[1]);
        assert_eq!(back.labels().unwrap(), &[0, 1]);
    }

    #[test]
    fn label_colorize_requires_labels() {
        let cloud = PointCloud::new(vec![[0.0; 3]]).unwrap();
        assert!(matches!(
            encode_ply(&cloud, ColorBy::Labels, PlyFormat::Ascii),
            Err(PlyError::MissingLabels)
        ));
    }
}
