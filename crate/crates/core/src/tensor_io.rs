//! Dense voxel grids and NPY v1.0 tensor files.
//!
//! Scalars are stored row-major (C order). Float tensors use `<f4`, label and
//! mask grids use `|u1`. Headers are written exactly the way numpy writes
//! them, so a file produced by `numpy.save` loads and re-saves byte-for-byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ARRAY_ALIGN: usize = 64;
/// numpy reserves room so the leading axis can grow in place.
const GROWTH_AXIS_MAX_DIGITS: usize = 21;

/// A dense 3D (W, H, L) or 4D (W, H, L, K) grid of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl VoxelGrid {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let count = checked_count(shape)?;
        if shape.len() != 3 && shape.len() != 4 {
            return Err(Error::Shape(format!(
                "voxel grids are 3D or 4D, got shape {shape:?}"
            )));
        }
        if data.len() != count {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {count} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let count = checked_count(shape)?;
        Self::new(shape, vec![0.0; count])
    }

    pub fn filled(shape: &[usize], value: f32) -> Result<Self> {
        let count = checked_count(shape)?;
        Self::new(shape, vec![value; count])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// The spatial (W, H, L) part of the shape.
    pub fn dims(&self) -> [usize; 3] {
        [self.shape[0], self.shape[1], self.shape[2]]
    }

    /// Channel count; 1 for a plain 3D grid.
    pub fn channels(&self) -> usize {
        self.shape.get(3).copied().unwrap_or(1)
    }

    pub fn voxel_count(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Channel values of one voxel, addressed by linear voxel index.
    pub fn voxel(&self, index: usize) -> &[f32] {
        let k = self.channels();
        &self.data[index * k..(index + 1) * k]
    }
}

/// Integer class map over (W, H, L) with values below `num_classes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    dims: [usize; 3],
    num_classes: usize,
    data: Vec<u8>,
}

impl LabelGrid {
    pub fn new(dims: [usize; 3], num_classes: usize, data: Vec<u8>) -> Result<Self> {
        let count = checked_count(&dims)?;
        if data.len() != count {
            return Err(Error::Shape(format!(
                "label dims {dims:?} need {count} values, got {}",
                data.len()
            )));
        }
        if !(1..=256).contains(&num_classes) {
            return Err(Error::Contract(format!(
                "class count {num_classes} outside 1..=256"
            )));
        }
        if let Some(bad) = data.iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::Contract(format!(
                "label {bad} is not a valid class index below {num_classes}"
            )));
        }
        Ok(Self {
            dims,
            num_classes,
            data,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn voxel_count(&self) -> usize {
        self.data.len()
    }
}

fn checked_count(shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(Error::Shape(format!(
            "shape {shape:?} has a zero-length axis"
        )));
    }
    shape
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
        .filter(|&n| n <= u32::MAX as u64)
        .map(|n| n as usize)
        .ok_or_else(|| Error::Shape(format!("shape {shape:?} exceeds 2^32 elements")))
}

/// Element type of an NPY payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    fn descr(self) -> &'static str {
        match self {
            Dtype::F32 => "<f4",
            Dtype::U8 => "|u1",
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }

    fn from_descr(descr: &str) -> Result<Self> {
        match descr {
            "<f4" => Ok(Dtype::F32),
            "|u1" | "<u1" | ">u1" => Ok(Dtype::U8),
            other => Err(Error::UnsupportedEncoding(format!(
                "dtype '{other}' (expected '<f4' or '|u1')"
            ))),
        }
    }
}

/// Raw contents of an NPY file: shape plus untyped little-endian payload.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub payload: Vec<u8>,
}

/// Builds the complete numpy-compatible preamble (magic, version, length, header).
pub fn npy_header(dtype: Dtype, shape: &[usize]) -> Vec<u8> {
    let shape_repr = match shape {
        [single] => format!("({single},)"),
        dims => format!(
            "({})",
            dims.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {shape_repr}, }}",
        dtype.descr()
    );
    if let Some(first) = shape.first() {
        let digits = first.to_string().len();
        dict.push_str(&" ".repeat(GROWTH_AXIS_MAX_DIGITS.saturating_sub(digits)));
    }
    let hlen = dict.len() + 1;
    let padlen = ARRAY_ALIGN - ((MAGIC.len() + 2 + 2 + hlen) % ARRAY_ALIGN);
    let total = (hlen + padlen) as u16;

    let mut out = Vec::with_capacity(10 + hlen + padlen);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&total.to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.extend(std::iter::repeat_n(b' ', padlen));
    out.push(b'\n');
    out
}

pub fn write_npy<W: Write>(writer: &mut W, array: &NpyArray) -> std::io::Result<()> {
    writer.write_all(&npy_header(array.dtype, &array.shape))?;
    writer.write_all(&array.payload)
}

pub fn read_npy<R: Read>(reader: &mut R) -> Result<NpyArray> {
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("read failed: {e}")))?;
    parse_npy(&bytes)
}

pub fn parse_npy(bytes: &[u8]) -> Result<NpyArray> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::Format("missing NPY magic".into()));
    }
    let (header_start, header_len) = match (bytes[6], bytes[7]) {
        (1, 0) => (10, u16::from_le_bytes([bytes[8], bytes[9]]) as usize),
        (2, 0) | (3, 0) => {
            if bytes.len() < 12 {
                return Err(Error::Format("truncated NPY preamble".into()));
            }
            let len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
            (12, len as usize)
        }
        (major, minor) => {
            return Err(Error::Format(format!(
                "unsupported NPY version {major}.{minor}"
            )))
        }
    };
    let payload_start = header_start + header_len;
    if bytes.len() < payload_start {
        return Err(Error::Format("header runs past end of file".into()));
    }
    let header = std::str::from_utf8(&bytes[header_start..payload_start])
        .map_err(|_| Error::Format("header is not ASCII".into()))?;
    let (dtype, fortran_order, shape) = parse_header_dict(header)?;
    if fortran_order {
        return Err(Error::UnsupportedEncoding(
            "Fortran-order payloads are not supported".into(),
        ));
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Corruption(format!("shape {shape:?} overflows")))?;
    let expected = count * dtype.size();
    let payload = &bytes[payload_start..];
    if payload.len() != expected {
        return Err(Error::Corruption(format!(
            "shape {shape:?} needs {expected} payload bytes, found {}",
            payload.len()
        )));
    }
    Ok(NpyArray {
        shape,
        dtype,
        payload: payload.to_vec(),
    })
}

fn parse_header_dict(header: &str) -> Result<(Dtype, bool, Vec<usize>)> {
    let body = header.trim();
    let body = body
        .strip_prefix('{')
        .and_then(|b| b.strip_suffix('}'))
        .ok_or_else(|| Error::Format(format!("header is not a dict: {body:?}")))?;

    let descr = dict_value(body, "descr")?;
    let descr = descr
        .trim()
        .trim_matches(|c| c == '\'' || c == '"')
        .to_string();
    let dtype = Dtype::from_descr(&descr)?;

    let fortran = match dict_value(body, "fortran_order")?.trim() {
        "False" => false,
        "True" => true,
        other => {
            return Err(Error::Format(format!(
                "fortran_order must be True or False, got {other:?}"
            )))
        }
    };

    let shape_src = dict_value(body, "shape")?;
    let inner = shape_src
        .trim()
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| Error::Format(format!("shape is not a tuple: {shape_src:?}")))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim_end_matches('L')
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("bad shape entry {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((dtype, fortran, shape))
}

/// Extracts the raw text of one value from a flat Python dict literal.
fn dict_value<'a>(body: &'a str, key: &str) -> Result<&'a str> {
    let needle_single = format!("'{key}'");
    let needle_double = format!("\"{key}\"");
    let pos = body
        .find(&needle_single)
        .or_else(|| body.find(&needle_double))
        .ok_or_else(|| Error::Format(format!("header lacks key '{key}'")))?;
    let rest = &body[pos + key.len() + 2..];
    let rest = rest
        .trim_start()
        .strip_prefix(':')
        .ok_or_else(|| Error::Format(format!("no ':' after '{key}'")))?;
    // values never contain nested dicts; tuples are the only bracketed form
    let mut depth = 0i32;
    for (i, c) in rest.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => return Ok(&rest[..i]),
            _ => {}
        }
    }
    Ok(rest)
}

fn read_file(path: &Path) -> Result<NpyArray> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    parse_npy(&bytes)
}

fn write_file(path: &Path, array: &NpyArray) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    write_npy(&mut writer, array).map_err(|e| Error::io(path, e))?;
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    let array = read_file(path.as_ref())?;
    if array.dtype != Dtype::F32 {
        return Err(Error::UnsupportedEncoding(format!(
            "expected '<f4' tensor, found '{}'",
            array.dtype.descr()
        )));
    }
    let data = array
        .payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    VoxelGrid::new(&array.shape, data)
}

pub fn save_tensor(grid: &VoxelGrid, path: impl AsRef<Path>) -> Result<()> {
    let payload = grid.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_file(
        path.as_ref(),
        &NpyArray {
            shape: grid.shape.clone(),
            dtype: Dtype::F32,
            payload,
        },
    )
}

/// Loads an `<f4` array of any rank (model weights, for example).
pub fn load_f32_array(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f32>)> {
    let array = read_file(path.as_ref())?;
    if array.dtype != Dtype::F32 {
        return Err(Error::UnsupportedEncoding(format!(
            "expected '<f4' array, found '{}'",
            array.dtype.descr()
        )));
    }
    let data: Vec<f32> = array
        .payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("array contains non-finite values".into()));
    }
    Ok((array.shape, data))
}

pub fn save_f32_array(shape: &[usize], data: &[f32], path: impl AsRef<Path>) -> Result<()> {
    if checked_count(shape)? != data.len() {
        return Err(Error::Shape(format!(
            "shape {shape:?} does not hold {} values",
            data.len()
        )));
    }
    write_file(
        path.as_ref(),
        &NpyArray {
            shape: shape.to_vec(),
            dtype: Dtype::F32,
            payload: data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        },
    )
}

/// Loads a raw `|u1` grid without class validation (masks, label maps).
pub fn load_u8_grid(path: impl AsRef<Path>) -> Result<([usize; 3], Vec<u8>)> {
    let array = read_file(path.as_ref())?;
    if array.dtype != Dtype::U8 {
        return Err(Error::UnsupportedEncoding(format!(
            "expected '|u1' grid, found '{}'",
            array.dtype.descr()
        )));
    }
    match array.shape[..] {
        [w, h, l] => Ok(([w, h, l], array.payload)),
        _ => Err(Error::Shape(format!(
            "u8 grids are 3D, got shape {:?}",
            array.shape
        ))),
    }
}

pub fn save_u8_grid(dims: [usize; 3], data: &[u8], path: impl AsRef<Path>) -> Result<()> {
    write_file(
        path.as_ref(),
        &NpyArray {
            shape: dims.to_vec(),
            dtype: Dtype::U8,
            payload: data.to_vec(),
        },
    )
}

pub fn load_labels(path: impl AsRef<Path>, num_classes: usize) -> Result<LabelGrid> {
    let (dims, data) = load_u8_grid(path)?;
    LabelGrid::new(dims, num_classes, data)
}

pub fn save_labels(labels: &LabelGrid, path: impl AsRef<Path>) -> Result<()> {
    save_u8_grid(labels.dims, &labels.data, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_matches_numpy_layout() {
        let header = npy_header(Dtype::F32, &[2, 2, 2]);
        assert_eq!(header.len(), 128);
        assert_eq!(header.len() % ARRAY_ALIGN, 0);
        assert_eq!(*header.last().unwrap(), b'\n');
        let text = std::str::from_utf8(&header[10..]).unwrap();
        assert!(text.starts_with("{'descr': '<f4', 'fortran_order': False, 'shape': (2, 2, 2), }"));

        let one_d = npy_header(Dtype::U8, &[8]);
        let text = std::str::from_utf8(&one_d[10..]).unwrap();
        assert!(text.contains("'shape': (8,)"));
        assert!(text.contains("'|u1'"));
    }

    #[test]
    fn zero_grid_payload_is_256_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.npy");
        save_tensor(&VoxelGrid::zeros(&[4, 4, 4]).unwrap(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        let payload = &bytes[10 + header_len..];
        assert_eq!(payload.len(), 256);
        assert!(payload.iter().all(|&b| b == 0));
    }

    #[test]
    fn small_grid_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.npy");
        let grid = VoxelGrid::new(&[2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        save_tensor(&grid, &path).unwrap();
        let back = load_tensor(&path).unwrap();
        assert_eq!(back, grid);
        assert_eq!(back.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn truncated_payload_is_corruption() {
        let mut bytes = npy_header(Dtype::F32, &[2, 2, 2]);
        bytes.extend(std::iter::repeat_n(0u8, 28));
        assert!(matches!(parse_npy(&bytes), Err(Error::Corruption(_))));
    }

    #[test]
    fn bad_magic_and_encodings() {
        assert!(matches!(
            parse_npy(b"NOTNPY\x01\x00\x00\x00"),
            Err(Error::Format(_))
        ));

        let patch = |from: &[u8], to: &[u8], payload: usize| {
            let mut bytes = npy_header(Dtype::F32, &[1, 1, 1]);
            let at = bytes.windows(from.len()).position(|w| w == from).unwrap();
            bytes[at..at + from.len()].copy_from_slice(to);
            bytes.extend(std::iter::repeat_n(0u8, payload));
            bytes
        };
        let f8 = patch(b"<f4", b"<f8", 8);
        assert!(matches!(parse_npy(&f8), Err(Error::UnsupportedEncoding(_))));

        let fortran = patch(b"False", b"True ", 4);
        assert!(matches!(
            parse_npy(&fortran),
            Err(Error::UnsupportedEncoding(_))
        ));
    }

    #[test]
    fn non_finite_rejected_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.npy");
        let mut bytes = npy_header(Dtype::F32, &[1, 1, 2]);
        bytes.extend(1.0f32.to_le_bytes());
        bytes.extend(f32::NAN.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_tensor(&path), Err(Error::Domain(_))));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let grid = VoxelGrid::zeros(&[1, 1, 1]).unwrap();
        let err = save_tensor(&grid, "/nonexistent-dir/x/y.npy").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn oversized_shapes_rejected() {
        assert!(matches!(
            VoxelGrid::zeros(&[1 << 12, 1 << 12, 1 << 12]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(VoxelGrid::zeros(&[2, 0, 2]), Err(Error::Shape(_))));
        assert!(matches!(VoxelGrid::zeros(&[2, 2]), Err(Error::Shape(_))));
    }

    #[test]
    fn label_values_validated() {
        assert!(LabelGrid::new([1, 1, 2], 2, vec![0, 1]).is_ok());
        assert!(matches!(
            LabelGrid::new([1, 1, 2], 2, vec![0, 2]),
            Err(Error::Contract(_))
        ));
    }
}
