//! Dense row-major `f64` tensors and NPY v1.0 file I/O.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Dense row-major array of finite `f64` values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    /// Builds a tensor, checking that the shape covers the data and that every
    /// value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Self { shape, data })
    }

    /// Crate-internal constructor for values produced by kernels that already
    /// guarantee the invariants.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![], vec![value])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![rows.len(), m], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a scalar (or single-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// `[rows, cols]` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// Sub-tensor at index `i` of the leading axis.
    pub fn index_axis0(&self, i: usize) -> Result<Self> {
        let Some((&lead, rest)) = self.shape.split_first() else {
            return Err(Error::Shape("cannot index a scalar".into()));
        };
        if i >= lead {
            return Err(Error::Shape(format!("index {i} out of range {lead}")));
        }
        let stride: usize = rest.iter().product();
        Ok(Self::from_parts(
            rest.to_vec(),
            self.data[i * stride..(i + 1) * stride].to_vec(),
        ))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Collapses every trailing axis: `[B, ...] -> [B, M]` with `M` the product of
/// the trailing extents.
pub fn flatten_batch(t: &Tensor) -> Result<Tensor> {
    if t.rank() < 2 {
        return Err(Error::Shape(format!(
            "flatten_batch needs rank >= 2, got shape {:?}",
            t.shape()
        )));
    }
    let b = t.shape()[0];
    let m = t.shape()[1..].iter().product();
    t.reshape(&[b, m])
}

/// Scales every row of a `[B, M]` matrix to unit Euclidean norm. A row with
/// norm at or below `1e-12` is an error.
pub fn l2_normalize_rows(m: &Tensor) -> Result<Tensor> {
    let (rows, cols) = m.dims2()?;
    let mut out = m.data().to_vec();
    if cols == 0 {
        return Ok(Tensor::from_parts(vec![rows, 0], out));
    }
    for (i, row) in out.chunks_mut(cols).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 {
            return Err(Error::Degenerate(format!("row {i} has zero norm")));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(Tensor::from_parts(vec![rows, cols], out))
}

const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";

/// Serialises `t` as NPY v1.0 (`'<f8'`, C order). The preamble is padded with
/// spaces so that magic + lengths + header is a multiple of 64 bytes.
pub fn encode_npy(t: &Tensor) -> Vec<u8> {
    let shape = match t.shape() {
        [] => "()".to_string(),
        [d] => format!("({d},)"),
        dims => format!(
            "({})",
            dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {shape}, }}");
    let unpadded = NPY_MAGIC.len() + 2 + 2 + header.len() + 1;
    let total = unpadded.div_ceil(64) * 64;
    header.push_str(&" ".repeat(total - unpadded));
    header.push('\n');

    let mut out = Vec::with_capacity(total + 8 * t.len());
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    F8,
    F4,
}

/// Parses an NPY v1.0 byte buffer; `'<f4'` payloads are widened to `f64`.
pub fn decode_npy(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if bytes[6] != 1 || bytes[7] != 0 {
        return Err(Error::Format(format!(
            "unsupported version {}.{}",
            bytes[6], bytes[7]
        )));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let start = 10 + header_len;
    if bytes.len() < start {
        return Err(Error::Format("truncated header".into()));
    }
    let header = std::str::from_utf8(&bytes[10..start])
        .map_err(|_| Error::Format("header is not ASCII".into()))?;
    let (dtype, shape) = parse_header(header)?;

    let payload = &bytes[start..];
    let count: usize = shape.iter().product();
    let width = match dtype {
        Dtype::F8 => 8,
        Dtype::F4 => 4,
    };
    if payload.len() != count * width {
        return Err(Error::Corrupt(format!(
            "header shape {shape:?} needs {} payload bytes, found {}",
            count * width,
            payload.len()
        )));
    }
    let data: Vec<f64> = match dtype {
        Dtype::F8 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F4 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Tensor::new(shape, data)
}

fn dict_value<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let needle = format!("'{key}':");
    let at = header
        .find(&needle)
        .ok_or_else(|| Error::Format(format!("header lacks key {key:?}")))?;
    Ok(header[at + needle.len()..].trim_start())
}

fn parse_header(header: &str) -> Result<(Dtype, Vec<usize>)> {
    let header = header.trim_end();
    if !header.starts_with('{') || !header.ends_with('}') {
        return Err(Error::Format("header is not a dict literal".into()));
    }

    let descr = dict_value(header, "descr")?;
    let descr = descr
        .strip_prefix('\'')
        .and_then(|s| s.split('\'').next())
        .ok_or_else(|| Error::Format("descr is not a string".into()))?;
    let dtype = match descr {
        "<f8" => Dtype::F8,
        "<f4" => Dtype::F4,
        other => return Err(Error::UnsupportedDtype(other.to_string())),
    };

    let fortran = dict_value(header, "fortran_order")?;
    if fortran.starts_with("True") {
        return Err(Error::Format("fortran_order=True is not supported".into()));
    }
    if !fortran.starts_with("False") {
        return Err(Error::Format("fortran_order is not a bool".into()));
    }

    let shape_src = dict_value(header, "shape")?;
    let body = shape_src
        .strip_prefix('(')
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| Error::Format("shape is not a tuple".into()))?;
    let shape = body
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad shape entry {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((dtype, shape))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_npy(&bytes)
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_npy(t)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(matches!(Tensor::new(vec![2, 3], vec![0.0; 5]), Err(Error::Shape(_))));
        assert!(matches!(
            Tensor::new(vec![2], vec![0.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn decodes_hand_written_file() {
        let header = "{'descr': '<f8', 'fortran_order': False, 'shape': (2, 3), }";
        let mut bytes = NPY_MAGIC.to_vec();
        bytes.extend_from_slice(&[1, 0]);
        let padded = format!("{header:<53}\n");
        bytes.extend_from_slice(&(padded.len() as u16).to_le_bytes());
        bytes.extend_from_slice(padded.as_bytes());
        for v in 0..6 {
            bytes.extend_from_slice(&(v as f64).to_le_bytes());
        }
        let x = decode_npy(&bytes).unwrap();
        assert_eq!(x.shape(), &[2, 3]);
        assert_eq!(x.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn scalar_vector_file_layout() {
        let bytes = encode_npy(&t(&[1], &[3.5]));
        assert_eq!(bytes.len(), 128 + 8);
        assert_eq!(&bytes[..8], b"\x93NUMPY\x01\x00");
        assert_eq!(u16::from_le_bytes([bytes[8], bytes[9]]), 118);
        assert_eq!(bytes[127], b'\n');
        assert_eq!(&bytes[128..], &3.5f64.to_le_bytes());
        let header = std::str::from_utf8(&bytes[10..128]).unwrap();
        assert!(header.starts_with("{'descr': '<f8', 'fortran_order': False, 'shape': (1,), }"));
    }

    #[test]
    fn empty_extent_round_trips() {
        let e = Tensor::new(vec![0, 3], vec![]).unwrap();
        let bytes = encode_npy(&e);
        assert_eq!(bytes.len() % 64, 0);
        assert_eq!(decode_npy(&bytes).unwrap(), e);
    }

    #[test]
    fn identity_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("eye.npy");
        save_tensor(&Tensor::identity(3), &p).unwrap();
        assert_eq!(load_tensor(&p).unwrap(), Tensor::identity(3));
    }

    #[test]
    fn rejects_corrupted_files() {
        let mut bytes = encode_npy(&t(&[2, 3], &[0.0; 6]));
        bytes.truncate(bytes.len() - 8);
        assert!(matches!(decode_npy(&bytes), Err(Error::Corrupt(_))));

        let mut bad_magic = encode_npy(&t(&[1], &[1.0]));
        bad_magic[1] = b'X';
        assert!(matches!(decode_npy(&bad_magic), Err(Error::Format(_))));

        let patch = |from: &str, to: &str| {
            let mut b = encode_npy(&t(&[1], &[1.0]));
            let at = b.windows(from.len()).position(|w| w == from.as_bytes()).unwrap();
            b[at..at + to.len()].copy_from_slice(to.as_bytes());
            b
        };
        assert!(matches!(
            decode_npy(&patch("<f8", "<i8")),
            Err(Error::UnsupportedDtype(d)) if d == "<i8"
        ));
        assert!(matches!(decode_npy(&patch("False", "True ")), Err(Error::Format(_))));
    }

    #[test]
    fn widens_f32_payloads() {
        let header = "{'descr': '<f4', 'fortran_order': False, 'shape': (3,), }";
        let padded = format!("{header:<117}\n");
        let mut bytes = NPY_MAGIC.to_vec();
        bytes.extend_from_slice(&[1, 0]);
        bytes.extend_from_slice(&(padded.len() as u16).to_le_bytes());
        bytes.extend_from_slice(padded.as_bytes());
        for v in [0.5f32, -1.25, 3.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(decode_npy(&bytes).unwrap().data(), &[0.5, -1.25, 3.0]);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_tensor("/nonexistent/x.npy"), Err(Error::Io { .. })));
        assert!(matches!(
            save_tensor(&Tensor::scalar(1.0), "/nonexistent/dir/x.npy"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn flatten_batch_cases() {
        let x = t(&[2, 2, 2], &[0., 1., 2., 3., 4., 5., 6., 7.]);
        let f = flatten_batch(&x).unwrap();
        assert_eq!(f.shape(), &[2, 4]);
        assert_eq!(f.data(), x.data());
        let m = t(&[2, 3], &[1.0; 6]);
        assert_eq!(flatten_batch(&m).unwrap(), m);
        assert!(matches!(flatten_batch(&t(&[3], &[1.0; 3])), Err(Error::Shape(_))));
    }

    #[test]
    fn l2_normalize_cases() {
        let r = l2_normalize_rows(&t(&[1, 2], &[3.0, 4.0])).unwrap();
        assert!((r.data()[0] - 0.6).abs() < 1e-15 && (r.data()[1] - 0.8).abs() < 1e-15);
        let unit = t(&[1, 2], &[0.6, 0.8]);
        assert!(l2_normalize_rows(&unit).unwrap().max_abs_diff(&unit) < 1e-15);
        assert!(matches!(
            l2_normalize_rows(&t(&[1, 2], &[0.0, 0.0])),
            Err(Error::Degenerate(_))
        ));
    }

    fn matrix() -> impl Strategy<Value = Tensor> {
        (1usize..6, 1usize..7).prop_flat_map(|(r, c)| {
            prop::collection::vec(-1e3f64..1e3, r * c)
                .prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn npy_round_trip_is_bit_exact(x in matrix()) {
            let back = decode_npy(&encode_npy(&x)).unwrap();
            prop_assert_eq!(back.shape(), x.shape());
            let same = back.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }

        #[test]
        fn l2_normalize_idempotent_and_scale_free(x in matrix(), c in 1e-3f64..1e3) {
            prop_assume!(x.data().chunks(x.shape()[1]).all(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt() > 1e-6));
            let once = l2_normalize_rows(&x).unwrap();
            let twice = l2_normalize_rows(&once).unwrap();
            prop_assert!(once.max_abs_diff(&twice) < 1e-14);
            for row in once.data().chunks(x.shape()[1]) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-12);
            }
            let scaled = l2_normalize_rows(&x.map(|v| v * c)).unwrap();
            prop_assert!(scaled.max_abs_diff(&once) < 1e-12);
        }
    }
}
