//! Binary field format and CSV export.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "SFPF"            4 bytes
//! version           u32
//! kind              u8   0 = real scalar, 1 = complex vector, 2 = complex matrix
//! n                 u32
//! dims              n x u32
//! spacing           n x f64
//! origin            n x f64
//! r, s              u32, u32
//! payload           f64 per word, node-major; complex entries as (re, im),
//!                   matrices row-major (s rows, r columns)
//! ```
//!
//! Header size is `4 + 4 + 1 + 4 + 4n + 16n + 8 = 21 + 20n` bytes.

use super::{CVector, ExtReal, Field, FieldError, FieldValue, Grid};
use crate::linalg::CMatrix;
use std::fs;
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"SFPF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementKind {
    RealScalar = 0,
    ComplexVector = 1,
    ComplexMatrix = 2,
}

impl ElementKind {
    fn from_tag(tag: u8) -> Result<Self, FieldError> {
        match tag {
            0 => Ok(ElementKind::RealScalar),
            1 => Ok(ElementKind::ComplexVector),
            2 => Ok(ElementKind::ComplexMatrix),
            t => Err(FieldError::Malformed(format!("unknown element kind {t}"))),
        }
    }
}

/// A field of whichever kind a file holds.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyField {
    Scalar(Field<f64>),
    Vector(Field<CVector>),
    Matrix(Field<CMatrix>),
}

struct Raw {
    kind: ElementKind,
    grid: Grid,
    shape: (usize, usize),
    words: Vec<f64>,
}

fn encode(kind: ElementKind, grid: &Grid, shape: (usize, usize), words: &[f64]) -> Vec<u8> {
    let n = grid.ndim();
    let mut buf = Vec::with_capacity(21 + 20 * n + 8 * words.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(kind as u8);
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    for &d in grid.dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &h in grid.spacing() {
        buf.extend_from_slice(&h.to_le_bytes());
    }
    for &o in grid.origin() {
        buf.extend_from_slice(&o.to_le_bytes());
    }
    buf.extend_from_slice(&(shape.0 as u32).to_le_bytes());
    buf.extend_from_slice(&(shape.1 as u32).to_le_bytes());
    for w in words {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8], FieldError> {
        let end = self.pos.checked_add(k).ok_or(FieldError::DimensionOverflow)?;
        if end > self.bytes.len() {
            return Err(FieldError::Truncated { expected: end, found: self.bytes.len() });
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, FieldError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, FieldError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode(bytes: &[u8]) -> Result<Raw, FieldError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4).map_err(|_| FieldError::Malformed("file shorter than the magic".into()))? != MAGIC {
        return Err(FieldError::Malformed("bad magic".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(FieldError::Malformed(format!("unsupported version {version}")));
    }
    let kind = ElementKind::from_tag(c.take(1)?[0])?;
    let n = c.u32()? as usize;
    if n == 0 || n > 16 {
        return Err(FieldError::Malformed(format!("implausible dimension n = {n}")));
    }
    let dims = (0..n).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
    let spacing = (0..n).map(|_| c.f64()).collect::<Result<Vec<_>, _>>()?;
    let origin = (0..n).map(|_| c.f64()).collect::<Result<Vec<_>, _>>()?;
    let r = c.u32()? as usize;
    let s = c.u32()? as usize;
    let grid = Grid::new(origin, spacing, dims)?;
    let per_node = match kind {
        ElementKind::RealScalar if (r, s) == (1, 1) => 1,
        ElementKind::ComplexVector if s == 1 && r >= 1 => 2 * r,
        ElementKind::ComplexMatrix if r >= 1 && s >= 1 => {
            r.checked_mul(s).and_then(|k| k.checked_mul(2)).ok_or(FieldError::DimensionOverflow)?
        }
        _ => return Err(FieldError::Malformed(format!("payload shape ({r}, {s}) invalid for {kind:?}"))),
    };
    let count = grid.len().checked_mul(per_node).ok_or(FieldError::DimensionOverflow)?;
    let payload_bytes = count.checked_mul(8).ok_or(FieldError::DimensionOverflow)?;
    let rest = bytes.len() - c.pos;
    if rest != payload_bytes {
        if rest < payload_bytes {
            return Err(FieldError::Truncated { expected: c.pos + payload_bytes, found: bytes.len() });
        }
        return Err(FieldError::Malformed(format!("{} trailing bytes after payload", rest - payload_bytes)));
    }
    let words = (0..count).map(|_| c.f64()).collect::<Result<Vec<_>, _>>()?;
    Ok(Raw { kind, grid, shape: (r, s), words })
}

fn into_field<V: FieldValue>(raw: Raw) -> Result<Field<V>, FieldError> {
    if raw.kind != V::KIND {
        return Err(FieldError::KindMismatch { expected: V::KIND, found: raw.kind });
    }
    let w = V::words(raw.shape);
    let values = raw.words.chunks_exact(w).map(|chunk| V::from_f64s(raw.shape, chunk)).collect();
    Field::new(raw.grid, values)
}

fn field_words<V: FieldValue>(field: &Field<V>) -> Vec<f64> {
    let mut words = Vec::with_capacity(field.grid().len() * V::words(field.value_shape()));
    for v in field.values() {
        v.push_f64s(&mut words);
    }
    words
}

/// Serialise a field to bytes.
pub fn to_bytes<V: FieldValue>(field: &Field<V>) -> Vec<u8> {
    encode(V::KIND, field.grid(), field.value_shape(), &field_words(field))
}

/// Parse a field of a known kind from bytes.
pub fn from_bytes<V: FieldValue>(bytes: &[u8]) -> Result<Field<V>, FieldError> {
    into_field(decode(bytes)?)
}

pub fn save_field<V: FieldValue>(field: &Field<V>, path: impl AsRef<Path>) -> Result<(), FieldError> {
    let mut file = fs::File::create(path)?;
    file.write_all(&to_bytes(field))?;
    Ok(())
}

pub fn load_field<V: FieldValue>(path: impl AsRef<Path>) -> Result<Field<V>, FieldError> {
    from_bytes(&fs::read(path)?)
}

pub fn load_any_field(path: impl AsRef<Path>) -> Result<AnyField, FieldError> {
    let raw = decode(&fs::read(path)?)?;
    Ok(match raw.kind {
        ElementKind::RealScalar => AnyField::Scalar(into_field(raw)?),
        ElementKind::ComplexVector => AnyField::Vector(into_field(raw)?),
        ElementKind::ComplexMatrix => AnyField::Matrix(into_field(raw)?),
    })
}

/// Scalar file whose entries may be `+inf` (distance fields).
pub fn save_extended(grid: &Grid, values: &[ExtReal], path: impl AsRef<Path>) -> Result<(), FieldError> {
    if values.len() != grid.len() {
        return Err(FieldError::Shape(format!("{} values for {} nodes", values.len(), grid.len())));
    }
    let words: Vec<f64> = values.iter().map(ExtReal::to_f64).collect();
    let mut file = fs::File::create(path)?;
    file.write_all(&encode(ElementKind::RealScalar, grid, (1, 1), &words))?;
    Ok(())
}

pub fn load_extended(path: impl AsRef<Path>) -> Result<(Grid, Vec<ExtReal>), FieldError> {
    let raw = decode(&fs::read(path)?)?;
    if raw.kind != ElementKind::RealScalar {
        return Err(FieldError::KindMismatch { expected: ElementKind::RealScalar, found: raw.kind });
    }
    let values = raw
        .words
        .iter()
        .map(|&w| {
            if w == f64::INFINITY {
                Ok(ExtReal::Infinite)
            } else if w.is_finite() && w >= 0.0 {
                Ok(ExtReal::Finite(w))
            } else {
                Err(FieldError::Malformed(format!("entry {w} is not a nonnegative extended real")))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((raw.grid, values))
}

/// CSV of a 2-D scalar grid function: one line per y index, x along the
/// line. Non-finite entries are written as `inf`.
pub fn write_csv_2d(grid: &Grid, values: &[f64], mut out: impl Write) -> Result<(), FieldError> {
    if grid.ndim() != 2 {
        return Err(FieldError::Shape(format!("CSV export needs a 2-D grid, got {}-D", grid.ndim())));
    }
    if values.len() != grid.len() {
        return Err(FieldError::Shape(format!("{} values for {} nodes", values.len(), grid.len())));
    }
    let nx = grid.dims()[0];
    for row in values.chunks_exact(nx) {
        let line: Vec<String> = row.iter().map(|v| if v.is_finite() { format!("{v}") } else { "inf".to_string() }).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}
