//! Rectangular grids over a single chart of R^n, node-valued fields on them,
//! and the extended nonnegative reals used for dual norms and distances.
//!
//! Node ordering: the flat index runs over axis 0 fastest, so a 2-D field is
//! stored row by row with rows indexed by the y (axis 1) coordinate.

mod io;

pub use io::{
    from_bytes, load_any_field, load_extended, load_field, save_extended, save_field, to_bytes, write_csv_2d, AnyField, ElementKind,
    FORMAT_VERSION, MAGIC,
};

use crate::linalg::{CMatrix, C64};
use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, Index};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("grid dimension mismatch: {0}")]
    Shape(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("point {point:?} lies outside the grid box")]
    OutOfBox { point: Vec<f64> },
    #[error("malformed field file: {0}")]
    Malformed(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("dimension overflow in header")]
    DimensionOverflow,
    #[error("element kind mismatch: file holds {found:?}, requested {expected:?}")]
    KindMismatch { expected: ElementKind, found: ElementKind },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Uniform rectangular grid: `node(i) = origin + i * spacing`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    origin: Vec<f64>,
    spacing: Vec<f64>,
    dims: Vec<usize>,
}

impl Grid {
    pub fn new(origin: Vec<f64>, spacing: Vec<f64>, dims: Vec<usize>) -> Result<Self, FieldError> {
        let n = origin.len();
        if n == 0 {
            return Err(FieldError::InvalidGrid("zero-dimensional grid".into()));
        }
        if spacing.len() != n || dims.len() != n {
            return Err(FieldError::InvalidGrid(format!("origin has {} axes, spacing {}, dims {}", n, spacing.len(), dims.len())));
        }
        if let Some(h) = spacing.iter().find(|h| !(h.is_finite() && **h > 0.0)) {
            return Err(FieldError::InvalidGrid(format!("spacing {h} is not positive")));
        }
        if let Some(d) = dims.iter().find(|d| **d < 2) {
            return Err(FieldError::InvalidGrid(format!("axis with {d} nodes; need at least 2")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(FieldError::InvalidGrid("non-finite origin".into()));
        }
        dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or(FieldError::DimensionOverflow)?;
        Ok(Self { origin, spacing, dims })
    }

    /// Grid on the box `[lo, hi]^n` with `cells` cells per axis (so
    /// `cells + 1` nodes, both ends included).
    pub fn cube(n: usize, lo: f64, hi: f64, cells: usize) -> Result<Self, FieldError> {
        if !(hi > lo) || cells == 0 {
            return Err(FieldError::InvalidGrid(format!("empty box [{lo}, {hi}] with {cells} cells")));
        }
        let h = (hi - lo) / cells as f64;
        Self::new(vec![lo; n], vec![h; n], vec![cells + 1; n])
    }

    /// Periodic layout: `cells` nodes per axis covering `[lo, hi)`, the
    /// last node one spacing short of `hi`.
    pub fn periodic_cube(n: usize, lo: f64, hi: f64, cells: usize) -> Result<Self, FieldError> {
        if !(hi > lo) || cells < 2 {
            return Err(FieldError::InvalidGrid(format!("empty box [{lo}, {hi}) with {cells} cells")));
        }
        let h = (hi - lo) / cells as f64;
        Self::new(vec![lo; n], vec![h; n], vec![cells; n])
    }

    pub fn ndim(&self) -> usize {
        self.origin.len()
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Number of nodes.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Upper corner of the bounding box (the last node).
    pub fn upper(&self) -> Vec<f64> {
        (0..self.ndim()).map(|a| self.origin[a] + (self.dims[a] - 1) as f64 * self.spacing[a]).collect()
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.ndim());
        let mut flat = 0;
        for a in (0..self.ndim()).rev() {
            flat = flat * self.dims[a] + idx[a];
        }
        flat
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.ndim());
        for &d in &self.dims {
            idx.push(flat % d);
            flat /= d;
        }
        idx
    }

    /// Stride of axis `a` in the flat ordering.
    pub fn stride(&self, a: usize) -> usize {
        self.dims[..a].iter().product()
    }

    pub fn node(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().enumerate().map(|(a, &i)| self.origin[a] + i as f64 * self.spacing[a]).collect()
    }

    pub fn point(&self, flat: usize) -> Vec<f64> {
        self.node(&self.multi_index(flat))
    }

    /// Whether `x` lies in the closed bounding box, up to a relative slack
    /// of 1e-9 of the spacing.
    pub fn contains(&self, x: &[f64]) -> bool {
        if x.len() != self.ndim() {
            return false;
        }
        let upper = self.upper();
        x.iter().enumerate().all(|(a, &v)| {
            let slack = 1e-9 * self.spacing[a];
            v.is_finite() && v >= self.origin[a] - slack && v <= upper[a] + slack
        })
    }

    /// Node closest to `x` (clamped to the grid).
    pub fn nearest_node(&self, x: &[f64]) -> usize {
        let idx: Vec<usize> = (0..self.ndim())
            .map(|a| {
                let t = ((x[a] - self.origin[a]) / self.spacing[a]).round();
                t.clamp(0.0, (self.dims[a] - 1) as f64) as usize
            })
            .collect();
        self.flat_index(&idx)
    }

    /// Flat indices of all nodes, in storage order.
    pub fn nodes(&self) -> std::ops::Range<usize> {
        0..self.len()
    }

    /// Neighbour of `flat` displaced by `offset` cells, or `None` outside
    /// the grid.
    pub fn offset_node(&self, flat: usize, offset: &[isize]) -> Option<usize> {
        let idx = self.multi_index(flat);
        let mut shifted = Vec::with_capacity(idx.len());
        for (a, (&i, &o)) in idx.iter().zip(offset).enumerate() {
            let j = i as isize + o;
            if j < 0 || j >= self.dims[a] as isize {
                return None;
            }
            shifted.push(j as usize);
        }
        Some(self.flat_index(&shifted))
    }

    /// Neighbour with periodic wrap-around on every axis.
    pub fn offset_node_periodic(&self, flat: usize, offset: &[isize]) -> usize {
        let idx = self.multi_index(flat);
        let shifted: Vec<usize> =
            idx.iter().zip(offset).enumerate().map(|(a, (&i, &o))| (i as isize + o).rem_euclid(self.dims[a] as isize) as usize).collect();
        self.flat_index(&shifted)
    }

    fn locate(&self, x: &[f64]) -> Result<(Vec<usize>, Vec<f64>), FieldError> {
        if !self.contains(x) {
            return Err(FieldError::OutOfBox { point: x.to_vec() });
        }
        let mut cell = Vec::with_capacity(self.ndim());
        let mut frac = Vec::with_capacity(self.ndim());
        for a in 0..self.ndim() {
            let s = ((x[a] - self.origin[a]) / self.spacing[a]).clamp(0.0, (self.dims[a] - 1) as f64);
            let i = (s.floor() as usize).min(self.dims[a] - 2);
            cell.push(i);
            frac.push(s - i as f64);
        }
        Ok((cell, frac))
    }
}

/// Nonnegative extended real: a finite value or `+inf`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ExtReal {
    Finite(f64),
    Infinite,
}

impl ExtReal {
    pub const ZERO: ExtReal = ExtReal::Finite(0.0);

    /// Panics on negative or NaN input.
    pub fn finite(v: f64) -> Self {
        assert!(v >= 0.0 && v.is_finite(), "ExtReal::finite requires a finite nonnegative value, got {v}");
        ExtReal::Finite(v)
    }

    /// Maps `+inf` to `Infinite`; panics on negative or NaN input.
    pub fn from_f64(v: f64) -> Self {
        if v == f64::INFINITY {
            ExtReal::Infinite
        } else {
            Self::finite(v)
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, ExtReal::Finite(_))
    }

    pub fn value(&self) -> Option<f64> {
        match *self {
            ExtReal::Finite(v) => Some(v),
            ExtReal::Infinite => None,
        }
    }

    /// IEEE view: `Infinite` becomes `+inf`.
    pub fn to_f64(&self) -> f64 {
        self.value().unwrap_or(f64::INFINITY)
    }

    /// Multiplication by a nonnegative scalar; `0 * inf = 0` as for measures.
    pub fn scale(&self, s: f64) -> Self {
        assert!(s >= 0.0, "negative scale");
        match *self {
            ExtReal::Finite(v) => ExtReal::Finite(v * s),
            ExtReal::Infinite if s == 0.0 => ExtReal::ZERO,
            ExtReal::Infinite => ExtReal::Infinite,
        }
    }
}

impl Add for ExtReal {
    type Output = ExtReal;
    fn add(self, rhs: ExtReal) -> ExtReal {
        match (self, rhs) {
            (ExtReal::Finite(a), ExtReal::Finite(b)) => ExtReal::Finite(a + b),
            _ => ExtReal::Infinite,
        }
    }
}

impl Eq for ExtReal {}

impl PartialOrd for ExtReal {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ExtReal {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (ExtReal::Finite(a), ExtReal::Finite(b)) => a.total_cmp(b),
            (ExtReal::Finite(_), ExtReal::Infinite) => Ordering::Less,
            (ExtReal::Infinite, ExtReal::Finite(_)) => Ordering::Greater,
            (ExtReal::Infinite, ExtReal::Infinite) => Ordering::Equal,
        }
    }
}

impl fmt::Display for ExtReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtReal::Finite(v) => write!(f, "{v}"),
            ExtReal::Infinite => write!(f, "inf"),
        }
    }
}

/// Complex vector value (one fibre of a vector bundle section).
#[derive(Clone, Debug, PartialEq)]
pub struct CVector(pub Vec<C64>);

impl CVector {
    pub fn zeros(r: usize) -> Self {
        CVector(vec![C64::new(0.0, 0.0); r])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// Values a [`Field`] can hold.
pub trait FieldValue: Clone + Send + Sync + 'static {
    const KIND: ElementKind;
    /// `(r, s)` payload shape as written to disk.
    fn shape(&self) -> (usize, usize);
    fn zero_of_shape(shape: (usize, usize)) -> Self;
    /// `self += w * other`.
    fn axpy(&mut self, w: f64, other: &Self);
    fn is_finite(&self) -> bool;
    fn push_f64s(&self, out: &mut Vec<f64>);
    /// Number of f64 words one value of `shape` occupies.
    fn words(shape: (usize, usize)) -> usize;
    fn from_f64s(shape: (usize, usize), words: &[f64]) -> Self;
}

impl FieldValue for f64 {
    const KIND: ElementKind = ElementKind::RealScalar;
    fn shape(&self) -> (usize, usize) {
        (1, 1)
    }
    fn zero_of_shape(_: (usize, usize)) -> Self {
        0.0
    }
    fn axpy(&mut self, w: f64, other: &Self) {
        *self += w * other;
    }
    fn is_finite(&self) -> bool {
        f64::is_finite(*self)
    }
    fn push_f64s(&self, out: &mut Vec<f64>) {
        out.push(*self);
    }
    fn words(_: (usize, usize)) -> usize {
        1
    }
    fn from_f64s(_: (usize, usize), words: &[f64]) -> Self {
        words[0]
    }
}

impl FieldValue for CVector {
    const KIND: ElementKind = ElementKind::ComplexVector;
    fn shape(&self) -> (usize, usize) {
        (self.0.len(), 1)
    }
    fn zero_of_shape((r, _): (usize, usize)) -> Self {
        CVector::zeros(r)
    }
    fn axpy(&mut self, w: f64, other: &Self) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += *b * w;
        }
    }
    fn is_finite(&self) -> bool {
        self.0.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
    fn push_f64s(&self, out: &mut Vec<f64>) {
        for z in &self.0 {
            out.push(z.re);
            out.push(z.im);
        }
    }
    fn words((r, _): (usize, usize)) -> usize {
        2 * r
    }
    fn from_f64s((r, _): (usize, usize), words: &[f64]) -> Self {
        CVector((0..r).map(|i| C64::new(words[2 * i], words[2 * i + 1])).collect())
    }
}

impl FieldValue for CMatrix {
    const KIND: ElementKind = ElementKind::ComplexMatrix;
    /// `(r, s)` = (columns, rows): an s x r matrix maps C^r to C^s.
    fn shape(&self) -> (usize, usize) {
        (self.cols(), self.rows())
    }
    fn zero_of_shape((r, s): (usize, usize)) -> Self {
        CMatrix::zeros(s, r)
    }
    fn axpy(&mut self, w: f64, other: &Self) {
        CMatrix::axpy(self, w, other);
    }
    fn is_finite(&self) -> bool {
        CMatrix::is_finite(self)
    }
    fn push_f64s(&self, out: &mut Vec<f64>) {
        for z in self.as_slice() {
            out.push(z.re);
            out.push(z.im);
        }
    }
    fn words((r, s): (usize, usize)) -> usize {
        2 * r * s
    }
    fn from_f64s((r, s): (usize, usize), words: &[f64]) -> Self {
        let entries: Vec<C64> = (0..r * s).map(|i| C64::new(words[2 * i], words[2 * i + 1])).collect();
        CMatrix::from_row_slice(s, r, &entries)
    }
}

/// One value per grid node.
#[derive(Clone, Debug, PartialEq)]
pub struct Field<V> {
    grid: Grid,
    values: Vec<V>,
}

impl<V: FieldValue> Field<V> {
    pub fn new(grid: Grid, values: Vec<V>) -> Result<Self, FieldError> {
        if values.len() != grid.len() {
            return Err(FieldError::Shape(format!("{} values for {} nodes", values.len(), grid.len())));
        }
        if let Some(first) = values.first() {
            let shape = first.shape();
            if values.iter().any(|v| v.shape() != shape) {
                return Err(FieldError::Shape("values of differing shape".into()));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FieldError::Shape("non-finite entry".into()));
        }
        Ok(Self { grid, values })
    }

    /// Field whose value at each node is `f(node point)`.
    pub fn from_fn(grid: &Grid, mut f: impl FnMut(&[f64]) -> V) -> Result<Self, FieldError> {
        let values = grid.nodes().map(|i| f(&grid.point(i))).collect();
        Self::new(grid.clone(), values)
    }

    pub fn constant(grid: &Grid, value: V) -> Self {
        Self { grid: grid.clone(), values: vec![value; grid.len()] }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[V] {
        &self.values
    }

    pub fn into_values(self) -> Vec<V> {
        self.values
    }

    /// Payload shape `(r, s)`; `(1, 1)` for scalars.
    pub fn value_shape(&self) -> (usize, usize) {
        self.values[0].shape()
    }

    /// Multilinear interpolation of the node values at `x`.
    pub fn sample(&self, x: &[f64]) -> Result<V, FieldError> {
        let (cell, frac) = self.grid.locate(x)?;
        let n = self.grid.ndim();
        let mut acc = V::zero_of_shape(self.value_shape());
        let mut corner = vec![0usize; n];
        for mask in 0..(1usize << n) {
            let mut w = 1.0;
            for a in 0..n {
                if mask >> a & 1 == 1 {
                    corner[a] = cell[a] + 1;
                    w *= frac[a];
                } else {
                    corner[a] = cell[a];
                    w *= 1.0 - frac[a];
                }
            }
            if w != 0.0 {
                acc.axpy(w, &self.values[self.grid.flat_index(&corner)]);
            }
        }
        Ok(acc)
    }

    /// Pointwise map to another value type.
    pub fn map<W: FieldValue>(&self, f: impl Fn(&V) -> W) -> Field<W> {
        Field { grid: self.grid.clone(), values: self.values.iter().map(f).collect() }
    }

    /// Pointwise `self + other`.
    pub fn add(&self, other: &Field<V>) -> Result<Field<V>, FieldError> {
        self.check_same_grid(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| {
                let mut s = a.clone();
                s.axpy(1.0, b);
                s
            })
            .collect();
        Ok(Field { grid: self.grid.clone(), values })
    }

    /// Pointwise `c * self`.
    pub fn scale(&self, c: f64) -> Field<V> {
        let values = self
            .values
            .iter()
            .map(|a| {
                let mut s = V::zero_of_shape(a.shape());
                s.axpy(c, a);
                s
            })
            .collect();
        Field { grid: self.grid.clone(), values }
    }

    pub fn check_same_grid<W>(&self, other: &Field<W>) -> Result<(), FieldError> {
        if self.grid != other.grid {
            return Err(FieldError::Shape("fields live on different grids".into()));
        }
        Ok(())
    }
}

impl<V> Index<usize> for Field<V> {
    type Output = V;
    fn index(&self, i: usize) -> &V {
        &self.values[i]
    }
}
