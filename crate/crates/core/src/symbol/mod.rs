//! Principal symbols of first-order operators `D f = sum_j a_j d_j f + b f`,
//! the seminorm `P(xi) = |sum_j xi_j a_j(x)|_op`, its dual extended norm,
//! formal adjoints, doubling and Riemannian approximants.

mod dual;
mod manifest;

pub use dual::{dual_norm, dual_norm_of, DualNormOptions};
pub use manifest::{load_manifest, save_manifest, Manifest};

use crate::fields::{Field, FieldError, Grid};
use crate::linalg::{op_norm, real_spectral_norm, real_svd_full_left, CMatrix, C64};
use nalgebra::DMatrix;
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SymbolError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("coefficient shape mismatch: {0}")]
    Shape(String),
    #[error("dual norm refinement did not converge; best lower bound {lower_bound}")]
    NotConverged { lower_bound: f64 },
    #[error("axis {axis} has {nodes} nodes; finite differences need at least 3")]
    TooCoarse { axis: usize, nodes: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coefficients of `D` at one point: `first[j] = a_j` (each `s x r`) and
/// `zeroth = b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Coefficients {
    pub first: Vec<CMatrix>,
    pub zeroth: CMatrix,
}

impl Coefficients {
    /// `sum_j xi_j a_j`.
    pub fn symbol(&self, xi: &[f64]) -> CMatrix {
        let (s, r) = self.zeroth.shape();
        let mut m = CMatrix::zeros(s, r);
        for (a, &w) in self.first.iter().zip(xi) {
            if w != 0.0 {
                m.axpy(w, a);
            }
        }
        m
    }

    pub fn seminorm(&self, xi: &[f64]) -> f64 {
        op_norm(&self.symbol(xi))
    }

    /// Real `n x 2sr` matrix whose row `j` lists `Re a_j` then `Im a_j`, so
    /// that `|sum_j xi_j a_j|_F = |T^T xi|`.
    pub fn stacked(&self) -> DMatrix<f64> {
        let n = self.first.len();
        let len = self.zeroth.as_slice().len();
        DMatrix::from_fn(n, 2 * len, |j, k| {
            let z = self.first[j].as_slice()[k % len];
            if k < len {
                z.re
            } else {
                z.im
            }
        })
    }

    fn is_finite(&self) -> bool {
        self.first.iter().all(CMatrix::is_finite) && self.zeroth.is_finite()
    }
}

pub type CoefficientFn = dyn Fn(&[f64]) -> Coefficients + Send + Sync;

#[derive(Clone)]
enum Source {
    Sampled { first: Vec<Field<CMatrix>>, zeroth: Field<CMatrix> },
    Analytic(Arc<CoefficientFn>),
}

/// Coefficient fields of a first-order operator over a grid.
///
/// Coefficients are either node samples (interpolated multilinearly) or a
/// closure evaluated on demand.
#[derive(Clone)]
pub struct SymbolField {
    grid: Grid,
    r: usize,
    s: usize,
    source: Source,
    gauge: Option<Arc<SymbolField>>,
}

impl fmt::Debug for SymbolField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SymbolField")
            .field("n", &self.n())
            .field("r", &self.r)
            .field("s", &self.s)
            .field("analytic", &self.is_analytic())
            .field("grid", &self.grid)
            .finish()
    }
}

impl SymbolField {
    pub fn sampled(first: Vec<Field<CMatrix>>, zeroth: Field<CMatrix>) -> Result<Self, SymbolError> {
        let grid = zeroth.grid().clone();
        if first.len() != grid.ndim() {
            return Err(SymbolError::Shape(format!("{} first-order fields on a {}-D grid", first.len(), grid.ndim())));
        }
        let (r, s) = zeroth.value_shape();
        for (j, a) in first.iter().enumerate() {
            a.check_same_grid(&zeroth)?;
            if a.value_shape() != (r, s) {
                return Err(SymbolError::Shape(format!("a_{} has shape {:?}, b has {:?}", j + 1, a.value_shape(), (r, s))));
            }
        }
        Ok(Self { grid, r, s, source: Source::Sampled { first, zeroth }, gauge: None })
    }

    /// Symbol given by a closure; checked for shape and finiteness at every
    /// node.
    pub fn analytic(
        grid: Grid,
        r: usize,
        s: usize,
        f: impl Fn(&[f64]) -> Coefficients + Send + Sync + 'static,
    ) -> Result<Self, SymbolError> {
        if r == 0 || s == 0 {
            return Err(SymbolError::Shape("fibre dimensions must be positive".into()));
        }
        let n = grid.ndim();
        for i in grid.nodes() {
            let x = grid.point(i);
            let c = f(&x);
            let ok_shape = c.first.len() == n && c.zeroth.shape() == (s, r) && c.first.iter().all(|a| a.shape() == (s, r));
            if !ok_shape {
                return Err(SymbolError::Shape(format!("closure returned wrong shapes at {x:?}")));
            }
            if !c.is_finite() {
                return Err(SymbolError::Shape(format!("non-finite coefficient at {x:?}")));
            }
        }
        Ok(Self { grid, r, s, source: Source::Analytic(Arc::new(f)), gauge: None })
    }

    /// Constant coefficients over `grid`.
    pub fn constant(grid: Grid, first: Vec<CMatrix>, zeroth: CMatrix) -> Result<Self, SymbolError> {
        let (s, r) = zeroth.shape();
        let coeffs = Coefficients { first, zeroth };
        Self::analytic(grid, r, s, move |_| coeffs.clone())
    }

    pub fn zero(grid: Grid, r: usize, s: usize) -> Result<Self, SymbolError> {
        let n = grid.ndim();
        Self::constant(grid, vec![CMatrix::zeros(s, r); n], CMatrix::zeros(s, r))
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.grid.ndim()
    }

    /// Fibre dimension of the domain bundle.
    pub fn r(&self) -> usize {
        self.r
    }

    /// Fibre dimension of the target bundle.
    pub fn s(&self) -> usize {
        self.s
    }

    pub fn is_analytic(&self) -> bool {
        matches!(self.source, Source::Analytic(_))
    }

    /// Symbol whose seminorm is known to coincide with this one's, if any.
    pub fn gauge_source(&self) -> Option<&SymbolField> {
        self.gauge.as_deref()
    }

    fn with_gauge_of(mut self, other: &SymbolField) -> Self {
        let root = other.gauge.clone().unwrap_or_else(|| Arc::new(other.clone()));
        self.gauge = Some(root);
        self
    }

    pub fn coefficients(&self, x: &[f64]) -> Result<Coefficients, SymbolError> {
        if !self.grid.contains(x) {
            return Err(FieldError::OutOfBox { point: x.to_vec() }.into());
        }
        Ok(self.eval(x))
    }

    // Caller guarantees `x` is in the box (sampled sources clamp otherwise).
    fn eval(&self, x: &[f64]) -> Coefficients {
        match &self.source {
            Source::Analytic(f) => f(x),
            Source::Sampled { first, zeroth } => {
                let sample = |fld: &Field<CMatrix>| fld.sample(x).expect("point checked against the box");
                Coefficients { first: first.iter().map(sample).collect(), zeroth: sample(zeroth) }
            }
        }
    }

    pub fn coefficients_at_node(&self, node: usize) -> Coefficients {
        match &self.source {
            Source::Analytic(f) => f(&self.grid.point(node)),
            Source::Sampled { first, zeroth } => {
                Coefficients { first: first.iter().map(|a| a[node].clone()).collect(), zeroth: zeroth[node].clone() }
            }
        }
    }

    /// `sigma_1(D)(xi) = sum_j xi_j a_j(x)`.
    pub fn symbol(&self, x: &[f64], xi: &[f64]) -> Result<CMatrix, SymbolError> {
        self.check_covector(xi)?;
        Ok(self.coefficients(x)?.symbol(xi))
    }

    fn check_covector(&self, xi: &[f64]) -> Result<(), SymbolError> {
        if xi.len() != self.n() {
            return Err(SymbolError::Shape(format!("covector of length {} in dimension {}", xi.len(), self.n())));
        }
        Ok(())
    }

    /// Coefficient fields sampled at the grid nodes.
    pub fn materialise(&self) -> (Vec<Field<CMatrix>>, Field<CMatrix>) {
        match &self.source {
            Source::Sampled { first, zeroth } => (first.clone(), zeroth.clone()),
            Source::Analytic(_) => {
                let coeffs: Vec<Coefficients> = self.grid.nodes().map(|i| self.coefficients_at_node(i)).collect();
                let first = (0..self.n())
                    .map(|j| Field::new(self.grid.clone(), coeffs.iter().map(|c| c.first[j].clone()).collect()))
                    .collect::<Result<Vec<_>, _>>()
                    .expect("validated at construction");
                let zeroth =
                    Field::new(self.grid.clone(), coeffs.into_iter().map(|c| c.zeroth).collect()).expect("validated at construction");
                (first, zeroth)
            }
        }
    }

    /// Node-sampled copy of this symbol.
    pub fn to_sampled(&self) -> SymbolField {
        let (first, zeroth) = self.materialise();
        let mut out = SymbolField::sampled(first, zeroth).expect("shapes agree");
        out.gauge = self.gauge.clone();
        out
    }

    /// `d a_axis / d x_axis` at `x`: central differences with the grid
    /// spacing, one-sided second order where a central stencil would leave
    /// the box.
    fn divergence_term(&self, x: &[f64]) -> CMatrix {
        let mut acc = CMatrix::zeros(self.s, self.r);
        for j in 0..self.n() {
            acc.axpy(1.0, &self.axis_derivative(x, j));
        }
        acc
    }

    fn axis_derivative(&self, x: &[f64], j: usize) -> CMatrix {
        let h = self.grid.spacing()[j];
        let lo = self.grid.origin()[j];
        let hi = self.grid.upper()[j];
        let slack = 1e-9 * h;
        let at = |dx: f64| {
            let mut p = x.to_vec();
            p[j] += dx;
            if p[j] < lo {
                p[j] = lo;
            }
            if p[j] > hi {
                p[j] = hi;
            }
            self.eval(&p).first.swap_remove(j)
        };
        if x[j] - h >= lo - slack && x[j] + h <= hi + slack {
            (&at(h) - &at(-h)).scale_real(0.5 / h)
        } else if x[j] - h < lo - slack {
            let m = &(&at(h).scale_real(4.0) - &at(0.0).scale_real(3.0)) - &at(2.0 * h);
            m.scale_real(0.5 / h)
        } else {
            let m = &(&at(0.0).scale_real(3.0) - &at(-h).scale_real(4.0)) + &at(-2.0 * h);
            m.scale_real(0.5 / h)
        }
    }

    fn check_differentiable_grid(&self) -> Result<(), SymbolError> {
        if let Some((axis, &nodes)) = self.grid.dims().iter().enumerate().find(|(_, &d)| d < 3) {
            return Err(SymbolError::TooCoarse { axis, nodes });
        }
        Ok(())
    }
}

/// `P_D(xi)` at `x`.
pub fn seminorm(sym: &SymbolField, x: &[f64], xi: &[f64]) -> Result<f64, SymbolError> {
    Ok(op_norm(&sym.symbol(x, xi)?))
}

/// Orthonormal bases of `Z(P_x)` (covectors killed by the symbol) and of
/// its Euclidean orthogonal complement `F(P*_x)`.
#[derive(Clone, Debug)]
pub struct KernelDecomposition {
    pub point: Vec<f64>,
    pub z_basis: Vec<Vec<f64>>,
    pub f_basis: Vec<Vec<f64>>,
}

/// Relative threshold used when `tol_zero` is not given.
pub const DEFAULT_TOL_ZERO: f64 = 1e-10;

/// Singular directions of `xi -> sum_j xi_j a_j(x)` below
/// `tol_zero * (largest singular value)` span `Z`.
pub fn kernel_decomposition(sym: &SymbolField, x: &[f64], tol_zero: f64) -> Result<KernelDecomposition, SymbolError> {
    let t = sym.coefficients(x)?.stacked();
    let n = sym.n();
    let svd = real_svd_full_left(&t);
    let smax = svd.singular_values.first().copied().unwrap_or(0.0);
    let mut z_basis = Vec::new();
    let mut f_basis = Vec::new();
    for i in 0..n {
        let col: Vec<f64> = svd.u.column(i).iter().copied().collect();
        let sv = svd.singular_values.get(i).copied().unwrap_or(0.0);
        if smax == 0.0 || sv <= tol_zero * smax {
            z_basis.push(col);
        } else {
            f_basis.push(col);
        }
    }
    Ok(KernelDecomposition { point: x.to_vec(), z_basis, f_basis })
}

/// Formal adjoint under Lebesgue measure and the standard Hermitian fibre
/// products: first-order coefficients `-a_j^*`, zeroth order
/// `b^* - sum_j d_j(a_j^*)`.
pub fn formal_adjoint(sym: &SymbolField) -> Result<SymbolField, SymbolError> {
    sym.check_differentiable_grid()?;
    let (r, s) = (sym.r, sym.s);
    let out = match &sym.source {
        Source::Analytic(_) => {
            let base = sym.clone();
            SymbolField::analytic(sym.grid.clone(), s, r, move |x| {
                let c = base.eval(x);
                let div = base.divergence_term(x);
                Coefficients { first: c.first.iter().map(|a| -&a.adjoint()).collect(), zeroth: &c.zeroth.adjoint() - &div.adjoint() }
            })?
        }
        Source::Sampled { first, zeroth } => {
            let grid = sym.grid.clone();
            let adj_first: Vec<Field<CMatrix>> = first.iter().map(|a| a.map(|m| -&m.adjoint())).collect();
            let adj_zeroth: Vec<CMatrix> = grid
                .nodes()
                .map(|i| {
                    let mut div = CMatrix::zeros(s, r);
                    for (j, a) in first.iter().enumerate() {
                        div.axpy(1.0, &node_derivative(a, j, i));
                    }
                    &zeroth[i].adjoint() - &div.adjoint()
                })
                .collect();
            SymbolField::sampled(adj_first, Field::new(grid, adj_zeroth)?)?
        }
    };
    Ok(out.with_gauge_of(sym))
}

fn node_derivative(f: &Field<CMatrix>, axis: usize, node: usize) -> CMatrix {
    let grid = f.grid();
    let h = grid.spacing()[axis];
    let i = grid.multi_index(node)[axis];
    let last = grid.dims()[axis] - 1;
    let stride = grid.stride(axis);
    let at = |k: usize| &f[node - i * stride + k * stride];
    if i > 0 && i < last {
        (at(i + 1) - at(i - 1)).scale_real(0.5 / h)
    } else if i == 0 {
        (&(&at(1).scale_real(4.0) - &at(0).scale_real(3.0)) - at(2)).scale_real(0.5 / h)
    } else {
        (&(&at(last).scale_real(3.0) - &at(last - 1).scale_real(4.0)) + at(last - 2)).scale_real(0.5 / h)
    }
}

fn block(top_right: &CMatrix, bottom_left: &CMatrix, r: usize, s: usize) -> CMatrix {
    let mut m = CMatrix::zeros(r + s, r + s);
    m.set_block(0, r, top_right);
    m.set_block(r, 0, bottom_left);
    m
}

/// Doubling `(f, g) -> (D^+ g, D f)` on fibre dimension `r + s`.
pub fn double(sym: &SymbolField) -> Result<SymbolField, SymbolError> {
    let adj = formal_adjoint(sym)?;
    let (r, s) = (sym.r, sym.s);
    let out = match (&sym.source, &adj.source) {
        (Source::Sampled { first, zeroth }, Source::Sampled { first: afirst, zeroth: azeroth }) => {
            let grid = sym.grid.clone();
            let dfirst = first
                .iter()
                .zip(afirst)
                .map(|(a, aa)| Field::new(grid.clone(), grid.nodes().map(|i| block(&aa[i], &a[i], r, s)).collect()))
                .collect::<Result<Vec<_>, _>>()?;
            let dzeroth = Field::new(grid.clone(), grid.nodes().map(|i| block(&azeroth[i], &zeroth[i], r, s)).collect())?;
            SymbolField::sampled(dfirst, dzeroth)?
        }
        _ => {
            let base = sym.clone();
            SymbolField::analytic(sym.grid.clone(), r + s, r + s, move |x| {
                let c = base.eval(x);
                let ac = adj.eval(x);
                Coefficients {
                    first: c.first.iter().zip(&ac.first).map(|(a, aa)| block(aa, a, r, s)).collect(),
                    zeroth: block(&ac.zeroth, &c.zeroth, r, s),
                }
            })?
        }
    };
    Ok(out.with_gauge_of(sym))
}

/// Largest deviation of `formal_adjoint(sym)` from `sym` over the nodes,
/// as (first-order, zeroth-order) maxima of entrywise moduli.
pub fn self_adjointness_defect(sym: &SymbolField) -> Result<(f64, f64), SymbolError> {
    if sym.r != sym.s {
        return Ok((f64::INFINITY, f64::INFINITY));
    }
    let adj = formal_adjoint(sym)?;
    let mut first = 0.0f64;
    let mut zeroth = 0.0f64;
    for i in sym.grid.nodes() {
        let c = sym.coefficients_at_node(i);
        let a = adj.coefficients_at_node(i);
        for (x, y) in c.first.iter().zip(&a.first) {
            first = first.max(x.max_abs_diff(y));
        }
        zeroth = zeroth.max(c.zeroth.max_abs_diff(&a.zeroth));
    }
    Ok((first, zeroth))
}

/// Inner products `G(x) = c^2 psi^2 (w w^T + 4^k (I - w w^T))` on covectors,
/// with `psi = P(w)/c + 1.5 * 2^-k` and base scale `c = max(1, |T(x)|_2)`,
/// so that `|xi|_G >= P(xi)` everywhere.
#[derive(Clone, Debug)]
pub struct RiemannianApproximant {
    pub grid: Grid,
    pub omega: Vec<f64>,
    pub k: u32,
    pub psi: Field<f64>,
    pub base_scale: Field<f64>,
    pub metrics: Vec<DMatrix<f64>>,
}

impl RiemannianApproximant {
    pub fn norm_at(&self, node: usize, xi: &[f64]) -> f64 {
        let g = &self.metrics[node];
        let v = nalgebra::DVector::from_column_slice(xi);
        v.dot(&(g * &v)).max(0.0).sqrt()
    }
}

pub fn riemannian_approximant(sym: &SymbolField, omega: &[f64], k: u32) -> Result<RiemannianApproximant, SymbolError> {
    let n = sym.n();
    sym.check_covector(omega)?;
    let len = omega.iter().map(|w| w * w).sum::<f64>().sqrt();
    if !(len > 0.0 && len.is_finite()) {
        return Err(SymbolError::Invalid("direction must be a nonzero finite covector".into()));
    }
    if k > 60 {
        return Err(SymbolError::Invalid(format!("sharpness {k} overflows 4^k")));
    }
    let w = nalgebra::DVector::from_iterator(n, omega.iter().map(|v| v / len));
    let proj = &w * w.transpose();
    let perp = DMatrix::identity(n, n) - &proj;
    let band = 1.5 * (-(k as f64)).exp2();
    let stretch = (2.0 * k as f64).exp2();
    let mut psi = Vec::with_capacity(sym.grid.len());
    let mut scale = Vec::with_capacity(sym.grid.len());
    let mut metrics = Vec::with_capacity(sym.grid.len());
    for i in sym.grid.nodes() {
        let coeffs = sym.coefficients_at_node(i);
        let c = real_spectral_norm(&coeffs.stacked()).max(1.0);
        let p = op_norm(&coeffs.symbol(w.as_slice()));
        let ps = p / c + band;
        metrics.push((&proj + &perp * stretch) * (c * c * ps * ps));
        psi.push(ps);
        scale.push(c);
    }
    Ok(RiemannianApproximant {
        grid: sym.grid.clone(),
        omega: w.as_slice().to_vec(),
        k,
        psi: Field::new(sym.grid.clone(), psi)?,
        base_scale: Field::new(sym.grid.clone(), scale)?,
        metrics,
    })
}

/// `m` unit covectors at angles `i * pi / m`, `i < m`, in the plane.
pub fn half_circle(m: usize) -> Vec<[f64; 2]> {
    (0..m)
        .map(|i| {
            let t = i as f64 * std::f64::consts::PI / m as f64;
            [t.cos(), t.sin()]
        })
        .collect()
}

/// Complex scalar helper for building coefficient matrices.
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}
