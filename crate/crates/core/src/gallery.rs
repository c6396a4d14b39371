//! Symbols with known closed-form geometry.
//!
//! | name                     | seminorm `P(xi)`              | dual `P*(v)`                   |
//! |--------------------------|-------------------------------|--------------------------------|
//! | `diagonal-shift`         | `max_j abs(xi_j)`             | `sum_j abs(v_j)`               |
//! | `euclidean`              | `abs(xi)`                     | `abs(v)`                       |
//! | `riemannian-anisotropic` | `sqrt(xi^T diag(1,4) xi)`     | `sqrt(v^T diag(1,1/4) v)`      |
//! | `grushin-pair`           | `sqrt(xi_1^2 + x^2 xi_2^2)`   | infinite vertically at `x = 0` |
//! | `grushin-rational`       | `sqrt(xi^T H xi)`             | `2` on `dx` where `u != 0`, `1` where `u = 0` |
//!
//! The diagonal shift has control distance `abs(x - y)_1`, and its
//! propagator translates component `j` along axis `j`.

use crate::fields::Grid;
use crate::linalg::{CMatrix, C64};
use crate::symbol::{Coefficients, SymbolError, SymbolField};
use nalgebra::DMatrix;
use std::sync::Arc;

pub const NAMES: [&str; 5] = ["diagonal-shift", "euclidean", "riemannian-anisotropic", "grushin-pair", "grushin-rational"];

/// Names accepted by [`by_name`].
pub fn list() -> &'static [&'static str] {
    &NAMES
}

/// Truncation used by [`by_name`] for `grushin-rational`.
pub const DEFAULT_TRUNCATION: usize = 20;

pub fn by_name(name: &str, grid: Grid, truncation: usize) -> Result<SymbolField, SymbolError> {
    let n = grid.ndim();
    match name {
        "diagonal-shift" => diagonal_shift(n, grid),
        "euclidean" => riemannian(grid, move |_| DMatrix::identity(n, n)),
        "riemannian-anisotropic" => {
            require_planar(&grid, name)?;
            riemannian(grid, |_| DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 4.0])))
        }
        "grushin-pair" => {
            require_planar(&grid, name)?;
            subriemannian(grid, vec![Arc::new(|_: &[f64]| vec![1.0, 0.0]), Arc::new(|x: &[f64]| vec![0.0, x[0]])])
        }
        "grushin-rational" => {
            require_planar(&grid, name)?;
            grushin_rational(truncation, grid).map(|(sym, _)| sym)
        }
        other => Err(SymbolError::Invalid(format!("unknown gallery symbol '{other}'; known: {}", NAMES.join(", ")))),
    }
}

fn require_planar(grid: &Grid, name: &str) -> Result<(), SymbolError> {
    if grid.ndim() != 2 {
        return Err(SymbolError::Invalid(format!("{name} lives on a 2-D grid, got {}-D", grid.ndim())));
    }
    Ok(())
}

/// `D(f_1, .., f_n) = (i d_1 f_1, .., i d_n f_n)`.
pub fn diagonal_shift(n: usize, grid: Grid) -> Result<SymbolField, SymbolError> {
    if n < 1 {
        return Err(SymbolError::Invalid("diagonal shift needs n >= 1".into()));
    }
    if grid.ndim() != n {
        return Err(SymbolError::Shape(format!("n = {n} on a {}-D grid", grid.ndim())));
    }
    let first =
        (0..n).map(|j| CMatrix::from_fn(n, n, |a, b| if a == j && b == j { C64::new(0.0, 1.0) } else { C64::new(0.0, 0.0) })).collect();
    SymbolField::constant(grid, first, CMatrix::zeros(n, n))
}

/// Scalar-to-vector operator `f -> L^T grad f` with `G = L L^T`, so that
/// `P(xi) = sqrt(xi^T G xi)`.
pub fn riemannian(grid: Grid, metric: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static) -> Result<SymbolField, SymbolError> {
    let n = grid.ndim();
    for i in grid.nodes() {
        let x = grid.point(i);
        let g = metric(&x);
        if g.shape() != (n, n) {
            return Err(SymbolError::Shape(format!("metric at {x:?} is {:?}, expected {n}x{n}", g.shape())));
        }
        if g.clone().cholesky().is_none() {
            return Err(SymbolError::Invalid(format!("metric is not positive definite at {x:?}")));
        }
    }
    SymbolField::analytic(grid, 1, n, move |x| {
        let l = metric(x).cholesky().map(|c| c.l()).unwrap_or_else(|| DMatrix::zeros(n, n));
        let first = (0..n).map(|j| CMatrix::from_real(n, 1, l.row(j).transpose().as_slice())).collect();
        Coefficients { first, zeroth: CMatrix::zeros(n, 1) }
    })
}

pub type VectorFieldFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// `D f = (X_1 f, .., X_m f)`, so `P(xi)^2 = sum_k xi(X_k)^2`.
pub fn subriemannian(grid: Grid, fields: Vec<VectorFieldFn>) -> Result<SymbolField, SymbolError> {
    let n = grid.ndim();
    let m = fields.len();
    if m == 0 {
        return Err(SymbolError::Invalid("no vector fields".into()));
    }
    let probe = grid.point(0);
    if let Some(k) = fields.iter().position(|f| f(&probe).len() != n) {
        return Err(SymbolError::Shape(format!("field {} does not return {n} components", k + 1)));
    }
    SymbolField::analytic(grid, 1, m, move |x| {
        let values: Vec<Vec<f64>> = fields.iter().map(|f| f(x)).collect();
        let first = (0..n).map(|j| CMatrix::from_fn(m, 1, |k, _| C64::new(values[k][j], 0.0))).collect();
        Coefficients { first, zeroth: CMatrix::zeros(m, 1) }
    })
}

/// Open interval `(lo, hi)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

/// First `m` rationals in the fixed enumeration: `0`, `1`, then the
/// Stern-Brocot tree of `(0, 1)` level by level, left to right.
pub fn rational_enumeration(m: usize) -> Vec<f64> {
    let mut out: Vec<f64> = [0.0, 1.0].into_iter().take(m).collect();
    // Each level is the list of mediants between consecutive terms of the
    // Farey-like sequence built so far.
    let mut seq: Vec<(u64, u64)> = vec![(0, 1), (1, 1)];
    while out.len() < m {
        let mut next = Vec::with_capacity(2 * seq.len());
        for w in seq.windows(2) {
            let (a, b) = (w[0], w[1]);
            next.push(a);
            let med = (a.0 + b.0, a.1 + b.1);
            next.push(med);
            if out.len() < m {
                out.push(med.0 as f64 / med.1 as f64);
            }
        }
        next.push(*seq.last().unwrap());
        seq = next;
    }
    out
}

/// Intervals `(q_k - 2^{-k-3}, q_k + 2^{-k-3})`, `k < m`.
pub fn rational_intervals(m: usize) -> Vec<Interval> {
    rational_enumeration(m)
        .into_iter()
        .enumerate()
        .map(|(k, q)| {
            let rho = (-(k as f64) - 3.0).exp2();
            Interval { lo: q - rho, hi: q + rho }
        })
        .collect()
}

/// Lebesgue measure of `[lo, hi] intersected with the union of the
/// intervals`.
pub fn union_measure(intervals: &[Interval], lo: f64, hi: f64) -> f64 {
    let mut clipped: Vec<(f64, f64)> = intervals.iter().map(|iv| (iv.lo.max(lo), iv.hi.min(hi))).filter(|(a, b)| b > a).collect();
    clipped.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut total = 0.0;
    let mut current: Option<(f64, f64)> = None;
    for (a, b) in clipped {
        current = match current {
            Some((ca, cb)) if a <= cb => Some((ca, cb.max(b))),
            Some((ca, cb)) => {
                total += cb - ca;
                Some((a, b))
            }
            None => Some((a, b)),
        };
    }
    if let Some((ca, cb)) = current {
        total += cb - ca;
    }
    total
}

/// `exp(-1/(1 - t^2))` on `(-1, 1)`, zero elsewhere.
pub fn flat_bump(t: f64) -> f64 {
    if t.abs() < 1.0 {
        (-1.0 / (1.0 - t * t)).exp()
    } else {
        0.0
    }
}

/// Control function `v_m`: a sum of flat bumps, positive exactly on the
/// union of the first `m` rational intervals.
pub fn rational_profile(m: usize) -> impl Fn(f64) -> f64 + Send + Sync + Clone {
    let intervals = rational_intervals(m);
    move |x| {
        intervals
            .iter()
            .map(|iv| {
                let mid = 0.5 * (iv.lo + iv.hi);
                let rho = 0.5 * (iv.hi - iv.lo);
                flat_bump((x - mid) / rho)
            })
            .sum()
    }
}

/// The orthogonal frame `X = c (1, u sqrt3/2)`, `Y = k c (-u sqrt3/2, 1)`
/// with `c = 2 / sqrt(4 + 3u^2)` and `k = u / (2 sqrt(1 + u^2))`.
pub fn grushin_frame(u: f64) -> ([f64; 2], [f64; 2]) {
    let s3 = 3f64.sqrt();
    let c = 2.0 / (4.0 + 3.0 * u * u).sqrt();
    let k = u / (2.0 * (1.0 + u * u).sqrt());
    ([c, c * u * s3 / 2.0], [-k * c * u * s3 / 2.0, k * c])
}

/// `H = 1/(4(1+u^2)) [[4 + u^2, 2 sqrt3 u], [2 sqrt3 u, 4u^2]]`, the
/// quadratic form of `P^2`.
pub fn grushin_h(u: f64) -> [[f64; 2]; 2] {
    let s = 1.0 / (4.0 * (1.0 + u * u));
    let off = 2.0 * 3f64.sqrt() * u * s;
    [[(4.0 + u * u) * s, off], [off, 4.0 * u * u * s]]
}

/// `D f = (X f, Y f)` with `u(x, y) = v_m(x)`; also returns the intervals
/// on which `u > 0`.
pub fn grushin_rational(m: usize, grid: Grid) -> Result<(SymbolField, Vec<Interval>), SymbolError> {
    if m < 1 {
        return Err(SymbolError::Invalid("truncation must be at least 1".into()));
    }
    require_planar(&grid, "grushin-rational")?;
    let profile = rational_profile(m);
    let sym = SymbolField::analytic(grid, 1, 2, move |p| {
        let (x, y) = grushin_frame(profile(p[0]));
        Coefficients {
            first: vec![CMatrix::from_real(2, 1, &[x[0], y[0]]), CMatrix::from_real(2, 1, &[x[1], y[1]])],
            zeroth: CMatrix::zeros(2, 1),
        }
    })?;
    Ok((sym, rational_intervals(m)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbol::{dual_norm, seminorm, DualNormOptions};

    fn plane() -> Grid {
        Grid::cube(2, -1.0, 1.0, 16).unwrap()
    }

    #[test]
    fn enumeration_starts_with_stern_brocot_levels() {
        let q = rational_enumeration(9);
        let expected = [0.0, 1.0, 0.5, 1.0 / 3.0, 2.0 / 3.0, 0.25, 0.4, 0.6, 0.75];
        for (a, b) in q.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(rational_enumeration(1), vec![0.0]);
    }

    #[test]
    fn union_measure_merges_overlaps() {
        let iv = [Interval { lo: 0.0, hi: 0.5 }, Interval { lo: 0.25, hi: 0.75 }, Interval { lo: 0.9, hi: 2.0 }];
        assert!((union_measure(&iv, 0.0, 1.0) - 0.85).abs() < 1e-15);
        assert_eq!(union_measure(&[], 0.0, 1.0), 0.0);
    }

    #[test]
    fn rational_set_in_unit_interval_has_measure_at_most_half() {
        let mut prev = 0.0;
        for m in 1..=40 {
            let mu = union_measure(&rational_intervals(m), 0.0, 1.0);
            assert!(mu >= prev && mu <= 0.5, "m={m}: {mu}");
            prev = mu;
        }
    }

    #[test]
    fn profile_vanishes_exactly_off_the_intervals() {
        let m = 12;
        let v = rational_profile(m);
        let iv = rational_intervals(m);
        for i in 0..=2000 {
            let x = -0.2 + 1.4 * i as f64 / 2000.0;
            let inside = iv.iter().any(|r| x > r.lo && x < r.hi);
            if !inside {
                assert_eq!(v(x), 0.0, "x={x}");
            }
        }
        assert!(v(0.5) > 0.0);
    }

    #[test]
    fn grushin_frame_is_orthogonal_with_known_lengths() {
        for u in [0.0, 1e-8, 0.3, 1.0, 7.5] {
            let (x, y) = grushin_frame(u);
            assert!((x[0] * y[0] + x[1] * y[1]).abs() < 1e-15);
            assert!((x[0].hypot(x[1]) - 1.0).abs() < 1e-15);
            let ylen = u.abs() / (2.0 * (1.0 + u * u).sqrt());
            assert!((y[0].hypot(y[1]) - ylen).abs() < 1e-15);
            let h = grushin_h(u);
            let hxx = x[0] * x[0] + y[0] * y[0];
            let hxy = x[0] * x[1] + y[0] * y[1];
            let hyy = x[1] * x[1] + y[1] * y[1];
            assert!((h[0][0] - hxx).abs() < 1e-14 && (h[0][1] - hxy).abs() < 1e-14 && (h[1][1] - hyy).abs() < 1e-14);
        }
    }

    #[test]
    fn grushin_point_values() {
        let grid = Grid::new(vec![-0.5, -0.5], vec![0.05, 0.05], vec![41, 41]).unwrap();
        let (sym, _) = grushin_rational(20, grid).unwrap();
        let opts = DualNormOptions::default();
        // x = -0.3 is outside every interval; x = 0.5 is a centre.
        let zero = [-0.3, 0.2];
        let on = [0.5, 0.2];
        assert!((seminorm(&sym, &zero, &[2.0, -5.0]).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(dual_norm(&sym, &zero, &[0.0, 1.0], &opts).unwrap(), crate::ExtReal::Infinite);
        assert!((dual_norm(&sym, &zero, &[1.0, 0.0], &opts).unwrap().to_f64() - 1.0).abs() < 1e-12);
        assert!((dual_norm(&sym, &on, &[1.0, 0.0], &opts).unwrap().to_f64() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_shift_rejects_bad_dimension() {
        assert!(diagonal_shift(0, plane()).is_err());
        assert!(diagonal_shift(3, plane()).is_err());
    }

    #[test]
    fn by_name_covers_every_listed_symbol() {
        for name in list() {
            let sym = by_name(name, plane(), 6).unwrap();
            assert_eq!(sym.n(), 2, "{name}");
        }
        assert!(by_name("nope", plane(), 6).is_err());
    }

    #[test]
    fn riemannian_rejects_indefinite_metric() {
        let bad = riemannian(plane(), |_| DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]));
        assert!(bad.is_err());
    }
}
