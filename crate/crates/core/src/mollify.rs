//! Friedrichs mollifiers `J_eps f = phi_eps * f` on grid fields, their
//! commutators with first-order operators, and the seminorm upper bound.

use crate::fields::{CVector, Field, FieldError, FieldValue, Grid};
use crate::linalg::C64;
use crate::symbol::{SymbolError, SymbolField};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MollifyError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Symbol(#[from] SymbolError),
    #[error("eps = {eps} is below two cells ({cells} h); kernel is under-resolved")]
    UnderResolved { eps: f64, cells: f64 },
    #[error("eps must be positive and finite, got {0}")]
    BadEps(f64),
    #[error("margin between K and W is {margin}, below the largest eps {eps}")]
    Margin { margin: f64, eps: f64 },
    #[error("field has fibre {found}, operator expects {expected}")]
    Fibre { expected: usize, found: usize },
    #[error("axis {axis} has {nodes} nodes; differences need at least 3")]
    TooCoarse { axis: usize, nodes: usize },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Standard bump `exp(-1 / (1 - |x|^2))` on the open unit ball.
pub fn bump(x: &[f64]) -> f64 {
    let r2: f64 = x.iter().map(|c| c * c).sum();
    if r2 < 1.0 {
        (-1.0 / (1.0 - r2)).exp()
    } else {
        0.0
    }
}

/// `phi_eps` sampled at the grid offsets inside the open `eps`-ball and
/// normalised to unit discrete mass.
#[derive(Clone, Debug)]
pub struct MollifierKernel {
    eps: f64,
    offsets: Vec<Vec<isize>>,
    weights: Vec<f64>,
}

impl MollifierKernel {
    /// Kernel for the spacing of `grid`. With `strict`, `eps` below two
    /// cells is an error; otherwise it is logged.
    pub fn new(grid: &Grid, eps: f64, strict: bool) -> Result<Self, MollifyError> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(MollifyError::BadEps(eps));
        }
        let h = grid.spacing();
        let hmax = h.iter().copied().fold(0.0, f64::max);
        if eps < 2.0 * hmax {
            if strict {
                return Err(MollifyError::UnderResolved { eps, cells: eps / hmax });
            }
            log::warn!("mollifier eps = {eps} is only {:.2} cells", eps / hmax);
        }
        let reach: Vec<isize> = h.iter().map(|hh| (eps / hh).ceil() as isize).collect();
        let n = grid.ndim();
        let mut offsets = Vec::new();
        let mut weights = Vec::new();
        let mut o: Vec<isize> = reach.iter().map(|r| -r).collect();
        loop {
            let y: Vec<f64> = o.iter().zip(h).map(|(&k, &hh)| k as f64 * hh / eps).collect();
            let w = bump(&y);
            if w > 0.0 {
                offsets.push(o.clone());
                weights.push(w);
            }
            let mut a = 0;
            while a < n {
                o[a] += 1;
                if o[a] <= reach[a] {
                    break;
                }
                o[a] = -reach[a];
                a += 1;
            }
            if a == n {
                break;
            }
        }
        if weights.is_empty() {
            // Only the centre survives when eps is below one cell.
            offsets.push(vec![0; n]);
            weights.push(1.0);
        }
        let mass: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= mass);
        Ok(Self { eps, offsets, weights })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn offsets(&self) -> &[Vec<isize>] {
        &self.offsets
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Largest offset along each axis, in cells.
    pub fn reach(&self) -> Vec<usize> {
        let n = self.offsets[0].len();
        (0..n).map(|a| self.offsets.iter().map(|o| o[a].unsigned_abs()).max().unwrap_or(0)).collect()
    }

    /// `J_eps f`, with `f` extended by zero outside the grid.
    pub fn apply<V: FieldValue>(&self, f: &Field<V>) -> Field<V> {
        let grid = f.grid();
        let shape = f.value_shape();
        let at = |node: usize| {
            let mut acc = V::zero_of_shape(shape);
            for (o, &w) in self.offsets.iter().zip(&self.weights) {
                if let Some(m) = grid.offset_node(node, o) {
                    acc.axpy(w, &f[m]);
                }
            }
            acc
        };
        #[cfg(feature = "parallel")]
        let values: Vec<V> = {
            use rayon::prelude::*;
            grid.nodes().into_par_iter().map(at).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let values: Vec<V> = grid.nodes().map(at).collect();
        Field::new(grid.clone(), values).expect("convolution of finite values is finite")
    }
}

/// `J_eps f` with a fresh kernel for the grid of `f`.
pub fn mollify<V: FieldValue>(f: &Field<V>, eps: f64, strict: bool) -> Result<Field<V>, MollifyError> {
    Ok(MollifierKernel::new(f.grid(), eps, strict)?.apply(f))
}

/// `D f = sum_j a_j d_j f + b f` with second-order central differences,
/// one-sided at the boundary.
pub fn apply_operator(sym: &SymbolField, f: &Field<CVector>) -> Result<Field<CVector>, MollifyError> {
    let grid = sym.grid();
    f.check_same_grid(&Field::constant(grid, 0.0))?;
    let (r, _) = f.value_shape();
    if r != sym.r() {
        return Err(MollifyError::Fibre { expected: sym.r(), found: r });
    }
    for (axis, &nodes) in grid.dims().iter().enumerate() {
        if nodes < 3 {
            return Err(MollifyError::TooCoarse { axis, nodes });
        }
    }
    let values = grid
        .nodes()
        .map(|node| {
            let c = sym.coefficients_at_node(node);
            let mut out = c.zeroth.mul_vec(&f[node].0);
            for (j, a) in c.first.iter().enumerate() {
                let d = node_derivative(f, j, node);
                for (o, v) in out.iter_mut().zip(a.mul_vec(&d)) {
                    *o += v;
                }
            }
            CVector(out)
        })
        .collect();
    Ok(Field::new(grid.clone(), values)?)
}

fn node_derivative(f: &Field<CVector>, axis: usize, node: usize) -> Vec<C64> {
    let grid = f.grid();
    let h = grid.spacing()[axis];
    let i = grid.multi_index(node)[axis];
    let last = grid.dims()[axis] - 1;
    let stride = grid.stride(axis);
    let at = |k: usize| &f[node - i * stride + k * stride].0;
    let combo = |terms: &[(f64, usize)]| -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); f[node].0.len()];
        for &(w, k) in terms {
            for (o, v) in out.iter_mut().zip(at(k)) {
                *o += v * (w / h);
            }
        }
        out
    };
    if i > 0 && i < last {
        combo(&[(0.5, i + 1), (-0.5, i - 1)])
    } else if i == 0 {
        combo(&[(-1.5, 0), (2.0, 1), (-0.5, 2)])
    } else {
        combo(&[(1.5, last), (-2.0, last - 1), (0.5, last - 2)])
    }
}

/// `[D, J_eps] f = D J_eps f - J_eps D f`.
pub fn commutator_apply(sym: &SymbolField, kernel: &MollifierKernel, f: &Field<CVector>) -> Result<Field<CVector>, MollifyError> {
    let djf = apply_operator(sym, &kernel.apply(f))?;
    let jdf = kernel.apply(&apply_operator(sym, f)?);
    Ok(djf.add(&jdf.scale(-1.0))?)
}

/// Closed axis-aligned box.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Region {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.lo).zip(&self.hi).all(|((c, lo), hi)| *c >= lo - 1e-12 && *c <= hi + 1e-12)
    }

    /// Largest `m` with the `m`-neighbourhood of `self` inside `outer`.
    pub fn margin_in(&self, outer: &Region) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .zip(outer.lo.iter().zip(&outer.hi))
            .map(|((lo, hi), (olo, ohi))| (lo - olo).min(ohi - hi))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn nodes<'a>(&'a self, grid: &'a Grid) -> impl Iterator<Item = usize> + 'a {
        grid.nodes().filter(move |&i| self.contains(&grid.point(i)))
    }

    pub fn of_grid(grid: &Grid) -> Self {
        Self { lo: grid.origin().to_vec(), hi: grid.upper() }
    }
}

pub trait Magnitude {
    fn magnitude(&self) -> f64;
}

impl Magnitude for f64 {
    fn magnitude(&self) -> f64 {
        self.abs()
    }
}

impl Magnitude for CVector {
    fn magnitude(&self) -> f64 {
        self.norm()
    }
}

/// Discrete `L^p` norm over the nodes of `region`, weighted by cell volume;
/// `p = inf` gives the max.
pub fn lp_norm<V: FieldValue + Magnitude>(f: &Field<V>, region: &Region, p: f64) -> f64 {
    let grid = f.grid();
    let mags = region.nodes(grid).map(|i| f[i].magnitude());
    if p.is_infinite() {
        return mags.fold(0.0, f64::max);
    }
    let vol: f64 = grid.spacing().iter().product();
    (mags.map(|m| m.powf(p)).sum::<f64>() * vol).powf(1.0 / p)
}

/// Index bounding box `(lo, hi)` of the nodes where `f` is nonzero.
pub fn support_bounds<V: FieldValue + Magnitude>(f: &Field<V>) -> Option<(Vec<usize>, Vec<usize>)> {
    let grid = f.grid();
    let mut bounds: Option<(Vec<usize>, Vec<usize>)> = None;
    for i in grid.nodes().filter(|&i| f[i].magnitude() != 0.0) {
        let idx = grid.multi_index(i);
        match &mut bounds {
            None => bounds = Some((idx.clone(), idx)),
            Some((lo, hi)) => {
                for a in 0..idx.len() {
                    lo[a] = lo[a].min(idx[a]);
                    hi[a] = hi[a].max(idx[a]);
                }
            }
        }
    }
    bounds
}

/// Fibre seminorm `P_x(v)` on the sections being mollified.
pub type FibreSeminorm<'a> = dyn Fn(&[f64], &CVector) -> f64 + 'a;

/// Seminorm of a real covector field under the symbol: `P_x(Re v)`.
pub fn symbol_fibre_seminorm(sym: &SymbolField) -> impl Fn(&[f64], &CVector) -> f64 + '_ {
    move |x, v| {
        let xi: Vec<f64> = v.0.iter().map(|z| z.re).collect();
        crate::symbol::seminorm(sym, x, &xi).unwrap_or(f64::INFINITY)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpperBoundRow {
    pub eps: f64,
    /// `sup_K P(J_eps f)`.
    pub sup_k: f64,
    /// `ess sup_W P(f)`, the max over the nodes of `W`.
    pub sup_w: f64,
    /// `sup_k - sup_w`.
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpperBoundReport {
    pub rows: Vec<UpperBoundRow>,
    pub tol: f64,
}

impl UpperBoundReport {
    /// The positive part of the gap never grows by more than `tol` along
    /// the sequence.
    pub fn passed(&self) -> bool {
        let slack: Vec<f64> = self.rows.iter().map(|r| r.gap.max(0.0)).collect();
        slack.windows(2).all(|w| w[1] <= w[0] + self.tol)
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "eps,sup_k,sup_w,gap")?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.eps, r.sup_k, r.sup_w, r.gap)?;
        }
        Ok(())
    }
}

/// Evaluates `sup_K P(J_eps f)` against `ess sup_W P(f)` along a sequence of
/// `eps`. `W` must contain the `max eps`-neighbourhood of `K`.
pub fn seminorm_upper_bound_check(
    p: &FibreSeminorm,
    f: &Field<CVector>,
    eps_seq: &[f64],
    k: &Region,
    w: &Region,
    tol: f64,
) -> Result<UpperBoundReport, MollifyError> {
    let grid = f.grid();
    let eps_max = eps_seq.iter().copied().fold(0.0, f64::max);
    let margin = k.margin_in(w).min(w.margin_in(&Region::of_grid(grid)) + eps_max);
    if margin < eps_max {
        return Err(MollifyError::Margin { margin, eps: eps_max });
    }
    let sup_w = w.nodes(grid).map(|i| p(&grid.point(i), &f[i])).fold(0.0, f64::max);
    let rows = eps_seq
        .iter()
        .map(|&eps| {
            let jf = mollify(f, eps, false)?;
            let sup_k = k.nodes(grid).map(|i| p(&grid.point(i), &jf[i])).fold(0.0, f64::max);
            Ok(UpperBoundRow { eps, sup_k, sup_w, gap: sup_k - sup_w })
        })
        .collect::<Result<_, MollifyError>>()?;
    Ok(UpperBoundReport { rows, tol })
}

/// `||[D, J_eps] f||_{L^2(K)}` for each `eps`.
pub fn commutator_norms(sym: &SymbolField, f: &Field<CVector>, eps_seq: &[f64], k: &Region) -> Result<Vec<(f64, f64)>, MollifyError> {
    eps_seq
        .iter()
        .map(|&eps| {
            let kernel = MollifierKernel::new(sym.grid(), eps, false)?;
            Ok((eps, lp_norm(&commutator_apply(sym, &kernel, f)?, k, 2.0)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gallery::diagonal_shift;
    use crate::linalg::CMatrix;
    use crate::symbol::Coefficients;
    use proptest::prelude::*;

    fn scalar(grid: &Grid, f: impl Fn(&[f64]) -> f64) -> Field<CVector> {
        Field::from_fn(grid, |x| CVector(vec![C64::new(f(x), 0.0)])).unwrap()
    }

    fn x_dx(grid: Grid) -> SymbolField {
        SymbolField::analytic(grid, 1, 1, |x| Coefficients { first: vec![CMatrix::from_real(1, 1, &[x[0]])], zeroth: CMatrix::zeros(1, 1) })
            .unwrap()
    }

    #[test]
    fn kernel_has_unit_mass_and_radius_below_eps() {
        let grid = Grid::cube(2, -1.0, 1.0, 40).unwrap();
        let k = MollifierKernel::new(&grid, 0.2, true).unwrap();
        assert!((k.weights().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(k.weights().iter().all(|&w| w > 0.0));
        assert_eq!(k.reach(), vec![3, 3]);
        let odd = MollifierKernel::new(&grid, 0.175, true).unwrap();
        assert_eq!(odd.reach(), vec![3, 3]);
    }

    #[test]
    fn under_resolved_eps_is_rejected_in_strict_mode() {
        let grid = Grid::cube(1, 0.0, 1.0, 10).unwrap();
        assert!(matches!(MollifierKernel::new(&grid, 0.15, true), Err(MollifyError::UnderResolved { .. })));
        assert_eq!(MollifierKernel::new(&grid, 0.05, false).unwrap().len(), 1);
        assert!(matches!(MollifierKernel::new(&grid, -1.0, false), Err(MollifyError::BadEps(_))));
    }

    #[test]
    fn constants_are_preserved_away_from_the_boundary() {
        let grid = Grid::cube(2, -1.0, 1.0, 32).unwrap();
        let f = Field::constant(&grid, 1.0);
        let jf = mollify(&f, 0.25, true).unwrap();
        let inner = Region::new(vec![-0.75; 2], vec![0.75; 2]);
        for i in inner.nodes(&grid) {
            assert!((jf[i] - 1.0).abs() < 1e-15, "{}", jf[i]);
        }
        assert!(jf[0] < 0.5);
    }

    #[test]
    fn indicator_support_grows_by_the_kernel_reach() {
        let grid = Grid::cube(2, -1.0, 1.0, 40).unwrap();
        let f = Field::from_fn(&grid, |x| if x[0].abs() <= 0.2 && x[1].abs() <= 0.1 { 1.0 } else { 0.0 }).unwrap();
        let (lo, hi) = support_bounds(&f).unwrap();
        for eps in [0.1, 0.15, 0.2, 0.4] {
            let k = MollifierKernel::new(&grid, eps, true).unwrap();
            let grow = (eps / 0.05).ceil() as usize - 1;
            assert_eq!(k.reach(), vec![grow; 2]);
            let (jlo, jhi) = support_bounds(&k.apply(&f)).unwrap();
            for a in 0..2 {
                assert_eq!(lo[a] - jlo[a], grow);
                assert_eq!(jhi[a] - hi[a], grow);
            }
        }
    }

    #[test]
    fn smooth_data_converges_as_eps_halves() {
        let grid = Grid::cube(2, -1.5, 1.5, 120).unwrap();
        let f = Field::from_fn(&grid, |x| (-4.0 * (x[0] * x[0] + x[1] * x[1])).exp()).unwrap();
        let k = Region::new(vec![-0.5; 2], vec![0.5; 2]);
        let errs: Vec<f64> = [0.4, 0.2, 0.1, 0.05]
            .iter()
            .map(|&e| lp_norm(&mollify(&f, e, true).unwrap().add(&f.scale(-1.0)).unwrap(), &k, f64::INFINITY))
            .collect();
        assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
    }

    #[test]
    fn translation_invariant_operator_commutes() {
        let grid = Grid::cube(2, -1.0, 1.0, 40).unwrap();
        let sym = diagonal_shift(2, grid.clone()).unwrap();
        let f = Field::from_fn(&grid, |x| CVector(vec![C64::new(x[0].sin(), x[1]), C64::new((x[0] * x[1]).cos(), 0.0)])).unwrap();
        let kernel = MollifierKernel::new(&grid, 0.2, true).unwrap();
        let c = commutator_apply(&sym, &kernel, &f).unwrap();
        let k = Region::new(vec![-0.6; 2], vec![0.6; 2]);
        assert!(lp_norm(&c, &k, f64::INFINITY) < 1e-13);
    }

    #[test]
    fn commutator_of_zero_is_zero() {
        let grid = Grid::cube(1, -1.0, 1.0, 64).unwrap();
        let f = scalar(&grid, |_| 0.0);
        let kernel = MollifierKernel::new(&grid, 0.2, true).unwrap();
        let c = commutator_apply(&x_dx(grid), &kernel, &f).unwrap();
        assert!(c.values().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn commutator_with_x_dx_decays() {
        let grid = Grid::cube(1, -2.0, 2.0, 1600).unwrap();
        let sym = x_dx(grid.clone());
        let f = scalar(&grid, |x| bump(&[x[0] / 0.8]) * (1.0 + x[0]));
        let k = Region::new(vec![-1.0], vec![1.0]);
        let norms = commutator_norms(&sym, &f, &[0.4, 0.2, 0.1, 0.05], &k).unwrap();
        for w in norms.windows(2) {
            assert!(w[1].1 < w[0].1, "{norms:?}");
        }
        // The continuum commutator is int phi_eps(y) y f'(x - y) dy = O(eps^2)
        // for even phi, so halving eps divides the norm by about four.
        let ratio = norms[2].1 / norms[3].1;
        assert!(ratio > 3.0 && ratio < 5.0, "{ratio}");
    }

    #[test]
    fn constant_seminorm_has_no_gap() {
        let grid = Grid::cube(2, -1.0, 1.0, 40).unwrap();
        let f = Field::from_fn(&grid, |x| {
            let t = 3.0 * x[0] + x[1];
            CVector(vec![C64::new(t.cos(), 0.0), C64::new(t.sin(), 0.0)])
        })
        .unwrap();
        let p = |_: &[f64], v: &CVector| v.norm();
        let k = Region::new(vec![-0.3; 2], vec![0.3; 2]);
        let w = Region::new(vec![-0.75; 2], vec![0.75; 2]);
        let report = seminorm_upper_bound_check(&p, &f, &[0.4, 0.2, 0.1], &k, &w, 1e-12).unwrap();
        assert!(report.passed());
        assert!(report.rows.iter().all(|r| r.gap <= 1e-12), "{:?}", report.rows);
    }

    #[test]
    fn bound_uses_the_sup_over_w_not_k() {
        // P(f) = 1 on K, 2 on a strip inside W \ K: near K's edge the
        // mollified field feels the strip, but never exceeds 2.
        let grid = Grid::cube(1, -1.0, 1.0, 400).unwrap();
        let f = scalar(&grid, |x| if x[0] > 0.3 { 2.0 } else { 1.0 });
        let p = |_: &[f64], v: &CVector| v.norm();
        let k = Region::new(vec![-0.3], vec![0.3]);
        let w = Region::new(vec![-0.8], vec![0.8]);
        let report = seminorm_upper_bound_check(&p, &f, &[0.4, 0.2, 0.1, 0.05], &k, &w, 1e-12).unwrap();
        assert!(report.passed());
        assert!(report.rows[0].sup_k > 1.0 + 1e-3 && report.rows[0].sup_k <= 2.0 + 1e-12);
        assert!(report.rows.iter().all(|r| r.sup_w == 2.0 && r.gap <= 1e-12));
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 5);
    }

    #[test]
    fn covector_seminorm_from_symbol() {
        let grid = Grid::cube(2, -1.0, 1.0, 20).unwrap();
        let sym = diagonal_shift(2, grid.clone()).unwrap();
        let f = Field::from_fn(&grid, |x| CVector(vec![C64::new(x[0], 0.0), C64::new(-0.5, 0.0)])).unwrap();
        let p = symbol_fibre_seminorm(&sym);
        let k = Region::new(vec![-0.3; 2], vec![0.3; 2]);
        let w = Region::new(vec![-0.8; 2], vec![0.8; 2]);
        let report = seminorm_upper_bound_check(&p, &f, &[0.4, 0.2], &k, &w, 1e-12).unwrap();
        assert!(report.passed());
        assert!((report.rows[0].sup_w - 0.8).abs() < 1e-12);
    }

    #[test]
    fn eps_beyond_margin_is_rejected() {
        let grid = Grid::cube(1, -1.0, 1.0, 40).unwrap();
        let f = scalar(&grid, |_| 1.0);
        let p = |_: &[f64], v: &CVector| v.norm();
        let k = Region::new(vec![-0.3], vec![0.3]);
        let w = Region::new(vec![-0.5], vec![0.5]);
        assert!(matches!(seminorm_upper_bound_check(&p, &f, &[0.4], &k, &w, 0.0), Err(MollifyError::Margin { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn mollification_contracts_lp_norms(vals in proptest::collection::vec(-5.0f64..5.0, 31 * 31), eps in 0.14f64..0.5) {
            let grid = Grid::cube(2, -1.0, 1.0, 30).unwrap();
            let f = Field::new(grid.clone(), vals).unwrap();
            let jf = mollify(&f, eps, true).unwrap();
            let all = Region::of_grid(&grid);
            for p in [1.0, 2.0, f64::INFINITY] {
                prop_assert!(lp_norm(&jf, &all, p) <= lp_norm(&f, &all, p) * (1.0 + 1e-9));
            }
        }

        #[test]
        fn support_never_exceeds_eps_plus_a_cell(cx in 5usize..25, cy in 5usize..25, eps in 0.1f64..0.4) {
            let grid = Grid::cube(2, -1.0, 1.0, 30).unwrap();
            let mut vals = vec![0.0; grid.len()];
            vals[grid.flat_index(&[cx, cy])] = 1.0;
            let jf = mollify(&Field::new(grid.clone(), vals).unwrap(), eps, false).unwrap();
            let h = 2.0 / 30.0;
            let centre = grid.node(&[cx, cy]);
            for i in grid.nodes().filter(|&i| jf[i] != 0.0) {
                let p = grid.point(i);
                let d = (p[0] - centre[0]).hypot(p[1] - centre[1]);
                prop_assert!(d <= eps + h);
            }
        }

        #[test]
        fn mollifier_is_linear(a in -3.0f64..3.0, seed in 0u64..100) {
            let grid = Grid::cube(1, 0.0, 1.0, 50).unwrap();
            let f = Field::from_fn(&grid, |x| (seed as f64 * x[0]).sin()).unwrap();
            let g = Field::from_fn(&grid, |x| x[0] * x[0]).unwrap();
            let lhs = mollify(&f.scale(a).add(&g).unwrap(), 0.1, true).unwrap();
            let rhs = mollify(&f, 0.1, true).unwrap().scale(a).add(&mollify(&g, 0.1, true).unwrap()).unwrap();
            for i in grid.nodes() {
                prop_assert!((lhs[i] - rhs[i]).abs() < 1e-12);
            }
        }
    }
}
