//! Curves, the length functional `l(gamma) = int P*(gamma')`, arc-length
//! reparametrisation and grid approximations of the control distance.

use crate::fields::{save_extended, write_csv_2d, ExtReal, Field, FieldError, Grid};
use crate::symbol::{dual_norm, dual_norm_of, seminorm, DualNormOptions, SymbolError, SymbolField};
use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error(transparent)]
    Symbol(#[from] SymbolError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("invalid curve: {0}")]
    InvalidCurve(String),
    #[error("curve has {0} length; cannot reparametrise")]
    DegenerateLength(&'static str),
    #[error("empty source set")]
    EmptySources,
    #[error("source node {0} is outside the grid")]
    SourceOutOfGrid(usize),
    #[error("stencil radius must be at least 1")]
    BadStencil,
    #[error("test function violates the gradient bound: P(grad f) = {value} at node {node}")]
    GradientBound { node: usize, value: f64 },
    #[error("distance field and test function live on different grids")]
    GridMismatch,
}

/// Time-stamped polyline.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    times: Vec<f64>,
    points: Vec<Vec<f64>>,
}

impl Curve {
    pub fn new(times: Vec<f64>, points: Vec<Vec<f64>>) -> Result<Self, GeometryError> {
        if times.len() != points.len() {
            return Err(GeometryError::InvalidCurve(format!("{} times for {} points", times.len(), points.len())));
        }
        if times.len() < 2 {
            return Err(GeometryError::InvalidCurve("need at least two samples".into()));
        }
        let n = points[0].len();
        if n == 0 || points.iter().any(|p| p.len() != n || p.iter().any(|c| !c.is_finite())) {
            return Err(GeometryError::InvalidCurve("points of differing or zero dimension, or non-finite".into()));
        }
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(GeometryError::InvalidCurve("times must be finite and strictly increasing".into()));
        }
        Ok(Self { times, points })
    }

    /// `t -> p(t)` sampled at `m + 1` equally spaced times on `[a, b]`.
    pub fn sample(a: f64, b: f64, m: usize, p: impl Fn(f64) -> Vec<f64>) -> Result<Self, GeometryError> {
        if m == 0 {
            return Err(GeometryError::InvalidCurve("need at least one segment".into()));
        }
        let times: Vec<f64> = (0..=m).map(|i| a + (b - a) * i as f64 / m as f64).collect();
        let points = times.iter().map(|&t| p(t)).collect();
        Self::new(times, points)
    }

    /// Straight segment from `p` to `q` over `[t0, t1]`, cut into `m` pieces.
    pub fn segment(p: &[f64], q: &[f64], t0: f64, t1: f64, m: usize) -> Result<Self, GeometryError> {
        Self::sample(t0, t1, m, |t| {
            let s = (t - t0) / (t1 - t0);
            p.iter().zip(q).map(|(a, b)| a + s * (b - a)).collect()
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn ndim(&self) -> usize {
        self.points[0].len()
    }

    pub fn segments(&self) -> usize {
        self.times.len() - 1
    }

    pub fn start(&self) -> &[f64] {
        &self.points[0]
    }

    pub fn end(&self) -> &[f64] {
        self.points.last().unwrap()
    }

    pub fn duration(&self) -> f64 {
        self.times.last().unwrap() - self.times[0]
    }

    pub fn displacement(&self, i: usize) -> Vec<f64> {
        self.points[i + 1].iter().zip(&self.points[i]).map(|(a, b)| a - b).collect()
    }

    pub fn velocity(&self, i: usize) -> Vec<f64> {
        let dt = self.times[i + 1] - self.times[i];
        self.displacement(i).into_iter().map(|d| d / dt).collect()
    }

    pub fn midpoint(&self, i: usize) -> Vec<f64> {
        self.points[i + 1].iter().zip(&self.points[i]).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    /// Same points on new times `phi(t_i)`, for a strictly increasing `phi`.
    pub fn retime(&self, phi: impl Fn(f64) -> f64) -> Result<Self, GeometryError> {
        Self::new(self.times.iter().map(|&t| phi(t)).collect(), self.points.clone())
    }

    /// Piecewise-linear position at time `t` (clamped to the domain).
    pub fn position(&self, t: f64) -> Vec<f64> {
        let t = t.clamp(self.times[0], *self.times.last().unwrap());
        let i = match self.times.binary_search_by(|s| s.total_cmp(&t)) {
            Ok(i) => return self.points[i].clone(),
            Err(i) => i.max(1) - 1,
        };
        let s = (t - self.times[i]) / (self.times[i + 1] - self.times[i]);
        self.points[i].iter().zip(&self.points[i + 1]).map(|(a, b)| a + s * (b - a)).collect()
    }

    fn check_in_box(&self, grid: &Grid) -> Result<(), GeometryError> {
        if let Some(p) = self.points.iter().find(|p| !grid.contains(p)) {
            return Err(FieldError::OutOfBox { point: p.clone() }.into());
        }
        Ok(())
    }
}

/// `P*` of each segment displacement at the segment midpoint, i.e. the
/// midpoint-rule length contribution of each segment.
pub fn segment_lengths(sym: &SymbolField, curve: &Curve, opts: &DualNormOptions) -> Result<Vec<ExtReal>, GeometryError> {
    curve.check_in_box(sym.grid())?;
    (0..curve.segments()).map(|i| Ok(dual_norm(sym, &curve.midpoint(i), &curve.displacement(i), opts)?)).collect()
}

/// `l_P(gamma) = sum_i P*_{m_i}(p_{i+1} - p_i)`, the midpoint quadrature of
/// `int P*(gamma'(t)) dt`.
pub fn curve_length(sym: &SymbolField, curve: &Curve, opts: &DualNormOptions) -> Result<ExtReal, GeometryError> {
    Ok(segment_lengths(sym, curve, opts)?.into_iter().fold(ExtReal::ZERO, |a, b| a + b))
}

/// Whether every segment velocity satisfies `P*(v) <= 1 + tol` at its
/// midpoint.
pub fn is_subunit(sym: &SymbolField, curve: &Curve, tol: f64, opts: &DualNormOptions) -> Result<bool, GeometryError> {
    curve.check_in_box(sym.grid())?;
    for i in 0..curve.segments() {
        if dual_norm(sym, &curve.midpoint(i), &curve.velocity(i), opts)? > ExtReal::Finite(1.0 + tol) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Reparametrisation by `P*`-arc length: new time of each sample is the
/// length of the curve up to it. Segments of zero length are removed.
pub fn arclength_reparam(sym: &SymbolField, curve: &Curve, opts: &DualNormOptions) -> Result<Curve, GeometryError> {
    let lengths = segment_lengths(sym, curve, opts)?;
    let mut times = vec![0.0];
    let mut points = vec![curve.points[0].clone()];
    let mut acc = 0.0;
    for (i, len) in lengths.iter().enumerate() {
        match len {
            ExtReal::Infinite => return Err(GeometryError::DegenerateLength("infinite")),
            ExtReal::Finite(l) if *l > 0.0 => {
                acc += l;
                times.push(acc);
                points.push(curve.points[i + 1].clone());
            }
            ExtReal::Finite(_) => {}
        }
    }
    if times.len() < 2 {
        return Err(GeometryError::DegenerateLength("zero"));
    }
    Curve::new(times, points)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Integer offsets with Chebyshev norm at most `radius` and coprime
/// entries, one from each `+-` pair (first nonzero entry positive).
pub fn stencil_offsets(n: usize, radius: usize) -> Vec<Vec<isize>> {
    let r = radius as isize;
    let side = 2 * radius + 1;
    let mut out = Vec::new();
    for code in 0..side.pow(n as u32) {
        let mut c = code;
        let o: Vec<isize> = (0..n)
            .map(|_| {
                let v = (c % side) as isize - r;
                c /= side;
                v
            })
            .collect();
        let Some(first) = o.iter().find(|v| **v != 0) else { continue };
        if *first < 0 {
            continue;
        }
        if o.iter().fold(0, |g, v| gcd(g, v.unsigned_abs())) == 1 {
            out.push(o);
        }
    }
    out
}

/// Per-node extended distance from a source set.
#[derive(Clone, Debug)]
pub struct DistanceField {
    grid: Grid,
    sources: Vec<usize>,
    stencil_radius: usize,
    values: Vec<ExtReal>,
}

#[derive(Clone, Copy, PartialEq)]
struct Queued {
    dist: f64,
    node: usize,
}

impl Eq for Queued {}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        other.dist.total_cmp(&self.dist).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Undirected edge costs `P*_{mid}(o * h)` for each node and half-stencil
/// offset; `None` for missing neighbours and infinite costs.
fn edge_costs(sym: &SymbolField, offsets: &[Vec<isize>], opts: &DualNormOptions) -> Result<Vec<Vec<Option<f64>>>, SymbolError> {
    let grid = sym.grid();
    let h = grid.spacing();
    let steps: Vec<Vec<f64>> = offsets.iter().map(|o| o.iter().zip(h).map(|(&k, &hh)| k as f64 * hh).collect()).collect();
    let per_node = |node: usize, memo: &mut HashMap<(usize, Vec<u64>), Option<f64>>| -> Result<Vec<Option<f64>>, SymbolError> {
        let x = grid.point(node);
        offsets
            .iter()
            .zip(&steps)
            .enumerate()
            .map(|(k, (o, step))| {
                if grid.offset_node(node, o).is_none() {
                    return Ok(None);
                }
                let mid: Vec<f64> = x.iter().zip(step).map(|(a, s)| a + 0.5 * s).collect();
                let root = sym.gauge_source().unwrap_or(sym);
                let coeffs = root.coefficients(&mid)?;
                // Identical coefficients give identical costs; constant
                // symbols then need one dual evaluation per offset.
                let key: Vec<u64> =
                    coeffs.first.iter().flat_map(|a| a.as_slice().iter().flat_map(|z| [z.re.to_bits(), z.im.to_bits()])).collect();
                if let Some(v) = memo.get(&(k, key.clone())) {
                    return Ok(*v);
                }
                let cost = dual_norm_of(&coeffs, step, opts)?.value();
                memo.insert((k, key), cost);
                Ok(cost)
            })
            .collect()
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        grid.nodes()
            .collect::<Vec<_>>()
            .par_chunks(256)
            .map(|chunk| {
                let mut memo = HashMap::new();
                chunk.iter().map(|&i| per_node(i, &mut memo)).collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()
            .map(|parts| parts.into_iter().flatten().collect())
    }
    #[cfg(not(feature = "parallel"))]
    {
        let mut memo = HashMap::new();
        grid.nodes().map(|i| per_node(i, &mut memo)).collect()
    }
}

/// Shortest-path distance from `sources` on the graph joining each node to
/// its stencil neighbours, with edge cost `P*` at the edge midpoint applied
/// to the offset. Infinite-cost edges are dropped.
pub fn distance_field(
    sym: &SymbolField,
    sources: &[usize],
    stencil_radius: usize,
    opts: &DualNormOptions,
) -> Result<DistanceField, GeometryError> {
    if sources.is_empty() {
        return Err(GeometryError::EmptySources);
    }
    if stencil_radius == 0 {
        return Err(GeometryError::BadStencil);
    }
    let grid = sym.grid();
    if let Some(&s) = sources.iter().find(|&&s| s >= grid.len()) {
        return Err(GeometryError::SourceOutOfGrid(s));
    }
    let offsets = stencil_offsets(grid.ndim(), stencil_radius);
    let costs = edge_costs(sym, &offsets, opts)?;
    let neg: Vec<Vec<isize>> = offsets.iter().map(|o| o.iter().map(|v| -v).collect()).collect();

    let mut dist = vec![f64::INFINITY; grid.len()];
    let mut done = vec![false; grid.len()];
    let mut heap = BinaryHeap::new();
    for &s in sources {
        dist[s] = 0.0;
        heap.push(Queued { dist: 0.0, node: s });
    }
    while let Some(Queued { dist: d, node }) = heap.pop() {
        if done[node] || d > dist[node] {
            continue;
        }
        done[node] = true;
        for (k, o) in offsets.iter().enumerate() {
            // Forward edge stored at `node`, backward edge stored at the
            // neighbour it comes from.
            let forward = grid.offset_node(node, o).zip(costs[node][k]);
            let backward = grid.offset_node(node, &neg[k]).and_then(|m| costs[m][k].map(|c| (m, c)));
            for (m, c) in forward.into_iter().chain(backward) {
                let nd = d + c;
                if nd < dist[m] {
                    dist[m] = nd;
                    heap.push(Queued { dist: nd, node: m });
                }
            }
        }
    }
    let values = dist.into_iter().map(ExtReal::from_f64).collect();
    Ok(DistanceField { grid: grid.clone(), sources: sources.to_vec(), stencil_radius, values })
}

impl DistanceField {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    pub fn stencil_radius(&self) -> usize {
        self.stencil_radius
    }

    pub fn values(&self) -> &[ExtReal] {
        &self.values
    }

    pub fn value(&self, node: usize) -> ExtReal {
        self.values[node]
    }

    /// Largest finite value.
    pub fn max_finite(&self) -> f64 {
        self.values.iter().filter_map(ExtReal::value).fold(0.0, f64::max)
    }

    pub fn infinite_count(&self) -> usize {
        self.values.iter().filter(|v| !v.is_finite()).count()
    }

    /// IEEE view with `+inf` for unreachable nodes.
    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(ExtReal::to_f64).collect()
    }

    /// Binary field file with unreachable nodes stored as `+inf`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FieldError> {
        save_extended(&self.grid, &self.values, path)
    }

    pub fn write_csv(&self, out: impl Write) -> Result<(), FieldError> {
        write_csv_2d(&self.grid, &self.as_f64(), out)
    }
}

/// `B(K, r)`: nodes at distance at most `r`.
pub fn ball(df: &DistanceField, r: f64) -> Vec<usize> {
    df.values.iter().enumerate().filter(|(_, v)| **v <= ExtReal::Finite(r.max(0.0))).map(|(i, _)| i).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzReport {
    /// `max_y min_{x in K} |f(x) - f(y)| / d(y)` over reachable `y` not in `K`.
    pub max_ratio: f64,
    pub argmax: Option<usize>,
    pub pairs_checked: usize,
    pub violations: usize,
    /// Largest `P(grad f)` over the nodes.
    pub max_gradient_norm: f64,
}

impl LipschitzReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Central-difference gradient at a node, one-sided second order at the
/// grid boundary.
pub fn node_gradient(f: &Field<f64>, node: usize) -> Vec<f64> {
    let grid = f.grid();
    let idx = grid.multi_index(node);
    (0..grid.ndim())
        .map(|a| {
            let h = grid.spacing()[a];
            let stride = grid.stride(a);
            let last = grid.dims()[a] - 1;
            let i = idx[a];
            let at = |k: usize| f[node - i * stride + k * stride];
            if last == 1 {
                (at(1) - at(0)) / h
            } else if i == 0 {
                (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
            } else if i == last {
                (3.0 * at(last) - 4.0 * at(last - 1) + at(last - 2)) / (2.0 * h)
            } else {
                (at(i + 1) - at(i - 1)) / (2.0 * h)
            }
        })
        .collect()
}

/// A function with `P(grad f) <= 1` is 1-Lipschitz for the control
/// distance, so `|f(x) - f(y)|` bounds `d(x, y)` from below. Checks this
/// against the grid distance and returns the tightest ratio found.
pub fn lipschitz_lower_bound(
    sym: &SymbolField,
    df: &DistanceField,
    test_fn: &Field<f64>,
    tol: f64,
) -> Result<LipschitzReport, GeometryError> {
    if test_fn.grid() != df.grid() || sym.grid() != df.grid() {
        return Err(GeometryError::GridMismatch);
    }
    let grid = df.grid();
    let mut max_gradient_norm = 0.0f64;
    for node in grid.nodes() {
        let p = seminorm(sym, &grid.point(node), &node_gradient(test_fn, node))?;
        if p > 1.0 + tol {
            return Err(GeometryError::GradientBound { node, value: p });
        }
        max_gradient_norm = max_gradient_norm.max(p);
    }
    let mut report = LipschitzReport { max_ratio: 0.0, argmax: None, pairs_checked: 0, violations: 0, max_gradient_norm };
    for y in grid.nodes() {
        let Some(d) = df.values[y].value() else { continue };
        if d == 0.0 {
            continue;
        }
        let gap = df.sources.iter().map(|&x| (test_fn[x] - test_fn[y]).abs()).fold(f64::INFINITY, f64::min);
        report.pairs_checked += df.sources.len();
        if gap > d * (1.0 + tol) {
            report.violations += 1;
        }
        let ratio = gap / d;
        if ratio > report.max_ratio {
            report.max_ratio = ratio;
            report.argmax = Some(y);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gallery::{diagonal_shift, grushin_rational, riemannian};
    use crate::symbol::riemannian_approximant;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn opts() -> DualNormOptions {
        DualNormOptions::default()
    }

    fn diag_plane(cells: usize, h: f64) -> SymbolField {
        let half = cells as f64 * h / 2.0;
        diagonal_shift(2, Grid::cube(2, -half, half, cells).unwrap()).unwrap()
    }

    #[test]
    fn constant_curve_has_zero_length_and_is_subunit() {
        let sym = diag_plane(8, 0.25);
        let c = Curve::sample(0.0, 1.0, 10, |_| vec![0.25, -0.5]).unwrap();
        assert_eq!(curve_length(&sym, &c, &opts()).unwrap(), ExtReal::ZERO);
        assert!(is_subunit(&sym, &c, 0.0, &opts()).unwrap());
    }

    #[test]
    fn diagonal_segment_has_l_one_length() {
        let sym = diag_plane(8, 0.25);
        let c = Curve::segment(&[0.0, 0.0], &[1.0, 1.0], 0.0, 1.0, 7).unwrap();
        let len = curve_length(&sym, &c, &opts()).unwrap().to_f64();
        assert!((len - 2.0).abs() < 1e-12, "{len}");
        assert!(!is_subunit(&sym, &c, 1e-9, &opts()).unwrap());
        let axis = Curve::segment(&[0.0, 0.0], &[1.0, 0.0], 0.0, 1.0, 4).unwrap();
        assert!(is_subunit(&sym, &axis, 1e-12, &opts()).unwrap());
    }

    #[test]
    fn curve_outside_box_is_rejected() {
        let sym = diag_plane(8, 0.25);
        let c = Curve::segment(&[0.0, 0.0], &[3.0, 0.0], 0.0, 1.0, 4).unwrap();
        assert!(curve_length(&sym, &c, &opts()).is_err());
    }

    #[test]
    fn invalid_curves_are_rejected() {
        assert!(Curve::new(vec![0.0, 0.0], vec![vec![0.0], vec![1.0]]).is_err());
        assert!(Curve::new(vec![0.0], vec![vec![0.0]]).is_err());
        assert!(Curve::new(vec![0.0, 1.0], vec![vec![0.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn fast_segment_is_slowed_to_unit_speed() {
        let sym = diag_plane(8, 0.25);
        let c = Curve::segment(&[0.0, 0.0], &[1.0, 0.0], 0.0, 0.5, 10).unwrap();
        let r = arclength_reparam(&sym, &c, &opts()).unwrap();
        // Closed form: new time is 2t.
        for (t_new, t_old) in r.times().iter().zip(c.times()) {
            assert!((t_new - 2.0 * t_old).abs() < 1e-12);
        }
        assert!(is_subunit(&sym, &r, 1e-12, &opts()).unwrap());
        let unit = Curve::segment(&[0.0, 0.0], &[0.0, 1.0], 0.0, 1.0, 5).unwrap();
        let same = arclength_reparam(&sym, &unit, &opts()).unwrap();
        for (a, b) in same.times().iter().zip(unit.times()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reparametrisation_drops_stationary_segments() {
        let sym = diag_plane(8, 0.25);
        let c = Curve::new(vec![0.0, 1.0, 2.0, 3.0], vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![0.5, 0.0], vec![0.5, 0.0]]).unwrap();
        let r = arclength_reparam(&sym, &c, &opts()).unwrap();
        assert_eq!(r.times(), &[0.0, 0.5]);
        let still = Curve::sample(0.0, 1.0, 3, |_| vec![0.0, 0.0]).unwrap();
        assert!(matches!(arclength_reparam(&sym, &still, &opts()), Err(GeometryError::DegenerateLength("zero"))));
    }

    #[test]
    fn vertical_grushin_segment_has_infinite_length() {
        let grid = Grid::new(vec![-0.5, -0.5], vec![0.05, 0.05], vec![21, 21]).unwrap();
        let (sym, _) = grushin_rational(6, grid).unwrap();
        let c = Curve::segment(&[-0.3, 0.0], &[-0.3, 0.2], 0.0, 1.0, 4).unwrap();
        assert_eq!(curve_length(&sym, &c, &opts()).unwrap(), ExtReal::Infinite);
        assert!(matches!(arclength_reparam(&sym, &c, &opts()), Err(GeometryError::DegenerateLength("infinite"))));
    }

    #[test]
    fn stencil_sizes() {
        assert_eq!(stencil_offsets(2, 1).len(), 4);
        assert_eq!(stencil_offsets(2, 2).len(), 8);
        assert_eq!(stencil_offsets(3, 1).len(), 13);
        assert!(stencil_offsets(2, 2).iter().all(|o| o != &vec![2, 0] && o != &vec![2, 2]));
    }

    #[test]
    fn distance_is_exact_l_one_for_diagonal_shift() {
        let sym = diag_plane(16, 0.25);
        let grid = sym.grid().clone();
        let centre = grid.flat_index(&[8, 8]);
        let df = distance_field(&sym, &[centre], 1, &opts()).unwrap();
        for i in grid.nodes() {
            let p = grid.point(i);
            assert_eq!(df.value(i), ExtReal::Finite(p[0].abs() + p[1].abs()));
        }
        let diamond = ball(&df, 1.0);
        assert_eq!(diamond.len(), 2 * 4 * 4 + 2 * 4 + 1);
        assert_eq!(ball(&df, 0.0), vec![centre]);
        assert_eq!(ball(&df, 1e9).len(), grid.len());
    }

    #[test]
    fn empty_sources_and_zero_radius_are_errors() {
        let sym = diag_plane(4, 0.25);
        assert!(matches!(distance_field(&sym, &[], 1, &opts()), Err(GeometryError::EmptySources)));
        assert!(matches!(distance_field(&sym, &[0], 0, &opts()), Err(GeometryError::BadStencil)));
        assert!(matches!(distance_field(&sym, &[999], 1, &opts()), Err(GeometryError::SourceOutOfGrid(999))));
    }

    // Bellman-Ford relaxation to a fixed point over an explicitly listed edge
    // set: independent of the heap-based solver.
    fn exhaustive_distances(n: usize, h: f64, src: (usize, usize)) -> Vec<f64> {
        let offsets: [(isize, isize); 16] = [
            (1, 0),
            (0, 1),
            (-1, 0),
            (0, -1),
            (1, 1),
            (1, -1),
            (-1, 1),
            (-1, -1),
            (2, 1),
            (1, 2),
            (-2, 1),
            (-1, 2),
            (2, -1),
            (1, -2),
            (-2, -1),
            (-1, -2),
        ];
        let mut d = vec![f64::INFINITY; n * n];
        d[src.1 * n + src.0] = 0.0;
        loop {
            let mut changed = false;
            for y in 0..n as isize {
                for x in 0..n as isize {
                    for (ox, oy) in offsets {
                        let (u, v) = (x + ox, y + oy);
                        if u < 0 || v < 0 || u >= n as isize || v >= n as isize {
                            continue;
                        }
                        let c = h * ((ox * ox + oy * oy) as f64).sqrt();
                        let cand = d[(y * n as isize + x) as usize] + c;
                        let slot = &mut d[(v * n as isize + u) as usize];
                        if cand < *slot - 1e-15 {
                            *slot = cand;
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                return d;
            }
        }
    }

    #[test]
    fn euclidean_distance_matches_exhaustive_oracle_and_three_percent_bound() {
        let h = 0.1;
        let small = riemannian(Grid::cube(2, 0.0, 0.7, 7).unwrap(), |_| DMatrix::identity(2, 2)).unwrap();
        let df = distance_field(&small, &[0], 2, &opts()).unwrap();
        let oracle = exhaustive_distances(8, h, (0, 0));
        for i in small.grid().nodes() {
            assert!((df.value(i).to_f64() - oracle[i]).abs() < 1e-12);
        }

        let sym = riemannian(Grid::cube(2, -2.0, 2.0, 40).unwrap(), |_| DMatrix::identity(2, 2)).unwrap();
        let grid = sym.grid().clone();
        let centre = grid.flat_index(&[20, 20]);
        let df = distance_field(&sym, &[centre], 2, &opts()).unwrap();
        for i in grid.nodes() {
            let idx = grid.multi_index(i);
            let cells = (idx[0] as f64 - 20.0).hypot(idx[1] as f64 - 20.0);
            if cells >= 5.0 {
                let e = cells * h;
                let d = df.value(i).to_f64();
                assert!(d >= e - 1e-12 && d <= 1.03 * e, "node {idx:?}: {d} vs {e}");
            }
        }
    }

    #[test]
    fn larger_stencils_never_increase_distances() {
        let sym = riemannian(Grid::cube(2, -1.0, 1.0, 20).unwrap(), |x| DMatrix::from_row_slice(2, 2, &[1.0 + x[0] * x[0], 0.2, 0.2, 1.5]))
            .unwrap();
        let src = [sym.grid().flat_index(&[5, 12])];
        let d1 = distance_field(&sym, &src, 1, &opts()).unwrap();
        let d2 = distance_field(&sym, &src, 2, &opts()).unwrap();
        let d3 = distance_field(&sym, &src, 3, &opts()).unwrap();
        for i in sym.grid().nodes() {
            assert!(d2.value(i) <= d1.value(i) && d3.value(i) <= d2.value(i));
        }
    }

    #[test]
    fn distances_are_symmetric_and_satisfy_the_discrete_triangle_inequality() {
        let grid = Grid::new(vec![-0.5, -0.5], vec![1.0 / 16.0; 2], vec![17, 17]).unwrap();
        let (sym, _) = grushin_rational(8, grid.clone()).unwrap();
        let a = grid.flat_index(&[2, 3]);
        let b = grid.flat_index(&[13, 11]);
        let da = distance_field(&sym, &[a], 2, &opts()).unwrap();
        let db = distance_field(&sym, &[b], 2, &opts()).unwrap();
        match (da.value(b), db.value(a)) {
            (ExtReal::Finite(x), ExtReal::Finite(y)) => assert!((x - y).abs() < 1e-12 * x.max(1.0)),
            (x, y) => assert_eq!(x, y),
        }
        let offsets = stencil_offsets(2, 2);
        let costs = edge_costs(&sym, &offsets, &opts()).unwrap();
        for node in grid.nodes() {
            for (k, o) in offsets.iter().enumerate() {
                if let (Some(c), Some(m)) = (costs[node][k], grid.offset_node(node, o)) {
                    assert!(da.value(m) <= da.value(node) + ExtReal::Finite(c * (1.0 + 1e-15)));
                    assert!(da.value(node) <= da.value(m) + ExtReal::Finite(c * (1.0 + 1e-15)));
                }
            }
        }
        assert_eq!(da.value(a), ExtReal::ZERO);
    }

    #[test]
    fn grushin_sources_on_degenerate_line_leave_unreachable_nodes() {
        // Nodes with x in [-0.45, -0.15] see u = 0, so their vertical edges
        // are dropped; with radius 1 there is no way around.
        let grid = Grid::new(vec![-0.45, -0.2], vec![0.05, 0.05], vec![7, 9]).unwrap();
        let (sym, _) = grushin_rational(4, grid.clone()).unwrap();
        let df = distance_field(&sym, &[grid.flat_index(&[3, 4])], 1, &opts()).unwrap();
        assert!(df.infinite_count() > 0);
    }

    #[test]
    fn riemannian_approximants_give_lower_distances() {
        let sym = diag_plane(12, 0.25);
        let grid = sym.grid().clone();
        let src = [grid.flat_index(&[6, 6])];
        let d = distance_field(&sym, &src, 2, &opts()).unwrap();
        for (w, k) in [([1.0, 0.0], 2), ([0.6, 0.8], 3), ([std::f64::consts::FRAC_1_SQRT_2; 2], 5)] {
            let approx = riemannian_approximant(&sym, &w, k).unwrap();
            let metrics = approx.metrics.clone();
            let g = grid.clone();
            let rsym = riemannian(grid.clone(), move |x| metrics[g.nearest_node(x)].clone()).unwrap();
            let dg = distance_field(&rsym, &src, 2, &opts()).unwrap();
            for i in grid.nodes() {
                assert!(dg.value(i).to_f64() <= d.value(i).to_f64() * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn sum_of_coordinates_certifies_l_one_distance() {
        let sym = diag_plane(12, 0.25);
        let grid = sym.grid().clone();
        let k = grid.flat_index(&[6, 6]);
        let df = distance_field(&sym, &[k], 1, &opts()).unwrap();
        let f = Field::from_fn(&grid, |x| x[0] + x[1]).unwrap();
        let report = lipschitz_lower_bound(&sym, &df, &f, 1e-9).unwrap();
        assert!(report.passed());
        assert!((report.max_ratio - 1.0).abs() < 1e-12);
        // The node at (+1, +1) cells: |f| = 0.5 = d.
        let y = grid.flat_index(&[7, 7]);
        assert!(((f[y] - f[k]).abs() / df.value(y).to_f64() - 1.0).abs() < 1e-12);

        let zero = Field::constant(&grid, 2.0);
        assert_eq!(lipschitz_lower_bound(&sym, &df, &zero, 1e-9).unwrap().max_ratio, 0.0);
        let steep = Field::from_fn(&grid, |x| 2.0 * x[0]).unwrap();
        assert!(matches!(lipschitz_lower_bound(&sym, &df, &steep, 1e-9), Err(GeometryError::GradientBound { .. })));
    }

    #[test]
    fn coordinate_is_one_lipschitz_for_euclidean_distance() {
        let sym = riemannian(Grid::cube(2, -1.0, 1.0, 16).unwrap(), |_| DMatrix::identity(2, 2)).unwrap();
        let df = distance_field(&sym, &[sym.grid().flat_index(&[3, 9])], 2, &opts()).unwrap();
        let f = Field::from_fn(sym.grid(), |x| x[0]).unwrap();
        let report = lipschitz_lower_bound(&sym, &df, &f, 1e-9).unwrap();
        assert!(report.passed() && report.max_ratio <= 1.0 + 1e-12);
    }

    #[test]
    fn exported_distance_round_trips_with_infinity() {
        let grid = Grid::new(vec![-0.45, -0.2], vec![0.05, 0.05], vec![7, 9]).unwrap();
        let (sym, _) = grushin_rational(4, grid.clone()).unwrap();
        let df = distance_field(&sym, &[grid.flat_index(&[3, 4])], 1, &opts()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.sfpf");
        df.save(&path).unwrap();
        let (_, back) = crate::fields::load_extended(&path).unwrap();
        assert_eq!(back, df.values());
        let mut csv = Vec::new();
        df.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().contains("inf"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn length_is_invariant_under_monotone_retiming(a in 0.2f64..3.0, b in 0.0f64..2.0, m in 3usize..30) {
            let grid = Grid::new(vec![-0.5, -0.5], vec![1.0 / 16.0; 2], vec![17, 17]).unwrap();
            let (sym, _) = grushin_rational(8, grid).unwrap();
            let c = Curve::sample(0.0, 1.0, m, |t| vec![-0.4 + 0.8 * t, 0.3 * (3.0 * t).sin()]).unwrap();
            let r = c.retime(|t| a * t + b * t * t * t).unwrap();
            let l1 = curve_length(&sym, &c, &opts()).unwrap();
            let l2 = curve_length(&sym, &r, &opts()).unwrap();
            match (l1, l2) {
                (ExtReal::Finite(x), ExtReal::Finite(y)) => prop_assert!((x - y).abs() <= 1e-12 * x.max(1.0)),
                (x, y) => prop_assert_eq!(x, y),
            }
            let rsym = riemannian(Grid::cube(2, -1.0, 1.0, 16).unwrap(), |x| {
                DMatrix::from_row_slice(2, 2, &[2.0 + x[1], 0.3, 0.3, 1.0 + x[0] * x[0]])
            })
            .unwrap();
            let f1 = curve_length(&rsym, &c, &opts()).unwrap().to_f64();
            let f2 = curve_length(&rsym, &r, &opts()).unwrap().to_f64();
            prop_assert!(f1.is_finite() && (f1 - f2).abs() <= 1e-12 * f1.max(1.0));
        }

        #[test]
        fn reparametrised_curves_are_one_lipschitz_for_the_distance(m in 4usize..12, s in 0.0f64..1.0, t in 0.0f64..1.0) {
            let sym = riemannian(Grid::cube(2, -1.0, 1.0, 32).unwrap(), |_| DMatrix::identity(2, 2)).unwrap();
            let grid = sym.grid().clone();
            // A lattice staircase so that every sample is a grid node.
            let mut pts = vec![vec![-0.5, -0.5]];
            for i in 0..m {
                let mut p = pts.last().unwrap().clone();
                p[i % 2] += 0.0625;
                pts.push(p);
            }
            let times = (0..=m).map(|i| i as f64 * 0.37).collect();
            let c = arclength_reparam(&sym, &Curve::new(times, pts).unwrap(), &opts()).unwrap();
            prop_assert!(is_subunit(&sym, &c, 1e-12, &opts()).unwrap());
            let (ts, tt) = (s * c.duration(), t * c.duration());
            let (ia, ib) = (
                c.times().iter().position(|&x| x >= ts).unwrap(),
                c.times().iter().position(|&x| x >= tt).unwrap(),
            );
            let from = grid.nearest_node(&c.points()[ia]);
            let to = grid.nearest_node(&c.points()[ib]);
            let df = distance_field(&sym, &[from], 2, &opts()).unwrap();
            let gap = (c.times()[ia] - c.times()[ib]).abs();
            prop_assert!(df.value(to).to_f64() <= gap * (1.0 + 1e-12));
        }
    }
}
