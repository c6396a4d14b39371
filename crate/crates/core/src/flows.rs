//! Vector fields, their flows and Lie brackets, the Hörmander rank, and
//! approximation of subunit curves by concatenated flow curves.

use crate::fields::{Field, FieldError, Grid};
use crate::geometry::{Curve, GeometryError};
use crate::linalg::{real_spectral_norm, real_svd_full_left};
use crate::symbol::{dual_norm, half_circle, DualNormOptions, SymbolError, SymbolField};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Symbol(#[from] SymbolError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("trajectory left the box at t = {time}")]
    BoxExit { time: f64 },
    #[error("point is closer than {margin} to the boundary")]
    NearBoundary { margin: f64 },
    #[error("no field is within eps of the curve velocity at t = {time}")]
    NoMatchingField { time: f64 },
    #[error("field {index} is not subunit: P*(X) = {value} at node {node}")]
    NotSubunit { index: usize, node: usize, value: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("endpoint error {error} exceeds the bound {bound}")]
    BoundExceeded { error: f64, bound: f64 },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub trait VectorField: Send + Sync {
    fn ndim(&self) -> usize;

    fn eval(&self, x: &[f64]) -> Vec<f64>;

    /// Box on which the field is defined, if it is restricted to one.
    fn domain(&self) -> Option<&Grid> {
        None
    }
}

pub type VectorFieldFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// Field given by a closure.
#[derive(Clone)]
pub struct AnalyticField {
    n: usize,
    f: Arc<VectorFieldFn>,
    domain: Option<Grid>,
}

impl AnalyticField {
    pub fn new(n: usize, f: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        Self { n, f: Arc::new(f), domain: None }
    }

    pub fn on(mut self, grid: Grid) -> Self {
        self.domain = Some(grid);
        self
    }

    /// Constant field `v`.
    pub fn constant(v: Vec<f64>) -> Self {
        Self::new(v.len(), move |_| v.clone())
    }

    /// `+-` unit coordinate fields `e_1, -e_1, ..., e_n, -e_n`.
    pub fn axes(n: usize) -> Vec<Self> {
        (0..n)
            .flat_map(|a| {
                [1.0, -1.0].map(|s| {
                    let mut v = vec![0.0; n];
                    v[a] = s;
                    Self::constant(v)
                })
            })
            .collect()
    }

    /// `s(x) * v` for a scalar profile `s`.
    pub fn modulated(v: Vec<f64>, s: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self::new(v.len(), move |x| {
            let k = s(x);
            v.iter().map(|c| k * c).collect()
        })
    }
}

impl VectorField for AnalyticField {
    fn ndim(&self) -> usize {
        self.n
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        (self.f)(x)
    }

    fn domain(&self) -> Option<&Grid> {
        self.domain.as_ref()
    }
}

/// Field stored as one scalar field per component, sampled multilinearly.
/// Points outside the grid are clamped to it. Brackets of such fields are
/// only first-order accurate near grid nodes.
#[derive(Clone, Debug)]
pub struct GridField {
    components: Vec<Field<f64>>,
}

impl GridField {
    pub fn new(components: Vec<Field<f64>>) -> Result<Self, FlowError> {
        let first = components.first().ok_or_else(|| FlowError::Invalid("no components".into()))?;
        if components.len() != first.grid().ndim() {
            return Err(FlowError::Invalid("component count must equal the grid dimension".into()));
        }
        for c in &components[1..] {
            first.check_same_grid(c)?;
        }
        Ok(Self { components })
    }

    pub fn from_field(grid: &Grid, f: &dyn VectorField) -> Result<Self, FlowError> {
        let values: Vec<Vec<f64>> = grid.nodes().map(|i| f.eval(&grid.point(i))).collect();
        let components =
            (0..grid.ndim()).map(|a| Field::new(grid.clone(), values.iter().map(|v| v[a]).collect())).collect::<Result<_, _>>()?;
        Self::new(components)
    }
}

impl VectorField for GridField {
    fn ndim(&self) -> usize {
        self.components.len()
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let grid = self.components[0].grid();
        let clamped: Vec<f64> = x.iter().zip(grid.origin()).zip(grid.upper()).map(|((&c, &lo), hi)| c.clamp(lo, hi)).collect();
        self.components.iter().map(|f| f.sample(&clamped).expect("clamped point lies in the box")).collect()
    }

    fn domain(&self) -> Option<&Grid> {
        Some(self.components[0].grid())
    }
}

/// Central-difference Jacobian `J[i][a] = d X_i / d x_a`.
pub fn jacobian(f: &dyn VectorField, x: &[f64], h: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut j = DMatrix::zeros(n, n);
    let mut p = x.to_vec();
    for a in 0..n {
        p[a] = x[a] + h;
        let plus = f.eval(&p);
        p[a] = x[a] - h;
        let minus = f.eval(&p);
        p[a] = x[a];
        for i in 0..n {
            j[(i, a)] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    j
}

fn check_margin(f: &dyn VectorField, x: &[f64], margin: f64) -> Result<(), FlowError> {
    if let Some(g) = f.domain() {
        let ok = x
            .iter()
            .zip(g.origin())
            .zip(g.upper())
            .all(|((&c, &lo), hi)| c - lo >= margin * (1.0 - 1e-12) && hi - c >= margin * (1.0 - 1e-12));
        if !ok {
            return Err(FlowError::NearBoundary { margin });
        }
    }
    Ok(())
}

/// `[X, Y]` as a field, evaluated with central-difference Jacobians.
#[derive(Clone)]
pub struct Bracket {
    x: Arc<dyn VectorField>,
    y: Arc<dyn VectorField>,
    h: f64,
}

impl Bracket {
    pub fn new(x: Arc<dyn VectorField>, y: Arc<dyn VectorField>, h: f64) -> Self {
        Self { x, y, h }
    }
}

impl VectorField for Bracket {
    fn ndim(&self) -> usize {
        self.x.ndim()
    }

    fn eval(&self, p: &[f64]) -> Vec<f64> {
        let xv = nalgebra::DVector::from_vec(self.x.eval(p));
        let yv = nalgebra::DVector::from_vec(self.y.eval(p));
        let out = jacobian(self.y.as_ref(), p, self.h) * xv - jacobian(self.x.as_ref(), p, self.h) * yv;
        out.iter().copied().collect()
    }

    fn domain(&self) -> Option<&Grid> {
        self.x.domain().or_else(|| self.y.domain())
    }
}

/// `[X, Y](x) = (DY) X - (DX) Y`, with `O(h^2)` central differences.
pub fn lie_bracket(x_field: &dyn VectorField, y_field: &dyn VectorField, x: &[f64], h: f64) -> Result<Vec<f64>, FlowError> {
    if !(h > 0.0) {
        return Err(FlowError::Invalid("bracket spacing must be positive".into()));
    }
    check_margin(x_field, x, 2.0 * h)?;
    check_margin(y_field, x, 2.0 * h)?;
    let xv = nalgebra::DVector::from_vec(x_field.eval(x));
    let yv = nalgebra::DVector::from_vec(y_field.eval(x));
    Ok((jacobian(y_field, x, h) * xv - jacobian(x_field, x, h) * yv).iter().copied().collect())
}

/// Numerical dimension of the span of all right-nested brackets
/// `[X_i1, [X_i2, ..., X_il]]` with `l <= depth`, at `x`. Singular values
/// below `tol_rank` times the largest are discarded.
pub fn hoermander_rank(fields: &[Arc<dyn VectorField>], x: &[f64], depth: usize, h: f64, tol_rank: f64) -> Result<usize, FlowError> {
    if depth == 0 || fields.is_empty() {
        return Err(FlowError::Invalid("need depth >= 1 and at least one field".into()));
    }
    if !(h > 0.0) {
        return Err(FlowError::Invalid("bracket spacing must be positive".into()));
    }
    let margin = 2.0f64.max((depth - 1) as f64) * h;
    for f in fields {
        check_margin(f.as_ref(), x, margin)?;
    }
    let mut level: Vec<Arc<dyn VectorField>> = fields.to_vec();
    let mut columns: Vec<Vec<f64>> = level.iter().map(|f| f.eval(x)).collect();
    for _ in 1..depth {
        level = fields
            .iter()
            .flat_map(|outer| {
                level.iter().map(move |inner| Arc::new(Bracket::new(outer.clone(), inner.clone(), h)) as Arc<dyn VectorField>)
            })
            .collect();
        columns.extend(level.iter().map(|f| f.eval(x)));
    }
    let n = x.len();
    let m = DMatrix::from_fn(n, columns.len(), |i, j| columns[j][i]);
    let sv = real_svd_full_left(&m).singular_values;
    let top = sv.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > tol_rank * top).count())
}

fn rk4_step(f: &dyn VectorField, x: &[f64], dt: f64) -> Vec<f64> {
    let shifted = |k: &[f64], c: f64| -> Vec<f64> { x.iter().zip(k).map(|(a, b)| a + c * b).collect() };
    let k1 = f.eval(x);
    let k2 = f.eval(&shifted(&k1, dt / 2.0));
    let k3 = f.eval(&shifted(&k2, dt / 2.0));
    let k4 = f.eval(&shifted(&k3, dt));
    (0..x.len()).map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect()
}

#[allow(clippy::too_many_arguments)]
fn integrate(
    f: &dyn VectorField,
    x0: &[f64],
    t0: f64,
    duration: f64,
    step: f64,
    domain: Option<&Grid>,
    times: &mut Vec<f64>,
    points: &mut Vec<Vec<f64>>,
) -> Result<(), FlowError> {
    let steps = (duration / step).ceil().max(1.0) as usize;
    let dt = duration / steps as f64;
    let mut x = x0.to_vec();
    for i in 1..=steps {
        x = rk4_step(f, &x, dt);
        let t = t0 + duration * i as f64 / steps as f64;
        if let Some(g) = domain {
            if !g.contains(&x) || x.iter().any(|c| !c.is_finite()) {
                return Err(FlowError::BoxExit { time: t });
            }
        }
        times.push(t);
        points.push(x.clone());
    }
    Ok(())
}

/// Flow curve of `X` from `x0` over `[0, t]` by classical RK4 with steps of
/// at most `step`.
pub fn flow(f: &dyn VectorField, x0: &[f64], t: f64, step: f64) -> Result<Curve, FlowError> {
    if x0.len() != f.ndim() {
        return Err(FlowError::Invalid(format!("start point has {} coordinates, field {}", x0.len(), f.ndim())));
    }
    if !(t > 0.0) || !t.is_finite() || !(step > 0.0) {
        return Err(FlowError::Invalid("flow time and step must be positive".into()));
    }
    if let Some(g) = f.domain() {
        if !g.contains(x0) {
            return Err(FlowError::BoxExit { time: 0.0 });
        }
    }
    let mut times = vec![0.0];
    let mut points = vec![x0.to_vec()];
    integrate(f, x0, 0.0, t, step, f.domain(), &mut times, &mut points)?;
    Ok(Curve::new(times, points)?)
}

/// Finite family of subunit fields with a measured Lipschitz constant.
#[derive(Clone)]
pub struct VectorFieldSet {
    grid: Grid,
    fields: Vec<Arc<dyn VectorField>>,
    lipschitz: f64,
    max_dual: Vec<f64>,
}

impl VectorFieldSet {
    /// Measures `L` as the largest central-difference Jacobian norm over the
    /// grid nodes, and checks `P*(X_k) <= 1 + tol` at every node.
    pub fn new(sym: &SymbolField, fields: Vec<Arc<dyn VectorField>>, tol: f64, opts: &DualNormOptions) -> Result<Self, FlowError> {
        let grid = sym.grid().clone();
        if fields.is_empty() || fields.iter().any(|f| f.ndim() != grid.ndim()) {
            return Err(FlowError::Invalid("fields must be nonempty and match the grid dimension".into()));
        }
        let h = grid.min_spacing();
        let mut lipschitz = 0.0f64;
        let mut max_dual = vec![0.0f64; fields.len()];
        for node in grid.nodes() {
            let x = grid.point(node);
            for (k, f) in fields.iter().enumerate() {
                lipschitz = lipschitz.max(real_spectral_norm(&jacobian(f.as_ref(), &x, h)));
                let d = dual_norm(sym, &x, &f.eval(&x), opts)?;
                match d.value() {
                    Some(v) if v <= 1.0 + tol => max_dual[k] = max_dual[k].max(v),
                    other => return Err(FlowError::NotSubunit { index: k, node, value: other.unwrap_or(f64::INFINITY) }),
                }
            }
        }
        if !lipschitz.is_finite() {
            return Err(FlowError::Invalid("Lipschitz constant is not finite".into()));
        }
        Ok(Self { grid, fields, lipschitz, max_dual })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn fields(&self) -> &[Arc<dyn VectorField>] {
        &self.fields
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// Largest `P*(X_k)` seen over the nodes, per field.
    pub fn max_dual(&self) -> &[f64] {
        &self.max_dual
    }

    fn first_match(&self, x: &[f64], target: &[f64], eps: f64) -> Option<usize> {
        self.fields.iter().position(|f| {
            let d2: f64 = f.eval(x).iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() <= eps
        })
    }
}

/// Concatenation of flow curves.
#[derive(Clone, Debug)]
pub struct PiecewiseFlowCurve {
    /// `breakpoints[i]..breakpoints[i + 1]` is piece `i`.
    pub breakpoints: Vec<f64>,
    pub active: Vec<usize>,
    pub curve: Curve,
    /// Active field of the segment ending at each sample (the first sample
    /// repeats the first piece).
    pub sample_field: Vec<usize>,
}

impl PiecewiseFlowCurve {
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        let n = self.curve.ndim();
        let header: Vec<String> =
            std::iter::once("t".to_string()).chain((1..=n).map(|i| format!("x{i}"))).chain(std::iter::once("field".into())).collect();
        writeln!(out, "{}", header.join(","))?;
        for ((t, p), k) in self.curve.times().iter().zip(self.curve.points()).zip(&self.sample_field) {
            let coords: Vec<String> = p.iter().map(|c| c.to_string()).collect();
            writeln!(out, "{t},{},{k}", coords.join(","))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ApproxOptions {
    /// Largest RK4 step used for `delta`.
    pub step: f64,
    /// Slack allowed on top of the bound for integration error.
    pub tol: f64,
    /// Directions used to measure `kappa`.
    pub sweep: usize,
    pub seed: u64,
}

impl Default for ApproxOptions {
    fn default() -> Self {
        Self { step: 1e-3, tol: 1e-8, sweep: 360, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct FlowApproximation {
    pub delta: PiecewiseFlowCurve,
    pub bound: f64,
    /// `|delta(T) - gamma(T)|`.
    pub error: f64,
    pub kappa: f64,
    pub lipschitz: f64,
    /// Time spent on each field per block under `nu_1` and under the
    /// rearranged `nu_2`.
    pub occupancy_nu1: Vec<BTreeMap<usize, f64>>,
    pub occupancy_nu2: Vec<BTreeMap<usize, f64>>,
}

/// `e^{LT} r0 + 2 (kappa T / N + eps / L)(e^{LT} - 1)`, read at `L = 0` as
/// its limit `r0 + 2 eps T`.
pub fn approximation_bound(lipschitz: f64, t: f64, n: usize, kappa: f64, eps: f64, r0: f64) -> f64 {
    let lt = lipschitz * t;
    let growth = lt.exp_m1();
    let eps_term = if lipschitz > 0.0 { eps / lipschitz * growth } else { eps * t };
    lt.exp() * r0 + 2.0 * (kappa * t / n as f64 * growth + eps_term)
}

/// `sup |v| / P*(v)`, which equals `sup_{|xi| = 1} P(xi)`, over the given
/// nodes and a direction sweep.
fn measure_kappa(sym: &SymbolField, nodes: &[usize], opts: &ApproxOptions) -> f64 {
    let n = sym.n();
    let mut dirs: Vec<Vec<f64>> = (0..n)
        .map(|a| {
            let mut e = vec![0.0; n];
            e[a] = 1.0;
            e
        })
        .collect();
    if n == 2 {
        dirs.extend(half_circle(opts.sweep).into_iter().map(|d| d.to_vec()));
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        for _ in 0..opts.sweep {
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
            if norm > 1e-3 {
                dirs.push(v.into_iter().map(|c| c / norm).collect());
            }
        }
    }
    nodes
        .iter()
        .map(|&node| {
            let c = sym.coefficients_at_node(node);
            dirs.iter().map(|d| c.seminorm(d)).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// Replaces the subunit curve `gamma` on `[0, T]` by a concatenation of flow
/// curves of the set, started from `x`, following the field-matching and
/// block rearrangement construction with `N` blocks.
pub fn approx_by_flows(
    sym: &SymbolField,
    gamma: &Curve,
    set: &VectorFieldSet,
    blocks: usize,
    eps: f64,
    x: &[f64],
    opts: &ApproxOptions,
) -> Result<FlowApproximation, FlowError> {
    if blocks == 0 || !(eps > 0.0) || !(opts.step > 0.0) {
        return Err(FlowError::Invalid("need N >= 1, eps > 0 and a positive step".into()));
    }
    if sym.grid() != set.grid() || gamma.ndim() != sym.n() || x.len() != sym.n() {
        return Err(FlowError::Invalid("curve, start point, symbol and field set must share the grid".into()));
    }
    let grid = set.grid();
    if let Some(p) = gamma.points().iter().find(|p| !grid.contains(p)) {
        return Err(FieldError::OutOfBox { point: p.clone() }.into());
    }
    if !grid.contains(x) {
        return Err(FlowError::BoxExit { time: 0.0 });
    }
    let t0 = gamma.times()[0];
    let total = gamma.duration();
    let d = total / blocks as f64;
    let anchors: Vec<Vec<f64>> = (0..=blocks).map(|j| gamma.position(t0 + j as f64 * d)).collect();

    // Atoms: curve segments cut at block boundaries. gamma' is constant on
    // each segment and nu_0 is read at the segment midpoint.
    let mut occupancy_nu1 = vec![BTreeMap::<usize, f64>::new(); blocks];
    let block_of = |t: f64| (((t - t0) / d).floor() as usize).min(blocks - 1);
    for i in 0..gamma.segments() {
        let (a, b) = (gamma.times()[i], gamma.times()[i + 1]);
        let v = gamma.velocity(i);
        let nu0 = set.first_match(&gamma.midpoint(i), &v, eps);
        let slack = 1e-12 * total;
        let mut cuts = vec![a];
        for j in (block_of(a) + 1)..=block_of(b).min(blocks - 1) {
            let c = t0 + j as f64 * d;
            if c > a + slack && c < b - slack {
                cuts.push(c);
            }
        }
        cuts.push(b);
        for w in cuts.windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            let nu0 = nu0.ok_or(FlowError::NoMatchingField { time: mid })?;
            let j = block_of(mid);
            let anchor = &anchors[j];
            let target = set.fields[nu0].eval(anchor);
            let nu1 = set.first_match(anchor, &target, eps).unwrap_or(nu0);
            *occupancy_nu1[j].entry(nu1).or_insert(0.0) += w[1] - w[0];
        }
    }

    // nu_2: within each block, fields in increasing index order with the
    // same occupation times as nu_1.
    let mut breakpoints = vec![0.0];
    let mut active = Vec::new();
    let mut times = vec![0.0];
    let mut points = vec![x.to_vec()];
    let mut sample_field = Vec::new();
    let mut occupancy_nu2 = vec![BTreeMap::<usize, f64>::new(); blocks];
    let mut pos = x.to_vec();
    for (j, occ) in occupancy_nu1.iter().enumerate() {
        let block_start = j as f64 * d;
        let mut cursor = 0.0;
        let measured: f64 = occ.values().sum();
        let pieces: Vec<(usize, f64)> = occ.iter().filter(|(_, &m)| m > 0.0).map(|(&k, &m)| (k, m)).collect();
        for (p, &(k, m)) in pieces.iter().enumerate() {
            // Pin the block end exactly so pieces tile [0, T].
            let end = if p + 1 == pieces.len() { d } else { (cursor + m * d / measured).min(d) };
            let len = end - cursor;
            if len <= 0.0 {
                continue;
            }
            let start = block_start + cursor;
            let before = times.len();
            integrate(set.fields[k].as_ref(), &pos, start, len, opts.step, Some(grid), &mut times, &mut points).map_err(|e| match e {
                FlowError::BoxExit { time } => FlowError::BoxExit { time: time + t0 },
                e => e,
            })?;
            sample_field.extend(std::iter::repeat_n(k, times.len() - before));
            pos = points.last().unwrap().clone();
            *occupancy_nu2[j].entry(k).or_insert(0.0) += len;
            cursor = end;
            breakpoints.push(block_start + end);
            active.push(k);
        }
    }
    sample_field.insert(0, *sample_field.first().unwrap_or(&0));
    let times: Vec<f64> = times.into_iter().map(|t| t + t0).collect();
    let breakpoints = breakpoints.into_iter().map(|t| t + t0).collect();
    let curve = Curve::new(times, points)?;

    let mut nodes: Vec<usize> = gamma.points().iter().chain(curve.points()).map(|p| grid.nearest_node(p)).collect();
    nodes.sort_unstable();
    nodes.dedup();
    let kappa = measure_kappa(sym, &nodes, opts);
    let lipschitz = set.lipschitz();
    let r0 = x.iter().zip(gamma.start()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let bound = approximation_bound(lipschitz, total, blocks, kappa, eps, r0);
    let error = curve.end().iter().zip(gamma.end()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    if error > bound + opts.tol {
        return Err(FlowError::BoundExceeded { error, bound });
    }
    Ok(FlowApproximation {
        delta: PiecewiseFlowCurve { breakpoints, active, curve, sample_field },
        bound,
        error,
        kappa,
        lipschitz,
        occupancy_nu1,
        occupancy_nu2,
    })
}

/// Concatenation of flows of `fields[k]` for the given `(k, duration)`
/// schedule, as a single curve.
pub fn flow_schedule(fields: &[Arc<dyn VectorField>], x0: &[f64], schedule: &[(usize, f64)], step: f64) -> Result<Curve, FlowError> {
    let mut times = vec![0.0];
    let mut points = vec![x0.to_vec()];
    for &(k, len) in schedule {
        let f = fields.get(k).ok_or_else(|| FlowError::Invalid(format!("no field {k}")))?;
        if !(len > 0.0) {
            return Err(FlowError::Invalid("durations must be positive".into()));
        }
        let start = *times.last().unwrap();
        let from = points.last().unwrap().clone();
        integrate(f.as_ref(), &from, start, len, step, f.domain(), &mut times, &mut points)?;
    }
    Ok(Curve::new(times, points)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gallery::{diagonal_shift, riemannian};
    use crate::geometry::is_subunit;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use std::f64::consts::FRAC_PI_2;

    fn arc(f: AnalyticField) -> Arc<dyn VectorField> {
        Arc::new(f)
    }

    fn grushin_pair() -> Vec<Arc<dyn VectorField>> {
        vec![arc(AnalyticField::constant(vec![1.0, 0.0])), arc(AnalyticField::new(2, |p| vec![0.0, p[0]]))]
    }

    #[test]
    fn zero_field_gives_constant_curve() {
        let c = flow(&AnalyticField::constant(vec![0.0, 0.0]), &[0.3, -0.2], 2.0, 0.1).unwrap();
        assert!(c.points().iter().all(|p| p == &vec![0.3, -0.2]));
    }

    #[test]
    fn unit_field_reaches_one() {
        let c = flow(&AnalyticField::constant(vec![1.0, 0.0]), &[0.0, 0.0], 1.0, 0.25).unwrap();
        assert_eq!(c.end(), &[1.0, 0.0]);
    }

    #[test]
    fn rotation_quarter_turn() {
        let rot = AnalyticField::new(2, |p| vec![-p[1], p[0]]);
        let c = flow(&rot, &[1.0, 0.0], FRAC_PI_2, 1e-3).unwrap();
        assert!(c.end()[0].abs() < 1e-8 && (c.end()[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn rk4_error_is_fourth_order() {
        let rot = AnalyticField::new(2, |p| vec![-p[1], p[0]]);
        let err = |step: f64| {
            let c = flow(&rot, &[1.0, 0.0], 2.0, step).unwrap();
            (c.end()[0] - 2f64.cos()).hypot(c.end()[1] - 2f64.sin())
        };
        let ratio = err(0.1) / err(0.05);
        assert!(ratio > 14.0 && ratio < 18.0, "{ratio}");
    }

    #[test]
    fn box_exit_reports_time() {
        let grid = Grid::cube(2, -1.0, 1.0, 8).unwrap();
        let f = AnalyticField::constant(vec![1.0, 0.0]).on(grid);
        match flow(&f, &[0.0, 0.0], 3.0, 0.1) {
            Err(FlowError::BoxExit { time }) => assert!((time - 1.0).abs() <= 0.1 + 1e-12, "{time}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn brackets_of_simple_fields() {
        let fields = grushin_pair();
        let b = lie_bracket(fields[0].as_ref(), fields[1].as_ref(), &[0.2, 0.4], 1e-3).unwrap();
        assert!(b[0].abs() < 1e-12 && (b[1] - 1.0).abs() < 1e-9, "{b:?}");
        let c1 = AnalyticField::constant(vec![1.0, 2.0]);
        let c2 = AnalyticField::constant(vec![-3.0, 0.5]);
        assert_eq!(lie_bracket(&c1, &c2, &[0.0, 0.0], 0.1).unwrap(), vec![0.0, 0.0]);
        let curl = AnalyticField::new(2, |p| vec![p[1] * p[1], p[0].sin()]);
        assert_eq!(lie_bracket(&curl, &curl, &[0.3, 0.1], 1e-2).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn bracket_is_second_order() {
        // [X, Y] for X = (y^2, 0), Y = (0, sin x) is (-2y sin x, y^2 cos x).
        let x = AnalyticField::new(2, |p| vec![p[1] * p[1], 0.0]);
        let y = AnalyticField::new(2, |p| vec![0.0, p[0].sin()]);
        let p = [0.7, 0.4];
        let p: [f64; 2] = p;
        let exact = [-2.0 * p[1] * p[0].sin(), p[1] * p[1] * p[0].cos()];
        let err = |h: f64| {
            let b = lie_bracket(&x, &y, &p, h).unwrap();
            (b[0] - exact[0]).hypot(b[1] - exact[1])
        };
        let ratio = err(0.1) / err(0.05);
        assert!(ratio > 3.5 && ratio < 4.5, "{ratio}");
    }

    #[test]
    fn bracket_near_boundary_is_rejected() {
        let grid = Grid::cube(2, -1.0, 1.0, 8).unwrap();
        let f = AnalyticField::constant(vec![1.0, 0.0]).on(grid);
        assert!(matches!(lie_bracket(&f, &f, &[0.95, 0.0], 0.1), Err(FlowError::NearBoundary { .. })));
    }

    #[test]
    fn polynomial_grushin_pair_is_bracket_generating() {
        let fields = grushin_pair();
        assert_eq!(hoermander_rank(&fields, &[0.0, 0.0], 1, 1.0 / 32.0, 1e-6).unwrap(), 1);
        assert_eq!(hoermander_rank(&fields, &[0.0, 0.0], 2, 1.0 / 32.0, 1e-6).unwrap(), 2);
        let square = vec![fields[0].clone(), arc(AnalyticField::new(2, |p| vec![0.0, p[0] * p[0]]))];
        assert_eq!(hoermander_rank(&square, &[0.0, 0.0], 2, 1.0 / 32.0, 1e-6).unwrap(), 1);
        assert_eq!(hoermander_rank(&square, &[0.0, 0.0], 3, 1.0 / 32.0, 1e-6).unwrap(), 2);
    }

    #[test]
    fn flat_grushin_pair_is_not() {
        let fields = vec![
            arc(AnalyticField::constant(vec![1.0, 0.0])),
            arc(AnalyticField::new(2, |p| vec![0.0, if p[0] == 0.0 { 0.0 } else { (-1.0 / (p[0] * p[0])).exp() }])),
        ];
        for depth in 1..=4 {
            assert_eq!(hoermander_rank(&fields, &[0.0, 0.0], depth, 1.0 / 32.0, 1e-6).unwrap(), 1);
        }
        assert_eq!(hoermander_rank(&fields, &[0.5, 0.0], 1, 1.0 / 32.0, 1e-6).unwrap(), 2);
    }

    #[test]
    fn single_field_has_rank_one() {
        let f = vec![arc(AnalyticField::new(2, |p| vec![1.0 + p[1] * p[1], p[0]]))];
        for depth in 1..=3 {
            assert_eq!(hoermander_rank(&f, &[0.1, 0.2], depth, 1e-2, 1e-6).unwrap(), 1);
        }
    }

    #[test]
    fn field_sets_measure_lipschitz_and_subunit() {
        let sym = diagonal_shift(2, Grid::cube(2, -1.0, 1.0, 8).unwrap()).unwrap();
        let axes: Vec<Arc<dyn VectorField>> = AnalyticField::axes(2).into_iter().map(arc).collect();
        let set = VectorFieldSet::new(&sym, axes, 1e-9, &DualNormOptions::default()).unwrap();
        assert_eq!(set.lipschitz(), 0.0);
        assert!(set.max_dual().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let diag = vec![arc(AnalyticField::constant(vec![0.6, 0.6]))];
        assert!(matches!(VectorFieldSet::new(&sym, diag, 1e-9, &DualNormOptions::default()), Err(FlowError::NotSubunit { .. })));
        let lin = vec![arc(AnalyticField::new(2, |p| vec![0.25 * p[1], 0.0]))];
        let set = VectorFieldSet::new(&sym, lin, 1e-9, &DualNormOptions::default()).unwrap();
        assert!((set.lipschitz() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn grid_field_matches_linear_field() {
        let grid = Grid::cube(2, -1.0, 1.0, 8).unwrap();
        let lin = AnalyticField::new(2, |p| vec![p[0] - 2.0 * p[1], 0.5]);
        let g = GridField::from_field(&grid, &lin).unwrap();
        let v = g.eval(&[0.33, -0.71]);
        assert!((v[0] - (0.33 + 1.42)).abs() < 1e-12 && (v[1] - 0.5).abs() < 1e-12);
        assert_eq!(g.eval(&[5.0, 0.0]), g.eval(&[1.0, 0.0]));
    }

    fn modulated_axes() -> Vec<Arc<dyn VectorField>> {
        let s = |p: &[f64]| 0.75 + 0.25 * (p[0] + 2.0 * p[1]).sin();
        vec![
            arc(AnalyticField::modulated(vec![1.0, 0.0], s)),
            arc(AnalyticField::modulated(vec![0.0, 1.0], s)),
            arc(AnalyticField::modulated(vec![-1.0, 0.0], s)),
            arc(AnalyticField::modulated(vec![0.0, -1.0], s)),
        ]
    }

    fn staircase(fields: &[Arc<dyn VectorField>], x0: &[f64], t: f64, steps: usize) -> Curve {
        let schedule: Vec<(usize, f64)> = (0..steps).map(|i| (i % 2, t / steps as f64)).collect();
        flow_schedule(fields, x0, &schedule, 1e-3).unwrap()
    }

    #[test]
    fn flow_curve_of_a_member_is_reproduced() {
        let sym = diagonal_shift(2, Grid::cube(2, -1.0, 1.0, 16).unwrap()).unwrap();
        let fields = modulated_axes();
        let set = VectorFieldSet::new(&sym, fields.clone(), 1e-9, &DualNormOptions::default()).unwrap();
        let gamma = flow(fields[0].as_ref(), &[-0.5, 0.1], 1.0, 1e-3).unwrap();
        let out = approx_by_flows(&sym, &gamma, &set, 10, 1e-6, &[-0.5, 0.1], &ApproxOptions::default()).unwrap();
        assert!(out.error < 1e-10, "{}", out.error);
        assert!(out.delta.active.iter().all(|&k| k == 0));
        let expected = 2.0 * out.kappa / 10.0 * out.lipschitz.exp_m1() + 2.0 * 1e-6 / out.lipschitz * out.lipschitz.exp_m1();
        assert!((out.bound - expected).abs() < 1e-12);
    }

    #[test]
    fn staircase_approximation_improves_with_blocks() {
        let sym = diagonal_shift(2, Grid::cube(2, -1.0, 1.0, 16).unwrap()).unwrap();
        let fields = modulated_axes();
        let set = VectorFieldSet::new(&sym, fields.clone(), 1e-9, &DualNormOptions::default()).unwrap();
        let gamma = staircase(&fields, &[-0.6, -0.6], 1.0, 800);
        let mut errors = Vec::new();
        for n in [25, 50, 100] {
            let out = approx_by_flows(&sym, &gamma, &set, n, 1e-3, &[-0.6, -0.6], &ApproxOptions::default()).unwrap();
            assert!(out.error <= out.bound, "N={n}: {} > {}", out.error, out.bound);
            assert!((out.kappa - 1.0).abs() < 1e-12);
            for (a, b) in out.occupancy_nu1.iter().zip(&out.occupancy_nu2) {
                assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
                for (k, m) in a {
                    assert!((m - b[k]).abs() < 1e-12);
                }
            }
            assert!(is_subunit(&sym, &out.delta.curve, 1e-6, &DualNormOptions::default()).unwrap());
            errors.push(out.error);
        }
        assert!(errors[1] < errors[0] && errors[2] < errors[1], "{errors:?}");
    }

    #[test]
    fn offset_start_with_constant_fields_obeys_gronwall() {
        // Constant fields: delta is gamma translated by x - gamma(0) up to the
        // rearrangement, so the error is exactly |x - gamma(0)|.
        let sym = diagonal_shift(2, Grid::cube(2, -1.0, 1.0, 16).unwrap()).unwrap();
        let fields: Vec<Arc<dyn VectorField>> = AnalyticField::axes(2).into_iter().map(arc).collect();
        let set = VectorFieldSet::new(&sym, fields.clone(), 1e-9, &DualNormOptions::default()).unwrap();
        let schedule: Vec<(usize, f64)> = (0..40).map(|i| ([0, 2, 2, 0][i % 4], 0.025)).collect();
        let gamma = flow_schedule(&fields, &[0.0, 0.0], &schedule, 1e-3).unwrap();
        let h = 0.125;
        let out = approx_by_flows(&sym, &gamma, &set, 4, 1e-9, &[0.0, h], &ApproxOptions::default()).unwrap();
        assert!((out.error - h).abs() < 1e-12);
        assert!(out.bound >= h && out.bound <= h + 1e-8);
    }

    #[test]
    fn missing_field_is_reported() {
        let sym = diagonal_shift(2, Grid::cube(2, -1.0, 1.0, 8).unwrap()).unwrap();
        let fields: Vec<Arc<dyn VectorField>> = AnalyticField::axes(2).into_iter().map(arc).collect();
        let set = VectorFieldSet::new(&sym, fields, 1e-9, &DualNormOptions::default()).unwrap();
        let gamma = Curve::segment(&[0.0, 0.0], &[0.5, 0.5], 0.0, 1.0, 10).unwrap();
        assert!(matches!(
            approx_by_flows(&sym, &gamma, &set, 4, 0.1, &[0.0, 0.0], &ApproxOptions::default()),
            Err(FlowError::NoMatchingField { .. })
        ));
    }

    #[test]
    fn csv_export_has_field_column() {
        let sym = riemannian(Grid::cube(2, -1.0, 1.0, 8).unwrap(), |_| DMatrix::identity(2, 2)).unwrap();
        let fields: Vec<Arc<dyn VectorField>> = AnalyticField::axes(2).into_iter().map(arc).collect();
        let set = VectorFieldSet::new(&sym, fields.clone(), 1e-9, &DualNormOptions::default()).unwrap();
        let gamma = flow_schedule(&fields, &[0.0, 0.0], &[(0, 0.25), (2, 0.25)], 0.05).unwrap();
        let out = approx_by_flows(&sym, &gamma, &set, 1, 1e-9, &[0.0, 0.0], &ApproxOptions::default()).unwrap();
        let mut buf = Vec::new();
        out.delta.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,x1,x2,field");
        assert_eq!(lines.len(), out.delta.curve.times().len() + 1);
        assert!(lines.last().unwrap().ends_with(",2"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn bracket_is_bilinear_and_antisymmetric(a in -2.0f64..2.0, b in -2.0f64..2.0, c in -1.0f64..1.0, px in -0.5f64..0.5, py in -0.5f64..0.5) {
            let f = move |p: &[f64]| vec![(c * p[0]).sin(), p[0] * p[1]];
            let g = move |p: &[f64]| vec![p[1] * p[1], (p[0] - c).cos()];
            let k = move |p: &[f64]| vec![p[0].exp(), c * p[1]];
            let x = AnalyticField::new(2, f);
            let y = AnalyticField::new(2, g);
            let comb = AnalyticField::new(2, move |p| f(p).iter().zip(k(p)).map(|(u, v)| a * u + b * v).collect());
            let z = AnalyticField::new(2, k);
            let h = 1e-3;
            let p = [px, py];
            let xy = lie_bracket(&x, &y, &p, h).unwrap();
            let yx = lie_bracket(&y, &x, &p, h).unwrap();
            prop_assert!(xy.iter().zip(&yx).all(|(u, v)| (u + v).abs() < 1e-9));
            let lhs = lie_bracket(&comb, &y, &p, h).unwrap();
            let zy = lie_bracket(&z, &y, &p, h).unwrap();
            for i in 0..2 {
                prop_assert!((lhs[i] - (a * xy[i] + b * zy[i])).abs() < 1e-6);
            }
        }

        #[test]
        fn rank_is_monotone_in_depth(c in -1.0f64..1.0, px in -0.3f64..0.3) {
            let fields = vec![
                arc(AnalyticField::new(2, move |p| vec![1.0, c * p[1]])),
                arc(AnalyticField::new(2, move |p| vec![0.0, p[0] * p[0] + c * p[0]])),
            ];
            let mut last = 0;
            for depth in 1..=3 {
                let r = hoermander_rank(&fields, &[px, 0.0], depth, 1e-2, 1e-6).unwrap();
                prop_assert!(r >= last);
                last = r;
            }
        }

        #[test]
        fn endpoint_error_never_exceeds_bound(seed in 0u64..1000, n in 2usize..20) {
            let sym = diagonal_shift(2, Grid::cube(2, -1.0, 1.0, 8).unwrap()).unwrap();
            let fields = modulated_axes();
            let set = VectorFieldSet::new(&sym, fields.clone(), 1e-9, &DualNormOptions::default()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let schedule: Vec<(usize, f64)> = (0..12).map(|_| (rng.gen_range(0..4), rng.gen_range(0.01..0.08))).collect();
            let gamma = flow_schedule(&fields, &[0.0, 0.0], &schedule, 5e-3).unwrap();
            let x = [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)];
            let out = approx_by_flows(&sym, &gamma, &set, n, 1e-4, &x, &ApproxOptions { step: 5e-3, ..Default::default() }).unwrap();
            prop_assert!(out.error <= out.bound + 1e-8);
        }
    }
}
