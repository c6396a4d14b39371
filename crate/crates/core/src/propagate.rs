//! Energy-preserving evolution `du/dt = i D u` for formally self-adjoint
//! first-order operators, support tracking against distance fields, and
//! the second-order wave equation through doubling.

use crate::fields::{save_field, CVector, ExtReal, Field, FieldError, Grid};
use crate::geometry::DistanceField;
use crate::linalg::{CMatrix, C64};
use crate::symbol::{double, self_adjointness_defect, SymbolError, SymbolField};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PropagateError {
    #[error(transparent)]
    Symbol(#[from] SymbolError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("symbol is not formally self-adjoint (defect {first:e} first order, {zeroth:e} zeroth order); pass its doubling")]
    NotSelfAdjoint { first: f64, zeroth: f64 },
    #[error("time step {dt} exceeds the stability limit {limit}")]
    Cfl { dt: f64, limit: f64 },
    #[error("energy grew by more than 1% by t = {time}")]
    Unstable { time: f64 },
    #[error("initial support is {margin} from the boundary; the cone needs {needed}")]
    BoundaryReached { margin: f64, needed: f64 },
    #[error("field fibre is {found}, operator fibre is {expected}")]
    Fibre { expected: usize, found: usize },
    #[error("trajectory and distance field live on different grids")]
    GridMismatch,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    /// Wrap-around on every axis.
    Periodic,
    /// Zero outside the grid; the solution must not reach the boundary.
    CompactSupport,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Fourth-order split-form centred differences with classical RK4.
    CenteredRk4,
    /// Dimensionally split first-order upwinding along the eigenvectors of
    /// each coefficient. Exact translation at unit Courant number, but
    /// dissipative below it.
    CharacteristicUpwind,
}

const NO_NODE: usize = usize::MAX;

/// Discrete `i D` acting on flat arrays of `m` complex components per node.
#[derive(Clone, Debug)]
pub struct SkewOperator {
    grid: Grid,
    boundary: Boundary,
    m: usize,
    /// `c_j = i a_j` at node `i` is `coeffs[i * n + j]`.
    coeffs: Vec<CMatrix>,
    /// Skew-Hermitian zeroth-order term per node; `None` when all vanish.
    zeroth: Option<Vec<CMatrix>>,
    /// `nbr[j][i] = [i-2, i-1, i+1, i+2]` along axis `j`.
    nbr: Vec<Vec<[usize; 4]>>,
    speed_sum: f64,
    axis_speed: Vec<f64>,
    max_speed: f64,
}

/// Builds the split-form discretisation of `i D`. `sym` must be formally
/// self-adjoint within `tol` (relative to its largest coefficient).
pub fn discretise_skew(sym: &SymbolField, boundary: Boundary, tol: f64) -> Result<SkewOperator, PropagateError> {
    let grid = sym.grid().clone();
    let n = grid.ndim();
    let (first, zeroth) = self_adjointness_defect(sym)?;
    let scale = grid
        .nodes()
        .map(|i| {
            let c = sym.coefficients_at_node(i);
            c.first.iter().map(CMatrix::max_abs).fold(c.zeroth.max_abs(), f64::max)
        })
        .fold(0.0, f64::max)
        .max(1.0);
    if !(first <= tol * scale && zeroth <= tol * scale) {
        return Err(PropagateError::NotSelfAdjoint { first, zeroth });
    }
    let m = sym.r();
    let ii = C64::new(0.0, 1.0);
    let mut coeffs = Vec::with_capacity(grid.len() * n);
    let mut b = Vec::with_capacity(grid.len());
    let mut speed_sum = 0.0f64;
    let mut axis_speed = vec![0.0f64; n];
    let mut max_speed = 0.0f64;
    for i in grid.nodes() {
        let c = sym.coefficients_at_node(i);
        let mut sum = 0.0;
        let mut sq = 0.0;
        for (j, a) in c.first.iter().enumerate() {
            let norm = a.op_norm();
            sum += norm / grid.spacing()[j];
            sq += norm * norm;
            axis_speed[j] = axis_speed[j].max(norm / grid.spacing()[j]);
            coeffs.push(a.scale(ii));
        }
        speed_sum = speed_sum.max(sum);
        max_speed = max_speed.max(sq.sqrt());
        b.push(c.zeroth.scale(ii));
    }
    let nbr = (0..n).map(|j| neighbour_table(&grid, j, boundary)).collect::<Vec<_>>();

    // Z = i b - 1/2 sum_j d_j c_j, then its skew-Hermitian part.
    let mut zeroth_terms = b;
    for (j, table) in nbr.iter().enumerate() {
        let h = grid.spacing()[j];
        for i in grid.nodes() {
            let at = |k: usize| &coeffs[k * n + j];
            let [m2, m1, p1, p2] = table[i];
            let d = if [m2, m1, p1, p2].iter().all(|&k| k != NO_NODE) {
                let mut acc = (at(p1) - at(m1)).scale_real(8.0);
                acc.axpy(-1.0, at(p2));
                acc.axpy(1.0, at(m2));
                acc.scale_real(1.0 / (12.0 * h))
            } else if m1 != NO_NODE && p1 != NO_NODE {
                (at(p1) - at(m1)).scale_real(0.5 / h)
            } else if p1 != NO_NODE {
                (at(p1) - at(i)).scale_real(1.0 / h)
            } else if m1 != NO_NODE {
                (at(i) - at(m1)).scale_real(1.0 / h)
            } else {
                CMatrix::zeros(m, m)
            };
            zeroth_terms[i].axpy(-0.5, &d);
        }
    }
    let zeroth_terms: Vec<CMatrix> = zeroth_terms.into_iter().map(|z| (&z - &z.adjoint()).scale_real(0.5)).collect();
    let zeroth = if zeroth_terms.iter().any(|z| z.max_abs() > 0.0) { Some(zeroth_terms) } else { None };
    Ok(SkewOperator { grid, boundary, m, coeffs, zeroth, nbr, speed_sum, axis_speed, max_speed })
}

fn neighbour_table(grid: &Grid, axis: usize, boundary: Boundary) -> Vec<[usize; 4]> {
    let dims = grid.dims();
    let stride = grid.stride(axis);
    let len = dims[axis] as isize;
    grid.nodes()
        .map(|i| {
            let k = grid.multi_index(i)[axis] as isize;
            [-2isize, -1, 1, 2].map(|o| {
                let t = k + o;
                let wrapped = match boundary {
                    Boundary::Periodic => Some(t.rem_euclid(len)),
                    Boundary::CompactSupport => (0..len).contains(&t).then_some(t),
                };
                wrapped.map_or(NO_NODE, |t| (i as isize + (t - k) * stride as isize) as usize)
            })
        })
        .collect()
}

impl SkewOperator {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn fibre(&self) -> usize {
        self.m
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    /// `max_x sqrt(sum_j |a_j(x)|^2)`, an upper bound on `P(xi)` for unit `xi`.
    pub fn max_speed(&self) -> f64 {
        self.max_speed
    }

    /// `max_x sum_j |a_j(x)| / h_j`.
    pub fn speed_sum(&self) -> f64 {
        self.speed_sum
    }

    /// The same discretisation of `-i D`.
    pub fn negated(&self) -> Self {
        let mut out = self.clone();
        out.coeffs.iter_mut().for_each(|c| *c = c.scale_real(-1.0));
        if let Some(z) = &mut out.zeroth {
            z.iter_mut().for_each(|c| *c = c.scale_real(-1.0));
        }
        out
    }

    /// `out = A u`.
    pub fn apply(&self, u: &[C64], out: &mut [C64]) {
        let m = self.m;
        let n = self.grid.ndim();
        let len = self.grid.len();
        assert_eq!(u.len(), len * m);
        let zero = C64::new(0.0, 0.0);
        out.iter_mut().for_each(|o| *o = zero);
        let mut w = vec![zero; len * m];
        let mut du = vec![zero; m];
        let mut tmp = vec![zero; m];
        for j in 0..n {
            let h = self.grid.spacing()[j];
            let table = &self.nbr[j];
            for i in 0..len {
                self.coeffs[i * n + j].mul_vec_into(&u[i * m..(i + 1) * m], &mut w[i * m..(i + 1) * m]);
            }
            let scale = 0.5 / (12.0 * h);
            for i in 0..len {
                let [m2, m1, p1, p2] = table[i];
                let diff = |f: &[C64], out: &mut [C64]| {
                    for (c, slot) in out.iter_mut().enumerate() {
                        let pick = |node: usize| if node == NO_NODE { zero } else { f[node * m + c] };
                        *slot = (pick(p1) - pick(m1)) * 8.0 - pick(p2) + pick(m2);
                    }
                };
                diff(u, &mut du);
                self.coeffs[i * n + j].mul_vec_into(&du, &mut tmp);
                diff(&w, &mut du);
                for c in 0..m {
                    out[i * m + c] += (tmp[c] + du[c]) * scale;
                }
            }
        }
        if let Some(z) = &self.zeroth {
            for i in 0..len {
                z[i].mul_vec_into(&u[i * m..(i + 1) * m], &mut tmp);
                for c in 0..m {
                    out[i * m + c] += tmp[c];
                }
            }
        }
    }

    fn rk4_step(&self, u: &mut [C64], dt: f64, scratch: &mut [Vec<C64>; 3]) {
        let [k, stage, acc] = scratch;
        acc.copy_from_slice(u);
        for (s, (w_stage, w_acc)) in [(0.5, 1.0 / 6.0), (0.5, 1.0 / 3.0), (1.0, 1.0 / 3.0), (0.0, 1.0 / 6.0)].into_iter().enumerate() {
            if s == 0 {
                self.apply(u, k);
            } else {
                self.apply(stage, k);
            }
            for idx in 0..u.len() {
                acc[idx] += k[idx] * (dt * w_acc);
                stage[idx] = u[idx] + k[idx] * (dt * w_stage);
            }
        }
        u.copy_from_slice(acc);
    }

    fn upwind_data(&self) -> Vec<Vec<(DMatrix<C64>, Vec<f64>)>> {
        let n = self.grid.ndim();
        (0..n)
            .map(|j| {
                (0..self.grid.len())
                    .map(|i| {
                        let c = &self.coeffs[i * n + j];
                        let mat = DMatrix::from_fn(self.m, self.m, |a, b| c[(a, b)]);
                        let eig = nalgebra::SymmetricEigen::new(mat.hermitian_part());
                        (eig.eigenvectors, eig.eigenvalues.iter().copied().collect())
                    })
                    .collect()
            })
            .collect()
    }

    fn upwind_step(&self, u: &mut [C64], dt: f64, eig: &[Vec<(DMatrix<C64>, Vec<f64>)>], cayley: Option<&[CMatrix]>) {
        let m = self.m;
        let zero = C64::new(0.0, 0.0);
        for (j, per_node) in eig.iter().enumerate() {
            let r = dt / self.grid.spacing()[j];
            let prev = u.to_vec();
            for (i, (v, lambda)) in per_node.iter().enumerate() {
                let [_, m1, p1, _] = self.nbr[j][i];
                let pick = |node: usize, c: usize| if node == NO_NODE { zero } else { prev[node * m + c] };
                let fwd = nalgebra::DVector::from_fn(m, |c, _| pick(p1, c) - prev[i * m + c]);
                let bwd = nalgebra::DVector::from_fn(m, |c, _| prev[i * m + c] - pick(m1, c));
                let (wf, wb) = (v.adjoint() * fwd, v.adjoint() * bwd);
                let mixed = nalgebra::DVector::from_fn(m, |k, _| wf[k] * lambda[k].max(0.0) + wb[k] * lambda[k].min(0.0));
                let delta = v * mixed;
                for c in 0..m {
                    u[i * m + c] += delta[c] * r;
                }
            }
        }
        if let Some(cay) = cayley {
            let mut tmp = vec![zero; m];
            for (i, q) in cay.iter().enumerate() {
                q.mul_vec_into(&u[i * m..(i + 1) * m], &mut tmp);
                u[i * m..(i + 1) * m].copy_from_slice(&tmp);
            }
        }
    }

    /// `(I - dt/2 Z)^-1 (I + dt/2 Z)` per node, unitary for skew `Z`.
    fn cayley(&self, dt: f64) -> Option<Vec<CMatrix>> {
        let m = self.m;
        self.zeroth.as_ref().map(|zs| {
            zs.iter()
                .map(|z| {
                    let zm = DMatrix::from_fn(m, m, |a, b| z[(a, b)] * (0.5 * dt));
                    let id = DMatrix::<C64>::identity(m, m);
                    let q = (&id - &zm).lu().solve(&(&id + &zm)).expect("I - dt/2 Z is invertible for skew Z");
                    CMatrix::from_fn(m, m, |a, b| q[(a, b)])
                })
                .collect()
        })
    }

    /// Largest stable time step for `scheme`.
    pub fn stability_limit(&self, scheme: Scheme) -> f64 {
        match scheme {
            // RK4 covers [-2.82i, 2.82i]; the fourth-order stencil reaches
            // 1.372 / h, leaving 2.0 / sum_j (|a_j| / h_j).
            Scheme::CenteredRk4 => 2.0 / self.speed_sum,
            Scheme::CharacteristicUpwind => 1.0 / self.axis_speed.iter().copied().fold(0.0, f64::max),
        }
    }

    /// Default step: a quarter of the limit for RK4, unit Courant number
    /// for upwinding.
    pub fn default_dt(&self, scheme: Scheme) -> f64 {
        match scheme {
            Scheme::CenteredRk4 => 0.125 * self.stability_limit(scheme),
            Scheme::CharacteristicUpwind => self.stability_limit(scheme),
        }
    }
}

fn flatten(u: &Field<CVector>) -> Vec<C64> {
    u.values().iter().flat_map(|v| v.0.iter().copied()).collect()
}

fn unflatten(grid: &Grid, m: usize, u: &[C64]) -> Field<CVector> {
    Field::new(grid.clone(), u.chunks(m).map(|c| CVector(c.to_vec())).collect()).expect("finite state")
}

fn flat_energy(grid: &Grid, u: &[C64]) -> f64 {
    u.iter().map(|z| z.norm_sqr()).sum::<f64>() * grid.spacing().iter().product::<f64>()
}

/// `||u||_2^2` under the discrete Lebesgue measure.
pub fn energy(u: &Field<CVector>) -> f64 {
    flat_energy(u.grid(), &flatten(u))
}

#[derive(Clone, Debug)]
pub struct WaveState {
    pub t: f64,
    pub u: Field<CVector>,
    pub energy: f64,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub dt: f64,
    pub scheme: Scheme,
    pub states: Vec<WaveState>,
}

#[derive(Clone, Debug)]
pub struct EvolveOptions {
    pub scheme: Scheme,
    /// Defaults to [`SkewOperator::default_dt`].
    pub dt: Option<f64>,
    /// Keep every `record_every`-th state (the last one is always kept).
    pub record_every: usize,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self { scheme: Scheme::CenteredRk4, dt: None, record_every: 1 }
    }
}

impl Trajectory {
    pub fn initial_energy(&self) -> f64 {
        self.states[0].energy
    }

    /// `max_t |E(t) - E(0)| / E(0)`; zero for zero data.
    pub fn max_relative_drift(&self) -> f64 {
        let e0 = self.initial_energy();
        if e0 == 0.0 {
            return 0.0;
        }
        self.states.iter().map(|s| (s.energy - e0).abs() / e0).fold(0.0, f64::max)
    }

    pub fn last(&self) -> &WaveState {
        self.states.last().unwrap()
    }

    /// One binary field file per state plus a TOML manifest listing them.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf, PropagateError> {
        #[derive(Serialize)]
        struct Entry {
            t: f64,
            energy: f64,
            file: String,
        }
        #[derive(Serialize)]
        struct Manifest {
            dt: f64,
            scheme: Scheme,
            states: Vec<Entry>,
        }
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut states = Vec::new();
        for (k, s) in self.states.iter().enumerate() {
            let file = format!("{stem}.{k:05}.sfpf");
            save_field(&s.u, dir.join(&file))?;
            states.push(Entry { t: s.t, energy: s.energy, file });
        }
        let text =
            toml::to_string(&Manifest { dt: self.dt, scheme: self.scheme, states }).map_err(|e| PropagateError::Manifest(e.to_string()))?;
        let path = dir.join(format!("{stem}.toml"));
        std::fs::write(&path, text)?;
        Ok(path)
    }

    /// `t,energy[,radius]` rows; `radii` must match the states.
    pub fn write_csv(&self, radii: Option<&[(f64, ExtReal)]>, mut out: impl Write) -> Result<(), PropagateError> {
        if radii.is_some_and(|r| r.len() != self.states.len()) {
            return Err(PropagateError::Invalid("one radius per state".into()));
        }
        writeln!(out, "{}", if radii.is_some() { "t,energy,radius" } else { "t,energy" })?;
        for (k, s) in self.states.iter().enumerate() {
            match radii {
                Some(r) => writeln!(out, "{},{},{}", s.t, s.energy, r[k].1)?,
                None => writeln!(out, "{},{}", s.t, s.energy)?,
            }
        }
        Ok(())
    }
}

fn support_margin(u: &Field<CVector>) -> Option<f64> {
    let grid = u.grid();
    let mut margin: Option<f64> = None;
    for i in grid.nodes().filter(|&i| u[i].norm() > 0.0) {
        let idx = grid.multi_index(i);
        let d = (0..grid.ndim()).map(|a| idx[a].min(grid.dims()[a] - 1 - idx[a]) as f64 * grid.spacing()[a]).fold(f64::INFINITY, f64::min);
        margin = Some(margin.map_or(d, |m| m.min(d)));
    }
    margin
}

fn steps_for(t_end: f64, dt: f64) -> usize {
    let exact = t_end / dt;
    let rounded = exact.round();
    if (exact - rounded).abs() < 1e-9 * exact.max(1.0) {
        (rounded as usize).max(1)
    } else {
        exact.ceil() as usize
    }
}

/// Integrates `du/dt = A u` on `[0, t_end]`.
pub fn evolve(op: &SkewOperator, u0: &Field<CVector>, t_end: f64, opts: &EvolveOptions) -> Result<Trajectory, PropagateError> {
    if u0.grid() != op.grid() {
        return Err(PropagateError::GridMismatch);
    }
    let (m, _) = u0.value_shape();
    if m != op.m {
        return Err(PropagateError::Fibre { expected: op.m, found: m });
    }
    if !(t_end > 0.0) || !t_end.is_finite() {
        return Err(PropagateError::Invalid("end time must be positive".into()));
    }
    let limit = op.stability_limit(opts.scheme);
    let dt = opts.dt.unwrap_or_else(|| op.default_dt(opts.scheme));
    if !(dt > 0.0) || dt > limit * (1.0 + 1e-12) {
        return Err(PropagateError::Cfl { dt, limit });
    }
    if op.boundary == Boundary::CompactSupport {
        let needed = op.max_speed * t_end + 2.0 * op.grid.spacing().iter().copied().fold(0.0, f64::max);
        if let Some(margin) = support_margin(u0) {
            if margin < needed {
                return Err(PropagateError::BoundaryReached { margin, needed });
            }
        }
    }
    let steps = steps_for(t_end, dt);
    let dt = t_end / steps as f64;
    let grid = op.grid.clone();
    let mut u = flatten(u0);
    let e0 = flat_energy(&grid, &u);
    let mut states = vec![WaveState { t: 0.0, u: u0.clone(), energy: e0 }];
    let every = opts.record_every.max(1);
    let mut scratch = [vec![C64::new(0.0, 0.0); u.len()], vec![C64::new(0.0, 0.0); u.len()], vec![C64::new(0.0, 0.0); u.len()]];
    let upwind = (opts.scheme == Scheme::CharacteristicUpwind).then(|| (op.upwind_data(), op.cayley(dt)));
    for step in 1..=steps {
        match &upwind {
            None => op.rk4_step(&mut u, dt, &mut scratch),
            Some((eig, cay)) => op.upwind_step(&mut u, dt, eig, cay.as_deref()),
        }
        let t = t_end * step as f64 / steps as f64;
        let e = flat_energy(&grid, &u);
        if !e.is_finite() || e > 1.01 * e0 && e0 > 0.0 || e0 == 0.0 && e > 0.0 {
            return Err(PropagateError::Unstable { time: t });
        }
        if step % every == 0 || step == steps {
            states.push(WaveState { t, u: unflatten(&grid, m, &u), energy: e });
        }
    }
    Ok(Trajectory { dt, scheme: opts.scheme, states })
}

/// Per state, the largest distance from the initial set among nodes where
/// `|u| > theta_rel * max |u|`. Zero states have radius 0.
pub fn support_radius(traj: &Trajectory, df: &DistanceField, theta_rel: f64) -> Result<Vec<(f64, ExtReal)>, PropagateError> {
    traj.states
        .iter()
        .map(|s| {
            if s.u.grid() != df.grid() {
                return Err(PropagateError::GridMismatch);
            }
            Ok((s.t, state_radius(&s.u, df, theta_rel)))
        })
        .collect()
}

fn state_radius(u: &Field<CVector>, df: &DistanceField, theta_rel: f64) -> ExtReal {
    let peak = u.values().iter().map(CVector::norm).fold(0.0, f64::max);
    if peak == 0.0 {
        return ExtReal::ZERO;
    }
    u.values().iter().enumerate().filter(|(_, v)| v.norm() > theta_rel * peak).map(|(i, _)| df.value(i)).max().unwrap_or(ExtReal::ZERO)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConeReport {
    pub slack: f64,
    /// `max_t radius(t) - |t|`.
    pub max_excess: f64,
    pub violations: usize,
}

/// Compares `radius(t)` with `|t| + slack`.
pub fn cone_check(radii: &[(f64, ExtReal)], slack: f64) -> ConeReport {
    let mut max_excess = f64::NEG_INFINITY;
    let mut violations = 0;
    for &(t, r) in radii {
        let excess = r.to_f64() - t.abs();
        max_excess = max_excess.max(excess);
        if excess > slack {
            violations += 1;
        }
    }
    ConeReport { slack, max_excess, violations }
}

#[derive(Clone, Debug)]
pub struct SecondOrderTrajectory {
    /// States of `u`, each with `energy = ||u||^2`.
    pub u: Trajectory,
    /// `||du/dt||^2 + ||D u||^2` per state.
    pub energy: Vec<f64>,
}

impl SecondOrderTrajectory {
    pub fn max_relative_drift(&self) -> f64 {
        let e0 = self.energy[0];
        if e0 == 0.0 {
            return 0.0;
        }
        self.energy.iter().map(|e| (e - e0).abs() / e0).fold(0.0, f64::max)
    }
}

/// Solves `u'' = -D^+ D u`, `u(0) = f`, `u'(0) = g` through the doubled
/// system `v = (u', i D u)`, `v' = i double(D) v`, integrating `u' = v_1` alongside.
pub fn wave_second_order(
    sym: &SymbolField,
    f: &Field<CVector>,
    g: &Field<CVector>,
    t_end: f64,
    boundary: Boundary,
    dt: Option<f64>,
) -> Result<SecondOrderTrajectory, PropagateError> {
    let r = sym.r();
    let s = sym.s();
    for x in [f, g] {
        if x.grid() != sym.grid() {
            return Err(PropagateError::GridMismatch);
        }
        if x.value_shape().0 != r {
            return Err(PropagateError::Fibre { expected: r, found: x.value_shape().0 });
        }
    }
    if !(t_end > 0.0) || !t_end.is_finite() {
        return Err(PropagateError::Invalid("end time must be positive".into()));
    }
    let op = discretise_skew(&double(sym)?, boundary, 1e-8)?;
    let limit = op.stability_limit(Scheme::CenteredRk4);
    let dt = dt.unwrap_or_else(|| op.default_dt(Scheme::CenteredRk4));
    if !(dt > 0.0) || dt > limit * (1.0 + 1e-12) {
        return Err(PropagateError::Cfl { dt, limit });
    }
    let grid = op.grid.clone();
    if boundary == Boundary::CompactSupport {
        let needed = op.max_speed * t_end + 2.0 * grid.spacing().iter().copied().fold(0.0, f64::max);
        for x in [f, g] {
            if let Some(margin) = support_margin(x) {
                if margin < needed {
                    return Err(PropagateError::BoundaryReached { margin, needed });
                }
            }
        }
    }
    let m = r + s;
    let len = grid.len();
    let zero = C64::new(0.0, 0.0);
    let lift = |x: &Field<CVector>| -> Vec<C64> {
        let mut out = vec![zero; len * m];
        for i in 0..len {
            out[i * m..i * m + r].copy_from_slice(&x[i].0);
        }
        out
    };
    // The lower block of A (f, 0) is the discrete i D f.
    let mut v = vec![zero; len * m];
    op.apply(&lift(f), &mut v);
    let gl = lift(g);
    for i in 0..len {
        v[i * m..i * m + r].copy_from_slice(&gl[i * m..i * m + r]);
    }
    let mut u = flatten(f);
    let upper = |v: &[C64], out: &mut Vec<C64>| {
        out.clear();
        for i in 0..len {
            out.extend_from_slice(&v[i * m..i * m + r]);
        }
    };

    let steps = steps_for(t_end, dt);
    let dt = t_end / steps as f64;
    let e0 = flat_energy(&grid, &v);
    let mut states = vec![WaveState { t: 0.0, u: f.clone(), energy: flat_energy(&grid, &u) }];
    let mut energies = vec![e0];
    let mut kv = vec![zero; v.len()];
    let mut stage = v.clone();
    let mut acc_v = v.clone();
    let mut acc_u = u.clone();
    let mut ku = Vec::with_capacity(u.len());
    for step in 1..=steps {
        acc_v.copy_from_slice(&v);
        acc_u.copy_from_slice(&u);
        stage.copy_from_slice(&v);
        for (w_stage, w_acc) in [(0.5, 1.0 / 6.0), (0.5, 1.0 / 3.0), (1.0, 1.0 / 3.0), (0.0, 1.0 / 6.0)] {
            op.apply(&stage, &mut kv);
            upper(&stage, &mut ku);
            for idx in 0..v.len() {
                acc_v[idx] += kv[idx] * (dt * w_acc);
            }
            for idx in 0..u.len() {
                acc_u[idx] += ku[idx] * (dt * w_acc);
            }
            for idx in 0..v.len() {
                stage[idx] = v[idx] + kv[idx] * (dt * w_stage);
            }
        }
        v.copy_from_slice(&acc_v);
        u.copy_from_slice(&acc_u);
        let t = t_end * step as f64 / steps as f64;
        let e = flat_energy(&grid, &v);
        if !e.is_finite() || e0 > 0.0 && e > 1.01 * e0 {
            return Err(PropagateError::Unstable { time: t });
        }
        states.push(WaveState { t, u: unflatten(&grid, r, &u), energy: flat_energy(&grid, &u) });
        energies.push(e);
    }
    Ok(SecondOrderTrajectory { u: Trajectory { dt, scheme: Scheme::CenteredRk4, states }, energy: energies })
}
