use super::{Coefficients, SymbolError, SymbolField};
use crate::fields::ExtReal;
use crate::linalg::{least_norm_solve, real_svd_full_left};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

#[derive(Clone, Debug, PartialEq)]
pub struct DualNormOptions {
    /// A vector is infinite-norm when its component outside `F(P*_x)`
    /// exceeds `tol * |v|` (measured after row equilibration).
    pub tol: f64,
    /// Relative accuracy target of the supremum search.
    pub rel_tol: f64,
    /// Directions in the planar sweep.
    pub sweep: usize,
    /// Random starts of the ascent in rank three and up.
    pub starts: usize,
    pub seed: u64,
}

impl Default for DualNormOptions {
    fn default() -> Self {
        Self { tol: 1e-9, rel_tol: 1e-9, sweep: 720, starts: 32, seed: 0 }
    }
}

const RANK_CUTOFF: f64 = 1e-10;

/// `P*_x(v) = sup { |<eta, v>| / P_x(eta) }`, infinite off `F(P*_x)`.
pub fn dual_norm(sym: &SymbolField, x: &[f64], v: &[f64], opts: &DualNormOptions) -> Result<ExtReal, SymbolError> {
    sym.check_covector(v)?;
    if let Some(root) = sym.gauge_source() {
        return dual_norm(root, x, v, opts);
    }
    dual_norm_of(&sym.coefficients(x)?, v, opts)
}

/// Dual norm for coefficients already evaluated at a point.
pub fn dual_norm_of(coeffs: &Coefficients, v: &[f64], opts: &DualNormOptions) -> Result<ExtReal, SymbolError> {
    if v.iter().any(|c| !c.is_finite()) {
        return Err(SymbolError::Invalid(format!("non-finite tangent vector {v:?}")));
    }
    let vnorm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
    if vnorm == 0.0 {
        return Ok(ExtReal::ZERO);
    }
    let t = coeffs.stacked();
    let n = t.nrows();

    // Rows of T are the images of the coordinate covectors. Rescaling them to
    // unit length leaves the solution set of T w = v unchanged.
    let mut kept = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for j in 0..n {
        let norm = scaled_norm(t.row(j).iter());
        if norm > 0.0 {
            kept.push(j);
            weights.push(1.0 / norm);
        } else if v[j].abs() > opts.tol * vnorm {
            return Ok(ExtReal::Infinite);
        }
    }
    if kept.is_empty() {
        return Ok(ExtReal::Infinite);
    }
    let te = DMatrix::from_fn(kept.len(), t.ncols(), |i, k| t[(kept[i], k)] * weights[i]);
    let ve = DVector::from_iterator(kept.len(), kept.iter().zip(&weights).map(|(&j, w)| v[j] * w));
    let (w, residual) = least_norm_solve(&te, &ve, RANK_CUTOFF);
    if residual > opts.tol * ve.norm() {
        return Ok(ExtReal::Infinite);
    }

    let (s, r) = coeffs.zeroth.shape();
    if r == 1 || s == 1 {
        // The symbol is a vector, so P(xi) = |T^T xi| and P*(v) is the least
        // norm of a preimage of v under T.
        return Ok(ExtReal::finite(w.norm()));
    }
    let basis = finite_basis(&t, &te, &kept, &weights);
    let k = basis.ncols();
    let vv = DVector::from_column_slice(v);
    let cvec: Vec<f64> = (0..k).map(|i| basis.column(i).dot(&vv)).collect();
    let full = k == n;
    let eval = |theta: &[f64]| -> f64 {
        let eta: Vec<f64> = if full { theta.to_vec() } else { (&basis * DVector::from_column_slice(theta)).as_slice().to_vec() };
        let p = coeffs.seminorm(&eta);
        let dot: f64 = if full { theta.iter().zip(v).map(|(a, b)| a * b).sum() } else { theta.iter().zip(&cvec).map(|(a, b)| a * b).sum() };
        if p > 0.0 {
            dot.abs() / p
        } else {
            0.0
        }
    };
    let value = match k {
        1 => eval(&[1.0]),
        2 => planar_sup(&eval, opts, full)?,
        _ => sphere_sup(&eval, k, &cvec, opts)?,
    };
    Ok(ExtReal::finite(value))
}

// Euclidean norm without underflow of the squares.
fn scaled_norm<'a>(entries: impl Iterator<Item = &'a f64> + Clone) -> f64 {
    let peak = entries.clone().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak == 0.0 || !peak.is_finite() {
        return peak;
    }
    peak * entries.map(|x| (x / peak).powi(2)).sum::<f64>().sqrt()
}

// Orthonormal basis of range(T) (as columns), or the identity at full rank.
fn finite_basis(t: &DMatrix<f64>, te: &DMatrix<f64>, kept: &[usize], weights: &[f64]) -> DMatrix<f64> {
    let n = t.nrows();
    let svd = real_svd_full_left(te);
    let smax = svd.singular_values.first().copied().unwrap_or(0.0);
    let rank = svd.singular_values.iter().filter(|&&sv| sv > RANK_CUTOFF * smax).count();
    if rank == n {
        return DMatrix::identity(n, n);
    }
    // range(T) = W^-1 range(T_e), with zero rows for dropped coordinates.
    let mut spanning = DMatrix::zeros(n, rank);
    for c in 0..rank {
        for (i, (&j, &w)) in kept.iter().zip(weights).enumerate() {
            spanning[(j, c)] = svd.u[(i, c)] / w;
        }
    }
    spanning.qr().q().columns(0, rank).into_owned()
}

fn planar_sup(eval: &dyn Fn(&[f64]) -> f64, opts: &DualNormOptions, full: bool) -> Result<f64, SymbolError> {
    let m = opts.sweep.max(8);
    let at = |phi: f64| eval(&[phi.cos(), phi.sin()]);
    let mut best = 0.0f64;
    let mut best_phi = 0.0;
    for i in 0..m {
        let phi = i as f64 * PI / m as f64;
        let f = at(phi);
        if f > best {
            best = f;
            best_phi = phi;
        }
    }
    // Exact axis and diagonal directions, so polyhedral gauges aligned with
    // the coordinates are resolved without rounding.
    let mut exact_best = 0.0f64;
    if full {
        let s = FRAC_1_SQRT_2;
        for dir in [[1.0, 0.0], [0.0, 1.0], [s, s], [s, -s]] {
            exact_best = exact_best.max(eval(&dir));
        }
    }
    let step = PI / m as f64;
    let (mut a, mut b) = (best_phi - step, best_phi + step);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let (mut f1, mut f2) = (at(x1), at(x2));
    for _ in 0..80 {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = at(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = at(x1);
        }
    }
    let refined = f1.max(f2);
    let result = best.max(refined).max(exact_best);
    if !result.is_finite() {
        return Err(SymbolError::NotConverged { lower_bound: best.max(exact_best) });
    }
    // The refined point must be a local maximum at the sweep resolution.
    let phi_star = if f1 >= f2 { x1 } else { x2 };
    let probe = at(phi_star + 1e-3 * step).max(at(phi_star - 1e-3 * step));
    if probe > result * (1.0 + opts.rel_tol) && probe > exact_best {
        return Err(SymbolError::NotConverged { lower_bound: probe });
    }
    Ok(result)
}

fn sphere_sup(eval: &dyn Fn(&[f64]) -> f64, k: usize, c: &[f64], opts: &DualNormOptions) -> Result<f64, SymbolError> {
    let normalise = |v: &mut Vec<f64>| {
        let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= len);
    };
    let mut starts: Vec<Vec<f64>> = Vec::new();
    let mut cn = c.to_vec();
    normalise(&mut cn);
    starts.push(cn);
    for i in 0..k {
        let mut e = vec![0.0; k];
        e[i] = 1.0;
        starts.push(e);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.starts {
        let mut v: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if v.iter().all(|x| *x == 0.0) {
            v[0] = 1.0;
        }
        normalise(&mut v);
        starts.push(v);
    }
    let mut best = 0.0f64;
    for start in starts {
        let mut theta = start;
        let mut f = eval(&theta);
        let mut step = 0.5;
        let mut iterations = 0;
        while step > 1e-11 {
            iterations += 1;
            if iterations > 20_000 {
                return Err(SymbolError::NotConverged { lower_bound: best.max(f) });
            }
            let mut improved = false;
            for i in 0..k {
                for sign in [1.0, -1.0] {
                    let mut cand = theta.clone();
                    cand[i] += sign * step;
                    normalise(&mut cand);
                    let fc = eval(&cand);
                    if fc > f {
                        theta = cand;
                        f = fc;
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        best = best.max(f);
    }
    Ok(best)
}
