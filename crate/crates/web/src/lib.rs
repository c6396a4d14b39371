//! Three operations for the demo page. Each takes plain numbers and returns
//! a flat `Float64Array`; the `*_values` functions hold the logic and run
//! natively as well.

use subfinsler::fields::CVector;
use subfinsler::gallery;
use subfinsler::geometry::distance_field as control_distance;
use subfinsler::propagate::{discretise_skew, evolve, Boundary, EvolveOptions};
use subfinsler::symbol::double;
use subfinsler::{dual_norm, DualNormOptions, Field, Grid, SymbolField, C64};
use wasm_bindgen::prelude::*;

fn symbol(name: &str, grid: Grid) -> Result<SymbolField, String> {
    gallery::by_name(name, grid, gallery::DEFAULT_TRUNCATION).map_err(|e| e.to_string())
}

/// Row-major distances from the centre of `[-half, half]^2` with
/// `cells + 1` nodes per axis; unreachable nodes are `Infinity`.
pub fn distance_field_values(name: &str, cells: usize, half: f64, stencil_radius: usize) -> Result<Vec<f64>, String> {
    if !cells.is_multiple_of(2) {
        return Err("cells must be even so the centre is a node".into());
    }
    let grid = Grid::cube(2, -half, half, cells).map_err(|e| e.to_string())?;
    let sym = symbol(name, grid.clone())?;
    let centre = grid.flat_index(&[cells / 2, cells / 2]);
    let df = control_distance(&sym, &[centre], stencil_radius, &DualNormOptions::default()).map_err(|e| e.to_string())?;
    // Grid order is x-major; transpose to rows of constant y.
    let n = cells + 1;
    Ok((0..n * n).map(|k| df.value(grid.flat_index(&[k % n, k / n])).to_f64()).collect())
}

/// Boundary of `{ v : P*_x(v) <= 1 }` at `x = (x, y)` as interleaved
/// `(v_1, v_2)` pairs over `samples` angles; directions of infinite dual
/// norm collapse to the origin.
pub fn dual_unit_ball_values(name: &str, x: f64, y: f64, samples: usize) -> Result<Vec<f64>, String> {
    let grid = Grid::cube(2, -2.0, 2.0, 8).map_err(|e| e.to_string())?;
    let sym = symbol(name, grid)?;
    let opts = DualNormOptions::default();
    let mut out = Vec::with_capacity(2 * samples);
    for k in 0..samples {
        let a = std::f64::consts::TAU * k as f64 / samples as f64;
        let v = [a.cos(), a.sin()];
        let r = dual_norm(&sym, &[x, y], &v, &opts).map_err(|e| e.to_string())?.to_f64();
        let scale = if r.is_finite() && r > 0.0 { 1.0 / r } else { 0.0 };
        out.extend([v[0] * scale, v[1] * scale]);
    }
    Ok(out)
}

/// `|u(t)|` in rows of constant y for a Gaussian started at the centre of
/// `[-1, 1)^2`, evolved on a periodic grid. Symbols that are not
/// self-adjoint are doubled first.
pub fn wave_snapshot_values(name: &str, cells: usize, t: f64, width: f64) -> Result<Vec<f64>, String> {
    let grid = Grid::periodic_cube(2, -1.0, 1.0, cells).map_err(|e| e.to_string())?;
    let sym = symbol(name, grid.clone())?;
    let sym = if sym.r() == sym.s() && discretise_skew(&sym, Boundary::Periodic, 1e-8).is_ok() {
        sym
    } else {
        double(&sym).map_err(|e| e.to_string())?
    };
    let op = discretise_skew(&sym, Boundary::Periodic, 1e-8).map_err(|e| e.to_string())?;
    let r = sym.r();
    let u0 = Field::from_fn(&grid, |p| {
        let mut v = vec![C64::new(0.0, 0.0); r];
        v[0] = C64::new((-(p[0] * p[0] + p[1] * p[1]) / (2.0 * width * width)).exp(), 0.0);
        CVector(v)
    })
    .map_err(|e| e.to_string())?;
    let last = if t > 0.0 {
        let opts = EvolveOptions { record_every: usize::MAX, ..Default::default() };
        evolve(&op, &u0, t, &opts).map_err(|e| e.to_string())?.last().u.clone()
    } else {
        u0
    };
    Ok((0..cells * cells).map(|k| last[grid.flat_index(&[k % cells, k / cells])].norm()).collect())
}

#[wasm_bindgen]
pub fn distance_field(name: &str, cells: usize, half: f64, stencil_radius: usize) -> Result<Vec<f64>, JsError> {
    distance_field_values(name, cells, half, stencil_radius).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn dual_unit_ball(name: &str, x: f64, y: f64, samples: usize) -> Result<Vec<f64>, JsError> {
    dual_unit_ball_values(name, x, y, samples).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn wave_snapshot(name: &str, cells: usize, t: f64, width: f64) -> Result<Vec<f64>, JsError> {
    wave_snapshot_values(name, cells, t, width).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn gallery_names() -> Vec<String> {
    gallery::list().iter().map(|s| s.to_string()).collect()
}
