use crate::config::{FieldFamily, InitialData, InitialKind, MollifyData, RunConfig};
use crate::{CliError, Outcome};
use serde_json::json;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use subfinsler::fields::CVector;
use subfinsler::flows::{approx_by_flows, flow_schedule, AnalyticField, ApproxOptions, VectorField, VectorFieldSet};
use subfinsler::gallery;
use subfinsler::geometry::distance_field;
use subfinsler::mollify::{commutator_norms, lp_norm, support_bounds, MollifierKernel, Region};
use subfinsler::propagate::{cone_check, discretise_skew, evolve, support_radius, wave_second_order, Boundary, EvolveOptions};
use subfinsler::symbol::save_manifest;
use subfinsler::{DualNormOptions, Field, Grid, C64};

fn centre(grid: &Grid) -> Vec<f64> {
    grid.origin().iter().zip(grid.upper()).map(|(lo, hi)| 0.5 * (lo + hi)).collect()
}

fn point_in(grid: &Grid, p: &[f64], key: &str) -> Result<usize, CliError> {
    if p.len() != grid.ndim() || !grid.contains(p) {
        return Err(CliError::Config(format!("{key}: point {p:?} is not inside the grid")));
    }
    Ok(grid.nearest_node(p))
}

fn initial_data(grid: &Grid, r: usize, init: &InitialData, key: &str) -> Result<Field<CVector>, CliError> {
    let c = match &init.centre {
        Some(c) => c.clone(),
        None => centre(grid),
    };
    let node = point_in(grid, &c, &format!("{key}.centre"))?;
    let zero = C64::new(0.0, 0.0);
    let values = match init.kind {
        InitialKind::Zero => vec![CVector::zeros(r); grid.len()],
        InitialKind::Spike => {
            let mut v = vec![CVector::zeros(r); grid.len()];
            v[node] = CVector(vec![C64::new(1.0, 0.0); r]);
            v
        }
        InitialKind::Gaussian => grid
            .nodes()
            .map(|i| {
                let d2: f64 = grid.point(i).iter().zip(&c).map(|(x, y)| (x - y) * (x - y)).sum();
                let mut v = vec![zero; r];
                v[0] = C64::new((-d2 / (2.0 * init.width * init.width)).exp(), 0.0);
                CVector(v)
            })
            .collect(),
    };
    Ok(Field::new(grid.clone(), values)?)
}

fn create(out: &Path, name: &str, files: &mut Vec<PathBuf>) -> Result<BufWriter<File>, CliError> {
    let path = out.join(name);
    files.push(path.clone());
    Ok(BufWriter::new(File::create(path)?))
}

fn dual_opts(cfg: &RunConfig) -> DualNormOptions {
    DualNormOptions { seed: cfg.seed, ..Default::default() }
}

pub fn dist(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let grid = cfg.build_grid(false)?;
    let sym = cfg.build_symbol(grid)?;
    let grid = sym.grid().clone();
    let points = cfg.dist.sources.clone().unwrap_or_else(|| vec![centre(&grid)]);
    if points.is_empty() {
        return Err(CliError::Config("dist.sources: the source set is empty".into()));
    }
    let sources = points.iter().map(|p| point_in(&grid, p, "dist.sources")).collect::<Result<Vec<_>, _>>()?;
    let radius = cfg.dist.stencil_radius.unwrap_or(1);
    let df = distance_field(&sym, &sources, radius, &dual_opts(cfg))?;
    let mut files = Vec::new();
    let bin = out.join("dist.sfdf");
    df.save(&bin)?;
    files.push(bin);
    df.write_csv(create(out, "dist.csv", &mut files)?)?;
    let results = json!({
        "sources": sources.iter().map(|&s| json!({"node": s, "point": grid.point(s)})).collect::<Vec<_>>(),
        "stencil_radius": radius,
        "max_finite": df.max_finite(),
        "infinite_nodes": df.infinite_count(),
    });
    Ok(Outcome { passed: true, results, files })
}

pub fn propagate(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let p = &cfg.propagate;
    let grid = cfg.build_grid(p.boundary == Boundary::Periodic)?;
    let sym = cfg.build_symbol(grid)?;
    let grid = sym.grid().clone();
    let op = discretise_skew(&sym, p.boundary, 1e-8)?;
    let u0 = initial_data(&grid, sym.r(), &p.initial, "propagate.initial")?;
    let opts = EvolveOptions { scheme: p.scheme, dt: p.dt, record_every: p.record_every };
    let traj = evolve(&op, &u0, p.t, &opts)?;

    let peak = u0.values().iter().map(CVector::norm).fold(0.0, f64::max);
    let mut sources: Vec<usize> = grid.nodes().filter(|&i| peak > 0.0 && u0[i].norm() > p.theta * peak).collect();
    if sources.is_empty() {
        sources.push(grid.nearest_node(&centre(&grid)));
    }
    let df = distance_field(&sym, &sources, p.stencil_radius, &dual_opts(cfg))?;
    let radii = support_radius(&traj, &df, p.theta)?;
    let slack = p.cone_slack.unwrap_or_else(|| grid.spacing().iter().copied().fold(0.0, f64::max));
    let cone = cone_check(&radii, slack);

    let mut files = vec![traj.save(out.join("trajectory"), "state")?];
    traj.write_csv(Some(&radii), create(out, "series.csv", &mut files)?)?;
    let results = json!({
        "dt": traj.dt,
        "steps_recorded": traj.states.len() - 1,
        "initial_energy": traj.initial_energy(),
        "max_relative_energy_drift": traj.max_relative_drift(),
        "cone_slack": slack,
        "cone_max_excess": if cone.max_excess.is_finite() { json!(cone.max_excess) } else { json!(null) },
        "cone_violations": cone.violations,
        "final_radius": radii.last().map(|r| r.1.to_string()),
    });
    Ok(Outcome { passed: cone.violations == 0, results, files })
}

pub fn wave2(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let w = &cfg.wave2;
    let grid = cfg.build_grid(w.boundary == Boundary::Periodic)?;
    let sym = cfg.build_symbol(grid)?;
    let grid = sym.grid().clone();
    let f = initial_data(&grid, sym.r(), &w.initial, "wave2.initial")?;
    let g = Field::constant(&grid, CVector::zeros(sym.r()));
    let traj = wave_second_order(&sym, &f, &g, w.t, w.boundary, w.dt)?;
    let drift = traj.max_relative_drift();

    let mut files = Vec::new();
    let mut csv = create(out, "series.csv", &mut files)?;
    writeln!(csv, "t,energy,l2_squared")?;
    for (s, e) in traj.u.states.iter().zip(&traj.energy) {
        writeln!(csv, "{},{},{}", s.t, e, s.energy)?;
    }
    csv.flush()?;
    let last = out.join("final.sfpf");
    subfinsler::fields::save_field(&traj.u.last().u, &last)?;
    files.push(last);
    let results = json!({
        "dt": traj.u.dt,
        "steps": traj.u.states.len() - 1,
        "initial_energy": traj.energy[0],
        "max_relative_energy_drift": drift,
        "energy_tol": w.energy_tol,
    });
    Ok(Outcome { passed: drift <= w.energy_tol, results, files })
}

fn field_family(family: FieldFamily, n: usize) -> Vec<Arc<dyn VectorField>> {
    let speed = |p: &[f64]| 0.75 + 0.25 * p.iter().enumerate().map(|(k, x)| (k + 1) as f64 * x).sum::<f64>().sin();
    (0..n)
        .flat_map(|k| [1.0, -1.0].map(|sign| (k, sign)))
        .map(|(k, sign)| {
            let mut v = vec![0.0; n];
            v[k] = sign;
            let field: Arc<dyn VectorField> = match family {
                FieldFamily::Axes => Arc::new(AnalyticField::constant(v)),
                FieldFamily::ModulatedAxes => Arc::new(AnalyticField::modulated(v, speed)),
            };
            field
        })
        .collect()
}

pub fn flowapprox(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let f = &cfg.flowapprox;
    let sym = cfg.build_symbol(cfg.build_grid(false)?)?;
    let n = sym.n();
    let fields = field_family(f.fields, n);
    let set = VectorFieldSet::new(&sym, fields.clone(), 1e-9, &dual_opts(cfg))?;
    let start = f.start.clone().unwrap_or_else(|| vec![-0.6; n]);
    point_in(sym.grid(), &start, "flowapprox.start")?;
    // A staircase through the positive axis fields.
    let piece = f.t / f.staircase_steps as f64;
    let schedule: Vec<(usize, f64)> = (0..f.staircase_steps).map(|i| (2 * (i % n), piece)).collect();
    let gamma = flow_schedule(&fields, &start, &schedule, f.step)?;

    let mut blocks = f.blocks.clone();
    blocks.sort_unstable();
    blocks.dedup();
    let opts = ApproxOptions { step: f.step, seed: cfg.seed, ..Default::default() };
    let mut files = Vec::new();
    let mut csv = create(out, "sweep.csv", &mut files)?;
    writeln!(csv, "blocks,error,bound,kappa,lipschitz")?;
    let mut rows = Vec::new();
    let mut last = None;
    for &nb in &blocks {
        let res = approx_by_flows(&sym, &gamma, &set, nb, f.eps, &start, &opts)?;
        writeln!(csv, "{nb},{},{},{},{}", res.error, res.bound, res.kappa, res.lipschitz)?;
        rows.push(json!({"blocks": nb, "error": res.error, "bound": res.bound}));
        last = Some(res);
    }
    csv.flush()?;
    let last = last.expect("at least one block count");
    last.delta.write_csv(create(out, "delta.csv", &mut files)?)?;
    let errors: Vec<f64> = rows.iter().map(|r| r["error"].as_f64().unwrap()).collect();
    let within = rows.iter().all(|r| r["error"].as_f64() <= r["bound"].as_f64());
    let monotone = errors.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-14);
    let results = json!({
        "rows": rows,
        "kappa": last.kappa,
        "lipschitz": last.lipschitz,
        "within_bound": within,
        "error_nonincreasing": monotone,
    });
    Ok(Outcome { passed: within && monotone, results, files })
}

pub fn mollify(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let m = &cfg.mollify;
    let sym = cfg.build_symbol(cfg.build_grid(false)?)?;
    let grid = sym.grid().clone();
    let n = grid.ndim();
    let (lo, hi) = (grid.origin().to_vec(), grid.upper());
    let region = Region::new(
        m.region_lo.clone().unwrap_or_else(|| (0..n).map(|a| lo[a] + 0.25 * (hi[a] - lo[a])).collect()),
        m.region_hi.clone().unwrap_or_else(|| (0..n).map(|a| hi[a] - 0.25 * (hi[a] - lo[a])).collect()),
    );
    let w = m.half_width;
    let data = Field::from_fn(&grid, |x| match m.data {
        MollifyData::Indicator => f64::from(u8::from(x.iter().all(|c| c.abs() <= w))),
        MollifyData::Gaussian => (-x.iter().map(|c| c * c).sum::<f64>() / (2.0 * w * w)).exp(),
    })?;
    let lifted = data.map(|v| {
        let mut c = vec![C64::new(0.0, 0.0); sym.r()];
        c[0] = C64::new(*v, 0.0);
        CVector(c)
    });
    let commutators = commutator_norms(&sym, &lifted, &m.eps, &region)?;
    let h = grid.spacing().iter().copied().fold(0.0, f64::max);

    let mut files = Vec::new();
    let mut csv = create(out, "sweep.csv", &mut files)?;
    writeln!(csv, "eps,{},commutator_l2", if m.data == MollifyData::Indicator { "growth_error" } else { "sup_error" })?;
    let mut column = Vec::new();
    for (&eps, &(_, comm)) in m.eps.iter().zip(&commutators) {
        let smoothed = MollifierKernel::new(&grid, eps, false)?.apply(&data);
        let value = match m.data {
            MollifyData::Indicator => {
                let (a, b) =
                    support_bounds(&data).ok_or_else(|| CliError::Config("mollify.half_width: indicator misses every node".into()))?;
                let (ja, jb) = support_bounds(&smoothed).expect("mollified indicator is nonzero");
                (0..n)
                    .flat_map(|k| [(a[k] - ja[k]) as f64, (jb[k] - b[k]) as f64].map(|cells| (cells * grid.spacing()[k] - eps).abs()))
                    .fold(0.0, f64::max)
            }
            MollifyData::Gaussian => lp_norm(&smoothed.add(&data.scale(-1.0))?, &region, f64::INFINITY),
        };
        writeln!(csv, "{eps},{value},{comm}")?;
        column.push(value);
    }
    csv.flush()?;
    let nonincreasing = |v: &[f64]| v.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-14);
    let comm: Vec<f64> = commutators.iter().map(|c| c.1).collect();
    let data_ok = match m.data {
        MollifyData::Indicator => column.iter().all(|&g| g <= h + 1e-12),
        MollifyData::Gaussian => nonincreasing(&column),
    };
    let comm_ok = nonincreasing(&comm);
    let results = json!({
        "eps": m.eps,
        "commutator_l2": comm,
        "data_column": column,
        "data_check": data_ok,
        "commutator_nonincreasing": comm_ok,
    });
    Ok(Outcome { passed: data_ok && comm_ok, results, files })
}

pub fn gallery_list() -> Outcome {
    for name in gallery::list() {
        println!("{name}");
    }
    Outcome { passed: true, results: json!({ "names": gallery::list() }), files: Vec::new() }
}

pub fn gallery_export(cfg: &RunConfig, name: &str, out: &Path) -> Result<Outcome, CliError> {
    let grid = cfg.build_grid(false)?;
    let sym = gallery::by_name(name, grid, cfg.symbol.truncation).map_err(|e| CliError::Config(e.to_string()))?;
    let manifest = save_manifest(&sym, out, name)?;
    let results = json!({ "name": name, "n": sym.n(), "r": sym.r(), "s": sym.s(), "manifest": manifest });
    Ok(Outcome { passed: true, results, files: vec![manifest] })
}
