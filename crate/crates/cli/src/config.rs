//! Run configuration: a TOML file, then `--set key=value` overrides, then
//! the dedicated flags.

use crate::CliError;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use subfinsler::gallery;
use subfinsler::propagate::{Boundary, Scheme};
use subfinsler::symbol::load_manifest;
use subfinsler::{Grid, SymbolField};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub symbol: SymbolConfig,
    pub grid: GridConfig,
    pub dist: DistConfig,
    pub propagate: PropagateConfig,
    pub wave2: Wave2Config,
    pub flowapprox: FlowApproxConfig,
    pub mollify: MollifyConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SymbolConfig {
    /// Gallery name; ignored when `manifest` is set.
    pub gallery: String,
    pub truncation: usize,
    pub manifest: Option<PathBuf>,
    /// Replace the symbol by its doubling.
    pub double: bool,
}

impl Default for SymbolConfig {
    fn default() -> Self {
        Self { gallery: "diagonal-shift".into(), truncation: gallery::DEFAULT_TRUNCATION, manifest: None, double: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub ndim: usize,
    pub lo: f64,
    pub hi: f64,
    pub cells: usize,
    /// Explicit layout; overrides the cube when all three are given.
    pub origin: Option<Vec<f64>>,
    pub spacing: Option<Vec<f64>>,
    pub dims: Option<Vec<usize>>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { ndim: 2, lo: -2.0, hi: 2.0, cells: 32, origin: None, spacing: None, dims: None }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistConfig {
    /// Source points, snapped to the nearest node; the grid centre when unset.
    pub sources: Option<Vec<Vec<f64>>>,
    pub stencil_radius: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialKind {
    /// Every component 1 at the node nearest `centre`, 0 elsewhere.
    Spike,
    /// A Gaussian of the given width in the first component.
    Gaussian,
    Zero,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialData {
    pub kind: InitialKind,
    pub centre: Option<Vec<f64>>,
    pub width: f64,
}

impl Default for InitialData {
    fn default() -> Self {
        Self { kind: InitialKind::Spike, centre: None, width: 0.2 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagateConfig {
    pub t: f64,
    pub dt: Option<f64>,
    pub scheme: Scheme,
    pub boundary: Boundary,
    pub initial: InitialData,
    pub theta: f64,
    /// Allowed excess of the support radius over `|t|`; one cell by default.
    pub cone_slack: Option<f64>,
    pub record_every: usize,
    pub stencil_radius: usize,
}

impl Default for PropagateConfig {
    fn default() -> Self {
        Self {
            t: 1.0,
            dt: None,
            scheme: Scheme::CharacteristicUpwind,
            boundary: Boundary::CompactSupport,
            initial: InitialData::default(),
            theta: 1e-6,
            cone_slack: None,
            record_every: 1,
            stencil_radius: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Wave2Config {
    pub t: f64,
    pub dt: Option<f64>,
    pub boundary: Boundary,
    pub initial: InitialData,
    pub energy_tol: f64,
}

impl Default for Wave2Config {
    fn default() -> Self {
        Self {
            t: 1.0,
            dt: None,
            boundary: Boundary::Periodic,
            initial: InitialData { kind: InitialKind::Gaussian, centre: None, width: 0.2 },
            energy_tol: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldFamily {
    /// `+-e_k`.
    Axes,
    /// `+-e_k` scaled by `0.75 + 0.25 sin(sum_k (k + 1) x_k)`.
    ModulatedAxes,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowApproxConfig {
    pub fields: FieldFamily,
    pub blocks: Vec<usize>,
    pub eps: f64,
    pub start: Option<Vec<f64>>,
    pub t: f64,
    /// Pieces of the staircase curve that is approximated.
    pub staircase_steps: usize,
    pub step: f64,
}

impl Default for FlowApproxConfig {
    fn default() -> Self {
        Self {
            fields: FieldFamily::ModulatedAxes,
            blocks: vec![25, 50, 100, 200],
            eps: 1e-3,
            start: None,
            t: 1.0,
            staircase_steps: 800,
            step: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MollifyData {
    /// Indicator of the box `|x_k| <= half_width`.
    Indicator,
    /// `exp(-|x|^2 / (2 half_width^2))`.
    Gaussian,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MollifyConfig {
    pub eps: Vec<f64>,
    pub data: MollifyData,
    pub half_width: f64,
    /// Compact set for the norms; the middle half of the grid box when unset.
    pub region_lo: Option<Vec<f64>>,
    pub region_hi: Option<Vec<f64>>,
}

impl Default for MollifyConfig {
    fn default() -> Self {
        Self { eps: vec![0.4, 0.2, 0.1, 0.05], data: MollifyData::Gaussian, half_width: 0.3, region_lo: None, region_hi: None }
    }
}

/// Parses the config text, applies `key=value` overrides (values are TOML,
/// bare words fall back to strings).
pub fn resolve(text: &str, origin: &str, overrides: &[String]) -> Result<RunConfig, CliError> {
    let config_error = |msg: String| CliError::Config(format!("{origin}: {msg}"));
    // Deserialising the raw text first keeps line and key diagnostics.
    toml::from_str::<RunConfig>(text).map_err(|e| config_error(e.to_string()))?;
    let mut table: toml::Table = toml::from_str(text).map_err(|e| config_error(e.to_string()))?;
    for item in overrides {
        let (key, raw) = item.split_once('=').ok_or_else(|| CliError::Config(format!("--set {item}: expected key=value")))?;
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        insert(&mut table, key.trim(), value).map_err(|msg| CliError::Config(format!("--set {key}: {msg}")))?;
    }
    let cfg: RunConfig =
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::Config(format!("after overrides: {e}")))?;
    Ok(cfg)
}

fn insert(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), String> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or("empty key")?;
    let mut cur = table;
    for part in parts {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| format!("'{part}' is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn check(ok: bool, key: &str, msg: &str) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(format!("{key}: {msg}")))
    }
}

impl RunConfig {
    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if let Some(path) = &self.symbol.manifest {
            check(path.exists(), "symbol.manifest", &format!("{} does not exist", path.display()))?;
        } else {
            check(
                gallery::list().contains(&self.symbol.gallery.as_str()),
                "symbol.gallery",
                &format!("unknown; known: {}", gallery::list().join(", ")),
            )?;
        }
        check(self.symbol.truncation >= 1, "symbol.truncation", "must be at least 1")?;
        let g = &self.grid;
        check(g.ndim >= 1, "grid.ndim", "must be at least 1")?;
        check(g.hi > g.lo, "grid.hi", "must exceed grid.lo")?;
        check(g.cells >= 2, "grid.cells", "must be at least 2")?;
        let p = &self.propagate;
        check(p.t > 0.0 && p.t.is_finite(), "propagate.t", "must be positive")?;
        check(p.dt.is_none_or(|d| d > 0.0), "propagate.dt", "must be positive")?;
        check(p.theta > 0.0 && p.theta < 1.0, "propagate.theta", "must lie in (0, 1)")?;
        check(p.initial.width > 0.0, "propagate.initial.width", "must be positive")?;
        check(p.cone_slack.is_none_or(|s| s >= 0.0), "propagate.cone_slack", "must be nonnegative")?;
        check(p.stencil_radius >= 1, "propagate.stencil_radius", "must be at least 1")?;
        let w = &self.wave2;
        check(w.t > 0.0 && w.t.is_finite(), "wave2.t", "must be positive")?;
        check(w.dt.is_none_or(|d| d > 0.0), "wave2.dt", "must be positive")?;
        check(w.initial.width > 0.0, "wave2.initial.width", "must be positive")?;
        check(w.energy_tol > 0.0, "wave2.energy_tol", "must be positive")?;
        let f = &self.flowapprox;
        check(!f.blocks.is_empty() && f.blocks.iter().all(|&n| n >= 1), "flowapprox.blocks", "need at least one block count >= 1")?;
        check(f.eps > 0.0, "flowapprox.eps", "must be positive")?;
        check(f.t > 0.0, "flowapprox.t", "must be positive")?;
        check(f.staircase_steps >= 1, "flowapprox.staircase_steps", "must be at least 1")?;
        check(f.step > 0.0, "flowapprox.step", "must be positive")?;
        let m = &self.mollify;
        check(!m.eps.is_empty() && m.eps.iter().all(|&e| e > 0.0), "mollify.eps", "need positive widths")?;
        check(m.half_width > 0.0, "mollify.half_width", "must be positive")?;
        Ok(())
    }

    pub fn build_grid(&self, periodic: bool) -> Result<Grid, CliError> {
        let g = &self.grid;
        let grid = match (&g.origin, &g.spacing, &g.dims) {
            (Some(o), Some(s), Some(d)) => Grid::new(o.clone(), s.clone(), d.clone()),
            (None, None, None) if periodic => Grid::periodic_cube(g.ndim, g.lo, g.hi, g.cells),
            (None, None, None) => Grid::cube(g.ndim, g.lo, g.hi, g.cells),
            _ => return Err(CliError::Config("grid: origin, spacing and dims go together".into())),
        };
        grid.map_err(|e| CliError::Config(format!("grid: {e}")))
    }

    pub fn build_symbol(&self, grid: Grid) -> Result<SymbolField, CliError> {
        let sym = match &self.symbol.manifest {
            Some(path) => {
                let sym = load_manifest(path).map_err(|e| CliError::Config(format!("symbol.manifest: {e}")))?;
                if sym.grid() != &grid {
                    log::warn!("manifest grid differs from [grid]; using the manifest grid");
                }
                sym
            }
            None => gallery::by_name(&self.symbol.gallery, grid, self.symbol.truncation)
                .map_err(|e| CliError::Config(format!("symbol.gallery: {e}")))?,
        };
        if self.symbol.double {
            Ok(subfinsler::symbol::double(&sym)?)
        } else {
            Ok(sym)
        }
    }
}

pub fn read_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let (text, origin) = match path {
        Some(p) => (std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?, p.display().to_string()),
        None => (String::new(), "<defaults>".to_string()),
    };
    resolve(&text, &origin, overrides)
}
