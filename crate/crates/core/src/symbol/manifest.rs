//! A symbol on disk: one binary field file per coefficient plus a TOML
//! manifest naming them.

use super::{SymbolError, SymbolField};
use crate::fields::{load_field, save_field, Field};
use crate::linalg::CMatrix;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n: usize,
    pub r: usize,
    pub s: usize,
    /// File names of `a_1 .. a_n`, relative to the manifest.
    pub first: Vec<String>,
    /// File name of `b`.
    pub zeroth: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

/// Writes `<stem>.a1.sfpf ..`, `<stem>.b.sfpf` and `<stem>.toml` into
/// `dir`; returns the manifest path.
pub fn save_manifest(sym: &SymbolField, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf, SymbolError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let (first, zeroth) = sym.materialise();
    let mut names = Vec::with_capacity(first.len());
    for (j, a) in first.iter().enumerate() {
        let name = format!("{stem}.a{}.sfpf", j + 1);
        save_field(a, dir.join(&name))?;
        names.push(name);
    }
    let bname = format!("{stem}.b.sfpf");
    save_field(&zeroth, dir.join(&bname))?;
    let manifest = Manifest { n: sym.n(), r: sym.r(), s: sym.s(), first: names, zeroth: bname, name: Some(stem.to_string()) };
    let text = toml::to_string_pretty(&manifest).map_err(|e| SymbolError::Manifest(e.to_string()))?;
    let path = dir.join(format!("{stem}.toml"));
    fs::write(&path, text)?;
    Ok(path)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<SymbolField, SymbolError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| SymbolError::Manifest(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    if manifest.first.len() != manifest.n {
        return Err(SymbolError::Manifest(format!("n = {} but {} first-order files", manifest.n, manifest.first.len())));
    }
    let first = manifest.first.iter().map(|f| load_field::<CMatrix>(base.join(f))).collect::<Result<Vec<Field<CMatrix>>, _>>()?;
    let zeroth = load_field::<CMatrix>(base.join(&manifest.zeroth))?;
    if zeroth.value_shape() != (manifest.r, manifest.s) {
        return Err(SymbolError::Manifest(format!(
            "manifest declares (r, s) = ({}, {}), files hold {:?}",
            manifest.r,
            manifest.s,
            zeroth.value_shape()
        )));
    }
    SymbolField::sampled(first, zeroth)
}
