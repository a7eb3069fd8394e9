//! Checkpoint directories: `manifest.txt` with one `name shape file` line
//! per registered tensor (parameters and batch-norm buffers, registration
//! order), plus one TNS1 file per tensor.
//!
//! TNS1 stores 32-bit floats, so a reloaded network matches the saved one
//! to single precision, not bit for bit.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::nn::ParamStore;

pub const MANIFEST: &str = "manifest.txt";

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn parse_shape(text: &str) -> Option<Vec<usize>> {
    text.split('x').map(|d| d.parse().ok()).collect()
}

pub fn save(store: &ParamStore, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for e in store.entries() {
        let file = format!("{}.tns", e.name);
        write_tensor(&dir.join(&file), &e.tensor)?;
        manifest.push_str(&format!("{} {} {}\n", e.name, shape_text(e.tensor.shape()), file));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

struct Line {
    name: String,
    shape: Vec<usize>,
    file: String,
}

fn read_manifest(dir: &Path) -> Result<Vec<Line>> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let parts: Vec<&str> = l.split_whitespace().collect();
            let bad = || Error::Checkpoint(format!("manifest line {}: expected `name shape file`, got {l:?}", i + 1));
            if parts.len() != 3 {
                return Err(bad());
            }
            Ok(Line {
                name: parts[0].to_string(),
                shape: parse_shape(parts[1]).ok_or_else(bad)?,
                file: parts[2].to_string(),
            })
        })
        .collect()
}

/// Loads every tensor of `store` from `dir`. The manifest must list
/// exactly the store's names with matching shapes; the first disagreement
/// is reported by name.
pub fn load(store: &mut ParamStore, dir: &Path) -> Result<()> {
    let lines = read_manifest(dir)?;
    for e in store.entries() {
        let line = lines
            .iter()
            .find(|l| l.name == e.name)
            .ok_or_else(|| Error::Checkpoint(format!("parameter {} missing from checkpoint", e.name)))?;
        if line.shape != e.tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {}: checkpoint shape {:?}, network shape {:?}",
                e.name,
                line.shape,
                e.tensor.shape()
            )));
        }
    }
    if let Some(extra) = lines.iter().find(|l| store.find(&l.name).is_none()) {
        return Err(Error::Checkpoint(format!("checkpoint parameter {} not in network", extra.name)));
    }
    for line in &lines {
        let t = read_tensor(&dir.join(&line.file))?;
        if t.shape() != line.shape {
            return Err(Error::Checkpoint(format!(
                "parameter {}: file shape {:?}, manifest shape {:?}",
                line.name,
                t.shape(),
                line.shape
            )));
        }
        let id = store.find(&line.name).expect("checked above");
        store.get_mut(id).data_mut().copy_from_slice(t.data());
    }
    Ok(())
}
