//! Checkpoints: every store entry as a `GLT1` record in one blob, plus a
//! tab-separated manifest of `name  shape  byte_offset`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::params::ParamStore;
use crate::error::{GltError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";
pub const BLOB: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

pub fn format_shape(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    s.split('x').map(|d| d.parse().ok()).collect()
}

pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = BufWriter::new(fs::File::create(dir.join(BLOB))?);
    let mut manifest = String::new();
    let mut offset = 0u64;
    for (_, p) in store.iter() {
        p.tensor.write_glt1(&mut blob)?;
        manifest.push_str(&format!("{}\t{}\t{}\n", p.name, format_shape(p.tensor.shape()), offset));
        offset += p.tensor.encoded_len() as u64;
    }
    blob.flush()?;
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = || GltError::Format(format!("manifest line {}: {line:?}", i + 1));
            if cols.len() != 3 {
                return Err(bad());
            }
            Ok(ManifestEntry {
                name: cols[0].to_string(),
                shape: parse_shape(cols[1]).ok_or_else(bad)?,
                offset: cols[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Loads a checkpoint into `store`, whose layout must match exactly.
pub fn load_checkpoint<T: Scalar>(store: &mut ParamStore<T>, dir: &Path) -> Result<()> {
    let entries = read_manifest(dir)?;
    let blob = fs::read(dir.join(BLOB))?;
    let mut loaded = ParamStore::<T>::new();
    for e in &entries {
        let start = usize::try_from(e.offset).map_err(|_| GltError::Format("offset overflow".into()))?;
        let bytes = blob
            .get(start..)
            .ok_or_else(|| GltError::Format(format!("offset {} of {} beyond blob", e.offset, e.name)))?;
        let t = Tensor::<T>::read_glt1(bytes)?;
        if t.shape() != e.shape.as_slice() {
            return Err(GltError::Format(format!(
                "{}: manifest shape {:?} disagrees with stored {:?}",
                e.name,
                e.shape,
                t.shape()
            )));
        }
        let kind = store
            .id(&e.name)
            .map(|id| store.get(id).kind)
            .unwrap_or(super::params::ParamKind::Trainable);
        loaded.add(e.name.clone(), t, kind);
    }
    store.copy_from(&loaded)
}
