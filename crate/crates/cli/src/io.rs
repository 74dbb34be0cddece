//! File helpers shared by the commands.

use std::path::{Path, PathBuf};

use branchdiff::data::{load_csv, load_idx_images, write_atomic, Checkpoint, Standardization, TabularDataset};
use branchdiff::Matrix;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Columns of generated sample files that record provenance, not features.
const PROVENANCE: [&str; 2] = ["t", "seed"];

/// Loads the training dataset named by `data.*`, standardizing on request.
pub fn load_dataset(cfg: &RunConfig) -> CliResult<TabularDataset> {
    let path = cfg
        .data
        .path
        .as_ref()
        .ok_or_else(|| CliError::input("no dataset given (--data or data.path)"))?;
    let ds = match &cfg.data.idx_labels {
        Some(labels) => load_idx_images(path, labels, cfg.data.downscale)?,
        None => load_csv(path, &cfg.data.label_col)?,
    };
    Ok(if cfg.data.standardize { ds.standardize()? } else { ds })
}

/// Reads a labeled CSV, dropping the provenance columns that sample files
/// carry.
pub fn read_table(path: &Path, label_col: &str) -> CliResult<TabularDataset> {
    let ds = load_csv(path, label_col)?;
    let keep: Vec<usize> = (0..ds.dim())
        .filter(|&j| !PROVENANCE.contains(&ds.feature_names[j].as_str()))
        .collect();
    if keep.len() == ds.dim() {
        return Ok(ds);
    }
    let mut values = Vec::with_capacity(ds.len() * keep.len());
    for i in 0..ds.len() {
        values.extend(keep.iter().map(|&j| ds.features[(i, j)]));
    }
    let names = keep.iter().map(|&j| ds.feature_names[j].clone()).collect();
    Ok(TabularDataset::new(
        Matrix::from_vec(ds.len(), keep.len(), values)?,
        ds.labels,
        ds.classes,
        names,
    )?)
}

/// Rows of class `c`; a table without that class is an input error.
pub fn rows_of(ds: &TabularDataset, c: &str, what: &Path) -> CliResult<Matrix<f64>> {
    let m = ds
        .class_matrix(c)
        .map_err(|_| CliError::input(format!("{} has no rows of class {c}", what.display())))?;
    Ok(m)
}

pub fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

pub fn write(path: &Path, text: &str) -> CliResult<()> {
    Ok(write_atomic(path, text.as_bytes())?)
}

/// `out` with its extension replaced by `suffix` (e.g. `model.loss.csv`).
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}.{suffix}"))
}

/// Maps model-space rows back to data units.
pub fn to_data_units(x: &Matrix<f32>, std: Option<&Standardization>) -> Matrix<f32> {
    match std {
        Some(s) => s.inverse(&x.cast::<f64>()).cast::<f32>(),
        None => x.clone(),
    }
}

/// Maps data-unit rows into model space.
pub fn to_model_units(x: &Matrix<f64>, std: Option<&Standardization>) -> Matrix<f64> {
    match std {
        Some(s) => s.apply(x),
        None => x.clone(),
    }
}
