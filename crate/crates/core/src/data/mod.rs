//! Datasets, loaders and persistence.

mod checkpoint;
mod idx;
pub mod synth;

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub use checkpoint::{Checkpoint, CheckpointMeta, Model, ModelKind, CHECKPOINT_VERSION};
pub use idx::{load_idx_images, parse_idx_images};

/// Per-feature affine map applied by [`TabularDataset::standardize`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn inverse(&self, m: &Matrix<f64>) -> Matrix<f64> {
        let mut out = m.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
        out
    }

    pub fn apply(&self, m: &Matrix<f64>) -> Matrix<f64> {
        let mut out = m.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        out
    }
}

/// Labeled feature matrix. Labels index into `classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularDataset {
    pub features: Matrix<f64>,
    pub labels: Vec<usize>,
    pub classes: Vec<String>,
    pub feature_names: Vec<String>,
    pub standardization: Option<Standardization>,
}

impl TabularDataset {
    pub fn new(
        features: Matrix<f64>,
        labels: Vec<usize>,
        classes: Vec<String>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Data(format!(
                "{} labels for {} rows",
                labels.len(),
                features.rows()
            )));
        }
        if feature_names.len() != features.cols() {
            return Err(Error::Data("feature name count does not match columns".into()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes.len()) {
            return Err(Error::Data(format!("label index {l} has no class")));
        }
        if !features.is_finite() {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            labels,
            classes,
            feature_names,
            standardization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_index(&self, c: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|x| x == c)
            .ok_or_else(|| Error::Lookup(format!("unknown class {c}")))
    }

    pub fn class_name(&self, row: usize) -> &str {
        &self.classes[self.labels[row]]
    }

    /// Rows of one class.
    pub fn class_matrix(&self, c: &str) -> Result<Matrix<f64>> {
        let ci = self.class_index(c)?;
        let rows: Vec<usize> = (0..self.len()).filter(|&r| self.labels[r] == ci).collect();
        Ok(self.features.select_rows(&rows))
    }

    /// Rows whose class is in `keep`; the class list is narrowed to `keep`.
    pub fn subset(&self, keep: &[&str]) -> Result<Self> {
        let mut map = vec![None; self.classes.len()];
        for (k, c) in keep.iter().enumerate() {
            map[self.class_index(c)?] = Some(k);
        }
        let rows: Vec<usize> = (0..self.len()).filter(|&r| map[self.labels[r]].is_some()).collect();
        Ok(Self {
            features: self.features.select_rows(&rows),
            labels: rows.iter().map(|&r| map[self.labels[r]].expect("kept")).collect(),
            classes: keep.iter().map(|c| c.to_string()).collect(),
            feature_names: self.feature_names.clone(),
            standardization: self.standardization.clone(),
        })
    }

    /// Pooled zero-mean, unit-variance scaling of every feature.
    pub fn standardize(&self) -> Result<Self> {
        let n = self.len();
        if n < 2 {
            return Err(Error::Data("standardization needs at least 2 rows".into()));
        }
        let mean = self.features.column_means();
        let mut var = vec![0.0; self.dim()];
        for i in 0..n {
            for (j, v) in self.features.row(i).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt()).collect();
        if let Some(j) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::Data(format!(
                "feature {} has zero variance",
                self.feature_names[j]
            )));
        }
        let params = Standardization { mean, std };
        Ok(Self {
            features: params.apply(&self.features),
            standardization: Some(params),
            ..self.clone()
        })
    }

    /// Features plus a trailing `class` column.
    pub fn to_csv(&self) -> String {
        let mut out = self.feature_names.join(",");
        out.push_str(",class\n");
        for i in 0..self.len() {
            for v in self.features.row(i) {
                out.push_str(&format!("{v},"));
            }
            out.push_str(self.class_name(i));
            out.push('\n');
        }
        out
    }
}

/// Reads a headed CSV; `label_column` names the class column and every other
/// column must parse as a finite real.
pub fn parse_csv<R: Read>(reader: R, label_column: &str) -> Result<TabularDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Data(format!("cannot read CSV header: {e}")))?
        .clone();
    if headers.is_empty() {
        return Err(Error::Data("empty CSV file".into()));
    }
    let label_at = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Data(format!("missing label column {label_column}")))?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_at)
        .map(|(_, h)| h.to_string())
        .collect();
    let mut classes: Vec<String> = Vec::new();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| Error::Data(format!("row {row}: {e}")))?;
        if rec.len() != headers.len() {
            return Err(Error::Data(format!(
                "row {row}: {} fields, header has {}",
                rec.len(),
                headers.len()
            )));
        }
        for (i, cell) in rec.iter().enumerate() {
            if i == label_at {
                continue;
            }
            let v: f64 = cell
                .trim()
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::Data(format!("row {row}: cannot parse {cell:?} in column {}", &headers[i])))?;
            values.push(v);
        }
        let label = rec[label_at].trim().to_string();
        let idx = match classes.iter().position(|c| *c == label) {
            Some(i) => i,
            None => {
                classes.push(label);
                classes.len() - 1
            }
        };
        labels.push(idx);
    }
    if labels.is_empty() {
        return Err(Error::Data("CSV has no data rows".into()));
    }
    let features = Matrix::from_vec(labels.len(), feature_names.len(), values)?;
    TabularDataset::new(features, labels, classes, feature_names)
}

pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<TabularDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(std::io::BufReader::new(file), label_column)
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_basic() {
        let text = "a,b,label\n1,2,x\n3,4,y\n5,6,x\n";
        let d = parse_csv(text.as_bytes(), "label").unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.dim(), 2);
        assert_eq!(d.classes, vec!["x", "y"]);
        assert_eq!(d.labels, vec![0, 1, 0]);
        assert_eq!(d.feature_names, vec!["a", "b"]);
    }

    #[test]
    fn csv_errors() {
        let nan = "a,label\n1,x\nNaN,y\n";
        let err = parse_csv(nan.as_bytes(), "label").unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
        assert!(parse_csv("a,b\n1,2\n".as_bytes(), "label").is_err());
        assert!(parse_csv("".as_bytes(), "label").is_err());
        assert!(parse_csv("a,label\n".as_bytes(), "label").is_err());
    }

    #[test]
    fn standardize_round_trip() {
        let text = "a,b,label\n1,10,x\n2,14,x\n5,11,y\n9,13,y\n";
        let d = parse_csv(text.as_bytes(), "label").unwrap();
        let s = d.standardize().unwrap();
        for (j, m) in s.features.column_means().iter().enumerate() {
            assert!(m.abs() < 1e-9);
            let var: f64 = (0..s.len()).map(|i| s.features[(i, j)].powi(2)).sum::<f64>() / s.len() as f64;
            assert!((var - 1.0).abs() < 1e-9);
        }
        let back = s.standardization.as_ref().unwrap().inverse(&s.features);
        for (a, b) in back.as_slice().iter().zip(d.features.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
        // Pooled scaling keeps the class means apart.
        let x = s.class_matrix("x").unwrap().column_means();
        assert!(x[0] < -0.5);
        let flat = parse_csv("a,label\n1,x\n1,y\n".as_bytes(), "label").unwrap();
        assert!(flat.standardize().unwrap_err().to_string().contains("feature a"));
    }

    #[test]
    fn subset_narrows_classes() {
        let d = parse_csv("a,label\n1,x\n2,y\n3,z\n".as_bytes(), "label").unwrap();
        let s = d.subset(&["z", "x"]).unwrap();
        assert_eq!(s.classes, vec!["z", "x"]);
        assert_eq!(s.labels, vec![1, 0]);
    }
}
