//! Synthetic Gaussian-mixture datasets with retained ground truth.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::TabularDataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{normal_vec, stream, Stage};

/// Ground-truth Gaussian for one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianClass {
    pub name: String,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

impl GaussianClass {
    pub fn isotropic(name: &str, mean: &[f64], var: f64) -> Self {
        let d = mean.len();
        let cov = (0..d)
            .map(|i| (0..d).map(|j| if i == j { var } else { 0.0 }).collect())
            .collect();
        Self {
            name: name.to_string(),
            mean: mean.to_vec(),
            cov,
        }
    }

    /// Factor `L` with `L L^T = cov`, via eigendecomposition so that
    /// semidefinite (e.g. point-mass) covariances are accepted.
    fn factor(&self) -> Result<DMatrix<f64>> {
        let d = self.mean.len();
        if self.cov.len() != d || self.cov.iter().any(|r| r.len() != d) {
            return Err(Error::Data(format!("class {}: covariance is not {d}x{d}", self.name)));
        }
        let m = DMatrix::from_fn(d, d, |i, j| self.cov[i][j]);
        if (&m - m.transpose()).amax() > 1e-12 {
            return Err(Error::Data(format!("class {}: covariance is not symmetric", self.name)));
        }
        let eig = SymmetricEigen::new(m);
        let scale = eig.eigenvalues.amax().max(1.0);
        if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
            return Err(Error::Data(format!(
                "class {}: covariance is not positive semidefinite",
                self.name
            )));
        }
        let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub data: TabularDataset,
    pub truth: Vec<GaussianClass>,
}

impl SyntheticDataset {
    pub fn truth_of(&self, class: &str) -> Result<&GaussianClass> {
        self.truth
            .iter()
            .find(|g| g.name == class)
            .ok_or_else(|| Error::Lookup(format!("no ground truth for class {class}")))
    }
}

pub fn synth_gaussian_mixture(classes: &[GaussianClass], n_per_class: usize, seed: u64) -> Result<SyntheticDataset> {
    let dim = classes
        .first()
        .map(|c| c.mean.len())
        .ok_or_else(|| Error::Data("mixture needs at least one class".into()))?;
    let mut rng = stream(seed, Stage::Init, &[0x5157]);
    let mut values = Vec::with_capacity(classes.len() * n_per_class * dim);
    let mut labels = Vec::new();
    for (ci, c) in classes.iter().enumerate() {
        if c.mean.len() != dim {
            return Err(Error::Data(format!("class {} has dimension {}", c.name, c.mean.len())));
        }
        let l = c.factor()?;
        for _ in 0..n_per_class {
            let z = nalgebra::DVector::from_vec(normal_vec::<f64>(&mut rng, dim));
            let x = &l * z;
            values.extend(x.iter().zip(&c.mean).map(|(v, m)| v + m));
            labels.push(ci);
        }
    }
    let data = TabularDataset::new(
        Matrix::from_vec(labels.len(), dim, values)?,
        labels,
        classes.iter().map(|c| c.name.clone()).collect(),
        (0..dim).map(|i| format!("feature_{i}")).collect(),
    )?;
    Ok(SyntheticDataset {
        data,
        truth: classes.to_vec(),
    })
}

/// Built-in toy problems.
pub mod toys {
    use super::GaussianClass;
    use crate::hierarchy::{parse_table, BranchHierarchy};

    fn class(name: &str, mean: [f64; 2], cov: [[f64; 2]; 2]) -> GaussianClass {
        GaussianClass {
            name: name.into(),
            mean: mean.to_vec(),
            cov: cov.iter().map(|r| r.to_vec()).collect(),
        }
    }

    /// Two correlated 2-D Gaussians with roughly unit pooled variance.
    pub fn two_class() -> Vec<GaussianClass> {
        vec![
            class("a", [-0.7, 0.3], [[0.3, 0.1], [0.1, 0.5]]),
            class("b", [0.7, -0.3], [[0.4, -0.15], [-0.15, 0.6]]),
        ]
    }

    /// The classes stay distinguishable up to the horizon under the default
    /// process, so the shared root has zero length.
    pub fn two_class_hierarchy() -> BranchHierarchy {
        parse_table(&["a", "b"], 1.0, &[(1.0, 1.0, "a,b"), (0.0, 1.0, "a"), (0.0, 1.0, "b")])
            .expect("valid toy hierarchy")
    }

    /// Discrete-time hierarchy for [`two_class`] on steps `1..=1000`; the
    /// default discrete process mixes the classes by step 800.
    pub fn two_class_discrete_hierarchy() -> BranchHierarchy {
        parse_table(
            &["a", "b"],
            1000.0,
            &[(800.0, 1000.0, "a,b"), (0.0, 800.0, "a"), (0.0, 800.0, "b")],
        )
        .expect("valid toy hierarchy")
    }

    /// Classes differ along feature 0 and share the distribution of
    /// feature 1, the common latent coordinate. The shared coordinate carries
    /// most of the variance.
    pub fn shared_latent() -> Vec<GaussianClass> {
        vec![
            class("a", [-0.35, 0.0], [[0.05, 0.0], [0.0, 2.0]]),
            class("b", [0.35, 0.0], [[0.05, 0.0], [0.0, 2.0]]),
        ]
    }

    /// Hand-set branch point at 0.3, where the noised class coordinates
    /// already overlap.
    pub fn shared_latent_hierarchy() -> BranchHierarchy {
        parse_table(&["a", "b"], 1.0, &[(0.3, 1.0, "a,b"), (0.0, 0.3, "a"), (0.0, 0.3, "b")])
            .expect("valid toy hierarchy")
    }

    /// Base classes `a`, `b` plus the later class `c`, which sits near `b`.
    pub fn extension() -> (Vec<GaussianClass>, GaussianClass) {
        (
            vec![
                class("a", [-0.8, 0.0], [[0.25, 0.0], [0.0, 0.4]]),
                class("b", [0.6, 0.5], [[0.3, 0.05], [0.05, 0.25]]),
            ],
            class("c", [0.6, -0.5], [[0.25, -0.05], [-0.05, 0.3]]),
        )
    }

    pub fn extension_hierarchy() -> BranchHierarchy {
        two_class_hierarchy()
    }

    /// Sibling and attach time for adding `c` to [`extension_hierarchy`].
    pub const EXTENSION_ATTACH: (&str, f64) = ("b", 0.4);

    /// `k` classes in 4-D whose centers follow a balanced binary tree, so
    /// nearby classes separate late and distant ones early.
    pub fn nested(k: usize) -> Vec<GaussianClass> {
        (0..k)
            .map(|i| {
                let mut mean = [0.0; 4];
                for (level, m) in mean.iter_mut().enumerate() {
                    let bit = (i >> (3 - level.min(3))) & 1;
                    let scale = [1.2, 0.7, 0.4, 0.2][level];
                    *m = if bit == 1 { scale } else { -scale };
                }
                GaussianClass::isotropic(&format!("k{i}"), &mean, 0.05)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_mass_has_zero_spread() {
        let c = GaussianClass::isotropic("p", &[1.0, -2.0], 0.0);
        let s = synth_gaussian_mixture(&[c], 10, 1).unwrap();
        for i in 0..10 {
            assert_eq!(s.data.features.row(i), &[1.0, -2.0]);
        }
    }

    #[test]
    fn moments_match_spec() {
        let c = &toys::two_class()[1];
        let s = synth_gaussian_mixture(std::slice::from_ref(c), 100_000, 4).unwrap();
        let m = s.data.features.column_means();
        for j in 0..2 {
            assert!((m[j] - c.mean[j]).abs() < 0.01);
        }
        let n = s.data.len() as f64;
        for a in 0..2 {
            for b in 0..2 {
                let cov: f64 = (0..s.data.len())
                    .map(|i| (s.data.features[(i, a)] - m[a]) * (s.data.features[(i, b)] - m[b]))
                    .sum::<f64>()
                    / (n - 1.0);
                assert!((cov - c.cov[a][b]).abs() < 0.01, "{a}{b}: {cov}");
            }
        }
    }

    #[test]
    fn deterministic_and_validated() {
        let a = synth_gaussian_mixture(&toys::two_class(), 50, 9).unwrap();
        assert_eq!(a, synth_gaussian_mixture(&toys::two_class(), 50, 9).unwrap());
        let bad = GaussianClass {
            name: "x".into(),
            mean: vec![0.0, 0.0],
            cov: vec![vec![1.0, 2.0], vec![2.0, 1.0]],
        };
        assert!(matches!(synth_gaussian_mixture(&[bad], 5, 1), Err(Error::Data(_))));
    }
}
