//! Data-driven branch discovery.
//!
//! Objects of each class are forward diffused over a time grid, mean
//! Euclidean distances between random cross-class and within-class pairs are
//! tracked per time point, the curves are smoothed, and each class pair gets
//! a merge time: the first grid time where the cross-class distance falls
//! within `epsilon` of the average self-distance. Pairs are then merged in
//! ascending order with a disjoint-set forest to form the tree.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Branch, BranchHierarchy};
use crate::data::TabularDataset;
use crate::diffusion::Process;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::NoiseSource;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscoveryConfig {
    /// Objects sampled per class (capped at the class size).
    pub n: usize,
    pub grid_points: usize,
    pub epsilon: f64,
    /// Smoothing kernel standard deviation, in grid units.
    pub smoothing_sigma: f64,
    /// Kernel support in standard deviations on each side.
    pub smoothing_truncate: f64,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            n: 500,
            grid_points: 1000,
            epsilon: 0.005,
            smoothing_sigma: 3.0,
            smoothing_truncate: 4.0,
        }
    }
}

/// Mean pairwise distance curves over a time grid, one per unordered class
/// pair `(i, j)` with `i <= j`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceCurves {
    pub grid: Vec<f64>,
    pub classes: Vec<String>,
    curves: BTreeMap<(usize, usize), Vec<f64>>,
}

impl DistanceCurves {
    pub fn new(grid: Vec<f64>, classes: Vec<String>, curves: BTreeMap<(usize, usize), Vec<f64>>) -> Self {
        Self { grid, classes, curves }
    }

    pub fn curve(&self, i: usize, j: usize) -> &[f64] {
        let key = if i <= j { (i, j) } else { (j, i) };
        &self.curves[&key]
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&(usize, usize), &Vec<f64>)> {
        self.curves.iter()
    }

    /// CSV with a `t` column followed by one column per class pair.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for &(i, j) in self.curves.keys() {
            out.push_str(&format!(",{}|{}", self.classes[i], self.classes[j]));
        }
        out.push('\n');
        for (k, t) in self.grid.iter().enumerate() {
            out.push_str(&t.to_string());
            for c in self.curves.values() {
                out.push_str(&format!(",{}", c[k]));
            }
            out.push('\n');
        }
        out
    }
}

/// Merge time per class pair `(i, j)`, `i < j`.
pub type MergeTimes = BTreeMap<(usize, usize), f64>;

/// Uniform grid of `points` times on `(0, T]`. For discrete processes the
/// grid is the integer steps.
pub fn uniform_grid<S: Scalar>(process: &Process<S>, points: usize) -> Vec<f64> {
    let horizon = process.horizon();
    if process.is_discrete() {
        let steps = horizon as usize;
        (1..=points.min(steps))
            .map(|k| ((k * steps) as f64 / points.min(steps) as f64).round())
            .collect()
    } else {
        (1..=points).map(|k| horizon * k as f64 / points as f64).collect()
    }
}

pub fn pairwise_noisy_distances<S: Scalar, R: Rng>(
    features: &Matrix<f64>,
    labels: &[usize],
    classes: &[String],
    n: usize,
    process: &Process<S>,
    grid: &[f64],
    rng: &mut R,
) -> Result<DistanceCurves> {
    if n == 0 {
        return Err(Error::Domain("need at least one pair per class".into()));
    }
    if labels.len() != features.rows() {
        return Err(Error::Data("label count does not match rows".into()));
    }
    let dim = features.cols();
    // Subsample each class without replacement.
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes.len()];
    for (row, &c) in labels.iter().enumerate() {
        members
            .get_mut(c)
            .ok_or_else(|| Error::Data(format!("label index {c} out of range")))?
            .push(row);
    }
    for (c, m) in members.iter_mut().enumerate() {
        if m.len() < 2 {
            return Err(Error::Data(format!(
                "class {} has {} objects; discovery needs at least 2",
                classes[c],
                m.len()
            )));
        }
        m.shuffle(rng);
        m.truncate(n);
    }
    // Pairings are fixed across the grid.
    let mut self_pairs = Vec::with_capacity(classes.len());
    for m in &members {
        let k = m.len();
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(rng);
        let pairs: Vec<(usize, usize)> = (0..n).map(|p| (perm[p % k], perm[(p + 1) % k])).collect();
        self_pairs.push(pairs);
    }
    let mut cross_pairs = BTreeMap::new();
    for i in 0..classes.len() {
        for j in i + 1..classes.len() {
            let (ki, kj) = (members[i].len(), members[j].len());
            let mut pi: Vec<usize> = (0..ki).collect();
            let mut pj: Vec<usize> = (0..kj).collect();
            pi.shuffle(rng);
            pj.shuffle(rng);
            let pairs: Vec<(usize, usize)> = (0..n).map(|p| (pi[p % ki], pj[p % kj])).collect();
            cross_pairs.insert((i, j), pairs);
        }
    }

    let mut curves: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    let mut noised: Vec<Vec<f64>> = members.iter().map(|m| vec![0.0; m.len() * dim]).collect();
    let mut eps = vec![S::zero(); dim];
    for &t in grid {
        let (a, s) = process.marginal(t)?;
        let (a, s) = (a.f64(), s.f64());
        for (c, m) in members.iter().enumerate() {
            for (slot, &row) in m.iter().enumerate() {
                rng.fill_normal(&mut eps);
                let x0 = features.row(row);
                let dst = &mut noised[c][slot * dim..(slot + 1) * dim];
                for d in 0..dim {
                    dst[d] = a * x0[d] + s * eps[d].f64();
                }
            }
        }
        let dist = |ci: usize, p: usize, cj: usize, q: usize| -> f64 {
            let x = &noised[ci][p * dim..(p + 1) * dim];
            let y = &noised[cj][q * dim..(q + 1) * dim];
            x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
        };
        for (c, pairs) in self_pairs.iter().enumerate() {
            let mean = pairs.iter().map(|&(p, q)| dist(c, p, c, q)).sum::<f64>() / pairs.len() as f64;
            curves.entry((c, c)).or_default().push(mean);
        }
        for (&(i, j), pairs) in &cross_pairs {
            let mean = pairs.iter().map(|&(p, q)| dist(i, p, j, q)).sum::<f64>() / pairs.len() as f64;
            curves.entry((i, j)).or_default().push(mean);
        }
    }
    Ok(DistanceCurves::new(grid.to_vec(), classes.to_vec(), curves))
}

/// Convolves every curve with a truncated Gaussian kernel (in grid units),
/// renormalizing the weights near the ends.
pub fn smooth_curves(curves: &DistanceCurves, sigma: f64, truncate: f64) -> DistanceCurves {
    let radius = (truncate * sigma).round() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let smooth = |c: &Vec<f64>| -> Vec<f64> {
        let n = c.len() as isize;
        (0..n)
            .map(|i| {
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for (o, w) in (-radius..=radius).zip(&kernel) {
                    let j = i + o;
                    if (0..n).contains(&j) {
                        acc += w * c[j as usize];
                        wsum += w;
                    }
                }
                acc / wsum
            })
            .collect()
    };
    DistanceCurves {
        grid: curves.grid.clone(),
        classes: curves.classes.clone(),
        curves: curves.curves.iter().map(|(k, c)| (*k, smooth(c))).collect(),
    }
}

/// First grid time where `cross <= (self_i + self_j) / 2 + epsilon`; the
/// horizon when the criterion never holds.
pub fn merge_times(curves: &DistanceCurves, epsilon: f64, horizon: f64) -> MergeTimes {
    let n = curves.classes.len();
    let mut out = MergeTimes::new();
    for i in 0..n {
        for j in i + 1..n {
            let cross = curves.curve(i, j);
            let (si, sj) = (curves.curve(i, i), curves.curve(j, j));
            let tau = (0..curves.grid.len())
                .find(|&k| cross[k] <= 0.5 * (si[k] + sj[k]) + epsilon)
                .map_or(horizon, |k| curves.grid[k]);
            out.insert((i, j), tau);
        }
    }
    out
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
}

/// Greedy agglomeration of classes in ascending merge-time order; equal
/// times are taken in lexicographic pair order.
pub fn build_hierarchy(taus: &MergeTimes, classes: &[String], horizon: f64) -> Result<BranchHierarchy> {
    let mut uniq = std::collections::BTreeSet::new();
    for c in classes {
        if !uniq.insert(c) {
            return Err(Error::Data(format!("duplicate class {c}")));
        }
    }
    if classes.is_empty() {
        return Err(Error::Data("no classes".into()));
    }
    let n = classes.len();
    let mut order = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let tau = *taus
                .get(&(i, j))
                .ok_or_else(|| Error::Data(format!("missing merge time for {} and {}", classes[i], classes[j])))?;
            if !(0.0..=horizon).contains(&tau) {
                return Err(Error::Domain(format!("merge time {tau} outside [0, {horizon}]")));
            }
            order.push((tau, i, j));
        }
    }
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    // Open subtree node per set: (class indices, start time).
    let mut sets = DisjointSet::new(n);
    let mut open: Vec<Option<(Vec<usize>, f64)>> = (0..n).map(|i| Some((vec![i], 0.0))).collect();
    let mut branches = Vec::with_capacity(2 * n - 1);
    let close = |members: Vec<usize>, start: f64, end: f64, out: &mut Vec<Branch>| {
        let mut members = members;
        members.sort_unstable();
        out.push(Branch {
            start,
            end,
            classes: members.iter().map(|&m| classes[m].clone()).collect(),
            task_index: 0,
        });
    };
    for (tau, i, j) in order {
        let (ri, rj) = (sets.find(i), sets.find(j));
        if ri == rj {
            continue;
        }
        let (ci, si) = open[ri].take().expect("open set");
        let (cj, sj) = open[rj].take().expect("open set");
        close(ci.clone(), si, tau, &mut branches);
        close(cj.clone(), sj, tau, &mut branches);
        sets.parent[rj] = ri;
        let mut merged = ci;
        merged.extend(cj);
        open[ri] = Some((merged, tau));
    }
    let root = sets.find(0);
    let (members, start) = open[root].take().expect("root set");
    close(members, start, horizon, &mut branches);

    let mut h = BranchHierarchy::from_parts(classes.to_vec(), horizon, branches);
    for (k, b) in h.branches.iter_mut().enumerate() {
        b.task_index = k;
    }
    h.canonicalize(true);
    Ok(h)
}

/// Output of the full discovery pipeline.
#[derive(Clone, Debug)]
pub struct Discovery {
    pub raw: DistanceCurves,
    pub smoothed: DistanceCurves,
    pub merge_times: MergeTimes,
    pub hierarchy: BranchHierarchy,
}

pub fn discover<S: Scalar, R: Rng>(
    data: &TabularDataset,
    process: &Process<S>,
    cfg: &DiscoveryConfig,
    rng: &mut R,
) -> Result<Discovery> {
    let grid = uniform_grid(process, cfg.grid_points);
    let raw = pairwise_noisy_distances(&data.features, &data.labels, &data.classes, cfg.n, process, &grid, rng)?;
    let smoothed = smooth_curves(&raw, cfg.smoothing_sigma, cfg.smoothing_truncate);
    let taus = merge_times(&smoothed, cfg.epsilon, process.horizon());
    let hierarchy = build_hierarchy(&taus, &data.classes, process.horizon())?;
    Ok(Discovery {
        raw,
        smoothed,
        merge_times: taus,
        hierarchy,
    })
}
