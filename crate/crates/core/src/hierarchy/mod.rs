//! Branch hierarchies: the rooted tree of `(start, end, classes)` branches that
//! partitions class x diffusion-time space, one output head per branch.
//!
//! Intervals are half-open `[start, end)`; the horizon `T` itself belongs to
//! the root. Merges at equal times produce zero-length intermediate
//! branches, which own no time and are never visited by samplers.

mod discovery;
mod distance;
mod random;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use discovery::{
    build_hierarchy, discover, merge_times, pairwise_noisy_distances, smooth_curves, uniform_grid, Discovery,
    DiscoveryConfig, DistanceCurves, MergeTimes,
};
pub use distance::branch_score_distance;
pub use random::random_hierarchy;

/// Grid resolution used for partition checks.
pub const VALIDATION_GRID: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub start: f64,
    pub end: f64,
    pub classes: Vec<String>,
    pub task_index: usize,
}

impl Branch {
    pub fn contains_time(&self, t: f64) -> bool {
        self.start <= t && t < self.end
    }

    pub fn contains_class(&self, c: &str) -> bool {
        self.classes.iter().any(|x| x == c)
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchHierarchy {
    classes: Vec<String>,
    horizon: f64,
    branches: Vec<Branch>,
}

/// A structural problem found by [`BranchHierarchy::validate`].
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    BranchCount { expected: usize, found: usize },
    EmptyBranch { task: usize },
    BadInterval { task: usize, start: f64, end: f64 },
    UnknownClass { task: usize, class: String },
    DuplicateTask { task: usize },
    DuplicateClass { class: String },
    Uncovered { class: String, t: f64 },
    Overlap { class: String, t: f64, tasks: Vec<usize> },
    MissingRoot,
    MissingLeaf { class: String },
    NotNested { a: usize, b: usize },
    Detached { task: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::BranchCount { expected, found } => {
                write!(f, "expected {expected} branches, found {found}")
            }
            Violation::EmptyBranch { task } => write!(f, "branch {task} has no classes"),
            Violation::BadInterval { task, start, end } => {
                write!(f, "branch {task} has invalid interval [{start}, {end})")
            }
            Violation::UnknownClass { task, class } => {
                write!(f, "branch {task} names unknown class {class}")
            }
            Violation::DuplicateTask { task } => write!(f, "task index {task} used twice"),
            Violation::DuplicateClass { class } => write!(f, "class {class} listed twice"),
            Violation::Uncovered { class, t } => {
                write!(f, "cell (class {class}, t {t}) is covered by no branch")
            }
            Violation::Overlap { class, t, tasks } => write!(
                f,
                "cell (class {class}, t {t}) is covered by {} branches {tasks:?}",
                tasks.len()
            ),
            Violation::MissingRoot => write!(f, "no root branch ending at the horizon over all classes"),
            Violation::MissingLeaf { class } => write!(f, "class {class} has no leaf starting at 0"),
            Violation::NotNested { a, b } => {
                write!(f, "branches {a} and {b} have overlapping but unnested class sets")
            }
            Violation::Detached { task } => {
                write!(f, "branch {task} does not end where its parent starts")
            }
        }
    }
}

/// Result of attaching a new class to a hierarchy.
#[derive(Clone, Debug, PartialEq)]
pub struct Attachment {
    pub hierarchy: BranchHierarchy,
    /// Task of the new leaf `(0, attach_time, {new})`.
    pub new_leaf_task: usize,
    /// Leaf task of the sibling class, whose head seeds the new leaf.
    pub sibling_leaf_task: usize,
    /// `(original task, new upper task)` for the split branch; the upper part
    /// keeps serving the original classes plus the new one.
    pub split: (usize, usize),
    /// Old task index -> new task index.
    pub task_map: Vec<usize>,
}

impl BranchHierarchy {
    /// Builds a hierarchy and rejects it if [`validate`](Self::validate)
    /// reports any violation.
    pub fn new(classes: Vec<String>, horizon: f64, branches: Vec<Branch>) -> Result<Self> {
        let h = Self::from_parts(classes, horizon, branches);
        let v = h.validate();
        if v.is_empty() {
            Ok(h)
        } else {
            let msgs: Vec<String> = v.iter().take(5).map(ToString::to_string).collect();
            Err(Error::Data(format!(
                "invalid hierarchy ({} violations): {}",
                v.len(),
                msgs.join("; ")
            )))
        }
    }

    /// Builds a hierarchy without validation.
    pub fn from_parts(classes: Vec<String>, horizon: f64, branches: Vec<Branch>) -> Self {
        Self {
            classes,
            horizon,
            branches,
        }
    }

    pub fn single(class: &str, horizon: f64) -> Self {
        Self::from_parts(
            vec![class.to_string()],
            horizon,
            vec![Branch {
                start: 0.0,
                end: horizon,
                classes: vec![class.to_string()],
                task_index: 0,
            }],
        )
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn task_count(&self) -> usize {
        self.branches.len()
    }

    pub fn class_index(&self, c: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|x| x == c)
            .ok_or_else(|| Error::Lookup(format!("unknown class {c}")))
    }

    pub fn branch(&self, task: usize) -> Result<&Branch> {
        self.branches
            .iter()
            .find(|b| b.task_index == task)
            .ok_or_else(|| Error::Lookup(format!("no branch with task index {task}")))
    }

    /// The branch over all classes that ends at the horizon.
    pub fn root(&self) -> Result<&Branch> {
        self.branches
            .iter()
            .filter(|b| b.end == self.horizon && b.classes.len() == self.classes.len())
            .max_by(|a, b| a.length().total_cmp(&b.length()))
            .ok_or_else(|| Error::Data("hierarchy has no root branch".into()))
    }

    /// Task of the branch responsible for class `c` at time `t`.
    pub fn lookup(&self, c: &str, t: f64) -> Result<usize> {
        self.class_index(c)?;
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::Domain(format!("time {t} outside [0, {}]", self.horizon)));
        }
        if t == self.horizon {
            return Ok(self.root()?.task_index);
        }
        self.branches
            .iter()
            .find(|b| b.contains_class(c) && b.contains_time(t))
            .map(|b| b.task_index)
            .ok_or_else(|| Error::Lookup(format!("no branch covers class {c} at t = {t}")))
    }

    /// Branches containing `c`, ordered from the root down to the leaf.
    pub fn path(&self, c: &str) -> Result<Vec<&Branch>> {
        self.class_index(c)?;
        let mut p: Vec<&Branch> = self.branches.iter().filter(|b| b.contains_class(c)).collect();
        p.sort_by(|a, b| {
            b.start
                .total_cmp(&a.start)
                .then(b.end.total_cmp(&a.end))
                .then(b.classes.len().cmp(&a.classes.len()))
        });
        Ok(p)
    }

    /// Start of the lowest branch shared by two distinct classes.
    pub fn lca_branch_point(&self, c1: &str, c2: &str) -> Result<f64> {
        self.class_index(c1)?;
        self.class_index(c2)?;
        if c1 == c2 {
            return Err(Error::Domain(format!(
                "branch point needs two distinct classes, got {c1} twice"
            )));
        }
        self.branches
            .iter()
            .filter(|b| b.contains_class(c1) && b.contains_class(c2))
            .map(|b| b.start)
            .min_by(f64::total_cmp)
            .ok_or_else(|| Error::Lookup(format!("classes {c1} and {c2} share no branch")))
    }

    /// Parent task: the smallest strict superset branch.
    pub fn parent(&self, task: usize) -> Option<usize> {
        let b = self.branch(task).ok()?;
        self.branches
            .iter()
            .filter(|p| {
                p.task_index != task
                    && p.classes.len() > b.classes.len()
                    && b.classes.iter().all(|c| p.contains_class(c))
            })
            .min_by(|x, y| x.classes.len().cmp(&y.classes.len()).then(x.start.total_cmp(&y.start)))
            .map(|p| p.task_index)
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let n = self.classes.len();
        let mut seen = BTreeSet::new();
        for c in &self.classes {
            if !seen.insert(c) {
                out.push(Violation::DuplicateClass { class: c.clone() });
            }
        }
        let expected = (2 * n).saturating_sub(1);
        if self.branches.len() != expected {
            out.push(Violation::BranchCount {
                expected,
                found: self.branches.len(),
            });
        }
        let mut tasks = BTreeSet::new();
        for b in &self.branches {
            if !tasks.insert(b.task_index) {
                out.push(Violation::DuplicateTask { task: b.task_index });
            }
            if b.classes.is_empty() {
                out.push(Violation::EmptyBranch { task: b.task_index });
            }
            if !(b.start >= 0.0 && b.start <= b.end && b.end <= self.horizon) {
                out.push(Violation::BadInterval {
                    task: b.task_index,
                    start: b.start,
                    end: b.end,
                });
            }
            for c in &b.classes {
                if !self.classes.contains(c) {
                    out.push(Violation::UnknownClass {
                        task: b.task_index,
                        class: c.clone(),
                    });
                }
            }
        }
        if !self
            .branches
            .iter()
            .any(|b| b.end == self.horizon && b.classes.len() == n && n > 0)
        {
            out.push(Violation::MissingRoot);
        }
        for c in &self.classes {
            if !self
                .branches
                .iter()
                .any(|b| b.start == 0.0 && b.classes.len() == 1 && &b.classes[0] == c && b.end > 0.0)
            {
                out.push(Violation::MissingLeaf { class: c.clone() });
            }
        }
        // Laminar class sets: any two are disjoint or nested.
        for (i, a) in self.branches.iter().enumerate() {
            for b in &self.branches[i + 1..] {
                let shared = a.classes.iter().filter(|c| b.contains_class(c)).count();
                if shared > 0 && shared < a.classes.len() && shared < b.classes.len() {
                    out.push(Violation::NotNested {
                        a: a.task_index,
                        b: b.task_index,
                    });
                }
            }
        }
        // Every non-root branch ends exactly where its parent starts.
        if let Ok(root) = self.root() {
            for b in &self.branches {
                if b.task_index == root.task_index {
                    continue;
                }
                match self.parent(b.task_index).and_then(|p| self.branch(p).ok()) {
                    Some(p) if p.start == b.end => {}
                    _ => out.push(Violation::Detached { task: b.task_index }),
                }
            }
        }
        // Partition of the class x time grid.
        for c in &self.classes {
            for k in 0..VALIDATION_GRID {
                let t = self.horizon * k as f64 / VALIDATION_GRID as f64;
                let hits: Vec<usize> = self
                    .branches
                    .iter()
                    .filter(|b| b.contains_class(c) && b.contains_time(t))
                    .map(|b| b.task_index)
                    .collect();
                match hits.len() {
                    1 => {}
                    0 => out.push(Violation::Uncovered { class: c.clone(), t }),
                    _ => out.push(Violation::Overlap {
                        class: c.clone(),
                        t,
                        tasks: hits,
                    }),
                }
            }
        }
        out
    }

    /// Reorders branches in pre-order from the root (children by their first
    /// class in class order) and, when `renumber` is set, assigns task indices
    /// by position.
    pub(crate) fn canonicalize(&mut self, renumber: bool) {
        let order: BTreeMap<&str, usize> = self.classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        for b in &mut self.branches {
            b.classes
                .sort_by_key(|c| order.get(c.as_str()).copied().unwrap_or(usize::MAX));
        }
        let key = |b: &Branch| order.get(b.classes[0].as_str()).copied().unwrap_or(usize::MAX);
        let Ok(root) = self.root().map(|b| b.task_index) else {
            return;
        };
        let mut children: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for b in &self.branches {
            if b.task_index != root {
                if let Some(p) = self.parent(b.task_index) {
                    children.entry(p).or_default().push(b.task_index);
                }
            }
        }
        let mut seq = Vec::new();
        let mut stack = vec![root];
        while let Some(t) = stack.pop() {
            seq.push(t);
            if let Some(ch) = children.get(&t) {
                let mut ch = ch.clone();
                ch.sort_by_key(|&c| key(self.branch(c).expect("child exists")));
                stack.extend(ch.into_iter().rev());
            }
        }
        if seq.len() != self.branches.len() {
            return;
        }
        let mut sorted: Vec<Branch> = seq
            .iter()
            .map(|&t| self.branch(t).expect("task exists").clone())
            .collect();
        if renumber {
            for (i, b) in sorted.iter_mut().enumerate() {
                b.task_index = i;
            }
        }
        self.branches = sorted;
    }

    /// Adds `new_class` as a sibling of `sibling` at `attach_time`.
    ///
    /// The branch on the sibling's path that contains `attach_time` is split
    /// there; its lower part keeps the original task and the upper part gets
    /// a fresh task serving the same classes plus the new one. Every branch
    /// above also gains the new class. Existing task indices are preserved.
    pub fn attach_class(&self, new_class: &str, sibling: &str, attach_time: f64) -> Result<Attachment> {
        if self.class_index(new_class).is_ok() {
            return Err(Error::Data(format!("class {new_class} already exists")));
        }
        self.class_index(sibling)?;
        if !(attach_time > 0.0 && attach_time < self.horizon) {
            return Err(Error::Domain(format!(
                "attach time {attach_time} must lie in (0, {})",
                self.horizon
            )));
        }
        let sibling_leaf_task = self.lookup(sibling, 0.0)?;
        let target = self.lookup(sibling, attach_time)?;
        let target_branch = self.branch(target)?.clone();
        let next_task = self.branches.iter().map(|b| b.task_index).max().map_or(0, |m| m + 1);
        let upper_task = next_task;
        let new_leaf_task = next_task + 1;

        let mut branches = Vec::with_capacity(self.branches.len() + 2);
        for b in &self.branches {
            let mut b = b.clone();
            if b.task_index == target {
                b.end = attach_time;
            } else if b.contains_class(sibling) && b.start >= target_branch.end {
                b.classes.push(new_class.to_string());
            }
            branches.push(b);
        }
        let mut upper_classes = target_branch.classes.clone();
        upper_classes.push(new_class.to_string());
        branches.push(Branch {
            start: attach_time,
            end: target_branch.end,
            classes: upper_classes,
            task_index: upper_task,
        });
        branches.push(Branch {
            start: 0.0,
            end: attach_time,
            classes: vec![new_class.to_string()],
            task_index: new_leaf_task,
        });
        let mut classes = self.classes.clone();
        classes.push(new_class.to_string());
        let mut h = Self::from_parts(classes, self.horizon, branches);
        h.canonicalize(false);
        let violations = h.validate();
        if !violations.is_empty() {
            return Err(Error::Data(format!(
                "attachment produced an invalid hierarchy: {}",
                violations[0]
            )));
        }
        let task_map = (0..next_task).collect();
        Ok(Attachment {
            hierarchy: h,
            new_leaf_task,
            sibling_leaf_task,
            split: (target, upper_task),
            task_map,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("hierarchy serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let h: Self = serde_json::from_str(s).map_err(|e| Error::Format(format!("hierarchy JSON: {e}")))?;
        Self::new(h.classes, h.horizon, h.branches)
    }

    /// Branch table with one row per branch: start, end, classes.
    pub fn table(&self) -> String {
        let mut rows = vec![(
            "Branch start".to_string(),
            "Branch end".to_string(),
            "Branch classes".to_string(),
        )];
        let mut internal: Vec<&Branch> = self
            .branches
            .iter()
            .filter(|b| b.start > 0.0 || b.end == self.horizon)
            .collect();
        let mut leaves: Vec<&Branch> = self
            .branches
            .iter()
            .filter(|b| !(b.start > 0.0 || b.end == self.horizon))
            .collect();
        internal.sort_by(|a, b| b.start.total_cmp(&a.start));
        leaves.sort_by(|a, b| b.end.total_cmp(&a.end));
        for b in internal.into_iter().chain(leaves) {
            rows.push((format!("{}", b.start), format!("{}", b.end), b.classes.join(",")));
        }
        let w0 = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let w1 = rows.iter().map(|r| r.1.len()).max().unwrap_or(0);
        rows.iter()
            .map(|(a, b, c)| format!("{a:>w0$}  {b:>w1$}  {c}\n"))
            .collect()
    }
}

/// Parses the three-column `start end classes` layout used by branch tables
/// (classes comma separated). Task indices follow row order.
pub fn parse_table(classes: &[&str], horizon: f64, rows: &[(f64, f64, &str)]) -> Result<BranchHierarchy> {
    let branches = rows
        .iter()
        .enumerate()
        .map(|(i, (s, e, cs))| Branch {
            start: *s,
            end: *e,
            classes: cs.split(',').map(|c| c.trim().to_string()).collect(),
            task_index: i,
        })
        .collect();
    BranchHierarchy::new(classes.iter().map(|c| c.to_string()).collect(), horizon, branches)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn digits_tree() -> BranchHierarchy {
        parse_table(
            &["0", "4", "9"],
            1.0,
            &[
                (0.5, 1.0, "0,4,9"),
                (0.0, 0.5, "0"),
                (0.35, 0.5, "4,9"),
                (0.0, 0.35, "4"),
                (0.0, 0.35, "9"),
            ],
        )
        .unwrap()
    }
}
