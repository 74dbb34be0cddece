use std::collections::{BTreeMap, BTreeSet};

use super::BranchHierarchy;
use crate::error::{Error, Result};

type Clade = BTreeSet<String>;

fn clade_lengths(h: &BranchHierarchy) -> BTreeMap<Clade, f64> {
    let mut out = BTreeMap::new();
    for b in h.branches() {
        *out.entry(b.classes.iter().cloned().collect()).or_insert(0.0) += b.length();
    }
    out
}

/// Branch-score distance between two hierarchies over the same classes:
/// the root of the summed squared length differences of matching clades,
/// counting a clade missing from one tree as length zero.
pub fn branch_score_distance(h1: &BranchHierarchy, h2: &BranchHierarchy) -> Result<f64> {
    let a: BTreeSet<&String> = h1.classes().iter().collect();
    let b: BTreeSet<&String> = h2.classes().iter().collect();
    if a != b {
        return Err(Error::Domain("hierarchies cover different class sets".into()));
    }
    let l1 = clade_lengths(h1);
    let l2 = clade_lengths(h2);
    let keys: BTreeSet<&Clade> = l1.keys().chain(l2.keys()).collect();
    let sum: f64 = keys
        .into_iter()
        .map(|k| {
            let d = l1.get(k).copied().unwrap_or(0.0) - l2.get(k).copied().unwrap_or(0.0);
            d * d
        })
        .sum();
    Ok(sum.sqrt())
}
