use rand::Rng;

use super::{Branch, BranchHierarchy};
use crate::error::{Error, Result};

/// Random hierarchy built top-down: a uniformly random two-way split of
/// each class set at a uniform time below its parent's, until singletons.
pub fn random_hierarchy<R: Rng>(classes: &[String], horizon: f64, rng: &mut R) -> Result<BranchHierarchy> {
    if classes.is_empty() {
        return Err(Error::Domain("random hierarchy needs at least one class".into()));
    }
    let mut branches = Vec::with_capacity(2 * classes.len() - 1);
    grow(classes.to_vec(), horizon, rng, &mut branches);
    let mut h = BranchHierarchy::from_parts(classes.to_vec(), horizon, branches);
    for (k, b) in h.branches.iter_mut().enumerate() {
        b.task_index = k;
    }
    h.canonicalize(true);
    Ok(h)
}

fn grow<R: Rng>(set: Vec<String>, end: f64, rng: &mut R, out: &mut Vec<Branch>) {
    if set.len() == 1 {
        out.push(Branch {
            start: 0.0,
            end,
            classes: set,
            task_index: 0,
        });
        return;
    }
    let start = rng.random_range(0.0..end);
    out.push(Branch {
        start,
        end,
        classes: set.clone(),
        task_index: 0,
    });
    let (left, right) = loop {
        let (l, r): (Vec<String>, Vec<String>) = set.iter().cloned().partition(|_| rng.random_bool(0.5));
        if !l.is_empty() && !r.is_empty() {
            break (l, r);
        }
    };
    grow(left, start, rng, out);
    grow(right, start, rng, out);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stage};

    #[test]
    fn shapes_and_validity() {
        let mut rng = stream(5, Stage::Discover, &[]);
        let one = random_hierarchy(&["c".to_string()], 1.0, &mut rng).unwrap();
        assert_eq!(one, BranchHierarchy::single("c", 1.0));
        let classes: Vec<String> = (0..10).map(|i| i.to_string()).collect();
        for _ in 0..10 {
            let h = random_hierarchy(&classes, 1.0, &mut rng).unwrap();
            assert_eq!(h.branches().len(), 19);
            assert!(h.validate().is_empty());
            for b in h.branches() {
                if let Some(p) = h.parent(b.task_index) {
                    let p = h.branch(p).unwrap();
                    assert_eq!(p.start, b.end);
                    if b.classes.len() > 1 {
                        assert!(b.start < p.start);
                    }
                }
            }
        }
    }
}
