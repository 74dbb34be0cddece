//! Reverse-mode differentiation over dense matrices, a named parameter store
//! and an Adam optimizer.
//!
//! A [`Tape`] records primitive ops while the forward pass runs; values are
//! kept on the tape and gradients are pushed back into the
//! [`ParameterStore`] by [`Tape::backward`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::matrix::{gemm_slices, Matrix};
use crate::scalar::Scalar;

/// Index of an entry in a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<S>,
    pub grad: Vec<S>,
    pub frozen: bool,
    pub m: Vec<S>,
    pub v: Vec<S>,
    pub step: u64,
    touched: bool,
}

impl<S: Scalar> Param<S> {
    fn new(name: String, shape: Vec<usize>, value: Vec<S>) -> Self {
        let n = value.len();
        Self {
            name,
            shape,
            value,
            grad: vec![S::zero(); n],
            frozen: false,
            m: vec![S::zero(); n],
            v: vec![S::zero(); n],
            step: 0,
            touched: false,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// True when a backward pass has written a gradient since the last step.
    pub fn touched(&self) -> bool {
        self.touched
    }
}

/// Named flat parameter arrays with gradient slots and Adam moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<S> {
    params: Vec<Param<S>>,
    index: BTreeMap<String, ParamId>,
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, value: Vec<S>) -> Result<ParamId> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::Shape(format!(
                "parameter {name}: shape {shape:?} does not hold {} values",
                value.len()
            )));
        }
        if self.index.contains_key(name) {
            return Err(Error::State(format!("parameter {name} already exists")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param::new(name.to_string(), shape, value));
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("no parameter named {name}")))
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Param<S>> {
        Ok(self.get(self.id(name)?))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values over trainable (unfrozen) entries.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(Param::len).sum()
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let id = self.id(name)?;
        self.params[id.0].frozen = frozen;
        Ok(())
    }

    /// Freezes (or unfreezes) every entry whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = true;
        }
    }

    /// Copies the values of `src` into `dst`, which must have the same shape.
    pub fn copy_values(&mut self, src: &str, dst: &str) -> Result<()> {
        let s = self.id(src)?;
        let d = self.id(dst)?;
        if self.params[s.0].shape != self.params[d.0].shape {
            return Err(Error::Shape(format!(
                "cannot copy {src} {:?} into {dst} {:?}",
                self.params[s.0].shape, self.params[d.0].shape
            )));
        }
        let vals = self.params[s.0].value.clone();
        self.params[d.0].value = vals;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(S::zero());
            p.touched = false;
        }
    }

    fn accumulate(&mut self, id: ParamId, grad: impl Iterator<Item = S>) {
        let p = &mut self.params[id.0];
        for (g, d) in p.grad.iter_mut().zip(grad) {
            *g += d;
        }
        p.touched = true;
    }

    /// Applies one Adam update to every touched, unfrozen entry and zeroes
    /// all gradients. A non-finite gradient aborts the step before any value
    /// changes.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        for p in &self.params {
            if p.touched && !p.frozen {
                if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient in {} at index {i}",
                        p.name
                    )));
                }
            }
        }
        let (b1, b2) = (S::of(cfg.beta1), S::of(cfg.beta2));
        let (lr, eps) = (S::of(cfg.lr), S::of(cfg.eps));
        for p in &mut self.params {
            if !p.touched || p.frozen {
                continue;
            }
            p.step += 1;
            let c1 = S::one() - S::of(cfg.beta1.powi(p.step as i32));
            let c2 = S::one() - S::of(cfg.beta2.powi(p.step as i32));
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.m[i] = b1 * p.m[i] + (S::one() - b1) * g;
                p.v[i] = b2 * p.v[i] + (S::one() - b2) * g * g;
                let mhat = p.m[i] / c1;
                let vhat = p.v[i] / c2;
                p.value[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        self.zero_grads();
        Ok(())
    }

    /// Dense layer parameters `<layer>.weight` and `<layer>.bias`.
    pub fn dense_ids(&self, layer: &str) -> Result<(ParamId, ParamId)> {
        Ok((self.id(&format!("{layer}.weight"))?, self.id(&format!("{layer}.bias"))?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Dense { x: Var, w: ParamId, b: ParamId },
    Silu(Var),
    Concat(Var, Var),
    Rows { x: Var, idx: Vec<usize> },
    Gather { table: ParamId, idx: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Matrix<S>,
    op: Op,
}

/// Recorded forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    spent: bool,
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            spent: false,
        }
    }

    fn push(&mut self, value: Matrix<S>, op: Op) -> Var {
        self.spent = false;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<S> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, m: Matrix<S>) -> Var {
        self.push(m, Op::Input)
    }

    /// `x * W + b` with parameters `<layer>.weight` (in x out) and
    /// `<layer>.bias`.
    pub fn dense(&mut self, store: &ParameterStore<S>, layer: &str, x: Var) -> Result<Var> {
        let (w, b) = store.dense_ids(layer)?;
        let wp = store.get(w);
        let (fan_in, fan_out) = match wp.shape[..] {
            [i, o] => (i, o),
            _ => return Err(Error::Shape(format!("{layer}.weight is not a matrix"))),
        };
        let xin = self.value(x);
        if xin.cols() != fan_in {
            return Err(Error::Shape(format!(
                "{layer} expects width {fan_in}, got {}",
                xin.cols()
            )));
        }
        if store.get(b).len() != fan_out {
            return Err(Error::Shape(format!("{layer}.bias has wrong length")));
        }
        let rows = xin.rows();
        let mut out = Matrix::zeros(rows, fan_out);
        let bias = &store.get(b).value;
        for i in 0..rows {
            out.row_mut(i).copy_from_slice(bias);
        }
        gemm_slices(
            (xin.as_slice(), rows, fan_in, false),
            (&wp.value, fan_in, fan_out, false),
            S::one(),
            out.as_mut_slice(),
            fan_out,
        );
        Ok(self.push(out, Op::Dense { x, w, b }))
    }

    /// Sigmoid-weighted linear unit `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hcat(self.value(b))?;
        Ok(self.push(out, Op::Concat(a, b)))
    }

    /// Selects rows of `x`.
    pub fn rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let out = self.value(x).select_rows(idx);
        self.push(out, Op::Rows { x, idx: idx.to_vec() })
    }

    /// Rows of the embedding table `name` (shape `classes x width`).
    pub fn gather(&mut self, store: &ParameterStore<S>, name: &str, idx: &[usize]) -> Result<Var> {
        let id = store.id(name)?;
        let p = store.get(id);
        let (n, w) = match p.shape[..] {
            [n, w] => (n, w),
            _ => return Err(Error::Shape(format!("{name} is not a matrix"))),
        };
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Lookup(format!("{name} has no row {bad}")));
        }
        let mut out = Matrix::zeros(idx.len(), w);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(&p.value[i * w..(i + 1) * w]);
        }
        Ok(self.push(
            out,
            Op::Gather {
                table: id,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Propagates the seed gradients back through the tape, accumulating
    /// into `store`, then clears the tape.
    pub fn backward(&mut self, store: &mut ParameterStore<S>, seeds: &[(Var, Matrix<S>)]) -> Result<()> {
        if self.spent || self.nodes.is_empty() {
            return Err(Error::State("backward called without a recorded forward pass".into()));
        }
        let mut grads: Vec<Option<Matrix<S>>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            if g.shape() != self.nodes[v.0].value.shape() {
                return Err(Error::Shape(format!(
                    "seed gradient {:?} does not match value {:?}",
                    g.shape(),
                    self.nodes[v.0].value.shape()
                )));
            }
            add_grad(&mut grads[v.0], g.clone());
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Dense { x, w, b } => {
                    let xin = &self.nodes[x.0].value;
                    let wp = store.get(*w);
                    let (fan_in, fan_out) = (wp.shape[0], wp.shape[1]);
                    // dW = x^T g, db = column sums of g, dx = g W^T
                    let dw = Matrix::matmul(xin, true, &g, false)?;
                    let mut db = vec![0.0f64; fan_out];
                    for r in 0..g.rows() {
                        for (acc, v) in db.iter_mut().zip(g.row(r)) {
                            *acc += v.f64();
                        }
                    }
                    let mut dx = Matrix::zeros(g.rows(), fan_in);
                    gemm_slices(
                        (g.as_slice(), g.rows(), fan_out, false),
                        (&wp.value, fan_in, fan_out, true),
                        S::zero(),
                        dx.as_mut_slice(),
                        fan_in,
                    );
                    store.accumulate(*w, dw.into_vec().into_iter());
                    store.accumulate(*b, db.into_iter().map(S::of));
                    add_grad(&mut grads[x.0], dx);
                }
                Op::Silu(x) => {
                    let xin = &self.nodes[x.0].value;
                    let mut dx = g;
                    for (d, &v) in dx.as_mut_slice().iter_mut().zip(xin.as_slice()) {
                        let s = sigmoid(v);
                        *d *= s * (S::one() + v * (S::one() - s));
                    }
                    add_grad(&mut grads[x.0], dx);
                }
                Op::Concat(a, b) => {
                    let wa = self.nodes[a.0].value.cols();
                    let wb = self.nodes[b.0].value.cols();
                    add_grad(&mut grads[a.0], g.col_block(0, wa));
                    add_grad(&mut grads[b.0], g.col_block(wa, wb));
                }
                Op::Rows { x, idx } => {
                    let src = &self.nodes[x.0].value;
                    let mut dx = Matrix::zeros(src.rows(), src.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        for (d, &v) in dx.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    add_grad(&mut grads[x.0], dx);
                }
                Op::Gather { table, idx } => {
                    let w = g.cols();
                    let mut dt = vec![0.0f64; store.get(*table).len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for (d, v) in dt[i * w..(i + 1) * w].iter_mut().zip(g.row(r)) {
                            *d += v.f64();
                        }
                    }
                    store.accumulate(*table, dt.into_iter().map(S::of));
                }
            }
        }
        self.nodes.clear();
        self.spent = true;
        Ok(())
    }
}

fn add_grad<S: Scalar>(slot: &mut Option<Matrix<S>>, g: Matrix<S>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += *v;
            }
        }
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(store: &mut ParameterStore<f64>, name: &str, w: Vec<f64>, i: usize, o: usize, b: Vec<f64>) {
        store.insert(&format!("{name}.weight"), vec![i, o], w).unwrap();
        store.insert(&format!("{name}.bias"), vec![o], b).unwrap();
    }

    #[test]
    fn dense_identity_and_scalar() {
        let mut store = ParameterStore::new();
        layer(&mut store, "id", vec![1.0, 0.0, 0.0, 1.0], 2, 2, vec![0.0, 0.0]);
        layer(&mut store, "one", vec![3.0], 1, 1, vec![1.0]);
        let mut tape = Tape::new();
        let x = tape.input(Matrix::from_vec(1, 2, vec![4.0, -5.0]).unwrap());
        let y = tape.dense(&store, "id", x).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[4.0, -5.0]);
        let s = tape.input(Matrix::from_vec(1, 1, vec![2.0]).unwrap());
        let z = tape.dense(&store, "one", s).unwrap();
        assert_eq!(tape.value(z).as_slice(), &[7.0]);
        assert!(matches!(tape.dense(&store, "one", x), Err(Error::Shape(_))));
    }

    #[test]
    fn dense_matches_explicit_loops() {
        let mut store = ParameterStore::new();
        let w: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64 * 0.3 - 0.6).collect();
        let b = vec![0.1, -0.2, 0.3];
        layer(&mut store, "l", w.clone(), 4, 3, b.clone());
        let xs: Vec<f64> = (0..8).map(|i| (i as f64 * 1.3).cos()).collect();
        let mut tape = Tape::new();
        let x = tape.input(Matrix::from_vec(2, 4, xs.clone()).unwrap());
        let y = tape.dense(&store, "l", x).unwrap();
        for r in 0..2 {
            for o in 0..3 {
                let mut acc = b[o];
                for i in 0..4 {
                    acc += xs[r * 4 + i] * w[i * 3 + o];
                }
                assert!((tape.value(y)[(r, o)] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn least_squares_gradient_is_analytic() {
        // loss = 0.5 |x W - y|^2 with a single row x, so dL/dW = x^T (xW - y)
        let mut store = ParameterStore::new();
        layer(&mut store, "l", vec![0.5, -1.0, 2.0, 0.25], 2, 2, vec![0.0, 0.0]);
        let x = [1.5, -0.5];
        let target = [0.3, 0.7];
        let mut tape = Tape::new();
        let xv = tape.input(Matrix::from_vec(1, 2, x.to_vec()).unwrap());
        let out = tape.dense(&store, "l", xv).unwrap();
        let resid: Vec<f64> = tape
            .value(out)
            .as_slice()
            .iter()
            .zip(target)
            .map(|(a, b)| a - b)
            .collect();
        tape.backward(&mut store, &[(out, Matrix::from_vec(1, 2, resid.clone()).unwrap())])
            .unwrap();
        let g = &store.by_name("l.weight").unwrap().grad;
        for i in 0..2 {
            for o in 0..2 {
                assert!((g[i * 2 + o] - x[i] * resid[o]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn double_backward_is_state_error() {
        let mut store = ParameterStore::new();
        layer(&mut store, "l", vec![1.0], 1, 1, vec![0.0]);
        let mut tape = Tape::new();
        let x = tape.input(Matrix::from_vec(1, 1, vec![1.0]).unwrap());
        let y = tape.dense(&store, "l", x).unwrap();
        let seed = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        tape.backward(&mut store, &[(y, seed.clone())]).unwrap();
        assert!(matches!(tape.backward(&mut store, &[(y, seed)]), Err(Error::State(_))));
    }

    #[test]
    fn adam_zero_grad_and_first_step() {
        let mut store = ParameterStore::<f64>::new();
        let id = store.insert("p", vec![1], vec![1.0]).unwrap();
        store.accumulate(id, std::iter::once(0.0));
        store.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(store.get(id).value[0], 1.0);

        // First bias-corrected step is lr * g / (|g| + eps) ~ lr * sign(g).
        let mut store = ParameterStore::<f64>::new();
        let id = store.insert("p", vec![1], vec![1.0]).unwrap();
        store.accumulate(id, std::iter::once(-3.0));
        store.adam_step(&AdamConfig::default()).unwrap();
        let moved = store.get(id).value[0] - 1.0;
        let expect = 1e-3 * 3.0 / (3.0 + 1e-8);
        assert!((moved - expect).abs() < 1e-15);
        assert!(store.get(id).grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn adam_skips_frozen_and_rejects_nan() {
        let mut store = ParameterStore::<f32>::new();
        let a = store.insert("a", vec![2], vec![0.25, -0.5]).unwrap();
        let b = store.insert("b", vec![1], vec![2.0]).unwrap();
        store.set_frozen("a", true).unwrap();
        store.accumulate(a, [1.0, 1.0].into_iter());
        store.accumulate(b, std::iter::once(1.0));
        let before: Vec<u32> = store.get(a).value.iter().map(|v| v.to_bits()).collect();
        store.adam_step(&AdamConfig::default()).unwrap();
        let after: Vec<u32> = store.get(a).value.iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
        assert_ne!(store.get(b).value[0], 2.0);

        store.accumulate(b, std::iter::once(f32::NAN));
        let snapshot = store.get(b).value.clone();
        assert!(matches!(
            store.adam_step(&AdamConfig::default()),
            Err(Error::Numeric(_))
        ));
        assert_eq!(store.get(b).value, snapshot);
    }

    #[test]
    fn gather_and_rows_scatter_back() {
        let mut store = ParameterStore::<f64>::new();
        store
            .insert("emb", vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let mut tape = Tape::new();
        let e = tape.gather(&store, "emb", &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(e).as_slice(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let r = tape.rows(e, &[0, 2]);
        let seed = Matrix::from_vec(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        tape.backward(&mut store, &[(r, seed)]).unwrap();
        assert_eq!(store.by_name("emb").unwrap().grad, vec![0.0, 0.0, 0.0, 0.0, 2.0, 2.0]);
        let mut tape = Tape::new();
        assert!(matches!(tape.gather(&store, "emb", &[3]), Err(Error::Lookup(_))));
    }
}
