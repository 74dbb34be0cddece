//! Shared-trunk multi-task score network and the label-guided baseline.
//!
//! Both networks output the score directly; the implied noise estimate is
//! `-std(t) * score`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterStore, Tape, Var};
use crate::diffusion::Process;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{normal_vec, stream, Stage, StreamRng};
use crate::scalar::Scalar;

/// Layer sizes of a denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub width: usize,
    pub trunk_layers: usize,
    pub head_layers: usize,
    pub time_frequencies: usize,
    pub label_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            width: 128,
            trunk_layers: 3,
            head_layers: 2,
            time_frequencies: 32,
            label_dim: 16,
        }
    }
}

impl Architecture {
    fn check(&self) -> Result<()> {
        if self.width == 0 || self.trunk_layers == 0 || self.head_layers == 0 || self.time_frequencies == 0 {
            return Err(Error::Domain(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }

    fn dense(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }

    fn trunk_count(&self, input: usize) -> usize {
        Self::dense(input, self.width) + (self.trunk_layers - 1) * Self::dense(self.width, self.width)
    }

    fn head_count(&self, dim: usize) -> usize {
        (self.head_layers - 1) * Self::dense(self.width, self.width) + Self::dense(self.width, dim)
    }

    /// Trainable parameters of a branched model with `tasks` heads.
    pub fn branched_params(&self, dim: usize, tasks: usize) -> usize {
        self.trunk_count(dim + 2 * self.time_frequencies) + tasks * self.head_count(dim)
    }

    /// Trainable parameters of a label-guided model over `classes` labels.
    pub fn label_guided_params(&self, dim: usize, classes: usize) -> usize {
        self.trunk_count(dim + 2 * self.time_frequencies + self.label_dim)
            + self.head_count(dim)
            + classes * self.label_dim
    }

    /// Copy of `self` with the width chosen so the label-guided model's size
    /// is as close as possible to a branched model with `2 * classes - 1`
    /// heads.
    pub fn label_guided_parity(&self, dim: usize, classes: usize) -> Self {
        let target = self.branched_params(dim, 2 * classes.max(1) - 1) as f64;
        let mut best = *self;
        let mut best_gap = f64::INFINITY;
        for width in 1..=8 * self.width.max(1) {
            let a = Self { width, ..*self };
            let gap = (a.label_guided_params(dim, classes) as f64 - target).abs();
            if gap < best_gap {
                best_gap = gap;
                best = a;
            }
        }
        best
    }
}

/// Fixed random Fourier features of diffusion time.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeEmbedding<S> {
    z: Vec<S>,
    horizon: f64,
}

impl<S: Scalar> TimeEmbedding<S> {
    pub fn new(frequencies: usize, horizon: f64, rng: &mut StreamRng) -> Self {
        Self {
            z: normal_vec(rng, frequencies),
            horizon,
        }
    }

    pub fn from_parts(z: Vec<S>, horizon: f64) -> Result<Self> {
        if z.is_empty() || !(horizon > 0.0) {
            return Err(Error::Domain(
                "time embedding needs frequencies and a positive horizon".into(),
            ));
        }
        Ok(Self { z, horizon })
    }

    pub fn z(&self) -> &[S] {
        &self.z
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        2 * self.z.len()
    }

    /// `[sin(2 pi (t/T) z), cos(2 pi (t/T) z)]`.
    pub fn embed(&self, t: f64) -> Vec<S> {
        let mut out = vec![S::zero(); self.dim()];
        self.embed_into(t, &mut out);
        out
    }

    fn embed_into(&self, t: f64, out: &mut [S]) {
        let k = self.z.len();
        let phase = 2.0 * std::f64::consts::PI * t / self.horizon;
        for (i, z) in self.z.iter().enumerate() {
            let a = phase * z.f64();
            out[i] = S::of(a.sin());
            out[k + i] = S::of(a.cos());
        }
    }

    pub fn embed_batch(&self, t: &[f64]) -> Matrix<S> {
        let mut m = Matrix::zeros(t.len(), self.dim());
        for (i, &ti) in t.iter().enumerate() {
            self.embed_into(ti, m.row_mut(i));
        }
        m
    }
}

fn init_dense<S: Scalar>(
    store: &mut ParameterStore<S>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut StreamRng,
) -> Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = (0..fan_in * fan_out)
        .map(|_| S::of(rng.random_range(-bound..bound)))
        .collect();
    store.insert(&format!("{name}.weight"), vec![fan_in, fan_out], w)?;
    store.insert(&format!("{name}.bias"), vec![fan_out], vec![S::zero(); fan_out])?;
    Ok(())
}

fn trunk_shapes(arch: &Architecture, input: usize) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut fan_in = input;
    for l in 0..arch.trunk_layers {
        out.push((format!("trunk.{l}.weight"), vec![fan_in, arch.width]));
        out.push((format!("trunk.{l}.bias"), vec![arch.width]));
        fan_in = arch.width;
    }
    out
}

fn head_shapes(arch: &Architecture, task: usize, dim: usize) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for l in 0..arch.head_layers {
        let fan_out = if l + 1 == arch.head_layers { dim } else { arch.width };
        out.push((format!("head.{task}.{l}.weight"), vec![arch.width, fan_out]));
        out.push((format!("head.{task}.{l}.bias"), vec![fan_out]));
    }
    out
}

fn check_store<S: Scalar>(
    expected: &[(String, Vec<usize>)],
    store: &ParameterStore<S>,
    time: &TimeEmbedding<S>,
    arch: &Architecture,
) -> Result<()> {
    if store.len() != expected.len() || time.z.len() != arch.time_frequencies {
        return Err(Error::Shape("parameter set does not match the architecture".into()));
    }
    for (name, shape) in expected {
        let p = store.by_name(name)?;
        if &p.shape != shape {
            return Err(Error::Shape(format!("{name}: shape {:?}, expected {shape:?}", p.shape)));
        }
    }
    Ok(())
}

fn head_prefix(task: usize) -> String {
    format!("head.{task}.")
}

/// Rows of a batch routed to one output head, with the head's output.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub rows: Vec<usize>,
    pub out: Var,
}

/// Common interface of the two noise-prediction networks.
pub trait Denoiser<S: Scalar> {
    fn process(&self) -> &Process<S>;
    fn dim(&self) -> usize;
    fn store(&self) -> &ParameterStore<S>;
    fn store_mut(&mut self) -> &mut ParameterStore<S>;

    /// Number of distinct conditioning values (tasks or labels).
    fn conditions(&self) -> usize;

    /// Records a forward pass. `cond[i]` is the task index (branched) or
    /// class index (label-guided) of row `i`.
    fn forward_tape(&self, tape: &mut Tape<S>, x: &Matrix<S>, t: &[f64], cond: &[usize]) -> Result<Vec<HeadOutput>>;

    /// Score estimate for every row.
    fn score(&self, x: &Matrix<S>, t: &[f64], cond: &[usize]) -> Result<Matrix<S>> {
        let mut tape = Tape::new();
        let groups = self.forward_tape(&mut tape, x, t, cond)?;
        let mut out = Matrix::zeros(x.rows(), self.dim());
        for g in groups {
            let v = tape.value(g.out);
            for (r, &i) in g.rows.iter().enumerate() {
                out.row_mut(i).copy_from_slice(v.row(r));
            }
        }
        Ok(out)
    }

    /// Implied noise estimate `-std(t) * score` for every row.
    fn predict_noise(&self, x: &Matrix<S>, t: &[f64], cond: &[usize]) -> Result<Matrix<S>> {
        let mut out = self.score(x, t, cond)?;
        for (i, &ti) in t.iter().enumerate() {
            let (_, std) = self.process().marginal(ti)?;
            for v in out.row_mut(i) {
                *v = -*v * std;
            }
        }
        Ok(out)
    }
}

fn check_batch<S: Scalar>(dim: usize, horizon: f64, x: &Matrix<S>, t: &[f64], cond: &[usize]) -> Result<()> {
    if x.cols() != dim {
        return Err(Error::Shape(format!("expected {dim} features, got {}", x.cols())));
    }
    if t.len() != x.rows() || cond.len() != x.rows() {
        return Err(Error::Shape(format!(
            "batch of {} rows has {} times and {} conditions",
            x.rows(),
            t.len(),
            cond.len()
        )));
    }
    if let Some(bad) = t.iter().find(|&&ti| !(0.0..=horizon).contains(&ti)) {
        return Err(Error::Domain(format!("time {bad} outside [0, {horizon}]")));
    }
    Ok(())
}

fn trunk<S: Scalar>(store: &ParameterStore<S>, layers: usize, tape: &mut Tape<S>, mut h: Var) -> Result<Var> {
    for l in 0..layers {
        h = tape.dense(store, &format!("trunk.{l}"), h)?;
        h = tape.silu(h);
    }
    Ok(h)
}

fn head<S: Scalar>(
    store: &ParameterStore<S>,
    task: usize,
    layers: usize,
    tape: &mut Tape<S>,
    mut h: Var,
) -> Result<Var> {
    for l in 0..layers {
        h = tape.dense(store, &format!("head.{task}.{l}"), h)?;
        if l + 1 < layers {
            h = tape.silu(h);
        }
    }
    Ok(h)
}

/// Shared trunk with one output head per branch.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiTaskDenoiser<S> {
    arch: Architecture,
    dim: usize,
    tasks: usize,
    process: Process<S>,
    time: TimeEmbedding<S>,
    store: ParameterStore<S>,
}

impl<S: Scalar> MultiTaskDenoiser<S> {
    pub fn new(arch: Architecture, dim: usize, tasks: usize, process: Process<S>, seed: u64) -> Result<Self> {
        arch.check()?;
        if dim == 0 || tasks == 0 {
            return Err(Error::Domain("denoiser needs at least one feature and one task".into()));
        }
        let time = TimeEmbedding::new(
            arch.time_frequencies,
            process.horizon(),
            &mut stream(seed, Stage::Init, &[0]),
        );
        let mut rng = stream(seed, Stage::Init, &[1]);
        let mut store = ParameterStore::new();
        let mut fan_in = dim + time.dim();
        for l in 0..arch.trunk_layers {
            init_dense(&mut store, &format!("trunk.{l}"), fan_in, arch.width, &mut rng)?;
            fan_in = arch.width;
        }
        let mut model = Self {
            arch,
            dim,
            tasks: 0,
            process,
            time,
            store,
        };
        for _ in 0..tasks {
            model.init_head(&mut rng)?;
        }
        Ok(model)
    }

    /// Reassembles a model from stored parts; used by checkpoint loading.
    pub fn from_parts(
        arch: Architecture,
        dim: usize,
        tasks: usize,
        process: Process<S>,
        time: TimeEmbedding<S>,
        store: ParameterStore<S>,
    ) -> Result<Self> {
        arch.check()?;
        let mut shapes = trunk_shapes(&arch, dim + 2 * arch.time_frequencies);
        for task in 0..tasks {
            shapes.extend(head_shapes(&arch, task, dim));
        }
        check_store(&shapes, &store, &time, &arch)?;
        Ok(Self {
            arch,
            dim,
            tasks,
            process,
            time,
            store,
        })
    }

    fn init_head(&mut self, rng: &mut StreamRng) -> Result<usize> {
        let task = self.tasks;
        for l in 0..self.arch.head_layers {
            let fan_out = if l + 1 == self.arch.head_layers {
                self.dim
            } else {
                self.arch.width
            };
            init_dense(
                &mut self.store,
                &format!("head.{task}.{l}"),
                self.arch.width,
                fan_out,
                rng,
            )?;
        }
        self.tasks += 1;
        Ok(task)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn time_embedding(&self) -> &TimeEmbedding<S> {
        &self.time
    }

    /// Parameter names of head `task`.
    pub fn head_params(&self, task: usize) -> Vec<String> {
        let prefix = head_prefix(task);
        self.store
            .iter()
            .filter(|p| p.name.starts_with(&prefix))
            .map(|p| p.name.clone())
            .collect()
    }

    /// Overwrites head `dst` with a copy of head `src`.
    pub fn clone_head(&mut self, src: usize, dst: usize) -> Result<()> {
        for t in [src, dst] {
            if t >= self.tasks {
                return Err(Error::Lookup(format!("no task {t} (model has {})", self.tasks)));
            }
        }
        for l in 0..self.arch.head_layers {
            for kind in ["weight", "bias"] {
                self.store
                    .copy_values(&format!("head.{src}.{l}.{kind}"), &format!("head.{dst}.{l}.{kind}"))?;
            }
        }
        Ok(())
    }

    /// Appends a new head initialized as a copy of `src`; returns its index.
    pub fn add_head(&mut self, src: usize) -> Result<usize> {
        if src >= self.tasks {
            return Err(Error::Lookup(format!("no task {src} (model has {})", self.tasks)));
        }
        let task = self.init_head(&mut stream(0, Stage::Extend, &[self.tasks as u64]))?;
        self.clone_head(src, task)?;
        Ok(task)
    }

    /// Score estimate for one object under head `task`.
    pub fn forward_branched(&self, x: &[S], t: f64, task: usize) -> Result<Vec<S>> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.score(&m, &[t], &[task])?.into_vec())
    }
}

impl<S: Scalar> Denoiser<S> for MultiTaskDenoiser<S> {
    fn process(&self) -> &Process<S> {
        &self.process
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn store(&self) -> &ParameterStore<S> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParameterStore<S> {
        &mut self.store
    }

    fn conditions(&self) -> usize {
        self.tasks
    }

    fn forward_tape(&self, tape: &mut Tape<S>, x: &Matrix<S>, t: &[f64], cond: &[usize]) -> Result<Vec<HeadOutput>> {
        check_batch(self.dim, self.time.horizon, x, t, cond)?;
        if let Some(&bad) = cond.iter().find(|&&c| c >= self.tasks) {
            return Err(Error::Lookup(format!("no task {bad} (model has {})", self.tasks)));
        }
        let input = tape.input(x.hcat(&self.time.embed_batch(t))?);
        let h = trunk(&self.store, self.arch.trunk_layers, tape, input)?;
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); self.tasks];
        for (i, &c) in cond.iter().enumerate() {
            groups[c].push(i);
        }
        let mut outs = Vec::new();
        for (task, rows) in groups.into_iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let hv = if rows.len() == x.rows() { h } else { tape.rows(h, &rows) };
            let out = head(&self.store, task, self.arch.head_layers, tape, hv)?;
            outs.push(HeadOutput { rows, out });
        }
        Ok(outs)
    }
}

/// Single-head network conditioned on a learned class embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelGuidedDenoiser<S> {
    arch: Architecture,
    dim: usize,
    classes: usize,
    process: Process<S>,
    time: TimeEmbedding<S>,
    store: ParameterStore<S>,
}

pub const LABEL_TABLE: &str = "label.embedding";

impl<S: Scalar> LabelGuidedDenoiser<S> {
    pub fn new(arch: Architecture, dim: usize, classes: usize, process: Process<S>, seed: u64) -> Result<Self> {
        arch.check()?;
        if dim == 0 || classes == 0 || arch.label_dim == 0 {
            return Err(Error::Domain(
                "label-guided denoiser needs features, classes and an embedding".into(),
            ));
        }
        let time = TimeEmbedding::new(
            arch.time_frequencies,
            process.horizon(),
            &mut stream(seed, Stage::Init, &[0]),
        );
        let mut rng = stream(seed, Stage::Init, &[2]);
        let mut store = ParameterStore::new();
        let mut fan_in = dim + time.dim() + arch.label_dim;
        for l in 0..arch.trunk_layers {
            init_dense(&mut store, &format!("trunk.{l}"), fan_in, arch.width, &mut rng)?;
            fan_in = arch.width;
        }
        for l in 0..arch.head_layers {
            let fan_out = if l + 1 == arch.head_layers { dim } else { arch.width };
            init_dense(&mut store, &format!("head.0.{l}"), arch.width, fan_out, &mut rng)?;
        }
        store.insert(
            LABEL_TABLE,
            vec![classes, arch.label_dim],
            vec![S::zero(); classes * arch.label_dim],
        )?;
        Ok(Self {
            arch,
            dim,
            classes,
            process,
            time,
            store,
        })
    }

    /// Builds a baseline whose width matches the size of a branched model
    /// with architecture `branched` over the same classes.
    pub fn with_parity(
        branched: Architecture,
        dim: usize,
        classes: usize,
        process: Process<S>,
        seed: u64,
    ) -> Result<Self> {
        Self::new(branched.label_guided_parity(dim, classes), dim, classes, process, seed)
    }

    pub fn from_parts(
        arch: Architecture,
        dim: usize,
        classes: usize,
        process: Process<S>,
        time: TimeEmbedding<S>,
        store: ParameterStore<S>,
    ) -> Result<Self> {
        arch.check()?;
        let mut shapes = trunk_shapes(&arch, dim + 2 * arch.time_frequencies + arch.label_dim);
        shapes.extend(head_shapes(&arch, 0, dim));
        shapes.push((LABEL_TABLE.to_string(), vec![classes, arch.label_dim]));
        check_store(&shapes, &store, &time, &arch)?;
        Ok(Self {
            arch,
            dim,
            classes,
            process,
            time,
            store,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn time_embedding(&self) -> &TimeEmbedding<S> {
        &self.time
    }

    /// Score estimate for one object conditioned on class index `label`.
    pub fn forward_label_guided(&self, x: &[S], t: f64, label: usize) -> Result<Vec<S>> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.score(&m, &[t], &[label])?.into_vec())
    }
}

impl<S: Scalar> Denoiser<S> for LabelGuidedDenoiser<S> {
    fn process(&self) -> &Process<S> {
        &self.process
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn store(&self) -> &ParameterStore<S> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParameterStore<S> {
        &mut self.store
    }

    fn conditions(&self) -> usize {
        self.classes
    }

    fn forward_tape(&self, tape: &mut Tape<S>, x: &Matrix<S>, t: &[f64], cond: &[usize]) -> Result<Vec<HeadOutput>> {
        check_batch(self.dim, self.time.horizon, x, t, cond)?;
        let input = tape.input(x.hcat(&self.time.embed_batch(t))?);
        let labels = tape.gather(&self.store, LABEL_TABLE, cond)?;
        let input = tape.concat(input, labels)?;
        let h = trunk(&self.store, self.arch.trunk_layers, tape, input)?;
        let out = head(&self.store, 0, self.arch.head_layers, tape, h)?;
        Ok(vec![HeadOutput {
            rows: (0..x.rows()).collect(),
            out,
        }])
    }
}
