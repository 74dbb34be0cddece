//! Reverse diffusion: predictor-corrector sampling for the continuous process,
//! ancestral sampling for the discrete one, plus transmutation, hybrids and
//! cached multi-class generation.
//!
//! A run of `steps` steps covers `[0, T]` on a uniform grid. In continuous
//! time step `k` integrates from `T (N - k) / N` down to `T (N - k - 1) / N`
//! and uses the branch covering the lower end, so every branch owns the
//! steps that end inside it. In discrete time step `k` is the transition out
//! of integer time `T - k`, using the branch covering that time.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, LabelGuidedDenoiser, MultiTaskDenoiser};
use crate::diffusion::{perturb, Process};
use crate::error::{Error, Result};
use crate::hierarchy::BranchHierarchy;
use crate::matrix::Matrix;
use crate::rng::{stream, NoiseSource, Stage};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    /// Grid size for the continuous process; discrete sampling always uses
    /// one step per integer time.
    pub steps: usize,
    pub snr: f64,
    pub seed: u64,
    /// Chains per batch; each batch has its own random stream.
    pub batch_size: usize,
    pub corrector: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            snr: 0.16,
            seed: 0,
            batch_size: 1000,
            corrector: true,
        }
    }
}

impl SampleConfig {
    fn check(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || !(self.snr > 0.0) {
            return Err(Error::Domain("steps and batch size must be positive, snr > 0".into()));
        }
        Ok(())
    }
}

/// Generated objects with their labels and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch<S> {
    pub data: Matrix<S>,
    pub classes: Vec<String>,
    /// Diffusion time the states belong to (0 for finished samples).
    pub t: f64,
    pub seed: u64,
}

impl<S: Scalar> SampleBatch<S> {
    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.rows() == 0
    }

    /// Concatenates batches row-wise; all must share `t` and `seed`.
    pub fn concat(parts: Vec<Self>) -> Result<Self> {
        let mut iter = parts.into_iter();
        let mut out = iter
            .next()
            .ok_or_else(|| Error::Data("nothing to concatenate".into()))?;
        for p in iter {
            if p.data.cols() != out.data.cols() {
                return Err(Error::Shape("batches differ in width".into()));
            }
            let rows = out.data.rows() + p.data.rows();
            let mut v = out.data.into_vec();
            v.extend_from_slice(p.data.as_slice());
            out.data = Matrix::from_vec(rows, p.data.cols(), v)?;
            out.classes.extend(p.classes);
        }
        Ok(out)
    }

    /// CSV with columns `feature_0..feature_{d-1},class,t,seed`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for j in 0..self.data.cols() {
            let _ = write!(out, "feature_{j},");
        }
        out.push_str("class,t,seed\n");
        for i in 0..self.data.rows() {
            for v in self.data.row(i) {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(out, "{},{},{}", self.classes[i], self.t, self.seed);
        }
        out
    }
}

/// Step grid of a process.
#[derive(Clone, Copy, Debug)]
struct Grid {
    steps: usize,
    horizon: f64,
    discrete: bool,
}

impl Grid {
    fn new<S: Scalar>(process: &Process<S>, cfg: &SampleConfig) -> Self {
        match process {
            Process::Continuous(_) => Self {
                steps: cfg.steps,
                horizon: process.horizon(),
                discrete: false,
            },
            Process::Discrete(d) => Self {
                steps: d.steps(),
                horizon: process.horizon(),
                discrete: true,
            },
        }
    }

    /// Time at the start (upper end) of step `k`.
    fn time(&self, k: usize) -> f64 {
        if self.discrete {
            self.horizon - k as f64
        } else {
            self.horizon * (self.steps - k) as f64 / self.steps as f64
        }
    }

    /// Time used to choose the branch of step `k`.
    fn lookup_time(&self, k: usize) -> f64 {
        if self.discrete {
            self.time(k)
        } else {
            self.time(k + 1)
        }
    }

    /// Number of steps whose upper end lies at or above `t`: a reverse run
    /// of that many steps stops at the smallest grid time `>= t`.
    fn steps_above(&self, t: f64) -> usize {
        (0..=self.steps)
            .take_while(|&k| self.time(k) >= t)
            .count()
            .saturating_sub(1)
    }

    /// First step whose upper end lies at or below `t`.
    fn first_step_at_or_below(&self, t: f64) -> usize {
        (0..=self.steps).find(|&k| self.time(k) <= t).unwrap_or(self.steps)
    }
}

/// Task of every step along class `c`'s path.
fn step_tasks(h: &BranchHierarchy, c: &str, grid: &Grid) -> Result<Vec<usize>> {
    (0..grid.steps).map(|k| h.lookup(c, grid.lookup_time(k))).collect()
}

fn check_finite<S: Scalar>(x: &Matrix<S>, t: f64, cond: usize) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite state at t = {t} (task {cond})")))
    }
}

fn vp_beta<S: Scalar>(process: &Process<S>, t: f64) -> Result<f64> {
    match process {
        Process::Continuous(sde) => Ok(sde.beta(S::of(t)).f64()),
        Process::Discrete(_) => Err(Error::Domain(
            "predictor-corrector steps need the continuous process".into(),
        )),
    }
}

/// One reverse-SDE Euler-Maruyama predictor step from `t` to `t - dt` with
/// head `cond`, then one Langevin corrector step. Both use the score at `t`.
/// With `last` set no noise is injected.
#[allow(clippy::too_many_arguments)]
pub fn pc_step<S: Scalar>(
    model: &dyn Denoiser<S>,
    cond: usize,
    x: &mut Matrix<S>,
    t: f64,
    dt: f64,
    cfg: &SampleConfig,
    rng: &mut dyn NoiseSource<S>,
    last: bool,
) -> Result<()> {
    if !(dt >= 0.0 && t - dt >= -1e-12) {
        return Err(Error::Domain(format!("invalid step from {t} by {dt}")));
    }
    let n = x.rows();
    if n == 0 {
        return Ok(());
    }
    let beta = vp_beta(model.process(), t)?;
    let ts = vec![t; n];
    let conds = vec![cond; n];
    let noise_scale = if last { 0.0 } else { 1.0 };

    let s = model.score(x, &ts, &conds)?;
    let mut z = Matrix::zeros(n, x.cols());
    rng.fill_normal(z.as_mut_slice());
    let diffusion = (beta * dt).sqrt() * noise_scale;
    for ((xv, &sv), &zv) in x.as_mut_slice().iter_mut().zip(s.as_slice()).zip(z.as_slice()) {
        let xf = xv.f64();
        *xv = S::of(xf + (0.5 * beta * xf + beta * sv.f64()) * dt + diffusion * zv.f64());
    }
    check_finite(x, t, cond)?;

    if cfg.corrector {
        let s = model.score(x, &ts, &conds)?;
        rng.fill_normal(z.as_mut_slice());
        let norm = |m: &Matrix<S>, i: usize| m.row(i).iter().map(|a| a.f64() * a.f64()).sum::<f64>().sqrt();
        let sn = (0..n).map(|i| norm(&s, i)).sum::<f64>() / n as f64;
        let zn = (0..n).map(|i| norm(&z, i)).sum::<f64>() / n as f64;
        let step = if sn > 0.0 {
            2.0 * (cfg.snr * zn / sn).powi(2)
        } else {
            0.0
        };
        let amp = (2.0 * step).sqrt() * noise_scale;
        for ((xv, &sv), &zv) in x.as_mut_slice().iter_mut().zip(s.as_slice()).zip(z.as_slice()) {
            *xv = S::of(xv.f64() + step * sv.f64() + amp * zv.f64());
        }
        check_finite(x, t, cond)?;
    }
    Ok(())
}

/// One ancestral step out of integer time `t >= 1`.
fn ancestral_step<S: Scalar>(
    model: &dyn Denoiser<S>,
    cond: usize,
    x: &mut Matrix<S>,
    t: usize,
    rng: &mut dyn NoiseSource<S>,
) -> Result<()> {
    let Process::Discrete(d) = model.process() else {
        return Err(Error::Domain("ancestral steps need the discrete process".into()));
    };
    let (beta, alpha, bar) = d.schedule(t)?;
    let (beta, alpha, bar) = (beta.f64(), alpha.f64(), bar.f64());
    let n = x.rows();
    if n == 0 {
        return Ok(());
    }
    let eps = model.predict_noise(x, &vec![t as f64; n], &vec![cond; n])?;
    let mut z = Matrix::zeros(n, x.cols());
    rng.fill_normal(z.as_mut_slice());
    let sigma = if t > 1 { beta.sqrt() } else { 0.0 };
    let c = beta / (1.0 - bar).sqrt();
    for ((xv, &e), &zv) in x.as_mut_slice().iter_mut().zip(eps.as_slice()).zip(z.as_slice()) {
        *xv = S::of((xv.f64() - c * e.f64()) / alpha.sqrt() + sigma * zv.f64());
    }
    check_finite(x, t as f64, cond)
}

/// Runs steps `range` of the grid, choosing the head of each step with
/// `cond_of(k)`. Returns the number of steps taken.
fn run<S: Scalar>(
    model: &dyn Denoiser<S>,
    x: &mut Matrix<S>,
    grid: &Grid,
    range: std::ops::Range<usize>,
    cond_of: &dyn Fn(usize) -> usize,
    cfg: &SampleConfig,
    rng: &mut dyn NoiseSource<S>,
) -> Result<usize> {
    let dt = grid.horizon / grid.steps as f64;
    let count = range.len();
    for k in range {
        let cond = cond_of(k);
        if grid.discrete {
            ancestral_step(model, cond, x, grid.time(k).round() as usize, rng)?;
        } else {
            pc_step(model, cond, x, grid.time(k), dt, cfg, rng, k + 1 == grid.steps)?;
        }
    }
    Ok(count)
}

/// Standard normal starting states.
pub fn prior<S: Scalar>(n: usize, dim: usize, rng: &mut dyn NoiseSource<S>) -> Matrix<S> {
    let mut x = Matrix::zeros(n, dim);
    rng.fill_normal(x.as_mut_slice());
    x
}

fn batch_sizes(n: usize, cfg: &SampleConfig) -> Vec<usize> {
    let mut out = vec![cfg.batch_size; n / cfg.batch_size];
    if n % cfg.batch_size > 0 {
        out.push(n % cfg.batch_size);
    }
    out
}

/// Random stream of batch `batch` of class index `class` in [`sample_class`].
pub fn class_stream(seed: u64, class: usize, batch: usize) -> crate::rng::StreamRng {
    stream(seed, Stage::Sample, &[class as u64, batch as u64])
}

fn check_model<S: Scalar>(model: &MultiTaskDenoiser<S>, h: &BranchHierarchy) -> Result<()> {
    if model.tasks() != h.task_count() {
        return Err(Error::Shape(format!(
            "model has {} heads, hierarchy {} branches",
            model.tasks(),
            h.task_count()
        )));
    }
    if (model.process().horizon() - h.horizon()).abs() > 1e-9 {
        return Err(Error::Domain("hierarchy and process horizons differ".into()));
    }
    Ok(())
}

/// Shared driver: for each batch, draws the prior from the batch stream and
/// runs `range` along class `c`'s path.
fn sample_path<S: Scalar>(
    model: &MultiTaskDenoiser<S>,
    h: &BranchHierarchy,
    c: &str,
    n: usize,
    cfg: &SampleConfig,
    steps: impl Fn(&Grid) -> std::ops::Range<usize>,
) -> Result<Matrix<S>> {
    cfg.check()?;
    check_model(model, h)?;
    let ci = h.class_index(c)?;
    let grid = Grid::new(model.process(), cfg);
    let tasks = step_tasks(h, c, &grid)?;
    let mut parts = Vec::new();
    for (b, size) in batch_sizes(n, cfg).into_iter().enumerate() {
        let mut rng = class_stream(cfg.seed, ci, b);
        let mut x = prior(size, model.dim(), &mut rng);
        run(model, &mut x, &grid, steps(&grid), &|k| tasks[k], cfg, &mut rng)?;
        parts.extend(x.into_vec());
    }
    Matrix::from_vec(n, model.dim(), parts)
}

/// Draws `n` objects of class `c`, switching heads along its branch path.
pub fn sample_class<S: Scalar>(
    model: &MultiTaskDenoiser<S>,
    h: &BranchHierarchy,
    c: &str,
    n: usize,
    cfg: &SampleConfig,
) -> Result<SampleBatch<S>> {
    let data = sample_path(model, h, c, n, cfg, |g| 0..g.steps)?;
    Ok(SampleBatch {
        data,
        classes: vec![c.to_string(); n],
        t: 0.0,
        seed: cfg.seed,
    })
}

/// Discrete-process counterpart of [`sample_class`].
pub fn ddpm_sample_class<S: Scalar>(
    model: &MultiTaskDenoiser<S>,
    h: &BranchHierarchy,
    c: &str,
    n: usize,
    cfg: &SampleConfig,
) -> Result<SampleBatch<S>> {
    if !model.process().is_discrete() {
        return Err(Error::Domain("model uses the continuous process".into()));
    }
    sample_class(model, h, c, n, cfg)
}

/// Intermediate states shared by `c1` and `c2`: the reverse process run from
/// `T` to their branch point, stopping at the smallest grid time at or above
/// it. Uses the same random streams as [`sample_class`] for `c1`.
pub fn hybrid<S: Scalar>(
    model: &MultiTaskDenoiser<S>,
    h: &BranchHierarchy,
    c1: &str,
    c2: &str,
    n: usize,
    cfg: &SampleConfig,
) -> Result<SampleBatch<S>> {
    let tb = h.lca_branch_point(c1, c2)?;
    let data = sample_path(model, h, c1, n, cfg, |g| 0..g.steps_above(tb))?;
    Ok(SampleBatch {
        data,
        classes: vec![format!("{c1}|{c2}"); n],
        t: tb,
        seed: cfg.seed,
    })
}

/// Runs `x` from `T` down to the branch point of `c1` and `c2` with the
/// given stream, as [`hybrid`] does per batch. Returns the grid step to
/// resume from with [`continue_from`].
pub fn hybrid_from<S: Scalar>(
    model: &MultiTaskDenoiser<S>,
    h: &BranchHierarchy,
    c1: &str,
    c2: &str,
    x: &mut Matrix<S>,
    cfg: &SampleConfig,
    rng: &mut dyn NoiseSource<S>,
) -> Result<usize> {
    cfg.check()?;
    check_model(model, h)?;
    let tb = h.lca_branch_point(c1, c2)?;
    let grid = Grid::new(model.process(), cfg);
    let tasks = step_tasks(h, c1, &grid)?;
    let stop = grid.steps_above(tb);
    run(model, x, &grid, 0..stop, &|k| tasks[k], cfg, rng)?;
    Ok(stop)
}

/// Continues states of `c`'s path from grid step `start` to time 0 with the
/// given stream; used to finish hybrids.
pub fn continue_from<S: Scalar>(
    model: &MultiTaskDenoiser<S>,
    h: &BranchHierarchy,
    c: &str,
    x: &mut Matrix<S>,
    start: usize,
    cfg: &SampleConfig,
    rng: &mut dyn NoiseSource<S>,
) -> Result<usize> {
    check_model(model, h)?;
    let grid = Grid::new(model.process(), cfg);
    let tasks = step_tasks(h, c, &grid)?;
    run(
        model,
        x,
        &grid,
        start.min(grid.steps)..grid.steps,
        &|k| tasks[k],
        cfg,
        rng,
    )
}

/// Grid step at which a hybrid for branch point `tb` stops.
pub fn hybrid_stop_step<S: Scalar>(process: &Process<S>, tb: f64, cfg: &SampleConfig) -> usize {
    Grid::new(process, cfg).steps_above(tb)
}

/// Maps objects of `c1` onto `c2`: each row is forward diffused to the
/// classes' branch point and reverse diffused along `c2`'s path.
pub fn transmute<S: Scalar>(
    model: &MultiTaskDenoiser<S>,
    h: &BranchHierarchy,
    x1: &Matrix<S>,
    c1: &str,
    c2: &str,
    cfg: &SampleConfig,
) -> Result<SampleBatch<S>> {
    cfg.check()?;
    check_model(model, h)?;
    if x1.cols() != model.dim() {
        return Err(Error::Shape(format!(
            "expected {} features, got {}",
            model.dim(),
            x1.cols()
        )));
    }
    let tb = h.lca_branch_point(c1, c2)?;
    let ci = h.class_index(c2)?;
    let grid = Grid::new(model.process(), cfg);
    let tasks = step_tasks(h, c2, &grid)?;
    let start = grid.first_step_at_or_below(tb);
    let mut parts = Vec::with_capacity(x1.rows() * x1.cols());
    let mut row = 0;
    for (b, size) in batch_sizes(x1.rows(), cfg).into_iter().enumerate() {
        let mut rng = stream(cfg.seed, Stage::Transmute, &[ci as u64, b as u64]);
        let mut x = Matrix::zeros(size, x1.cols());
        for r in 0..size {
            let p = perturb(model.process(), x1.row(row + r), tb, &mut rng)?;
            x.row_mut(r).copy_from_slice(&p.x_t);
        }
        row += size;
        run(model, &mut x, &grid, start..grid.steps, &|k| tasks[k], cfg, &mut rng)?;
        parts.extend(x.into_vec());
    }
    Ok(SampleBatch {
        data: Matrix::from_vec(x1.rows(), x1.cols(), parts)?,
        classes: vec![c2.to_string(); x1.rows()],
        t: 0.0,
        seed: cfg.seed,
    })
}

/// Output of [`sample_all_cached`].
#[derive(Clone, Debug)]
pub struct CachedSamples<S> {
    pub batches: BTreeMap<String, SampleBatch<S>>,
    /// Batch steps taken per branch (task index -> steps).
    pub branch_steps: BTreeMap<usize, usize>,
    /// States at each branch's lower boundary, keyed by task.
    pub cache: BTreeMap<usize, Matrix<S>>,
}

impl<S> CachedSamples<S> {
    pub fn total_steps(&self) -> usize {
        self.branch_steps.values().sum()
    }
}

/// Generates `n` objects of every class, integrating each branch once and
/// seeding each child with its parent's end state.
pub fn sample_all_cached<S: Scalar>(
    model: &MultiTaskDenoiser<S>,
    h: &BranchHierarchy,
    n: usize,
    cfg: &SampleConfig,
) -> Result<CachedSamples<S>> {
    cfg.check()?;
    check_model(model, h)?;
    let grid = Grid::new(model.process(), cfg);
    let mut order: Vec<_> = h.branches().iter().collect();
    order.sort_by(|a, b| {
        b.start
            .total_cmp(&a.start)
            .then(b.end.total_cmp(&a.end))
            .then(b.classes.len().cmp(&a.classes.len()))
    });
    let owns = |task: usize, k: usize| -> Result<bool> {
        let b = h.branch(task)?;
        let t = grid.lookup_time(k);
        Ok((b.start <= t && t < b.end)
            || (t >= h.horizon() && b.end >= h.horizon() && b.classes.len() == h.classes().len()))
    };
    let sizes = batch_sizes(n, cfg);
    let mut cache: BTreeMap<usize, Matrix<S>> = BTreeMap::new();
    let mut branch_steps = BTreeMap::new();
    for b in order {
        let task = b.task_index;
        let mut steps = Vec::new();
        for k in 0..grid.steps {
            if owns(task, k)? {
                steps.push(k);
            }
        }
        let range = match (steps.first(), steps.last()) {
            (Some(&a), Some(&z)) => a..z + 1,
            _ => 0..0,
        };
        let start = match h.parent(task) {
            Some(p) => cache
                .get(&p)
                .cloned()
                .ok_or_else(|| Error::State(format!("parent of branch {task} not sampled yet")))?,
            None => {
                let mut parts = Vec::new();
                for (bi, &size) in sizes.iter().enumerate() {
                    let mut rng = stream(cfg.seed, Stage::Sample, &[u64::MAX, task as u64, bi as u64]);
                    parts.extend(prior::<S>(size, model.dim(), &mut rng).into_vec());
                }
                Matrix::from_vec(n, model.dim(), parts)?
            }
        };
        let mut x = Matrix::zeros(n, model.dim());
        let mut row = 0;
        for (bi, &size) in sizes.iter().enumerate() {
            let rows: Vec<usize> = (row..row + size).collect();
            let mut xb = start.select_rows(&rows);
            // The root's prior already consumed the head of this stream.
            let mut rng = stream(cfg.seed, Stage::Sample, &[u64::MAX - 1, task as u64, bi as u64]);
            run(model, &mut xb, &grid, range.clone(), &|_| task, cfg, &mut rng)?;
            for r in 0..size {
                x.row_mut(row + r).copy_from_slice(xb.row(r));
            }
            row += size;
        }
        branch_steps.insert(task, range.len());
        cache.insert(task, x);
    }
    let mut batches = BTreeMap::new();
    for c in h.classes() {
        let leaf = h.lookup(c, 0.0)?;
        batches.insert(
            c.clone(),
            SampleBatch {
                data: cache[&leaf].clone(),
                classes: vec![c.clone(); n],
                t: 0.0,
                seed: cfg.seed,
            },
        );
    }
    Ok(CachedSamples {
        batches,
        branch_steps,
        cache,
    })
}

/// Number of steps per class without caching.
pub fn uncached_steps(h: &BranchHierarchy, steps: usize) -> usize {
    h.classes().len() * steps
}

/// Sequence of tasks visited by class `c` over the sampling grid.
pub fn class_path<S: Scalar>(
    process: &Process<S>,
    h: &BranchHierarchy,
    c: &str,
    cfg: &SampleConfig,
) -> Result<Vec<usize>> {
    step_tasks(h, c, &Grid::new(process, cfg))
}

/// Label-guided counterpart of [`sample_class`]; `label` indexes the model's
/// class table.
pub fn sample_label_guided<S: Scalar>(
    model: &LabelGuidedDenoiser<S>,
    label: usize,
    class_name: &str,
    n: usize,
    cfg: &SampleConfig,
) -> Result<SampleBatch<S>> {
    cfg.check()?;
    if label >= model.classes() {
        return Err(Error::Lookup(format!("no label {label}")));
    }
    let grid = Grid::new(model.process(), cfg);
    let mut parts = Vec::new();
    for (b, size) in batch_sizes(n, cfg).into_iter().enumerate() {
        let mut rng = class_stream(cfg.seed, label, b);
        let mut x = prior(size, model.dim(), &mut rng);
        run(model, &mut x, &grid, 0..grid.steps, &|_| label, cfg, &mut rng)?;
        parts.extend(x.into_vec());
    }
    Ok(SampleBatch {
        data: Matrix::from_vec(n, model.dim(), parts)?,
        classes: vec![class_name.to_string(); n],
        t: 0.0,
        seed: cfg.seed,
    })
}
