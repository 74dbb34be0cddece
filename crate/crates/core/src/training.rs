//! Denoising score matching for the branched model and the label-guided
//! baseline, and fine-tuning for class extension.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Tape};
use crate::data::TabularDataset;
use crate::denoiser::{Denoiser, LabelGuidedDenoiser, MultiTaskDenoiser};
use crate::diffusion::{Perturbation, Process};
use crate::error::{Error, Result};
use crate::hierarchy::{Attachment, BranchHierarchy};
use crate::matrix::Matrix;
use crate::rng::{stream, NoiseSource, Stage, StreamRng};
use crate::scalar::Scalar;

/// Per-example loss weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossWeighting {
    /// `std^2 * |s - target|^2`, i.e. noise-prediction error.
    #[default]
    NoisePrediction,
    /// Unweighted `|s - target|^2`.
    Score,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub t_floor: f64,
    pub weighting: LossWeighting,
    /// Index of the first epoch, for resumed runs.
    pub start_epoch: usize,
    /// Record wall-clock seconds in the loss history.
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 1e-3,
            epochs: 10,
            seed: 0,
            t_floor: 1e-4,
            weighting: LossWeighting::NoisePrediction,
            start_epoch: 0,
            timing: false,
        }
    }
}

impl TrainConfig {
    fn check(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Domain("batch size and epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.t_floor >= 0.0) {
            return Err(Error::Domain(
                "learning rate must be positive and t_floor nonnegative".into(),
            ));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskLoss {
    pub task: usize,
    pub loss: f64,
    pub count: usize,
}

/// Losses of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub tasks: Vec<TaskLoss>,
    pub seconds: f64,
}

/// Loss history as CSV with columns `epoch,step,task,loss,seconds`; one row
/// per task touched in each step.
pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("epoch,step,task,loss,seconds\n");
    for r in records {
        for t in &r.tasks {
            let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.step, t.task, t.loss, r.seconds);
        }
    }
    out
}

/// `|std * score + eps|^2` for one perturbed example.
pub fn dsm_loss<S: Scalar>(score: &[S], p: &Perturbation<S>) -> Result<f64> {
    if score.len() != p.eps.len() {
        return Err(Error::Shape(format!(
            "score has {} entries, noise {}",
            score.len(),
            p.eps.len()
        )));
    }
    if !(p.std > S::zero()) {
        return Err(Error::Numeric(format!("loss is singular at t = {}", p.t)));
    }
    let loss: f64 = score
        .iter()
        .zip(&p.eps)
        .map(|(&s, &e)| {
            let r = p.std.f64() * s.f64() + e.f64();
            r * r
        })
        .sum();
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    Ok(loss)
}

/// Batch mean of [`dsm_loss`].
pub fn batch_dsm_loss<S: Scalar>(scores: &Matrix<S>, perturbations: &[Perturbation<S>]) -> Result<f64> {
    if scores.rows() != perturbations.len() || perturbations.is_empty() {
        return Err(Error::Shape("one score row per perturbation required".into()));
    }
    let total = perturbations
        .iter()
        .enumerate()
        .map(|(i, p)| dsm_loss(scores.row(i), p))
        .sum::<Result<f64>>()?;
    Ok(total / perturbations.len() as f64)
}

/// Draws a training time from `[lo, hi)` (continuous) or the integer steps
/// in that range (discrete; `hi = T` includes `T`).
fn sample_time(process_horizon: f64, discrete: bool, lo: f64, hi: f64, rng: &mut StreamRng) -> f64 {
    if discrete {
        let a = lo.ceil().max(1.0) as u64;
        let b = if hi >= process_horizon {
            hi as u64 + 1
        } else {
            hi.ceil() as u64
        };
        rng.random_range(a..b) as f64
    } else {
        rng.random_range(lo..hi)
    }
}

fn check_range<S: Scalar>(process: &Process<S>, cfg: &TrainConfig, range: (f64, f64)) -> Result<(f64, f64)> {
    let t_max = process.horizon();
    if process.is_discrete() {
        let a = range.0.ceil().max(1.0);
        let b = if range.1 >= t_max { t_max + 1.0 } else { range.1.ceil() };
        if a >= b {
            return Err(Error::Domain(format!(
                "no training steps in [{}, {})",
                range.0, range.1
            )));
        }
        Ok(range)
    } else {
        let lo = range.0.max(cfg.t_floor);
        if !(lo < range.1) {
            return Err(Error::Domain(format!("empty training interval [{lo}, {})", range.1)));
        }
        Ok((lo, range.1))
    }
}

/// Shared optimization loop. `route(class, t)` picks the conditioning index
/// (task or label) of each example.
fn fit<S: Scalar, D: Denoiser<S>>(
    model: &mut D,
    x: &Matrix<S>,
    classes: &[usize],
    route: &dyn Fn(usize, f64) -> Result<usize>,
    cfg: &TrainConfig,
    range: (f64, f64),
    stage: Stage,
) -> Result<Vec<LossRecord>> {
    cfg.check()?;
    if x.rows() == 0 {
        return Err(Error::Data("no training examples".into()));
    }
    if x.cols() != model.dim() {
        return Err(Error::Shape(format!(
            "model expects {} features, data has {}",
            model.dim(),
            x.cols()
        )));
    }
    let process = model.process().clone();
    let (lo, hi) = check_range(&process, cfg, range)?;
    let horizon = process.horizon();
    let dim = x.cols();
    let adam = cfg.adam();
    let started = Instant::now();
    let steps_per_epoch = x.rows().div_ceil(cfg.batch_size);
    let mut records = Vec::with_capacity(cfg.epochs * steps_per_epoch);

    for epoch in cfg.start_epoch..cfg.start_epoch + cfg.epochs {
        let mut order: Vec<usize> = (0..x.rows()).collect();
        order.shuffle(&mut stream(cfg.seed, stage, &[epoch as u64, u64::MAX]));
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut rng = stream(cfg.seed, stage, &[epoch as u64, step as u64]);
            let b = idx.len();
            let mut xt = Matrix::zeros(b, dim);
            let mut eps = Matrix::zeros(b, dim);
            let mut ts = Vec::with_capacity(b);
            let mut cond = Vec::with_capacity(b);
            let mut stds = Vec::with_capacity(b);
            for (r, &i) in idx.iter().enumerate() {
                let t = sample_time(horizon, process.is_discrete(), lo, hi, &mut rng);
                let (mean, std) = process.marginal(t)?;
                rng.fill_normal(eps.row_mut(r));
                for ((o, &x0), &e) in xt.row_mut(r).iter_mut().zip(x.row(i)).zip(eps.row(r)) {
                    *o = mean * x0 + std * e;
                }
                cond.push(route(classes[i], t)?);
                ts.push(t);
                stds.push(std);
            }

            let mut tape = Tape::new();
            let groups = model.forward_tape(&mut tape, &xt, &ts, &cond)?;
            let mut seeds = Vec::with_capacity(groups.len());
            let mut tasks = Vec::with_capacity(groups.len());
            let mut total = 0.0f64;
            for g in &groups {
                let pred = tape.value(g.out);
                let mut grad = Matrix::zeros(g.rows.len(), dim);
                let mut task_loss = 0.0f64;
                for (r, &i) in g.rows.iter().enumerate() {
                    let w = match cfg.weighting {
                        LossWeighting::NoisePrediction => 1.0,
                        LossWeighting::Score => 1.0 / (stds[i].f64() * stds[i].f64()),
                    };
                    let sd = stds[i].f64();
                    for j in 0..dim {
                        let d = -sd * pred[(r, j)].f64() - eps[(i, j)].f64();
                        task_loss += w * d * d;
                        grad[(r, j)] = S::of(-2.0 * w * sd * d / b as f64);
                    }
                }
                if !task_loss.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}, step {step}")));
                }
                total += task_loss;
                tasks.push(TaskLoss {
                    task: cond[g.rows[0]],
                    loss: task_loss / g.rows.len() as f64,
                    count: g.rows.len(),
                });
                seeds.push((g.out, grad));
            }
            tape.backward(model.store_mut(), &seeds)?;
            model.store_mut().adam_step(&adam)?;
            tasks.sort_by_key(|t| t.task);
            records.push(LossRecord {
                epoch,
                step,
                loss: total / b as f64,
                tasks,
                seconds: if cfg.timing {
                    started.elapsed().as_secs_f64()
                } else {
                    0.0
                },
            });
        }
    }
    Ok(records)
}

/// Maps dataset class indices to hierarchy class names.
fn class_names<'a>(data: &'a TabularDataset, classes: &[String]) -> Result<Vec<&'a str>> {
    data.classes
        .iter()
        .map(|c| {
            if classes.contains(c) {
                Ok(c.as_str())
            } else {
                Err(Error::Lookup(format!("class {c} is not in the model")))
            }
        })
        .collect()
}

/// Trains a branched model: every example is routed to the branch that
/// covers its class at the sampled time.
pub fn train_branched<S: Scalar>(
    model: &mut MultiTaskDenoiser<S>,
    hierarchy: &BranchHierarchy,
    data: &TabularDataset,
    cfg: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    if model.tasks() != hierarchy.task_count() {
        return Err(Error::Shape(format!(
            "model has {} heads, hierarchy {} branches",
            model.tasks(),
            hierarchy.task_count()
        )));
    }
    if (hierarchy.horizon() - model.process().horizon()).abs() > 1e-9 {
        return Err(Error::Domain("hierarchy and process horizons differ".into()));
    }
    let names = class_names(data, hierarchy.classes())?;
    let route = |c: usize, t: f64| hierarchy.lookup(names[c], t);
    let x = data.features.cast::<S>();
    let horizon = hierarchy.horizon();
    fit(model, &x, &data.labels, &route, cfg, (0.0, horizon), Stage::Train)
}

/// Trains the label-guided baseline; dataset classes must match the model's
/// label table row for row.
pub fn train_label_guided<S: Scalar>(
    model: &mut LabelGuidedDenoiser<S>,
    data: &TabularDataset,
    cfg: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    if data.classes.len() != model.classes() {
        return Err(Error::Shape(format!(
            "model has {} labels, dataset {} classes",
            model.classes(),
            data.classes.len()
        )));
    }
    let route = |c: usize, _t: f64| Ok(c);
    let x = data.features.cast::<S>();
    let horizon = model.process().horizon();
    fit(model, &x, &data.labels, &route, cfg, (0.0, horizon), Stage::Train)
}

/// Result of [`extend`].
#[derive(Clone, Debug)]
pub struct Extension<S> {
    pub model: MultiTaskDenoiser<S>,
    pub attachment: Attachment,
    pub losses: Vec<LossRecord>,
}

/// Adds `new_class` next to `sibling` at `attach_time` and trains only the
/// new leaf head on `new_data` (rows of the new class), with every existing
/// parameter frozen.
pub fn extend<S: Scalar>(
    model: &MultiTaskDenoiser<S>,
    hierarchy: &BranchHierarchy,
    new_data: &Matrix<f64>,
    new_class: &str,
    sibling: &str,
    attach_time: f64,
    cfg: &TrainConfig,
) -> Result<Extension<S>> {
    let attachment = hierarchy.attach_class(new_class, sibling, attach_time)?;
    let mut model = model.clone();
    model.store_mut().freeze_all();
    let (orig, upper) = attachment.split;
    if model.add_head(orig)? != upper {
        return Err(Error::State("split head index does not match the hierarchy".into()));
    }
    for name in model.head_params(upper) {
        model.store_mut().set_frozen(&name, true)?;
    }
    if model.add_head(attachment.sibling_leaf_task)? != attachment.new_leaf_task {
        return Err(Error::State("new leaf head index does not match the hierarchy".into()));
    }
    let leaf = attachment.hierarchy.branch(attachment.new_leaf_task)?.clone();
    let h = &attachment.hierarchy;
    let route = |_c: usize, t: f64| h.lookup(new_class, t);
    let x = new_data.cast::<S>();
    let labels = vec![0; x.rows()];
    let losses = fit(
        &mut model,
        &x,
        &labels,
        &route,
        cfg,
        (leaf.start, leaf.end),
        Stage::Extend,
    )?;
    Ok(Extension {
        model,
        attachment,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_gaussian_mixture, toys};
    use crate::denoiser::Architecture;
    use crate::diffusion::{perturb, score_target, ProcessSpec};
    use crate::hierarchy::fixtures::digits_tree;
    use crate::rng::normal_vec;
    use rand::SeedableRng;

    fn arch() -> Architecture {
        Architecture {
            width: 32,
            trunk_layers: 2,
            head_layers: 2,
            time_frequencies: 8,
            label_dim: 4,
        }
    }

    #[test]
    fn dsm_loss_cases() {
        let mut rng = StreamRng::seed_from_u64(1);
        let process: Process<f64> = ProcessSpec::default().build().unwrap();
        let p = perturb(&process, &[0.3, -0.1, 2.0], 0.4, &mut rng).unwrap();
        let oracle = score_target(&p).unwrap();
        assert!(dsm_loss(&oracle, &p).unwrap() < 1e-24);
        // zero score: E|eps|^2 = dim
        let n = 20_000;
        let mean: f64 = (0..n)
            .map(|_| {
                let p = perturb(&process, &[0.0; 3], 0.7, &mut rng).unwrap();
                dsm_loss(&[0.0; 3], &p).unwrap()
            })
            .sum::<f64>()
            / n as f64;
        assert!((mean - 3.0).abs() < 0.1, "{mean}");
        let s = normal_vec::<f64>(&mut rng, 3);
        assert!(dsm_loss(&s, &p).unwrap() >= 0.0);
        let p0 = perturb(&process, &[1.0], 0.0, &mut rng).unwrap();
        assert!(matches!(dsm_loss(&[0.0], &p0), Err(Error::Numeric(_))));
    }

    fn digits_data(per_class: usize) -> TabularDataset {
        let classes: Vec<_> = ["0", "4", "9"]
            .iter()
            .enumerate()
            .map(|(i, c)| crate::data::synth::GaussianClass::isotropic(c, &[i as f64 - 1.0, 0.5], 0.1))
            .collect();
        synth_gaussian_mixture(&classes, per_class, 3).unwrap().data
    }

    #[test]
    fn single_class_small_t_touches_only_its_leaf() {
        let h = digits_tree();
        let process = ProcessSpec::default().build().unwrap();
        let mut model = MultiTaskDenoiser::<f32>::new(arch(), 2, 5, process, 1).unwrap();
        let data = digits_data(20);
        let only4 = data.subset(&["4"]).unwrap();
        let leaf = h.lookup("4", 0.0).unwrap();
        let before = model.clone();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 64,
            ..Default::default()
        };
        let route = |c: usize, t: f64| h.lookup(&only4.classes[c], t);
        let x = only4.features.cast::<f32>();
        fit(&mut model, &x, &only4.labels, &route, &cfg, (0.0, 0.3), Stage::Train).unwrap();
        for (a, b) in before.store().iter().zip(model.store().iter()) {
            let moved = a.value != b.value;
            let own = a.name.starts_with("trunk.") || a.name.starts_with(&format!("head.{leaf}."));
            if a.name.ends_with("weight") {
                assert_eq!(moved, own, "{}", a.name);
            } else if !own {
                assert!(!moved, "{}", a.name);
            }
        }
    }

    #[test]
    fn task_hits_follow_interval_lengths() {
        let h = digits_tree();
        let process = ProcessSpec::default().build().unwrap();
        let mut model = MultiTaskDenoiser::<f32>::new(arch(), 2, 5, process, 1).unwrap();
        let data = digits_data(2000);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 1000,
            ..Default::default()
        };
        let recs = train_branched(&mut model, &h, &data, &cfg).unwrap();
        let mut hits = vec![0usize; 5];
        for r in &recs {
            for t in &r.tasks {
                hits[t.task] += t.count;
            }
        }
        let n: usize = hits.iter().sum();
        assert_eq!(n, 12_000);
        for b in h.branches() {
            // each class is drawn with probability 1/3
            let p = (b.end - b.start.max(cfg.t_floor)) / h.horizon() * b.classes.len() as f64 / 3.0;
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            let got = hits[b.task_index] as f64;
            assert!(
                (got - n as f64 * p).abs() < 3.0 * sd,
                "task {}: {got} vs {}",
                b.task_index,
                n as f64 * p
            );
        }
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let toy = synth_gaussian_mixture(&toys::two_class(), 1000, 7).unwrap();
        let h = toys::two_class_hierarchy();
        let process = ProcessSpec::default().build().unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            seed: 3,
            ..Default::default()
        };
        let mut a = MultiTaskDenoiser::<f32>::new(arch(), 2, 3, process.clone(), 3).unwrap();
        let mut b = a.clone();
        let ra = train_branched(&mut a, &h, &toy.data, &cfg).unwrap();
        let rb = train_branched(&mut b, &h, &toy.data, &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        let median = |v: &mut Vec<f64>| {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        let k = ra.len() / 10;
        let mut first: Vec<f64> = ra[..k].iter().map(|r| r.loss).collect();
        let mut last: Vec<f64> = ra[ra.len() - k..].iter().map(|r| r.loss).collect();
        assert!(median(&mut last) < median(&mut first));
        assert!(loss_csv(&ra).starts_with("epoch,step,task,loss,seconds\n0,0,"));
    }

    #[test]
    fn label_guided_trains_and_distinguishes_labels() {
        let toy = synth_gaussian_mixture(&toys::two_class(), 1000, 7).unwrap();
        let process = ProcessSpec::default().build().unwrap();
        let mut m = LabelGuidedDenoiser::<f32>::new(arch(), 2, 2, process, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            ..Default::default()
        };
        let recs = train_label_guided(&mut m, &toy.data, &cfg).unwrap();
        assert!(recs.last().unwrap().loss.is_finite());
        let x = [0.1f32, 0.2];
        assert_ne!(
            m.forward_label_guided(&x, 0.2, 0).unwrap(),
            m.forward_label_guided(&x, 0.2, 1).unwrap()
        );
    }

    #[test]
    fn extension_freezes_old_parameters() {
        let h = digits_tree();
        let process = ProcessSpec::default().build().unwrap();
        let model = MultiTaskDenoiser::<f32>::new(arch(), 2, 5, process, 1).unwrap();
        let mut rng = StreamRng::seed_from_u64(2);
        let new_data = Matrix::from_vec(64, 2, normal_vec(&mut rng, 128)).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            ..Default::default()
        };
        let ext = extend(&model, &h, &new_data, "7", "4", 0.38, &cfg).unwrap();
        assert_eq!(ext.attachment.hierarchy.task_count(), 7);
        assert_eq!(ext.model.tasks(), 7);
        for p in model.store().iter() {
            assert_eq!(p.value, ext.model.store().by_name(&p.name).unwrap().value, "{}", p.name);
        }
        let (orig, upper) = ext.attachment.split;
        let x = [0.3f32, -0.4];
        assert_eq!(
            ext.model.forward_branched(&x, 0.45, orig).unwrap(),
            ext.model.forward_branched(&x, 0.45, upper).unwrap()
        );
        let leaf = ext.attachment.new_leaf_task;
        assert_ne!(
            ext.model.forward_branched(&x, 0.2, leaf).unwrap(),
            ext.model
                .forward_branched(&x, 0.2, ext.attachment.sibling_leaf_task)
                .unwrap()
        );
        for r in &ext.losses {
            assert!(r.tasks.iter().all(|t| t.task == leaf));
        }
        assert!(extend(&model, &h, &new_data, "4", "9", 0.38, &cfg).is_err());
    }

    #[test]
    fn discrete_training_runs_on_integer_steps() {
        let toy = synth_gaussian_mixture(&toys::two_class(), 200, 7).unwrap();
        let h = toys::two_class_discrete_hierarchy();
        let process = ProcessSpec::discrete_default().build().unwrap();
        let mut m = MultiTaskDenoiser::<f32>::new(arch(), 2, 3, process, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            ..Default::default()
        };
        let recs = train_branched(&mut m, &h, &toy.data, &cfg).unwrap();
        assert!(recs.iter().all(|r| r.loss.is_finite()));
        let mut rng = StreamRng::seed_from_u64(0);
        for _ in 0..1000 {
            let t = sample_time(1000.0, true, 0.0, 1000.0, &mut rng);
            assert!(t >= 1.0 && t <= 1000.0 && t.fract() == 0.0);
        }
    }
}
