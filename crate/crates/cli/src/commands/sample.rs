use std::path::PathBuf;

use branchdiff::data::{Checkpoint, Model, Standardization};
use branchdiff::denoiser::{Denoiser, MultiTaskDenoiser};
use branchdiff::evaluation::transmutation_correlation;
use branchdiff::rng::{stream, Stage};
use branchdiff::sampling::{
    class_stream, continue_from, hybrid_from, prior, sample_all_cached, sample_class, sample_label_guided, transmute,
    uncached_steps, SampleBatch, SampleConfig,
};
use branchdiff::{BranchHierarchy, Matrix};
use serde_json::json;
use toml::Value;

use super::Overrides;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::{load_checkpoint, read_table, rows_of, sibling, to_data_units, to_model_units, write};

#[derive(clap::Args, Debug)]
#[command(group = clap::ArgGroup::new("which").required(true).args(["class", "all"]))]
pub struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Class to generate.
    #[arg(long)]
    class: Option<String>,
    /// Generate every class.
    #[arg(long)]
    all: bool,
    /// With --all, integrate each branch once and share it between classes.
    #[arg(long, requires = "all")]
    cached: bool,
    /// Objects per class (`sample.n`).
    #[arg(long)]
    n: Option<usize>,
    /// Grid size (`sample.steps`).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

impl SampleArgs {
    pub fn overrides(&self) -> Vec<(&'static str, Value)> {
        Overrides::default()
            .count("sample.n", self.n)
            .count("sample.steps", self.steps)
            .done()
    }
}

fn finish(mut b: SampleBatch<f32>, std: Option<&Standardization>) -> CliResult<SampleBatch<f32>> {
    if !b.data.is_finite() {
        return Err(CliError::Numeric("sampler produced non-finite values".into()));
    }
    b.data = to_data_units(&b.data, std);
    Ok(b)
}

fn empty(dim: usize, seed: u64) -> SampleBatch<f32> {
    SampleBatch {
        data: Matrix::zeros(0, dim),
        classes: Vec::new(),
        t: 0.0,
        seed,
    }
}

fn branched(ckpt: &Checkpoint) -> CliResult<(&MultiTaskDenoiser<f32>, &BranchHierarchy)> {
    match &ckpt.model {
        Model::Branched { model, hierarchy } => Ok((model, hierarchy)),
        Model::LabelGuided { .. } => Err(CliError::input("this command needs a branched checkpoint")),
    }
}

fn known(classes: &[String], c: &str) -> CliResult<()> {
    if classes.iter().any(|x| x == c) {
        Ok(())
    } else {
        Err(CliError::input(format!(
            "unknown class {c} (model has {})",
            classes.join(",")
        )))
    }
}

fn print_ledger(h: &BranchHierarchy, branch_steps: &std::collections::BTreeMap<usize, usize>, steps: usize) {
    println!("branch  start  end  classes  steps");
    for b in h.branches() {
        println!(
            "{}  {}  {}  {}  {}",
            b.task_index,
            b.start,
            b.end,
            b.classes.join(","),
            branch_steps.get(&b.task_index).copied().unwrap_or(0)
        );
    }
    let cached: usize = branch_steps.values().sum();
    let plain = uncached_steps(h, steps);
    println!(
        "cached steps {cached}, per-class steps {plain}, ratio {:.4}",
        plain as f64 / cached.max(1) as f64
    );
}

pub fn run_sample(args: &SampleArgs, cfg: &RunConfig) -> CliResult<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let sc = cfg.sample_config();
    let n = cfg.sample.n;
    let classes: Vec<String> = match &args.class {
        Some(c) => {
            known(ckpt.model.classes(), c)?;
            vec![c.clone()]
        }
        None => ckpt.model.classes().to_vec(),
    };
    let std = ckpt.standardization.as_ref();
    let dim = ckpt.model.denoiser().dim();
    let mut parts = Vec::new();
    if args.cached {
        let (model, h) = branched(&ckpt)?;
        if n > 0 {
            let out = sample_all_cached(model, h, n, &sc)?;
            print_ledger(h, &out.branch_steps, sc.steps);
            for c in &classes {
                parts.push(finish(out.batches[c].clone(), std)?);
            }
        } else {
            println!("no objects requested");
        }
    } else if n > 0 {
        for c in &classes {
            let b = match &ckpt.model {
                Model::Branched { model, hierarchy } => sample_class(model, hierarchy, c, n, &sc)?,
                Model::LabelGuided { model, classes: labels } => {
                    let label = labels.iter().position(|x| x == c).expect("checked above");
                    sample_label_guided(model, label, c, n, &sc)?
                }
            };
            parts.push(finish(b, std)?);
        }
    }
    let batch = if parts.is_empty() {
        empty(dim, sc.seed)
    } else {
        SampleBatch::concat(parts)?
    };
    write(&args.out, &batch.to_csv())?;
    println!("wrote {} objects to {}", batch.len(), args.out.display());
    Ok(())
}

#[derive(clap::Args, Debug)]
pub struct TransmuteArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Source class.
    #[arg(long)]
    from: String,
    /// Target class.
    #[arg(long)]
    to: String,
    /// CSV holding objects of the source class.
    #[arg(long)]
    input: PathBuf,
    /// Class column of the input (`data.label_col`).
    #[arg(long)]
    label_col: Option<String>,
    /// Grid size (`sample.steps`).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Correlation report [default: <out>.report.json].
    #[arg(long)]
    report: Option<PathBuf>,
}

impl TransmuteArgs {
    pub fn overrides(&self) -> Vec<(&'static str, Value)> {
        Overrides::default()
            .text("data.label_col", &self.label_col)
            .count("sample.steps", self.steps)
            .done()
    }
}

fn correlations_json(c: &[Option<f64>]) -> serde_json::Value {
    json!(c)
}

fn mean_defined(c: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = c.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn run_transmute(args: &TransmuteArgs, cfg: &RunConfig) -> CliResult<()> {
    if args.from == args.to {
        return Err(CliError::input("source and target class are the same"));
    }
    let ckpt = load_checkpoint(&args.ckpt)?;
    let (model, h) = branched(&ckpt)?;
    known(h.classes(), &args.from)?;
    known(h.classes(), &args.to)?;
    let std = ckpt.standardization.as_ref();
    let table = read_table(&args.input, &cfg.data.label_col)?;
    let before = rows_of(&table, &args.from, &args.input)?;
    if before.cols() != model.dim() {
        return Err(CliError::input(format!(
            "input has {} features, model expects {}",
            before.cols(),
            model.dim()
        )));
    }
    let x = to_model_units(&before, std).cast::<f32>();
    let sc = cfg.sample_config();
    let moved = finish(transmute(model, h, &x, &args.from, &args.to, &sc)?, std)?;
    write(&args.out, &moved.to_csv())?;

    let tb = h.lca_branch_point(&args.from, &args.to)?;
    let corr = if before.rows() >= 2 {
        transmutation_correlation(&before, &moved.data.cast::<f64>())?
    } else {
        vec![None; before.cols()]
    };
    let report = json!({
        "from": args.from,
        "to": args.to,
        "branch_point": tb,
        "rows": before.rows(),
        "seed": sc.seed,
        "feature_names": table.feature_names,
        "correlations": correlations_json(&corr),
        "mean_correlation": mean_defined(&corr),
    });
    let path = args.report.clone().unwrap_or_else(|| sibling(&args.out, "report.json"));
    write(
        &path,
        &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
    )?;
    println!("t_b {tb}");
    println!("rows {}", before.rows());
    match mean_defined(&corr) {
        Some(m) => println!("mean feature correlation {m:.4}"),
        None => println!("mean feature correlation undefined"),
    }
    Ok(())
}

#[derive(clap::Args, Debug)]
pub struct HybridArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// The two classes, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    classes: Vec<String>,
    /// Hybrids to generate (`sample.n`).
    #[arg(long)]
    n: Option<usize>,
    /// Grid size (`sample.steps`).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Correlation report [default: <out>.report.json].
    #[arg(long)]
    report: Option<PathBuf>,
}

impl HybridArgs {
    pub fn overrides(&self) -> Vec<(&'static str, Value)> {
        Overrides::default()
            .count("sample.n", self.n)
            .count("sample.steps", self.steps)
            .done()
    }
}

/// Hybrid states plus their completions down both classes. The first class
/// continues its own sampling stream, so its completions equal plain
/// samples of that class under the same seed.
fn hybrids(
    model: &MultiTaskDenoiser<f32>,
    h: &BranchHierarchy,
    c1: &str,
    c2: &str,
    n: usize,
    sc: &SampleConfig,
) -> CliResult<[Matrix<f32>; 3]> {
    let (i1, i2) = (h.class_index(c1)?, h.class_index(c2)?);
    let dim = model.dim();
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    let mut left = n;
    let mut b = 0;
    while left > 0 {
        let size = left.min(sc.batch_size);
        let mut rng = class_stream(sc.seed, i1, b);
        let mut x = prior::<f32>(size, dim, &mut rng);
        let stop = hybrid_from(model, h, c1, c2, &mut x, sc, &mut rng)?;
        let mut x1 = x.clone();
        continue_from(model, h, c1, &mut x1, stop, sc, &mut rng)?;
        let mut x2 = x.clone();
        let mut rng2 = stream(sc.seed, Stage::Sample, &[i2 as u64, b as u64, stop as u64]);
        continue_from(model, h, c2, &mut x2, stop, sc, &mut rng2)?;
        out[0].extend(x.into_vec());
        out[1].extend(x1.into_vec());
        out[2].extend(x2.into_vec());
        left -= size;
        b += 1;
    }
    let [a, b1, b2] = out;
    Ok([
        Matrix::from_vec(n, dim, a)?,
        Matrix::from_vec(n, dim, b1)?,
        Matrix::from_vec(n, dim, b2)?,
    ])
}

pub fn run_hybrid(args: &HybridArgs, cfg: &RunConfig) -> CliResult<()> {
    let [c1, c2] = args.classes.as_slice() else {
        return Err(CliError::input("--classes takes exactly two classes"));
    };
    if c1 == c2 {
        return Err(CliError::input("hybrid classes must differ"));
    }
    let ckpt = load_checkpoint(&args.ckpt)?;
    let (model, h) = branched(&ckpt)?;
    known(h.classes(), c1)?;
    known(h.classes(), c2)?;
    let sc = cfg.sample_config();
    let n = cfg.sample.n;
    let tb = h.lca_branch_point(c1, c2)?;
    let std = ckpt.standardization.as_ref();
    let [mid, done1, done2] = hybrids(model, h, c1, c2, n, &sc)?;
    let batch = |data, class: String, t| {
        finish(
            SampleBatch {
                data,
                classes: vec![class; n],
                t,
                seed: sc.seed,
            },
            std,
        )
    };
    let mid = batch(mid, format!("{c1}|{c2}"), tb)?;
    let done1 = batch(done1, c1.clone(), 0.0)?;
    let done2 = batch(done2, c2.clone(), 0.0)?;
    let corr = if n >= 2 {
        transmutation_correlation(&done1.data.cast::<f64>(), &done2.data.cast::<f64>())?
    } else {
        vec![None; model.dim()]
    };
    // Parts differ in `t`, so they are joined as text rather than batches.
    let mut text = mid.to_csv();
    for part in [&done1, &done2] {
        let csv = part.to_csv();
        text.push_str(csv.split_once('\n').map(|(_, rows)| rows).unwrap_or(""));
    }
    write(&args.out, &text)?;
    let report = json!({
        "classes": [c1, c2],
        "branch_point": tb,
        "rows": n,
        "seed": sc.seed,
        "correlations": correlations_json(&corr),
        "mean_correlation": mean_defined(&corr),
    });
    let path = args.report.clone().unwrap_or_else(|| sibling(&args.out, "report.json"));
    write(
        &path,
        &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
    )?;
    println!("t_b {tb}");
    println!("hybrids {n}");
    Ok(())
}
