use std::path::PathBuf;
use std::time::Instant;

use branchdiff::data::Model;
use branchdiff::evaluation::{compare_class, MetricsReport};
use branchdiff::sampling::{sample_all_cached, sample_class, uncached_steps};
use serde_json::json;
use toml::Value;

use super::Overrides;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::{load_checkpoint, read_table, write};

#[derive(clap::Args, Debug)]
pub struct EvalArgs {
    /// Generated objects (CSV with a class column).
    #[arg(long)]
    generated: PathBuf,
    /// Real objects (CSV with a class column).
    #[arg(long)]
    reference: PathBuf,
    /// Class column of both files (`data.label_col`).
    #[arg(long)]
    label_col: Option<String>,
    /// Metrics JSON to write.
    #[arg(long)]
    out: PathBuf,
}

impl EvalArgs {
    pub fn overrides(&self) -> Vec<(&'static str, Value)> {
        Overrides::default().text("data.label_col", &self.label_col).done()
    }
}

pub fn run_eval(args: &EvalArgs, cfg: &RunConfig) -> CliResult<()> {
    let generated = read_table(&args.generated, &cfg.data.label_col)?;
    let reference = read_table(&args.reference, &cfg.data.label_col)?;
    if generated.dim() != reference.dim() {
        return Err(CliError::input(format!(
            "generated objects have {} features, reference {}",
            generated.dim(),
            reference.dim()
        )));
    }
    let mut report = MetricsReport::default();
    for c in &reference.classes {
        if !generated.classes.contains(c) {
            continue;
        }
        let m = compare_class(&reference.class_matrix(c)?, &generated.class_matrix(c)?)?;
        println!(
            "{c}  frechet {:.6}  mean w1 {:.6}",
            m.frechet,
            m.wasserstein1.iter().sum::<f64>() / m.wasserstein1.len() as f64
        );
        report.classes.insert(c.clone(), m);
    }
    if report.classes.is_empty() {
        return Err(CliError::input("no class appears in both files"));
    }
    write(&args.out, &(report.to_json() + "\n"))
}

#[derive(clap::Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    /// Objects per class (`sample.n`).
    #[arg(long)]
    n: Option<usize>,
    /// Grid size (`sample.steps`).
    #[arg(long)]
    steps: Option<usize>,
    /// Optional JSON summary.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl BenchArgs {
    pub fn overrides(&self) -> Vec<(&'static str, Value)> {
        Overrides::default()
            .count("sample.n", self.n)
            .count("sample.steps", self.steps)
            .done()
    }
}

/// Mean and standard error of the mean.
fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn run_bench(args: &BenchArgs, cfg: &RunConfig) -> CliResult<()> {
    if args.trials == 0 {
        return Err(CliError::input("--trials must be at least 1"));
    }
    let ckpt = load_checkpoint(&args.ckpt)?;
    let Model::Branched { model, hierarchy: h } = &ckpt.model else {
        return Err(CliError::input("bench needs a branched checkpoint"));
    };
    let sc = cfg.sample_config();
    let n = cfg.sample.n.max(1);
    let mut plain = Vec::with_capacity(args.trials);
    let mut cached = Vec::with_capacity(args.trials);
    let mut cached_steps = 0;
    for _ in 0..args.trials {
        let clock = Instant::now();
        for c in h.classes() {
            sample_class(model, h, c, n, &sc)?;
        }
        plain.push(clock.elapsed().as_secs_f64());
        let clock = Instant::now();
        cached_steps = sample_all_cached(model, h, n, &sc)?.total_steps();
        cached.push(clock.elapsed().as_secs_f64());
    }
    let plain_steps = uncached_steps(h, sc.steps);
    let (pm, ps) = mean_se(&plain);
    let (cm, cs) = mean_se(&cached);
    println!("method     steps  time (s)");
    println!("per-class  {plain_steps:>5}  {pm:.4} ± {ps:.4}");
    println!("cached     {cached_steps:>5}  {cm:.4} ± {cs:.4}");
    let step_ratio = plain_steps as f64 / cached_steps.max(1) as f64;
    let time_ratio = pm / cm;
    println!(
        "speedup {time_ratio:.2}x wall clock, {step_ratio:.2}x steps ({} trials)",
        args.trials
    );
    if let Some(out) = &args.out {
        let doc = json!({
            "trials": args.trials,
            "n": n,
            "per_class": {"steps": plain_steps, "mean_seconds": pm, "se_seconds": ps},
            "cached": {"steps": cached_steps, "mean_seconds": cm, "se_seconds": cs},
            "speedup": time_ratio,
            "step_ratio": step_ratio,
        });
        write(
            out,
            &(serde_json::to_string_pretty(&doc).expect("summary serializes") + "\n"),
        )?;
    }
    Ok(())
}
