use std::path::PathBuf;

use branchdiff::hierarchy::discover;
use branchdiff::rng::{stream, Stage};
use toml::Value;

use super::Overrides;
use crate::config::RunConfig;
use crate::error::CliResult;
use crate::io::{load_dataset, sibling, write};

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Labeled CSV (`data.path`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Class column (`data.label_col`).
    #[arg(long)]
    label_col: Option<String>,
    /// Distance threshold (`discover.eps`).
    #[arg(long)]
    eps: Option<f64>,
    /// Objects per class (`discover.n`).
    #[arg(long)]
    n: Option<usize>,
    /// Hierarchy JSON to write.
    #[arg(long)]
    out: PathBuf,
    /// Smoothed distance curves CSV [default: <out>.curves.csv].
    #[arg(long)]
    curves: Option<PathBuf>,
}

impl Args {
    pub fn overrides(&self) -> Vec<(&'static str, Value)> {
        Overrides::default()
            .path("data.path", &self.data)
            .text("data.label_col", &self.label_col)
            .real("discover.eps", self.eps)
            .count("discover.n", self.n)
            .done()
    }
}

pub fn run(args: &Args, cfg: &RunConfig) -> CliResult<()> {
    let ds = load_dataset(cfg)?;
    let process = cfg.process.spec().build::<f64>()?;
    let mut rng = stream(cfg.seed, Stage::Discover, &[]);
    let found = discover(&ds, &process, &cfg.discovery_config(), &mut rng)?;
    write(&args.out, &found.hierarchy.to_json())?;
    let curves = args.curves.clone().unwrap_or_else(|| sibling(&args.out, "curves.csv"));
    write(&curves, &found.smoothed.to_csv())?;
    print!("{}", found.hierarchy.table());
    Ok(())
}
