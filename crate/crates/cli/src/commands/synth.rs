use std::path::PathBuf;

use branchdiff::data::synth::{synth_gaussian_mixture, toys, GaussianClass};
use branchdiff::BranchHierarchy;
use clap::ValueEnum;

use crate::config::{ProcessKind, RunConfig};
use crate::error::{CliError, CliResult};
use crate::io::write;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Toy {
    /// Two correlated 2-D classes.
    TwoClass,
    /// Two classes sharing a high-variance latent coordinate.
    SharedLatent,
    /// Classes `a`, `b` and the later class `c`.
    Extension,
    /// `--k` classes on a binary tree in 4-D.
    Nested,
}

#[derive(clap::Args, Debug)]
pub struct Args {
    #[arg(long, value_enum)]
    toy: Toy,
    /// Objects per class.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Classes of the nested toy.
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Keep only these classes, comma separated.
    #[arg(long, value_delimiter = ',')]
    only: Vec<String>,
    /// Dataset CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Also write the toy's reference hierarchy JSON.
    #[arg(long)]
    hierarchy: Option<PathBuf>,
    /// Also write the ground-truth class Gaussians as JSON.
    #[arg(long)]
    truth: Option<PathBuf>,
}

fn toy(args: &Args, cfg: &RunConfig) -> CliResult<(Vec<GaussianClass>, Option<BranchHierarchy>)> {
    let discrete = cfg.process.kind == ProcessKind::Discrete;
    Ok(match args.toy {
        Toy::TwoClass if discrete => (toys::two_class(), Some(toys::two_class_discrete_hierarchy())),
        Toy::TwoClass => (toys::two_class(), Some(toys::two_class_hierarchy())),
        Toy::SharedLatent => (toys::shared_latent(), Some(toys::shared_latent_hierarchy())),
        Toy::Extension => {
            let (mut base, new) = toys::extension();
            base.push(new);
            (base, (!discrete).then(toys::extension_hierarchy))
        }
        Toy::Nested => {
            if !(1..=16).contains(&args.k) {
                return Err(CliError::input("--k must be in 1..=16"));
            }
            (toys::nested(args.k), None)
        }
    })
}

pub fn run(args: &Args, cfg: &RunConfig) -> CliResult<()> {
    let (classes, hierarchy) = toy(args, cfg)?;
    let set = synth_gaussian_mixture(&classes, args.n, cfg.seed)?;
    let data = if args.only.is_empty() {
        set.data
    } else {
        let keep: Vec<&str> = args.only.iter().map(String::as_str).collect();
        set.data.subset(&keep)?
    };
    write(&args.out, &data.to_csv())?;
    if let Some(path) = &args.hierarchy {
        let h = hierarchy.ok_or_else(|| CliError::input("this toy has no reference hierarchy"))?;
        write(path, &h.to_json())?;
    }
    if let Some(path) = &args.truth {
        let text = serde_json::to_string_pretty(&set.truth).expect("truth serializes");
        write(path, &(text + "\n"))?;
    }
    println!(
        "wrote {} objects of {} classes to {}",
        data.len(),
        data.classes.len(),
        args.out.display()
    );
    Ok(())
}
