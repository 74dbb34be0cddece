use std::path::PathBuf;

use branchdiff::data::{Checkpoint, Model};
use branchdiff::denoiser::Denoiser;
use branchdiff::training::{extend, loss_csv};
use toml::Value;

use super::Overrides;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::{load_checkpoint, read_table, rows_of, sibling, to_model_units, write};

#[derive(clap::Args, Debug)]
pub struct Args {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    new_class: String,
    /// Existing class the new one branches off from.
    #[arg(long)]
    sibling: String,
    /// Diffusion time at which the new class splits from its sibling.
    #[arg(long)]
    attach_time: f64,
    /// CSV holding objects of the new class (`data.path`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Class column (`data.label_col`).
    #[arg(long)]
    label_col: Option<String>,
    /// Epochs for the new head (`train.epochs`).
    #[arg(long)]
    epochs: Option<usize>,
    /// Extended checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Loss CSV [default: <out>.loss.csv].
    #[arg(long)]
    loss: Option<PathBuf>,
}

impl Args {
    pub fn overrides(&self) -> Vec<(&'static str, Value)> {
        Overrides::default()
            .path("data.path", &self.data)
            .text("data.label_col", &self.label_col)
            .count("train.epochs", self.epochs)
            .done()
    }
}

pub fn run(args: &Args, cfg: &RunConfig) -> CliResult<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let Model::Branched { model, hierarchy } = &ckpt.model else {
        return Err(CliError::input("extension needs a branched checkpoint"));
    };
    if !hierarchy.classes().contains(&args.sibling) {
        return Err(CliError::input(format!("unknown sibling class {}", args.sibling)));
    }
    let path = cfg
        .data
        .path
        .as_ref()
        .ok_or_else(|| CliError::input("no data for the new class (--data)"))?;
    let table = read_table(path, &cfg.data.label_col)?;
    let rows = to_model_units(&rows_of(&table, &args.new_class, path)?, ckpt.standardization.as_ref());
    let ext = extend(
        model,
        hierarchy,
        &rows,
        &args.new_class,
        &args.sibling,
        args.attach_time,
        &cfg.train_config(),
    )?;

    let old = model.store();
    let new = ext.model.store();
    let mut same = 0;
    for p in old.iter() {
        let q = new.by_name(&p.name)?;
        if q.shape == p.shape && q.value.iter().zip(&p.value).all(|(a, b)| a.to_bits() == b.to_bits()) {
            same += 1;
        }
    }
    let h = &ext.attachment.hierarchy;
    println!(
        "attached {} next to {} at t = {}",
        args.new_class, args.sibling, args.attach_time
    );
    println!("branches {} -> {}", hierarchy.task_count(), h.task_count());
    println!("original tensors bitwise identical: {same}/{}", old.len());
    print!("{}", h.table());
    if same != old.len() {
        return Err(CliError::Numeric(format!(
            "{} frozen tensors changed",
            old.len() - same
        )));
    }

    let out = Checkpoint {
        model: Model::Branched {
            model: ext.model,
            hierarchy: ext.attachment.hierarchy,
        },
        ..ckpt.clone()
    };
    out.save(&args.out)?;
    let loss_path = args.loss.clone().unwrap_or_else(|| sibling(&args.out, "loss.csv"));
    write(&loss_path, &loss_csv(&ext.losses))?;
    Ok(())
}
