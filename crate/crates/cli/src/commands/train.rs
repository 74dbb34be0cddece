use std::path::PathBuf;

use branchdiff::data::{Checkpoint, Model, TabularDataset};
use branchdiff::denoiser::{LabelGuidedDenoiser, MultiTaskDenoiser};
use branchdiff::training::{loss_csv, train_branched, train_label_guided};
use branchdiff::BranchHierarchy;
use toml::Value;

use super::Overrides;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::{load_checkpoint, sibling, write};

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Labeled CSV (`data.path`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Class column (`data.label_col`).
    #[arg(long)]
    label_col: Option<String>,
    /// Hierarchy JSON (`hierarchy`); required for branched models.
    #[arg(long)]
    hierarchy: Option<PathBuf>,
    /// Train the label-guided baseline instead of a branched model.
    #[arg(long)]
    baseline: bool,
    /// Continue training this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Epochs to run (`train.epochs`).
    #[arg(long)]
    epochs: Option<usize>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Loss CSV [default: <out>.loss.csv]; resumed runs append to it.
    #[arg(long)]
    loss: Option<PathBuf>,
}

impl Args {
    pub fn overrides(&self) -> Vec<(&'static str, Value)> {
        Overrides::default()
            .path("data.path", &self.data)
            .text("data.label_col", &self.label_col)
            .path("hierarchy", &self.hierarchy)
            .count("train.epochs", self.epochs)
            .done()
    }
}

fn read_hierarchy(cfg: &RunConfig) -> CliResult<BranchHierarchy> {
    let path = cfg
        .hierarchy
        .as_ref()
        .ok_or_else(|| CliError::input("branched training needs --hierarchy"))?;
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    Ok(BranchHierarchy::from_json(&text)?)
}

fn fresh(args: &Args, cfg: &RunConfig, ds: &TabularDataset) -> CliResult<Checkpoint> {
    let arch = cfg.model.architecture();
    let process = cfg.process.spec().build::<f32>()?;
    let model = if args.baseline {
        Model::LabelGuided {
            model: LabelGuidedDenoiser::with_parity(arch, ds.dim(), ds.classes.len(), process, cfg.seed)?,
            classes: ds.classes.clone(),
        }
    } else {
        let hierarchy = read_hierarchy(cfg)?;
        Model::Branched {
            model: MultiTaskDenoiser::new(arch, ds.dim(), hierarchy.task_count(), process, cfg.seed)?,
            hierarchy,
        }
    };
    let mut ckpt = Checkpoint::new(model, cfg.seed);
    ckpt.standardization = ds.standardization.clone();
    Ok(ckpt)
}

pub fn run(args: &Args, cfg: &RunConfig) -> CliResult<()> {
    let raw = {
        let mut c = cfg.clone();
        c.data.standardize = false;
        crate::io::load_dataset(&c)?
    };
    let (mut ckpt, ds) = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let mut ds = raw;
            // Reuse the stored scaling so resumed runs see identical inputs.
            if let Some(s) = &ckpt.standardization {
                ds.features = s.apply(&ds.features);
                ds.standardization = Some(s.clone());
            }
            (ckpt, ds)
        }
        None => {
            let ds = if cfg.data.standardize { raw.standardize()? } else { raw };
            (fresh(args, cfg, &ds)?, ds)
        }
    };
    let mut tc = cfg.train_config();
    tc.start_epoch = ckpt.epochs_done;
    let records = match &mut ckpt.model {
        Model::Branched { model, hierarchy } => train_branched(model, hierarchy, &ds, &tc)?,
        Model::LabelGuided { model, classes } => {
            let mut sorted = ds.classes.clone();
            sorted.sort();
            let mut expected = classes.clone();
            expected.sort();
            if sorted != expected {
                return Err(CliError::input(format!(
                    "dataset classes {:?} do not match the model's {:?}",
                    ds.classes, classes
                )));
            }
            let names: Vec<&str> = classes.iter().map(String::as_str).collect();
            train_label_guided(model, &ds.subset(&names)?, &tc)?
        }
    };
    ckpt.epochs_done += tc.epochs;
    ckpt.save(&args.out)?;

    let loss_path = args.loss.clone().unwrap_or_else(|| sibling(&args.out, "loss.csv"));
    let mut text = loss_csv(&records);
    if args.resume.is_some() {
        if let Ok(prev) = std::fs::read_to_string(&loss_path) {
            let body = text.split_once('\n').map(|(_, b)| b).unwrap_or("");
            text = prev + body;
        }
    }
    write(&loss_path, &text)?;
    let last = records.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} epochs ({} steps), epochs done {}, final batch loss {last:.6}",
        tc.epochs,
        records.len(),
        ckpt.epochs_done
    );
    Ok(())
}
