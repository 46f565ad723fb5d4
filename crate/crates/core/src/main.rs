use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use amulab_core::blend::condense_free;
use amulab_core::eval::{evaluate_model, report, rows_to_csv, ResultRow, MIA_KIND};
use amulab_core::harness::{
    ablate, pretrain, round_splits, run_experiment, save_dataset, write_outputs, Dataset, ExperimentConfig, ForgetSpec,
    RunRecord,
};
use amulab_core::nn::{sample_extractor, ModelParams};
use amulab_core::partition::{partition_dataset, sample_forget, Partition};
use amulab_core::unlearn::{prepare_retain, run_unlearning, UnlearnInputs};
use amulab_core::Result;

/// Desk-scale accelerated machine unlearning lab.
#[derive(Parser)]
#[command(name = "amulab", version)]
struct Cli {
    /// TOML config file (dotted keys); defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, e.g. `--set unlearn.lr=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArg {
    /// Dataset file; generated from `data.*` when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic Gaussian-class dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classifier on the train split.
    Pretrain {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Feature-space k-means partition of the train split.
    Partition {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Condense the free clusters of the first round's split.
    Condense {
        #[command(flatten)]
        data: DataArg,
        /// Partition file from `partition`; recomputed when omitted.
        #[arg(long)]
        partition: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Unlearn the first round's forget set from a pretrained model.
    Unlearn {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also print the result row as CSV.
        #[arg(long)]
        csv: bool,
    },
    /// Metrics of a model on the first round's splits.
    Evaluate {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        model: PathBuf,
    },
    /// Pretrain, unlearn and evaluate every configured round and repeat.
    Pipeline {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run all seven retain-source arms.
    Ablate {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sequential uniform-forgetting rounds.
    Rounds {
        #[arg(long, default_value_t = 3)]
        count: usize,
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_data(cfg: &mut ExperimentConfig, arg: &DataArg) -> Result<Dataset> {
    if let Some(p) = &arg.data {
        cfg.data.path = Some(p.clone());
    }
    cfg.data.load()
}

fn read_model(path: &Path) -> Result<ModelParams> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn finish_run(record: &RunRecord, out: Option<PathBuf>) -> Result<()> {
    let dir = out.unwrap_or_else(|| record.config.output.dir.clone());
    let path = write_outputs(record, &dir)?;
    print!("{}", rows_to_csv(&record.rows())?);
    for e in record.errors() {
        eprintln!("error: {e}");
    }
    eprintln!("wrote {} ({} reports, {MIA_KIND})", path.display(), record.report_count());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::GenData { out } => {
            let ds = cfg.data.load()?;
            save_dataset(&ds, &out)?;
            eprintln!("wrote {} ({} samples, d={}, C={})", out.display(), ds.len(), ds.dim(), ds.classes);
        }
        Command::Pretrain { data, out } => {
            let ds = load_data(&mut cfg, &data)?;
            let model = pretrain(&cfg, &ds, cfg.pretrain.seed)?;
            write_json(&model, &out)?;
            let splits = round_splits(&cfg, &ds, 0)?;
            let m = evaluate_model(&model, &ds, &splits[0], cfg.unlearn.temperature)?;
            println!("{}", serde_json::to_string(&m)?);
        }
        Command::Partition { data, out } => {
            let ds = load_data(&mut cfg, &data)?;
            let ext = sample_extractor(ds.dim(), cfg.partition.seed)?;
            let p = partition_dataset(&ds, &ds.train_ids(), &ext, cfg.partition.k, cfg.partition.seed)?;
            std::fs::write(&out, p.to_json()?)?;
            eprintln!("wrote {} ({} clusters)", out.display(), p.clusters.len());
        }
        Command::Condense { data, partition, out } => {
            let ds = load_data(&mut cfg, &data)?;
            let p = match partition {
                Some(path) => Partition::from_json(&std::fs::read_to_string(path)?)?,
                None => {
                    let ext = sample_extractor(ds.dim(), cfg.partition.seed)?;
                    partition_dataset(&ds, &ds.train_ids(), &ext, cfg.partition.k, cfg.partition.seed)?
                }
            };
            let splits = round_splits(&cfg, &ds, 0)?;
            let split = sample_forget(&p, &splits[0].forget)?;
            let condensed = condense_free(&p, &split, &ds, &cfg.blend)?;
            save_dataset(&condensed.to_dataset(ds.classes)?, &out)?;
            eprintln!(
                "wrote {} ({} prototypes from {} free clusters, {} residual samples kept raw)",
                out.display(),
                condensed.len(),
                split.free_cluster_ids.len(),
                split.residual_image_ids.len()
            );
        }
        Command::Unlearn { data, model, out, csv } => {
            let ds = load_data(&mut cfg, &data)?;
            let pretrained = read_model(&model)?;
            let splits = round_splits(&cfg, &ds, 0)?;
            let s = &splits[0];
            let prepared = prepare_retain(&ds, s, cfg.unlearn.retain_source, &cfg.condense())?;
            let forget = ds.subset(&s.forget);
            let t = ds.subset(&s.t);
            let inputs = UnlearnInputs {
                retain: &prepared.train,
                forget: &forget,
                t: &t,
                preprocessing_seconds: prepared.preprocessing_seconds(),
            };
            let res = run_unlearning(&pretrained, &inputs, &cfg.unlearn)?;
            write_json(&res.model, &out)?;
            let m = report(&res, &ds, s, cfg.unlearn.temperature)?;
            if csv {
                let row = ResultRow::new(cfg.unlearn.method, cfg.unlearn.retain_source, 0, cfg.unlearn.seed, &m);
                print!("{}", rows_to_csv(&[row])?);
            } else {
                println!("{}", serde_json::to_string(&m)?);
            }
        }
        Command::Evaluate { data, model } => {
            let ds = load_data(&mut cfg, &data)?;
            let m = read_model(&model)?;
            let splits = round_splits(&cfg, &ds, 0)?;
            println!("{}", serde_json::to_string(&evaluate_model(&m, &ds, &splits[0], cfg.unlearn.temperature)?)?);
        }
        Command::Pipeline { out } => finish_run(&run_experiment(&cfg)?, out)?,
        Command::Ablate { out } => finish_run(&ablate(&cfg)?, out)?,
        Command::Rounds { count, fraction, out } => {
            cfg.rounds = (0..count as u64).map(|r| ForgetSpec::uniform(fraction, r)).collect();
            cfg.validate()?;
            finish_run(&run_experiment(&cfg)?, out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
