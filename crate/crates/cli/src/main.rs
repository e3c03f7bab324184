use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adsam::data::{Dataset, SceneSample};
use adsam::metrics::UndefinedPolicy;
use adsam::model::{AdSamModel, Checkpoint};
use adsam::train::{
    evaluate, model_from_checkpoint, retention_run, sensitivity_sweep, train, write_text, Precision, RunConfig, RunOutputs,
};
use adsam::{Error, Result, Scalar};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "adsam", version, about = "Dual-encoder deformable segmentation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset directory.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Number of training scenes; the validation count comes from `val_count`.
        #[arg(long)]
        count: u64,
    },
    /// Train a model and write the run log, checkpoints and final report.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint and write a per-class IoU report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Leave classes absent from both prediction and truth out of the mean.
        #[arg(long)]
        exclude_undefined: bool,
    },
    /// Train one fresh model per training-set prefix size.
    Sweep {
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a checkpoint's mIoU on a source and a target dataset.
    Retention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn load_data(dir: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let data = Dataset::load(dir)?;
    data.validate(cfg.input_height, cfg.input_width, cfg.num_classes)?;
    Ok(data)
}

fn pick(data: &Dataset, split: SplitArg) -> Result<&[SceneSample]> {
    let s = match split {
        SplitArg::Train => &data.train,
        SplitArg::Val => &data.val,
    };
    if s.is_empty() {
        return Err(Error::Data("selected split is empty".into()));
    }
    Ok(s)
}

fn gen_data(config: Option<&Path>, out: &Path, count: u64) -> Result<()> {
    let cfg = load_config(config)?;
    let data = Dataset::generate(&cfg.scene(), count, cfg.val_count)?;
    data.save(out)?;
    println!("wrote {} train and {} val scenes to {}", data.train.len(), data.val.len(), out.display());
    Ok(())
}

fn run_train<T: Scalar>(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let data = load_data(data, cfg)?;
    let model = AdSamModel::<T>::new(cfg.model())?;
    let outputs = RunOutputs {
        dir: out.to_path_buf(),
        config_echo: cfg.to_toml(),
    };
    let outcome = train(&model, &cfg.train(), &data, Some(&outputs), |r| {
        println!(
            "epoch {:>3}  train {:.4}  val {:.4}  miou {:.4}  {:.1}s",
            r.epoch, r.train_loss, r.val_loss, r.val_miou, r.seconds
        )
    })?;
    if let Some(b) = outcome.log.best() {
        println!("best val miou {:.4} at epoch {}", b.val_miou, b.epoch);
    }
    Ok(())
}

fn run_eval<T: Scalar>(ckpt: &Checkpoint, data: &Path, report: &Path, split: SplitArg, policy: UndefinedPolicy) -> Result<()> {
    let (cfg, model) = model_from_checkpoint::<T>(ckpt)?;
    let data = load_data(data, &cfg)?;
    let r = evaluate(&model, pick(&data, split)?, cfg.eval_batch_size, &cfg.train().loss, policy)?;
    write_text(report, &r.report.to_csv())?;
    print!("{}", r.report.to_csv());
    Ok(())
}

fn run_sweep<T: Scalar>(cfg: &RunConfig, sizes: &[usize], data: &Path, out: &Path) -> Result<()> {
    if sizes.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config("sweep sizes must be ascending".into()));
    }
    let data = load_data(data, cfg)?;
    sensitivity_sweep::<T>(cfg, &data, sizes, Some(out), |r, _| {
        println!("size {:>6}  miou {:.4}  {:.1}s  val {}", r.size, r.miou, r.seconds, r.val_hash)
    })?;
    Ok(())
}

fn run_retention<T: Scalar>(ckpt: &Checkpoint, source: &Path, target: &Path, split: SplitArg, report: Option<&Path>) -> Result<()> {
    let (cfg, model) = model_from_checkpoint::<T>(ckpt)?;
    let (s, t) = (load_data(source, &cfg)?, load_data(target, &cfg)?);
    let r = retention_run(&model, pick(&s, split)?, pick(&t, split)?, cfg.eval_batch_size, &cfg.train().loss)?;
    if let Some(p) = report {
        write_text(p, &r.to_csv())?;
    }
    print!("{}", r.to_csv());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, count } => gen_data(config.as_deref(), &out, count),
        Command::Train { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            match cfg.precision {
                Precision::F32 => run_train::<f32>(&cfg, &data, &out),
                Precision::F64 => run_train::<f64>(&cfg, &data, &out),
            }
        }
        Command::Eval {
            checkpoint,
            data,
            report,
            split,
            exclude_undefined,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let policy = if exclude_undefined {
                UndefinedPolicy::Exclude
            } else {
                UndefinedPolicy::CountAsZero
            };
            match RunConfig::from_toml(&ckpt.config)?.precision {
                Precision::F32 => run_eval::<f32>(&ckpt, &data, &report, split, policy),
                Precision::F64 => run_eval::<f64>(&ckpt, &data, &report, split, policy),
            }
        }
        Command::Sweep { sizes, config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            match cfg.precision {
                Precision::F32 => run_sweep::<f32>(&cfg, &sizes, &data, &out),
                Precision::F64 => run_sweep::<f64>(&cfg, &sizes, &data, &out),
            }
        }
        Command::Retention {
            checkpoint,
            source,
            target,
            split,
            report,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            match RunConfig::from_toml(&ckpt.config)?.precision {
                Precision::F32 => run_retention::<f32>(&ckpt, &source, &target, split, report.as_deref()),
                Precision::F64 => run_retention::<f64>(&ckpt, &source, &target, split, report.as_deref()),
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
