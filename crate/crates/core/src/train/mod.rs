//! Training, evaluation, dataset-size sweeps and domain retention.

mod config;
mod optim;

use std::collections::hash_map::DefaultHasher;
use std::fs::{self, File};
use std::hash::{Hash, Hasher};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{Precision, RunConfig, TrainConfig, RNG_NAME};
pub use optim::{check_group_coverage, cosine_lr, AdamW, AdamWConfig};

use crate::data::{class_names, Batch, Dataset, SceneSample};
use crate::error::{Error, Result};
use crate::losses::{composite_loss, LossConfig};
use crate::metrics::{argmax_classes, retention, ClassReport, ConfusionMatrix, UndefinedPolicy};
use crate::model::{AdSamModel, Checkpoint};
use crate::tensor::{no_grad, Scalar};

pub const RUNLOG_FILE: &str = "runlog.csv";
pub const BEST_CHECKPOINT: &str = "best.adsm";
pub const LAST_CHECKPOINT: &str = "last.adsm";
pub const CONFIG_ECHO: &str = "config.toml";
pub const REPORT_FILE: &str = "report.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub focal: f64,
    pub dice: f64,
    pub lovasz: f64,
    pub surface: f64,
    pub val_loss: f64,
    pub val_miou: f64,
    pub seconds: f64,
}

impl EpochRecord {
    /// Equality on everything except wall-clock time.
    pub fn same_outcome(&self, other: &EpochRecord) -> bool {
        let strip = |r: &EpochRecord| EpochRecord { seconds: 0.0, ..r.clone() };
        strip(self) == strip(other)
    }
}

/// Per-epoch training history.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub epochs: Vec<EpochRecord>,
}

impl RunLog {
    pub fn same_outcome(&self, other: &RunLog) -> bool {
        self.epochs.len() == other.epochs.len() && self.epochs.iter().zip(&other.epochs).all(|(a, b)| a.same_outcome(b))
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs
            .iter()
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.val_miou >= r.val_miou => Some(b),
                _ => Some(r),
            })
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.epochs {
            w.serialize(r).expect("writing to memory");
        }
        String::from_utf8(w.into_inner().expect("writing to memory")).expect("UTF-8")
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let epochs = r
            .deserialize()
            .collect::<std::result::Result<Vec<EpochRecord>, _>>()
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        Ok(RunLog { epochs })
    }
}

/// Appends one CSV row per epoch and flushes it, so an aborted run keeps
/// every completed epoch.
struct RunLogWriter {
    path: PathBuf,
    inner: csv::Writer<BufWriter<File>>,
}

impl RunLogWriter {
    fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(RunLogWriter {
            inner: csv::Writer::from_writer(BufWriter::new(file)),
            path,
        })
    }

    fn push(&mut self, r: &EpochRecord) -> Result<()> {
        self.inner
            .serialize(r)
            .map_err(|e| Error::data(format!("{}: {e}", self.path.display())))?;
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub confusion: ConfusionMatrix,
    pub report: ClassReport,
    /// Mean composite loss over batches.
    pub loss: f64,
}

/// Evaluation-mode pass over `samples` without gradient recording.
pub fn evaluate<T: Scalar>(
    model: &AdSamModel<T>,
    samples: &[SceneSample],
    batch_size: usize,
    loss_cfg: &LossConfig,
    policy: UndefinedPolicy,
) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::data("evaluation set is empty"));
    }
    let c = model.config.num_classes;
    no_grad(|| {
        let mut cm = ConfusionMatrix::new(c);
        let mut loss = 0.0;
        let mut batches = 0;
        for chunk in samples.chunks(batch_size.max(1)) {
            let refs: Vec<&SceneSample> = chunk.iter().collect();
            let batch = Batch::<T>::from_samples(&refs)?;
            let logits = model.forward(&batch.images, &batch.ids, None)?;
            cm.accumulate(&argmax_classes(&logits)?, &batch.labels, loss_cfg.ignore)?;
            match composite_loss(&logits, &batch.labels, loss_cfg) {
                Ok(l) => {
                    loss += l.total.item().f64();
                    batches += 1;
                }
                // A batch whose pixels are all ignored contributes no loss.
                Err(Error::Invalid(_)) => {}
                Err(e) => return Err(e),
            }
        }
        let report = ClassReport::from_confusion(&cm, &class_names(c)?, policy)?;
        Ok(EvalResult {
            confusion: cm,
            report,
            loss: if batches > 0 { loss / batches as f64 } else { f64::NAN },
        })
    })
}

/// Where a training run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunOutputs {
    pub dir: PathBuf,
    /// Written into every checkpoint so it can rebuild its model.
    pub config_echo: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: RunLog,
    /// Evaluation of the final weights on the validation set.
    pub final_eval: EvalResult,
}

/// Trains `model` in place on `data.train`, validating on `data.val`
/// after every epoch.
///
/// The learning rate follows the cosine schedule per epoch. Shuffling
/// and dropout share one generator seeded from `cfg.seed`. A non-finite
/// loss aborts with a numerical error naming the batch.
pub fn train<T: Scalar>(
    model: &AdSamModel<T>,
    cfg: &TrainConfig,
    data: &Dataset,
    outputs: Option<&RunOutputs>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::data("training needs non-empty train and val splits"));
    }
    let mc = &model.config;
    data.validate(mc.input_height, mc.input_width, mc.num_classes)?;
    let mut opt = AdamW::new(
        &model.store,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            betas: cfg.betas,
            eps: cfg.eps,
            backbone_mult: cfg.backbone_lr_mult,
            head_mult: cfg.head_lr_mult,
        },
    )?;
    let mut writer = match outputs {
        Some(o) => {
            fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
            let echo = o.dir.join(CONFIG_ECHO);
            fs::write(&echo, &o.config_echo).map_err(|e| Error::io(&echo, e))?;
            Some(RunLogWriter::create(o.dir.join(RUNLOG_FILE))?)
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut log = RunLog::default();
    let mut best = f64::NEG_INFINITY;
    let mut last_eval = None;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr)?;
        order.shuffle(&mut rng);
        let mut sums = [0.0; 5];
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&SceneSample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let batch = Batch::<T>::from_samples(&refs)?;
            let logits = model.forward(&batch.images, &batch.ids, Some(&mut rng))?;
            let bundle = composite_loss(&logits, &batch.labels, &cfg.loss)?;
            let total = bundle.total.item().f64();
            if !total.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss {total} in epoch {} batch {batches} ({})",
                    epoch + 1,
                    batch.ids.join(",")
                )));
            }
            let grads = bundle.total.backward()?;
            opt.step(&model.store, &grads, lr)?;
            let terms = bundle.terms();
            sums[0] += total;
            for k in 0..4 {
                sums[k + 1] += terms[k];
            }
            batches += 1;
        }
        let eval = evaluate(model, &data.val, cfg.eval_batch_size, &cfg.loss, UndefinedPolicy::CountAsZero)?;
        let n = batches as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: sums[0] / n,
            focal: sums[1] / n,
            dice: sums[2] / n,
            lovasz: sums[3] / n,
            surface: sums[4] / n,
            val_loss: eval.loss,
            val_miou: eval.report.miou,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(w) = writer.as_mut() {
            w.push(&record)?;
        }
        if let Some(o) = outputs {
            if record.val_miou > best {
                model.checkpoint(o.config_echo.clone()).save(&o.dir.join(BEST_CHECKPOINT))?;
            }
        }
        best = best.max(record.val_miou);
        on_epoch(&record);
        log.epochs.push(record);
        last_eval = Some(eval);
    }
    let final_eval = last_eval.expect("at least one epoch");
    if let Some(o) = outputs {
        model.checkpoint(o.config_echo.clone()).save(&o.dir.join(LAST_CHECKPOINT))?;
        let report = o.dir.join(REPORT_FILE);
        let file = File::create(&report).map_err(|e| Error::io(&report, e))?;
        final_eval.report.write_csv(file)?;
    }
    Ok(TrainOutcome { log, final_eval })
}

/// Rebuilds the model a checkpoint was saved from and loads its weights.
pub fn model_from_checkpoint<T: Scalar>(ckpt: &Checkpoint) -> Result<(RunConfig, AdSamModel<T>)> {
    let cfg = RunConfig::from_toml(&ckpt.config)?;
    let model = AdSamModel::new(cfg.model())?;
    model.load_weights(ckpt)?;
    Ok((cfg, model))
}

/// Order-sensitive fingerprint of sample ids and labels.
pub fn samples_hash(samples: &[SceneSample]) -> u64 {
    let mut h = DefaultHasher::new();
    for s in samples {
        s.id.hash(&mut h);
        s.labels.hash(&mut h);
    }
    h.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub size: usize,
    pub miou: f64,
    pub seconds: f64,
    pub val_hash: String,
}

/// Trains a fresh model on the first `size` training samples for every
/// size and reports the final validation mIoU. Every run sees the same
/// validation set.
pub fn sensitivity_sweep<T: Scalar>(
    run: &RunConfig,
    data: &Dataset,
    sizes: &[usize],
    out_dir: Option<&Path>,
    mut on_run: impl FnMut(&SweepRow, &TrainOutcome),
) -> Result<Vec<SweepRow>> {
    if let Some(&s) = sizes.iter().find(|&&s| s == 0 || s > data.train.len()) {
        return Err(Error::config(format!(
            "sweep size {s} outside 1..={} available training samples",
            data.train.len()
        )));
    }
    let val_hash = format!("{:016x}", samples_hash(&data.val));
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let started = Instant::now();
        let subset = Dataset {
            train: data.train[..size].to_vec(),
            val: data.val.clone(),
        };
        let model = AdSamModel::<T>::new(run.model())?;
        let outputs = out_dir.map(|d| RunOutputs {
            dir: d.join(format!("size{size}")),
            config_echo: run.to_toml(),
        });
        let outcome = train(&model, &run.train(), &subset, outputs.as_ref(), |_| {})?;
        let row = SweepRow {
            size,
            miou: outcome.final_eval.report.miou,
            seconds: started.elapsed().as_secs_f64(),
            val_hash: val_hash.clone(),
        };
        on_run(&row, &outcome);
        rows.push(row);
    }
    if let Some(d) = out_dir {
        write_sweep_csv(&d.join("sweep.csv"), &rows)?;
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct RetentionResult {
    pub source: EvalResult,
    pub target: EvalResult,
    pub retention: f64,
}

impl RetentionResult {
    pub fn to_csv(&self) -> String {
        format!(
            "split,miou\nsource,{:.4}\ntarget,{:.4}\nretention,{:.5}\n",
            self.source.report.miou, self.target.report.miou, self.retention
        )
    }
}

/// Scores one model on a source and a target set and reports the ratio of
/// target to source mIoU.
pub fn retention_run<T: Scalar>(
    model: &AdSamModel<T>,
    source: &[SceneSample],
    target: &[SceneSample],
    batch_size: usize,
    loss_cfg: &LossConfig,
) -> Result<RetentionResult> {
    let s = evaluate(model, source, batch_size, loss_cfg, UndefinedPolicy::CountAsZero)?;
    let t = evaluate(model, target, batch_size, loss_cfg, UndefinedPolicy::CountAsZero)?;
    let r = retention(t.report.miou, s.report.miou)?;
    Ok(RetentionResult {
        source: s,
        target: t,
        retention: r,
    })
}

/// Writes `text` after creating the parent directory.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
