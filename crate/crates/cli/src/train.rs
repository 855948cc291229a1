//! Two-stage training driver with per-epoch logging and checkpoints.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use dcrf::data::{shuffled_batches, write_atomic, Manifest, Sample, Split};
use dcrf::learning::{predict, TrainConfig};
use dcrf::{
    accumulate, argmax_labeling, loss_nll, mean_iou, train_step, AnyUnary, ConfusionMatrix,
    OptimState, PairwiseModel, UnaryProvider,
};

use crate::checkpoint::{Checkpoint, Stage};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
const LOG_HEADER: &str = "epoch,train_loss,val_loss,val_miou,skipped_steps";

pub fn log_file_name(stage: Stage) -> String {
    format!("log_{}.csv", stage.name())
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub train: PathBuf,
    pub val: Option<PathBuf>,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub stage: Stage,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_miou: Option<f64>,
    pub skipped_steps: usize,
}

impl EpochRecord {
    fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.10}"));
        format!(
            "{},{:.10},{},{},{}",
            self.epoch,
            self.train_loss,
            opt(self.val_loss),
            opt(self.val_miou),
            self.skipped_steps
        )
    }
}

/// Loss and mean IoU of the model on a sample set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub miou: Option<f64>,
}

pub fn evaluate(
    samples: &[Sample],
    unary: &AnyUnary,
    model: &PairwiseModel,
    cfg: &TrainConfig,
    labels: usize,
) -> CliResult<(Evaluation, ConfusionMatrix)> {
    let per_sample: Vec<dcrf::Result<(f64, ConfusionMatrix)>> = samples
        .par_iter()
        .map(|s| {
            let q = predict(&s.image, unary, model, cfg)?;
            let loss = loss_nll(&q, &s.labels)?.value;
            let mut cm = ConfusionMatrix::new(labels);
            accumulate(&mut cm, &s.labels, &argmax_labeling(&q))?;
            Ok((loss, cm))
        })
        .collect();
    let mut cm = ConfusionMatrix::new(labels);
    let mut loss = 0.0;
    for r in per_sample {
        let (l, c) = r?;
        loss += l;
        cm.merge(&c)?;
    }
    let n = samples.len().max(1) as f64;
    Ok((
        Evaluation {
            loss: loss / n,
            miou: mean_iou(&cm),
        },
        cm,
    ))
}

fn load_split(path: &Path, split: Split) -> CliResult<Vec<Sample>> {
    let m = Manifest::load(path, split)?;
    if m.is_empty() {
        return Err(dcrf::Error::Invalid(format!("{} lists no samples", path.display())).into());
    }
    Ok(m.load_all()?)
}

/// Copies parameters and velocities from a checkpoint into a model built
/// from the run configuration. CRF parameters of a unary-stage checkpoint
/// were never trained, so a joint run keeps the configured initial values.
fn resume_into(
    ckpt: &Checkpoint,
    stage: Stage,
    unary: &mut AnyUnary,
    model: &mut PairwiseModel,
    optimizer: &mut OptimState,
    path: &Path,
) -> CliResult<()> {
    let err = |e: dcrf::Error| CliError::Checkpoint {
        path: path.display().to_string(),
        reason: format!("does not match the run configuration: {e}"),
    };
    unary.set_params(&ckpt.unary.params()).map_err(err)?;
    if !(ckpt.stage == Stage::Unary && stage == Stage::Joint) {
        model.set_params(&ckpt.model.params()).map_err(err)?;
    }
    for (name, v) in ckpt.optimizer.velocities() {
        optimizer.set_velocity(name.clone(), v.clone());
    }
    Ok(())
}

fn read_log_prefix(path: &Path, upto: u64) -> Vec<String> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines()
        .skip(1)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|e| e.parse::<u64>().ok())
                .is_some_and(|e| e <= upto)
        })
        .map(str::to_string)
        .collect()
}

fn write_log(path: &Path, rows: &[String]) -> CliResult<()> {
    let mut text = String::from(LOG_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    Ok(write_atomic(path, text.as_bytes())?)
}

/// Runs the configured number of epochs of one stage.
pub fn cmd_train(args: &TrainArgs) -> CliResult<Vec<EpochRecord>> {
    let cfg = RunConfig::load(&args.config)?;
    let train = load_split(&args.train, Split::Train)?;
    let val = match &args.val {
        Some(p) => Some(load_split(p, Split::Val)?),
        None => None,
    };
    std::fs::create_dir_all(&args.out).map_err(|e| dcrf::Error::Io {
        path: args.out.clone(),
        source: e,
    })?;

    let mut unary = cfg.build_unary();
    let mut model = cfg.build_model()?;
    let mut optimizer = OptimState::new(cfg.optim_config())?;
    let (mut epoch, mut step, mut best) = (0u64, 0u64, f64::NAN);
    match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            resume_into(&ckpt, args.stage, &mut unary, &mut model, &mut optimizer, path)?;
            step = ckpt.step;
            if ckpt.stage == args.stage {
                epoch = ckpt.epoch;
                best = ckpt.best_val_miou;
            }
        }
        None => {
            if let AnyUnary::Linear(lin) = &mut unary {
                lin.fit_standardization(train.iter().map(|s| &s.image))?;
            }
        }
    }

    let snapshot = |unary: &AnyUnary, model: &PairwiseModel, opt: &OptimState, epoch, step, best| {
        Checkpoint {
            config: cfg.clone(),
            stage: args.stage,
            epoch,
            step,
            best_val_miou: best,
            unary: unary.clone(),
            model: model.clone(),
            optimizer: opt.clone(),
        }
    };
    let last_path = args.out.join(LAST_CHECKPOINT);
    let best_path = args.out.join(BEST_CHECKPOINT);
    let total = cfg.training.epochs as u64;
    if epoch >= total {
        snapshot(&unary, &model, &optimizer, epoch, step, best).save(&last_path)?;
        return Ok(Vec::new());
    }

    let log_path = args.out.join(log_file_name(args.stage));
    let mut log_rows = if args.resume.is_some() && epoch > 0 {
        read_log_prefix(&log_path, epoch)
    } else {
        Vec::new()
    };
    let train_cfg = cfg.train_config(args.stage == Stage::Joint);
    let mut records = Vec::new();
    while epoch < total {
        let started = Instant::now();
        let batches = shuffled_batches(train.len(), cfg.training.batch_size, cfg.training.seed, epoch)?;
        let mut loss_sum = 0.0;
        let mut counted = 0usize;
        let mut skipped = 0usize;
        for batch in batches {
            let samples: Vec<Sample> = batch.iter().map(|&k| train[k].clone()).collect();
            let report = train_step(&samples, &mut unary, &mut model, &mut optimizer, &train_cfg)?;
            step += 1;
            match report.skipped {
                Some(reason) => {
                    skipped += 1;
                    eprintln!("epoch {}: skipped update: {reason}", epoch + 1);
                }
                None => {
                    loss_sum += report.loss * samples.len() as f64;
                    counted += samples.len();
                }
            }
        }
        epoch += 1;
        let train_loss = if counted > 0 { loss_sum / counted as f64 } else { f64::NAN };
        let eval = match &val {
            Some(v) => Some(evaluate(v, &unary, &model, &train_cfg, cfg.labels)?.0),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss: eval.map(|e| e.loss),
            val_miou: eval.and_then(|e| e.miou),
            skipped_steps: skipped,
        };
        let improved = match record.val_miou {
            Some(m) => best.is_nan() || m > best,
            None => true,
        };
        if improved {
            best = record.val_miou.unwrap_or(f64::NAN);
        }
        let ckpt = snapshot(&unary, &model, &optimizer, epoch, step, best);
        ckpt.save(&last_path)?;
        if improved {
            ckpt.save(&best_path)?;
        }
        log_rows.push(record.csv());
        write_log(&log_path, &log_rows)?;
        eprintln!(
            "[{}] epoch {epoch}/{total}: train loss {:.5}, val loss {}, val mIoU {} ({:.1}s)",
            args.stage.name(),
            record.train_loss,
            record.val_loss.map_or("-".into(), |v| format!("{v:.5}")),
            record.val_miou.map_or("-".into(), |v| format!("{v:.4}")),
            started.elapsed().as_secs_f64()
        );
        records.push(record);
    }
    Ok(records)
}
