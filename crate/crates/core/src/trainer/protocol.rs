//! The two-stage protocol.
//!
//! Stage 1 trains on the training split, and after every epoch searches the
//! calibration grid on the validation samples. The epoch with the best
//! validation HM (earliest on ties) fixes the epoch count and gamma. Stage 2
//! trains again on train and validation samples for that many epochs, with
//! the learning rates stage 1 used, and the result is scored on test.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ProtocolConfig, Stage2Init, Stage2Lr};
use crate::data::{batches, epoch_rng, load_archive_with, stage_view, FeatureArchive, LoadOptions, Stage, StageView};
use crate::error::{Error, Result};
use crate::evalkit::{build_task, evaluate_gzsl, search_calibration, EvalReport};
use crate::model::{backward, forward_batch, save_checkpoint, BatchInput, ModelParams};
use crate::nn::{Adam, Matrix, Mode, PlateauScheduler};
use crate::objective::{loss_total, LossBreakdown};

pub const REPORT_FILE: &str = "report.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const MODEL_FILE: &str = "model.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const BEST_STAGE1_FILE: &str = "stage1_best.ckpt";

/// Where a group of archive rows was read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Stage1Train,
    Stage1Eval,
    Stage2Train,
    FinalEval,
}

/// Hooks called while a protocol runs.
pub trait Observer {
    /// Feature rows of `samples` are about to be read for `phase`.
    fn samples_read(&mut self, _phase: Phase, _samples: &[usize]) {}
    fn epoch_done(&mut self, _record: &EpochRecord) {}
}

/// Ignores every event.
pub struct Quiet;

impl Observer for Quiet {}

/// Records every sample read, in order.
#[derive(Debug, Default, Clone)]
pub struct AccessLog {
    pub reads: Vec<(Phase, Vec<usize>)>,
}

impl AccessLog {
    pub fn samples_in(&self, phase: Phase) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .reads
            .iter()
            .filter(|(p, _)| *p == phase)
            .flat_map(|(_, s)| s.iter().copied())
            .collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

impl Observer for AccessLog {
    fn samples_read(&mut self, phase: Phase, samples: &[usize]) {
        self.reads.push((phase, samples.to_vec()));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub hm: f64,
    pub gamma: f64,
    pub acc_s: f64,
    pub acc_u: f64,
    pub acc_zsl: f64,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub batches: usize,
    /// Mean over the epoch's batches.
    pub loss: LossBreakdown,
    pub validation: Option<ValidationRecord>,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    /// 1-based epoch with the best validation HM.
    pub best_epoch: usize,
    pub best_gamma: f64,
    pub best_val_hm: f64,
    /// Learning rate used in each epoch.
    pub lr_trace: Vec<f64>,
    pub log: Vec<EpochRecord>,
    pub best_params: ModelParams<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Summary {
    pub best_epoch: usize,
    pub best_gamma: f64,
    pub best_val_hm: f64,
    pub lr_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub schema_version: u32,
    pub test: EvalReport,
    pub stage1: Stage1Summary,
    pub stage2_epochs: usize,
    pub stage1_train_samples: usize,
    pub stage2_train_samples: usize,
    pub config: ProtocolConfig,
}

/// Training samples with their class table. Labels are mapped to rows of
/// the table, which holds the stage's seen classes only.
struct TrainSet<'a> {
    archive: &'a FeatureArchive,
    samples: Vec<usize>,
    class_row: Vec<Option<usize>>,
    clip: Matrix<f32>,
    clap: Matrix<f32>,
    phase: Phase,
    /// Keeps shuffle and dropout streams of the two stages apart.
    stream_base: u64,
}

impl<'a> TrainSet<'a> {
    fn new(archive: &'a FeatureArchive, view: &StageView) -> Result<Self> {
        if view.train_samples.len() < crate::data::MIN_BATCH {
            return Err(Error::Protocol(format!(
                "stage {:?} has {} training samples",
                view.stage,
                view.train_samples.len()
            )));
        }
        let mut class_row = vec![None; archive.num_classes()];
        for (row, &c) in view.seen_classes.iter().enumerate() {
            class_row[c] = Some(row);
        }
        let (phase, stream_base) = match view.stage {
            Stage::One => (Phase::Stage1Train, 0),
            Stage::Two => (Phase::Stage2Train, 1 << 32),
        };
        Ok(Self {
            archive,
            samples: view.train_samples.clone(),
            class_row,
            clip: archive.text_clip.gather_rows(&view.seen_classes),
            clap: archive.text_clap.gather_rows(&view.seen_classes),
            phase,
            stream_base,
        })
    }
}

fn check_archive(config: &ProtocolConfig, archive: &FeatureArchive) -> Result<()> {
    let m = &archive.manifest;
    if (m.d_in_a, m.d_in_v) != (config.dims.d_in_a, config.dims.d_in_v) {
        return Err(Error::Config(format!(
            "archive has d_in_a={}, d_in_v={} but the model expects {}, {}",
            m.d_in_a, m.d_in_v, config.dims.d_in_a, config.dims.d_in_v
        )));
    }
    Ok(())
}

fn run_epoch(
    params: &mut ModelParams<f32>,
    adam: &mut Adam<f32>,
    set: &TrainSet<'_>,
    config: &ProtocolConfig,
    epoch: usize,
    observer: &mut dyn Observer,
) -> Result<(LossBreakdown, usize)> {
    let stream = set.stream_base + epoch as u64;
    let order = batches(&set.samples, config.batch_size, config.seeds.shuffle, stream)?;
    let mut dropout = epoch_rng(config.seeds.dropout, stream);
    let options = config.loss_options();
    let mut sum = LossBreakdown::default();
    for (b, batch) in order.iter().enumerate() {
        observer.samples_read(set.phase, batch);
        let labels = batch
            .iter()
            .map(|&i| {
                let class = set.archive.labels[i] as usize;
                set.class_row[class].ok_or_else(|| {
                    Error::Protocol(format!("training sample {i} has class {class}, which is not seen in this stage"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let visual = set.archive.visual.gather_rows(batch);
        let audio = set.archive.audio.gather_rows(batch);
        let input = BatchInput {
            visual: &visual,
            audio: &audio,
            labels: &labels,
            class_clip: &set.clip,
            class_clap: &set.clap,
        };
        let (trace, cache) = forward_batch(input, params, Mode::Train, &mut dropout)?;
        let (loss, upstream) = loss_total(&trace, &options)?;
        if !loss.l_total.is_finite() {
            return Err(Error::NonFinite {
                what: "loss".into(),
                epoch,
                batch: b + 1,
            });
        }
        let grads = backward(&cache, params, &upstream)?;
        adam.step(&mut params.slots(&grads)).map_err(|e| match e {
            Error::NonFinite { what, .. } => Error::NonFinite {
                what,
                epoch,
                batch: b + 1,
            },
            other => other,
        })?;
        params.absorb_running_stats(&cache);
        sum.l_ce += loss.l_ce;
        sum.l_rec += loss.l_rec;
        sum.l_reg += loss.l_reg;
        sum.l_total += loss.l_total;
    }
    let n = order.len().max(1) as f64;
    let mean = LossBreakdown {
        l_ce: sum.l_ce / n,
        l_rec: sum.l_rec / n,
        l_reg: sum.l_reg / n,
        l_total: sum.l_total / n,
    };
    Ok((mean, order.len()))
}

fn stage1_checkpoint(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("stage1_epoch_{epoch:03}.ckpt"))
}

/// Trains on the stage-1 view and selects epoch and gamma on validation.
///
/// With `checkpoint_dir`, every epoch's weights are written there and, once
/// the best epoch is known, all but that one are deleted and it is renamed
/// to [`BEST_STAGE1_FILE`].
pub fn train_stage1(
    config: &ProtocolConfig,
    archive: &FeatureArchive,
    checkpoint_dir: Option<&Path>,
    observer: &mut dyn Observer,
) -> Result<StageOutcome> {
    config.validate()?;
    check_archive(config, archive)?;
    let view = stage_view(archive, Stage::One);
    let set = TrainSet::new(archive, &view)?;
    let grid = config.calibration.points()?;
    let mut params = ModelParams::<f32>::init(config.dims, config.switches, config.seeds.init)?;
    let mut adam = Adam::new(config.optimizer);
    let mut scheduler = PlateauScheduler::new(config.optimizer.lr, config.scheduler.patience, config.scheduler.factor);
    if let Some(dir) = checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut lr_trace = Vec::new();
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, f64, ModelParams<f32>)> = None;
    for epoch in 1..=config.epochs_stage1 {
        let lr = scheduler.lr();
        adam.set_lr(lr);
        lr_trace.push(lr);
        let (loss, n_batches) = run_epoch(&mut params, &mut adam, &set, config, epoch, observer)?;

        observer.samples_read(Phase::Stage1Eval, &view.eval_samples());
        let task = build_task(&params, archive, &view)?;
        let (gamma, hm) = search_calibration(&task, &grid)?;
        let report = task.report(gamma)?;
        scheduler.observe(hm);
        if let Some(dir) = checkpoint_dir {
            save_checkpoint(&params, stage1_checkpoint(dir, epoch))?;
        }
        if best.as_ref().is_none_or(|b| hm > b.2) {
            best = Some((epoch, gamma, hm, params.clone()));
        }
        let record = EpochRecord {
            stage: Stage::One,
            epoch,
            lr,
            batches: n_batches,
            loss,
            validation: Some(ValidationRecord {
                hm,
                gamma,
                acc_s: report.acc_s,
                acc_u: report.acc_u,
                acc_zsl: report.acc_zsl,
            }),
        };
        observer.epoch_done(&record);
        log.push(record);
    }
    let (best_epoch, best_gamma, best_val_hm, best_params) = best.expect("at least one epoch");
    if let Some(dir) = checkpoint_dir {
        for epoch in 1..=config.epochs_stage1 {
            let path = stage1_checkpoint(dir, epoch);
            if epoch == best_epoch {
                let to = dir.join(BEST_STAGE1_FILE);
                fs::rename(&path, &to).map_err(|e| Error::io(&path, e))?;
            } else {
                fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
    }
    Ok(StageOutcome {
        best_epoch,
        best_gamma,
        best_val_hm,
        lr_trace,
        log,
        best_params,
    })
}

/// Trains on the stage-2 view for `outcome.best_epoch` epochs.
pub fn train_stage2(
    config: &ProtocolConfig,
    archive: &FeatureArchive,
    outcome: &StageOutcome,
    observer: &mut dyn Observer,
) -> Result<(ModelParams<f32>, Vec<EpochRecord>)> {
    config.validate()?;
    check_archive(config, archive)?;
    if outcome.best_epoch == 0 || outcome.best_epoch > outcome.lr_trace.len() {
        return Err(Error::Protocol(format!(
            "stage-1 outcome selects epoch {} of {}",
            outcome.best_epoch,
            outcome.lr_trace.len()
        )));
    }
    let view = stage_view(archive, Stage::Two);
    let set = TrainSet::new(archive, &view)?;
    let mut params = match config.stage2.init {
        Stage2Init::Reinitialize => ModelParams::<f32>::init(config.dims, config.switches, config.seeds.init)?,
        Stage2Init::FromStage1 => outcome.best_params.clone(),
    };
    let mut adam = Adam::new(config.optimizer);
    let mut log = Vec::new();
    for epoch in 1..=outcome.best_epoch {
        let lr = match config.stage2.lr {
            Stage2Lr::Replay => outcome.lr_trace[epoch - 1],
            Stage2Lr::Fixed => config.optimizer.lr,
        };
        adam.set_lr(lr);
        let (loss, n_batches) = run_epoch(&mut params, &mut adam, &set, config, epoch, observer)?;
        let record = EpochRecord {
            stage: Stage::Two,
            epoch,
            lr,
            batches: n_batches,
            loss,
            validation: None,
        };
        observer.epoch_done(&record);
        log.push(record);
    }
    Ok((params, log))
}

/// Loads the archive, runs both stages and scores the stage-2 model on test.
///
/// Writes into `out_dir`: the training log (one JSON object per epoch), the
/// final checkpoint, the best stage-1 checkpoint, and the report. The report
/// is written last, atomically, so a failed run never leaves one behind.
pub fn run_protocol(config: &ProtocolConfig, out_dir: &Path, observer: &mut dyn Observer) -> Result<ProtocolReport> {
    config.validate()?;
    let archive = load_archive_with(
        &config.archive,
        LoadOptions {
            renormalize: config.renormalize_features,
        },
    )?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let report_path = out_dir.join(REPORT_FILE);
    if report_path.exists() {
        fs::remove_file(&report_path).map_err(|e| Error::io(&report_path, e))?;
    }
    let log_path = out_dir.join(LOG_FILE);
    let log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut logger = JsonLines {
        inner: observer,
        file: std::io::BufWriter::new(log_file),
        path: log_path.clone(),
        error: None,
    };

    let outcome = train_stage1(config, &archive, Some(&out_dir.join(CHECKPOINT_DIR)), &mut logger)?;
    let (params, _) = train_stage2(config, &archive, &outcome, &mut logger)?;
    logger.finish()?;
    save_checkpoint(&params, out_dir.join(MODEL_FILE))?;

    let view = stage_view(&archive, Stage::Two);
    observer_of(&mut logger).samples_read(Phase::FinalEval, &view.eval_samples());
    let test = evaluate_gzsl(&params, &archive, &view, outcome.best_gamma)?;
    let report = ProtocolReport {
        schema_version: super::config::SCHEMA_VERSION,
        test,
        stage1: Stage1Summary {
            best_epoch: outcome.best_epoch,
            best_gamma: outcome.best_gamma,
            best_val_hm: outcome.best_val_hm,
            lr_trace: outcome.lr_trace.clone(),
        },
        stage2_epochs: outcome.best_epoch,
        stage1_train_samples: stage_view(&archive, Stage::One).train_samples.len(),
        stage2_train_samples: view.train_samples.len(),
        config: config.clone(),
    };
    let text = serde_json::to_string_pretty(&report)? + "\n";
    write_atomic(&report_path, text.as_bytes())?;
    Ok(report)
}

fn observer_of<'a>(logger: &'a mut JsonLines<'_>) -> &'a mut dyn Observer {
    &mut *logger.inner
}

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Forwards events and appends each epoch record to a JSON-lines file.
struct JsonLines<'a> {
    inner: &'a mut dyn Observer,
    file: std::io::BufWriter<fs::File>,
    path: PathBuf,
    error: Option<std::io::Error>,
}

impl JsonLines<'_> {
    fn finish(&mut self) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(Error::io(&self.path, e));
        }
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl Observer for JsonLines<'_> {
    fn samples_read(&mut self, phase: Phase, samples: &[usize]) {
        self.inner.samples_read(phase, samples);
    }

    fn epoch_done(&mut self, record: &EpochRecord) {
        if self.error.is_none() {
            let line = serde_json::to_string(record).expect("record serializes");
            if let Err(e) = writeln!(self.file, "{line}") {
                self.error = Some(e);
            }
        }
        self.inner.epoch_done(record);
    }
}
