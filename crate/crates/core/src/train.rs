//! Training loop, evaluation, run artifacts and multi-run comparison.
//!
//! A run directory holds `config.txt` (canonical config), `log.csv` (one row
//! per logged step plus one per evaluation), `checkpoint.bin` and, once
//! training finishes, `report.csv` with the final validation metrics.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, RunState};
use crate::config::{ConfigError, TrainConfig};
use crate::data::{load_batch, make_split, DataError, Split};
use crate::model::{build_model, Mode, ModelError, MtanModel};
use crate::optim::{Adam, OptimError};
use crate::tasks::{task_losses, total_loss, MetricAccumulator, MetricReport, TaskKind, TaskSpec};
use crate::tensor::TensorError;
use crate::weighting::{current_weights, DwaState, WeightingError, WeightingScheme};

pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REPORT_FILE: &str = "report.csv";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Weighting(#[from] WeightingError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("non-finite loss {value} at step {step}; {}", match .checkpoint {
        Some(p) => format!("last good checkpoint kept at {}", p.display()),
        None => "no checkpoint was written before the failure".to_owned(),
    })]
    NonFiniteLoss {
        step: u64,
        value: f64,
        checkpoint: Option<PathBuf>,
    },
}

type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Task loss as seen by DWA. The normals loss lies in [-1, 1], so it is lifted
/// into [0, 2] to keep descending-rate ratios positive.
pub fn rate_loss(spec: &TaskSpec, loss: f64) -> f64 {
    match spec.kind {
        TaskKind::Normals => loss + 1.0,
        _ => loss,
    }
}

/// Numbers produced by one optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based.
    pub step: u64,
    pub lr: f64,
    /// The optimised objective `sum_k lambda_k * L_k`.
    pub total_loss: f64,
    pub losses: Vec<f64>,
    pub lambda: Vec<f64>,
    /// DWA descending rates behind `lambda`; `None` under equal weighting.
    pub w: Option<Vec<f64>>,
}

/// An in-memory training run.
#[derive(Clone, Debug)]
pub struct Run {
    config: TrainConfig,
    specs: Vec<TaskSpec>,
    split: Split,
    state: RunState,
}

impl Run {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let specs = config.task_specs();
        let split = make_split(config.n_train, config.n_val)?;
        let model = build_model(&config.model_config(), config.seed)?;
        let adam = Adam::for_params(model.params(), config.adam)?;
        let dwa = match config.weighting {
            WeightingScheme::Equal => None,
            WeightingScheme::Dwa { temperature } => Some(DwaState::new(specs.len(), temperature)?),
        };
        Ok(Run {
            config,
            specs,
            split,
            state: RunState {
                model,
                adam,
                dwa,
                step: 0,
            },
        })
    }

    /// Rebuild a run from a checkpoint, using the configuration it echoes.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = TrainConfig::parse(&ckpt.config, PathBuf::new())?;
        let fresh = Run::new(config)?;
        let state = RunState::restore(fresh.state, ckpt)?;
        Ok(Run { state, ..fresh })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn specs(&self) -> &[TaskSpec] {
        &self.specs
    }

    pub fn split(&self) -> &Split {
        &self.split
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn model(&self) -> &MtanModel {
        &self.state.model
    }

    /// Completed steps.
    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    pub fn is_finished(&self) -> bool {
        self.state.step >= self.config.total_steps
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.state.to_checkpoint(self.config.to_text())
    }

    /// One optimisation step on the next training batch. A non-finite loss is
    /// reported before any state changes.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.state.step + 1;
        let lr = self.config.lr_at(step);
        let indices = self.split.train_batch(step - 1, self.config.batch_size);
        let batch = load_batch(&self.config.scene, &indices, &self.specs)?;
        let lambda = current_weights(self.config.weighting, self.state.dwa.as_ref(), self.specs.len())?;
        let w = self.state.dwa.as_ref().map(|d| d.w().to_vec());

        let mut session = self.state.model.session(Mode::Train);
        let out = session.forward(&batch.input)?;
        let tape = session.tape_mut();
        let loss_vars = task_losses(tape, &out.predictions, &batch.labels, &self.specs)?;
        let total = total_loss(tape, &loss_vars, &lambda)?;
        let losses: Vec<f64> = loss_vars.iter().map(|&v| tape.value(v).data()[0]).collect();
        let total_loss = tape.value(total).data()[0];
        if !total_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step,
                value: total_loss,
                checkpoint: None,
            });
        }
        let grads = session.tape().backward(total)?;
        let param_grads = session.param_grads(&grads);
        let bn_updates = session.into_bn_updates();

        self.state.adam.step(self.state.model.params_mut(), &param_grads, lr)?;
        self.state.model.apply_bn_updates(&bn_updates);
        if let Some(dwa) = &mut self.state.dwa {
            for (k, (spec, &l)) in self.specs.iter().zip(&losses).enumerate() {
                dwa.record_batch_loss(k, rate_loss(spec, l))?;
            }
            if step % self.config.dwa_epoch_len == 0 {
                dwa.end_epoch()?;
            }
        }
        self.state.step = step;
        Ok(StepRecord {
            step,
            lr,
            total_loss,
            losses,
            lambda,
            w,
        })
    }

    /// Metrics over the full validation range, using BN running statistics.
    pub fn evaluate(&self) -> Result<MetricReport> {
        evaluate(&self.state.model, &self.config, &self.split, &self.specs)
    }
}

/// Evaluate `model` on every validation sample of `split`.
pub fn evaluate(model: &MtanModel, config: &TrainConfig, split: &Split, specs: &[TaskSpec]) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new(specs);
    for indices in split.val_batches(config.batch_size) {
        let batch = load_batch(&config.scene, &indices, specs)?;
        let mut session = model.session(Mode::Eval);
        let out = session.forward(&batch.input)?;
        let preds: Vec<_> = out.predictions.iter().map(|&v| session.tape().value(v).clone()).collect();
        acc.add_batch(&preds, &batch.labels)?;
    }
    Ok(acc.finish())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Header of `log.csv` for the given tasks.
pub fn log_header(specs: &[TaskSpec]) -> String {
    let mut cols = vec!["kind".to_owned(), "step".into(), "lr".into(), "total_loss".into()];
    for prefix in ["loss", "lambda", "w"] {
        cols.extend(specs.iter().map(|s| format!("{prefix}_{}", s.name)));
    }
    cols.extend(MetricReport::COLUMNS.iter().map(|c| c.to_string()));
    cols.join(",")
}

pub fn train_row(r: &StepRecord) -> String {
    let mut row = format!("train,{},{},{}", r.step, r.lr, r.total_loss);
    for v in r.losses.iter().chain(&r.lambda) {
        let _ = write!(row, ",{v}");
    }
    for k in 0..r.losses.len() {
        let _ = write!(row, ",{}", fmt_opt(r.w.as_ref().map(|w| w[k])));
    }
    row.push_str(&",".repeat(MetricReport::COLUMNS.len()));
    row
}

pub fn eval_row(step: u64, lr: f64, tasks: usize, report: &MetricReport) -> String {
    let mut row = format!("eval,{step},{lr},");
    row.push_str(&",".repeat(3 * tasks));
    for v in report.values() {
        let _ = write!(row, ",{}", fmt_opt(v));
    }
    row
}

pub fn report_csv(report: &MetricReport) -> String {
    let values: Vec<String> = report.values().iter().map(|v| fmt_opt(*v)).collect();
    format!("{}\n{}\n", MetricReport::COLUMNS.join(","), values.join(","))
}

/// Result of a completed training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run: Run,
    pub report: MetricReport,
    pub out_dir: PathBuf,
}

/// Train `config` from scratch, writing artifacts to `config.out_dir`.
pub fn train(config: TrainConfig) -> Result<TrainOutcome> {
    let run = Run::new(config)?;
    drive(run, None)
}

/// Continue the run saved in `checkpoint`, writing to the directory it was
/// saved with unless `out_dir` overrides it. Log rows after the checkpoint
/// step are discarded so the log matches an uninterrupted run.
pub fn resume(checkpoint: &Path, out_dir: Option<PathBuf>) -> Result<TrainOutcome> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut run = Run::from_checkpoint(&ckpt)?;
    if let Some(dir) = out_dir {
        run.config.out_dir = dir;
    }
    let step = run.step_count();
    drive(run, Some(step))
}

fn open_log(path: &Path, header: &str, keep_through: Option<u64>) -> Result<fs::File> {
    let mut kept = vec![header.to_owned()];
    if let Some(limit) = keep_through {
        if let Ok(old) = fs::read_to_string(path) {
            kept.extend(
                old.lines()
                    .skip(1)
                    .filter(|line| {
                        line.split(',')
                            .nth(1)
                            .and_then(|s| s.parse::<u64>().ok())
                            .is_some_and(|s| s <= limit)
                    })
                    .map(str::to_owned),
            );
        }
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    for line in kept {
        writeln!(f, "{line}").map_err(io_err(path))?;
    }
    Ok(f)
}

fn drive(mut run: Run, resumed_at: Option<u64>) -> Result<TrainOutcome> {
    let dir = run.config.out_dir.clone();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let config_path = dir.join(CONFIG_FILE);
    fs::write(&config_path, run.config.to_text()).map_err(io_err(&config_path))?;
    let log_path = dir.join(LOG_FILE);
    let mut log = open_log(&log_path, &log_header(&run.specs), resumed_at)?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let mut last_good = resumed_at.map(|_| ckpt_path.clone()).filter(|p| p.exists());

    while !run.is_finished() {
        let record = match run.step() {
            Err(TrainError::NonFiniteLoss { step, value, .. }) => {
                return Err(TrainError::NonFiniteLoss {
                    step,
                    value,
                    checkpoint: last_good,
                })
            }
            other => other?,
        };
        let step = record.step;
        if step % run.config.log_every == 0 {
            writeln!(log, "{}", train_row(&record)).map_err(io_err(&log_path))?;
        }
        if run.config.eval_every > 0 && step % run.config.eval_every == 0 {
            let report = run.evaluate()?;
            writeln!(log, "{}", eval_row(step, record.lr, run.specs.len(), &report)).map_err(io_err(&log_path))?;
            run.checkpoint().save(&ckpt_path)?;
            last_good = Some(ckpt_path.clone());
        }
    }
    log.flush().map_err(io_err(&log_path))?;
    run.checkpoint().save(&ckpt_path)?;
    let report = run.evaluate()?;
    let report_path = dir.join(REPORT_FILE);
    fs::write(&report_path, report_csv(&report)).map_err(io_err(&report_path))?;
    Ok(TrainOutcome {
        run,
        report,
        out_dir: dir,
    })
}

/// One line of a comparison table.
#[derive(Clone, Debug)]
pub struct CompareRow {
    pub architecture: String,
    pub weighting: WeightingScheme,
    pub params: usize,
    pub report: MetricReport,
}

pub fn compare_header() -> String {
    let mut cols = vec!["architecture", "weighting", "params"];
    cols.extend(MetricReport::COLUMNS);
    cols.join(",")
}

pub fn compare_row(row: &CompareRow) -> String {
    let weighting = match row.weighting {
        WeightingScheme::Equal => "equal".to_owned(),
        WeightingScheme::Dwa { temperature } => format!("dwa(T={temperature})"),
    };
    let mut line = format!("{},{weighting},{}", row.architecture, row.params);
    for v in row.report.values() {
        let _ = write!(line, ",{}", fmt_opt(v));
    }
    line
}

/// Train every config as an isolated run and tabulate the results.
pub fn compare(configs: Vec<TrainConfig>) -> Result<Vec<CompareRow>> {
    configs
        .into_iter()
        .map(|config| {
            let architecture = config.architecture_label();
            let weighting = config.weighting;
            let outcome = train(config)?;
            Ok(CompareRow {
                architecture,
                weighting,
                params: outcome.run.model().param_count().total,
                report: outcome.report,
            })
        })
        .collect()
}
