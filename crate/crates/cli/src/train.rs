//! Paired training runs, ablations and their CSV logs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use dfx_core::nn::checkpoint;
use dfx_core::nn::{FloatModel, IntModel, SgdConfig, StepStats};
use dfx_core::report::{fmt_g, Cell, Csv};

use crate::config::RunConfig;
use crate::data::{self, Dataset, OrderDigest};
use crate::error::{CliError, Result};

/// Evaluation chunk size; eval-mode batch norm makes the result independent of it.
const EVAL_CHUNK: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Int,
    Float,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Int => "int",
            Arm::Float => "float",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Status {
    Converged,
    Diverged(String),
}

impl Status {
    pub fn is_diverged(&self) -> bool {
        matches!(self, Status::Diverged(_))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Status::Converged => "converged",
            Status::Diverged(_) => "diverged",
        }
    }

    pub fn reason(&self) -> &str {
        match self {
            Status::Converged => "",
            Status::Diverged(r) => r,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub lr: f64,
    pub digest: String,
}

/// Training batch statistics of one step; the loss is NaN on the step
/// that diverged with an error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmReport {
    pub arm: Arm,
    pub status: Status,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl ArmReport {
    fn new(arm: Arm) -> Self {
        Self {
            arm,
            status: Status::Converged,
            epochs: Vec::new(),
            steps: Vec::new(),
        }
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn final_test_accuracy(&self) -> f64 {
        self.last().map_or(f64::NAN, |e| e.test_accuracy)
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub int: ArmReport,
    pub float: Option<ArmReport>,
    pub int_model: IntModel,
}

/// Flags a run whose loss is non-finite, or above `threshold` for
/// `patience` consecutive steps.
#[derive(Debug, Clone)]
pub struct DivergenceMonitor {
    threshold: f64,
    patience: usize,
    run: usize,
}

impl DivergenceMonitor {
    pub fn new(threshold: f64, patience: usize) -> Self {
        Self {
            threshold,
            patience,
            run: 0,
        }
    }

    pub fn observe(&mut self, step: u64, loss: f64) -> Option<String> {
        if !loss.is_finite() {
            return Some(format!("non-finite loss at step {step}"));
        }
        self.run = if loss > self.threshold { self.run + 1 } else { 0 };
        (self.run >= self.patience)
            .then(|| format!("loss above {} for {} steps ending at step {step}", fmt_g(self.threshold), self.patience))
    }
}

/// Outcome of one step: an error that means the arithmetic left the
/// representable range is a divergence, anything else is a bug or bad input.
fn step_outcome(r: dfx_core::Result<StepStats>, step: u64) -> Result<std::result::Result<StepStats, String>> {
    match r {
        Ok(s) => Ok(Ok(s)),
        Err(e @ (dfx_core::Error::ExponentOverflow(_) | dfx_core::Error::NonFiniteInput { .. })) => {
            Ok(Err(format!("{e} at step {step}")))
        }
        Err(e) => Err(e.into()),
    }
}

fn evaluate(ds: &Dataset, mut eval: impl FnMut(&[f32], &[usize], u64) -> dfx_core::Result<StepStats>) -> Result<StepStats> {
    let (mut loss, mut correct) = (0.0, 0);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for (tag, chunk) in idx.chunks(EVAL_CHUNK).enumerate() {
        let (x, y) = ds.gather(chunk);
        let s = eval(&x, &y, tag as u64)?;
        loss += s.loss * chunk.len() as f64;
        correct += s.correct;
    }
    Ok(StepStats {
        loss: loss / ds.len() as f64,
        correct,
        count: ds.len(),
    })
}

struct ArmState<'a> {
    report: ArmReport,
    monitor: DivergenceMonitor,
    digest: OrderDigest,
    loss_sum: f64,
    correct: usize,
    seen: usize,
    step: Box<dyn FnMut(&[f32], &[usize]) -> dfx_core::Result<StepStats> + 'a>,
}

impl ArmState<'_> {
    fn active(&self) -> bool {
        !self.report.status.is_diverged()
    }
}

/// Trains the integer arm and, if `paired`, the float arm on the same
/// initial weights and batch sequence. Returns the in-memory report without
/// touching the filesystem; `cmd_train` writes the artifacts.
pub fn run(cfg: &RunConfig, paired: bool, mut on_epoch: impl FnMut(Arm, &EpochRecord)) -> Result<RunReport> {
    cfg.validate()?;
    let (train, test) = data::load(cfg)?;
    let sgd = SgdConfig {
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let schedule = cfg.schedule();
    let int = std::cell::RefCell::new(IntModel::new(cfg.model_config()?, sgd)?);
    let float = std::cell::RefCell::new(FloatModel::paired_with(&int.borrow(), sgd)?);
    let mut arms: Vec<ArmState> = vec![ArmState {
        report: ArmReport::new(Arm::Int),
        monitor: DivergenceMonitor::new(cfg.divergence_threshold, cfg.divergence_patience),
        digest: OrderDigest::default(),
        loss_sum: 0.0,
        correct: 0,
        seen: 0,
        step: Box::new(|x, y| int.borrow_mut().train_step(x, y)),
    }];
    if paired {
        arms.push(ArmState {
            report: ArmReport::new(Arm::Float),
            monitor: DivergenceMonitor::new(cfg.divergence_threshold, cfg.divergence_patience),
            digest: OrderDigest::default(),
            loss_sum: 0.0,
            correct: 0,
            seen: 0,
            step: Box::new(|x, y| float.borrow_mut().train_step(x, y)),
        });
    }
    let batches = train.len() / cfg.batch_size;
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        let lr = schedule.at_epoch(epoch);
        int.borrow_mut().opt.set_lr(lr);
        float.borrow_mut().set_lr(lr);
        let order = data::epoch_order(train.len(), cfg.seed, epoch);
        for a in arms.iter_mut() {
            a.digest = OrderDigest::default();
            a.loss_sum = 0.0;
            a.correct = 0;
            a.seen = 0;
        }
        for b in 0..batches {
            let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let (x, y) = train.gather(idx);
            step += 1;
            for a in arms.iter_mut().filter(|a| a.active()) {
                a.digest.update(idx);
                match step_outcome((a.step)(&x, &y), step)? {
                    Ok(s) => {
                        a.report.steps.push(StepRecord {
                            epoch,
                            loss: s.loss,
                            accuracy: s.accuracy(),
                        });
                        a.loss_sum += s.loss * s.count as f64;
                        a.correct += s.correct;
                        a.seen += s.count;
                        if let Some(reason) = a.monitor.observe(step, s.loss) {
                            a.report.status = Status::Diverged(reason);
                        }
                    }
                    Err(reason) => {
                        a.report.steps.push(StepRecord {
                            epoch,
                            loss: f64::NAN,
                            accuracy: f64::NAN,
                        });
                        a.report.status = Status::Diverged(reason);
                    }
                }
            }
        }
        if arms.iter().all(|a| a.active()) && arms.windows(2).any(|w| w[0].digest != w[1].digest) {
            return Err(CliError::BatchOrderMismatch(epoch));
        }
        for a in arms.iter_mut().filter(|a| a.active()) {
            let eval = match a.report.arm {
                Arm::Int => {
                    let m = int.borrow();
                    evaluate(&test, |x, y, tag| m.evaluate(x, y, tag))?
                }
                Arm::Float => {
                    let m = float.borrow();
                    evaluate(&test, |x, y, _| m.evaluate(x, y))?
                }
            };
            let rec = EpochRecord {
                epoch,
                train_loss: a.loss_sum / a.seen as f64,
                train_accuracy: a.correct as f64 / a.seen as f64,
                test_loss: eval.loss,
                test_accuracy: eval.accuracy(),
                lr,
                digest: a.digest.hex(),
            };
            on_epoch(a.report.arm, &rec);
            a.report.epochs.push(rec);
        }
    }
    for a in arms.iter_mut().filter(|a| a.active()) {
        let e = &a.report.epochs;
        if e.len() >= 2 && e[e.len() - 1].train_loss >= e[0].train_loss {
            a.report.status = Status::Diverged(format!(
                "training loss did not decrease ({} in epoch 0, {} in epoch {})",
                fmt_g(e[0].train_loss),
                fmt_g(e[e.len() - 1].train_loss),
                e.len() - 1
            ));
        }
    }
    let mut reports = arms.into_iter().map(|a| a.report).collect::<Vec<_>>().into_iter();
    let int_report = reports.next().expect("int arm");
    let float_report = reports.next();
    Ok(RunReport {
        int: int_report,
        float: float_report,
        int_model: int.into_inner(),
    })
}

pub fn steps_csv(report: &RunReport) -> String {
    let mut c = Csv::new(&["step", "epoch", "arm", "loss", "accuracy"]);
    let arms: Vec<&ArmReport> = std::iter::once(&report.int).chain(report.float.as_ref()).collect();
    let n = arms.iter().map(|a| a.steps.len()).max().unwrap_or(0);
    for s in 0..n {
        for a in &arms {
            if let Some(r) = a.steps.get(s) {
                c.row(&[
                    Cell::U(s as u64 + 1),
                    Cell::U(r.epoch as u64),
                    Cell::S(a.arm.name()),
                    Cell::F(r.loss),
                    Cell::F(r.accuracy),
                ]);
            }
        }
    }
    c.into_string()
}

pub fn epochs_csv(report: &RunReport) -> String {
    let mut c = Csv::new(&[
        "epoch",
        "arm",
        "train_loss",
        "train_accuracy",
        "test_loss",
        "test_accuracy",
        "lr",
        "batch_digest",
    ]);
    for a in std::iter::once(&report.int).chain(report.float.as_ref()) {
        for e in &a.epochs {
            c.row(&[
                Cell::U(e.epoch as u64),
                Cell::S(a.arm.name()),
                Cell::F(e.train_loss),
                Cell::F(e.train_accuracy),
                Cell::F(e.test_loss),
                Cell::F(e.test_accuracy),
                Cell::F(e.lr),
                Cell::S(&e.digest),
            ]);
        }
    }
    c.into_string()
}

pub fn summary_text(cfg: &RunConfig, report: &RunReport) -> String {
    let mut s = String::new();
    writeln!(s, "bits = {}", cfg.bits).unwrap();
    writeln!(s, "epochs = {}", cfg.epochs).unwrap();
    for a in std::iter::once(&report.int).chain(report.float.as_ref()) {
        let n = a.arm.name();
        writeln!(s, "{n}.status = {}", a.status.name()).unwrap();
        if a.status.is_diverged() {
            writeln!(s, "{n}.reason = {}", a.status.reason()).unwrap();
        }
        writeln!(s, "{n}.steps = {}", a.steps.len()).unwrap();
        if let Some(e) = a.last() {
            writeln!(s, "{n}.final_train_loss = {}", fmt_g(e.train_loss)).unwrap();
            writeln!(s, "{n}.final_train_accuracy = {}", fmt_g(e.train_accuracy)).unwrap();
            writeln!(s, "{n}.final_test_loss = {}", fmt_g(e.test_loss)).unwrap();
            writeln!(s, "{n}.final_test_accuracy = {}", fmt_g(e.test_accuracy)).unwrap();
        }
    }
    if let (Some(i), Some(fl)) = (report.int.last(), report.float.as_ref().and_then(|f| f.last())) {
        writeln!(s, "accuracy_gap_points = {}", fmt_g(100.0 * (i.test_accuracy - fl.test_accuracy))).unwrap();
    }
    s
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::write(dir.join(name), text)?;
    Ok(())
}

/// Runs [`run`] and writes `config.txt`, `steps.csv`, `epochs.csv`,
/// `summary.txt` and the integer arm's checkpoint into the output directory.
pub fn cmd_train(cfg: &RunConfig, paired: bool, on_epoch: impl FnMut(Arm, &EpochRecord)) -> Result<RunReport> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    write(dir, "config.txt", &cfg.to_text())?;
    let report = run(cfg, paired, on_epoch)?;
    write(dir, "steps.csv", &steps_csv(&report))?;
    write(dir, "epochs.csv", &epochs_csv(&report))?;
    write(dir, "summary.txt", &summary_text(cfg, &report))?;
    if cfg.checkpoint && !report.int.status.is_diverged() {
        let extra: Vec<(String, String)> = cfg.entries().into_iter().map(|(k, v)| (format!("config.{k}"), v)).collect();
        checkpoint::save(&dir.join("checkpoint"), &report.int_model, &extra)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub bits: u32,
    pub status: Status,
    pub first_epoch_loss: f64,
    pub last_epoch_loss: f64,
    pub final_test_loss: f64,
    pub final_test_accuracy: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut c = Csv::new(&[
        "bits",
        "status",
        "first_epoch_loss",
        "last_epoch_loss",
        "final_test_loss",
        "final_test_accuracy",
        "reason",
    ]);
    for r in rows {
        let reason = r.status.reason().replace(',', ";");
        c.row(&[
            Cell::U(r.bits as u64),
            Cell::S(r.status.name()),
            Cell::F(r.first_epoch_loss),
            Cell::F(r.last_epoch_loss),
            Cell::F(r.final_test_loss),
            Cell::F(r.final_test_accuracy),
            Cell::S(&reason),
        ]);
    }
    c.into_string()
}

/// Integer-arm runs at each width with the shared seed, each in
/// `<output_dir>/bits_<k>`, plus `ablation.csv` in the output directory.
pub fn cmd_ablate(cfg: &RunConfig, widths: &[u32], mut on_epoch: impl FnMut(u32, &EpochRecord)) -> Result<Vec<AblationRow>> {
    let mut runs = Vec::with_capacity(widths.len());
    for &bits in widths {
        let mut c = cfg.clone();
        c.bits = bits;
        c.validate()?;
        c.output_dir = cfg.output_dir.join(format!("bits_{bits}"));
        runs.push(c);
    }
    fs::create_dir_all(&cfg.output_dir)?;
    let mut rows = Vec::new();
    for c in &runs {
        let r = cmd_train(c, false, |_, e| on_epoch(c.bits, e))?;
        let e = &r.int.epochs;
        rows.push(AblationRow {
            bits: c.bits,
            status: r.int.status.clone(),
            first_epoch_loss: e.first().map_or(f64::NAN, |e| e.train_loss),
            last_epoch_loss: e.last().map_or(f64::NAN, |e| e.train_loss),
            final_test_loss: e.last().map_or(f64::NAN, |e| e.test_loss),
            final_test_accuracy: r.int.final_test_accuracy(),
        });
    }
    write(&cfg.output_dir, "ablation.csv", &ablation_csv(&rows))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monitor_needs_consecutive_steps() {
        let mut m = DivergenceMonitor::new(5.0, 3);
        assert!(m.observe(1, 6.0).is_none());
        assert!(m.observe(2, 6.0).is_none());
        assert!(m.observe(3, 1.0).is_none());
        assert!(m.observe(4, 6.0).is_none());
        assert!(m.observe(5, 6.0).is_none());
        assert!(m.observe(6, 6.0).is_some());
        assert!(DivergenceMonitor::new(5.0, 3).observe(1, f64::NAN).is_some());
    }
}
