//! Losses, optimizer, schedule, early stopping and the training loop.

pub mod checkpoint;
pub mod loader;
pub mod loss;
pub mod optim;
pub mod schedule;

use std::cmp::Ordering;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{fingerprint, Checkpoint};
pub use loader::ImageLoader;
pub use loss::{cross_entropy, focal_loss, LossOutput};
pub use optim::{clip_grad_norm, grad_norm, AdamW};
pub use schedule::{compare_candidates, early_stop_check, select_checkpoint, Candidate, OneCycle, StopDecision};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate, evaluate_rows, MetricsReport, PredictionRow};
use crate::ingest::{ImageRecord, Label};
use crate::model::{softmax, Model};
use crate::nn::TrainCtx;
use crate::splitter::{Split, SplitRecords};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    Focal,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub init_lr: f64,
    pub max_lr: f64,
    /// The schedule ends at `init_lr / final_div_factor`.
    pub final_div_factor: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub grad_clip_norm: f64,
    pub loss: LossKind,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Validation F1 an epoch must exceed to be ranked by train/val gap.
    pub selection_threshold: f64,
    /// Requests reduced-precision arithmetic. Not available on this CPU
    /// backend; training falls back to `f64` with a warning.
    pub mixed_precision: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            init_lr: 1e-4,
            max_lr: 1e-3,
            final_div_factor: 1e4,
            warmup_fraction: 0.3,
            weight_decay: 1e-5,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            batch_size: 8,
            max_epochs: 100,
            patience: 10,
            min_delta: 0.002,
            grad_clip_norm: 1.0,
            loss: LossKind::Focal,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            selection_threshold: 0.85,
            mixed_precision: false,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("init_lr", self.init_lr),
            ("max_lr", self.max_lr),
            ("final_div_factor", self.final_div_factor),
            ("adam_eps", self.adam_eps),
            ("grad_clip_norm", self.grad_clip_norm),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.max_lr < self.init_lr {
            return bad("max_lr must not be below init_lr".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction {} outside [0, 1]", self.warmup_fraction));
        }
        if !(self.weight_decay >= 0.0 && self.min_delta >= 0.0) {
            return bad("weight_decay and min_delta must be non-negative".into());
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("betas {:?} outside [0, 1)", self.betas));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1; nothing would be trained".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return bad(format!("focal_alpha {} outside (0, 1)", self.focal_alpha));
        }
        if self.focal_gamma.is_nan() || self.focal_gamma < 0.0 {
            return bad(format!("focal_gamma {} must be non-negative", self.focal_gamma));
        }
        Ok(())
    }

    pub fn schedule(&self) -> OneCycle {
        OneCycle {
            init_lr: self.init_lr,
            max_lr: self.max_lr,
            final_lr: self.init_lr / self.final_div_factor,
            warmup_fraction: self.warmup_fraction,
        }
    }

    pub fn loss(&self, logits: &Array2<f64>, targets: &[usize]) -> Result<LossOutput> {
        match self.loss {
            LossKind::Focal => focal_loss(logits, targets, self.focal_alpha, self.focal_gamma),
            LossKind::CrossEntropy => cross_entropy(logits, targets),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub train_f1: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_f1: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochHistory {
    pub epochs: Vec<EpochRecord>,
    /// Learning rate of every optimizer step.
    pub lr_trace: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

pub const HISTORY_COLUMNS: [&str; 8] = [
    "epoch",
    "train_loss",
    "train_accuracy",
    "train_f1",
    "val_loss",
    "val_accuracy",
    "val_f1",
    "lr",
];

impl EpochHistory {
    pub fn val_f1(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_f1).collect()
    }

    pub fn candidates(&self) -> Vec<Candidate> {
        self.epochs
            .iter()
            .map(|e| Candidate {
                epoch: e.epoch,
                train_f1: e.train_f1,
                val_f1: e.val_f1,
            })
            .collect()
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(path)?;
        w.write_record(HISTORY_COLUMNS)?;
        for e in &self.epochs {
            w.write_record(
                [
                    e.epoch as f64,
                    e.train_loss,
                    e.train_accuracy,
                    e.train_f1,
                    e.val_loss,
                    e.val_accuracy,
                    e.val_f1,
                    e.lr,
                ]
                .iter()
                .enumerate()
                .map(|(i, v)| if i == 0 { format!("{v}") } else { format!("{v:?}") }),
            )?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<EpochHistory> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Progress notifications emitted by [`train`].
pub enum TrainEvent<'a> {
    Epoch(&'a EpochRecord),
    /// A new best epoch; its weights are in the checkpoint.
    Improved(&'a Checkpoint),
}

/// Result of [`train`]. The model is left holding the selected weights.
pub struct TrainOutcome {
    pub history: EpochHistory,
    pub checkpoint: Checkpoint,
    /// Weights after the last epoch that ran.
    pub final_checkpoint: Checkpoint,
    /// Validation metrics of the selected epoch.
    pub val_report: MetricsReport,
}

/// Eval-mode predictions over a record list, plus the mean loss.
pub struct Predictions {
    pub rows: Vec<PredictionRow>,
    pub mean_loss: f64,
}

impl Predictions {
    pub fn report(&self) -> Result<MetricsReport> {
        evaluate_rows(&self.rows)
    }
}

fn argmax_label(row: ndarray::ArrayView1<'_, f64>) -> Label {
    if row[1] > row[0] {
        Label::All
    } else {
        Label::Hem
    }
}

pub fn predict(
    model: &Model,
    records: &[ImageRecord],
    split: Split,
    loader: &mut ImageLoader,
    cfg: &TrainConfig,
) -> Result<Predictions> {
    let mut rows = Vec::with_capacity(records.len());
    let mut loss_sum = 0.0;
    for chunk in records.chunks(cfg.batch_size.max(1)) {
        let refs: Vec<&ImageRecord> = chunk.iter().collect();
        let x = loader.batch(&refs, split)?;
        let logits = model.infer(&x)?;
        let targets: Vec<usize> = chunk.iter().map(|r| r.label.index()).collect();
        loss_sum += cfg.loss(&logits, &targets)?.loss * chunk.len() as f64;
        let probs = softmax(&logits);
        for (i, r) in chunk.iter().enumerate() {
            rows.push(PredictionRow {
                image_id: r.image_id.clone(),
                label: r.label,
                prediction: argmax_label(logits.row(i)),
                score_all: Some(probs[[i, Label::All.index()]]),
            });
        }
    }
    Ok(Predictions {
        mean_loss: loss_sum / records.len().max(1) as f64,
        rows,
    })
}

/// Batches of `size` over a shuffled order; a trailing batch of one sample
/// is merged into the previous batch, since batch norm needs two samples.
pub fn batch_ranges(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<_> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if out.len() > 1 && out.last().map(|r| r.len()) == Some(1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    out
}

fn check_inputs(train: &SplitRecords, val: &SplitRecords) -> Result<()> {
    if train.split != Split::Training {
        return Err(Error::Integrity(format!("training set is tagged {}", train.split)));
    }
    if val.split != Split::Validation {
        return Err(Error::Integrity(format!("validation set is tagged {}", val.split)));
    }
    if train.len() < 2 || val.is_empty() {
        return Err(Error::InvalidInput(format!(
            "need at least two training and one validation record (got {} and {})",
            train.len(),
            val.len()
        )));
    }
    if let Some(r) = val.records.iter().find(|r| !r.source.is_original()) {
        return Err(Error::Integrity(format!(
            "validation record '{}' is not an original",
            r.image_id
        )));
    }
    for label in Label::BOTH {
        if train.count(label) == 0 {
            return Err(Error::InvalidInput(format!("training set has no {label} records")));
        }
    }
    Ok(())
}

/// Runs the full training loop and leaves `model` with the selected weights.
///
/// `fingerprint` identifies the producing configuration and is stored in the
/// checkpoint. `on_event` sees every finished epoch and every new best.
pub fn train(
    model: &mut Model,
    train: &SplitRecords,
    val: &SplitRecords,
    cfg: &TrainConfig,
    loader: &mut ImageLoader,
    fingerprint: &str,
    on_event: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_inputs(train, val)?;
    if cfg.mixed_precision {
        log::warn!("mixed precision is not supported by the CPU backend; using f64");
    }

    let batches_per_epoch = batch_ranges(train.len(), cfg.batch_size).len();
    let total_steps = cfg.max_epochs * batches_per_epoch;
    let schedule = cfg.schedule();
    let mut opt = AdamW::new((cfg.betas[0], cfg.betas[1]), cfg.adam_eps, cfg.weight_decay);
    let mut ctx = TrainCtx::new({
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(1);
        r
    });

    let mut history = EpochHistory::default();
    let mut best: Option<(Candidate, Checkpoint, MetricsReport)> = None;
    let mut step = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle.set_stream(1_000 + epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut shuffle);

        let (mut loss_sum, mut preds, mut labels) = (0.0, Vec::new(), Vec::new());
        let mut lr = schedule.init_lr;
        for range in batch_ranges(order.len(), cfg.batch_size) {
            let batch: Vec<&ImageRecord> = order[range].iter().map(|&i| &train.records[i]).collect();
            let x = loader.batch(&batch, Split::Training)?;
            let targets: Vec<usize> = batch.iter().map(|r| r.label.index()).collect();

            model.zero_grad();
            let logits = model.forward(&x, &mut ctx)?;
            let out = match cfg.loss(&logits, &targets) {
                Ok(out) if out.loss.is_finite() => out,
                Ok(out) => {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        loss: out.loss,
                    })
                }
                Err(Error::InvalidInput(_)) => {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            model.backward(&out.grad);
            clip_grad_norm(model, cfg.grad_clip_norm);
            lr = schedule.lr_at(step, total_steps)?;
            opt.step(model, lr);
            history.lr_trace.push(lr);
            step += 1;

            loss_sum += out.loss * batch.len() as f64;
            preds.extend(logits.rows().into_iter().map(argmax_label));
            labels.extend(batch.iter().map(|r| r.label));
        }
        let train_report = evaluate(&preds, &labels, None)?;

        let val_pred = predict(model, &val.records, Split::Validation, loader, cfg)?;
        let val_report = val_pred.report()?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: train_report.accuracy,
            train_f1: train_report.weighted.f1,
            val_loss: val_pred.mean_loss,
            val_accuracy: val_report.accuracy,
            val_f1: val_report.weighted.f1,
            lr,
        };
        history.epochs.push(record);
        on_event(TrainEvent::Epoch(&record));
        log::info!(
            "epoch {epoch}/{}: train loss {:.4} f1 {:.4} | val loss {:.4} f1 {:.4} | lr {:.2e}",
            cfg.max_epochs,
            record.train_loss,
            record.train_f1,
            record.val_loss,
            record.val_f1,
            lr
        );

        let cand = Candidate {
            epoch,
            train_f1: record.train_f1,
            val_f1: record.val_f1,
        };
        let improves = best
            .as_ref()
            .is_none_or(|(b, _, _)| compare_candidates(&cand, b, cfg.selection_threshold) == Ordering::Greater);
        if improves {
            let ck = Checkpoint::capture(model, epoch, record.train_f1, record.val_f1, fingerprint);
            on_event(TrainEvent::Improved(&ck));
            best = Some((cand, ck, val_report));
        }

        if early_stop_check(&history.val_f1(), cfg.patience, cfg.min_delta) == StopDecision::Stop {
            history.stopped_early = epoch < cfg.max_epochs;
            log::info!("early stopping after epoch {epoch}");
            break;
        }
    }

    let (cand, checkpoint, val_report) = best.expect("at least one epoch ran");
    history.best_epoch = Some(cand.epoch);
    let last = history.epochs.last().expect("at least one epoch ran");
    let final_checkpoint = Checkpoint::capture(model, last.epoch, last.train_f1, last.val_f1, fingerprint);
    model.load_state_dict(&checkpoint.state)?;
    Ok(TrainOutcome {
        history,
        checkpoint,
        final_checkpoint,
        val_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_ranges_merge_trailing_singleton() {
        assert_eq!(batch_ranges(17, 8), vec![0..8, 8..17]);
        assert_eq!(batch_ranges(16, 8), vec![0..8, 8..16]);
        assert_eq!(batch_ranges(1, 8), vec![0..1]);
        assert_eq!(batch_ranges(10, 3), vec![0..3, 3..6, 6..10]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let zero_epochs = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(zero_epochs.validate(), Err(Error::Config(_))));
        let bad_alpha = TrainConfig {
            focal_alpha: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad_alpha.validate().is_err());
    }

    #[test]
    fn schedule_ends_at_init_over_ten_thousand() {
        let s = TrainConfig::default().schedule();
        assert!((s.lr_at(100, 100).unwrap() - 1e-8).abs() < 1e-20);
    }

    #[test]
    fn history_tsv_round_trips_values() {
        let h = EpochHistory {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.1 + 0.2,
                train_accuracy: 0.5,
                train_f1: 0.4,
                val_loss: 0.7,
                val_accuracy: 0.6,
                val_f1: 1.0 / 3.0,
                lr: 1e-4,
            }],
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.tsv");
        h.write_tsv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let row: Vec<f64> = text
            .lines()
            .nth(1)
            .unwrap()
            .split('\t')
            .map(|v| v.parse().unwrap())
            .collect();
        assert_eq!(row[1], 0.1 + 0.2);
        assert_eq!(row[6], 1.0 / 3.0);
    }
}
