//! Fold-protocol evaluation: per-fold training and scoring, the 18x18
//! confusion matrix, binary reminder/silence rates and per-subject/per-hand
//! breakdowns.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    batch_tensors, is_mask_action, make_user_dependent_folds, make_user_independent_folds,
    FoldSpec, NormalizedSegment, ProtocolKind, NUM_ACTIONS,
};
use crate::error::{Error, Result};
use crate::model::{MixerConfig, MixerModel};
use crate::optim::{train, TrainConfig, TrainReport};
use crate::scalar::Scalar;
use crate::tape::Tape;

const EVAL_BATCH: usize = 128;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: u64,
    pub total: u64,
}

impl Tally {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Mask/non-mask group outcomes: `remind` counts true non-mask segments
/// predicted as any non-mask action, `silence` counts true mask segments
/// predicted as any mask action.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BinaryTally {
    pub remind: Tally,
    pub silence: Tally,
}

/// Test-set metrics of a single trained model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold_index: usize,
    pub test_count: usize,
    pub accuracy: f64,
    /// `confusion[true][pred]` counts, 0-based class indices.
    pub confusion: Vec<Vec<u64>>,
    pub per_subject: BTreeMap<String, Tally>,
    pub per_hand: BTreeMap<String, Tally>,
    pub per_subject_binary: BTreeMap<String, BinaryTally>,
}

/// Argmax with ties broken toward the lower class index.
pub fn argmax_class(row: &[f64]) -> usize {
    let mut arg = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[arg] {
            arg = j;
        }
    }
    arg
}

/// Classifies every test segment and accumulates accuracy, the confusion
/// matrix and the per-subject/per-hand tallies.
pub fn evaluate_fold<F: Scalar>(
    model: &MixerModel<F>,
    fold_index: usize,
    test: &[&NormalizedSegment],
) -> Result<FoldMetrics> {
    if test.is_empty() {
        return Err(Error::Protocol(format!(
            "fold {fold_index} has an empty test set"
        )));
    }
    let k = model.config().num_classes;
    if k != NUM_ACTIONS {
        return Err(Error::Protocol(format!(
            "evaluation expects {NUM_ACTIONS} classes, model has {k}"
        )));
    }
    let mut confusion = vec![vec![0u64; k]; k];
    let mut per_subject: BTreeMap<String, Tally> = BTreeMap::new();
    let mut per_hand: BTreeMap<String, Tally> = BTreeMap::new();
    let mut per_subject_binary: BTreeMap<String, BinaryTally> = BTreeMap::new();
    let mut correct = 0u64;
    for chunk in test.chunks(EVAL_BATCH) {
        let (acc, gyro, labels) = batch_tensors::<F>(chunk);
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &acc, &gyro)?;
        let out = tape.value(logits);
        for (i, (&label, seg)) in labels.iter().zip(chunk).enumerate() {
            let row: Vec<f64> = out.data()[i * k..(i + 1) * k]
                .iter()
                .map(|v| v.as_f64())
                .collect();
            let pred = argmax_class(&row);
            confusion[label][pred] += 1;
            let hit = pred == label;
            correct += hit as u64;
            let s = per_subject.entry(seg.subject_id.clone()).or_default();
            s.total += 1;
            s.correct += hit as u64;
            let h = per_hand.entry(seg.hand.to_string()).or_default();
            h.total += 1;
            h.correct += hit as u64;
            let b = per_subject_binary
                .entry(seg.subject_id.clone())
                .or_default();
            let true_mask = is_mask_action(label as u8 + 1);
            let pred_mask = is_mask_action(pred as u8 + 1);
            if true_mask {
                b.silence.total += 1;
                b.silence.correct += pred_mask as u64;
            } else {
                b.remind.total += 1;
                b.remind.correct += (!pred_mask) as u64;
            }
        }
    }
    Ok(FoldMetrics {
        fold_index,
        test_count: test.len(),
        accuracy: correct as f64 / test.len() as f64,
        confusion,
        per_subject,
        per_hand,
        per_subject_binary,
    })
}

/// Success-reminder and success-silence rates from a confusion matrix:
/// `P(pred in 7-18 | true in 7-18)` and `P(pred in 1-6 | true in 1-6)`.
/// A group with zero test segments yields `None` rather than zero.
pub fn binary_reminder_metrics(confusion: &[Vec<u64>]) -> (Option<f64>, Option<f64>) {
    let tally = binary_tally(confusion);
    (rate(tally.remind), rate(tally.silence))
}

fn rate(t: Tally) -> Option<f64> {
    (t.total > 0).then(|| t.accuracy())
}

fn binary_tally(confusion: &[Vec<u64>]) -> BinaryTally {
    let mut out = BinaryTally::default();
    for (t, row) in confusion.iter().enumerate() {
        let true_mask = is_mask_action(t as u8 + 1);
        for (p, &count) in row.iter().enumerate() {
            let pred_mask = is_mask_action(p as u8 + 1);
            if true_mask {
                out.silence.total += count;
                if pred_mask {
                    out.silence.correct += count;
                }
            } else {
                out.remind.total += count;
                if !pred_mask {
                    out.remind.correct += count;
                }
            }
        }
    }
    out
}

/// Aggregated protocol results. The reminder/silence rates come in two
/// flavors: micro (pooled over all test segments) and macro (mean over
/// per-subject rates, skipping subjects whose group is empty).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: ProtocolKind,
    pub model: MixerConfig,
    pub base_seed: u64,
    pub num_folds: usize,
    pub fold_accuracies: Vec<f64>,
    pub overall_accuracy: f64,
    pub total_test_segments: u64,
    pub confusion: Vec<Vec<u64>>,
    pub reminder_rate: Option<f64>,
    pub silence_rate: Option<f64>,
    pub reminder_rate_macro: Option<f64>,
    pub silence_rate_macro: Option<f64>,
    pub per_subject: BTreeMap<String, f64>,
    pub per_hand: BTreeMap<String, f64>,
}

/// One trained fold: its split, training curve and test metrics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldRun {
    pub spec: FoldSpec,
    pub train_report: TrainReport,
    pub metrics: FoldMetrics,
}

pub struct ProtocolRun {
    pub report: EvalReport,
    pub folds: Vec<FoldRun>,
}

/// Builds one fold's model (init seed and shuffle seed are both
/// `base_seed + fold_index`), trains it on the fold's training split and
/// scores its test split.
pub fn train_single_fold<F: Scalar>(
    model_config: &MixerConfig,
    train_config: &TrainConfig,
    segments: &[NormalizedSegment],
    fold: &FoldSpec,
) -> Result<(MixerModel<F>, TrainReport, FoldMetrics)> {
    let fold_seed = train_config.seed + fold.fold_index as u64;
    let mut model = MixerModel::new(model_config.clone(), fold_seed)?;
    let train_set: Vec<&NormalizedSegment> = fold.train.iter().map(|&i| &segments[i]).collect();
    let test_set: Vec<&NormalizedSegment> = fold.test.iter().map(|&i| &segments[i]).collect();
    let cfg = TrainConfig {
        seed: fold_seed,
        ..train_config.clone()
    };
    let report = train(&mut model, &train_set, &cfg)?;
    let metrics = evaluate_fold(&model, fold.fold_index, &test_set)?;
    Ok((model, report, metrics))
}

/// Runs a full protocol: builds the folds, trains one model per fold
/// (folds are independent and run in parallel) and aggregates the report.
pub fn run_protocol<F: Scalar>(
    model_config: &MixerConfig,
    train_config: &TrainConfig,
    segments: &[NormalizedSegment],
    protocol: ProtocolKind,
) -> Result<ProtocolRun> {
    let folds = match protocol {
        ProtocolKind::UserDependent => make_user_dependent_folds(segments),
        ProtocolKind::UserIndependent => make_user_independent_folds(segments)?,
    };
    let fold_runs: Vec<FoldRun> = folds
        .into_par_iter()
        .map(|fold| {
            let fold_index = fold.fold_index;
            let (_, train_report, metrics) =
                train_single_fold::<F>(model_config, train_config, segments, &fold)
                    .map_err(|e| Error::Protocol(format!("fold {fold_index} failed: {e}")))?;
            Ok(FoldRun {
                spec: fold,
                train_report,
                metrics,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = aggregate(model_config, train_config, protocol, &fold_runs)?;
    Ok(ProtocolRun {
        report,
        folds: fold_runs,
    })
}

fn aggregate(
    model_config: &MixerConfig,
    train_config: &TrainConfig,
    protocol: ProtocolKind,
    folds: &[FoldRun],
) -> Result<EvalReport> {
    let k = NUM_ACTIONS;
    let mut confusion = vec![vec![0u64; k]; k];
    let mut per_subject: BTreeMap<String, Tally> = BTreeMap::new();
    let mut per_hand: BTreeMap<String, Tally> = BTreeMap::new();
    let mut subject_binary: BTreeMap<String, BinaryTally> = BTreeMap::new();
    for run in folds {
        for (t, row) in run.metrics.confusion.iter().enumerate() {
            for (p, &count) in row.iter().enumerate() {
                confusion[t][p] += count;
            }
        }
        for (subject, tally) in &run.metrics.per_subject {
            let s = per_subject.entry(subject.clone()).or_default();
            s.correct += tally.correct;
            s.total += tally.total;
        }
        for (hand, tally) in &run.metrics.per_hand {
            let h = per_hand.entry(hand.clone()).or_default();
            h.correct += tally.correct;
            h.total += tally.total;
        }
        for (subject, tally) in &run.metrics.per_subject_binary {
            let b = subject_binary.entry(subject.clone()).or_default();
            b.remind.correct += tally.remind.correct;
            b.remind.total += tally.remind.total;
            b.silence.correct += tally.silence.correct;
            b.silence.total += tally.silence.total;
        }
    }
    let total: u64 = confusion.iter().flatten().sum();
    let trace: u64 = (0..k).map(|i| confusion[i][i]).sum();
    let (reminder_rate, silence_rate) = binary_reminder_metrics(&confusion);
    let remind_macro = macro_rate(subject_binary.values().map(|b| rate(b.remind)));
    let silence_macro = macro_rate(subject_binary.values().map(|b| rate(b.silence)));
    Ok(EvalReport {
        protocol,
        model: model_config.clone(),
        base_seed: train_config.seed,
        num_folds: folds.len(),
        fold_accuracies: folds.iter().map(|f| f.metrics.accuracy).collect(),
        overall_accuracy: trace as f64 / total as f64,
        total_test_segments: total,
        confusion,
        reminder_rate,
        silence_rate,
        reminder_rate_macro: remind_macro,
        silence_rate_macro: silence_macro,
        per_subject: per_subject
            .into_iter()
            .map(|(s, t)| (s, t.accuracy()))
            .collect(),
        per_hand: per_hand
            .into_iter()
            .map(|(h, t)| (h, t.accuracy()))
            .collect(),
    })
}

fn macro_rate(rates: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = rates.flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

pub fn write_report_json(path: &Path, report: &EvalReport) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, report)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Confusion matrix as CSV with 1-based action ids.
pub fn write_confusion_csv(path: &Path, confusion: &[Vec<u64>]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write!(w, "true_action")?;
    for p in 1..=confusion.len() {
        write!(w, ",pred_{p}")?;
    }
    writeln!(w)?;
    for (t, row) in confusion.iter().enumerate() {
        write!(w, "{}", t + 1)?;
        for &count in row {
            write!(w, ",{count}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per fold: sizes, accuracy and training-curve summary.
pub fn write_folds_csv(path: &Path, folds: &[FoldRun]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(
        w,
        "fold_index,train_size,test_size,accuracy,epochs_run,best_epoch,best_loss,stopped_early"
    )?;
    for run in folds {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            run.spec.fold_index,
            run.spec.train.len(),
            run.spec.test.len(),
            run.metrics.accuracy,
            run.train_report.epochs_run(),
            run.train_report.best_epoch,
            run.train_report.best_loss,
            run.train_report.stopped_early
        )?;
    }
    w.flush()?;
    Ok(())
}
