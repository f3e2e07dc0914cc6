//! Streaming reminder engine: slide a 128-sample window over a continuous
//! 50 Hz IMU trace, classify each window, and drive the silent/notify state
//! machine. Offline replay only; the engine consumes a trace file and emits
//! a decision log.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{is_mask_action, WINDOW_LEN};
use crate::error::{Error, Result};
use crate::model::MixerModel;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Engine knobs. The silence window is how long one mask-related detection
/// keeps the engine quiet; the cool-down spaces consecutive notifications.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StreamConfig {
    /// Window step in samples (64 = 50% overlap at the 128-sample window).
    pub stride: usize,
    pub silence_window_s: f64,
    pub cooldown_s: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            stride: 64,
            silence_window_s: 1800.0,
            cooldown_s: 300.0,
        }
    }
}

/// An unlabeled continuous 6-channel recording.
#[derive(Clone, Debug)]
pub struct Trace {
    pub acc: Vec<[f64; 3]>,
    pub gyro: Vec<[f64; 3]>,
    pub sample_rate: u32,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.acc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acc.is_empty()
    }
}

#[derive(Deserialize)]
struct TraceRecord {
    sample_rate: u32,
    acc: Vec<[f64; 3]>,
    gyro: Vec<[f64; 3]>,
}

/// Reads a trace from JSON lines sharing the segment schema (labels and
/// metadata are ignored); multiple lines concatenate in file order.
pub fn read_trace_jsonl(path: &Path) -> Result<Trace> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut trace = Trace {
        acc: Vec::new(),
        gyro: Vec::new(),
        sample_rate: 0,
    };
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord = serde_json::from_str(&line).map_err(|e| Error::Data {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if record.acc.len() != record.gyro.len() {
            return Err(Error::Data {
                line: idx + 1,
                message: format!(
                    "acc has {} samples, gyro has {}",
                    record.acc.len(),
                    record.gyro.len()
                ),
            });
        }
        if trace.sample_rate == 0 {
            trace.sample_rate = record.sample_rate;
        } else if trace.sample_rate != record.sample_rate {
            return Err(Error::Data {
                line: idx + 1,
                message: format!(
                    "sample_rate {} differs from earlier {}",
                    record.sample_rate, trace.sample_rate
                ),
            });
        }
        trace.acc.extend(record.acc);
        trace.gyro.extend(record.gyro);
    }
    if trace.sample_rate == 0 {
        trace.sample_rate = crate::data::SAMPLE_RATE_HZ;
    }
    Ok(trace)
}

/// One classified window. The timestamp is the moment the window completes
/// (`(start + 128) / rate`), so decisions depend only on samples already
/// seen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowPrediction {
    pub window_start: usize,
    pub timestamp_s: f64,
    pub action_id: u8,
}

/// Classifies every full 128-sample window at the given stride. Partial tail
/// windows are not padded; traces shorter than one window yield an empty
/// list.
pub fn stream_classify<F: Scalar>(
    model: &MixerModel<F>,
    trace: &Trace,
    stride: usize,
) -> Result<Vec<WindowPrediction>> {
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    if model.config().window_len != WINDOW_LEN {
        return Err(Error::Config(format!(
            "streaming expects a {WINDOW_LEN}-sample model, got {}",
            model.config().window_len
        )));
    }
    let len = trace.len();
    if len < WINDOW_LEN {
        return Ok(Vec::new());
    }
    let starts: Vec<usize> = (0..=len - WINDOW_LEN).step_by(stride).collect();
    let k = model.config().num_classes;
    let rate = trace.sample_rate as f64;
    let mut out = Vec::with_capacity(starts.len());
    for chunk in starts.chunks(64) {
        let b = chunk.len();
        let mut acc = Vec::with_capacity(b * WINDOW_LEN * 3);
        let mut gyro = Vec::with_capacity(b * WINDOW_LEN * 3);
        for &start in chunk {
            for t in start..start + WINDOW_LEN {
                acc.extend(trace.acc[t].iter().map(|&v| F::from_f64(v)));
                gyro.extend(trace.gyro[t].iter().map(|&v| F::from_f64(v)));
            }
        }
        let shape = vec![b, WINDOW_LEN, 3];
        let acc = Tensor::new(shape.clone(), acc).expect("acc window shape");
        let gyro = Tensor::new(shape, gyro).expect("gyro window shape");
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &acc, &gyro)?;
        let values = tape.value(logits);
        for (i, &start) in chunk.iter().enumerate() {
            let row: Vec<f64> = values.data()[i * k..(i + 1) * k]
                .iter()
                .map(|v| v.as_f64())
                .collect();
            let pred = crate::eval::argmax_class(&row);
            out.push(WindowPrediction {
                window_start: start,
                timestamp_s: (start + WINDOW_LEN) as f64 / rate,
                action_id: pred as u8 + 1,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Silent,
    Notify,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::Silent => write!(f, "silent"),
            Decision::Notify => write!(f, "notify"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub timestamp_s: f64,
    pub window_start: usize,
    pub action_id: u8,
    pub decision: Decision,
}

/// Silent/notify state machine. A mask-related prediction records a mask
/// event and stays silent; a non-mask prediction notifies only when no mask
/// event happened within the silence window and the cool-down since the last
/// notification has passed.
#[derive(Clone, Debug, Default)]
pub struct ReminderState {
    last_mask_event_s: Option<f64>,
    last_notify_s: Option<f64>,
    last_timestamp_s: Option<f64>,
    log: Vec<DecisionRecord>,
}

impl ReminderState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn last_mask_event_s(&self) -> Option<f64> {
        self.last_mask_event_s
    }

    /// The strictly time-ordered decision log.
    pub fn log(&self) -> &[DecisionRecord] {
        &self.log
    }

    pub fn update(
        &mut self,
        prediction: &WindowPrediction,
        cfg: &StreamConfig,
    ) -> Result<Decision> {
        let now = prediction.timestamp_s;
        if let Some(prev) = self.last_timestamp_s {
            if now <= prev {
                return Err(Error::StreamOrder {
                    previous: prev,
                    current: now,
                });
            }
        }
        self.last_timestamp_s = Some(now);
        let decision = if is_mask_action(prediction.action_id) {
            self.last_mask_event_s = Some(now);
            Decision::Silent
        } else {
            let overdue = self
                .last_mask_event_s
                .map_or(true, |t| now - t > cfg.silence_window_s);
            let cooled = self
                .last_notify_s
                .map_or(true, |t| now - t >= cfg.cooldown_s);
            if overdue && cooled {
                self.last_notify_s = Some(now);
                Decision::Notify
            } else {
                Decision::Silent
            }
        };
        self.log.push(DecisionRecord {
            timestamp_s: now,
            window_start: prediction.window_start,
            action_id: prediction.action_id,
            decision,
        });
        Ok(decision)
    }
}

/// Classifies a trace and replays it through the state machine.
pub fn run_reminder<F: Scalar>(
    model: &MixerModel<F>,
    trace: &Trace,
    cfg: &StreamConfig,
) -> Result<Vec<DecisionRecord>> {
    let predictions = stream_classify(model, trace, cfg.stride)?;
    let mut state = ReminderState::new();
    for p in &predictions {
        state.update(p, cfg)?;
    }
    Ok(state.log.clone())
}

/// Decision log as CSV: `timestamp,window_start,predicted_action,decision`.
pub fn write_decisions_csv(path: &Path, log: &[DecisionRecord]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "timestamp,window_start,predicted_action,decision")?;
    for rec in log {
        writeln!(
            w,
            "{},{},{},{}",
            rec.timestamp_s, rec.window_start, rec.action_id, rec.decision
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Hand, NormalizedSegment, SAMPLE_RATE_HZ};
    use crate::model::MixerConfig;
    use crate::optim::{train, TrainConfig, TrainSchedule};

    fn prediction(start: usize, action: u8) -> WindowPrediction {
        WindowPrediction {
            window_start: start,
            timestamp_s: (start + WINDOW_LEN) as f64 / SAMPLE_RATE_HZ as f64,
            action_id: action,
        }
    }

    fn constant_trace(len: usize) -> Trace {
        Trace {
            acc: vec![[0.1, 0.2, 0.3]; len],
            gyro: vec![[0.0, -0.1, 0.1]; len],
            sample_rate: SAMPLE_RATE_HZ,
        }
    }

    fn any_model() -> MixerModel<f64> {
        MixerModel::new(MixerConfig::new(32, 8, 1).unwrap(), 7).unwrap()
    }

    #[test]
    fn exact_window_trace_yields_one_window() {
        let model = any_model();
        let preds = stream_classify(&model, &constant_trace(WINDOW_LEN), 64).unwrap();
        assert_eq!(preds.len(), 1);
        assert_eq!(preds[0].window_start, 0);
        assert!((preds[0].timestamp_s - 2.56).abs() < 1e-12);
    }

    #[test]
    fn stride_64_over_256_samples_yields_three_windows() {
        let model = any_model();
        let preds = stream_classify(&model, &constant_trace(256), 64).unwrap();
        let starts: Vec<usize> = preds.iter().map(|p| p.window_start).collect();
        assert_eq!(starts, vec![0, 64, 128]);
    }

    #[test]
    fn short_trace_yields_empty_result() {
        let model = any_model();
        let preds = stream_classify(&model, &constant_trace(100), 64).unwrap();
        assert!(preds.is_empty());
    }

    #[test]
    fn zero_stride_is_config_error() {
        let model = any_model();
        assert!(matches!(
            stream_classify(&model, &constant_trace(256), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mask_prediction_records_event_and_stays_silent() {
        let mut state = ReminderState::new();
        let cfg = StreamConfig::default();
        let d = state.update(&prediction(0, 1), &cfg).unwrap();
        assert_eq!(d, Decision::Silent);
        assert_eq!(state.last_mask_event_s(), Some(2.56));
    }

    #[test]
    fn interference_with_no_prior_mask_event_notifies() {
        let mut state = ReminderState::new();
        let cfg = StreamConfig::default();
        let d = state.update(&prediction(0, 9), &cfg).unwrap();
        assert_eq!(d, Decision::Notify);
    }

    #[test]
    fn interference_within_silence_window_stays_silent() {
        let mut state = ReminderState::new();
        let cfg = StreamConfig {
            silence_window_s: 100.0,
            ..Default::default()
        };
        state.update(&prediction(0, 2), &cfg).unwrap();
        // 50 seconds later: inside the window
        let d = state
            .update(&prediction(50 * SAMPLE_RATE_HZ as usize, 9), &cfg)
            .unwrap();
        assert_eq!(d, Decision::Silent);
        // 150 seconds later: overdue
        let d = state
            .update(&prediction(150 * SAMPLE_RATE_HZ as usize, 9), &cfg)
            .unwrap();
        assert_eq!(d, Decision::Notify);
    }

    #[test]
    fn non_monotone_timestamps_are_rejected() {
        let mut state = ReminderState::new();
        let cfg = StreamConfig::default();
        state.update(&prediction(64, 9), &cfg).unwrap();
        assert!(matches!(
            state.update(&prediction(0, 9), &cfg),
            Err(Error::StreamOrder { .. })
        ));
    }

    #[test]
    fn all_mask_predictions_never_notify() {
        let mut state = ReminderState::new();
        let cfg = StreamConfig {
            silence_window_s: 1.0, // even a tiny window
            ..Default::default()
        };
        for w in 0..200 {
            let d = state
                .update(&prediction(w * 64, (w % 6) as u8 + 1), &cfg)
                .unwrap();
            assert_eq!(d, Decision::Silent);
        }
    }

    #[test]
    fn notifications_respect_cooldown() {
        let mut state = ReminderState::new();
        let cfg = StreamConfig {
            silence_window_s: 5.0,
            cooldown_s: 30.0,
            ..Default::default()
        };
        for w in 0..500 {
            state.update(&prediction(w * 64, 9), &cfg).unwrap();
        }
        let notify_times: Vec<f64> = state
            .log()
            .iter()
            .filter(|r| r.decision == Decision::Notify)
            .map(|r| r.timestamp_s)
            .collect();
        assert!(notify_times.len() > 1);
        for pair in notify_times.windows(2) {
            assert!(pair[1] - pair[0] >= cfg.cooldown_s, "{pair:?}");
        }
    }

    #[test]
    fn decisions_csv_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("decisions.csv");
        let log = vec![DecisionRecord {
            timestamp_s: 2.56,
            window_start: 0,
            action_id: 9,
            decision: Decision::Notify,
        }];
        write_decisions_csv(&path, &log).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "timestamp,window_start,predicted_action,decision\n2.56,0,9,notify\n"
        );
    }

    /// Builds a two-band signal segment: one of two distinct constant
    /// patterns, enough for a tiny model to tell apart.
    fn banded_segment(action: u8, n: usize) -> Vec<NormalizedSegment> {
        let sign = if is_mask_action(action) { 1.0 } else { -1.0 };
        (0..n)
            .map(|r| NormalizedSegment {
                subject_id: "s01".into(),
                action_id: action,
                hand: if r % 2 == 0 { Hand::Left } else { Hand::Right },
                acc: (0..WINDOW_LEN)
                    .map(|t| [sign, sign * 0.5 + 0.01 * (t as f64 * 0.2).sin(), -sign])
                    .collect(),
                gyro: (0..WINDOW_LEN).map(|_| [-sign, sign, sign * 0.3]).collect(),
                parent_stamp: action as u64 * 100 + r as u64,
                chunk_index: 0,
                source_len: WINDOW_LEN,
            })
            .collect()
    }

    #[test]
    fn trained_model_sees_both_actions_in_a_concatenated_trace() {
        let mut data = banded_segment(2, 12);
        data.extend(banded_segment(9, 12));
        let refs: Vec<&NormalizedSegment> = data.iter().collect();
        let mut model = MixerModel::<f64>::new(MixerConfig::new(32, 8, 1).unwrap(), 3).unwrap();
        let cfg = TrainConfig {
            schedule: TrainSchedule {
                max_epochs: 40,
                ..Default::default()
            },
            batch_size: 8,
            seed: 9,
            ..Default::default()
        };
        train(&mut model, &refs, &cfg).unwrap();

        // trace: class-2 signal then class-9 signal, 256 samples each
        let mask = banded_segment(2, 1).remove(0);
        let interference = banded_segment(9, 1).remove(0);
        let mut trace = Trace {
            acc: Vec::new(),
            gyro: Vec::new(),
            sample_rate: SAMPLE_RATE_HZ,
        };
        for _ in 0..2 {
            trace.acc.extend_from_slice(&mask.acc);
            trace.gyro.extend_from_slice(&mask.gyro);
        }
        for _ in 0..2 {
            trace.acc.extend_from_slice(&interference.acc);
            trace.gyro.extend_from_slice(&interference.gyro);
        }
        let preds = stream_classify(&model, &trace, 128).unwrap();
        let actions: Vec<u8> = preds.iter().map(|p| p.action_id).collect();
        assert!(actions.contains(&2), "{actions:?}");
        assert!(actions.contains(&9), "{actions:?}");
    }

    #[test]
    fn trace_jsonl_concatenates_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let mut text = String::new();
        for _ in 0..2 {
            text.push_str(
                &serde_json::json!({
                    "subject_id": "s01", "action_id": 1, "hand": "left",
                    "sample_rate": 50,
                    "acc": vec![[0.0, 0.0, 0.0]; 100],
                    "gyro": vec![[0.0, 0.0, 0.0]; 100],
                    "repeat_index": 0, "order_stamp": 0
                })
                .to_string(),
            );
            text.push('\n');
        }
        std::fs::write(&path, text).unwrap();
        let trace = read_trace_jsonl(&path).unwrap();
        assert_eq!(trace.len(), 200);
        assert_eq!(trace.sample_rate, 50);
    }
}
