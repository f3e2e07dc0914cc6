//! Segment ingestion, length normalization, fold construction and the
//! synthetic IMU generator.
//!
//! Segments are stored as JSON lines, one record per line; see FORMATS.md at
//! the repository root for the schema.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NUM_ACTIONS: usize = 18;
pub const WINDOW_LEN: usize = 128;
/// Segments shorter than this are discarded by length normalization.
pub const MIN_SEGMENT_LEN: usize = 50;
pub const SAMPLE_RATE_HZ: u32 = 50;

/// Actions 1-6 are mask-related; 7-18 are interfering actions.
pub fn is_mask_action(action_id: u8) -> bool {
    (1..=6).contains(&action_id)
}

pub fn class_index(action_id: u8) -> usize {
    action_id as usize - 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hand {
    Left,
    Right,
}

impl fmt::Display for Hand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Hand::Left => write!(f, "left"),
            Hand::Right => write!(f, "right"),
        }
    }
}

/// One labeled 6-channel IMU recording of a single hand action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub subject_id: String,
    /// 1-based action id in `[1, 18]`.
    pub action_id: u8,
    pub hand: Hand,
    pub sample_rate: u32,
    pub acc: Vec<[f64; 3]>,
    pub gyro: Vec<[f64; 3]>,
    pub repeat_index: u32,
    /// Monotone counter establishing temporal order across a recording
    /// session; fold grouping sorts by it.
    pub order_stamp: u64,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.acc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acc.is_empty()
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.action_id < 1 || self.action_id > NUM_ACTIONS as u8 {
            return Err(format!(
                "subject {:?} repeat {}: action_id {} outside [1, {NUM_ACTIONS}]",
                self.subject_id, self.repeat_index, self.action_id
            ));
        }
        if self.acc.len() != self.gyro.len() {
            return Err(format!(
                "subject {:?} repeat {}: acc has {} samples, gyro has {}",
                self.subject_id,
                self.repeat_index,
                self.acc.len(),
                self.gyro.len()
            ));
        }
        if self.acc.is_empty() {
            return Err(format!(
                "subject {:?} repeat {}: empty segment",
                self.subject_id, self.repeat_index
            ));
        }
        if self.sample_rate == 0 {
            return Err(format!(
                "subject {:?} repeat {}: sample_rate must be positive",
                self.subject_id, self.repeat_index
            ));
        }
        Ok(())
    }
}

/// A segment brought to exactly [`WINDOW_LEN`] samples, with provenance back
/// to its source recording.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedSegment {
    pub subject_id: String,
    pub action_id: u8,
    pub hand: Hand,
    pub acc: Vec<[f64; 3]>,
    pub gyro: Vec<[f64; 3]>,
    /// `order_stamp` of the source segment; chunks of one long recording
    /// share it and are kept in the same fold group.
    pub parent_stamp: u64,
    pub chunk_index: u32,
    pub source_len: usize,
}

/// Applies the length rules: drop segments under 50 samples, zero-pad 50-128
/// at the tail, split longer ones into consecutive 128-sample chunks and
/// treat the final remainder by the first two rules.
pub fn normalize_length(seg: &Segment) -> Vec<NormalizedSegment> {
    let len = seg.len();
    let full = len / WINDOW_LEN;
    let rem = len % WINDOW_LEN;
    let mut out = Vec::new();
    let mut push = |chunk_index: u32, start: usize, take: usize| {
        let mut acc = seg.acc[start..start + take].to_vec();
        let mut gyro = seg.gyro[start..start + take].to_vec();
        acc.resize(WINDOW_LEN, [0.0; 3]);
        gyro.resize(WINDOW_LEN, [0.0; 3]);
        out.push(NormalizedSegment {
            subject_id: seg.subject_id.clone(),
            action_id: seg.action_id,
            hand: seg.hand,
            acc,
            gyro,
            parent_stamp: seg.order_stamp,
            chunk_index,
            source_len: len,
        });
    };
    for k in 0..full {
        push(k as u32, k * WINDOW_LEN, WINDOW_LEN);
    }
    if rem >= MIN_SEGMENT_LEN {
        push(full as u32, full * WINDOW_LEN, rem);
    }
    out
}

pub fn normalize_all(segments: &[Segment]) -> Vec<NormalizedSegment> {
    segments.iter().flat_map(normalize_length).collect()
}

/// Ingestion tallies, serialized as a JSON report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestStats {
    pub raw_segments: usize,
    pub normalized_segments: usize,
    /// Raw segments or remainder chunks dropped for being under 50 samples.
    pub discarded_short: usize,
    pub per_subject: BTreeMap<String, usize>,
    /// Raw counts indexed by `action_id - 1`.
    pub per_action: Vec<usize>,
    pub per_hand: BTreeMap<String, usize>,
}

impl IngestStats {
    fn tally(segments: &[Segment]) -> Self {
        let mut stats = IngestStats {
            per_action: vec![0; NUM_ACTIONS],
            ..Default::default()
        };
        for seg in segments {
            stats.raw_segments += 1;
            *stats.per_subject.entry(seg.subject_id.clone()).or_default() += 1;
            stats.per_action[class_index(seg.action_id)] += 1;
            *stats.per_hand.entry(seg.hand.to_string()).or_default() += 1;
            let len = seg.len();
            let full = len / WINDOW_LEN;
            let rem = len % WINDOW_LEN;
            stats.normalized_segments += full;
            if rem >= MIN_SEGMENT_LEN {
                stats.normalized_segments += 1;
            } else if rem > 0 {
                stats.discarded_short += 1;
            }
        }
        stats
    }
}

/// Reads a JSON-lines segment file. Parse and schema failures name the
/// offending 1-based line.
pub fn ingest(path: &Path) -> Result<(Vec<Segment>, IngestStats)> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut segments = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let seg: Segment = serde_json::from_str(&line).map_err(|e| Error::Data {
            line: idx + 1,
            message: e.to_string(),
        })?;
        seg.validate().map_err(|message| Error::Data {
            line: idx + 1,
            message,
        })?;
        segments.push(seg);
    }
    let stats = IngestStats::tally(&segments);
    Ok((segments, stats))
}

pub fn write_segments_jsonl(path: &Path, segments: &[Segment]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for seg in segments {
        serde_json::to_writer(&mut w, seg)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolKind {
    UserDependent,
    UserIndependent,
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProtocolKind::UserDependent => write!(f, "user-dependent"),
            ProtocolKind::UserIndependent => write!(f, "user-independent"),
        }
    }
}

/// Train/test index split over a normalized segment list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub protocol: ProtocolKind,
    pub fold_index: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub const USER_DEPENDENT_FOLDS: usize = 5;

/// Five-fold leave-one-group-out split. Within every (subject, action) pair
/// the source recordings are ordered by `order_stamp` and split into five
/// groups of as-equal-as-possible size (earlier groups take the extras);
/// fold `k` tests on group `k`. Chunks of one recording stay together.
pub fn make_user_dependent_folds(segments: &[NormalizedSegment]) -> Vec<FoldSpec> {
    // (subject, action) -> parent stamp -> segment indices
    let mut groups: BTreeMap<(String, u8), BTreeMap<u64, Vec<usize>>> = BTreeMap::new();
    for (i, seg) in segments.iter().enumerate() {
        groups
            .entry((seg.subject_id.clone(), seg.action_id))
            .or_default()
            .entry(seg.parent_stamp)
            .or_default()
            .push(i);
    }
    let mut folds: Vec<FoldSpec> = (0..USER_DEPENDENT_FOLDS)
        .map(|k| FoldSpec {
            protocol: ProtocolKind::UserDependent,
            fold_index: k,
            train: Vec::new(),
            test: Vec::new(),
        })
        .collect();
    for parents in groups.values() {
        let parents: Vec<&Vec<usize>> = parents.values().collect();
        let n = parents.len();
        let base = n / USER_DEPENDENT_FOLDS;
        let extra = n % USER_DEPENDENT_FOLDS;
        let mut cursor = 0;
        for k in 0..USER_DEPENDENT_FOLDS {
            let take = base + usize::from(k < extra);
            let fold_test = cursor..cursor + take;
            cursor += take;
            for (p, indices) in parents.iter().enumerate() {
                if fold_test.contains(&p) {
                    folds[k].test.extend_from_slice(indices);
                } else {
                    folds[k].train.extend_from_slice(indices);
                }
            }
        }
    }
    for fold in &mut folds {
        fold.train.sort_unstable();
        fold.test.sort_unstable();
    }
    folds
}

/// Leave-one-subject-out: one fold per subject, testing on that subject's
/// segments and training on everyone else's.
pub fn make_user_independent_folds(segments: &[NormalizedSegment]) -> Result<Vec<FoldSpec>> {
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, seg) in segments.iter().enumerate() {
        by_subject.entry(&seg.subject_id).or_default().push(i);
    }
    if by_subject.len() < 2 {
        return Err(Error::Protocol(format!(
            "user-independent protocol needs at least 2 subjects, found {}",
            by_subject.len()
        )));
    }
    Ok(by_subject
        .values()
        .enumerate()
        .map(|(fold_index, test)| FoldSpec {
            protocol: ProtocolKind::UserIndependent,
            fold_index,
            train: (0..segments.len()).filter(|i| !test.contains(i)).collect(),
            test: test.clone(),
        })
        .collect())
}

/// Stacks normalized segments into model inputs: `[B x 128 x 3]` tensors for
/// accelerometer and gyroscope plus 0-based class labels.
pub fn batch_tensors<F: Scalar>(
    segments: &[&NormalizedSegment],
) -> (Tensor<F>, Tensor<F>, Vec<usize>) {
    let b = segments.len();
    let mut acc = Vec::with_capacity(b * WINDOW_LEN * 3);
    let mut gyro = Vec::with_capacity(b * WINDOW_LEN * 3);
    let mut labels = Vec::with_capacity(b);
    for seg in segments {
        for s in &seg.acc {
            acc.extend(s.iter().map(|&v| F::from_f64(v)));
        }
        for s in &seg.gyro {
            gyro.extend(s.iter().map(|&v| F::from_f64(v)));
        }
        labels.push(class_index(seg.action_id));
    }
    let shape = vec![b, WINDOW_LEN, 3];
    (
        Tensor::new(shape.clone(), acc).expect("acc batch shape"),
        Tensor::new(shape, gyro).expect("gyro batch shape"),
        labels,
    )
}

/// Synthetic 18-class dataset for desk-scale runs.
///
/// Each class gets a distinct base frequency (0.5 + 0.3(k-1) Hz), envelope
/// exponent and per-channel energy signature; subjects add amplitude, phase
/// and small frequency offsets; every sample carries Gaussian noise. Raw
/// lengths are drawn from [60, 300] so all normalization branches occur:
/// pad, exact window, split with kept remainder, split with dropped
/// remainder. Deterministic for a given seed.
pub fn synth_generate(num_subjects: usize, per_class: usize, seed: u64) -> Vec<Segment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.08).expect("noise sigma");
    let mut segments = Vec::with_capacity(num_subjects * NUM_ACTIONS * per_class);
    let mut order_stamp = 0u64;
    for s in 0..num_subjects {
        let subject_id = format!("s{:02}", s + 1);
        let subject_amp: f64 = rng.gen_range(0.85..1.15);
        let subject_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let subject_freq_scale: f64 = rng.gen_range(0.98..1.02);
        for action in 1..=NUM_ACTIONS as u8 {
            let k = action as f64;
            let base_freq = 0.5 + 0.3 * (k - 1.0);
            let envelope_exp = 1.0 + (action % 3) as f64;
            for r in 0..per_class {
                let hand = if r % 2 == 0 { Hand::Left } else { Hand::Right };
                let hand_amp = match hand {
                    Hand::Left => 1.0,
                    Hand::Right => 1.05,
                };
                let len = draw_length(&mut rng);
                let repeat_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let freq = base_freq * subject_freq_scale;
                let mut acc = Vec::with_capacity(len);
                let mut gyro = Vec::with_capacity(len);
                for t in 0..len {
                    let tt = t as f64 / SAMPLE_RATE_HZ as f64;
                    let env = (std::f64::consts::PI * (t + 1) as f64 / (len + 1) as f64)
                        .sin()
                        .powf(envelope_exp);
                    let carrier = std::f64::consts::TAU * freq * tt + subject_phase + repeat_phase;
                    let mut a = [0.0; 3];
                    let mut g = [0.0; 3];
                    for ch in 0..3 {
                        let ch_shift = ch as f64 * std::f64::consts::TAU / 3.0;
                        // phase-invariant per-class energy signature
                        let acc_weight =
                            1.0 + 0.4 * (std::f64::consts::TAU * k * (ch + 1) as f64 / 6.0).cos();
                        let gyro_weight =
                            1.0 + 0.4 * (std::f64::consts::TAU * k * (ch + 4) as f64 / 6.0).cos();
                        a[ch] = subject_amp * hand_amp * acc_weight * env
                            * (carrier + ch_shift).sin()
                            + noise.sample(&mut rng);
                        g[ch] = 0.8
                            * subject_amp
                            * hand_amp
                            * gyro_weight
                            * env
                            * (1.5 * carrier + ch_shift).cos()
                            + noise.sample(&mut rng);
                    }
                    acc.push(a);
                    gyro.push(g);
                }
                segments.push(Segment {
                    subject_id: subject_id.clone(),
                    action_id: action,
                    hand,
                    sample_rate: SAMPLE_RATE_HZ,
                    acc,
                    gyro,
                    repeat_index: r as u32,
                    order_stamp,
                });
                order_stamp += 1;
            }
        }
    }
    segments
}

fn draw_length(rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen_range(0.0..1.0);
    if u < 0.78 {
        rng.gen_range(60..=127)
    } else if u < 0.84 {
        WINDOW_LEN
    } else if u < 0.92 {
        // two normalized windows: full chunk plus a kept remainder
        rng.gen_range(178..=255)
    } else if u < 0.96 {
        // remainder under 50 gets dropped
        rng.gen_range(129..=177)
    } else {
        rng.gen_range(256..=300)
    }
}
