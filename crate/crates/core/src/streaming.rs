//! Streaming data pipeline: a fixed-size storage window that batches
//! incoming frames, a FIFO training window they are flushed into, synthetic
//! per-vehicle stream generators, and a CSV trace loader.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::model::Batch;

pub const DEFAULT_STORAGE_CAPACITY: usize = 100;
pub const DEFAULT_TRAINING_CAPACITY: usize = 2000;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.70;

/// Feature width produced by [`synth_stream`]: three lagged angles plus the
/// two most recent angle deltas.
pub const SYNTH_FEATURE_DIM: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum StreamError {
    #[error("out-of-order timestep: last {last}, got {got}")]
    OutOfOrderTimestep { last: u64, got: u64 },
    #[error("storage window already full (capacity {0})")]
    WindowFull(usize),
    #[error("flush requires a full storage window: {len} of {capacity}")]
    FlushNotReady { len: usize, capacity: usize },
    #[error("training window is empty")]
    EmptyWindow,
    #[error("batch size must be >= 1")]
    BadBatchSize,
    #[error("stream is empty")]
    EmptyStream,
    #[error("train fraction must be in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("trace row {row}: {message}")]
    TraceParse { row: usize, message: String },
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for StreamError {
    fn from(e: std::io::Error) -> Self {
        StreamError::Io(e.to_string())
    }
}

/// One timestep of a data stream: feature vector plus ground-truth angle in
/// degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub t: u64,
    pub features: Vec<f64>,
    pub angle: f64,
}

/// Signal returned by [`StorageWindow::push_frame`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlushSignal {
    None,
    Ready,
}

/// Fixed-size buffer that accumulates incoming frames until a bulk move into
/// the training window is due.
#[derive(Debug, Clone)]
pub struct StorageWindow {
    capacity: usize,
    buffer: Vec<Frame>,
    last_t: Option<u64>,
}

impl StorageWindow {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "storage capacity must be >= 1");
        Self {
            capacity,
            buffer: Vec::with_capacity(capacity),
            last_t: None,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn frames(&self) -> &[Frame] {
        &self.buffer
    }

    /// Appends a frame. Returns [`FlushSignal::Ready`] exactly when the
    /// window has just reached its capacity.
    pub fn push_frame(&mut self, frame: Frame) -> Result<FlushSignal, StreamError> {
        if let Some(last) = self.last_t {
            if frame.t <= last {
                return Err(StreamError::OutOfOrderTimestep {
                    last,
                    got: frame.t,
                });
            }
        }
        if self.buffer.len() == self.capacity {
            return Err(StreamError::WindowFull(self.capacity));
        }
        self.last_t = Some(frame.t);
        self.buffer.push(frame);
        if self.buffer.len() == self.capacity {
            Ok(FlushSignal::Ready)
        } else {
            Ok(FlushSignal::None)
        }
    }
}

/// FIFO window the model trains on. Inserting `k` frames beyond capacity
/// evicts exactly the `k` oldest.
#[derive(Debug, Clone)]
pub struct TrainingWindow {
    capacity: usize,
    buffer: VecDeque<Frame>,
}

impl TrainingWindow {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "training capacity must be >= 1");
        Self {
            capacity,
            buffer: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn frames(&self) -> impl Iterator<Item = &Frame> {
        self.buffer.iter()
    }

    pub fn frame(&self, i: usize) -> &Frame {
        &self.buffer[i]
    }
}

/// Moves the full storage window into the training window, evicting the
/// oldest training frames on overflow. The storage window comes back empty.
pub fn flush(storage: &mut StorageWindow, training: &mut TrainingWindow) -> Result<(), StreamError> {
    if storage.len() != storage.capacity() {
        return Err(StreamError::FlushNotReady {
            len: storage.len(),
            capacity: storage.capacity(),
        });
    }
    for frame in storage.buffer.drain(..) {
        if training.buffer.len() == training.capacity {
            training.buffer.pop_front();
        }
        training.buffer.push_back(frame);
    }
    Ok(())
}

/// Splits the training window into mini-batches after a deterministic
/// shuffle. Every frame lands in exactly one batch; the last batch may be
/// short.
pub fn make_batches(
    training: &TrainingWindow,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<Vec<Batch>, StreamError> {
    if batch_size == 0 {
        return Err(StreamError::BadBatchSize);
    }
    if training.is_empty() {
        return Err(StreamError::EmptyWindow);
    }
    let n = training.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let input_dim = training.frame(0).features.len();
    let mut batches = Vec::with_capacity(n.div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let mut inputs = Vec::with_capacity(chunk.len() * input_dim);
        let mut targets = Vec::with_capacity(chunk.len());
        for &idx in chunk {
            let frame = training.frame(idx);
            inputs.extend_from_slice(&frame.features);
            targets.push(frame.angle);
        }
        batches.push(Batch::new(inputs, targets, input_dim).expect("window frames are non-empty"));
    }
    Ok(batches)
}

/// Synthetic per-vehicle stream profile. `angle_range` bounds turn peaks,
/// `turn_rate` is the fraction of timesteps spent inside turns, and noise is
/// clamped at three standard deviations so the angle support stays inside
/// `angle_range + 3 * noise_sd`.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamProfile {
    pub name: String,
    pub angle_range: f64,
    pub turn_rate: f64,
    pub noise_sd: f64,
    pub gen_seed: u64,
}

impl StreamProfile {
    pub fn new(
        name: impl Into<String>,
        angle_range: f64,
        turn_rate: f64,
        noise_sd: f64,
        gen_seed: u64,
    ) -> Self {
        assert!(angle_range > 0.0, "angle_range must be positive");
        assert!((0.0..=1.0).contains(&turn_rate), "turn_rate must be in [0, 1]");
        Self {
            name: name.into(),
            angle_range,
            turn_rate,
            noise_sd,
            gen_seed,
        }
    }
}

fn clamped_noise(rng: &mut ChaCha8Rng, normal: Option<&Normal<f64>>, sd: f64) -> f64 {
    match normal {
        Some(dist) => dist.sample(rng).clamp(-3.0 * sd, 3.0 * sd),
        None => 0.0,
    }
}

/// Generates a piecewise-smooth angle signal: straight segments near zero
/// alternating with sinusoidal turn bumps whose peaks stay within
/// `angle_range`. Features embed the three previous angles and the two most
/// recent deltas, so the model predicts the next angle from recent history.
pub fn synth_stream(profile: &StreamProfile, n_frames: usize) -> Vec<Frame> {
    assert!(n_frames >= 1, "n_frames must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(profile.gen_seed);
    let normal = if profile.noise_sd > 0.0 {
        Some(Normal::new(0.0, profile.noise_sd).expect("finite noise sd"))
    } else {
        None
    };

    let mut angles = Vec::with_capacity(n_frames);
    while angles.len() < n_frames {
        let pair_len = rng.random_range(30..=80usize);
        let turn_len = (pair_len as f64 * profile.turn_rate).round() as usize;
        let straight_len = pair_len - turn_len;
        for _ in 0..straight_len {
            angles.push(clamped_noise(&mut rng, normal.as_ref(), profile.noise_sd));
        }
        if turn_len > 0 {
            let sign = if rng.random_range(0..2u8) == 0 { 1.0 } else { -1.0 };
            let amplitude = sign * profile.angle_range * rng.random_range(0.3..=1.0);
            for i in 0..turn_len {
                let phase = std::f64::consts::PI * (i as f64 + 0.5) / turn_len as f64;
                let noise = clamped_noise(&mut rng, normal.as_ref(), profile.noise_sd);
                let turn = (amplitude * phase.sin()).clamp(-profile.angle_range, profile.angle_range);
                angles.push(turn + noise);
            }
        }
    }
    angles.truncate(n_frames);

    let lag = |angles: &[f64], t: usize, k: usize| -> f64 {
        if t >= k {
            angles[t - k]
        } else {
            0.0
        }
    };

    (0..n_frames)
        .map(|t| {
            let a1 = lag(&angles, t, 1);
            let a2 = lag(&angles, t, 2);
            let a3 = lag(&angles, t, 3);
            Frame {
                t: t as u64,
                features: vec![a3, a2, a1, a2 - a3, a1 - a2],
                angle: angles[t],
            }
        })
        .collect()
}

/// Loads a frame stream from a CSV trace with header `t,f0,...,f{k},angle`.
pub fn load_trace_csv(path: impl AsRef<Path>) -> Result<Vec<Frame>, StreamError> {
    let file = std::fs::File::open(path.as_ref())?;
    let mut lines = BufReader::new(file).lines();

    let header = match lines.next() {
        Some(line) => line?,
        None => {
            return Err(StreamError::TraceParse {
                row: 0,
                message: "missing header".into(),
            })
        }
    };
    let columns: Vec<&str> = header.trim_end().split(',').collect();
    if columns.len() < 3 || columns[0] != "t" || *columns.last().unwrap() != "angle" {
        return Err(StreamError::TraceParse {
            row: 0,
            message: format!("expected header `t,f0,...,angle`, got `{header}`"),
        });
    }
    let n_features = columns.len() - 2;

    let mut frames = Vec::new();
    let mut last_t: Option<u64> = None;
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != columns.len() {
            return Err(StreamError::TraceParse {
                row,
                message: format!("expected {} columns, got {}", columns.len(), fields.len()),
            });
        }
        let t: u64 = fields[0].parse().map_err(|e| StreamError::TraceParse {
            row,
            message: format!("bad timestep `{}`: {e}", fields[0]),
        })?;
        if let Some(last) = last_t {
            if t <= last {
                return Err(StreamError::TraceParse {
                    row,
                    message: format!("non-monotone timestep {t} after {last}"),
                });
            }
        }
        last_t = Some(t);
        let mut features = Vec::with_capacity(n_features);
        for f in &fields[1..=n_features] {
            features.push(f.parse::<f64>().map_err(|e| StreamError::TraceParse {
                row,
                message: format!("bad feature `{f}`: {e}"),
            })?);
        }
        let angle: f64 = fields[n_features + 1]
            .parse()
            .map_err(|e| StreamError::TraceParse {
                row,
                message: format!("bad angle `{}`: {e}", fields[n_features + 1]),
            })?;
        frames.push(Frame { t, features, angle });
    }
    Ok(frames)
}

/// Writes frames in the trace CSV format read back by [`load_trace_csv`].
pub fn write_trace_csv(frames: &[Frame], path: impl AsRef<Path>) -> Result<(), StreamError> {
    let n_features = frames.first().map_or(0, |f| f.features.len());
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    write!(out, "t")?;
    for i in 0..n_features {
        write!(out, ",f{i}")?;
    }
    writeln!(out, ",angle")?;
    for frame in frames {
        write!(out, "{}", frame.t)?;
        for f in &frame.features {
            write!(out, ",{f:.16e}")?;
        }
        writeln!(out, ",{:.16e}", frame.angle)?;
    }
    Ok(())
}

/// Temporal prefix/suffix split at `floor(n * fraction)`; no shuffling.
pub fn split_stream(
    frames: &[Frame],
    train_fraction: f64,
) -> Result<(Vec<Frame>, Vec<Frame>), StreamError> {
    if frames.is_empty() {
        return Err(StreamError::EmptyStream);
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(StreamError::BadFraction(train_fraction));
    }
    let cut = (frames.len() as f64 * train_fraction).floor() as usize;
    Ok((frames[..cut].to_vec(), frames[cut..].to_vec()))
}

/// Cursor over a client's training stream, feeding the window pair in
/// storage-window-sized chunks. Every engine ingests through this so window
/// evolution is identical across methods.
#[derive(Debug, Clone)]
pub struct StreamCursor {
    frames: Vec<Frame>,
    position: usize,
}

impl StreamCursor {
    pub fn new(frames: Vec<Frame>) -> Self {
        Self { frames, position: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.frames.len() - self.position
    }

    /// Pushes one storage window's worth of frames and flushes it into the
    /// training window. Returns `false` without touching the windows when
    /// the stream cannot fill the storage window any more.
    pub fn ingest_chunk(
        &mut self,
        storage: &mut StorageWindow,
        training: &mut TrainingWindow,
    ) -> Result<bool, StreamError> {
        let need = storage.capacity() - storage.len();
        if self.remaining() < need {
            return Ok(false);
        }
        for _ in 0..need {
            let frame = self.frames[self.position].clone();
            self.position += 1;
            storage.push_frame(frame)?;
        }
        flush(storage, training)?;
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(t: u64) -> Frame {
        Frame {
            t,
            features: vec![t as f64],
            angle: t as f64,
        }
    }

    #[test]
    fn push_signals_ready_at_capacity() {
        let mut storage = StorageWindow::new(100);
        for t in 0..99 {
            assert_eq!(storage.push_frame(frame(t)).unwrap(), FlushSignal::None);
        }
        assert_eq!(storage.push_frame(frame(99)).unwrap(), FlushSignal::Ready);
    }

    #[test]
    fn push_rejects_out_of_order() {
        let mut storage = StorageWindow::new(10);
        storage.push_frame(frame(5)).unwrap();
        let err = storage.push_frame(frame(5)).unwrap_err();
        assert_eq!(err, StreamError::OutOfOrderTimestep { last: 5, got: 5 });
    }

    #[test]
    fn flush_moves_everything() {
        let mut storage = StorageWindow::new(100);
        let mut training = TrainingWindow::new(2000);
        for t in 0..100 {
            storage.push_frame(frame(t)).unwrap();
        }
        flush(&mut storage, &mut training).unwrap();
        assert_eq!(storage.len(), 0);
        assert_eq!(training.len(), 100);
    }

    #[test]
    fn flush_requires_full_storage() {
        let mut storage = StorageWindow::new(100);
        let mut training = TrainingWindow::new(2000);
        storage.push_frame(frame(0)).unwrap();
        assert!(matches!(
            flush(&mut storage, &mut training),
            Err(StreamError::FlushNotReady { len: 1, capacity: 100 })
        ));
    }

    #[test]
    fn full_training_window_evicts_oldest() {
        let mut storage = StorageWindow::new(100);
        let mut training = TrainingWindow::new(2000);
        for chunk in 0..21 {
            for t in chunk * 100..(chunk + 1) * 100 {
                storage.push_frame(frame(t)).unwrap();
            }
            flush(&mut storage, &mut training).unwrap();
        }
        assert_eq!(training.len(), 2000);
        // 2100 frames seen, so the oldest surviving frame is #100 (0-based)
        assert_eq!(training.frame(0).t, 100);
        let ts: Vec<u64> = training.frames().map(|f| f.t).collect();
        assert!(ts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn batches_partition_the_window() {
        let mut storage = StorageWindow::new(10);
        let mut training = TrainingWindow::new(2000);
        let mut cursor = StreamCursor::new((0..2000).map(frame).collect());
        while cursor.ingest_chunk(&mut storage, &mut training).unwrap() {}
        assert_eq!(training.len(), 2000);

        let batches = make_batches(&training, 16, 42).unwrap();
        assert_eq!(batches.len(), 125);
        assert!(batches.iter().all(|b| b.len() == 16));

        let mut seen: Vec<f64> = batches.iter().flat_map(|b| b.targets().to_vec()).collect();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expected: Vec<f64> = (0..2000).map(|t| t as f64).collect();
        assert_eq!(seen, expected);
    }

    #[test]
    fn short_batch_rule() {
        let mut training = TrainingWindow::new(2000);
        let mut storage = StorageWindow::new(10);
        let mut cursor = StreamCursor::new((0..10).map(frame).collect());
        cursor.ingest_chunk(&mut storage, &mut training).unwrap();
        let batches = make_batches(&training, 16, 0).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].len(), 10);
    }

    #[test]
    fn batch_shuffle_is_deterministic() {
        let mut training = TrainingWindow::new(100);
        let mut storage = StorageWindow::new(50);
        let mut cursor = StreamCursor::new((0..100).map(frame).collect());
        while cursor.ingest_chunk(&mut storage, &mut training).unwrap() {}
        let a = make_batches(&training, 7, 9).unwrap();
        let b = make_batches(&training, 7, 9).unwrap();
        assert_eq!(a, b);
        let c = make_batches(&training, 7, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn make_batches_rejects_bad_input() {
        let training = TrainingWindow::new(10);
        assert_eq!(make_batches(&training, 16, 0).unwrap_err(), StreamError::EmptyWindow);
        let mut training = TrainingWindow::new(10);
        let mut storage = StorageWindow::new(1);
        let mut cursor = StreamCursor::new(vec![frame(0)]);
        cursor.ingest_chunk(&mut storage, &mut training).unwrap();
        assert_eq!(make_batches(&training, 0, 0).unwrap_err(), StreamError::BadBatchSize);
    }

    #[test]
    fn synth_respects_angle_support() {
        let profile = StreamProfile::new("hill", 50.0, 0.4, 2.0, 7);
        let frames = synth_stream(&profile, 10_000);
        assert_eq!(frames.len(), 10_000);
        let bound = 50.0 + 3.0 * 2.0;
        assert!(frames.iter().all(|f| f.angle.abs() <= bound));
    }

    #[test]
    fn synth_no_turns_is_pure_noise() {
        let profile = StreamProfile::new("flat", 50.0, 0.0, 1.5, 3);
        let frames = synth_stream(&profile, 5000);
        assert!(frames.iter().all(|f| f.angle.abs() <= 3.0 * 1.5));
    }

    #[test]
    fn synth_is_deterministic() {
        let profile = StreamProfile::new("city", 50.0, 0.25, 2.0, 11);
        assert_eq!(synth_stream(&profile, 500), synth_stream(&profile, 500));
    }

    #[test]
    fn synth_features_embed_history() {
        let profile = StreamProfile::new("city", 50.0, 0.25, 2.0, 11);
        let frames = synth_stream(&profile, 50);
        for t in 3..50 {
            let f = &frames[t];
            assert_eq!(f.features[0], frames[t - 3].angle);
            assert_eq!(f.features[1], frames[t - 2].angle);
            assert_eq!(f.features[2], frames[t - 1].angle);
            assert_eq!(f.features[3], frames[t - 2].angle - frames[t - 3].angle);
            assert_eq!(f.features[4], frames[t - 1].angle - frames[t - 2].angle);
        }
    }

    #[test]
    fn trace_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let frames = vec![
            Frame { t: 0, features: vec![0.25, -1.5], angle: 3.0 },
            Frame { t: 1, features: vec![1.0 / 3.0, 2.0], angle: -0.125 },
            Frame { t: 5, features: vec![f64::MIN_POSITIVE, 1e300], angle: 42.0 },
        ];
        write_trace_csv(&frames, &path).unwrap();
        let loaded = load_trace_csv(&path).unwrap();
        assert_eq!(loaded, frames);
    }

    #[test]
    fn trace_csv_reports_bad_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "t,f0,angle\n0,1.0,2.0\n1,3.0\n").unwrap();
        match load_trace_csv(&path).unwrap_err() {
            StreamError::TraceParse { row, .. } => assert_eq!(row, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn trace_csv_empty_data_is_ok() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        std::fs::write(&path, "t,f0,angle\n").unwrap();
        assert_eq!(load_trace_csv(&path).unwrap(), vec![]);
    }

    #[test]
    fn trace_csv_rejects_non_monotone_t() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("order.csv");
        std::fs::write(&path, "t,f0,angle\n3,1.0,2.0\n2,1.0,2.0\n").unwrap();
        match load_trace_csv(&path).unwrap_err() {
            StreamError::TraceParse { row, message } => {
                assert_eq!(row, 2);
                assert!(message.contains("non-monotone"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn split_stream_arithmetic() {
        let frames: Vec<Frame> = (0..40_000).map(frame).collect();
        let (train, eval) = split_stream(&frames, 0.70).unwrap();
        assert_eq!(train.len(), 28_000);
        assert_eq!(eval.len(), 12_000);

        let frames: Vec<Frame> = (0..10).map(frame).collect();
        let (train, eval) = split_stream(&frames, 0.70).unwrap();
        assert_eq!((train.len(), eval.len()), (7, 3));

        let mut rejoined = train;
        rejoined.extend(eval);
        assert_eq!(rejoined, frames);
    }

    #[test]
    fn split_stream_rejects_bad_input() {
        assert_eq!(split_stream(&[], 0.5).unwrap_err(), StreamError::EmptyStream);
        let frames = vec![frame(0)];
        assert!(matches!(split_stream(&frames, 0.0), Err(StreamError::BadFraction(_))));
        assert!(matches!(split_stream(&frames, 1.0), Err(StreamError::BadFraction(_))));
    }
}
