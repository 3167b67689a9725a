//! Streaming inference: one probability per chunk, never reading ahead.
//!
//! [`Replayer`] consumes chunk rows in arrival order and reproduces exactly
//! the windows the batch pipeline builds, so streamed probabilities are
//! bit-identical to batch evaluation. The catch is the reflection padding:
//! a pump's first `s−1` windows draw padded rows from *later* chunks (the
//! pad for `[a, b, c, …]` prepends `…, c, b`), so those windows are not
//! computable the moment their chunk arrives. The replayer therefore
//! withholds output until the window is determined by what has actually
//! arrived:
//!
//! - Once row `s−1` of a pump arrives, windows `0..s` are all fixed; the
//!   first `s` lines are emitted together, in chunk order.
//! - Every later row completes its own window immediately: one line per
//!   arrival.
//! - A pump that ends before reaching `s` rows bounces its reflection off
//!   both ends, which depends on the final pump length — those lines are
//!   emitted when the pump ends (next pump's first row, or [`Replayer::finish`]).
//!
//! Output lines are always in chunk order within a pump, and the window
//! content for every position matches [`crate::dataset::segment_pump`] on
//! the full pump — asserted down to the bit in this module's tests.

use std::collections::VecDeque;

use crate::dataset::{segment_pump, DatasetError, InputTransform, PumpSeries, Segment};
use crate::ingest::ChunkFeatures;
use crate::models::Model;
use crate::nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error(transparent)]
    Nn(#[from] NnError),

    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// One scored chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayEntry {
    /// Chunk start time, seconds since the epoch.
    pub date: f64,
    pub pump_index: i64,
    /// Chunk position within its pump.
    pub position: usize,
    pub probability: f64,
    /// `probability >= threshold`, same rule the metrics use.
    pub alert: bool,
}

/// Incremental streaming scorer. Feed rows with [`push`](Self::push), then
/// [`finish`](Self::finish) to flush a final short pump.
pub struct Replayer {
    model: Model,
    transform: InputTransform,
    seg_len: usize,
    threshold: f64,
    pump_index: Option<i64>,
    seen: usize,
    /// First `seg_len` rows of the current pump — the reflection span.
    head: Vec<ChunkFeatures>,
    /// Last `seg_len` rows of the current pump — the live window.
    tail: VecDeque<ChunkFeatures>,
}

impl Replayer {
    pub fn new(
        model: Model,
        transform: InputTransform,
        seg_len: usize,
        threshold: f64,
    ) -> Result<Self, ReplayError> {
        if seg_len == 0 {
            return Err(DatasetError::InvalidSegmentLength(0).into());
        }
        Ok(Replayer {
            model,
            transform,
            seg_len,
            threshold,
            pump_index: None,
            seen: 0,
            head: Vec::new(),
            tail: VecDeque::new(),
        })
    }

    /// Consume the next chunk row; returns every newly determined line, in
    /// chunk order.
    pub fn push(&mut self, row: &ChunkFeatures) -> Result<Vec<ReplayEntry>, ReplayError> {
        let mut out = Vec::new();
        if self.pump_index != Some(row.pump_index) {
            out.extend(self.flush_pump()?);
            self.pump_index = Some(row.pump_index);
        }

        self.seen += 1;
        if self.head.len() < self.seg_len {
            self.head.push(row.clone());
        }
        self.tail.push_back(row.clone());
        if self.tail.len() > self.seg_len {
            self.tail.pop_front();
        }

        if self.seen == self.seg_len {
            // The reflection span is complete: windows 0..seg_len are all
            // fixed now, and equal to what the batch segmenter produces for
            // any pump at least this long.
            let prefix =
                PumpSeries { pump_index: row.pump_index, rows: self.head.clone() };
            let segments = segment_pump(&prefix, self.seg_len)?;
            out.extend(self.score(&segments)?);
        } else if self.seen > self.seg_len {
            let position = self.seen - 1;
            let segment = self.tail_window(position);
            out.extend(self.score(&[segment])?);
        }
        Ok(out)
    }

    /// Flush a pump that ended with fewer than `seg_len` rows; call once the
    /// stream is exhausted.
    pub fn finish(&mut self) -> Result<Vec<ReplayEntry>, ReplayError> {
        let out = self.flush_pump()?;
        self.pump_index = None;
        Ok(out)
    }

    fn flush_pump(&mut self) -> Result<Vec<ReplayEntry>, ReplayError> {
        let mut out = Vec::new();
        if let Some(pump_index) = self.pump_index {
            if self.seen > 0 && self.seen < self.seg_len {
                // Short pump: reflection bounces between both ends, so the
                // windows only became determined now that the length is known.
                let pump = PumpSeries { pump_index, rows: self.head.clone() };
                let segments = segment_pump(&pump, self.seg_len)?;
                out.extend(self.score(&segments)?);
            }
        }
        self.seen = 0;
        self.head.clear();
        self.tail.clear();
        Ok(out)
    }

    /// The window ending at `position`, drawn purely from the live tail —
    /// past positions the reflection span, no padding is involved.
    fn tail_window(&self, position: usize) -> Segment {
        debug_assert_eq!(self.tail.len(), self.seg_len);
        let mut window = Vec::with_capacity(self.seg_len * crate::ingest::FEATURE_COUNT);
        let mut source_rows = Vec::with_capacity(self.seg_len);
        let mut contains_positive = false;
        for (offset, r) in self.tail.iter().enumerate() {
            window.extend_from_slice(&r.feature_vector());
            source_rows.push((position + 1 - self.seg_len + offset) as u32);
            contains_positive |= r.label == 1;
        }
        let last = self.tail.back().expect("tail holds seg_len rows");
        Segment {
            pump_index: last.pump_index,
            position,
            label: last.label,
            contains_positive,
            source_rows,
            window,
            seg_len: self.seg_len,
        }
    }

    fn score(&self, segments: &[Segment]) -> Result<Vec<ReplayEntry>, ReplayError> {
        let refs: Vec<&Segment> = segments.iter().collect();
        let (x, _) = self.transform.batch_tensor(&refs)?;
        let probs = self.model.predict(&x)?;
        Ok(segments
            .iter()
            .zip(probs)
            .map(|(seg, probability)| ReplayEntry {
                date: date_of(seg, &self.head, &self.tail),
                pump_index: seg.pump_index,
                position: seg.position,
                probability,
                alert: probability >= self.threshold,
            })
            .collect())
    }
}

/// The date of the chunk a segment scores (its last window row).
fn date_of(seg: &Segment, head: &[ChunkFeatures], tail: &VecDeque<ChunkFeatures>) -> f64 {
    if seg.position < head.len() {
        head[seg.position].date
    } else {
        // Tail windows are only built for the latest arrival.
        tail.back().expect("tail is nonempty while scoring").date
    }
}

/// Replay an entire row stream and collect the log.
pub fn replay_rows(
    model: Model,
    transform: InputTransform,
    seg_len: usize,
    threshold: f64,
    rows: &[ChunkFeatures],
) -> Result<Vec<ReplayEntry>, ReplayError> {
    let mut replayer = Replayer::new(model, transform, seg_len, threshold)?;
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        out.extend(replayer.push(row)?);
    }
    out.extend(replayer.finish()?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{group_and_filter, segment_all, synthesize, SynthSpec};
    use crate::ingest::ChunkSize;
    use crate::models::anomaly_transformer::{AnomTransConfig, AnomalyTransformer};
    use crate::models::clstm::{CLstm, CLstmConfig};

    fn small_clstm(seg_len: usize) -> (Model, usize) {
        let cfg = CLstmConfig { conv_out: 5, lstm_hidden: 4, ..CLstmConfig::default() };
        (Model::CLstm(CLstm::init(&cfg, 3).unwrap()), seg_len)
    }

    fn fixture_rows(n_pumps: usize, pump_len: usize) -> Vec<ChunkFeatures> {
        let spec = SynthSpec {
            n_pumps,
            pump_len,
            anomaly_len: pump_len.min(4),
            chunk_size: ChunkSize::S5,
            ..SynthSpec::default()
        };
        synthesize(&spec, 11).unwrap().rows().to_vec()
    }

    /// The batch-side probabilities: segment every pump (no filtering, as
    /// the validation path does) and predict.
    fn batch_probs(
        model: &Model,
        transform: &InputTransform,
        rows: &[ChunkFeatures],
        seg_len: usize,
    ) -> Vec<(i64, usize, f64)> {
        let series = crate::ingest::ChunkSeries::new(ChunkSize::S5, rows.to_vec()).unwrap();
        let pumps = group_and_filter(&series, 0, false);
        let segments = segment_all(&pumps, seg_len).unwrap();
        let refs: Vec<&Segment> = segments.iter().collect();
        let (x, _) = transform.batch_tensor(&refs).unwrap();
        let probs = model.predict(&x).unwrap();
        segments
            .iter()
            .zip(probs)
            .map(|(s, p)| (s.pump_index, s.position, p))
            .collect()
    }

    #[test]
    fn stream_matches_batch_bit_for_bit() {
        let seg_len = 6;
        let (model, _) = small_clstm(seg_len);
        let rows = fixture_rows(3, 25);
        let transform = InputTransform::fit(&rows, &[5], true);

        let streamed =
            replay_rows(model.clone(), transform.clone(), seg_len, 0.5, &rows).unwrap();
        let batch = batch_probs(&model, &transform, &rows, seg_len);

        assert_eq!(streamed.len(), rows.len(), "one line per chunk");
        assert_eq!(streamed.len(), batch.len());
        for (entry, (pump, position, prob)) in streamed.iter().zip(&batch) {
            assert_eq!((entry.pump_index, entry.position), (*pump, *position));
            assert_eq!(
                entry.probability.to_bits(),
                prob.to_bits(),
                "pump {pump} position {position}"
            );
        }
    }

    #[test]
    fn short_pumps_flush_on_boundary_and_finish() {
        // Pump lengths all below seg_len exercise the bouncing reflection
        // and the end-of-pump flush paths.
        let seg_len = 9;
        let (model, _) = small_clstm(seg_len);
        let rows = fixture_rows(4, 5);
        let transform = InputTransform::fit(&rows, &[5], true);

        let streamed =
            replay_rows(model.clone(), transform.clone(), seg_len, 0.5, &rows).unwrap();
        let batch = batch_probs(&model, &transform, &rows, seg_len);
        assert_eq!(streamed.len(), rows.len());
        for (entry, (pump, position, prob)) in streamed.iter().zip(&batch) {
            assert_eq!((entry.pump_index, entry.position), (*pump, *position));
            assert_eq!(entry.probability.to_bits(), prob.to_bits());
        }
    }

    #[test]
    fn transformer_stream_matches_batch_too() {
        let seg_len = 5;
        let cfg = AnomTransConfig {
            seq_len: seg_len,
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            ..AnomTransConfig::default()
        };
        let model = Model::AnomalyTransformer(AnomalyTransformer::init(&cfg, 4).unwrap());
        let rows = fixture_rows(2, 17);
        let transform = InputTransform::fit(&rows, &[5], true);

        let streamed =
            replay_rows(model.clone(), transform.clone(), seg_len, 0.48, &rows).unwrap();
        let batch = batch_probs(&model, &transform, &rows, seg_len);
        assert_eq!(streamed.len(), batch.len());
        for (entry, (_, _, prob)) in streamed.iter().zip(&batch) {
            assert_eq!(entry.probability.to_bits(), prob.to_bits());
        }
    }

    #[test]
    fn output_is_withheld_until_windows_are_determined() {
        let seg_len = 4;
        let (model, _) = small_clstm(seg_len);
        let rows = fixture_rows(1, 10);
        let transform = InputTransform::fit(&rows, &[5], true);
        let mut replayer = Replayer::new(model, transform, seg_len, 0.5).unwrap();

        let mut emitted = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            let lines = replayer.push(row).unwrap();
            match i.cmp(&(seg_len - 1)) {
                std::cmp::Ordering::Less => assert!(lines.is_empty(), "row {i}"),
                std::cmp::Ordering::Equal => {
                    assert_eq!(lines.len(), seg_len, "reflection span completes")
                }
                std::cmp::Ordering::Greater => assert_eq!(lines.len(), 1, "row {i}"),
            }
            emitted.extend(lines);
        }
        assert!(replayer.finish().unwrap().is_empty());
        let positions: Vec<usize> = emitted.iter().map(|e| e.position).collect();
        assert_eq!(positions, (0..rows.len()).collect::<Vec<_>>());
    }

    #[test]
    fn alerts_follow_the_threshold_rule() {
        let seg_len = 4;
        let (model, _) = small_clstm(seg_len);
        let rows = fixture_rows(1, 12);
        let transform = InputTransform::fit(&rows, &[5], true);
        let entries = replay_rows(model, transform, seg_len, 0.5, &rows).unwrap();
        for e in &entries {
            assert_eq!(e.alert, e.probability >= 0.5);
        }
    }

    #[test]
    fn rejects_zero_segment_length() {
        let (model, _) = small_clstm(1);
        assert!(Replayer::new(model, InputTransform::masking(&[]), 0, 0.5).is_err());
    }
}
