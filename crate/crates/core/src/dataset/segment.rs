//! Sliding-window segmentation with reflection padding.

use crate::ingest::FEATURE_COUNT;

use super::{DatasetError, PumpSeries};

/// One model input: a `seg_len × 15` window ending at a specific chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub pump_index: i64,
    /// Index of the final (anchor) chunk within its pump.
    pub position: usize,
    /// Label of the anchor chunk — the training target.
    pub label: u8,
    /// Whether any chunk in the window is positive. Undersampling keys off
    /// this, so windows that merely brush a pump are never thrown away.
    pub contains_positive: bool,
    /// Physical row indices (within the pump) each window slot maps to,
    /// after reflection. Length `seg_len`.
    pub source_rows: Vec<u32>,
    /// Row-major `seg_len × 15` feature values, untransformed.
    pub window: Vec<f64>,
    pub seg_len: usize,
}

/// Map a possibly-negative virtual index onto `0..n` by reflecting at both
/// ends without repeating the boundary element (period `2(n−1)`).
pub fn reflect_index(v: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = v.rem_euclid(period);
    let m = if m < n as isize { m } else { period - m };
    m as usize
}

/// One segment per chunk of the pump: the window covering positions
/// `k−seg_len+1 ..= k`, reflection-padded on the left for early `k`.
pub fn segment_pump(pump: &PumpSeries, seg_len: usize) -> Result<Vec<Segment>, DatasetError> {
    if seg_len == 0 {
        return Err(DatasetError::InvalidSegmentLength(0));
    }
    let n = pump.rows.len();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut source_rows = Vec::with_capacity(seg_len);
        let mut window = Vec::with_capacity(seg_len * FEATURE_COUNT);
        let mut contains_positive = false;
        for offset in 0..seg_len {
            let v = k as isize - (seg_len as isize - 1) + offset as isize;
            let idx = reflect_index(v, n);
            source_rows.push(idx as u32);
            let row = &pump.rows[idx];
            window.extend_from_slice(&row.feature_vector());
            contains_positive |= row.label == 1;
        }
        out.push(Segment {
            pump_index: pump.pump_index,
            position: k,
            label: pump.rows[k].label,
            contains_positive,
            source_rows,
            window,
            seg_len,
        });
    }
    Ok(out)
}

/// Segment every pump, concatenating in pump order.
pub fn segment_all(pumps: &[PumpSeries], seg_len: usize) -> Result<Vec<Segment>, DatasetError> {
    let mut out = Vec::new();
    for pump in pumps {
        out.extend(segment_pump(pump, seg_len)?);
    }
    Ok(out)
}
