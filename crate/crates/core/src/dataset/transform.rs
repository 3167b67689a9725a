//! Input masking and standardization.
//!
//! Masking happens first (masked columns become identically zero), then
//! per-feature standardization with statistics fit on the masked train rows.
//! Both are baked into every tensor the models see — training, evaluation,
//! and streaming replay all funnel through [`InputTransform::batch_tensor`],
//! so there is no way for the paths to disagree.

use indexmap::IndexMap;

use crate::ingest::{ChunkFeatures, FEATURE_COUNT};
use crate::nn::Tensor;

use super::{DatasetError, Segment};

const STD_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct InputTransform {
    /// Feature indices set to zero before anything else. By default this is
    /// the pump-index column: a per-event identifier the model must not use.
    pub mask: Vec<usize>,
    /// Per-feature mean of the masked train rows, when standardizing.
    pub mean: Option<Vec<f64>>,
    /// Per-feature population std, floored at 1e-9 so constant columns map
    /// to zero instead of NaN.
    pub std: Option<Vec<f64>>,
}

impl InputTransform {
    /// Identity transform with a mask only.
    pub fn masking(mask: &[usize]) -> Self {
        InputTransform { mask: normalized_mask(mask), mean: None, std: None }
    }

    /// Fit on train rows: mask, then (optionally) take per-feature mean/std.
    pub fn fit(rows: &[ChunkFeatures], mask: &[usize], normalize: bool) -> Self {
        let mask = normalized_mask(mask);
        if !normalize || rows.is_empty() {
            if normalize {
                log::warn!("no train rows to fit standardization on; masking only");
            }
            return InputTransform { mask, mean: None, std: None };
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; FEATURE_COUNT];
        for row in rows {
            let mut f = row.feature_vector();
            apply_mask(&mask, &mut f);
            for (m, v) in mean.iter_mut().zip(f.iter()) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = [0.0; FEATURE_COUNT];
        for row in rows {
            let mut f = row.feature_vector();
            apply_mask(&mask, &mut f);
            for ((s, v), m) in var.iter_mut().zip(f.iter()).zip(mean.iter()) {
                let d = v - m;
                *s += d * d;
            }
        }
        let std = var.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
        InputTransform { mask, mean: Some(mean), std: Some(std) }
    }

    /// Transform one feature row in place.
    pub fn apply(&self, features: &mut [f64; FEATURE_COUNT]) {
        apply_mask(&self.mask, features);
        if let (Some(mean), Some(std)) = (&self.mean, &self.std) {
            for i in 0..FEATURE_COUNT {
                features[i] = (features[i] - mean[i]) / std[i];
            }
        }
    }

    /// Stack segments into a `[batch, seg_len, 15]` tensor plus labels,
    /// applying the transform to every row.
    pub fn batch_tensor(&self, segments: &[&Segment]) -> Result<(Tensor, Vec<f64>), DatasetError> {
        let Some(first) = segments.first() else {
            return Err(DatasetError::InvalidBatchSize);
        };
        let s = first.seg_len;
        let mut data = Vec::with_capacity(segments.len() * s * FEATURE_COUNT);
        let mut labels = Vec::with_capacity(segments.len());
        for seg in segments {
            debug_assert_eq!(seg.seg_len, s);
            for row in seg.window.chunks_exact(FEATURE_COUNT) {
                let mut f: [f64; FEATURE_COUNT] = row.try_into().expect("window row width");
                self.apply(&mut f);
                data.extend_from_slice(&f);
            }
            labels.push(f64::from(seg.label));
        }
        let t = Tensor::new(vec![segments.len(), s, FEATURE_COUNT], data)
            .expect("window dimensions are consistent by construction");
        Ok((t, labels))
    }

    /// Serialize into checkpoint buffers (`transform.mask` / `.mean` / `.std`).
    pub fn to_buffers(&self) -> IndexMap<String, Tensor> {
        let tensor = |shape: Vec<usize>, data: Vec<f64>| {
            Tensor::new(shape, data).expect("buffer dimensions match their data")
        };
        let mut out = IndexMap::new();
        let mask: Vec<f64> = self.mask.iter().map(|&i| i as f64).collect();
        let mask_len = mask.len();
        out.insert("transform.mask".to_string(), tensor(vec![mask_len], mask));
        if let (Some(mean), Some(std)) = (&self.mean, &self.std) {
            out.insert("transform.mean".to_string(), tensor(vec![FEATURE_COUNT], mean.clone()));
            out.insert("transform.std".to_string(), tensor(vec![FEATURE_COUNT], std.clone()));
        }
        out
    }

    /// Rebuild from checkpoint buffers written by [`Self::to_buffers`].
    pub fn from_buffers(buffers: &IndexMap<String, Tensor>) -> Result<Self, DatasetError> {
        let mask_t = buffers
            .get("transform.mask")
            .ok_or_else(|| DatasetError::BadCache("missing transform.mask buffer".into()))?;
        let mask: Vec<usize> = mask_t
            .data()
            .iter()
            .map(|&v| {
                let i = v as usize;
                if v != i as f64 || i >= FEATURE_COUNT {
                    Err(DatasetError::BadCache(format!("bad mask index {v}")))
                } else {
                    Ok(i)
                }
            })
            .collect::<Result<_, _>>()?;
        let mean = buffers.get("transform.mean");
        let std = buffers.get("transform.std");
        let (mean, std) = match (mean, std) {
            (Some(m), Some(s)) => {
                if m.numel() != FEATURE_COUNT || s.numel() != FEATURE_COUNT {
                    return Err(DatasetError::BadCache("transform stats have wrong width".into()));
                }
                (Some(m.data().to_vec()), Some(s.data().to_vec()))
            }
            (None, None) => (None, None),
            _ => return Err(DatasetError::BadCache("transform.mean/std must come together".into())),
        };
        Ok(InputTransform { mask: normalized_mask(&mask), mean, std })
    }
}

fn normalized_mask(mask: &[usize]) -> Vec<usize> {
    let mut m: Vec<usize> = mask.iter().copied().filter(|&i| i < FEATURE_COUNT).collect();
    m.sort_unstable();
    m.dedup();
    m
}

fn apply_mask(mask: &[usize], features: &mut [f64; FEATURE_COUNT]) {
    for &i in mask {
        features[i] = 0.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn row(date: f64, std_rush: f64, pump: i64, label: u8) -> ChunkFeatures {
        let (hs, hc, ms, mc) = crate::ingest::time_encodings(date);
        ChunkFeatures {
            date,
            hour_sin: hs,
            hour_cos: hc,
            minute_sin: ms,
            minute_cos: mc,
            pump_index: pump,
            symbol: 0,
            std_rush_order: std_rush,
            avg_rush_order: 0.0,
            std_trades: 0.0,
            std_volume: 0.0,
            avg_volume: 0.0,
            std_price: 0.0,
            avg_price: 0.0,
            avg_price_max: 0.0,
            label,
        }
    }

    #[test]
    fn fit_matches_hand_computed_stats() {
        let rows = vec![row(0.0, 1.0, 9, 0), row(5.0, 3.0, 9, 0)];
        let t = InputTransform::fit(&rows, &[5], true);
        let mean = t.mean.as_ref().unwrap();
        let std = t.std.as_ref().unwrap();
        assert_relative_eq!(mean[7], 2.0);
        assert_relative_eq!(std[7], 1.0); // population std of {1, 3}
        // Masked pump-index column: stats over zeros.
        assert_eq!(mean[5], 0.0);
        assert_eq!(std[5], STD_FLOOR);
        let mut f = rows[0].feature_vector();
        t.apply(&mut f);
        assert_relative_eq!(f[7], -1.0);
        assert_eq!(f[5], 0.0); // masked, and (0-0)/floor == 0
    }

    #[test]
    fn constant_columns_standardize_to_zero() {
        let rows = vec![row(0.0, 2.0, 1, 0), row(5.0, 2.0, 1, 0)];
        let t = InputTransform::fit(&rows, &[], true);
        let mut f = rows[1].feature_vector();
        t.apply(&mut f);
        assert_eq!(f[7], 0.0);
    }

    #[test]
    fn masking_only_when_not_normalizing() {
        let rows = vec![row(0.0, 1.0, 4, 0)];
        let t = InputTransform::fit(&rows, &[5, 5, 99], false);
        assert_eq!(t.mask, vec![5]); // deduped, out-of-range dropped
        assert!(t.mean.is_none());
        let mut f = rows[0].feature_vector();
        t.apply(&mut f);
        assert_eq!(f[5], 0.0);
        assert_eq!(f[7], 1.0);
    }

    #[test]
    fn buffer_round_trip_is_exact() {
        let rows: Vec<ChunkFeatures> =
            (0..7).map(|i| row(i as f64 * 5.0, (i * i) as f64 * 0.25, 2, 0)).collect();
        let t = InputTransform::fit(&rows, &[5], true);
        let back = InputTransform::from_buffers(&t.to_buffers()).unwrap();
        assert_eq!(t, back);

        let m = InputTransform::masking(&[5]);
        let back = InputTransform::from_buffers(&m.to_buffers()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn from_buffers_rejects_torn_stats() {
        let t = InputTransform::fit(&[row(0.0, 1.0, 0, 0), row(5.0, 2.0, 0, 0)], &[5], true);
        let mut buffers = t.to_buffers();
        buffers.shift_remove("transform.std");
        assert!(matches!(
            InputTransform::from_buffers(&buffers),
            Err(DatasetError::BadCache(_))
        ));
    }
}
