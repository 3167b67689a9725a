//! Synthetic labeled fixtures.
//!
//! Each pump is a long run of noise chunks with one contiguous anomalous
//! span where every activity statistic is shifted up by
//! `amplitude · noise_scale`. The point is not realism — it is a dataset
//! whose positives are separable by construction, so an end-to-end training
//! run on it must reach high precision and recall or something is broken.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::ingest::{time_encodings, ChunkFeatures, ChunkSeries, ChunkSize};
use crate::seed::substream;

use super::DatasetError;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_pumps: usize,
    /// Chunks per pump.
    pub pump_len: usize,
    /// Length of the anomalous span inside each pump (0 = all negative).
    pub anomaly_len: usize,
    /// Std of the background noise on every activity statistic.
    pub noise_scale: f64,
    /// Anomalous shift in units of `noise_scale`. At least 5, so the spans
    /// stand clear of the noise floor.
    pub amplitude: f64,
    pub chunk_size: ChunkSize,
    /// Date (seconds) of the first chunk of the first pump.
    pub start_date: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_pumps: 5,
            pump_len: 400,
            anomaly_len: 20,
            noise_scale: 1.0,
            amplitude: 10.0,
            chunk_size: ChunkSize::S5,
            start_date: 1.6e9,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |msg: String| Err(DatasetError::InvalidSpec(msg));
        if self.n_pumps == 0 {
            return bad("n_pumps must be ≥ 1".into());
        }
        if self.pump_len == 0 {
            return bad("pump_len must be ≥ 1".into());
        }
        if self.anomaly_len > self.pump_len {
            return bad(format!(
                "anomaly_len {} exceeds pump_len {}",
                self.anomaly_len, self.pump_len
            ));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale > 0.0) {
            return bad(format!("noise_scale must be positive, got {}", self.noise_scale));
        }
        if !(self.amplitude.is_finite() && self.amplitude >= 5.0) {
            return bad(format!("amplitude must be ≥ 5, got {}", self.amplitude));
        }
        if !(self.start_date.is_finite() && self.start_date >= 0.0) {
            return bad(format!("start_date must be a non-negative time, got {}", self.start_date));
        }
        Ok(())
    }
}

/// Generate a labeled chunk series. Deterministic in `(spec, seed)`; each
/// pump draws from its own seed substream, so adding pumps does not disturb
/// the ones already generated.
pub fn synthesize(spec: &SynthSpec, seed: u64) -> Result<ChunkSeries, DatasetError> {
    spec.validate()?;
    let cs = spec.chunk_size.seconds() as f64;
    // 100 silent chunks between pumps keeps their date ranges disjoint.
    let pump_stride = (spec.pump_len + 100) as f64 * cs;

    let mut rows = Vec::with_capacity(spec.n_pumps * spec.pump_len);
    for p in 0..spec.n_pumps {
        let mut rng = substream(seed, &format!("synth/{p}"));
        let anomaly_start = if spec.anomaly_len == 0 {
            spec.pump_len // empty span
        } else {
            rng.random_range(0..=spec.pump_len - spec.anomaly_len)
        };
        let anomaly = anomaly_start..anomaly_start + spec.anomaly_len;

        for i in 0..spec.pump_len {
            let date = spec.start_date + p as f64 * pump_stride + i as f64 * cs;
            let (hour_sin, hour_cos, minute_sin, minute_cos) = time_encodings(date);
            let mut half_normal = || {
                let z: f64 = rng.sample(StandardNormal);
                (z * spec.noise_scale).abs()
            };
            let mut stats = [
                half_normal(), // std_rush_order
                half_normal(), // avg_rush_order (rush-order rate: nonnegative)
                half_normal(), // std_trades
                half_normal(), // std_volume
                half_normal(), // avg_volume
                half_normal(), // std_price
                half_normal(), // avg_price
                half_normal(), // avg_price_max
            ];
            let label = u8::from(anomaly.contains(&i));
            if label == 1 {
                for s in &mut stats {
                    *s += spec.amplitude * spec.noise_scale;
                }
            }
            rows.push(ChunkFeatures {
                date,
                hour_sin,
                hour_cos,
                minute_sin,
                minute_cos,
                pump_index: p as i64,
                symbol: p as i64,
                std_rush_order: stats[0],
                avg_rush_order: stats[1],
                std_trades: stats[2],
                std_volume: stats[3],
                avg_volume: stats[4],
                std_price: stats[5],
                avg_price: stats[6],
                avg_price_max: stats[7],
                label,
            });
        }
    }
    Ok(ChunkSeries::new(spec.chunk_size, rows)?)
}
