//! Raw trade records and their aggregation into chunk feature rows.
//!
//! A *chunk* is a fixed-width bucket of wall-clock time (5, 15, or 25
//! seconds). Each chunk becomes one row of 15 features: a timestamp, cyclic
//! hour/minute encodings, pump and symbol identifiers, and eight rolling
//! statistics over the trailing window of chunks.

mod aggregate;
mod feature_csv;
mod trades;

pub use aggregate::aggregate_chunks;
pub use feature_csv::{load_feature_csv, write_feature_csv, LoadedSeries, FEATURE_CSV_HEADER};
pub use trades::{parse_trades, ParsedTrades, TradeFormat};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("line {line}: {message}")]
    MalformedRow { line: u64, message: String },

    #[error("unknown field {0:?}")]
    UnknownField(String),

    #[error("missing column {0:?}")]
    MissingColumn(String),

    #[error("input contains no trades")]
    EmptyInput,

    #[error("rolling window must be ≥ 2, got {0}")]
    InvalidWindow(usize),

    #[error("unsupported chunk size {0} (expected 5, 15, or 25 seconds)")]
    InvalidChunkSize(u32),

    #[error("trades are not sorted by timestamp (index {0})")]
    UnsortedTrades(usize),

    #[error("line {line}: column {column:?} is not numeric: {value:?}")]
    NonNumericCell { line: u64, column: String, value: String },

    #[error("schema mismatch: expected header {expected:?}, got {got:?}")]
    SchemaMismatch { expected: String, got: String },

    #[error("row {row}: {message}")]
    OutOfOrder { row: usize, message: String },
}

/// Chunk width in seconds. Only the three studied widths exist, so the type
/// makes other values unrepresentable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum ChunkSize {
    S5,
    S15,
    S25,
}

impl ChunkSize {
    pub fn seconds(self) -> u32 {
        match self {
            ChunkSize::S5 => 5,
            ChunkSize::S15 => 15,
            ChunkSize::S25 => 25,
        }
    }

    pub fn millis(self) -> i64 {
        self.seconds() as i64 * 1000
    }

    pub fn from_secs(secs: u32) -> Result<Self, IngestError> {
        match secs {
            5 => Ok(ChunkSize::S5),
            15 => Ok(ChunkSize::S15),
            25 => Ok(ChunkSize::S25),
            other => Err(IngestError::InvalidChunkSize(other)),
        }
    }

    pub const ALL: [ChunkSize; 3] = [ChunkSize::S5, ChunkSize::S15, ChunkSize::S25];
}

impl TryFrom<u32> for ChunkSize {
    type Error = String;
    fn try_from(v: u32) -> Result<Self, Self::Error> {
        ChunkSize::from_secs(v).map_err(|e| e.to_string())
    }
}

impl From<ChunkSize> for u32 {
    fn from(c: ChunkSize) -> u32 {
        c.seconds()
    }
}

impl std::fmt::Display for ChunkSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}s", self.seconds())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Buy,
    Sell,
}

/// One executed trade.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TradeEvent {
    pub timestamp_ms: i64,
    pub price: f64,
    pub quantity: f64,
    pub side: Side,
    /// Whether the order that triggered the trade arrived as part of a burst
    /// (flagged upstream by the collector).
    pub is_rush_order: bool,
}

pub const FEATURE_COUNT: usize = 15;

/// Canonical feature order; also the feature-CSV column order (plus a final
/// `Label` column).
pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "Date",
    "HourSin",
    "HourCos",
    "MinuteSin",
    "MinuteCos",
    "PumpIndex",
    "Symbol",
    "StdRushOrder",
    "AvgRushOrder",
    "StdTrades",
    "StdVolume",
    "AvgVolume",
    "StdPrice",
    "AvgPrice",
    "AvgPriceMax",
];

/// One aggregated chunk row.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkFeatures {
    /// Chunk start time in seconds since the epoch.
    pub date: f64,
    pub hour_sin: f64,
    pub hour_cos: f64,
    pub minute_sin: f64,
    pub minute_cos: f64,
    /// Which pump event the row belongs to.
    pub pump_index: i64,
    /// Interned symbol id.
    pub symbol: i64,
    pub std_rush_order: f64,
    pub avg_rush_order: f64,
    pub std_trades: f64,
    pub std_volume: f64,
    pub avg_volume: f64,
    pub std_price: f64,
    pub avg_price: f64,
    pub avg_price_max: f64,
    /// 1 while the pump is in progress, 0 otherwise.
    pub label: u8,
}

impl ChunkFeatures {
    /// The 15 features in canonical order (label excluded).
    pub fn feature_vector(&self) -> [f64; FEATURE_COUNT] {
        [
            self.date,
            self.hour_sin,
            self.hour_cos,
            self.minute_sin,
            self.minute_cos,
            self.pump_index as f64,
            self.symbol as f64,
            self.std_rush_order,
            self.avg_rush_order,
            self.std_trades,
            self.std_volume,
            self.avg_volume,
            self.std_price,
            self.avg_price,
            self.avg_price_max,
        ]
    }
}

/// Cyclic encodings of the hour-of-day and minute-of-hour of a timestamp.
pub fn time_encodings(date_secs: f64) -> (f64, f64, f64, f64) {
    let secs = date_secs.floor() as i64;
    let hour = secs.div_euclid(3600).rem_euclid(24) as f64;
    let minute = secs.div_euclid(60).rem_euclid(60) as f64;
    let tau = std::f64::consts::TAU;
    (
        (tau * hour / 24.0).sin(),
        (tau * hour / 24.0).cos(),
        (tau * minute / 60.0).sin(),
        (tau * minute / 60.0).cos(),
    )
}

/// An ordered sequence of chunk rows, possibly spanning several pumps.
///
/// Invariant: rows of one pump are contiguous, dates strictly increase
/// within a pump, and a pump index never reappears after its run ends.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkSeries {
    chunk_size: ChunkSize,
    rows: Vec<ChunkFeatures>,
}

impl ChunkSeries {
    pub fn new(chunk_size: ChunkSize, rows: Vec<ChunkFeatures>) -> Result<Self, IngestError> {
        let mut seen: Vec<i64> = Vec::new();
        for (i, pair) in rows.windows(2).enumerate() {
            let (a, b) = (&pair[0], &pair[1]);
            if a.pump_index == b.pump_index {
                if b.date <= a.date {
                    return Err(IngestError::OutOfOrder {
                        row: i + 1,
                        message: format!(
                            "date {} does not increase within pump {}",
                            b.date, a.pump_index
                        ),
                    });
                }
            } else {
                seen.push(a.pump_index);
                if seen.contains(&b.pump_index) {
                    return Err(IngestError::OutOfOrder {
                        row: i + 1,
                        message: format!("pump {} reappears after its run ended", b.pump_index),
                    });
                }
            }
        }
        Ok(ChunkSeries { chunk_size, rows })
    }

    pub fn chunk_size(&self) -> ChunkSize {
        self.chunk_size
    }

    pub fn rows(&self) -> &[ChunkFeatures] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn positive_count(&self) -> usize {
        self.rows.iter().filter(|r| r.label == 1).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(pump: i64, date: f64) -> ChunkFeatures {
        ChunkFeatures {
            date,
            hour_sin: 0.0,
            hour_cos: 1.0,
            minute_sin: 0.0,
            minute_cos: 1.0,
            pump_index: pump,
            symbol: 0,
            std_rush_order: 0.0,
            avg_rush_order: 0.0,
            std_trades: 0.0,
            std_volume: 0.0,
            avg_volume: 0.0,
            std_price: 0.0,
            avg_price: 0.0,
            avg_price_max: 0.0,
            label: 0,
        }
    }

    #[test]
    fn chunk_size_round_trips_through_serde() {
        for cs in ChunkSize::ALL {
            let json = serde_json::to_string(&cs).unwrap();
            assert_eq!(json, cs.seconds().to_string());
            let back: ChunkSize = serde_json::from_str(&json).unwrap();
            assert_eq!(back, cs);
        }
        assert!(serde_json::from_str::<ChunkSize>("7").is_err());
    }

    #[test]
    fn series_rejects_non_increasing_dates_within_pump() {
        let rows = vec![row(0, 10.0), row(0, 10.0)];
        assert!(matches!(
            ChunkSeries::new(ChunkSize::S5, rows),
            Err(IngestError::OutOfOrder { .. })
        ));
    }

    #[test]
    fn series_rejects_reappearing_pump() {
        let rows = vec![row(0, 10.0), row(1, 5.0), row(0, 20.0)];
        assert!(matches!(
            ChunkSeries::new(ChunkSize::S5, rows),
            Err(IngestError::OutOfOrder { .. })
        ));
    }

    #[test]
    fn dates_may_reset_between_pumps() {
        let rows = vec![row(0, 10.0), row(0, 15.0), row(1, 5.0)];
        assert!(ChunkSeries::new(ChunkSize::S5, rows).is_ok());
    }

    #[test]
    fn time_encodings_are_on_the_unit_circle() {
        for &t in &[0.0, 59.0, 3599.0, 86399.0, 1_600_000_123.4] {
            let (hs, hc, ms, mc) = time_encodings(t);
            assert!((hs * hs + hc * hc - 1.0).abs() < 1e-12);
            assert!((ms * ms + mc * mc - 1.0).abs() < 1e-12);
        }
        // Midnight: hour angle 0.
        let (hs, hc, _, _) = time_encodings(0.0);
        assert_eq!((hs, hc), (0.0, 1.0));
    }
}
