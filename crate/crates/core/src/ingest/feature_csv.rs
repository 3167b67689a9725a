//! The on-disk feature table.
//!
//! One CSV row per chunk: the 15 features in canonical order plus a final
//! `Label` column. Floats are written in shortest round-trip form, so
//! write → load reproduces every value bit for bit.
//!
//! The `Symbol` column holds the market's ticker string; the loader interns
//! each distinct string to a dense integer id (first appearance → 0, …).

use std::io::{Read, Write};

use super::{ChunkFeatures, ChunkSeries, ChunkSize, IngestError, FEATURE_NAMES};

pub const FEATURE_CSV_HEADER: &str = "Date,HourSin,HourCos,MinuteSin,MinuteCos,PumpIndex,Symbol,StdRushOrder,AvgRushOrder,StdTrades,StdVolume,AvgVolume,StdPrice,AvgPrice,AvgPriceMax,Label";

/// A feature series together with the symbol strings its `symbol` ids index.
#[derive(Clone, Debug)]
pub struct LoadedSeries {
    pub series: ChunkSeries,
    pub symbols: Vec<String>,
}

impl LoadedSeries {
    pub fn symbol_name(&self, id: i64) -> Option<&str> {
        usize::try_from(id).ok().and_then(|i| self.symbols.get(i)).map(String::as_str)
    }
}

/// Write `series` as a feature CSV. `symbols[row.symbol]` provides the
/// `Symbol` column; rows whose id has no entry fall back to the bare id.
pub fn write_feature_csv(
    series: &ChunkSeries,
    symbols: &[String],
    w: impl Write,
) -> Result<(), IngestError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(FEATURE_CSV_HEADER.split(','))?;
    for row in series.rows() {
        let symbol = usize::try_from(row.symbol)
            .ok()
            .and_then(|i| symbols.get(i))
            .cloned()
            .unwrap_or_else(|| row.symbol.to_string());
        out.write_record([
            row.date.to_string(),
            row.hour_sin.to_string(),
            row.hour_cos.to_string(),
            row.minute_sin.to_string(),
            row.minute_cos.to_string(),
            row.pump_index.to_string(),
            symbol,
            row.std_rush_order.to_string(),
            row.avg_rush_order.to_string(),
            row.std_trades.to_string(),
            row.std_volume.to_string(),
            row.avg_volume.to_string(),
            row.std_price.to_string(),
            row.avg_price.to_string(),
            row.avg_price_max.to_string(),
            row.label.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Load a feature CSV. The chunk width is not stored in the file, so the
/// caller supplies it.
pub fn load_feature_csv(reader: impl Read, chunk_size: ChunkSize) -> Result<LoadedSeries, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut records = rdr.records();

    let header = match records.next() {
        Some(record) => record?,
        None => return Err(IngestError::EmptyInput),
    };
    let got = header.iter().collect::<Vec<_>>().join(",");
    if got != FEATURE_CSV_HEADER {
        return Err(IngestError::SchemaMismatch {
            expected: FEATURE_CSV_HEADER.to_string(),
            got,
        });
    }

    let mut symbols: Vec<String> = Vec::new();
    let mut rows = Vec::new();
    for record in records {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(rows.len() as u64 + 2);
        if record.len() != FEATURE_NAMES.len() + 1 {
            return Err(IngestError::MalformedRow {
                line,
                message: format!(
                    "expected {} fields, got {}",
                    FEATURE_NAMES.len() + 1,
                    record.len()
                ),
            });
        }
        let num = |idx: usize| -> Result<f64, IngestError> {
            let raw = &record[idx];
            raw.parse().map_err(|_| IngestError::NonNumericCell {
                line,
                column: FEATURE_NAMES[idx].to_string(),
                value: raw.to_string(),
            })
        };
        let int = |idx: usize| -> Result<i64, IngestError> {
            let raw = &record[idx];
            raw.parse().map_err(|_| IngestError::NonNumericCell {
                line,
                column: FEATURE_NAMES[idx].to_string(),
                value: raw.to_string(),
            })
        };

        let symbol_name = record[6].to_string();
        let symbol = match symbols.iter().position(|s| *s == symbol_name) {
            Some(i) => i as i64,
            None => {
                symbols.push(symbol_name);
                (symbols.len() - 1) as i64
            }
        };
        let label = match &record[15] {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                return Err(IngestError::MalformedRow {
                    line,
                    message: format!("Label must be 0 or 1, got {other:?}"),
                });
            }
        };

        rows.push(ChunkFeatures {
            date: num(0)?,
            hour_sin: num(1)?,
            hour_cos: num(2)?,
            minute_sin: num(3)?,
            minute_cos: num(4)?,
            pump_index: int(5)?,
            symbol,
            std_rush_order: num(7)?,
            avg_rush_order: num(8)?,
            std_trades: num(9)?,
            std_volume: num(10)?,
            avg_volume: num(11)?,
            std_price: num(12)?,
            avg_price: num(13)?,
            avg_price_max: num(14)?,
            label,
        });
    }

    let series = ChunkSeries::new(chunk_size, rows)?;
    Ok(LoadedSeries { series, symbols })
}
