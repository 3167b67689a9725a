//! Parsing of raw trade streams.
//!
//! Two encodings carry the same five fields:
//!
//! - CSV with header `timestamp_ms,price,quantity,side,is_rush_order`
//! - JSON Lines with the same keys per object
//!
//! `side` is `B`/`S`; `is_rush_order` is `0`/`1` (JSON also accepts booleans).
//! Out-of-order timestamps are tolerated: the parser counts the inversions,
//! logs a warning, and returns the events stably sorted.

use std::io::{BufRead, BufReader, Read};

use serde::Deserialize;

use super::{IngestError, Side, TradeEvent};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TradeFormat {
    Csv,
    Jsonl,
}

/// Parse result: events sorted by timestamp, plus how many out-of-order pairs
/// the raw stream contained.
#[derive(Clone, Debug)]
pub struct ParsedTrades {
    pub events: Vec<TradeEvent>,
    pub inversions: u64,
}

const EXPECTED_HEADER: [&str; 5] = ["timestamp_ms", "price", "quantity", "side", "is_rush_order"];

pub fn parse_trades(reader: impl Read, format: TradeFormat) -> Result<ParsedTrades, IngestError> {
    let mut events = match format {
        TradeFormat::Csv => parse_csv(reader)?,
        TradeFormat::Jsonl => parse_jsonl(reader)?,
    };
    let inversions = count_inversions(&events);
    if inversions > 0 {
        log::warn!("trade stream contains {inversions} timestamp inversions; sorting");
        events.sort_by_key(|e| e.timestamp_ms);
    }
    Ok(ParsedTrades { events, inversions })
}

fn parse_csv(reader: impl Read) -> Result<Vec<TradeEvent>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();

    let header = match records.next() {
        Some(record) => record?,
        None => return Err(IngestError::EmptyInput),
    };
    let got: Vec<&str> = header.iter().collect();
    for name in &got {
        if !EXPECTED_HEADER.contains(name) {
            return Err(IngestError::UnknownField((*name).to_string()));
        }
    }
    for want in EXPECTED_HEADER {
        if !got.contains(&want) {
            return Err(IngestError::MissingColumn(want.to_string()));
        }
    }
    // All five present and nothing else; map positions in case of reordering.
    let pos: Vec<usize> = EXPECTED_HEADER
        .iter()
        .map(|want| got.iter().position(|g| g == want).unwrap())
        .collect();

    let mut events = Vec::new();
    for record in records {
        let record = record?;
        let line = record
            .position()
            .map(|p| p.line())
            .unwrap_or(events.len() as u64 + 2);
        let field = |i: usize| -> Result<&str, IngestError> {
            record.get(pos[i]).ok_or_else(|| IngestError::MalformedRow {
                line,
                message: format!("expected {} fields, got {}", EXPECTED_HEADER.len(), record.len()),
            })
        };
        let timestamp_ms: i64 = field(0)?.parse().map_err(|e| IngestError::MalformedRow {
            line,
            message: format!("timestamp_ms: {e}"),
        })?;
        let price: f64 = field(1)?.parse().map_err(|e| IngestError::MalformedRow {
            line,
            message: format!("price: {e}"),
        })?;
        let quantity: f64 = field(2)?.parse().map_err(|e| IngestError::MalformedRow {
            line,
            message: format!("quantity: {e}"),
        })?;
        let side = parse_side(field(3)?, line)?;
        let is_rush_order = parse_flag(field(4)?, line)?;
        events.push(validate_event(
            TradeEvent { timestamp_ms, price, quantity, side, is_rush_order },
            line,
        )?);
    }
    Ok(events)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonTrade {
    timestamp_ms: i64,
    price: f64,
    quantity: f64,
    side: String,
    is_rush_order: JsonFlag,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum JsonFlag {
    Bool(bool),
    Int(u8),
}

fn parse_jsonl(reader: impl Read) -> Result<Vec<TradeEvent>, IngestError> {
    let mut events = Vec::new();
    for (i, line_result) in BufReader::new(reader).lines().enumerate() {
        let line_no = i as u64 + 1;
        let text = line_result?;
        if text.trim().is_empty() {
            continue;
        }
        let raw: JsonTrade = serde_json::from_str(&text).map_err(|e| {
            let msg = e.to_string();
            if msg.contains("unknown field") {
                // serde formats this as: unknown field `name`, expected one of …
                let field = msg
                    .split('`')
                    .nth(1)
                    .unwrap_or("?")
                    .to_string();
                IngestError::UnknownField(field)
            } else if msg.contains("missing field") {
                let field = msg.split('`').nth(1).unwrap_or("?").to_string();
                IngestError::MissingColumn(field)
            } else {
                IngestError::MalformedRow { line: line_no, message: msg }
            }
        })?;
        let side = parse_side(&raw.side, line_no)?;
        let is_rush_order = match raw.is_rush_order {
            JsonFlag::Bool(b) => b,
            JsonFlag::Int(0) => false,
            JsonFlag::Int(1) => true,
            JsonFlag::Int(other) => {
                return Err(IngestError::MalformedRow {
                    line: line_no,
                    message: format!("is_rush_order must be 0 or 1, got {other}"),
                });
            }
        };
        events.push(validate_event(
            TradeEvent {
                timestamp_ms: raw.timestamp_ms,
                price: raw.price,
                quantity: raw.quantity,
                side,
                is_rush_order,
            },
            line_no,
        )?);
    }
    Ok(events)
}

fn parse_side(s: &str, line: u64) -> Result<Side, IngestError> {
    match s {
        "B" => Ok(Side::Buy),
        "S" => Ok(Side::Sell),
        other => Err(IngestError::MalformedRow {
            line,
            message: format!("side must be B or S, got {other:?}"),
        }),
    }
}

fn parse_flag(s: &str, line: u64) -> Result<bool, IngestError> {
    match s {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(IngestError::MalformedRow {
            line,
            message: format!("is_rush_order must be 0 or 1, got {other:?}"),
        }),
    }
}

fn validate_event(e: TradeEvent, line: u64) -> Result<TradeEvent, IngestError> {
    if e.timestamp_ms < 0 {
        return Err(IngestError::MalformedRow {
            line,
            message: format!("timestamp_ms must be ≥ 0, got {}", e.timestamp_ms),
        });
    }
    if !(e.price > 0.0) || !e.price.is_finite() {
        return Err(IngestError::MalformedRow {
            line,
            message: format!("price must be positive and finite, got {}", e.price),
        });
    }
    if !(e.quantity > 0.0) || !e.quantity.is_finite() {
        return Err(IngestError::MalformedRow {
            line,
            message: format!("quantity must be positive and finite, got {}", e.quantity),
        });
    }
    Ok(e)
}

/// Number of pairs `(i, j)` with `i < j` and `t_i > t_j`, via merge sort.
fn count_inversions(events: &[TradeEvent]) -> u64 {
    fn merge_count(ts: &mut [i64], buf: &mut [i64]) -> u64 {
        let n = ts.len();
        if n <= 1 {
            return 0;
        }
        let mid = n / 2;
        let mut inv = {
            let (left, right) = ts.split_at_mut(mid);
            merge_count(left, &mut buf[..mid]) + merge_count(right, &mut buf[mid..])
        };
        let (mut i, mut j, mut k) = (0, mid, 0);
        while i < mid && j < n {
            if ts[i] <= ts[j] {
                buf[k] = ts[i];
                i += 1;
            } else {
                buf[k] = ts[j];
                j += 1;
                inv += (mid - i) as u64;
            }
            k += 1;
        }
        buf[k..k + (mid - i)].copy_from_slice(&ts[i..mid]);
        buf[k + (mid - i)..n].copy_from_slice(&ts[j..n]);
        ts.copy_from_slice(&buf[..n]);
        inv
    }

    let mut ts: Vec<i64> = events.iter().map(|e| e.timestamp_ms).collect();
    let mut buf = vec![0i64; ts.len()];
    merge_count(&mut ts, &mut buf)
}
