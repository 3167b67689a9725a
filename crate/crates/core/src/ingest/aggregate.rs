//! Aggregation of a sorted trade stream into chunk feature rows.
//!
//! The stream is bucketed into consecutive `chunk_size` intervals anchored at
//! the first trade. Five per-chunk quantities are tracked — rush-order count,
//! trade count, volume, mean price, and max price — and each feature row
//! reports rolling statistics of those series over the trailing `window`
//! chunks (shorter prefixes use however many chunks exist):
//!
//! - `std_*`: population standard deviation of the raw series;
//! - `avg_*`: mean of the per-chunk percent change, whose denominator is
//!   clamped to at least 1e-9.
//!
//! Chunks with no trades emit a row whose eight statistics are carried
//! forward verbatim from the previous row, and contribute a percent change of
//! zero; the underlying value series also carries forward, so windows that
//! span a quiet period see a flat stretch rather than artificial zeros.

use super::{
    time_encodings, ChunkFeatures, ChunkSeries, ChunkSize, IngestError, TradeEvent,
};

const PCT_EPS: f64 = 1e-9;

/// Aggregate `trades` (sorted by timestamp) into one pump's chunk rows.
///
/// `label_span_ms`, when given, marks every chunk whose time interval
/// overlaps `[start, end]` with label 1.
pub fn aggregate_chunks(
    trades: &[TradeEvent],
    chunk_size: ChunkSize,
    window: usize,
    pump_index: i64,
    symbol: i64,
    label_span_ms: Option<(i64, i64)>,
) -> Result<ChunkSeries, IngestError> {
    if trades.is_empty() {
        return Err(IngestError::EmptyInput);
    }
    if window < 2 {
        return Err(IngestError::InvalidWindow(window));
    }
    for (i, pair) in trades.windows(2).enumerate() {
        if pair[1].timestamp_ms < pair[0].timestamp_ms {
            return Err(IngestError::UnsortedTrades(i + 1));
        }
    }

    let cs_ms = chunk_size.millis();
    let t_min = trades[0].timestamp_ms;
    let t_max = trades[trades.len() - 1].timestamp_ms;
    let n_chunks = ((t_max - t_min) / cs_ms) as usize + 1;

    // Raw per-chunk accumulators.
    let mut n_trades = vec![0u64; n_chunks];
    let mut rush = vec![0u64; n_chunks];
    let mut volume = vec![0.0f64; n_chunks];
    let mut price_sum = vec![0.0f64; n_chunks];
    let mut price_max = vec![0.0f64; n_chunks];
    for t in trades {
        let c = ((t.timestamp_ms - t_min) / cs_ms) as usize;
        n_trades[c] += 1;
        rush[c] += t.is_rush_order as u64;
        volume[c] += t.quantity;
        price_sum[c] += t.price;
        if t.price > price_max[c] {
            price_max[c] = t.price;
        }
    }

    // Value series; empty chunks carry the previous chunk's value. The first
    // chunk always has a trade (the anchor), so index 0 is never carried.
    let mut v_rush = vec![0.0f64; n_chunks];
    let mut v_trades = vec![0.0f64; n_chunks];
    let mut v_volume = vec![0.0f64; n_chunks];
    let mut v_price = vec![0.0f64; n_chunks];
    let mut v_price_max = vec![0.0f64; n_chunks];
    for c in 0..n_chunks {
        if n_trades[c] > 0 {
            v_rush[c] = rush[c] as f64;
            v_trades[c] = n_trades[c] as f64;
            v_volume[c] = volume[c];
            v_price[c] = price_sum[c] / n_trades[c] as f64;
            v_price_max[c] = price_max[c];
        } else {
            v_rush[c] = v_rush[c - 1];
            v_trades[c] = v_trades[c - 1];
            v_volume[c] = v_volume[c - 1];
            v_price[c] = v_price[c - 1];
            v_price_max[c] = v_price_max[c - 1];
        }
    }

    let pct = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for c in 1..v.len() {
            out[c] = (v[c] - v[c - 1]) / v[c - 1].max(PCT_EPS);
        }
        out
    };
    let p_rush = pct(&v_rush);
    let p_volume = pct(&v_volume);
    let p_price = pct(&v_price);
    let p_price_max = pct(&v_price_max);

    let mut rows = Vec::with_capacity(n_chunks);
    for c in 0..n_chunks {
        let start_ms = t_min + c as i64 * cs_ms;
        let date = start_ms as f64 / 1000.0;
        let (hour_sin, hour_cos, minute_sin, minute_cos) = time_encodings(date);
        let label = match label_span_ms {
            Some((a, b)) => u8::from(start_ms <= b && start_ms + cs_ms > a),
            None => 0,
        };

        let stats = if n_trades[c] > 0 {
            let lo = (c + 1).saturating_sub(window);
            [
                rolling_std(&v_rush[lo..=c]),
                rolling_mean(&p_rush[lo..=c]),
                rolling_std(&v_trades[lo..=c]),
                rolling_std(&v_volume[lo..=c]),
                rolling_mean(&p_volume[lo..=c]),
                rolling_std(&v_price[lo..=c]),
                rolling_mean(&p_price[lo..=c]),
                rolling_mean(&p_price_max[lo..=c]),
            ]
        } else {
            let prev: &ChunkFeatures = rows.last().expect("chunk 0 always has trades");
            [
                prev.std_rush_order,
                prev.avg_rush_order,
                prev.std_trades,
                prev.std_volume,
                prev.avg_volume,
                prev.std_price,
                prev.avg_price,
                prev.avg_price_max,
            ]
        };

        rows.push(ChunkFeatures {
            date,
            hour_sin,
            hour_cos,
            minute_sin,
            minute_cos,
            pump_index,
            symbol,
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

    ChunkSeries::new(chunk_size, rows)
}

/// Population standard deviation (two-pass).
fn rolling_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

fn rolling_mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
