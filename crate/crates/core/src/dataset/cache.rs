//! On-disk cache for a prepared dataset.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "PWDS"
//! version  u16      currently 1
//! hash     32 bytes config hash the cache was built under
//! chunk    u32      chunk size in seconds
//! seg_len  u32
//! transform: mask u32 count + u32 indices,
//!            stats u8 flag + (15 f64 mean + 15 f64 std when set)
//! train    u64 count + segments
//! val      u64 count + segments
//! segment: pump_index i64, position u64, label u8, positive u8,
//!          seg_len u32 source rows, seg_len·15 f64 window
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::ingest::{ChunkSize, FEATURE_COUNT};

use super::{DatasetError, InputTransform, Segment};

pub const DATASET_MAGIC: &[u8; 4] = b"PWDS";
const VERSION: u16 = 1;
const MAX_SEGMENTS: u64 = 1 << 24;
const MAX_SEG_LEN: u32 = 1 << 16;

/// Pipeline output: transformed-ready segments plus the transform itself.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedDataset {
    pub config_hash: [u8; 32],
    pub chunk_size: ChunkSize,
    pub seg_len: usize,
    pub transform: InputTransform,
    pub train: Vec<Segment>,
    pub val: Vec<Segment>,
}

impl PreparedDataset {
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), DatasetError> {
        w.write_all(DATASET_MAGIC)?;
        w.write_u16::<LittleEndian>(VERSION)?;
        w.write_all(&self.config_hash)?;
        w.write_u32::<LittleEndian>(self.chunk_size.seconds())?;
        w.write_u32::<LittleEndian>(self.seg_len as u32)?;

        w.write_u32::<LittleEndian>(self.transform.mask.len() as u32)?;
        for &i in &self.transform.mask {
            w.write_u32::<LittleEndian>(i as u32)?;
        }
        match (&self.transform.mean, &self.transform.std) {
            (Some(mean), Some(std)) => {
                w.write_u8(1)?;
                for v in mean.iter().chain(std.iter()) {
                    w.write_f64::<LittleEndian>(*v)?;
                }
            }
            _ => w.write_u8(0)?,
        }

        for split in [&self.train, &self.val] {
            w.write_u64::<LittleEndian>(split.len() as u64)?;
            for seg in split {
                write_segment(w, seg, self.seg_len)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, DatasetError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(DatasetError::BadCache(format!("bad magic {magic:02x?}")));
        }
        let version = r.read_u16::<LittleEndian>()?;
        if version != VERSION {
            return Err(DatasetError::BadCache(format!("unsupported version {version}")));
        }
        let mut config_hash = [0u8; 32];
        r.read_exact(&mut config_hash)?;
        let chunk_size = ChunkSize::from_secs(r.read_u32::<LittleEndian>()?)?;
        let seg_len_raw = r.read_u32::<LittleEndian>()?;
        if seg_len_raw == 0 || seg_len_raw > MAX_SEG_LEN {
            return Err(DatasetError::BadCache(format!("implausible seg_len {seg_len_raw}")));
        }
        let seg_len = seg_len_raw as usize;

        let mask_len = r.read_u32::<LittleEndian>()?;
        if mask_len > FEATURE_COUNT as u32 {
            return Err(DatasetError::BadCache(format!("mask of {mask_len} entries")));
        }
        let mut mask = Vec::with_capacity(mask_len as usize);
        for _ in 0..mask_len {
            let i = r.read_u32::<LittleEndian>()?;
            if i >= FEATURE_COUNT as u32 {
                return Err(DatasetError::BadCache(format!("mask index {i} out of range")));
            }
            mask.push(i as usize);
        }
        let transform = match r.read_u8()? {
            0 => InputTransform { mask, mean: None, std: None },
            1 => {
                let mut read_vec = || -> Result<Vec<f64>, DatasetError> {
                    let mut v = vec![0.0; FEATURE_COUNT];
                    r.read_f64_into::<LittleEndian>(&mut v)?;
                    Ok(v)
                };
                let mean = read_vec()?;
                let std = read_vec()?;
                InputTransform { mask, mean: Some(mean), std: Some(std) }
            }
            other => return Err(DatasetError::BadCache(format!("bad stats flag {other}"))),
        };

        let mut splits = Vec::with_capacity(2);
        for _ in 0..2 {
            let count = r.read_u64::<LittleEndian>()?;
            if count > MAX_SEGMENTS {
                return Err(DatasetError::BadCache(format!("implausible segment count {count}")));
            }
            let mut segs = Vec::with_capacity(count as usize);
            for _ in 0..count {
                segs.push(read_segment(r, seg_len)?);
            }
            splits.push(segs);
        }
        let val = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        Ok(PreparedDataset { config_hash, chunk_size, seg_len, transform, train, val })
    }
}

fn write_segment(w: &mut impl Write, seg: &Segment, seg_len: usize) -> Result<(), DatasetError> {
    if seg.seg_len != seg_len {
        return Err(DatasetError::BadCache(format!(
            "segment length {} differs from dataset seg_len {seg_len}",
            seg.seg_len
        )));
    }
    w.write_i64::<LittleEndian>(seg.pump_index)?;
    w.write_u64::<LittleEndian>(seg.position as u64)?;
    w.write_u8(seg.label)?;
    w.write_u8(u8::from(seg.contains_positive))?;
    for &row in &seg.source_rows {
        w.write_u32::<LittleEndian>(row)?;
    }
    for &v in &seg.window {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_segment(r: &mut impl Read, seg_len: usize) -> Result<Segment, DatasetError> {
    let pump_index = r.read_i64::<LittleEndian>()?;
    let position = r.read_u64::<LittleEndian>()? as usize;
    let label = r.read_u8()?;
    if label > 1 {
        return Err(DatasetError::BadCache(format!("label byte {label}")));
    }
    let contains_positive = match r.read_u8()? {
        0 => false,
        1 => true,
        other => return Err(DatasetError::BadCache(format!("positive flag {other}"))),
    };
    let mut source_rows = Vec::with_capacity(seg_len);
    for _ in 0..seg_len {
        source_rows.push(r.read_u32::<LittleEndian>()?);
    }
    let mut window = vec![0.0; seg_len * FEATURE_COUNT];
    r.read_f64_into::<LittleEndian>(&mut window)?;
    Ok(Segment { pump_index, position, label, contains_positive, source_rows, window, seg_len })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{prepare, synthesize, PipelineConfig, SynthSpec};

    fn prepared() -> PreparedDataset {
        let spec = SynthSpec { n_pumps: 2, pump_len: 60, anomaly_len: 6, ..Default::default() };
        let series = synthesize(&spec, 5).unwrap();
        let cfg = PipelineConfig {
            seg_len: 4,
            min_pump_chunks: 10,
            undersample: 0.5,
            config_hash: [7; 32],
            ..Default::default()
        };
        prepare(&series, &cfg).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ds = prepared();
        let mut bytes = Vec::new();
        ds.write_to(&mut bytes).unwrap();
        let back = PreparedDataset::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(ds, back);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.pwds");
        ds.save(&path).unwrap();
        assert_eq!(PreparedDataset::load(&path).unwrap(), ds);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let ds = prepared();
        let mut bytes = Vec::new();
        ds.write_to(&mut bytes).unwrap();

        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(
            PreparedDataset::read_from(&mut wrong.as_slice()),
            Err(DatasetError::BadCache(_))
        ));

        let truncated = &bytes[..bytes.len() - 9];
        assert!(matches!(
            PreparedDataset::read_from(&mut &truncated[..]),
            Err(DatasetError::Io(_))
        ));
    }
}
