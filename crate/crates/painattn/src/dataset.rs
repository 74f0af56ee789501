//! Binary dataset files and CSV import.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "PANEDA01"  u32 records  u32 sample_rate  u32 samples_per_window
//! records x { u16 subject_id  u8 level  samples_per_window x f32 }
//! u32 CRC32 of every preceding byte
//! ```

use std::fs;
use std::io::Read;
use std::path::Path;

use painattn_core::synth::{WindowRecord, LEVELS};

use crate::bytes::{check_crc, check_magic, push_crc, Reader};
use crate::error::{AppError, AppResult, FormatError};

pub const MAGIC: &[u8; 8] = b"PANEDA01";
const HEADER_LEN: usize = 8 + 12;

/// Windows plus the acquisition parameters they share.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sample_rate: u32,
    pub window_len: usize,
    pub records: Vec<WindowRecord>,
}

impl Dataset {
    pub fn new(sample_rate: u32, records: Vec<WindowRecord>) -> Result<Self, FormatError> {
        let window_len = records.first().map_or(0, |r| r.samples.len());
        let ds = Self {
            sample_rate,
            window_len,
            records,
        };
        ds.check()?;
        Ok(ds)
    }

    fn check(&self) -> Result<(), FormatError> {
        if self.records.is_empty() {
            return Err(FormatError::new(0, "dataset has no records"));
        }
        if self.window_len == 0 {
            return Err(FormatError::new(0, "windows are empty"));
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.samples.len() != self.window_len {
                return Err(FormatError::new(
                    0,
                    format!(
                        "record {i} has {} samples, expected {}",
                        r.samples.len(),
                        self.window_len
                    ),
                ));
            }
            if r.level as usize >= LEVELS {
                return Err(FormatError::new(
                    0,
                    format!("record {i} has level {}", r.level),
                ));
            }
        }
        u32::try_from(self.records.len()).map_err(|_| FormatError::new(0, "too many records"))?;
        u32::try_from(self.window_len).map_err(|_| FormatError::new(0, "window too long"))?;
        Ok(())
    }

    pub fn subject_ids(&self) -> Vec<u16> {
        let mut ids: Vec<u16> = self.records.iter().map(|r| r.subject_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn encode(&self) -> Result<Vec<u8>, FormatError> {
        self.check()?;
        let mut out =
            Vec::with_capacity(HEADER_LEN + self.records.len() * (3 + 4 * self.window_len) + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.sample_rate.to_le_bytes());
        out.extend_from_slice(&(self.window_len as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.subject_id.to_le_bytes());
            out.push(r.level);
            for s in &r.samples {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
        push_crc(&mut out);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        check_magic(bytes, MAGIC)?;
        let mut rd = Reader::new(bytes);
        rd.take(8, "magic")?;
        let count = rd.u32("record count")? as usize;
        let sample_rate = rd.u32("sample rate")?;
        let window_len = rd.u32("samples per window")? as usize;
        if count == 0 {
            return Err(FormatError::new(8, "record count is zero"));
        }
        if window_len == 0 {
            return Err(FormatError::new(16, "samples per window is zero"));
        }
        let record_len = 3 + 4 * window_len as u64;
        let expected = (count as u64)
            .checked_mul(record_len)
            .and_then(|n| n.checked_add(HEADER_LEN as u64 + 4))
            .unwrap_or(u64::MAX);
        if (bytes.len() as u64) < expected {
            return Err(FormatError::new(
                bytes.len() as u64,
                format!(
                    "truncated: header announces {count} records ({expected} bytes), file has {}",
                    bytes.len()
                ),
            ));
        }
        if bytes.len() as u64 > expected {
            return Err(FormatError::new(
                expected,
                format!(
                    "{} unexpected trailing bytes",
                    bytes.len() as u64 - expected
                ),
            ));
        }
        check_crc(bytes, HEADER_LEN)?;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let subject_id = rd.u16("subject id")?;
            let at = rd.pos;
            let level = rd.u8("level")?;
            if level as usize >= LEVELS {
                return Err(FormatError::new(
                    at as u64,
                    format!("level {level} outside 0..{LEVELS}"),
                ));
            }
            let raw = rd.take(4 * window_len, "samples")?;
            let samples = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push(WindowRecord {
                subject_id,
                level,
                samples,
            });
        }
        Ok(Self {
            sample_rate,
            window_len,
            records,
        })
    }
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> AppResult<()> {
    let bytes = ds.encode().map_err(|e| AppError::format(path, e))?;
    fs::write(path, bytes).map_err(|e| AppError::io(path, e))
}

/// Reads a binary dataset, or a CSV export when the file does not start with the magic.
pub fn read_dataset(path: &Path, csv_sample_rate: u32) -> AppResult<(Dataset, u32)> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    let crc = crc32fast::hash(&bytes);
    let ds = if bytes.starts_with(b"subject_id") {
        read_csv(bytes.as_slice(), csv_sample_rate)
    } else {
        Dataset::decode(&bytes)
    };
    ds.map(|d| (d, crc)).map_err(|e| AppError::format(path, e))
}

/// Parses `subject_id,level,s0,...,s{n-1}` rows.
pub fn read_csv(input: impl Read, sample_rate: u32) -> Result<Dataset, FormatError> {
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(input);
    let csv_err = |e: csv::Error| {
        let offset = e.position().map_or(0, |p| p.byte());
        FormatError::new(offset, format!("csv: {e}"))
    };
    let header = rd.headers().map_err(csv_err)?.clone();
    if header.len() < 3 || &header[0] != "subject_id" || &header[1] != "level" {
        return Err(FormatError::new(
            0,
            "csv header must start with subject_id,level,s0",
        ));
    }
    for (i, name) in header.iter().skip(2).enumerate() {
        if name != format!("s{i}") {
            return Err(FormatError::new(
                0,
                format!("csv header column {} is {name:?}, expected \"s{i}\"", i + 2),
            ));
        }
    }
    let mut records = Vec::new();
    for row in rd.records() {
        let row = row.map_err(csv_err)?;
        let offset = row.position().map_or(0, |p| p.byte());
        let field = |i: usize| row.get(i).unwrap_or("").trim();
        let bad = |i: usize, what: &str| {
            FormatError::new(
                offset,
                format!(
                    "csv line {}: column {i} is not {what}",
                    row.position().map_or(0, |p| p.line())
                ),
            )
        };
        let subject_id = field(0)
            .parse::<u16>()
            .map_err(|_| bad(0, "a subject id"))?;
        let level = field(1)
            .parse::<u8>()
            .ok()
            .filter(|&l| (l as usize) < LEVELS)
            .ok_or_else(|| bad(1, "a level in 0..5"))?;
        let samples = (2..row.len())
            .map(|i| field(i).parse::<f32>().map_err(|_| bad(i, "a number")))
            .collect::<Result<Vec<_>, _>>()?;
        records.push(WindowRecord {
            subject_id,
            level,
            samples,
        });
    }
    Dataset::new(sample_rate, records)
}
