//! Binary parameter records: one JSON header line followed by little-endian f64s.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PolicyParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordHeader {
    pub name: String,
    pub model: ModelConfig,
    pub step: usize,
    pub seed: u64,
    pub num_values: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub header: RecordHeader,
    pub values: Vec<f64>,
}

impl Record {
    pub fn new(name: &str, model: &ModelConfig, step: usize, seed: u64, values: Vec<f64>) -> Self {
        Record {
            header: RecordHeader {
                name: name.to_string(),
                model: model.clone(),
                step,
                seed,
                num_values: values.len(),
            },
            values,
        }
    }

    pub fn into_params(self) -> Result<PolicyParams> {
        PolicyParams::from_flat(self.header.model, self.values)
    }
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, &r.header)?;
        buf.push(b'\n');
        for v in &r.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(f);
    let mut out = Vec::new();
    loop {
        let mut line = String::new();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Ok(out);
        }
        let header: RecordHeader = serde_json::from_str(line.trim_end()).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            line: out.len() + 1,
            message: format!("bad record header: {e}"),
        })?;
        let mut bytes = vec![0u8; header.num_values * 8];
        reader.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push(Record { header, values });
    }
}

/// Looks up a record by name.
pub fn take_record(records: &mut Vec<Record>, name: &str, path: &Path) -> Result<Record> {
    let pos = records
        .iter()
        .position(|r| r.header.name == name)
        .ok_or_else(|| Error::Schema {
            path: path.to_path_buf(),
            line: 0,
            message: format!("missing record {name:?}"),
        })?;
    Ok(records.remove(pos))
}
