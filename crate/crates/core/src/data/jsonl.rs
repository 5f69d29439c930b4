use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::UbsSample;
use crate::error::{Error, Result};

/// Writes one JSON object per line.
pub fn write_jsonl(dataset: &[UbsSample], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in dataset {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<UbsSample>> {
    parse_jsonl(BufReader::new(File::open(path)?))
}

pub(crate) fn parse_jsonl<R: BufRead>(r: R) -> Result<Vec<UbsSample>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: UbsSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            msg: e.to_string(),
        })?;
        sample
            .validate()
            .map_err(|e| Error::Validation(format!("line {}: {}", n + 1, e)))?;
        out.push(sample);
    }
    Ok(out)
}
