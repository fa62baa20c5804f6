use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::CorpusManifest;
use crate::error::{Error, Result};

/// One JSON object per line, UTF-8, newline-terminated.
pub fn save_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_manifest(m: &CorpusManifest, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(m)? + "\n")?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<CorpusManifest> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
