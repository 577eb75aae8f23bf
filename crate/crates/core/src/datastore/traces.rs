//! Reasoning traces as JSONL, one trace per line. Reading validates every
//! trace invariant.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ReasoningTrace;

pub fn trace_line(trace: &ReasoningTrace) -> String {
    serde_json::to_string(trace).expect("traces serialize")
}

pub fn write_traces(path: &Path, traces: &[ReasoningTrace]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_to(path, file, traces)
}

pub fn append_traces(path: &Path, traces: &[ReasoningTrace]) -> Result<()> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    write_to(path, file, traces)
}

fn write_to(path: &Path, file: File, traces: &[ReasoningTrace]) -> Result<()> {
    let mut w = BufWriter::new(file);
    for t in traces {
        t.validate()?;
        writeln!(w, "{}", trace_line(t)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_traces(path: &Path) -> Result<Vec<ReasoningTrace>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let trace: ReasoningTrace = serde_json::from_str(&line)
            .map_err(|e| Error::data(path, format!("line {}: {e}", i + 1)))?;
        trace
            .validate()
            .map_err(|e| Error::data(path, format!("line {}: {e}", i + 1)))?;
        out.push(trace);
    }
    Ok(out)
}
