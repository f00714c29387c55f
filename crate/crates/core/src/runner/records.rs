use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::patch::ExperimentRecord;

pub const CSV_HEADER: &str =
    "hook,layer,head,neuron,position,direction,metric,raw,normalized,clean_baseline,corrupt_baseline";

/// Serializes records as CSV; floats use the shortest decimal that parses
/// back to the same value, missing values are empty cells.
pub fn records_to_csv(records: &[ExperimentRecord]) -> Result<Vec<u8>> {
    if records.is_empty() {
        return Err(Error::Input("no records to write".into()));
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::Input(format!("csv buffer: {e}")))
}

pub fn write_csv(records: &[ExperimentRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = records_to_csv(records)?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn parse_csv(reader: impl Read) -> Result<Vec<ExperimentRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Input(format!(
            "unexpected CSV header {:?}; expected {CSV_HEADER:?}",
            header.join(",")
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<ExperimentRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(file)
}
