//! CSV ingestion and block specifications.

use mslca::{BlockStructure, Dataset};
use nalgebra::DMatrix;

use crate::CliError;

/// Parses `"2,3,2"` into a block structure.
pub fn parse_blocks(spec: &str) -> Result<BlockStructure, CliError> {
    let dims = spec
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Input(format!("bad block size {p:?} in --blocks {spec:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    BlockStructure::new(dims).map_err(|e| CliError::Input(format!("--blocks {spec:?}: {e}")))
}

fn parse_cell(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Reads a numeric CSV. The first row is a header when none of its cells
/// parses as a number.
pub fn read_dataset(path: &str, blocks: &BlockStructure) -> Result<Dataset, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| CliError::Input(format!("cannot read {path}: {e}")))?;
    let mut records = Vec::new();
    for rec in reader.records() {
        records.push(rec.map_err(|e| CliError::Input(format!("{path}: {e}")))?);
    }
    let mut header = None;
    if let Some(first) = records.first() {
        if first.iter().all(|c| parse_cell(c).is_none()) {
            header = Some(records.remove(0));
        }
    }
    let first_line = if header.is_some() { 2 } else { 1 };
    let cols = records.first().map_or(0, |r| r.len());
    if cols != blocks.q() {
        return Err(CliError::Input(format!(
            "block sizes sum to {} but {path} has {cols} columns",
            blocks.q()
        )));
    }
    let mut values = Vec::with_capacity(records.len() * cols);
    for (i, rec) in records.iter().enumerate() {
        let line = first_line + i;
        for (j, cell) in rec.iter().enumerate() {
            let v = parse_cell(cell).ok_or_else(|| {
                let name = header
                    .as_ref()
                    .and_then(|h| h.get(j))
                    .map(|h| format!(" ({h})"))
                    .unwrap_or_default();
                CliError::Input(format!(
                    "{path}: row {line}, column {}{name}: {cell:?} is not a finite number",
                    j + 1
                ))
            })?;
            values.push(v);
        }
    }
    if records.is_empty() {
        return Err(CliError::Input(format!("{path} contains no data rows")));
    }
    let rows = DMatrix::from_row_slice(records.len(), cols, &values);
    Dataset::new(blocks.clone(), rows).map_err(CliError::from)
}
