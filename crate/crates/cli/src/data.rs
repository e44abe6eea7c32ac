//! Panel CSV ingest and export.
//!
//! Long format, one row per occasion: `subject_id,time,y_1..y_p,x_1..x_d`.
//! Times are integer days. `x_1` is the intercept column unless the
//! intercept is injected with `add_intercept`.

use crate::CliError;
use ehmfm::{PanelDataset, SubjectRecord};
use log::warn;
use nalgebra::DMatrix;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestOptions {
    pub add_intercept: bool,
}

/// Result of reading a panel file.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub dataset: PanelDataset,
    /// Rows skipped because a response value was missing.
    pub dropped_rows: usize,
}

struct Row {
    line: u64,
    time: i64,
    y: Vec<f64>,
    x: Vec<f64>,
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim().to_ascii_lowercase().as_str(), "" | "na" | "nan" | "null")
}

fn number(cell: &str, line: u64, column: &str) -> Result<f64, CliError> {
    let v: f64 = cell
        .trim()
        .parse()
        .map_err(|_| CliError::Validation(format!("line {line}: column `{column}` is not numeric (`{cell}`)")))?;
    if !v.is_finite() {
        return Err(CliError::Validation(format!("line {line}: column `{column}` is not finite")));
    }
    Ok(v)
}

pub fn read_panel(path: &Path, opts: IngestOptions) -> Result<Ingested, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    read_panel_from(file, opts)
}

pub fn read_panel_from(reader: impl Read, opts: IngestOptions) -> Result<Ingested, CliError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| CliError::Validation(format!("reading header: {e}")))?.clone();
    if header.get(0) != Some("subject_id") || header.get(1) != Some("time") {
        return Err(CliError::Validation("line 1: header must start with `subject_id,time`".into()));
    }
    let names: Vec<&str> = header.iter().skip(2).collect();
    let n_y = names.iter().take_while(|n| n.starts_with("y_")).count();
    if n_y == 0 {
        return Err(CliError::Validation("line 1: no response columns `y_1..y_p`".into()));
    }
    if let Some(bad) = names[n_y..].iter().find(|n| !n.starts_with("x_")) {
        return Err(CliError::Validation(format!("line 1: unexpected column `{bad}` after the responses")));
    }
    let n_x = names.len() - n_y;
    if n_x == 0 && !opts.add_intercept {
        return Err(CliError::Validation("line 1: no covariate columns; pass --add-intercept for an intercept-only model".into()));
    }

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Row>> = HashMap::new();
    let mut dropped = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Validation(format!("malformed CSV: {e}")))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(CliError::Validation(format!("line {line}: expected {} fields, found {}", header.len(), rec.len())));
        }
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(CliError::Validation(format!("line {line}: empty subject_id")));
        }
        let time: i64 = rec[1]
            .parse()
            .map_err(|_| CliError::Validation(format!("line {line}: time `{}` is not an integer", &rec[1])))?;
        if (2..2 + n_y).any(|c| is_missing(&rec[c])) {
            dropped += 1;
            continue;
        }
        let y = (0..n_y).map(|c| number(&rec[2 + c], line, names[c])).collect::<Result<Vec<_>, _>>()?;
        let mut x = Vec::with_capacity(n_x + 1);
        if opts.add_intercept {
            x.push(1.0);
        }
        for c in 0..n_x {
            x.push(number(&rec[2 + n_y + c], line, names[n_y + c])?);
        }
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        groups.entry(id).or_default().push(Row { line, time, y, x });
    }
    if dropped > 0 {
        warn!("dropped {dropped} rows with missing responses");
    }

    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = groups.remove(&id).expect("grouped subject");
        rows.sort_by_key(|r| (r.time, r.line));
        if let Some(w) = rows.windows(2).find(|w| w[0].time == w[1].time) {
            return Err(CliError::Validation(format!(
                "line {}: duplicate (subject `{id}`, time {}) first seen on line {}",
                w[0].line.max(w[1].line),
                w[0].time,
                w[0].line.min(w[1].line)
            )));
        }
        let t = rows.len();
        let y = DMatrix::from_fn(n_y, t, |r, c| rows[c].y[r]);
        let d = rows.first().map_or(0, |r| r.x.len());
        let x = DMatrix::from_fn(d, t, |r, c| rows[c].x[r]);
        let first_line = rows.first().map_or(0, |r| r.line);
        let rec = SubjectRecord::new(id, rows.iter().map(|r| r.time).collect(), y, x)
            .map_err(|e| CliError::Validation(format!("line {first_line}: {e}")))?;
        subjects.push(rec);
    }
    let dataset = PanelDataset::new(subjects).map_err(CliError::from)?;
    Ok(Ingested { dataset, dropped_rows: dropped })
}

/// Writes the panel in the ingest schema, intercept column included.
pub fn write_panel(path: &Path, dataset: &PanelDataset) -> Result<(), CliError> {
    let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    write_panel_to(std::io::BufWriter::new(file), dataset).map_err(|e| CliError::io(path, e))
}

pub fn write_panel_to(writer: impl Write, dataset: &PanelDataset) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["subject_id".to_string(), "time".to_string()];
    header.extend((1..=dataset.p).map(|l| format!("y_{l}")));
    header.extend((1..=dataset.d).map(|u| format!("x_{u}")));
    w.write_record(&header)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for s in &dataset.subjects {
        for t in 0..s.len() {
            row.clear();
            row.push(s.id.clone());
            row.push(s.times[t].to_string());
            row.extend(s.y.column(t).iter().map(|v| v.to_string()));
            row.extend(s.x.column(t).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()
}

/// Writes `subject_id,time,state` with 1-based states.
pub fn write_states(path: &Path, dataset: &PanelDataset, states: &[Vec<usize>]) -> Result<(), CliError> {
    let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let io = |e: csv::Error| CliError::Validation(format!("writing {}: {e}", path.display()));
    w.write_record(["subject_id", "time", "state"]).map_err(io)?;
    for (s, path_states) in dataset.subjects.iter().zip(states) {
        for (t, st) in s.times.iter().zip(path_states) {
            w.write_record([s.id.as_str(), &t.to_string(), &(st + 1).to_string()]).map_err(io)?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}
