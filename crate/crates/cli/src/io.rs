//! Measurement and profile files: RFC 4180 CSV, CRLF line ends, and numbers
//! in their shortest exactly-round-tripping form.

use std::path::{Path, PathBuf};

use adrfit::chroma::{FractionSchedule, PROTEINS};
use adrfit::estimation::{FractionData, UvSeries};

use crate::error::CliError;

pub const UV_HEADER: [&str; 2] = ["time_s", "absorbance"];
pub const FRACTION_HEADER: [&str; 4] = ["t_start_s", "t_end_s", "component", "concentration_mol_l"];

/// Shortest decimal that parses back to exactly `v`.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn uv_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_uv.csv"))
}

pub fn fraction_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_fractions.csv"))
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>, CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_path(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>, CliError> {
    csv::ReaderBuilder::new()
        .from_path(path)
        .map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))
}

/// Writes a header and rows of pre-formatted fields.
pub fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
    let mut w = writer(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_uv(path: &Path, series: &UvSeries) -> Result<(), CliError> {
    let rows = series
        .times
        .iter()
        .zip(&series.values)
        .map(|(t, v)| vec![fmt_f64(*t), fmt_f64(*v)]);
    write_rows(path, &UV_HEADER, rows)
}

pub fn write_fractions(path: &Path, data: &FractionData) -> Result<(), CliError> {
    let comps = data.schedule.components();
    let rows = data.schedule.intervals().iter().zip(&data.values).flat_map(|(&(a, b), vals)| {
        comps
            .iter()
            .zip(vals)
            .map(move |(&c, v)| vec![fmt_f64(a), fmt_f64(b), PROTEINS[c].to_string(), fmt_f64(*v)])
    });
    write_rows(path, &FRACTION_HEADER, rows)
}

fn check_header(path: &Path, rdr: &mut csv::Reader<std::fs::File>, expected: &[&str]) -> Result<(), CliError> {
    let header = rdr.headers()?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(CliError::Data(format!(
            "{}: header must be `{}`, found `{}`",
            path.display(),
            expected.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    Ok(())
}

fn number(path: &Path, line: u64, field: &str, text: &str) -> Result<f64, CliError> {
    match text.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(CliError::Data(format!(
            "{} line {line}: `{field}` must be a finite number, got `{text}`",
            path.display()
        ))),
    }
}

pub fn read_uv(path: &Path) -> Result<UvSeries, CliError> {
    let mut rdr = reader(path)?;
    check_header(path, &mut rdr, &UV_HEADER)?;
    let (mut times, mut values) = (Vec::new(), Vec::new());
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k as u64 + 2;
        times.push(number(path, line, "time_s", &rec[0])?);
        values.push(number(path, line, "absorbance", &rec[1])?);
    }
    UvSeries::new(times, values).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn read_fractions(path: &Path) -> Result<FractionData, CliError> {
    let mut rdr = reader(path)?;
    check_header(path, &mut rdr, &FRACTION_HEADER)?;
    let mut intervals: Vec<(f64, f64)> = Vec::new();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k as u64 + 2;
        let a = number(path, line, "t_start_s", &rec[0])?;
        let b = number(path, line, "t_end_s", &rec[1])?;
        let comp = PROTEINS.iter().position(|p| *p == rec[2].trim()).ok_or_else(|| {
            CliError::Data(format!(
                "{} line {line}: component must be one of {}, got `{}`",
                path.display(),
                PROTEINS.join(", "),
                &rec[2]
            ))
        })?;
        let v = number(path, line, "concentration_mol_l", &rec[3])?;
        if intervals.last() != Some(&(a, b)) {
            if let Some(&(_, prev_end)) = intervals.last() {
                if a < prev_end {
                    return Err(CliError::Data(format!(
                        "{} line {line}: intervals must be ascending and non-overlapping",
                        path.display()
                    )));
                }
            }
            intervals.push((a, b));
            rows.push(Vec::new());
        }
        rows.last_mut().unwrap().push((comp, v));
    }
    let components: Vec<usize> = rows.first().map(|r| r.iter().map(|e| e.0).collect()).unwrap_or_default();
    let mut values = Vec::with_capacity(rows.len());
    for (k, r) in rows.iter().enumerate() {
        let comps: Vec<usize> = r.iter().map(|e| e.0).collect();
        if comps != components {
            return Err(CliError::Data(format!(
                "{}: fraction {k} lists components {comps:?}, expected {components:?} as in the first fraction",
                path.display()
            )));
        }
        values.push(r.iter().map(|e| e.1).collect());
    }
    if intervals.is_empty() {
        return Err(CliError::Data(format!("{}: no fractions", path.display())));
    }
    let schedule =
        FractionSchedule::new(intervals, components).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    FractionData::new(schedule, values).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Reads whichever measurement files exist for `id`.
pub fn read_measurements(dir: &Path, id: &str) -> Result<(Option<UvSeries>, Option<FractionData>), CliError> {
    let uv = uv_path(dir, id);
    let fr = fraction_path(dir, id);
    let uv = uv.exists().then(|| read_uv(&uv)).transpose()?;
    let fr = fr.exists().then(|| read_fractions(&fr)).transpose()?;
    Ok((uv, fr))
}
