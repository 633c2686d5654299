//! Localization tables in CSV.
//!
//! Columns are matched case-insensitively, accepting ThunderSTORM names:
//! `id`, `frame` or `t [s]`, `x [nm]`, `y [nm]`, `uncertainty [nm]`. Other
//! columns are ignored.

use std::io::{Read, Write};
use std::path::Path;

use palm_blink::{Dataset, Localization};
use serde::{Deserialize, Serialize};

use crate::config::RecordingConfig;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Column {
    Id,
    Frame,
    Time,
    X,
    Y,
    Uncertainty,
}

fn classify(header: &str) -> Option<Column> {
    let h = header.trim().to_ascii_lowercase();
    let h: String = h.chars().filter(|c| !c.is_whitespace()).collect();
    Some(match h.as_str() {
        "id" => Column::Id,
        "frame" => Column::Frame,
        "t" | "t[s]" | "time" | "time[s]" => Column::Time,
        "x" | "x[nm]" | "x_nm" => Column::X,
        "y" | "y[nm]" | "y_nm" => Column::Y,
        "uncertainty" | "uncertainty[nm]" | "uncertainty_xy[nm]" | "sigma" | "sigma[nm]" => Column::Uncertainty,
        _ => return None,
    })
}

/// What happened to the rows of an input table.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadReport {
    pub rows: usize,
    pub kept: usize,
    /// Rows outside the window and every noise region.
    pub outside_space: usize,
    /// Rows with a time outside (0, duration].
    pub outside_time: usize,
}

fn data_err(line: u64, msg: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("line {line}: {msg}"))
}

/// Parses a localization table against the recording geometry.
pub fn read_localizations<R: Read>(input: R, recording: &RecordingConfig) -> Result<(Dataset, ReadReport), CliError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers().map_err(|e| CliError::Data(format!("cannot read header: {e}")))?.clone();
    let index = |c: Column| -> Result<Option<usize>, CliError> {
        let found: Vec<usize> = headers.iter().enumerate().filter(|(_, h)| classify(h) == Some(c)).map(|(i, _)| i).collect();
        match found.len() {
            0 => Ok(None),
            1 => Ok(Some(found[0])),
            _ => Err(CliError::Data(format!("several columns map to {c:?}"))),
        }
    };
    let frame_col = index(Column::Frame)?;
    let time_col = index(Column::Time)?;
    let _ = index(Column::Id)?;
    let need = |c: Column, i: Option<usize>| i.ok_or_else(|| CliError::Data(format!("missing {c:?} column")));
    let x_col = need(Column::X, index(Column::X)?)?;
    let y_col = need(Column::Y, index(Column::Y)?)?;
    let s_col = need(Column::Uncertainty, index(Column::Uncertainty)?)?;
    let time_source = match (frame_col, time_col) {
        (Some(f), None) => Ok(f),
        (None, Some(t)) => Err(t),
        (Some(_), Some(_)) => return Err(CliError::Data("table has both frame and time columns".into())),
        (None, None) => return Err(CliError::Data("table has neither a frame nor a time column".into())),
    };

    let delta = recording.frame_length;
    let mut parsed = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::Data(format!("malformed row: {e}")))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| -> Result<f64, CliError> {
            let s = record.get(i).ok_or_else(|| data_err(line, "missing field"))?;
            let v: f64 = s.parse().map_err(|_| data_err(line, format!("cannot parse {s:?} as a number")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(data_err(line, format!("non-finite value {s:?}")))
            }
        };
        let t = match time_source {
            Ok(f) => {
                let s = record.get(f).ok_or_else(|| data_err(line, "missing frame"))?;
                let k: u64 = s.parse().map_err(|_| data_err(line, format!("frame {s:?} is not a positive integer")))?;
                if k == 0 {
                    return Err(data_err(line, "frames are numbered from 1"));
                }
                k as f64 * delta
            }
            Err(t) => field(t)?,
        };
        let sigma = field(s_col)?;
        if !(sigma > 0.0) {
            return Err(data_err(line, format!("uncertainty {sigma} is not positive")));
        }
        parsed.push(Localization { x: field(x_col)?, y: field(y_col)?, t, sigma });
    }

    let duration = match recording.duration {
        Some(b) => b,
        None => parsed.iter().map(|l| l.t).fold(0.0, f64::max),
    };
    if !(duration > 0.0) {
        return Err(CliError::Data("no localization with a positive time".into()));
    }
    let mut report = ReadReport { rows: parsed.len(), ..Default::default() };
    let mut kept = Vec::with_capacity(parsed.len());
    for l in parsed {
        let inside = recording.window.contains(l.x, l.y) || recording.noise_regions.iter().any(|w| w.contains(l.x, l.y));
        if !inside {
            report.outside_space += 1;
        } else if !(l.t > 0.0 && l.t <= duration) {
            report.outside_time += 1;
        } else {
            kept.push(l);
        }
    }
    report.kept = kept.len();
    let ds = Dataset::new(kept, recording.window, duration, delta, recording.noise_regions.clone())
        .map_err(|e| CliError::Data(e.to_string()))?;
    Ok((ds, report))
}

pub fn read_localizations_file(path: &Path, recording: &RecordingConfig) -> Result<(Dataset, ReadReport), CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
    read_localizations(std::io::BufReader::new(file), recording)
}

/// Frame index of `t` if it is exactly a whole number of frames.
fn exact_frame(t: f64, delta: f64) -> Option<u64> {
    let k = (t / delta).round();
    (k >= 1.0 && k * delta == t).then_some(k as u64)
}

/// Writes `dataset` as CSV. Times are written as frame numbers when every
/// time is an exact frame multiple, otherwise in seconds at full precision.
/// Coordinates and uncertainties are written with 6 decimals.
pub fn write_localizations<W: Write>(out: W, dataset: &Dataset) -> Result<(), CliError> {
    let delta = dataset.frame_length;
    let frames: Option<Vec<u64>> = dataset.localizations.iter().map(|l| exact_frame(l.t, delta)).collect();
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| CliError::Internal(format!("writing localizations: {e}"));
    let time_header = if frames.is_some() { "frame" } else { "t [s]" };
    w.write_record(["id", time_header, "x [nm]", "y [nm]", "uncertainty [nm]"]).map_err(io)?;
    for (i, l) in dataset.localizations.iter().enumerate() {
        let time = match &frames {
            Some(f) => f[i].to_string(),
            None => format!("{}", l.t),
        };
        w.write_record([
            (i + 1).to_string(),
            time,
            format!("{:.6}", l.x),
            format!("{:.6}", l.y),
            format!("{:.6}", l.sigma),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Internal(format!("writing localizations: {e}")))?;
    Ok(())
}
