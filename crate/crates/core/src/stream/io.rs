//! On-disk stream formats.
//!
//! JSONL: a header line `{"format":"earlywarn-stream/1","A":<num>}` followed by
//! one object per case. `tau` is never stored and is recomputed on load.
//!
//! CSV: `case_id,j,l,delta,rho,y,deviation`, one row per prediction point,
//! rows grouped by case in arrival order. The expected outcome is not part of
//! the CSV layout and defaults to 0.5 unless supplied by the caller.
//!
//! Base matrix: `case_id,j,model_index,y_hat` plus a truth sidecar
//! `case_id,y,deviation,l` whose row order is the arrival order.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    BasePredictionMatrix, CaseRecord, CaseTruth, PredictionPoint, PredictionStream, DEFAULT_EXPECTED_OUTCOME,
};
use crate::{Error, Result};

pub const JSONL_FORMAT_TAG: &str = "earlywarn-stream/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamFormat {
    Jsonl,
    Csv,
}

impl StreamFormat {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Some(StreamFormat::Jsonl),
            "csv" => Some(StreamFormat::Csv),
            _ => None,
        }
    }
}

impl FromStr for StreamFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(StreamFormat::Jsonl),
            "csv" => Ok(StreamFormat::Csv),
            other => Err(Error::Config(format!("unknown stream format `{other}`"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonHeader {
    format: String,
    #[serde(rename = "A")]
    expected_outcome: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonPoint {
    j: usize,
    delta: f64,
    rho: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonCase {
    case_id: String,
    y: f64,
    deviation: bool,
    points: Vec<JsonPoint>,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    case_id: String,
    j: usize,
    l: usize,
    delta: f64,
    rho: f64,
    y: f64,
    #[serde(deserialize_with = "de_bool")]
    deviation: bool,
}

#[derive(Serialize, Deserialize)]
struct MatrixRow {
    case_id: String,
    j: usize,
    model_index: usize,
    y_hat: f64,
}

#[derive(Serialize, Deserialize)]
struct TruthRow {
    case_id: String,
    y: f64,
    #[serde(deserialize_with = "de_bool")]
    deviation: bool,
    l: usize,
}

fn de_bool<'de, D: serde::Deserializer<'de>>(de: D) -> std::result::Result<bool, D::Error> {
    let raw = String::deserialize(de)?;
    match raw.trim().to_ascii_lowercase().as_str() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(serde::de::Error::custom(format!("invalid boolean `{other}`"))),
    }
}

/// Builds a case from explicitly indexed points; `tau` uses `length`.
fn assemble_case(
    case_id: String,
    raw: Vec<(usize, f64, f64)>,
    length: usize,
    outcome: f64,
    deviation: bool,
) -> Result<CaseRecord> {
    let points = raw
        .into_iter()
        .map(|(j, delta, rho)| PredictionPoint {
            j,
            delta,
            rho,
            tau: j as f64 / length.max(1) as f64,
        })
        .collect();
    let case = CaseRecord {
        case_id,
        points,
        length,
        outcome,
        deviation,
    };
    case.validate()?;
    Ok(case)
}

pub fn load_stream(path: impl AsRef<Path>, format: StreamFormat) -> Result<PredictionStream> {
    let path = path.as_ref();
    match format {
        StreamFormat::Jsonl => load_jsonl(path),
        StreamFormat::Csv => load_csv(path, DEFAULT_EXPECTED_OUTCOME),
    }
}

/// Like [`load_stream`] but forces the expected outcome, overriding any header.
pub fn load_stream_with_outcome(
    path: impl AsRef<Path>,
    format: StreamFormat,
    expected_outcome: f64,
) -> Result<PredictionStream> {
    let path = path.as_ref();
    match format {
        StreamFormat::Jsonl => {
            let s = load_jsonl(path)?;
            PredictionStream::new(s.into_cases(), expected_outcome)
        }
        StreamFormat::Csv => load_csv(path, expected_outcome),
    }
}

fn load_jsonl(path: &Path) -> Result<PredictionStream> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut expected_outcome = DEFAULT_EXPECTED_OUTCOME;
    let mut cases = Vec::new();
    let mut first = true;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx as u64 + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if first && value.get("format").is_some() {
            first = false;
            let header: JsonHeader = serde_json::from_value(value).map_err(|e| Error::Parse {
                line: line_no,
                message: format!("invalid header: {e}"),
            })?;
            if header.format != JSONL_FORMAT_TAG {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("unsupported format `{}`", header.format),
                });
            }
            expected_outcome = header.expected_outcome;
            continue;
        }
        first = false;
        let case: JsonCase = serde_json::from_value(value).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let length = case.points.len();
        let raw = case.points.into_iter().map(|p| (p.j, p.delta, p.rho)).collect();
        cases.push(assemble_case(case.case_id, raw, length, case.y, case.deviation)?);
    }
    PredictionStream::new(cases, expected_outcome)
}

fn csv_parse_error(err: csv::Error) -> Error {
    let line = err.position().map_or(0, |p| p.line());
    Error::Parse {
        line,
        message: err.to_string(),
    }
}

fn load_csv(path: &Path, expected_outcome: f64) -> Result<PredictionStream> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Parse {
                line: 1,
                message: format!("{other:?}"),
            },
        })?;
    let expected = ["case_id", "j", "l", "delta", "rho", "y", "deviation"];
    let headers = reader.headers().map_err(csv_parse_error)?.clone();
    if headers.iter().collect::<Vec<_>>() != expected {
        if headers.is_empty() {
            return Err(Error::EmptyStream);
        }
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{}`", expected.join(",")),
        });
    }

    struct Pending {
        case_id: String,
        length: usize,
        outcome: f64,
        deviation: bool,
        raw: Vec<(usize, f64, f64)>,
    }

    let mut cases = Vec::new();
    let mut finished: HashSet<String> = HashSet::new();
    let mut pending: Option<Pending> = None;
    for record in reader.deserialize::<CsvRow>() {
        let row = record.map_err(csv_parse_error)?;
        let same = pending.as_ref().is_some_and(|p| p.case_id == row.case_id);
        if !same {
            if let Some(p) = pending.take() {
                finished.insert(p.case_id.clone());
                cases.push(assemble_case(p.case_id, p.raw, p.length, p.outcome, p.deviation)?);
            }
            if finished.contains(&row.case_id) {
                return Err(Error::validation(
                    &row.case_id,
                    "case_id",
                    "rows of this case are not contiguous",
                ));
            }
            pending = Some(Pending {
                case_id: row.case_id.clone(),
                length: row.l,
                outcome: row.y,
                deviation: row.deviation,
                raw: Vec::new(),
            });
        }
        let p = pending.as_mut().expect("pending case");
        if p.length != row.l || p.outcome != row.y || p.deviation != row.deviation {
            return Err(Error::validation(
                &row.case_id,
                "l",
                format!("case-level columns change at prefix {}", row.j),
            ));
        }
        p.raw.push((row.j, row.delta, row.rho));
    }
    if let Some(p) = pending.take() {
        cases.push(assemble_case(p.case_id, p.raw, p.length, p.outcome, p.deviation)?);
    }
    PredictionStream::new(cases, expected_outcome)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn write_stream(stream: &PredictionStream, path: impl AsRef<Path>, format: StreamFormat) -> Result<()> {
    let path = path.as_ref();
    match format {
        StreamFormat::Jsonl => {
            let mut out = create(path)?;
            let header = JsonHeader {
                format: JSONL_FORMAT_TAG.to_string(),
                expected_outcome: stream.expected_outcome(),
            };
            let mut write_line = |value: String| -> Result<()> {
                out.write_all(value.as_bytes())
                    .and_then(|_| out.write_all(b"\n"))
                    .map_err(|e| Error::io(path, e))
            };
            write_line(serde_json::to_string(&header).expect("header serializes"))?;
            for case in stream.cases() {
                let json = JsonCase {
                    case_id: case.case_id.clone(),
                    y: case.outcome,
                    deviation: case.deviation,
                    points: case
                        .points
                        .iter()
                        .map(|p| JsonPoint {
                            j: p.j,
                            delta: p.delta,
                            rho: p.rho,
                        })
                        .collect(),
                };
                write_line(serde_json::to_string(&json).expect("case serializes"))?;
            }
            out.flush().map_err(|e| Error::io(path, e))
        }
        StreamFormat::Csv => {
            let mut writer = csv::Writer::from_writer(create(path)?);
            for case in stream.cases() {
                for p in &case.points {
                    writer
                        .serialize(CsvRow {
                            case_id: case.case_id.clone(),
                            j: p.j,
                            l: case.length,
                            delta: p.delta,
                            rho: p.rho,
                            y: case.outcome,
                            deviation: case.deviation,
                        })
                        .map_err(|e| csv_write_error(path, e))?;
                }
            }
            writer.flush().map_err(|e| Error::io(path, e))
        }
    }
}

fn csv_write_error(path: &Path, err: csv::Error) -> Error {
    match err.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("cannot serialize row: {other:?}")),
    }
}

/// Reads a base-prediction matrix and its truth sidecar. Cases come back in
/// the sidecar's row order.
pub fn load_base_matrix(
    matrix_path: impl AsRef<Path>,
    truth_path: impl AsRef<Path>,
    expected_outcome: f64,
) -> Result<(Vec<BasePredictionMatrix>, Vec<CaseTruth>)> {
    let truth_path = truth_path.as_ref();
    let matrix_path = matrix_path.as_ref();

    let mut truths = Vec::new();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(truth_path)
        .map_err(|e| open_error(truth_path, e))?;
    for record in reader.deserialize::<TruthRow>() {
        let row = record.map_err(csv_parse_error)?;
        truths.push(CaseTruth {
            case_id: row.case_id,
            y: row.y,
            deviation: row.deviation,
            l: row.l,
        });
    }
    if truths.is_empty() {
        return Err(Error::EmptyStream);
    }

    let mut grid: HashMap<String, BTreeMap<usize, BTreeMap<usize, f64>>> = HashMap::new();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(matrix_path)
        .map_err(|e| open_error(matrix_path, e))?;
    for record in reader.deserialize::<MatrixRow>() {
        let row = record.map_err(csv_parse_error)?;
        let slot = grid
            .entry(row.case_id.clone())
            .or_default()
            .entry(row.j)
            .or_default();
        if slot.insert(row.model_index, row.y_hat).is_some() {
            return Err(Error::validation(
                &row.case_id,
                "model_index",
                format!(
                    "duplicate prediction for prefix {} model {}",
                    row.j, row.model_index
                ),
            ));
        }
    }

    let mut matrices = Vec::with_capacity(truths.len());
    for truth in &truths {
        let per_prefix = grid
            .remove(&truth.case_id)
            .ok_or_else(|| Error::validation(&truth.case_id, "case_id", "no predictions for this case"))?;
        let mut entries = Vec::with_capacity(truth.l);
        let mut models: Option<Vec<usize>> = None;
        for j in 1..=truth.l {
            let row = per_prefix
                .get(&j)
                .ok_or_else(|| Error::validation(&truth.case_id, "j", format!("missing prefix {j}")))?;
            let keys: Vec<usize> = row.keys().copied().collect();
            match &models {
                None => models = Some(keys),
                Some(m) if *m != keys => {
                    return Err(Error::validation(
                        &truth.case_id,
                        "model_index",
                        format!("prefix {j} has a different set of base models"),
                    ))
                }
                Some(_) => {}
            }
            entries.push(row.values().copied().collect());
        }
        if per_prefix.len() != truth.l {
            return Err(Error::validation(
                &truth.case_id,
                "l",
                format!("predictions beyond case length {}", truth.l),
            ));
        }
        let matrix = BasePredictionMatrix {
            case_id: truth.case_id.clone(),
            expected_outcome,
            entries,
        };
        matrix.validate()?;
        matrices.push(matrix);
    }
    if let Some(orphan) = grid.keys().min() {
        return Err(Error::validation(
            orphan,
            "case_id",
            "predictions without truth record",
        ));
    }
    Ok((matrices, truths))
}

fn open_error(path: &Path, err: csv::Error) -> Error {
    match err.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            line: 1,
            message: format!("{other:?}"),
        },
    }
}

pub fn write_base_matrix(
    matrices: &[BasePredictionMatrix],
    truths: &[CaseTruth],
    matrix_path: impl AsRef<Path>,
    truth_path: impl AsRef<Path>,
) -> Result<()> {
    let matrix_path = matrix_path.as_ref();
    let truth_path = truth_path.as_ref();
    let mut writer = csv::Writer::from_writer(create(matrix_path)?);
    for m in matrices {
        for (idx, row) in m.entries.iter().enumerate() {
            for (model_index, &y_hat) in row.iter().enumerate() {
                writer
                    .serialize(MatrixRow {
                        case_id: m.case_id.clone(),
                        j: idx + 1,
                        model_index,
                        y_hat,
                    })
                    .map_err(|e| csv_write_error(matrix_path, e))?;
            }
        }
    }
    writer.flush().map_err(|e| Error::io(matrix_path, e))?;

    let mut writer = csv::Writer::from_writer(create(truth_path)?);
    for t in truths {
        writer
            .serialize(TruthRow {
                case_id: t.case_id.clone(),
                y: t.y,
                deviation: t.deviation,
                l: t.l,
            })
            .map_err(|e| csv_write_error(truth_path, e))?;
    }
    writer.flush().map_err(|e| Error::io(truth_path, e))
}
