//! Borehole reading files.
//!
//! Input CSV schema, one row per (timestamp, depth):
//!
//! ```text
//! borehole_id,timestamp,depth_m,a_mm,b_mm
//! WS0306,2021-03-01T09:30:00Z,1.5,0.412,-0.087
//! ```
//!
//! Timestamps are RFC 3339; displacements are cumulative deflection in mm.
//! Malformed rows are collected in an [`IngestReport`] instead of aborting
//! the whole file.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{days_between, Observation};
use crate::model::StateLayout;

pub const CSV_HEADER: [&str; 5] = ["borehole_id", "timestamp", "depth_m", "a_mm", "b_mm"];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstrumentKind {
    #[default]
    Manual,
    InPlace,
}

impl InstrumentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            InstrumentKind::Manual => "manual",
            InstrumentKind::InPlace => "in_place",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstrumentSpec {
    pub kind: InstrumentKind,
    /// Instrument error per metre of depth (mm/m).
    pub eps_m: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InstrumentOverride {
    pub kind: Option<InstrumentKind>,
    pub eps_m: Option<f64>,
}

/// Instrument metadata for boreholes, with per-borehole overrides.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InstrumentCatalog {
    pub default_kind: InstrumentKind,
    pub default_eps_m: Option<f64>,
    pub boreholes: BTreeMap<String, InstrumentOverride>,
}

impl InstrumentCatalog {
    pub fn uniform(spec: InstrumentSpec) -> Self {
        Self {
            default_kind: spec.kind,
            default_eps_m: Some(spec.eps_m),
            boreholes: BTreeMap::new(),
        }
    }

    pub fn lookup(&self, borehole_id: &str) -> Result<InstrumentSpec> {
        let o = self.boreholes.get(borehole_id);
        let eps_m = o
            .and_then(|o| o.eps_m)
            .or(self.default_eps_m)
            .ok_or_else(|| {
                Error::InvalidParameter(format!("no eps_m configured for borehole {borehole_id}"))
            })?;
        if !(eps_m.is_finite() && eps_m > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "eps_m for borehole {borehole_id} must be positive, got {eps_m}"
            )));
        }
        Ok(InstrumentSpec {
            kind: o.and_then(|o| o.kind).unwrap_or(self.default_kind),
            eps_m,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reading {
    pub timestamp: DateTime<Utc>,
    pub depth_m: f64,
    pub a_mm: f64,
    pub b_mm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoreholeSeries {
    pub borehole_id: String,
    pub instrument_kind: InstrumentKind,
    pub eps_m: f64,
    /// Sorted by `(timestamp, depth)`.
    pub readings: Vec<Reading>,
    depths: Vec<f64>,
}

impl BoreholeSeries {
    /// Sorts the readings and derives the depth set. Duplicate
    /// `(timestamp, depth)` pairs and non-finite values are rejected.
    pub fn new(
        borehole_id: impl Into<String>,
        instrument: InstrumentSpec,
        mut readings: Vec<Reading>,
    ) -> Result<Self> {
        let borehole_id = borehole_id.into();
        if readings.is_empty() {
            return Err(Error::InsufficientData(format!(
                "borehole {borehole_id} has no readings"
            )));
        }
        if readings
            .iter()
            .any(|r| !(r.a_mm.is_finite() && r.b_mm.is_finite() && r.depth_m.is_finite()))
        {
            return Err(Error::InvalidParameter(format!(
                "borehole {borehole_id} has non-finite readings"
            )));
        }
        readings.sort_by(|x, y| {
            x.timestamp
                .cmp(&y.timestamp)
                .then(x.depth_m.total_cmp(&y.depth_m))
        });
        if readings
            .windows(2)
            .any(|w| w[0].timestamp == w[1].timestamp && w[0].depth_m == w[1].depth_m)
        {
            return Err(Error::InvalidParameter(format!(
                "borehole {borehole_id} has duplicate (timestamp, depth) readings"
            )));
        }
        let mut depths: Vec<f64> = readings.iter().map(|r| r.depth_m).collect();
        depths.sort_by(f64::total_cmp);
        depths.dedup();
        StateLayout::new(depths.clone())?;
        Ok(Self {
            borehole_id,
            instrument_kind: instrument.kind,
            eps_m: instrument.eps_m,
            readings,
            depths,
        })
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout::new(self.depths.clone()).expect("depth set validated on construction")
    }

    pub fn first_timestamp(&self) -> DateTime<Utc> {
        self.readings[0].timestamp
    }

    /// One observation per distinct timestamp; depths missing at that
    /// timestamp are masked out.
    pub fn epochs(&self) -> Vec<(DateTime<Utc>, Observation)> {
        let n = self.depths.len();
        let position: HashMap<u64, usize> = self
            .depths
            .iter()
            .enumerate()
            .map(|(i, d)| (d.to_bits(), i))
            .collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < self.readings.len() {
            let t = self.readings[i].timestamp;
            let mut values = DVector::zeros(2 * n);
            let mut observed = vec![false; 2 * n];
            while i < self.readings.len() && self.readings[i].timestamp == t {
                let r = &self.readings[i];
                let d = position[&r.depth_m.to_bits()];
                values[2 * d] = r.a_mm;
                values[2 * d + 1] = r.b_mm;
                observed[2 * d] = true;
                observed[2 * d + 1] = true;
                i += 1;
            }
            let obs = Observation::masked(values, observed).expect("mask sized to values");
            out.push((t, obs));
        }
        out
    }

    /// Epochs as day offsets from the first timestamp.
    pub fn epoch_offsets(&self) -> Vec<(f64, Observation)> {
        let origin = self.first_timestamp();
        self.epochs()
            .into_iter()
            .map(|(t, o)| (days_between(origin, t), o))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    ColumnCount,
    EmptyBoreholeId,
    InvalidTimestamp,
    NonNumeric,
    NonFinite,
    NonPositiveDepth,
    DuplicateKey,
    InconsistentDepth,
}

impl RejectReason {
    /// Malformed rows, as opposed to well-formed rows inconsistent with the rest of the series.
    pub fn is_schema_violation(self) -> bool {
        !matches!(
            self,
            RejectReason::DuplicateKey | RejectReason::InconsistentDepth
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedRow {
    pub line: u64,
    pub reason: RejectReason,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub total_rows: usize,
    pub accepted_rows: usize,
    pub rejected: Vec<RejectedRow>,
}

struct ParsedRow {
    line: u64,
    borehole_id: String,
    reading: Reading,
}

fn parse_number(field: &str, column: &str) -> std::result::Result<f64, (RejectReason, String)> {
    let v: f64 = field.parse().map_err(|_| {
        (
            RejectReason::NonNumeric,
            format!("{column}: {field:?} is not a number"),
        )
    })?;
    if !v.is_finite() {
        return Err((
            RejectReason::NonFinite,
            format!("{column}: {field:?} is not finite"),
        ));
    }
    Ok(v)
}

fn parse_row(
    record: &csv::StringRecord,
) -> std::result::Result<(String, Reading), (RejectReason, String)> {
    if record.len() != CSV_HEADER.len() {
        return Err((
            RejectReason::ColumnCount,
            format!(
                "expected {} fields, found {}",
                CSV_HEADER.len(),
                record.len()
            ),
        ));
    }
    let id = record[0].to_string();
    if id.is_empty() {
        return Err((RejectReason::EmptyBoreholeId, "borehole_id is empty".into()));
    }
    let timestamp = DateTime::parse_from_rfc3339(&record[1])
        .map_err(|e| {
            (
                RejectReason::InvalidTimestamp,
                format!("timestamp {:?}: {e}", &record[1]),
            )
        })?
        .with_timezone(&Utc);
    let depth_m = parse_number(&record[2], "depth_m")?;
    if depth_m <= 0.0 {
        return Err((
            RejectReason::NonPositiveDepth,
            format!("depth_m {depth_m} is not positive"),
        ));
    }
    let a_mm = parse_number(&record[3], "a_mm")?;
    let b_mm = parse_number(&record[4], "b_mm")?;
    Ok((
        id,
        Reading {
            timestamp,
            depth_m,
            a_mm,
            b_mm,
        },
    ))
}

/// Parses a readings CSV into one series per borehole id, ordered by id.
pub fn parse_readings_csv<R: Read>(
    input: R,
    catalog: &InstrumentCatalog,
) -> Result<(Vec<BoreholeSeries>, IngestReport)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);

    let headers = reader
        .headers()
        .map_err(|e| Error::Parse(format!("cannot read header: {e}")))?
        .clone();
    for (i, expected) in CSV_HEADER.iter().enumerate() {
        match headers.get(i) {
            Some(h) if h == *expected => {}
            Some(h) => {
                return Err(Error::Schema(format!(
                    "column {} should be `{expected}`, found `{h}`",
                    i + 1
                )))
            }
            None => return Err(Error::Schema(format!("missing column `{expected}`"))),
        }
    }
    if headers.len() > CSV_HEADER.len() {
        return Err(Error::Schema(format!(
            "unexpected column `{}`",
            &headers[CSV_HEADER.len()]
        )));
    }

    let mut report = IngestReport::default();
    let mut rows: Vec<ParsedRow> = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let line = reader.position().line();
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                if matches!(e.kind(), csv::ErrorKind::Io(_)) {
                    return Err(Error::Parse(format!("read failed: {e}")));
                }
                report.total_rows += 1;
                report.rejected.push(RejectedRow {
                    line: line + 1,
                    reason: RejectReason::NonNumeric,
                    detail: e.to_string(),
                });
                continue;
            }
        }
        let line = record.position().map(|p| p.line()).unwrap_or(line + 1);
        report.total_rows += 1;
        match parse_row(&record) {
            Ok((borehole_id, reading)) => rows.push(ParsedRow {
                line,
                borehole_id,
                reading,
            }),
            Err((reason, detail)) => report.rejected.push(RejectedRow {
                line,
                reason,
                detail,
            }),
        }
    }

    let mut grouped: BTreeMap<String, Vec<ParsedRow>> = BTreeMap::new();
    for row in rows {
        grouped
            .entry(row.borehole_id.clone())
            .or_default()
            .push(row);
    }

    let mut series = Vec::new();
    for (id, rows) in grouped {
        let mut seen: BTreeSet<(DateTime<Utc>, u64)> = BTreeSet::new();
        let mut unique = Vec::with_capacity(rows.len());
        for row in rows {
            if seen.insert((row.reading.timestamp, row.reading.depth_m.to_bits())) {
                unique.push(row);
            } else {
                report.rejected.push(RejectedRow {
                    line: row.line,
                    reason: RejectReason::DuplicateKey,
                    detail: format!(
                        "duplicate reading for {id} at {} depth {}",
                        row.reading
                            .timestamp
                            .to_rfc3339_opts(SecondsFormat::AutoSi, true),
                        row.reading.depth_m
                    ),
                });
            }
        }

        // depth set: depths present at no fewer than half of the timestamps
        let n_times = unique
            .iter()
            .map(|r| r.reading.timestamp)
            .collect::<BTreeSet<_>>()
            .len();
        let mut depth_counts: HashMap<u64, usize> = HashMap::new();
        for r in &unique {
            *depth_counts.entry(r.reading.depth_m.to_bits()).or_default() += 1;
        }
        let mut kept = Vec::with_capacity(unique.len());
        for row in unique {
            if 2 * depth_counts[&row.reading.depth_m.to_bits()] >= n_times {
                kept.push(row.reading);
            } else {
                report.rejected.push(RejectedRow {
                    line: row.line,
                    reason: RejectReason::InconsistentDepth,
                    detail: format!(
                        "depth {} is missing from most timestamps of {id}",
                        row.reading.depth_m
                    ),
                });
            }
        }
        if kept.is_empty() {
            continue;
        }
        report.accepted_rows += kept.len();
        let instrument = catalog.lookup(&id)?;
        series.push(BoreholeSeries::new(id, instrument, kept)?);
    }
    report.rejected.sort_by_key(|r| r.line);

    let rejected = report
        .rejected
        .iter()
        .filter(|r| r.reason.is_schema_violation())
        .count();
    if report.total_rows > 0 && 2 * rejected > report.total_rows {
        return Err(Error::TooManyRejections {
            rejected,
            total: report.total_rows,
        });
    }
    Ok((series, report))
}

pub fn read_readings_file(
    path: &Path,
    catalog: &InstrumentCatalog,
) -> Result<(Vec<BoreholeSeries>, IngestReport)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_readings_csv(std::io::BufReader::new(file), catalog)
}

pub fn format_timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

/// Writes series in the input CSV schema.
pub fn write_series_csv<W: Write>(out: W, series: &[BoreholeSeries]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    w.write_record(CSV_HEADER).map_err(ser)?;
    for s in series {
        for r in &s.readings {
            w.write_record([
                s.borehole_id.clone(),
                format_timestamp(r.timestamp),
                r.depth_m.to_string(),
                r.a_mm.to_string(),
                r.b_mm.to_string(),
            ])
            .map_err(ser)?;
        }
    }
    w.flush().map_err(|e| Error::Serialization(e.to_string()))
}
