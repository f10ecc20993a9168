use std::io::Write;
use std::path::{Path, PathBuf};

use inclino_core::artifacts::{
    anomalies_csv, artifact_name, forecast_csv, smoothed_csv, to_json, validation_summary_csv,
    write_all, write_atomic, AnomalyReport, ForecastArtifact, PendingFile, SmoothedArtifact,
};
use inclino_core::dataset::{read_readings_file, write_series_csv, IngestReport};
use inclino_core::pipeline::smooth_series;
use inclino_core::validation::{generate_synthetic, validate_forecast};
use inclino_core::{BoreholeSeries, Error, ValidationReport};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Smooth,
    Forecast,
    Detect,
    Validate,
}

#[derive(Debug, Serialize)]
struct IngestEntry {
    input: String,
    #[serde(flatten)]
    report: IngestReport,
}

struct BoreholeOutput {
    files: Vec<PendingFile>,
    validation: Option<ValidationReport>,
}

fn in_borehole(id: &str) -> impl Fn(Error) -> CliError + '_ {
    move |source| CliError::Borehole {
        id: id.to_owned(),
        source,
    }
}

fn load_inputs(
    config: &RunConfig,
    inputs: &[PathBuf],
) -> Result<(Vec<BoreholeSeries>, Vec<IngestEntry>), CliError> {
    let catalog = config.catalog();
    let parsed: Vec<_> = inputs
        .par_iter()
        .map(|p| read_readings_file(p, &catalog).map(|(s, r)| (p, s, r)))
        .collect();
    let mut series = Vec::new();
    let mut ingest = Vec::new();
    for item in parsed {
        let (path, s, report) = item?;
        for row in &report.rejected {
            warn!(
                "{}:{}: rejected ({:?}) {}",
                path.display(),
                row.line,
                row.reason,
                row.detail
            );
        }
        ingest.push(IngestEntry {
            input: path.display().to_string(),
            report,
        });
        series.extend(s);
    }
    series.sort_by(|a, b| a.borehole_id.cmp(&b.borehole_id));
    if let Some(w) = series
        .windows(2)
        .find(|w| w[0].borehole_id == w[1].borehole_id)
    {
        return Err(Error::Parse(format!(
            "borehole {} appears in more than one input file",
            w[0].borehole_id
        ))
        .into());
    }
    if series.is_empty() {
        return Err(Error::InsufficientData("input holds no accepted readings".into()).into());
    }
    Ok((series, ingest))
}

fn borehole(
    kind: Kind,
    config: &RunConfig,
    s: &BoreholeSeries,
) -> Result<BoreholeOutput, CliError> {
    let id = s.borehole_id.as_str();
    let ctx = in_borehole(id);
    let mut files = Vec::new();
    if kind == Kind::Validate {
        let report = validate_forecast(s, &config.validation()).map_err(&ctx)?;
        files.push(PendingFile::new(
            artifact_name(id, "validation", "json"),
            to_json(&report).map_err(&ctx)?,
        ));
        return Ok(BoreholeOutput {
            files,
            validation: Some(report),
        });
    }

    let outcome = smooth_series(s, &config.pipeline()).map_err(&ctx)?;
    let gate = config.gate();
    match kind {
        Kind::Smooth | Kind::Detect => {
            if kind == Kind::Smooth {
                let art = SmoothedArtifact::new(id, s.instrument_kind, &outcome);
                files.push(PendingFile::new(
                    artifact_name(id, "smoothed", "json"),
                    to_json(&art).map_err(&ctx)?,
                ));
                files.push(PendingFile::new(
                    artifact_name(id, "smoothed", "csv"),
                    smoothed_csv(&outcome).map_err(&ctx)?,
                ));
            }
            let report = AnomalyReport::new(id, gate.as_ref(), &outcome);
            files.push(PendingFile::new(
                artifact_name(id, "anomalies", "json"),
                to_json(&report).map_err(&ctx)?,
            ));
            files.push(PendingFile::new(
                artifact_name(id, "anomalies", "csv"),
                anomalies_csv(&report).map_err(&ctx)?,
            ));
        }
        Kind::Forecast => {
            let bundle = outcome
                .forecast(config.forecast_dt, config.forecast_horizon)
                .map_err(&ctx)?;
            let art = ForecastArtifact::new(
                id,
                &outcome.layout,
                outcome.result.grid.origin_time,
                &bundle,
            );
            files.push(PendingFile::new(
                artifact_name(id, "forecast", "json"),
                to_json(&art).map_err(&ctx)?,
            ));
            files.push(PendingFile::new(
                artifact_name(id, "forecast", "csv"),
                forecast_csv(&art, &bundle).map_err(&ctx)?,
            ));
        }
        Kind::Validate => unreachable!(),
    }
    Ok(BoreholeOutput {
        files,
        validation: None,
    })
}

fn summary_table(reports: &[ValidationReport]) -> String {
    let mut out = format!(
        "{:<16} {:<10} {:>14} {:>18}\n",
        "borehole_id", "instrument", "metric", "anomalies_removed"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<16} {:<10} {:>14.6e} {:>18}\n",
            r.borehole_id,
            r.instrument_kind.as_str(),
            r.metric_value,
            r.anomalies_removed
        ));
    }
    out
}

/// Runs `kind` over every borehole. Nothing is written unless all boreholes succeed.
pub fn process(
    kind: Kind,
    config: &RunConfig,
    inputs: &[PathBuf],
    out: &Path,
) -> Result<(), CliError> {
    let (series, ingest) = load_inputs(config, inputs)?;
    info!("{} boreholes loaded", series.len());
    let results: Vec<Result<BoreholeOutput, CliError>> = series
        .par_iter()
        .map(|s| borehole(kind, config, s))
        .collect();

    let mut files = vec![PendingFile::new("ingest_report.json", to_json(&ingest)?)];
    let mut reports = Vec::new();
    for r in results {
        let o = r?;
        files.extend(o.files);
        reports.extend(o.validation);
    }
    if kind == Kind::Validate {
        files.push(PendingFile::new(
            "validation_summary.csv",
            validation_summary_csv(&reports)?,
        ));
    }
    let written = write_all(out, &files)?;
    info!("wrote {} files to {}", written.len(), out.display());
    if kind == Kind::Validate {
        print!("{}", summary_table(&reports));
    }
    Ok(())
}

pub fn simulate(config: &RunConfig, output: Option<&Path>) -> Result<(), CliError> {
    let series = (0..config.simulate.boreholes)
        .map(|i| generate_synthetic(&config.synthetic_spec(i)).map(|s| s.series))
        .collect::<Result<Vec<_>, _>>()?;
    let mut bytes = Vec::new();
    write_series_csv(&mut bytes, &series)?;
    match output {
        Some(path) => {
            let name = path.file_name().ok_or_else(|| {
                CliError::Config(format!("{} is not a file path", path.display()))
            })?;
            let dir = match path.parent() {
                Some(p) if !p.as_os_str().is_empty() => p,
                _ => Path::new("."),
            };
            std::fs::create_dir_all(dir)
                .map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
            write_atomic(dir, &PendingFile::new(name.to_string_lossy(), bytes))?;
        }
        None => std::io::stdout()
            .write_all(&bytes)
            .map_err(|e| CliError::Config(format!("stdout: {e}")))?,
    }
    Ok(())
}
