use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mstcar::diagnostics::{self, DicResult, Family, IntervalSummary};
use mstcar::io::{self, SiteMap};
use mstcar::model::RateDataset;
use mstcar::sampler::PosteriorSamples;

use crate::failure::Failure;

fn write_error(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Config(format!("cannot write {}: {e}", path.display()))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    io::write_json_atomic(path, value).map_err(|e| write_error(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| write_error(path, e))
}

pub fn create_file(path: &Path) -> Result<fs::File, Failure> {
    fs::File::create(path).map_err(|e| write_error(path, e))
}

fn push_summary(out: &mut String, s: &IntervalSummary) {
    let _ = writeln!(out, ",{},{},{}", s.median, s.lower, s.upper);
}

/// Interval summaries, Σ_η summaries and per-group trends of one fit, as
/// `summary.csv`, `sigma_eta.csv` and `trend.csv` in `dir`. Returns the DIC.
pub fn write_fit_outputs(
    dir: &Path,
    samples: &PosteriorSamples,
    data: &RateDataset,
    sites: &SiteMap,
) -> Result<DicResult, Failure> {
    fs::create_dir_all(dir).map_err(|e| write_error(dir, e))?;
    let mut rows = Vec::new();
    for family in Family::ALL {
        rows.extend(diagnostics::interval_summary(samples, family).map_err(Failure::config)?);
    }
    let path = dir.join("summary.csv");
    io::write_summary(&rows, sites, create_file(&path)?).map_err(|e| write_error(&path, e))?;

    let sigma = diagnostics::sigma_eta_summary(samples).map_err(Failure::config)?;
    let mut text = String::from("quantity,time,group,group2,median,lo95,hi95\n");
    for (t, per_group) in sigma.variances.iter().enumerate() {
        for (k, s) in per_group.iter().enumerate() {
            let _ = write!(text, "variance,{},{},", t + 1, k + 1);
            push_summary(&mut text, s);
        }
    }
    for (t, k, k2, s) in &sigma.correlations {
        let _ = write!(text, "correlation,{},{},{}", t + 1, k + 1, k2 + 1);
        push_summary(&mut text, s);
    }
    write_text(&dir.join("sigma_eta.csv"), &text)?;

    let mut text = String::from("group,time,median,lo95,hi95\n");
    for k in 0..data.n_groups() {
        let trend = diagnostics::nationwide_trend(samples, data, k).map_err(Failure::config)?;
        for (t, s) in trend.iter().enumerate() {
            let _ = write!(text, "{},{}", k + 1, t + 1);
            push_summary(&mut text, s);
        }
    }
    write_text(&dir.join("trend.csv"), &text)?;

    diagnostics::dic(samples, data).map_err(Failure::config)
}
