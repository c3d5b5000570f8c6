use std::path::PathBuf;

use clap::Args;
use mstcar::covariance::CovarianceSpec;
use mstcar::io;
use mstcar::sampler::PosteriorSamples;
use mstcar::simstudy::{
    fit_record, fit_record_with, CoverageReport, FamilyIntervals, ReplicateRecord, TruthValues,
};
use rayon::prelude::*;

use crate::failure::Failure;
use crate::fit::parse_variants;
use crate::inputs;
use crate::lock::OutputLock;
use crate::outputs::{create_file, write_json};
use crate::simulate::{field_stem, load_design, replicate_stem};

#[derive(Args)]
pub struct CoverageArgs {
    /// Output directory of `simulate`.
    #[arg(long, env = "MSTCAR_STUDY")]
    study: PathBuf,
    /// Directory holding one `fit` output per replicate, named like the
    /// replicate files (`replicate_001/`); defaults to the study directory.
    #[arg(long, env = "MSTCAR_FITS")]
    fits: Option<PathBuf>,
    /// Variants to score; the first is the reference for DIC comparisons.
    #[arg(long, env = "MSTCAR_VARIANT", default_value = "mstcar")]
    variant: String,
    /// Score against (−∞, ∞) intervals instead of the fitted ones.
    #[arg(long, hide = true)]
    stub_intervals: bool,
    #[arg(long, env = "MSTCAR_OUT")]
    out: PathBuf,
}

pub fn run(args: &CoverageArgs) -> Result<(), Failure> {
    let variants = parse_variants(&args.variant)?;
    let study = &args.study;
    let fits = args.fits.clone().unwrap_or_else(|| study.clone());
    let design = load_design(&study.join("design.json"))?;
    let truth: CovarianceSpec = inputs::read_json(&study.join("truth.json"))?;
    let sites_path = study.join("sites.csv");
    let sites = io::read_site_map_file(&sites_path)
        .map_err(|e| Failure::Config(format!("{}: {e}", sites_path.display())))?;
    let n = design.n_replicates;

    // Every replicate needs every requested fit before anything is scored.
    for l in 0..n {
        for v in &variants {
            let path = fits
                .join(replicate_stem(l, n))
                .join(v.name())
                .join("samples.json");
            if !path.exists() {
                return Err(Failure::Config(format!(
                    "replicate {} has no {v} fit ({} missing)",
                    l + 1,
                    path.display()
                )));
            }
        }
    }

    let _lock = OutputLock::acquire(&args.out)?;
    let records = (0..n)
        .into_par_iter()
        .map(|l| -> Result<ReplicateRecord, Failure> {
            let data =
                inputs::load_dataset(&study.join(format!("{}.csv", replicate_stem(l, n))), &sites)?;
            let field_path = study.join(format!("{}.csv", field_stem(l, n)));
            let file = std::fs::File::open(&field_path)
                .map_err(|e| Failure::Config(format!("{}: {e}", field_path.display())))?;
            let field = io::read_field(file, &sites, data.n_groups(), data.n_time())
                .map_err(|e| Failure::Config(format!("{}: {e}", field_path.display())))?;
            let truth_values = TruthValues::new(&truth, &field);
            let mut records = Vec::with_capacity(variants.len());
            for v in &variants {
                let path = fits
                    .join(replicate_stem(l, n))
                    .join(v.name())
                    .join("samples.json");
                let samples: PosteriorSamples = inputs::read_json(&path)?;
                let scored = if args.stub_intervals {
                    let stub =
                        FamilyIntervals::unbounded(data.n_sites(), data.n_groups(), data.n_time());
                    fit_record_with(&samples, &data, &truth_values, &stub)
                } else {
                    fit_record(&samples, &data, &truth_values)
                };
                records.push(
                    scored
                        .map_err(|e| Failure::Config(format!("replicate {}, {v}: {e}", l + 1)))?,
                );
            }
            Ok(ReplicateRecord {
                replicate: l,
                fits: records,
                error: None,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let report = CoverageReport::from_records(&variants, records);
    write_json(&args.out.join("report.json"), &report)?;
    let csv_path = args.out.join("report.csv");
    report
        .write_records_csv(create_file(&csv_path)?)
        .map_err(|e| Failure::Config(format!("cannot write {}: {e}", csv_path.display())))?;
    for (name, c) in &report.coverage {
        eprintln!(
            "{name}: Z {:.1}%  G diag {:.1}%  G off {:.1}%  tau2 {:.1}%  rho {:.1}%",
            c.z, c.g_diag, c.g_offdiag, c.tau2, c.rho
        );
    }
    Ok(())
}
