use std::path::{Path, PathBuf};

use clap::Args;
use mstcar::graph::spectral_basis;
use mstcar::io;
use mstcar::simstudy::{
    design_populations, design_replicate, design_truth, GraphSource, PopulationMode, SimDesign,
};
use rayon::prelude::*;

use crate::failure::Failure;
use crate::lock::OutputLock;
use crate::outputs::{create_file, write_json};

#[derive(Args)]
pub struct SimulateArgs {
    /// Design JSON; relative paths inside it resolve against its directory.
    #[arg(long, env = "MSTCAR_DESIGN")]
    design: PathBuf,
    #[arg(long, env = "MSTCAR_OUT")]
    out: PathBuf,
}

/// `replicate_001`-style stem for replicate `l` (0-based) of `n`.
pub fn replicate_stem(l: usize, n: usize) -> String {
    let width = n.to_string().len().max(3);
    format!("replicate_{:0width$}", l + 1)
}

pub fn field_stem(l: usize, n: usize) -> String {
    replicate_stem(l, n).replacen("replicate", "field", 1)
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_relative() {
        base.join(path)
    } else {
        path.to_path_buf()
    }
}

pub fn load_design(path: &Path) -> Result<SimDesign, Failure> {
    let mut design: SimDesign = crate::inputs::read_json(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    if let GraphSource::File(p) = &mut design.graph {
        *p = resolve(base, p);
    }
    if let PopulationMode::Table { path: p, .. } = &mut design.population_mode {
        *p = resolve(base, p);
    }
    design.validate().map_err(Failure::config)?;
    Ok(design)
}

pub fn run(args: &SimulateArgs) -> Result<(), Failure> {
    let design = load_design(&args.design)?;
    let graph = design.graph.load().map_err(Failure::config)?;
    let sites = design
        .graph
        .site_map(graph.n_sites())
        .map_err(Failure::config)?;
    let populations = design_populations(&design, &sites).map_err(Failure::config)?;
    let basis = spectral_basis(&graph).map_err(Failure::generation)?;
    let truth = design_truth(&design).map_err(Failure::generation)?;

    let _lock = OutputLock::acquire(&args.out)?;
    let out = &args.out;
    write_json(&out.join("design.json"), &design)?;
    write_json(&out.join("truth.json"), &truth)?;
    write_json(&out.join("prior.json"), &design.matched_prior())?;
    let io_err = |e: mstcar::Error| Failure::Config(format!("cannot write outputs: {e}"));
    io::write_adjacency(&graph, create_file(&out.join("adjacency.csv"))?).map_err(io_err)?;
    io::write_site_map(&sites, create_file(&out.join("sites.csv"))?).map_err(io_err)?;

    let n = design.n_replicates;
    (0..n)
        .into_par_iter()
        .try_for_each(|l| -> Result<(), Failure> {
            let (field, data) = design_replicate(&design, &truth, &basis, &populations, l)
                .map_err(|e| Failure::Generation(format!("replicate {}: {e}", l + 1)))?;
            let data_path = out.join(format!("{}.csv", replicate_stem(l, n)));
            io::write_dataset(&data, &sites, create_file(&data_path)?).map_err(io_err)?;
            let field_path = out.join(format!("{}.csv", field_stem(l, n)));
            io::write_field(
                &field,
                &sites,
                design.n_groups,
                design.n_time,
                create_file(&field_path)?,
            )
            .map_err(io_err)?;
            Ok(())
        })?;
    eprintln!("wrote {n} replicate(s) to {}", out.display());
    Ok(())
}
