//! `mstcar`: simulate, fit, score coverage and summarize.

mod coverage;
mod failure;
mod fit;
mod inputs;
mod lock;
mod outputs;
mod simulate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use failure::Failure;

#[derive(Parser)]
#[command(
    name = "mstcar",
    version,
    about = "Multivariate space-time CAR models for areal rates"
)]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = "MSTCAR_THREADS", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Draw a truth and replicate datasets from a design file.
    Simulate(simulate::SimulateArgs),
    /// Fit one dataset with one or all model variants.
    Fit(fit::FitArgs),
    /// Score fitted replicates against a simulation's truth.
    Coverage(coverage::CoverageArgs),
    /// Re-summarize a stored sample file.
    Summarize(SummarizeArgs),
}

/// Where the adjacency structure and site identifiers come from.
#[derive(Args, Clone, Debug)]
pub struct GraphArgs {
    /// Adjacency CSV (`site_a,site_b`, 1-based).
    #[arg(long, env = "MSTCAR_ADJACENCY", conflicts_with = "graph")]
    adjacency: Option<PathBuf>,
    /// Shipped graph: california58 or lattice10.
    #[arg(long, env = "MSTCAR_GRAPH")]
    graph: Option<String>,
    /// Site map CSV (`site_id,index`); defaults to the shipped map or 1..N.
    #[arg(long, env = "MSTCAR_SITES")]
    sites: Option<PathBuf>,
}

#[derive(Args)]
pub struct SummarizeArgs {
    /// Sample store written by `fit`.
    #[arg(long, env = "MSTCAR_SAMPLES")]
    samples: PathBuf,
    /// The dataset the samples were fitted to.
    #[arg(long, env = "MSTCAR_DATA")]
    data: PathBuf,
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long, env = "MSTCAR_OUT")]
    out: PathBuf,
}

fn summarize(args: &SummarizeArgs) -> Result<(), Failure> {
    let (_, sites) = inputs::load_graph(&args.graph)?;
    let data = inputs::load_dataset(&args.data, &sites)?;
    let samples: mstcar::sampler::PosteriorSamples = inputs::read_json(&args.samples)?;
    let _lock = lock::OutputLock::acquire(&args.out)?;
    let dic = outputs::write_fit_outputs(&args.out, &samples, &data, &sites)?;
    let mut all = std::collections::BTreeMap::new();
    all.insert(samples.variant.name().to_string(), dic);
    outputs::write_json(&args.out.join("dic.json"), &all)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(failure::CONFIG);
        }
    }
    let result = match &cli.command {
        Command::Simulate(a) => simulate::run(a),
        Command::Fit(a) => fit::run(a),
        Command::Coverage(a) => coverage::run(a),
        Command::Summarize(a) => summarize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
