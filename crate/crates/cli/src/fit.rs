use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use mstcar::covariance::CovarianceSpec;
use mstcar::graph::AdjacencyGraph;
use mstcar::io::{self, SiteMap};
use mstcar::model::{PriorConfig, RateDataset};
use mstcar::random::derive_seed;
use mstcar::sampler::{Chain, ChainCheckpoint, SamplerConfig, Variant};
use mstcar::simstudy::truth_state;
use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::failure::Failure;
use crate::inputs;
use crate::lock::OutputLock;
use crate::outputs::{write_fit_outputs, write_json};
use crate::GraphArgs;

#[derive(Args)]
pub struct FitArgs {
    /// Rate CSV (`site_id,group,time,rate,population`).
    #[arg(long, env = "MSTCAR_DATA")]
    data: PathBuf,
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long, env = "MSTCAR_OUT")]
    out: PathBuf,
    /// mstcar, separable, stcar, a comma-separated list, or all.
    #[arg(long, env = "MSTCAR_VARIANT", default_value = "mstcar")]
    variant: String,
    #[arg(long, env = "MSTCAR_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "MSTCAR_ITERATIONS", default_value_t = 6000)]
    iterations: usize,
    #[arg(long, env = "MSTCAR_BURN_IN", default_value_t = 1000)]
    burn_in: usize,
    #[arg(long, env = "MSTCAR_THIN", default_value_t = 10)]
    thin: usize,
    /// Initial sd of the logit-scale random walk on ρ.
    #[arg(long, env = "MSTCAR_RHO_SD", default_value_t = 0.5)]
    rho_sd: f64,
    /// Leave Z uncentered instead of moving its site mean into β.
    #[arg(long, env = "MSTCAR_NO_CENTER")]
    no_center: bool,
    /// Prior JSON; individual prior flags override its fields.
    #[arg(long, env = "MSTCAR_PRIOR")]
    prior: Option<PathBuf>,
    #[arg(long, env = "MSTCAR_RHO_A")]
    rho_a: Option<f64>,
    #[arg(long, env = "MSTCAR_RHO_B")]
    rho_b: Option<f64>,
    /// Inverse-Wishart scale, as a multiple of the identity.
    #[arg(long, env = "MSTCAR_G_SCALE")]
    g_scale: Option<f64>,
    #[arg(long, env = "MSTCAR_G_DF")]
    g_df: Option<f64>,
    /// Start from a known covariance truth (JSON) ...
    #[arg(long, env = "MSTCAR_INIT_TRUTH", requires = "init_field")]
    init_truth: Option<PathBuf>,
    /// ... and field (`site_id,group,time,value`).
    #[arg(long, env = "MSTCAR_INIT_FIELD", requires = "init_truth")]
    init_field: Option<PathBuf>,
    /// Write a checkpoint every N iterations (0 = never).
    #[arg(long, env = "MSTCAR_CHECKPOINT_EVERY", default_value_t = 0)]
    checkpoint_every: usize,
    /// Continue from existing checkpoints in the output directory.
    #[arg(long, env = "MSTCAR_RESUME")]
    resume: bool,
    /// Checkpoint and stop after this many iterations.
    #[arg(long, hide = true)]
    stop_after: Option<usize>,
}

/// `all`, one variant name, or a comma-separated list of names.
pub fn parse_variants(s: &str) -> Result<Vec<Variant>, Failure> {
    if s == "all" {
        return Ok(Variant::ALL.to_vec());
    }
    let mut out: Vec<Variant> = Vec::new();
    for part in s.split(',') {
        let v: Variant = part.trim().parse().map_err(Failure::config)?;
        if !out.contains(&v) {
            out.push(v);
        }
    }
    Ok(out)
}

fn prior(args: &FitArgs, n_groups: usize) -> Result<PriorConfig, Failure> {
    let mut prior = match &args.prior {
        Some(path) => inputs::read_json(path)?,
        None => PriorConfig::default_for(n_groups),
    };
    if let Some(a) = args.rho_a {
        prior.rho_beta_a = a;
    }
    if let Some(b) = args.rho_b {
        prior.rho_beta_b = b;
    }
    if let Some(s) = args.g_scale {
        prior.g_scale = DMatrix::identity(n_groups, n_groups) * s;
    }
    if let Some(df) = args.g_df {
        prior.g_df = df;
    }
    prior.validate(n_groups).map_err(Failure::config)?;
    Ok(prior)
}

struct Job<'a> {
    args: &'a FitArgs,
    data: &'a RateDataset,
    graph: &'a AdjacencyGraph,
    sites: &'a SiteMap,
    prior: &'a PriorConfig,
    init: Option<&'a mstcar::model::ModelState>,
}

enum Outcome {
    Finished(mstcar::diagnostics::DicResult),
    Stopped(usize),
}

fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("checkpoint.json")
}

fn fit_variant(job: &Job, variant: Variant) -> Result<Outcome, Failure> {
    let args = job.args;
    let index = Variant::ALL.iter().position(|&v| v == variant).unwrap_or(0);
    let config = SamplerConfig {
        n_iterations: args.iterations,
        burn_in: args.burn_in,
        thin: args.thin,
        variant,
        rho_proposal_sd: args.rho_sd,
        seed: derive_seed(args.seed, &[index as u64]),
        center_z: !args.no_center,
        tune_rho: true,
    };
    let dir = args.out.join(variant.name());
    std::fs::create_dir_all(&dir)
        .map_err(|e| Failure::Config(format!("cannot create {}: {e}", dir.display())))?;
    let cp_path = checkpoint_path(&dir);
    let mut chain = if args.resume && cp_path.exists() {
        let cp: ChainCheckpoint = inputs::read_json(&cp_path)?;
        if cp.config != config {
            return Err(Failure::Config(format!(
                "{} was written with different sampler settings",
                cp_path.display()
            )));
        }
        Chain::resume(job.data, job.graph, job.prior, cp)
    } else {
        match job.init {
            Some(state) => Chain::from_state(job.data, job.graph, job.prior, config, state.clone()),
            None => Chain::new(job.data, job.graph, job.prior, config),
        }
    }
    .map_err(Failure::config)?;

    while !chain.is_finished() {
        chain
            .step()
            .map_err(|e| Failure::Sampler(format!("{variant}: {e}")))?;
        let it = chain.iteration();
        let periodic = args.checkpoint_every > 0 && it % args.checkpoint_every == 0;
        let stop = args.stop_after == Some(it);
        if periodic || stop {
            write_json(&cp_path, &chain.checkpoint())?;
        }
        if stop && !chain.is_finished() {
            return Ok(Outcome::Stopped(it));
        }
    }
    let samples = chain.into_samples();
    write_json(&dir.join("samples.json"), &samples)?;
    let dic = write_fit_outputs(&dir, &samples, job.data, job.sites)?;
    if cp_path.exists() {
        let _ = std::fs::remove_file(&cp_path);
    }
    Ok(Outcome::Finished(dic))
}

pub fn run(args: &FitArgs) -> Result<(), Failure> {
    let variants = parse_variants(&args.variant)?;
    let (graph, sites) = inputs::load_graph(&args.graph)?;
    let data = inputs::load_dataset(&args.data, &sites)?;
    let prior = prior(args, data.n_groups())?;
    let init = match (&args.init_truth, &args.init_field) {
        (Some(truth_path), Some(field_path)) => {
            let truth: CovarianceSpec = inputs::read_json(truth_path)?;
            let file = std::fs::File::open(field_path)
                .map_err(|e| Failure::Config(format!("{}: {e}", field_path.display())))?;
            let field = io::read_field(file, &sites, data.n_groups(), data.n_time())
                .map_err(|e| Failure::Config(format!("{}: {e}", field_path.display())))?;
            Some(truth_state(&data, &truth, &field))
        }
        _ => None,
    };

    let _lock = OutputLock::acquire(&args.out)?;
    let job = Job {
        args,
        data: &data,
        graph: &graph,
        sites: &sites,
        prior: &prior,
        init: init.as_ref(),
    };
    let outcomes: Vec<(Variant, Outcome)> = variants
        .par_iter()
        .map(|&v| fit_variant(&job, v).map(|o| (v, o)))
        .collect::<Result<_, _>>()?;

    let mut dic = BTreeMap::new();
    for (variant, outcome) in outcomes {
        match outcome {
            Outcome::Finished(d) => {
                dic.insert(variant.name().to_string(), d);
            }
            Outcome::Stopped(it) => {
                eprintln!("{variant}: stopped after iteration {it}; rerun with --resume");
            }
        }
    }
    if dic.len() == variants.len() {
        write_json(&args.out.join("dic.json"), &dic)?;
    }
    Ok(())
}
