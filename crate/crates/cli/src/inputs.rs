use std::path::Path;

use mstcar::graph::AdjacencyGraph;
use mstcar::io::{self, builtin, SiteMap};
use mstcar::model::RateDataset;

use crate::failure::Failure;
use crate::GraphArgs;

fn context(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Config(format!("{}: {e}", path.display()))
}

pub fn load_graph(args: &GraphArgs) -> Result<(AdjacencyGraph, SiteMap), Failure> {
    let graph = match (&args.adjacency, &args.graph) {
        (Some(path), None) => io::read_adjacency_file(path, None).map_err(|e| context(path, e))?,
        (None, Some(name)) => builtin::graph(name).map_err(Failure::config)?,
        _ => {
            return Err(Failure::config(
                "give exactly one of --adjacency or --graph",
            ))
        }
    };
    let sites = match (&args.sites, &args.graph) {
        (Some(path), _) => io::read_site_map_file(path).map_err(|e| context(path, e))?,
        (None, Some(name)) => builtin::site_map(name).map_err(Failure::config)?,
        (None, None) => SiteMap::numbered(graph.n_sites()),
    };
    if sites.len() != graph.n_sites() {
        return Err(Failure::Config(format!(
            "site map has {} sites, graph has {}",
            sites.len(),
            graph.n_sites()
        )));
    }
    Ok((graph, sites))
}

pub fn load_dataset(path: &Path, sites: &SiteMap) -> Result<RateDataset, Failure> {
    io::read_dataset_file(path, sites).map_err(|e| context(path, e))
}

pub fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    io::read_json(path).map_err(|e| context(path, e))
}
