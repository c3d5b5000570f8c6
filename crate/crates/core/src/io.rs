//! File formats.
//!
//! * Adjacency: CSV `site_a,site_b`, one edge per row, 1-based indices.
//! * Site map: CSV `site_id,index` mapping external identifiers to 1-based
//!   indices.
//! * Data: long CSV `site_id,group,time,rate,population` with the rate per
//!   100,000 and the population in persons. A missing rate is an empty
//!   field with population 0.
//! * Population table: CSV `site_id,group,time,population` in persons.
//! * Summaries: CSV `parameter_family,site,group,time,median,lo95,hi95`
//!   with 1-based indices; off-diagonal `G` entries write `k-k2` in the
//!   group column.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{Family, IntervalSummary, ParameterKey, SummaryRow};
use crate::error::{Error, Result};
use crate::graph::AdjacencyGraph;
use crate::model::RateDataset;

/// Persons per population unit.
pub const POPULATION_UNIT: f64 = 100_000.0;

/// Maps external site identifiers to 0-based indices and back.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SiteMap {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl SiteMap {
    /// Identity map: site `i` is called `i + 1`.
    pub fn numbered(n_sites: usize) -> Self {
        let ids: Vec<String> = (1..=n_sites).map(|i| i.to_string()).collect();
        let index = ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Self { ids, index }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, site: usize) -> &str {
        &self.ids[site]
    }

    pub fn lookup(&self, id: &str) -> Result<usize> {
        self.index
            .get(id.trim())
            .copied()
            .ok_or_else(|| Error::Parse(format!("unknown site id `{id}`")))
    }
}

#[derive(Deserialize)]
struct EdgeRow {
    site_a: usize,
    site_b: usize,
}

/// Reads 1-based edges; `n_sites` defaults to the largest index seen.
pub fn read_adjacency<R: Read>(reader: R, n_sites: Option<usize>) -> Result<AdjacencyGraph> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut edges = Vec::new();
    for row in rdr.deserialize::<EdgeRow>() {
        let row = row?;
        edges.push((row.site_a, row.site_b));
    }
    let n = n_sites.unwrap_or_else(|| edges.iter().map(|&(a, b)| a.max(b)).max().unwrap_or(0));
    AdjacencyGraph::from_one_based(n, &edges)
}

pub fn read_adjacency_file(path: &Path, n_sites: Option<usize>) -> Result<AdjacencyGraph> {
    read_adjacency(File::open(path)?, n_sites)
}

pub fn write_adjacency<W: Write>(graph: &AdjacencyGraph, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["site_a", "site_b"])?;
    for &(a, b) in graph.edges() {
        w.write_record([(a + 1).to_string(), (b + 1).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct SiteMapRow {
    site_id: String,
    index: usize,
}

pub fn read_site_map<R: Read>(reader: R) -> Result<SiteMap> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows = Vec::new();
    for row in rdr.deserialize::<SiteMapRow>() {
        rows.push(row?);
    }
    let n = rows.len();
    let mut ids = vec![None; n];
    for row in rows {
        if row.index == 0 || row.index > n {
            return Err(Error::Parse(format!(
                "site index {} out of range 1..={n}",
                row.index
            )));
        }
        if ids[row.index - 1].replace(row.site_id.clone()).is_some() {
            return Err(Error::Parse(format!("duplicate site index {}", row.index)));
        }
    }
    let ids: Vec<String> = ids.into_iter().map(Option::unwrap).collect();
    let mut index = HashMap::new();
    for (i, id) in ids.iter().enumerate() {
        if index.insert(id.clone(), i).is_some() {
            return Err(Error::Parse(format!("duplicate site id `{id}`")));
        }
    }
    Ok(SiteMap { ids, index })
}

pub fn read_site_map_file(path: &Path) -> Result<SiteMap> {
    read_site_map(File::open(path)?)
}

pub fn write_site_map<W: Write>(sites: &SiteMap, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["site_id", "index"])?;
    for (i, id) in sites.ids.iter().enumerate() {
        w.write_record([id.as_str(), &(i + 1).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct DataRow {
    site_id: String,
    group: usize,
    time: usize,
    rate: Option<f64>,
    population: f64,
}

/// Reads a long-format rate file into a dataset with per-time intercepts.
/// Every `(site, group, time)` must appear exactly once.
pub fn read_dataset<R: Read>(reader: R, sites: &SiteMap) -> Result<RateDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows = Vec::new();
    for row in rdr.deserialize::<DataRow>() {
        rows.push(row?);
    }
    let n_sites = sites.len();
    let n_groups = rows.iter().map(|r| r.group).max().unwrap_or(0);
    let n_time = rows.iter().map(|r| r.time).max().unwrap_or(0);
    if n_sites == 0 || n_groups == 0 || n_time == 0 {
        return Err(Error::Parse("data file has no cells".into()));
    }
    let cells = n_sites * n_groups * n_time;
    let mut y = vec![0.0; cells];
    let mut pop = vec![0.0; cells];
    let mut observed = vec![false; cells];
    let mut seen = vec![false; cells];
    for row in rows {
        let site = sites.lookup(&row.site_id)?;
        if row.group == 0 || row.time == 0 {
            return Err(Error::Parse("group and time are 1-based".into()));
        }
        let c = site * n_groups * n_time + (row.time - 1) * n_groups + (row.group - 1);
        if std::mem::replace(&mut seen[c], true) {
            return Err(Error::Parse(format!(
                "duplicate cell (site {}, group {}, time {})",
                row.site_id, row.group, row.time
            )));
        }
        match row.rate {
            Some(rate) if row.population > 0.0 => {
                y[c] = rate;
                pop[c] = row.population / POPULATION_UNIT;
                observed[c] = true;
            }
            Some(_) => {
                return Err(Error::Parse(format!(
                    "site {} group {} time {} has a rate but no population",
                    row.site_id, row.group, row.time
                )))
            }
            None => {}
        }
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        let q = n_groups * n_time;
        return Err(Error::Parse(format!(
            "missing cell (site {}, group {}, time {})",
            sites.id(c / q),
            c % n_groups + 1,
            (c % q) / n_groups + 1
        )));
    }
    RateDataset::with_time_intercepts(n_sites, n_groups, n_time, y, pop, observed)
}

pub fn read_dataset_file(path: &Path, sites: &SiteMap) -> Result<RateDataset> {
    read_dataset(File::open(path)?, sites)
}

pub fn write_dataset<W: Write>(data: &RateDataset, sites: &SiteMap, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["site_id", "group", "time", "rate", "population"])?;
    for i in 0..data.n_sites() {
        for k in 0..data.n_groups() {
            for t in 0..data.n_time() {
                let c = data.cell(i, k, t);
                let (rate, pop) = if data.observed()[c] {
                    (
                        data.y()[c].to_string(),
                        (data.pop()[c] * POPULATION_UNIT).to_string(),
                    )
                } else {
                    (String::new(), "0".to_string())
                };
                w.write_record([
                    sites.id(i).to_string(),
                    (k + 1).to_string(),
                    (t + 1).to_string(),
                    rate,
                    pop,
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Populations in persons, indexed like dataset cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationTable {
    pub n_sites: usize,
    pub n_groups: usize,
    pub n_time: usize,
    pub persons: Vec<f64>,
}

#[derive(Deserialize)]
struct PopulationRow {
    site_id: String,
    group: usize,
    time: usize,
    population: f64,
}

pub fn read_population_table<R: Read>(
    reader: R,
    sites: &SiteMap,
    n_groups: usize,
    n_time: usize,
) -> Result<PopulationTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let q = n_groups * n_time;
    let mut persons = vec![f64::NAN; sites.len() * q];
    for row in rdr.deserialize::<PopulationRow>() {
        let row = row?;
        let site = sites.lookup(&row.site_id)?;
        if row.group == 0 || row.group > n_groups || row.time == 0 || row.time > n_time {
            return Err(Error::Parse(format!(
                "population row (group {}, time {}) out of range",
                row.group, row.time
            )));
        }
        if !(row.population >= 0.0) {
            return Err(Error::Parse("populations must be non-negative".into()));
        }
        persons[site * q + (row.time - 1) * n_groups + row.group - 1] = row.population;
    }
    if persons.iter().any(|p| p.is_nan()) {
        return Err(Error::Parse(
            "population table does not cover every cell".into(),
        ));
    }
    Ok(PopulationTable {
        n_sites: sites.len(),
        n_groups,
        n_time,
        persons,
    })
}

pub fn write_population_table<W: Write>(
    table: &PopulationTable,
    sites: &SiteMap,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["site_id", "group", "time", "population"])?;
    let q = table.n_groups * table.n_time;
    for i in 0..table.n_sites {
        for k in 0..table.n_groups {
            for t in 0..table.n_time {
                w.write_record([
                    sites.id(i).to_string(),
                    (k + 1).to_string(),
                    (t + 1).to_string(),
                    table.persons[i * q + t * table.n_groups + k].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes a site-major field (e.g. a true Z) as `site_id,group,time,value`.
pub fn write_field<W: Write>(
    field: &[f64],
    sites: &SiteMap,
    n_groups: usize,
    n_time: usize,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["site_id", "group", "time", "value"])?;
    let q = n_groups * n_time;
    for i in 0..sites.len() {
        for k in 0..n_groups {
            for t in 0..n_time {
                w.write_record([
                    sites.id(i).to_string(),
                    (k + 1).to_string(),
                    (t + 1).to_string(),
                    field[i * q + t * n_groups + k].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct FieldRow {
    site_id: String,
    group: usize,
    time: usize,
    value: f64,
}

pub fn read_field<R: Read>(
    reader: R,
    sites: &SiteMap,
    n_groups: usize,
    n_time: usize,
) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let q = n_groups * n_time;
    let mut field = vec![f64::NAN; sites.len() * q];
    for row in rdr.deserialize::<FieldRow>() {
        let row = row?;
        let site = sites.lookup(&row.site_id)?;
        if row.group == 0 || row.group > n_groups || row.time == 0 || row.time > n_time {
            return Err(Error::Parse("field row out of range".into()));
        }
        field[site * q + (row.time - 1) * n_groups + row.group - 1] = row.value;
    }
    if field.iter().any(|v| v.is_nan()) {
        return Err(Error::Parse("field does not cover every cell".into()));
    }
    Ok(field)
}

fn fmt_index(i: Option<usize>) -> String {
    i.map(|v| (v + 1).to_string()).unwrap_or_default()
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], sites: &SiteMap, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "parameter_family",
        "site",
        "group",
        "time",
        "median",
        "lo95",
        "hi95",
    ])?;
    for row in rows {
        let k = row.key;
        let site = match (k.family, k.site) {
            (Family::Z, Some(i)) => sites.id(i).to_string(),
            (_, s) => fmt_index(s),
        };
        let group = match k.group2 {
            Some(k2) => format!("{}-{}", fmt_index(k.group), k2 + 1),
            None => fmt_index(k.group),
        };
        w.write_record([
            k.family.name().to_string(),
            site,
            group,
            fmt_index(k.time),
            row.summary.median.to_string(),
            row.summary.lower.to_string(),
            row.summary.upper.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct SummaryCsvRow {
    parameter_family: String,
    site: String,
    group: String,
    time: String,
    median: f64,
    lo95: f64,
    hi95: f64,
}

fn parse_index(s: &str) -> Result<Option<usize>> {
    if s.is_empty() {
        return Ok(None);
    }
    let v: usize = s
        .parse()
        .map_err(|_| Error::Parse(format!("bad index `{s}`")))?;
    if v == 0 {
        return Err(Error::Parse("indices are 1-based".into()));
    }
    Ok(Some(v - 1))
}

pub fn read_summary<R: Read>(reader: R, sites: &SiteMap) -> Result<Vec<SummaryRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize::<SummaryCsvRow>() {
        let row = row?;
        let family = Family::parse(&row.parameter_family)?;
        let site = if family == Family::Z && !row.site.is_empty() {
            Some(sites.lookup(&row.site)?)
        } else {
            parse_index(&row.site)?
        };
        let (group, group2) = match row.group.split_once('-') {
            Some((a, b)) => (parse_index(a)?, parse_index(b)?),
            None => (parse_index(&row.group)?, None),
        };
        out.push(SummaryRow {
            key: ParameterKey {
                family,
                site,
                group,
                group2,
                time: parse_index(&row.time)?,
            },
            summary: IntervalSummary {
                median: row.median,
                lower: row.lo95,
                upper: row.hi95,
            },
        });
    }
    Ok(out)
}

/// Writes JSON through a temporary file renamed into place.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    {
        let mut f = std::io::BufWriter::new(File::create(&tmp)?);
        serde_json::to_writer(&mut f, value)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = std::io::BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(f)?)
}

/// Shipped adjacency files, by name.
pub mod builtin {
    use super::*;

    /// California counties (58 sites), hand-compiled from county borders.
    pub const CALIFORNIA58: &str = include_str!("../data/california58.csv");
    pub const CALIFORNIA58_SITES: &str = include_str!("../data/california58_sites.csv");
    /// Synthetic populations for `california58` with 3 groups and 10 times.
    pub const SYNTHETIC_POPULATION58: &str = include_str!("../data/synthetic_population58.csv");
    /// 2 × 5 rook lattice.
    pub const LATTICE10: &str = include_str!("../data/lattice10.csv");

    pub fn graph(name: &str) -> Result<AdjacencyGraph> {
        match name {
            "california58" => read_adjacency(CALIFORNIA58.as_bytes(), Some(58)),
            "lattice10" => read_adjacency(LATTICE10.as_bytes(), Some(10)),
            other => Err(Error::Config(format!("unknown builtin graph `{other}`"))),
        }
    }

    pub fn site_map(name: &str) -> Result<SiteMap> {
        match name {
            "california58" => read_site_map(CALIFORNIA58_SITES.as_bytes()),
            "lattice10" => Ok(SiteMap::numbered(10)),
            other => Err(Error::Config(format!("unknown builtin graph `{other}`"))),
        }
    }

    pub const NAMES: [&str; 2] = ["california58", "lattice10"];
}
