//! `graph check | scale | moran`, plus graph loading shared with `fit`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ccbym2::graph::{
    connected_components, grid_graph, load_edge_list, load_roster, morans_i_null_expectation, morans_i_permutation,
    scaling_factor, AdjacencyGraph,
};
use ccbym2::sampler::chain_rng;

use crate::{Classify, GraphCommand, GraphSource, MoranArgs, Outcome};

/// Loads an edge list (optionally ordered by a roster) or builds a lattice.
/// Returns the graph and the files it was read from.
pub fn load(path: Option<&Path>, roster: Option<&Path>, lattice: Option<[usize; 2]>) -> Result<(AdjacencyGraph, Vec<PathBuf>)> {
    match (path, lattice) {
        (Some(p), None) => {
            let mut files = vec![p.to_path_buf()];
            let order = match roster {
                Some(r) => {
                    files.push(r.to_path_buf());
                    Some(load_roster(r)?)
                }
                None => None,
            };
            Ok((load_edge_list(p, order.as_deref())?, files))
        }
        (None, Some([r, c])) => Ok((grid_graph(r, c)?, Vec::new())),
        _ => bail!("give exactly one of an edge list or a lattice"),
    }
}

fn parse_lattice(s: &str) -> Result<[usize; 2]> {
    let (r, c) = s.split_once(['x', 'X']).with_context(|| format!("lattice '{s}' is not ROWSxCOLS"))?;
    Ok([r.trim().parse()?, c.trim().parse()?])
}

fn from_source(src: &GraphSource) -> Outcome<AdjacencyGraph> {
    let lattice = src.lattice.as_deref().map(parse_lattice).transpose().config()?;
    load(src.graph.as_deref(), src.roster.as_deref(), lattice).runtime().map(|(g, _)| g)
}

pub fn run(cmd: &GraphCommand) -> Outcome {
    match cmd {
        GraphCommand::Check(src) => check(&from_source(src)?),
        GraphCommand::Scale(src) => {
            let s = scaling_factor(&from_source(src)?).runtime()?;
            println!("{}", s.value());
            Ok(())
        }
        GraphCommand::Moran(args) => moran(args),
    }
}

fn check(g: &AdjacencyGraph) -> Outcome {
    let comps = connected_components(g);
    let label = if comps.len() == 1 { "component" } else { "components" };
    println!("{} nodes, {} edges, {} {label}", g.len(), g.edges().len(), comps.len());
    let isolated: Vec<&str> = (0..g.len()).filter(|&i| g.degrees()[i] == 0).map(|i| g.names()[i].as_str()).collect();
    if !isolated.is_empty() {
        println!("isolated: {}", isolated.join(", "));
    }
    if comps.len() > 1 {
        for (k, c) in comps.iter().enumerate() {
            let ids: Vec<&str> = c.iter().map(|&i| g.names()[i].as_str()).collect();
            println!("component {}: {}", k + 1, ids.join(", "));
        }
    }
    Ok(())
}

/// Reads `id,value` pairs: ids from the first column, values from `column`
/// (the second column by default). Empty and `NA` values are skipped.
fn read_values(path: &Path, column: Option<&str>) -> Result<HashMap<String, f64>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let header = r.headers()?.clone();
    let k = match column {
        Some(name) => header
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("{}: no column '{name}'", path.display()))?,
        None => 1,
    };
    let mut out = HashMap::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let (Some(id), Some(v)) = (rec.get(0), rec.get(k)) else {
            bail!("{}:{}: expected an area id and a value", path.display(), i + 2);
        };
        let v = v.trim();
        if v.is_empty() || v == "NA" {
            continue;
        }
        let v: f64 = v.parse().with_context(|| format!("{}:{}: bad value '{v}'", path.display(), i + 2))?;
        if out.insert(id.trim().to_string(), v).is_some() {
            bail!("{}: area '{id}' appears twice", path.display());
        }
    }
    Ok(out)
}

fn moran(args: &MoranArgs) -> Outcome {
    let g = from_source(&args.source)?;
    let values = read_values(&args.values, args.column.as_deref()).runtime()?;
    if let Some(id) = values.keys().find(|id| g.index_of(id).is_none()) {
        return Err(crate::Failure::Runtime(anyhow::anyhow!("area '{id}' is not in the graph")));
    }
    let present: Vec<usize> = (0..g.len()).filter(|&i| values.contains_key(&g.names()[i])).collect();
    let sub = if present.len() == g.len() { g.clone() } else { g.subgraph(&present).runtime()? };
    let v: Vec<f64> = sub.names().iter().map(|n| values[n]).collect();
    let mut rng = chain_rng(args.seed, 0);
    let perm = morans_i_permutation(&v, &sub, args.permutations, &mut rng).runtime()?;
    println!("areas: {}", sub.len());
    println!("morans_i: {}", perm.observed);
    println!("expected: {}", morans_i_null_expectation(sub.len()));
    println!("permutation_mean: {}", perm.null_mean);
    println!("permutation_sd: {}", perm.null_sd);
    println!("z: {}", (perm.observed - perm.null_mean) / perm.null_sd);
    println!("p_value: {}", perm.p_value);
    Ok(())
}
