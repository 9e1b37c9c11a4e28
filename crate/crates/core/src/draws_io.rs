//! Per-chain draw files: one row per kept iteration, constrained parameters
//! followed by `lp`, `divergent` and `treedepth`.
//!
//! Floats use Rust's shortest round-trip formatting, so reading a file back
//! reproduces the draws bit for bit.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::sampler::ChainDraws;
use crate::{Error, Result};

const TRAILER: [&str; 3] = ["lp", "divergent", "treedepth"];

/// `chain_<k>.csv` with `k` counted from 1.
pub fn chain_file_name(chain: usize) -> String {
    format!("chain_{}.csv", chain + 1)
}

pub fn write_chain(path: &Path, draws: &ChainDraws) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let header: Vec<&str> = draws.param_names.iter().map(String::as_str).chain(TRAILER).collect();
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for (i, row) in draws.draws.iter().enumerate() {
        let mut line = String::new();
        for v in row {
            line.push_str(&format!("{v},"));
        }
        line.push_str(&format!("{},{},{}", draws.lp[i], u8::from(draws.divergent[i]), draws.treedepth[i]));
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Writes every chain into `dir` and returns the paths in chain order.
pub fn write_chains(dir: &Path, chains: &[ChainDraws]) -> Result<Vec<PathBuf>> {
    chains
        .iter()
        .map(|c| {
            let path = dir.join(chain_file_name(c.chain));
            write_chain(&path, c).map(|()| path)
        })
        .collect()
}

/// Reads a file written by [`write_chain`]. Adaptation results are not stored
/// in draw files, so `step_size` is NaN and `inv_mass` is empty.
pub fn read_chain(path: &Path, chain: usize) -> Result<ChainDraws> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let k = header.len();
    if k < TRAILER.len() || header[k - 3..] != TRAILER {
        return Err(Error::Diagnostics(format!("{} is not a draw file", path.display())));
    }
    let names = header[..k - 3].to_vec();
    let mut out = ChainDraws {
        chain,
        param_names: names,
        draws: Vec::new(),
        lp: Vec::new(),
        divergent: Vec::new(),
        treedepth: Vec::new(),
        n_leapfrog: Vec::new(),
        accept_stat: Vec::new(),
        energy: Vec::new(),
        step_size: f64::NAN,
        inv_mass: Vec::new(),
        warmup_divergences: 0,
        warmup_seconds: 0.0,
        sampling_seconds: 0.0,
    };
    let bad = |line: usize, what: &str| Error::Diagnostics(format!("{}:{line}: bad {what}", path.display()));
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let nums: Vec<f64> = rec
            .iter()
            .take(k - 3)
            .map(|s| s.parse::<f64>().map_err(|_| bad(line, "number")))
            .collect::<Result<_>>()?;
        out.draws.push(nums);
        out.lp.push(rec[k - 3].parse().map_err(|_| bad(line, "lp"))?);
        out.divergent.push(match &rec[k - 2] {
            "0" => false,
            "1" => true,
            _ => return Err(bad(line, "divergent flag")),
        });
        out.treedepth.push(rec[k - 1].parse().map_err(|_| bad(line, "treedepth"))?);
    }
    Ok(out)
}
