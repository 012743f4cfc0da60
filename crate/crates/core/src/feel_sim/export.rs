//! Training-set export for the offline decoder trainer.
//!
//! Each split is a JSON-lines file: a header object `{n, d, fragment_count,
//! version}` followed by one `{round, k_a, pi, x}` object per fragment
//! position of every round. Rounds are assigned to splits by `round % 10`
//! (8 → validation, 9 → test, otherwise train), so splits never share a round.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FeelConfig, Receiver, Simulation};
use crate::channel::ActivityVector;
use crate::par::Exec;
use crate::{Error, Result};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub n: usize,
    pub d: usize,
    pub fragment_count: usize,
    pub version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSample {
    pub round: usize,
    pub k_a: u32,
    pub pi: Vec<f64>,
    pub x: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn of_round(round: usize) -> Split {
        match round % 10 {
            8 => Split::Val,
            9 => Split::Test,
            _ => Split::Train,
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Val => "val.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CollectSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub rounds: usize,
}

/// Runs the PA pipeline for `cfg.rounds` rounds and writes the three split
/// files into `dir`. `d` is the URA codeword length recorded in the header.
pub fn collect_dataset(cfg: &FeelConfig, d: usize, seed: u64, dir: &Path, exec: Exec) -> Result<CollectSummary> {
    if cfg.exact_updates {
        return Err(Error::InvalidArgument(
            "dataset collection needs vector quantisation".into(),
        ));
    }
    std::fs::create_dir_all(dir)?;
    let header = DatasetHeader {
        n: cfg.n,
        d,
        fragment_count: cfg.fragments(),
        version: DATASET_VERSION,
    };
    let mut writers = Vec::new();
    for split in Split::ALL {
        let mut w = BufWriter::new(File::create(dir.join(split.file_name()))?);
        write_line(&mut w, &header)?;
        writers.push(w);
    }
    let mut sim = Simulation::new(cfg.clone(), Receiver::Pa, f64::INFINITY, seed)?.with_exec(exec);
    let mut summary = CollectSummary::default();
    for _ in 0..cfg.rounds {
        let rec = sim.run_round()?;
        let split = Split::of_round(rec.round);
        let w = &mut writers[split as usize];
        for frag in &rec.x {
            let mut x = vec![0u32; cfg.n];
            for &(i, c) in frag {
                x[i as usize] = c;
            }
            let sample = DatasetSample {
                round: rec.round,
                k_a: rec.k_a,
                pi: rec.pi.clone(),
                x,
            };
            write_line(w, &sample)?;
        }
        let count = rec.x.len();
        match split {
            Split::Train => summary.train += count,
            Split::Val => summary.val += count,
            Split::Test => summary.test += count,
        }
        summary.rounds += 1;
    }
    for mut w in writers {
        w.flush()?;
    }
    Ok(summary)
}

fn write_line<T: Serialize>(w: &mut impl Write, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value).map_err(|e| Error::Parse(e.to_string()))?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Reads one split file, checking the header version and every sample's
/// shape and `Σx = K_a`.
pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<DatasetSample>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let first = lines.next().ok_or(Error::Empty("dataset file"))??;
    let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| Error::Parse(format!("header: {e}")))?;
    if header.version != DATASET_VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: DATASET_VERSION,
        });
    }
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let s: DatasetSample = serde_json::from_str(&line).map_err(|e| Error::Parse(format!("sample {i}: {e}")))?;
        if s.x.len() != header.n {
            return Err(Error::shape("x", header.n, s.x.len()));
        }
        if s.pi.len() != header.n {
            return Err(Error::shape("pi", header.n, s.pi.len()));
        }
        if ActivityVector::new(s.x.clone()).k_a() != s.k_a {
            return Err(Error::Parse(format!("sample {i}: counts do not sum to k_a")));
        }
        samples.push(s);
    }
    Ok((header, samples))
}
