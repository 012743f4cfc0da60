//! Regenerates the checked-in learnt weight files.
//!
//! Runs the perfect-aggregation pipeline with the default configuration,
//! keeps the training-split rounds, and fits one weight file per initial
//! codebook scheme.
//!
//! ```text
//! cargo run --release -p airfeel --example fit_fixture -- [out_dir]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use airfeel::feel_sim::export::Split;
use airfeel::feel_sim::{DatasetSample, FeelConfig, Receiver, Simulation};
use airfeel::fit::{fit_weights, FitConfig};
use airfeel::par::Exec;
use airfeel::ura_codebook::InitScheme;

const COLLECT_SEED: u64 = 2024;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures"));
    std::fs::create_dir_all(&out)?;
    let cfg = FeelConfig::default();
    let mut sim = Simulation::new(cfg.clone(), Receiver::Pa, f64::INFINITY, COLLECT_SEED)?;
    let mut train = Vec::new();
    for _ in 0..cfg.rounds {
        let rec = sim.run_round()?;
        if Split::of_round(rec.round) != Split::Train {
            continue;
        }
        for frag in &rec.x {
            let mut x = vec![0u32; cfg.n];
            for &(i, c) in frag {
                x[i as usize] = c;
            }
            train.push(DatasetSample {
                round: rec.round,
                k_a: rec.k_a,
                pi: rec.pi.clone(),
                x,
            });
        }
    }
    println!("collected {} training samples", train.len());

    for (scheme, file) in [
        (InitScheme::DataDrivenPinv, "learnt_weights.json"),
        (InitScheme::Gaussian, "learnt_weights_gaussian.json"),
    ] {
        let t = Instant::now();
        let fit = FitConfig {
            scheme,
            seed: 7,
            ..Default::default()
        };
        let (wf, report) = fit_weights(&train, &fit, Exec::best())?;
        wf.write(&out.join(file))?;
        println!("{file}: {} ({:.1?})", serde_json::to_string(&report)?, t.elapsed());
    }
    Ok(())
}
