//! Behaviour of the checked-in learnt weight files on desk-scale traffic.

use std::path::PathBuf;

use airfeel::channel::{transmit, ActivityVector, ChannelConfig};
use airfeel::decoder::{decode, DecoderParams};
use airfeel::feel_sim::{
    decoder_sigma2_init, run_single, smoothed_prior, support_f1, DatasetSample, FeelConfig, Receiver,
};
use airfeel::harness::{bench_samples, load_weights, ExperimentConfig};
use airfeel::par::{self, Exec};
use airfeel::ura_codebook::UraCodebook;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn weights() -> (UraCodebook, DecoderParams) {
    load_weights(&fixture("learnt_weights.json")).unwrap()
}

/// Activity vectors drawn from a perfect-aggregation run.
fn traffic(trials: usize) -> Vec<DatasetSample> {
    let mut cfg = ExperimentConfig::default();
    cfg.bench.trials = trials;
    bench_samples(&cfg, Exec::best()).unwrap().eval
}

#[test]
fn k_hat_within_half_a_device_at_20_db() {
    let (c, params) = weights();
    let feel = FeelConfig::default();
    let samples: Vec<DatasetSample> = traffic(2000).into_iter().filter(|s| s.k_a == 10).take(100).collect();
    assert!(samples.len() >= 50);
    let sigma2 = decoder_sigma2_init(20.0, feel.ka_min, feel.ka_max, c.d());
    let errors = par::map_indexed(Exec::best(), samples.len(), |i| {
        let s = &samples[i];
        let y = transmit(
            &ActivityVector::new(s.x.clone()),
            &c,
            &ChannelConfig {
                snr_db: 20.0,
                seed: i as u64,
            },
        )
        .unwrap();
        let prior = smoothed_prior(&s.pi, feel.prior_smoothing);
        (decode(&y, &c, &prior, &params, sigma2, None).unwrap().k_hat - 10.0).abs()
    });
    let mae = errors.iter().sum::<f64>() / errors.len() as f64;
    let within = errors.iter().filter(|&&e| e <= 0.5).count() as f64 / errors.len() as f64;
    assert!(mae <= 0.5, "K_hat MAE {mae}");
    assert!(within >= 0.9, "only {within} of the trials within half a device");
}

#[test]
fn popularity_prior_is_no_worse_than_uniform() {
    let (c, params) = weights();
    let feel = FeelConfig::default();
    let samples = traffic(200);
    assert_eq!(samples.len(), 200);
    let sigma2 = decoder_sigma2_init(5.0, feel.ka_min, feel.ka_max, c.d());
    let uniform = vec![1.0 / c.n() as f64; c.n()];
    let pairs = par::map_indexed(Exec::best(), samples.len(), |i| {
        let s = &samples[i];
        let x = ActivityVector::new(s.x.clone());
        let y = transmit(
            &x,
            &c,
            &ChannelConfig {
                snr_db: 5.0,
                seed: i as u64,
            },
        )
        .unwrap();
        let f1 = |prior: &[f64]| decode(&y, &c, prior, &params, sigma2, None).map_or(0.0, |o| support_f1(&x, &o.x));
        (f1(&smoothed_prior(&s.pi, feel.prior_smoothing)), f1(&uniform))
    });
    let popular: f64 = pairs.iter().map(|p| p.0).sum::<f64>() / 200.0;
    let flat: f64 = pairs.iter().map(|p| p.1).sum::<f64>() / 200.0;
    assert!(popular >= flat, "popularity F1 {popular:.4} < uniform F1 {flat:.4}");
}

#[test]
fn learnt_receiver_recovers_fragments_at_20_db() {
    let cfg = ExperimentConfig::from_toml(&format!(
        "mode = \"learnt\"\nweights = \"{}\"\n[feel]\nrounds = 20\n",
        fixture("learnt_weights.json").display()
    ))
    .unwrap();
    let rx: Receiver = cfg.receiver().unwrap();
    let run = run_single(&cfg.feel, rx, 20.0, cfg.seed, Exec::best()).unwrap();
    let mean = run.rows.iter().map(|r| r.frag_recovery).sum::<f64>() / run.rows.len() as f64;
    assert!(mean >= 0.95, "mean per-round fragment recovery {mean}");
}
