//! Experiment configuration, read from TOML.
//!
//! ```toml
//! seed = 1
//! mode = "learnt"            # pa | baseline | learnt
//! snr_db = [0.0, 5.0, 10.0]
//! d = 64                     # URA codeword length
//! weights = "crates/core/fixtures/learnt_weights.json"
//! out = "out"
//!
//! [feel]                     # federated loop, see FeelConfig
//! rounds = 80
//!
//! [bench]                    # decode-bench
//! snr_db = 5.0
//! ```
//!
//! Every field has a default; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderParams, BASELINE_LAYERS};
use crate::feel_sim::{AggregationMode, FeelConfig, Receiver};
use crate::harness::weights::WeightFile;
use crate::ura_codebook::{init_base, synthesize, InitScheme, ShearMatrix, UraCodebook};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub snr_db: f64,
    /// Perfect-aggregation rounds run to draw activity vectors when no
    /// dataset is given.
    pub pa_rounds: usize,
    /// Leading rounds skipped (the codebook is still settling).
    pub skip_rounds: usize,
    pub trials: usize,
    /// Extra learnt weight files benchmarked alongside `weights`.
    pub extra_weights: Vec<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            snr_db: 5.0,
            pa_rounds: 30,
            skip_rounds: 10,
            trials: 400,
            extra_weights: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mode: AggregationMode,
    pub snr_db: Vec<f64>,
    /// URA codeword length.
    pub d: usize,
    /// Codebook of the baseline mode (`W = I`).
    pub baseline_scheme: InitScheme,
    pub baseline_layers: usize,
    pub weights: Option<PathBuf>,
    /// Dataset directory written by `collect` and read by `decode-bench`.
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    /// Share of codewords in the popular subset of the coherence report.
    pub top_fraction: f64,
    pub feel: FeelConfig,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            mode: AggregationMode::Pa,
            snr_db: vec![0.0, 5.0, 10.0, 20.0],
            d: 64,
            baseline_scheme: InitScheme::Gaussian,
            baseline_layers: BASELINE_LAYERS,
            weights: None,
            dataset: None,
            out: PathBuf::from("out"),
            top_fraction: 0.1,
            feel: FeelConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.feel.validate().map_err(|e| Error::config("feel", e.to_string()))?;
        if self.snr_db.is_empty() {
            return Err(Error::config("snr_db", "needs at least one SNR point"));
        }
        if let Some(s) = self.snr_db.iter().find(|s| s.is_nan() || **s == f64::NEG_INFINITY) {
            return Err(Error::config("snr_db", format!("invalid SNR {s}")));
        }
        if self.d == 0 {
            return Err(Error::config("d", "codeword length must be positive"));
        }
        if self.baseline_layers == 0 {
            return Err(Error::config("baseline_layers", "must be positive"));
        }
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(Error::config("top_fraction", "must lie in (0, 1]"));
        }
        if self.mode == AggregationMode::Learnt && self.weights.is_none() {
            return Err(Error::config("weights", "learnt mode needs a weight file"));
        }
        if self.bench.trials == 0 || self.bench.pa_rounds <= self.bench.skip_rounds {
            return Err(Error::config("bench", "needs trials > 0 and pa_rounds > skip_rounds"));
        }
        if self.bench.snr_db.is_nan() {
            return Err(Error::config("bench.snr_db", "invalid SNR"));
        }
        let mut paths: Vec<&Path> = vec![self.out.as_path()];
        paths.extend(self.weights.as_deref());
        paths.extend(self.dataset.as_deref());
        paths.extend(self.bench.extra_weights.iter().map(|p| p.as_path()));
        for (i, a) in paths.iter().enumerate() {
            if paths[..i].contains(a) {
                return Err(Error::config("paths", format!("{} is used twice", a.display())));
            }
        }
        Ok(())
    }

    /// Loads a weight file and checks it against `n` and `d`.
    pub fn load_weight_file(&self, path: &Path) -> Result<WeightFile> {
        let wf = WeightFile::read(path)?;
        if wf.header.n != self.feel.n {
            return Err(Error::config(
                "weights",
                format!("file has n = {}, config has n = {}", wf.header.n, self.feel.n),
            ));
        }
        if wf.header.d != self.d {
            return Err(Error::config(
                "weights",
                format!("file has d = {}, config has d = {}", wf.header.d, self.d),
            ));
        }
        Ok(wf)
    }

    /// Fixed codebook of the baseline mode.
    pub fn baseline_codebook(&self) -> Result<UraCodebook> {
        if self.baseline_scheme == InitScheme::DataDrivenPinv {
            return Err(Error::config(
                "baseline_scheme",
                "the baseline codebook must not need calibration data",
            ));
        }
        let base = init_base(self.feel.n, self.d, self.baseline_scheme, self.seed, None)?;
        synthesize(&base, &ShearMatrix::identity(self.d))
    }

    pub fn receiver(&self) -> Result<Receiver> {
        match self.mode {
            AggregationMode::Pa => Ok(Receiver::Pa),
            AggregationMode::Baseline => Ok(Receiver::Decoder {
                codebook: self.baseline_codebook()?,
                params: DecoderParams::baseline(self.baseline_layers),
                popularity_prior: false,
            }),
            AggregationMode::Learnt => {
                let path = self
                    .weights
                    .as_deref()
                    .ok_or_else(|| Error::config("weights", "missing"))?;
                let wf = self.load_weight_file(path)?;
                Ok(Receiver::Decoder {
                    codebook: wf.codebook()?,
                    params: wf.params(),
                    popularity_prior: true,
                })
            }
        }
    }
}

/// Units of the metrics CSV columns, recorded with the resolved config.
pub const METRIC_UNITS: [(&str, &str); 6] = [
    ("snr_db", "dB"),
    ("round", "count"),
    ("test_acc", "ratio"),
    ("ka_mae", "count"),
    ("frag_recovery", "ratio"),
    ("sigma2_hat", "linear power per symbol"),
];

/// Resolved configuration as TOML, preceded by the CSV column units.
pub fn resolved_config(cfg: &ExperimentConfig, command: &str) -> Result<String> {
    let mut text = format!("# resolved configuration for `{command}`\n# metrics.csv units:");
    for (col, unit) in METRIC_UNITS {
        text.push_str(&format!(" {col} [{unit}]"));
    }
    text.push('\n');
    text.push_str(&cfg.to_toml()?);
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let text = resolved_config(&cfg, "simulate").unwrap();
        assert!(text.contains("snr_db [dB]"));
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_files_use_defaults() {
        let cfg = ExperimentConfig::from_toml("mode = \"baseline\"\nsnr_db = [3.0]\n[feel]\nrounds = 5\n").unwrap();
        assert_eq!(cfg.mode, AggregationMode::Baseline);
        assert_eq!(cfg.feel.rounds, 5);
        assert_eq!(cfg.feel.n, 256);
        cfg.validate().unwrap();
    }

    #[test]
    fn validation_names_the_field() {
        let err = ExperimentConfig::from_toml("snr_db = []")
            .unwrap()
            .validate()
            .unwrap_err();
        assert!(err.to_string().contains("`snr_db`"), "{err}");
        let err = ExperimentConfig::from_toml("mode = \"learnt\"")
            .unwrap()
            .validate()
            .unwrap_err();
        assert!(err.to_string().contains("`weights`"), "{err}");
        let err = ExperimentConfig::from_toml("out = \"a\"\ndataset = \"a\"")
            .unwrap()
            .validate()
            .unwrap_err();
        assert!(err.to_string().contains("`paths`"), "{err}");
        let err = ExperimentConfig::from_toml("[feel]\nka_min = 0")
            .unwrap()
            .validate()
            .unwrap_err();
        assert!(err.to_string().contains("`feel`"), "{err}");
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
    }
}
