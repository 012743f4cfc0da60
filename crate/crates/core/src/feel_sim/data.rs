//! Synthetic classification data and the IID / label-sorted device split.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{self, tag};
use crate::{Error, Result};

/// Row-major features with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Sparse, non-negative "image-like" classification task.
///
/// Every class owns `modes` prototypes. A prototype lights up each live
/// feature with probability `active_fraction` at an intensity drawn from
/// `level * U(0.5, 1.5)`; the first `dead_features` features are never lit.
/// A sample is `max(0, prototype + noise * N(0, 1) - threshold)`, so most
/// coordinates are exactly zero, as with pixel data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTask {
    pub features: usize,
    pub dead_features: usize,
    pub classes: usize,
    pub modes: usize,
    pub active_fraction: f64,
    pub level: f64,
    pub noise: f64,
    pub threshold: f64,
    pub train_samples: usize,
    pub test_samples: usize,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            features: 64,
            dead_features: 16,
            classes: 10,
            modes: 2,
            active_fraction: 0.25,
            level: 1.5,
            noise: 0.8,
            threshold: 0.5,
            train_samples: 8200,
            test_samples: 2000,
        }
    }
}

impl SyntheticTask {
    /// `(train, test)` drawn from the same mixture.
    pub fn generate(&self, seed: u64) -> (Dataset, Dataset) {
        let mut g = rng::stream(seed, &[tag::DATASET]);
        let dead = self.dead_features.min(self.features);
        let mut centres = vec![0.0; self.classes * self.modes * self.features];
        for proto in centres.chunks_exact_mut(self.features) {
            for v in &mut proto[dead..] {
                if g.random::<f64>() < self.active_fraction {
                    *v = self.level * g.random_range(0.5..1.5);
                }
            }
        }
        let draw = |count: usize, g: &mut rng::SimRng| {
            let mut features = Vec::with_capacity(count * self.features);
            let mut labels = Vec::with_capacity(count);
            for _ in 0..count {
                let label = g.random_range(0..self.classes);
                let mode = g.random_range(0..self.modes);
                let base = (label * self.modes + mode) * self.features;
                for j in 0..self.features {
                    let v = if j < dead {
                        0.0
                    } else {
                        (centres[base + j] + self.noise * g.sample::<f64, _>(StandardNormal) - self.threshold).max(0.0)
                    };
                    features.push(v);
                }
                labels.push(label);
            }
            Dataset {
                features,
                labels,
                dim: self.features,
                classes: self.classes,
            }
        };
        let train = draw(self.train_samples, &mut g);
        let test = draw(self.test_samples, &mut g);
        (train, test)
    }
}

/// One device's local data, as indices into the shared training set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceShard {
    pub device_id: usize,
    pub indices: Vec<usize>,
}

impl DeviceShard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Splits `labels` over `devices` equally sized shards.
///
/// The tail `len % devices` samples are dropped. Each device receives
/// `round(iid_fraction * B)` samples drawn uniformly at random; the rest of
/// the data is sorted by label, cut into `devices * shards_per_device`
/// contiguous shards and dealt round-robin.
pub fn partition_dataset(
    labels: &[usize],
    devices: usize,
    iid_fraction: f64,
    shards_per_device: usize,
    seed: u64,
) -> Result<Vec<DeviceShard>> {
    if devices == 0 || shards_per_device == 0 {
        return Err(Error::InvalidArgument("need at least one device and one shard".into()));
    }
    if !(0.0..=1.0).contains(&iid_fraction) {
        return Err(Error::InvalidArgument(format!(
            "iid fraction {iid_fraction} outside [0, 1]"
        )));
    }
    let per_device = labels.len() / devices;
    if per_device == 0 {
        return Err(Error::InvalidArgument("fewer samples than devices".into()));
    }
    let iid_per_device = (iid_fraction * per_device as f64).round() as usize;
    let sorted_per_device = per_device - iid_per_device;
    if sorted_per_device % shards_per_device != 0 {
        return Err(Error::InvalidArgument(format!(
            "{sorted_per_device} label-sorted samples per device do not split into {shards_per_device} shards"
        )));
    }
    let shard_len = sorted_per_device / shards_per_device;

    let mut g = rng::stream(seed, &[tag::PARTITION]);
    let mut order: Vec<usize> = (0..devices * per_device).collect();
    order.shuffle(&mut g);
    let (iid, rest) = order.split_at(devices * iid_per_device);
    let mut rest = rest.to_vec();
    rest.sort_by_key(|&i| (labels[i], i));

    let mut shards: Vec<DeviceShard> = (0..devices)
        .map(|k| DeviceShard {
            device_id: k,
            indices: iid[k * iid_per_device..(k + 1) * iid_per_device].to_vec(),
        })
        .collect();
    if shard_len > 0 {
        for (s, chunk) in rest.chunks(shard_len).enumerate() {
            shards[s % devices].indices.extend_from_slice(chunk);
        }
    }
    Ok(shards)
}
