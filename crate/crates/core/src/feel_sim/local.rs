//! Device-side local SGD.

use rand::seq::index;

use super::data::{Dataset, DeviceShard};
use super::model::Objective;
use crate::rng::{self, tag};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalSgd {
    /// SGD steps per round (`E`).
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

/// Runs `steps` minibatch SGD steps from `w` on `shard` and returns the
/// parameter delta. Batches are drawn without replacement within a step.
pub fn local_train(
    obj: &impl Objective,
    w: &[f64],
    data: &Dataset,
    shard: &DeviceShard,
    sgd: &LocalSgd,
    seed: u64,
) -> Result<Vec<f64>> {
    if sgd.steps == 0 {
        return Err(Error::InvalidArgument("local steps must be at least 1".into()));
    }
    if shard.is_empty() {
        return Err(Error::Empty("device shard"));
    }
    if w.len() != obj.num_params() {
        return Err(Error::shape("model parameters", obj.num_params(), w.len()));
    }
    let mut g = rng::stream(seed, &[tag::LOCAL, shard.device_id as u64]);
    let batch = sgd.batch.clamp(1, shard.len());
    let mut local = w.to_vec();
    let mut grad = vec![0.0; w.len()];
    let mut picks = Vec::with_capacity(batch);
    for _ in 0..sgd.steps {
        picks.clear();
        picks.extend(
            index::sample(&mut g, shard.len(), batch)
                .iter()
                .map(|i| shard.indices[i]),
        );
        let loss = obj.loss_grad(&local, data, &picks, &mut grad);
        if !loss.is_finite() {
            return Err(Error::LocalDivergence {
                device: shard.device_id,
            });
        }
        for (p, gv) in local.iter_mut().zip(&grad) {
            *p -= sgd.lr * gv;
        }
    }
    Ok(local.iter().zip(w).map(|(a, b)| a - b).collect())
}
