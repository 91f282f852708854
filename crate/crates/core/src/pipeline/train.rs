//! Minibatch training loop with Adam and divergence detection.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::loss::{evaluate, BatchTensor, LossKind, LossSpec};
use crate::net::adam::{Adam, AdamConfig};
use crate::net::{Feature, Mode, Network, NetworkConfig};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// One training example: network input and target heatmaps `(N_l, D1, D2, D3)`.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub input: Feature,
    pub target: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub loss: LossSpec,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Validation median (mm) above which an epoch counts towards divergence.
    pub divergence_threshold_mm: f64,
    pub divergence_patience: usize,
    /// Epochs over which the penalty weight ramps linearly up from 0; 0 disables the ramp.
    pub penalty_warmup_epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when the validation set is empty.
    pub val_median_mm: Option<f64>,
}

pub struct Trained {
    pub network: Network,
    pub history: Vec<EpochRecord>,
    /// Reason training was aborted, if it diverged.
    pub diverged: Option<String>,
}

/// Supplies the examples for one epoch; called once per epoch with the shared RNG.
pub type Sampler<'a> = dyn FnMut(usize, &mut ChaCha8Rng) -> Result<Vec<Arc<TrainItem>>> + 'a;
/// Median validation error (mm) of the current network, or `None` without validation data.
pub type Validator<'a> = dyn FnMut(&Network) -> Result<Option<f64>> + 'a;

fn batch_tensors(batch: &[Arc<TrainItem>], outputs: &[Feature]) -> Result<(BatchTensor, BatchTensor)> {
    let first = &outputs[0];
    let shape = [batch.len(), first.channels, first.dims[0], first.dims[1], first.dims[2]];
    let mut pred = Vec::with_capacity(shape.iter().product());
    let mut target = Vec::with_capacity(pred.capacity());
    for (item, out) in batch.iter().zip(outputs) {
        if item.target.len() != out.data.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} target values", out.data.len()),
                actual: item.target.len().to_string(),
            });
        }
        pred.extend(out.data.iter().map(|&v| v as f64));
        target.extend_from_slice(&item.target);
    }
    Ok((BatchTensor::new(shape, pred)?, BatchTensor::new(shape, target)?))
}

fn split_grad(grad: &[f64], outputs: &[Feature]) -> Vec<Feature> {
    let per = outputs[0].data.len();
    outputs
        .iter()
        .enumerate()
        .map(|(b, o)| Feature::from_vec(o.channels, o.dims, grad[b * per..(b + 1) * per].iter().map(|&g| g as f32).collect()))
        .collect()
}

/// The loss used in `epoch`: the penalty weight is scaled by `epoch / warmup` until the
/// warm-up is over. A zero weight drops the penalty entirely.
pub fn loss_at_epoch(spec: &LossSpec, warmup: usize, epoch: usize) -> LossSpec {
    if epoch >= warmup || !spec.penalized() {
        return spec.clone();
    }
    let mut s = spec.clone();
    s.lambda *= epoch as f64 / warmup as f64;
    if s.lambda == 0.0 {
        if s.kind == LossKind::Glip {
            s.kind = LossKind::OtOnly;
        } else {
            s.add_grid_penalty = false;
        }
    }
    s
}

/// Trains a freshly initialized network.
///
/// Stops early when the loss or gradient is non-finite, or when the validation median
/// stays above the divergence threshold for `divergence_patience` consecutive epochs.
pub fn train_network(
    net_cfg: NetworkConfig,
    settings: &TrainSettings,
    sampler: &mut Sampler<'_>,
    validate: &mut Validator<'_>,
) -> Result<Trained> {
    if settings.batch_size == 0 || settings.epochs == 0 {
        return Err(Error::InvalidArgument("epochs and batch_size must be >= 1".into()));
    }
    let mut net = Network::build(net_cfg)?;
    let mut adam = Adam::new(settings.adam, net.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut history = Vec::with_capacity(settings.epochs);
    let mut strikes = 0;
    for epoch in 0..settings.epochs {
        let mut items = sampler(epoch, &mut rng)?;
        if items.is_empty() {
            return Err(Error::InvalidArgument("no training examples".into()));
        }
        items.shuffle(&mut rng);
        let loss_spec = loss_at_epoch(&settings.loss, settings.penalty_warmup_epochs, epoch);
        let mut total = 0.0;
        for batch in items.chunks(settings.batch_size) {
            let inputs: Vec<Feature> = batch.iter().map(|i| i.input.clone()).collect();
            let (outputs, tape) = net.forward(&inputs, Mode::Train)?;
            let (pred, target) = batch_tensors(batch, &outputs)?;
            let loss = match evaluate(&loss_spec, &pred, &target) {
                Ok(l) => l,
                Err(Error::NonFinite { .. }) => {
                    return Ok(diverged(net, history, format!("non-finite prediction in epoch {epoch}")));
                }
                Err(e) => return Err(e),
            };
            if !loss.value.is_finite() || loss.grad.iter().any(|g| !g.is_finite()) {
                return Ok(diverged(net, history, format!("non-finite loss in epoch {epoch}")));
            }
            let grads = net.backward(&tape, &split_grad(&loss.grad, &outputs))?;
            if grads.iter().any(|g| !g.is_finite()) {
                return Ok(diverged(net, history, format!("non-finite gradient in epoch {epoch}")));
            }
            adam.step(net.params_mut(), &grads);
            net.update_running_stats(&tape);
            total += loss.value * batch.len() as f64;
        }
        let train_loss = total / items.len() as f64;
        let val_median_mm = match validate(&net) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => {
                return Ok(diverged(net, history, format!("non-finite validation output in epoch {epoch}")));
            }
            Err(e) => return Err(e),
        };
        log::debug!("epoch {epoch}: loss {train_loss:.6e}, val median {val_median_mm:?} mm");
        history.push(EpochRecord { epoch, train_loss, val_median_mm });
        if val_median_mm.is_some_and(|m| m > settings.divergence_threshold_mm) {
            strikes += 1;
            if strikes >= settings.divergence_patience {
                let reason = format!(
                    "validation median above {:.2} mm for {strikes} consecutive epochs",
                    settings.divergence_threshold_mm
                );
                return Ok(diverged(net, history, reason));
            }
        } else {
            strikes = 0;
        }
    }
    Ok(Trained { network: net, history, diverged: None })
}

fn diverged(network: Network, history: Vec<EpochRecord>, reason: String) -> Trained {
    log::warn!("training diverged: {reason}");
    Trained { network, history, diverged: Some(reason) }
}

/// Per-epoch metrics with a header row and schema version column.
pub fn write_metrics_csv(path: &Path, history: &[EpochRecord], diverged: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let row = |w: &mut csv::Writer<std::fs::File>, fields: &[String]| w.write_record(fields).map_err(|e| csv_err(path, e));
    row(&mut w, &["schema_version", "epoch", "train_loss", "val_median_mm", "diverged"].map(String::from))?;
    for (i, r) in history.iter().enumerate() {
        let last = i + 1 == history.len();
        row(
            &mut w,
            &[
                METRICS_SCHEMA_VERSION.to_string(),
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.val_median_mm.map(|m| m.to_string()).unwrap_or_default(),
                (diverged && last).to_string(),
            ],
        )?;
    }
    w.flush().map_err(io_err(path))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format { path: path.into(), message: e.to_string() }
}
