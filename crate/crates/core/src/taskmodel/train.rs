use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{Grads, Lineage, TaskNetwork};
use crate::error::{Error, Result};
use crate::numcore::{rng_derive, Real, Tensor3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn pretrain_default(seed: u64) -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            // 0.01 diverges within two epochs on the synthetic cohort.
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed,
        }
    }

    pub fn finetune_default(seed: u64) -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.0002,
            ..Self::pretrain_default(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        Ok(())
    }
}

/// One labelled training image.
#[derive(Clone, Copy, Debug)]
pub struct TrainSample<'a> {
    pub id: &'a str,
    pub image: &'a Tensor3<f32>,
    pub target: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per epoch, in standardized units.
    pub epoch_losses: Vec<f64>,
    /// Training-set MSE of the final network, in target units.
    pub final_mse: f64,
    pub samples: usize,
}

fn standardization(targets: &[f64]) -> (f64, f64) {
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > 1e-12 { std } else { 1.0 })
}

fn check_samples(samples: &[TrainSample<'_>]) -> Result<()> {
    if let Some(s) = samples.iter().find(|s| !s.target.is_finite()) {
        return Err(Error::NonFinite(format!("target of {}", s.id)));
    }
    Ok(())
}

/// Canonical order: sorted by image id.
fn canonical<'a>(samples: &[TrainSample<'a>]) -> Vec<TrainSample<'a>> {
    let mut out = samples.to_vec();
    out.sort_by(|a, b| a.id.cmp(b.id));
    out
}

/// Mini-batch SGD with momentum and L2 weight decay on every parameter.
/// Epoch `e` visits the canonically ordered samples in a permutation drawn
/// from `rng_derive(seed, e)`. Per-sample gradients are computed in parallel
/// and summed in batch order, so results do not depend on the thread count.
pub fn train_sgd<T: Real>(
    net: &mut TaskNetwork<T>,
    samples: &[TrainSample<'_>],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    check_samples(samples)?;
    let ordered = canonical(samples);
    let (mean, std) = net.target_standardization();
    let inputs: Vec<(Tensor3<T>, T)> = ordered
        .iter()
        .map(|s| (s.image.cast(), T::of((s.target - mean) / std)))
        .collect();

    let mut velocity = Grads::zeros_like(net);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let lr = T::of(config.learning_rate);
    let mu = T::of(config.momentum);
    let wd = T::of(config.weight_decay);
    let bias_free = !net.architecture().bias;
    let bias_slots = net.bias_slots();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        rng_derive(config.seed, epoch as u64).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(T, Grads<T>)> = batch
                .par_iter()
                .map(|&i| net.loss_and_grads(&inputs[i].0, inputs[i].1))
                .collect::<Result<_>>()?;
            let mut grad = Grads::zeros_like(net);
            let mut batch_loss = T::zero();
            for (l, g) in &results {
                batch_loss += *l;
                grad.add_assign(g);
            }
            let inv = T::one() / T::of(batch.len() as f64);
            grad.scale(inv);
            let batch_loss = (batch_loss * inv).as_f64();
            if !batch_loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            for (slot, ((param, v), g)) in net
                .params_mut()
                .into_iter()
                .zip(&mut velocity.tensors)
                .zip(&grad.tensors)
                .enumerate()
            {
                if bias_free && bias_slots.contains(&slot) {
                    continue;
                }
                for ((p, v), &g) in param.iter_mut().zip(v.iter_mut()).zip(g) {
                    *v = mu * *v + g + wd * *p;
                    *p -= lr * *v;
                }
            }
            loss_sum += batch_loss;
            batches += 1;
        }
        if !net.all_finite() {
            return Err(Error::Divergence { epoch });
        }
        let epoch_loss = if batches > 0 { loss_sum / batches as f64 } else { 0.0 };
        debug!("epoch {epoch}: loss {epoch_loss:.5}");
        epoch_losses.push(epoch_loss);
    }

    let final_mse = training_mse(net, &ordered)?;
    Ok(TrainReport {
        epoch_losses,
        final_mse,
        samples: ordered.len(),
    })
}

/// MSE of `net.predict` against the sample targets.
pub fn training_mse<T: Real>(net: &TaskNetwork<T>, samples: &[TrainSample<'_>]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let errs: Vec<f64> = samples
        .par_iter()
        .map(|s| Ok((net.predict(&s.image.cast())? - s.target).powi(2)))
        .collect::<Result<_>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Trains a fresh network on `samples`. Targets are standardized with their
/// mean and population standard deviation (1 when that is ~0); the constants
/// are stored on the network.
pub fn pretrain(
    net: TaskNetwork<f32>,
    samples: &[TrainSample<'_>],
    config: &TrainConfig,
) -> Result<(TaskNetwork<f32>, TrainReport)> {
    if samples.is_empty() {
        return Err(Error::invalid("pretraining needs at least one sample"));
    }
    check_samples(samples)?;
    let mut net = net;
    let targets: Vec<f64> = samples.iter().map(|s| s.target).collect();
    let (mean, std) = standardization(&targets);
    net.set_target_standardization(mean, std)?;
    net.lineage = Lineage::Pretrained;
    let report = train_sgd(&mut net, samples, config)?;
    info!(
        "pretrained on {} samples for {} epochs: training MSE {:.4}",
        report.samples, config.epochs, report.final_mse
    );
    Ok((net, report))
}

/// Continues training a copy of `base` on one domain's samples, keeping the
/// base network's target standardization. With fewer than `min_samples`
/// samples the copy is returned untrained and flagged as a fallback.
pub fn finetune(
    base: &TaskNetwork<f32>,
    samples: &[TrainSample<'_>],
    config: &TrainConfig,
    domain: usize,
    min_samples: usize,
) -> Result<(TaskNetwork<f32>, TrainReport)> {
    let mut net = base.clone();
    if samples.len() < min_samples.max(1) {
        net.lineage = Lineage::Finetuned { domain, fallback: true };
        info!(
            "domain {domain}: {} samples below minimum {min_samples}, using pretrained weights",
            samples.len()
        );
        let final_mse = training_mse(&net, samples)?;
        return Ok((
            net,
            TrainReport {
                epoch_losses: Vec::new(),
                final_mse,
                samples: samples.len(),
            },
        ));
    }
    net.lineage = Lineage::Finetuned {
        domain,
        fallback: false,
    };
    let report = train_sgd(&mut net, samples, config)?;
    info!(
        "domain {domain}: fine-tuned on {} samples, training MSE {:.4}",
        report.samples, report.final_mse
    );
    Ok((net, report))
}
