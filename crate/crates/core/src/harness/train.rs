//! Minibatch SGD with softmax cross-entropy, driven through the simulator.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::dataset::Dataset;
use crate::harness::model::{ActShape, ModelSpec};
use crate::harness::sim::{Mode, Params, Schedule, SimConfig, Simulator};
use crate::planner::PartitionPlan;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub mode: Mode,
    pub schedule: Schedule,
    pub nsr: f64,
    /// Stops after this many SGD steps even mid-epoch.
    pub max_steps: Option<usize>,
}

impl TrainConfig {
    pub fn new(mode: Mode, epochs: usize, lr: f64, seed: u64) -> Self {
        TrainConfig {
            epochs,
            lr,
            seed,
            batch_size: 8,
            mode,
            schedule: Schedule::Sequential,
            nsr: 0.0,
            max_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: Mode,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub nsr: f64,
    pub steps: usize,
    /// Mean minibatch loss at every step, before the update.
    pub losses: Vec<f64>,
    /// Training-set accuracy after every epoch.
    pub epoch_accuracy: Vec<f64>,
    pub final_accuracy: f64,
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub params: Params,
}

/// Loss and logit gradient for one sample.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let z = logits.data();
    if label >= z.len() {
        return Err(Error::invalid(format!(
            "label {label} outside {} classes",
            z.len()
        )));
    }
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() + max - z[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[label] -= 1.0;
    Ok((loss, Tensor::new(logits.shape().to_vec(), grad)?))
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

pub fn evaluate(sim: &mut Simulator, params: &Params, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for (x, &y) in dataset.samples().iter().zip(dataset.labels()) {
        if argmax(sim.forward(params, x)?.output.data()) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

fn check_classifier(model: &ModelSpec, dataset: &Dataset) -> Result<usize> {
    let ActShape::Flat(classes) = model.final_shape() else {
        return Err(Error::invalid(
            "training needs a model ending in a flat logit vector",
        ));
    };
    if let Some(&bad) = dataset.labels().iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!(
            "label {bad} outside {classes} classes"
        )));
    }
    if let Some(s) = dataset.samples().first() {
        if s.shape() != model.input() {
            return Err(Error::shape(
                "sample",
                format!("{:?}", model.input()),
                format!("{:?}", s.shape()),
            ));
        }
    }
    Ok(classes)
}

pub fn train(
    model: &ModelSpec,
    plan: &PartitionPlan,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(model, plan, dataset, cfg, |_, _, _| Ok(()))
}

/// [`train`] with a hook called before the first epoch (`epoch = 0`) and
/// after every epoch.
pub fn train_with<F>(
    model: &ModelSpec,
    plan: &PartitionPlan,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &Params, &mut Simulator) -> Result<()>,
{
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if !cfg.lr.is_finite() || cfg.lr < 0.0 {
        return Err(Error::invalid(format!(
            "learning rate must be finite and non-negative, got {}",
            cfg.lr
        )));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    check_classifier(model, dataset)?;
    let sim_cfg = SimConfig {
        mode: cfg.mode,
        schedule: cfg.schedule,
        nsr: cfg.nsr,
        seed: cfg.seed,
    };
    let mut sim = Simulator::new(model, plan, sim_cfg)?;
    let mut params = Params::init(model, cfg.seed);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F0D_E12D_A7A5);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut losses = Vec::new();
    let mut epoch_accuracy = Vec::new();
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);

    on_epoch(0, &params, &mut sim)?;
    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        for batch in order.chunks(cfg.batch_size) {
            if losses.len() >= max_steps {
                break 'epochs;
            }
            let mut acc = params.zeros_like();
            let mut loss = 0.0;
            for &idx in batch {
                let fwd = sim.forward(&params, &dataset.samples()[idx])?;
                let (l, dl) = softmax_cross_entropy(&fwd.output, dataset.labels()[idx])?;
                loss += l;
                let bwd = sim.backward(&params, &fwd.cache, &dl)?;
                acc.axpy(1.0, &bwd.grads)?;
            }
            let scale = 1.0 / batch.len() as f64;
            losses.push(loss * scale);
            params.axpy(-cfg.lr * scale, &acc)?;
        }
        epoch_accuracy.push(evaluate(&mut sim, &params, dataset)?);
        on_epoch(epoch, &params, &mut sim)?;
    }
    let final_accuracy = evaluate(&mut sim, &params, dataset)?;
    Ok(TrainOutcome {
        report: TrainReport {
            mode: cfg.mode,
            epochs: cfg.epochs,
            lr: cfg.lr,
            seed: cfg.seed,
            batch_size: cfg.batch_size,
            nsr: cfg.nsr,
            steps: losses.len(),
            losses,
            epoch_accuracy,
            final_accuracy,
        },
        params,
    })
}
