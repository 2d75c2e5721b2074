//! Mini-batch training loop shared by baseline training, the ADMM proximal
//! phase and masked retraining.

use log::info;

use crate::data::Dataset;
use crate::error::Result;
use crate::graph::LayerGraph;
use crate::model::{model_forward, LossValue};
use crate::optim::{Hyper, Optimizer};

/// Derives an independent shuffling seed per (stage, epoch).
pub fn epoch_seed(seed: u64, stage: u64, epoch: u64) -> u64 {
    seed ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Hooks run around every optimizer step.
pub trait StepHooks {
    /// Adjusts the loss and gradients before the step (e.g. adds a penalty).
    fn adjust(&mut self, _model: &LayerGraph, _loss: &mut LossValue) -> Result<()> {
        Ok(())
    }

    /// Runs after the step (e.g. re-applies a mask).
    fn after_step(&mut self, _model: &mut LayerGraph) {}
}

pub struct NoHooks;

impl StepHooks for NoHooks {}

/// Applies one optimizer step to every weighted layer present in
/// `loss.gradients`.
pub fn apply_gradients(model: &mut LayerGraph, opt: &mut Optimizer, loss: &LossValue) -> Result<()> {
    for (name, grad) in &loss.gradients {
        let id = model.find_weighted(name)?;
        let (w, b) = model.params_mut(id);
        opt.step(&format!("{name}.weight"), w, &grad.weights)?;
        opt.step(&format!("{name}.bias"), b, &grad.bias)?;
    }
    Ok(())
}

pub struct EpochRunner<'a> {
    pub data: &'a Dataset,
    pub batch_size: usize,
    pub seed: u64,
    pub stage: u64,
}

impl EpochRunner<'_> {
    /// Runs one epoch and returns the mean training loss over its batches.
    pub fn run(
        &self,
        model: &mut LayerGraph,
        opt: &mut Optimizer,
        epoch: u64,
        hooks: &mut dyn StepHooks,
    ) -> Result<f64> {
        let batches = self
            .data
            .epoch_batches(self.batch_size, epoch_seed(self.seed, self.stage, epoch));
        let mut total = 0.0;
        for idx in &batches {
            let batch = self.data.batch(idx);
            let (_, mut loss) = model_forward(model, &batch)?;
            hooks.adjust(model, &mut loss)?;
            apply_gradients(model, opt, &loss)?;
            hooks.after_step(model);
            total += loss.value;
        }
        Ok(total / batches.len() as f64)
    }
}

/// Training schedule: the learning rate is multiplied by `lr_decay` after
/// every epoch.
#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub hyper: Hyper,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_decay: f64,
    pub seed: u64,
}

/// Plain training; returns the mean loss of every epoch.
pub fn train(model: &mut LayerGraph, data: &Dataset, schedule: Schedule) -> Result<Vec<f64>> {
    let Schedule {
        hyper,
        batch_size,
        epochs,
        lr_decay,
        seed,
    } = schedule;
    let mut opt = Optimizer::new(hyper);
    let runner = EpochRunner {
        data,
        batch_size,
        seed,
        stage: 1,
    };
    let mut losses = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let l = runner.run(model, &mut opt, e as u64, &mut NoHooks)?;
        info!("train epoch {}/{epochs}: loss {l:.5} (lr {:.2e})", e + 1, opt.hyper.lr);
        losses.push(l);
        opt.hyper.lr *= lr_decay;
    }
    Ok(losses)
}
