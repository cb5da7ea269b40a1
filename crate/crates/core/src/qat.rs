//! Training loops: full-precision pretraining, quantization-aware retraining
//! with full-precision shadow weights, and low-lr fine-tuning.
//!
//! During quantization-aware training the forward and backward passes run on
//! the quantized (applied) weights, while the SGD update lands on the
//! full-precision shadow copy, which is then re-quantized with the frozen
//! per-layer step sizes.

use crate::averaging::{Capture, CaptureBank, Metrics};
use crate::data::{shuffle_batches, Dataset};
use crate::error::{Error, Result};
use crate::nn::{evaluate, sgd_momentum_step, Network, OptimizerState};
use crate::quant::{ModelQuantizer, QuantizedModel};
use crate::schedule::{finetune_lrs, ScheduleSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ShadowModel {
    shadow: Network,
    applied: Network,
    quant: ModelQuantizer,
}

impl ShadowModel {
    /// Pair `shadow` with its quantized image under `quant`.
    pub fn new(shadow: Network, quant: ModelQuantizer) -> Result<Self> {
        let applied = quant.quantize_network(&shadow)?;
        Ok(Self {
            shadow,
            applied,
            quant,
        })
    }

    /// Direct quantization of a trained network: per-layer step sizes are
    /// selected on `net` and frozen from here on.
    pub fn from_pretrained(net: Network, bits: u32) -> Result<Self> {
        let quant = ModelQuantizer::fit(&net, bits)?;
        Self::new(net, quant)
    }

    /// Reassemble from persisted parts. `applied` must be on the grid and
    /// share topology and biases with `shadow`.
    pub fn from_parts(shadow: Network, applied: Network, quant: ModelQuantizer) -> Result<Self> {
        if shadow.architecture() != applied.architecture() || shadow.biases() != applied.biases() {
            return Err(Error::InvalidArgument(
                "applied model does not match shadow topology or biases".into(),
            ));
        }
        let applied = QuantizedModel::new(applied, quant)?;
        let (applied, quant) = applied.into_parts();
        Ok(Self {
            shadow,
            applied,
            quant,
        })
    }

    pub fn shadow(&self) -> &Network {
        &self.shadow
    }

    pub fn applied(&self) -> &Network {
        &self.applied
    }

    pub fn quantizer(&self) -> &ModelQuantizer {
        &self.quant
    }

    pub fn applied_model(&self) -> QuantizedModel {
        QuantizedModel::new(self.applied.clone(), self.quant.clone())
            .expect("applied weights are grid-resident")
    }

    /// Round the shadow copy to on-disk (`f32`) precision and re-derive the
    /// applied weights, so a save/load round trip is exact.
    pub fn canonicalize(&mut self) {
        self.shadow.round_to_f32();
        self.requantize();
    }

    fn requantize(&mut self) {
        self.applied = self
            .quant
            .quantize_network(&self.shadow)
            .expect("quantizer matches shadow");
    }
}

/// One quantization-aware SGD step; returns the mini-batch loss.
pub fn qat_train_step(
    model: &mut ShadowModel,
    batch: &Tensor,
    labels: &[usize],
    lr: f64,
    opt: &mut OptimizerState,
) -> Result<f64> {
    let (logits, cache) = model.applied.forward(batch)?;
    let (loss, grads) = model.applied.loss_and_backward(&cache, &logits, labels)?;
    sgd_momentum_step(&mut model.shadow, &grads, opt, lr)?;
    model.requantize();
    Ok(loss)
}

/// Mini-batch and optimizer settings shared by every training loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub momentum: f64,
    /// Coupled L2 scale; applied only in full-precision pretraining.
    pub l2_scale: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            batch_size: 64,
            momentum: 0.9,
            l2_scale: 5e-4,
        }
    }
}

impl TrainOptions {
    fn check(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean mini-batch loss during the epoch.
    pub train_loss: f64,
    /// Metrics of the model used for inference at the end of the epoch.
    pub metrics: Metrics,
}

fn measure(net: &Network, train: &Dataset, eval: Option<&Dataset>) -> Result<Metrics> {
    Ok(Metrics {
        train: evaluate(net, train)?,
        test: eval.map(|d| evaluate(net, d)).transpose()?,
    })
}

fn run_epoch(
    ds: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    mut step: impl FnMut(&Tensor, &[usize]) -> Result<f64>,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let batches = shuffle_batches(ds.len(), batch_size, seed, epoch as u64);
    let mut total = 0.0;
    for idx in &batches {
        let (x, y) = ds.batch(idx);
        total += step(&x, &y)?;
    }
    Ok(total / batches.len() as f64)
}

/// Full-precision SGD with momentum and coupled L2 under `schedule`.
pub fn pretrain(
    mut net: Network,
    ds: &Dataset,
    schedule: &ScheduleSpec,
    seed: u64,
    opts: &TrainOptions,
    eval: Option<&Dataset>,
) -> Result<(Network, Vec<EpochRecord>)> {
    opts.check()?;
    schedule.validate()?;
    let mut opt = OptimizerState::new(&net, opts.momentum, opts.l2_scale)?;
    let mut history = Vec::with_capacity(schedule.total_epochs());
    for epoch in 0..schedule.total_epochs() {
        let lr = schedule.lr_at(epoch)?;
        let train_loss = run_epoch(ds, opts.batch_size, seed, epoch, |x, y| {
            let (logits, cache) = net.forward(x)?;
            let (loss, grads) = net.loss_and_backward(&cache, &logits, y)?;
            sgd_momentum_step(&mut net, &grads, &mut opt, lr)?;
            Ok(loss)
        })?;
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            metrics: measure(&net, ds, eval)?,
        });
    }
    Ok((net, history))
}

#[derive(Debug, Clone)]
pub struct RetrainOutcome {
    pub model: ShadowModel,
    pub bank: CaptureBank,
    pub history: Vec<EpochRecord>,
}

/// Quantization-aware retraining under a cyclical schedule, capturing the
/// model at the end of every capture epoch (the cycle minima).
///
/// Momentum buffers persist across cycles. Captured snapshots are
/// canonicalized to on-disk precision; the training state itself is not.
pub fn retrain(
    mut model: ShadowModel,
    ds: &Dataset,
    schedule: &ScheduleSpec,
    epochs: usize,
    seed: u64,
    opts: &TrainOptions,
    eval: Option<&Dataset>,
) -> Result<RetrainOutcome> {
    opts.check()?;
    if epochs == 0 || epochs > schedule.total_epochs() {
        return Err(Error::InvalidArgument(format!(
            "retrain epochs {epochs} must be in 1..={}",
            schedule.total_epochs()
        )));
    }
    let captures = schedule.capture_epochs()?;
    let mut opt = OptimizerState::new(model.shadow(), opts.momentum, 0.0)?;
    let mut bank = CaptureBank::new(model.quantizer().clone());
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let lr = schedule.lr_at(epoch)?;
        let train_loss = run_epoch(ds, opts.batch_size, seed, epoch, |x, y| {
            qat_train_step(&mut model, x, y, lr, &mut opt)
        })?;
        let metrics = measure(model.applied(), ds, eval)?;
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            metrics,
        });
        if captures.contains(&epoch) {
            let mut snapshot = model.clone();
            snapshot.canonicalize();
            let metrics = measure(snapshot.applied(), ds, eval)?;
            bank.push(Capture {
                epoch,
                lr,
                model: snapshot,
                metrics: Some(metrics),
            })?;
        }
    }
    Ok(RetrainOutcome {
        model,
        bank,
        history,
    })
}

/// Quantization-aware fine-tuning with `lr = initial_lr · decay^epoch`, fresh
/// momentum buffers and no L2 term.
pub fn finetune(
    mut model: ShadowModel,
    ds: &Dataset,
    initial_lr: f64,
    epochs: usize,
    decay: f64,
    seed: u64,
    opts: &TrainOptions,
) -> Result<ShadowModel> {
    opts.check()?;
    let lrs = finetune_lrs(initial_lr, decay, epochs)?;
    let mut opt = OptimizerState::new(model.shadow(), opts.momentum, 0.0)?;
    for (epoch, lr) in lrs.into_iter().enumerate() {
        run_epoch(ds, opts.batch_size, seed, epoch, |x, y| {
            qat_train_step(&mut model, x, y, lr, &mut opt)
        })?;
    }
    Ok(model)
}

/// Train and optional held-out metrics for a quantized model.
pub fn evaluate_quantized(model: &ShadowModel, train: &Dataset, eval: Option<&Dataset>) -> Result<Metrics> {
    measure(model.applied(), train, eval)
}
