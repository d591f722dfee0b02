//! Two-phase optimization: a base classifier first, then bottleneck insertion
//! with frozen embeddings and separate learning rates for pre-existing and
//! new parameters.

mod adam;
mod checkpoint;
mod metrics;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes, Checkpoint, FORMAT_VERSION};
pub use metrics::{accuracy, evaluate, ClassMetrics, EvalReport};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::EncodedExample;
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{Bottleneck, ParamGroup, SentimentClassifier};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Rate for parameters that exist before the bottleneck is inserted.
    pub lr_base: f64,
    /// Rate for bottleneck parameters.
    pub lr_new: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub shuffle: bool,
    /// Global gradient-norm clip; off unless set.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 16,
            lr_base: 1e-3,
            lr_new: 1e-2,
            adam: AdamConfig::default(),
            seed: 17,
            shuffle: true,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        for (name, lr) in [("lr_base", self.lr_base), ("lr_new", self.lr_new)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative rate")));
            }
        }
        Ok(())
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's training examples.
    pub ce: f64,
    /// Mean KL term (0 without a bottleneck).
    pub kl: f64,
    /// `ce + beta * kl`.
    pub total: f64,
    pub dev_acc: f64,
    pub dev_macro_f1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: SentimentClassifier,
    pub curve: Vec<EpochRecord>,
}

/// Phase 1: fits a model without a bottleneck on cross-entropy.
pub fn train_base(
    train: &[EncodedExample],
    dev: &[EncodedExample],
    model: SentimentClassifier,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if model.has_ibil() {
        return Err(Error::Contract(
            "train_base expects a model without a bottleneck".into(),
        ));
    }
    let mut model = model;
    let lr = config.lr_base;
    let curve = fit(&mut model, train, dev, config, 0.0, |_| lr)?;
    Ok(TrainOutcome { model, curve })
}

/// Phase 2: inserts a fresh bottleneck of width `low_dim` into a trained base
/// model, freezes the embedding tables and optimizes CE + beta·KL in sample
/// mode.
pub fn train_ibil(
    train: &[EncodedExample],
    dev: &[EncodedExample],
    base: &SentimentClassifier,
    config: &TrainConfig,
    beta: f64,
    low_dim: usize,
) -> Result<TrainOutcome> {
    if base.has_ibil() {
        return Err(Error::Contract("base model already has a bottleneck".into()));
    }
    let mut model = base.clone();
    model.config.low_dim = low_dim;
    model.config.beta = beta;
    model.config.validate()?;
    model.insert_ibil()?;
    model.frozen_embedding = true;
    let (lr_base, lr_new) = (config.lr_base, config.lr_new);
    let curve = fit(&mut model, train, dev, config, beta, |group| match group {
        ParamGroup::Ibil => lr_new,
        _ => lr_base,
    })?;
    Ok(TrainOutcome { model, curve })
}

fn fit(
    model: &mut SentimentClassifier,
    train: &[EncodedExample],
    dev: &[EncodedExample],
    config: &TrainConfig,
    beta: f64,
    lr_for: impl Fn(ParamGroup) -> f64,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training corpus is empty".into()));
    }
    let lrs: Vec<f64> = model
        .params()
        .iter()
        .map(|(name, _)| match SentimentClassifier::param_group(name) {
            ParamGroup::Embedding if model.frozen_embedding => 0.0,
            group => lr_for(group),
        })
        .collect();
    let mut state = {
        let params = model.params();
        let refs: Vec<&Tensor> = params.iter().map(|(_, t)| *t).collect();
        AdamState::new(&refs)
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = rng::stream(config.seed, "shuffle");
    let mut curve = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        if config.shuffle {
            use rand::seq::SliceRandom;
            order.shuffle(&mut shuffle_rng);
        }
        let (mut ce_sum, mut kl_sum) = (0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let examples: Vec<&EncodedExample> = batch.iter().map(|&i| &train[i]).collect();
            let snapshot = &*model;
            let results = exec::map(&examples, |ex| {
                let mut noise = rng::stream(config.seed, &format!("noise:{epoch}:{}", ex.id));
                snapshot.loss_and_grads(ex, Bottleneck::Sample(&mut noise), beta)
            });
            let mut sum: Option<Vec<Tensor>> = None;
            for r in results {
                let (ce, kl, grads) = r?;
                ce_sum += ce;
                kl_sum += kl;
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let mut grads = sum.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            if let Some(max_norm) = config.grad_clip {
                clip_global_norm(&mut grads, max_norm);
            }
            adam_step(&mut model.params_mut(), &grads, &mut state, &lrs, &config.adam)?;
        }
        let n = train.len() as f64;
        let (ce, kl) = (ce_sum / n, kl_sum / n);
        let (dev_acc, dev_macro_f1) = if dev.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let report = evaluate(&*model, dev)?;
            (report.accuracy, report.macro_f1)
        };
        curve.push(EpochRecord {
            epoch,
            ce,
            kl,
            total: ce + beta * kl,
            dev_acc,
            dev_macro_f1,
        });
    }
    Ok(curve)
}

fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}
