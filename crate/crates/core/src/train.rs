//! Mini-batch training with AdamW and batch-parallel evaluation.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape};
use crate::classifier::{predict, BagScores};
use crate::error::{Error, Result};
use crate::metrics::compute_f1;
use crate::model::{Model, PreparedBag};
use crate::nn::{AdamW, AdamWConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub shuffle: bool,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 30, seed: 7, batch_size: 4, shuffle: true, optimizer: AdamWConfig::default() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !self.optimizer.lr.is_finite() || self.optimizer.lr < 0.0 {
            return Err(Error::Config(format!("invalid learning rate {}", self.optimizer.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean bag loss over the epoch.
    pub loss: f64,
    /// F1 of the predictions made during the epoch's forward passes.
    pub train_f1: f64,
}

struct BagStep {
    loss: f64,
    grads: Gradients,
    predicted: BTreeSet<String>,
}

fn bag_step(model: &Model, bag: &PreparedBag) -> Result<BagStep> {
    let mut t = Tape::new(&model.store);
    let (l, f) = model.loss(&mut t, bag)?;
    let loss = t.value(l)[[0, 0]];
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("loss is {loss} on bag {}", bag.bag_id)));
    }
    let mut grads = Gradients::new(model.store.len());
    t.backward(l, &mut grads);
    if !grads.all_finite() {
        return Err(Error::Numerical(format!("non-finite gradient on bag {}", bag.bag_id)));
    }
    let pooled = t.value(f.pooled).row(0).to_vec();
    let predicted = predict(&pooled, model.config.classifier.theta, &model.relations);
    Ok(BagStep { loss, grads, predicted })
}

/// Train in place. `on_epoch` sees each epoch's log as soon as it is complete.
pub fn train(
    model: &mut Model,
    bags: &[PreparedBag],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if bags.is_empty() {
        return Err(Error::validation("train", "corpus is empty"));
    }
    let mut opt = AdamW::new(&model.store, cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..bags.len()).collect();
    let gold: Vec<BTreeSet<String>> = bags.iter().map(|b| b.gold_relations.clone()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        let mut predicted = vec![BTreeSet::new(); bags.len()];
        for batch in order.chunks(cfg.batch_size) {
            let steps: Vec<Result<BagStep>> = batch.par_iter().map(|&i| bag_step(model, &bags[i])).collect();
            let mut grads = Gradients::new(model.store.len());
            for (&i, step) in batch.iter().zip(steps) {
                let step = step.map_err(|e| match e {
                    Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}: {m}")),
                    other => other,
                })?;
                total += step.loss;
                grads.merge(&step.grads);
                predicted[i] = step.predicted;
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(&mut model.store, &grads);
            if !model.store.all_finite() {
                return Err(Error::Numerical(format!("epoch {epoch}: parameters became non-finite")));
            }
        }
        let log = EpochLog { epoch, loss: total / bags.len() as f64, train_f1: compute_f1(&predicted, &gold)? };
        log::info!("epoch {} loss {:.6} train_f1 {:.4}", log.epoch, log.loss, log.train_f1);
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Score every bag, in input order.
pub fn score_all(model: &Model, bags: &[PreparedBag]) -> Result<Vec<BagScores>> {
    bags.par_iter().map(|b| model.score(b)).collect()
}

/// Trailing moving average with window `w` (first entry at index `w - 1`).
pub fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    if w == 0 || xs.len() < w {
        return Vec::new();
    }
    xs.windows(w).map(|win| win.iter().sum::<f64>() / w as f64).collect()
}
