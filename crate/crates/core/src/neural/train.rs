use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{build_model, mae_loss, ModelSpec, ModelWeights, TrainHistory};
use crate::error::{Error, Result};
use crate::fingerprint::{FingerprintDataset, FingerprintRow, NormStats, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training settings {self:?}")))
        }
    }
}

/// One normalized training example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub input: [f64; 9],
    pub target: [f64; 2],
}

pub fn samples<'a>(
    rows: impl IntoIterator<Item = &'a FingerprintRow>,
    norm: &NormStats,
) -> Vec<Sample> {
    rows.into_iter()
        .map(|r| Sample {
            input: norm.apply(&r.drss),
            target: [r.x, r.y],
        })
        .collect()
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
}

/// Mean absolute error of `weights` on normalized samples.
pub fn sample_mae(weights: &ModelWeights, data: &[Sample]) -> f64 {
    let inputs: Vec<[f64; 9]> = data.iter().map(|s| s.input).collect();
    let targets: Vec<[f64; 2]> = data.iter().map(|s| s.target).collect();
    mae_loss(&weights.forward_batch(&inputs), &targets)
}

/// Adam on mini-batch MAE. The network is updated in place; the returned
/// history has one entry per epoch (validation is empty when `val` is).
pub fn train_samples(
    weights: &mut ModelWeights,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Misuse("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(weights.params.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory::default();
    let mut inputs = Vec::with_capacity(cfg.batch_size);
    let mut targets = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            inputs.clear();
            targets.clear();
            inputs.extend(idx.iter().map(|&i| train[i].input));
            targets.extend(idx.iter().map(|&i| train[i].target));
            let (loss, grad) = weights.loss_and_grad(&inputs, &targets);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, batch });
            }
            total += loss * idx.len() as f64;
            adam.step(&mut weights.params, &grad, cfg);
        }
        history.train_mae.push(total / train.len() as f64);
        if !val.is_empty() {
            history.val_mae.push(sample_mae(weights, val));
        }
    }
    weights.train_seed = Some(cfg.seed);
    weights.history = history.clone();
    Ok(history)
}

/// Builds a fresh network and trains it on the dataset's train split, with
/// the val split for monitoring. Features are normalized with the
/// dataset's stored statistics, or statistics fit on the train split.
pub fn train(
    spec: &ModelSpec,
    init_seed: u64,
    ds: &FingerprintDataset,
    cfg: &TrainConfig,
) -> Result<ModelWeights> {
    let norm = match &ds.norm {
        Some(n) => n.clone(),
        None => NormStats::fit(ds.with_split(Split::Train).map(|r| &r.drss))?,
    };
    let tr = samples(ds.with_split(Split::Train), &norm);
    let va = samples(ds.with_split(Split::Val), &norm);
    let mut weights = build_model(spec, init_seed)?;
    weights.norm = Some(norm);
    train_samples(&mut weights, &tr, &va, cfg)?;
    Ok(weights)
}

impl ModelWeights {
    /// Position estimate from raw ΔRSS in mW.
    pub fn predict(&self, drss: &[f64]) -> Result<(f64, f64)> {
        if drss.len() != 9 {
            return Err(Error::Length {
                expected: 9,
                got: drss.len(),
            });
        }
        if drss.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("ΔRSS {drss:?}")));
        }
        let raw: [f64; 9] = drss.try_into().expect("length checked");
        let x = match &self.norm {
            Some(n) => n.apply(&raw),
            None => raw,
        };
        self.forward(&x)
    }

    /// Batch form of [`ModelWeights::predict`] without input checks.
    pub fn predict_batch(&self, drss: &[[f64; 9]]) -> Vec<[f64; 2]> {
        match &self.norm {
            Some(n) => self.forward_batch(&drss.iter().map(|d| n.apply(d)).collect::<Vec<_>>()),
            None => self.forward_batch(drss),
        }
    }
}
